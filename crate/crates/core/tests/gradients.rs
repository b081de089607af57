//! Finite-difference checks of every differentiable operation and of the
//! full adapter losses.

use mma_core::adapters::{AdapterKind, AdapterModel, AttentionVariant, MmaConfig, UpDownVariant};
use mma_core::gradcheck::{check_function, check_model, sample_coords, GradCheckReport, FD_STEP};
use mma_core::rng::{stream_rng, Rng};
use mma_core::tensor::{Tensor, MASK_NEG};
use mma_core::RunError;
use rand::Rng as _;

const TOL: f64 = 1e-4;

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(data, shape).unwrap()
}

/// Values bounded away from zero so kinked activations are differentiable
/// at every probe point.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(data, shape).unwrap()
}

/// Contracts an output with fixed random weights so that every output
/// element contributes to the scalar being differentiated.
fn weighted(out: &Tensor, seed: u64) -> Result<Tensor, RunError> {
    let w = random(&mut stream_rng(seed, 99), out.shape());
    Ok(out.mul(&w)?.sum())
}

fn check_all<F>(inputs: &[Tensor], f: F) -> GradCheckReport
where
    F: Fn(&[Tensor]) -> Result<Tensor, RunError>,
{
    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    let coords = sample_coords(&sizes, usize::MAX, &mut stream_rng(0, 0));
    let report = check_function(inputs, f, &coords, FD_STEP).unwrap();
    assert!(report.passes(TOL), "worst {:?}", report.worst());
    report
}

#[test]
fn elementwise_with_broadcasting() {
    let mut rng = stream_rng(1, 0);
    let (a, b) = (random(&mut rng, &[3, 4]), random(&mut rng, &[4]));
    check_all(&[a.clone(), b.clone()], |v| weighted(&v[0].add(&v[1])?, 1));
    check_all(&[a.clone(), b.clone()], |v| weighted(&v[0].sub(&v[1])?, 2));
    check_all(&[a.clone(), b.clone()], |v| weighted(&v[0].mul(&v[1])?, 3));
    let c = random(&mut rng, &[3, 1]);
    check_all(&[a.clone(), c], |v| weighted(&v[0].mul(&v[1])?, 4));
    check_all(&[a], |v| weighted(&v[0].scale(-2.5), 5));
}

#[test]
fn activations() {
    let mut rng = stream_rng(2, 0);
    let x = away_from_zero(&mut rng, &[5, 3]);
    check_all(std::slice::from_ref(&x), |v| weighted(&v[0].gelu(), 1));
    check_all(&[x], |v| weighted(&v[0].relu(), 2));
}

#[test]
fn matmul_plain_and_batched() {
    let mut rng = stream_rng(3, 0);
    let (a, b) = (random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2]));
    check_all(&[a, b], |v| weighted(&v[0].matmul(&v[1])?, 1));
    let (a, b) = (random(&mut rng, &[2, 3, 3, 2]), random(&mut rng, &[3, 2, 4]));
    check_all(&[a, b], |v| weighted(&v[0].matmul(&v[1])?, 2));
}

#[test]
fn softmax_with_and_without_mask() {
    let mut rng = stream_rng(4, 0);
    let x = random(&mut rng, &[2, 3, 4]);
    for axis in 0..3 {
        check_all(std::slice::from_ref(&x), |v| weighted(&v[0].softmax(axis)?, axis as u64));
    }
    let mask = Tensor::new(
        vec![0.0, MASK_NEG, 0.0, 0.0, MASK_NEG, MASK_NEG, 0.0, MASK_NEG, 0.0, 0.0, 0.0, MASK_NEG],
        &[3, 4],
    )
    .unwrap();
    check_all(&[x], |v| weighted(&v[0].add(&mask)?.softmax(2)?, 7));
}

#[test]
fn normalizations() {
    let mut rng = stream_rng(5, 0);
    let x = random(&mut rng, &[3, 5]);
    check_all(std::slice::from_ref(&x), |v| weighted(&v[0].l2_normalize(1)?, 1));
    check_all(std::slice::from_ref(&x), |v| weighted(&v[0].l2_normalize(0)?, 2));
    check_all(&[x], |v| weighted(&v[0].layer_norm(1e-5)?, 3));
}

#[test]
fn cross_entropy_loss() {
    let mut rng = stream_rng(6, 0);
    let x = random(&mut rng, &[4, 5]).scale(3.0);
    check_all(&[x], |v| Ok(v[0].cross_entropy(&[0, 4, 2, 2])?));
}

#[test]
fn reductions() {
    let mut rng = stream_rng(7, 0);
    let x = random(&mut rng, &[2, 3, 4]);
    check_all(std::slice::from_ref(&x), |v| Ok(v[0].mul(&v[0])?.sum()));
    check_all(std::slice::from_ref(&x), |v| Ok(v[0].mul(&v[0])?.mean()));
    for axis in 0..3 {
        check_all(std::slice::from_ref(&x), |v| weighted(&v[0].sum_axis(axis)?, axis as u64));
    }
}

#[test]
fn shape_operations() {
    let mut rng = stream_rng(8, 0);
    let x = random(&mut rng, &[2, 3, 4]);
    check_all(std::slice::from_ref(&x), |v| weighted(&v[0].reshape(&[6, 4])?, 1));
    check_all(std::slice::from_ref(&x), |v| weighted(&v[0].permute(&[2, 0, 1])?, 2));
    check_all(std::slice::from_ref(&x), |v| weighted(&v[0].transpose(0, 2)?, 3));
    check_all(std::slice::from_ref(&x), |v| weighted(&v[0].narrow(1, 1, 2)?, 4));
    check_all(std::slice::from_ref(&x), |v| {
        let parts = v[0].split(2, &[1, 3])?;
        Ok(weighted(&parts[0], 5)?.add(&weighted(&parts[1], 6)?)?)
    });
    let y = random(&mut rng, &[3, 1]);
    check_all(&[y], |v| weighted(&v[0].broadcast_to(&[2, 3, 5])?, 7));
    let z = random(&mut rng, &[2, 2, 4]);
    check_all(&[x, z], |v| weighted(&Tensor::concat(&[&v[0], &v[1]], 1)?, 8));
}

#[test]
fn reused_inputs_accumulate() {
    let mut rng = stream_rng(9, 0);
    let x = random(&mut rng, &[3, 3]);
    check_all(&[x], |v| weighted(&v[0].matmul(&v[0])?.add(&v[0].gelu())?, 1));
}

fn model_report(kind: AdapterKind, cfg: MmaConfig, seed: u64) -> GradCheckReport {
    let mut model = AdapterModel::new(kind, cfg.clone(), seed).unwrap();
    let mut rng = stream_rng(seed, 50);
    let text = random(&mut rng, &[3, cfg.emb_dim]).l2_normalize(1).unwrap();
    let image = random(&mut rng, &[4, cfg.emb_dim]).l2_normalize(1).unwrap();
    let labels = [0, 2, 1, 2];
    let sizes: Vec<usize> = model.params().iter().map(|p| p.numel()).collect();
    let coords = sample_coords(&sizes, 120, &mut stream_rng(seed, 51));
    assert!(coords.len() >= 100);
    let report = check_model(
        &mut model,
        |m| Ok(m.logits(&text, &image)?.cross_entropy(&labels)?),
        &coords,
        FD_STEP,
    )
    .unwrap();
    assert!(report.passes(TOL), "{kind:?}: worst {:?}", report.worst());
    assert!(2 * report.resolved() >= report.coords.len(), "{kind:?}: mostly vanishing gradients");
    report
}

fn toy() -> MmaConfig {
    MmaConfig {
        heads: 2,
        ..MmaConfig::with_emb_dim(32)
    }
}

#[test]
fn mma_variants_full_loss() {
    for attention in [AttentionVariant::Mha, AttentionVariant::TransformerBlock] {
        for updown in [UpDownVariant::Linear, UpDownVariant::Mlp] {
            for adapt_text in [true, false] {
                let cfg = MmaConfig {
                    attention,
                    updown,
                    adapt_text,
                    ..toy()
                };
                model_report(AdapterKind::Mma, cfg, 11);
            }
        }
    }
}

#[test]
fn clip_adapter_full_loss() {
    model_report(AdapterKind::ClipAdapter, toy(), 12);
}

#[test]
fn gradients_flow_into_every_mma_parameter() {
    let cfg = toy();
    let model = AdapterModel::new(AdapterKind::Mma, cfg.clone(), 13).unwrap();
    let mut rng = stream_rng(13, 50);
    let text = random(&mut rng, &[3, 32]).l2_normalize(1).unwrap();
    let image = random(&mut rng, &[4, 32]).l2_normalize(1).unwrap();
    model.logits(&text, &image).unwrap().cross_entropy(&[0, 1, 2, 0]).unwrap().backward().unwrap();
    for p in model.params() {
        let g = p.tensor.grad().unwrap();
        assert!(g.iter().any(|v| *v != 0.0), "{} got no gradient", p.name);
    }
}

//! Central finite-difference gradient checks for scalar functions of leaf
//! tensors and for adapter losses.

use alloc::vec::Vec;

use rand::seq::index;

use crate::adapters::AdapterModel;
use crate::error::RunError;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively.
/// Central differences at `FD_STEP` on losses with logits near 100 carry
/// roundoff around 1e-10, so smaller gradients cannot be resolved.
pub const REL_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordCheck {
    pub leaf: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.coords.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.coords.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    /// Coordinates whose gradient is large enough to be compared relatively.
    pub fn resolved(&self) -> usize {
        self.coords
            .iter()
            .filter(|c| c.analytic.abs().max(c.numeric.abs()) > REL_FLOOR)
            .count()
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.coords.iter().all(|c| c.rel_err <= tol)
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.coords.extend(other.coords);
    }
}

/// Up to `n` distinct `(leaf, index)` pairs over leaves of the given sizes;
/// every coordinate when there are at most `n`.
pub fn sample_coords(sizes: &[usize], n: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    let total: usize = sizes.iter().sum();
    let flat: Vec<usize> = if total <= n {
        (0..total).collect()
    } else {
        let mut v = index::sample(rng, total, n).into_vec();
        v.sort_unstable();
        v
    };
    flat.into_iter()
        .map(|mut i| {
            let mut leaf = 0;
            while i >= sizes[leaf] {
                i -= sizes[leaf];
                leaf += 1;
            }
            (leaf, i)
        })
        .collect()
}

/// Compares the backward pass of `f` at `inputs` with central differences.
/// `f` must be a pure function of its arguments and return a scalar.
pub fn check_function<F>(inputs: &[Tensor], f: F, coords: &[(usize, usize)], h: f64) -> Result<GradCheckReport, RunError>
where
    F: Fn(&[Tensor]) -> Result<Tensor, RunError>,
{
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::param(t.to_vec(), t.shape()))
        .collect::<Result<_, _>>()?;
    f(&leaves)?.backward()?;
    let grads: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| alloc::vec![0.0; l.numel()]))
        .collect();

    let eval_at = |leaf: usize, index: usize, delta: f64| -> Result<f64, RunError> {
        let shifted: Vec<Tensor> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut d = t.to_vec();
                if i == leaf {
                    d[index] += delta;
                }
                Tensor::new(d, t.shape())
            })
            .collect::<Result<_, _>>()?;
        Ok(f(&shifted)?.item())
    };

    let mut report = GradCheckReport::default();
    for &(leaf, index) in coords {
        let numeric = (eval_at(leaf, index, h)? - eval_at(leaf, index, -h)?) / (2.0 * h);
        let analytic = grads[leaf][index];
        report.coords.push(CoordCheck {
            leaf,
            index,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    Ok(report)
}

/// Like [`check_function`] with the model's parameters as the inputs.
/// Coordinates index into `model.params()`. Parameter values are restored
/// before returning.
pub fn check_model<F>(model: &mut AdapterModel, loss: F, coords: &[(usize, usize)], h: f64) -> Result<GradCheckReport, RunError>
where
    F: Fn(&AdapterModel) -> Result<Tensor, RunError>,
{
    model.zero_grad();
    loss(model)?.backward()?;
    let grads: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| p.tensor.grad().unwrap_or_else(|| alloc::vec![0.0; p.numel()]))
        .collect();
    model.zero_grad();

    let mut report = GradCheckReport::default();
    for &(leaf, index) in coords {
        let original = model.params()[leaf].tensor.to_vec();
        let mut at = |delta: f64| -> Result<f64, RunError> {
            let mut d = original.clone();
            d[index] += delta;
            model.params_mut()[leaf].set_data(d)?;
            Ok(loss(model)?.item())
        };
        let (plus, minus) = (at(h), at(-h));
        model.params_mut()[leaf].set_data(original)?;
        let numeric = (plus? - minus?) / (2.0 * h);
        let analytic = grads[leaf][index];
        report.coords.push(CoordCheck {
            leaf,
            index,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    Ok(report)
}

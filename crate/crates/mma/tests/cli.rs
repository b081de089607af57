use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mma::reports::read_reports_csv;

fn mma(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mma")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mma(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Path printed on the `outputs:` line.
fn run_dir(stdout: &str) -> PathBuf {
    PathBuf::from(stdout.lines().find_map(|l| l.strip_prefix("outputs: ")).expect("outputs line"))
}

fn synth(dir: &Path) -> String {
    let store = dir.join("store");
    let s = store.to_str().unwrap().to_string();
    ok(&[
        "synth", "--out", &s, "--classes", "6", "--emb-dim", "32", "--train-per-class", "20", "--test-per-class", "5",
        "--seed", "3",
    ]);
    s
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn stderr_line(out: &Output) -> String {
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(text.lines().count(), 1, "stderr: {text}");
    text.trim_end().to_string()
}

#[test]
fn base_new_writes_every_output_and_repeats_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let store = synth(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let args = |out: &Path| {
        vec![
            "base-new".to_string(), "--store".into(), store.clone(), "--adapter".into(), "mma".into(), "--lambda".into(),
            "0.2".into(), "--heads".into(), "4".into(), "--shots".into(), "6".into(), "--seed".into(), "7".into(),
            "--max-epochs".into(), "4".into(), "--out".into(), out.to_str().unwrap().into(),
        ]
    };
    let run = |out: &Path| {
        let v = args(out);
        let refs: Vec<&str> = v.iter().map(String::as_str).collect();
        run_dir(&ok(&refs))
    };
    let da = run(&a);
    let db = run(&b);
    assert_eq!(da.file_name(), db.file_name(), "run id depends only on inputs");
    let ta = tree(&da);
    let names: Vec<String> = ta.iter().map(|(p, _)| p.display().to_string()).collect();
    for f in ["config.json", "report.json", "report.csv", "report.txt", "history.jsonl", "predictions.csv", "checkpoint/checkpoint.json", "checkpoint/params.f64"] {
        assert!(names.contains(&f.to_string()), "missing {f}: {names:?}");
    }
    assert_eq!(ta, tree(&db));
    // rerunning into the same directory rewrites identical bytes
    assert_eq!(run(&a), da);
    assert_eq!(tree(&da), ta);
}

#[test]
fn adapter_none_is_zero_shot_without_training() {
    let tmp = tempfile::tempdir().unwrap();
    let store = synth(tmp.path());
    let out = tmp.path().join("runs");
    let o = out.to_str().unwrap();
    let dir = run_dir(&ok(&["base-new", "--store", &store, "--adapter", "none", "--out", o]));
    assert!(fs::read(dir.join("history.jsonl")).unwrap().is_empty());
    let zs = read_reports_csv(&fs::read(dir.join("report.csv")).unwrap()).unwrap();
    assert_eq!(zs[0].param_count, 0);
    assert_eq!(zs[0].adapter, "identity_clip");

    let dir1 = run_dir(&ok(&["base-new", "--store", &store, "--lambda", "1", "--max-epochs", "3", "--out", o]));
    let lam = read_reports_csv(&fs::read(dir1.join("report.csv")).unwrap()).unwrap();
    assert_eq!((lam[0].base_acc, lam[0].new_acc, lam[0].all_acc), (zs[0].base_acc, zs[0].new_acc, zs[0].all_acc));
    assert_eq!(fs::read(dir1.join("predictions.csv")).unwrap(), fs::read(dir.join("predictions.csv")).unwrap());
}

#[test]
fn eval_of_a_trained_checkpoint_matches_base_new() {
    let tmp = tempfile::tempdir().unwrap();
    let store = synth(tmp.path());
    let o = tmp.path().join("runs");
    let o = o.to_str().unwrap();
    let common = ["--store", &store, "--seed", "2", "--max-epochs", "5", "--shots", "6", "--out", o];
    let bn = run_dir(&ok(&[&["base-new"][..], &common].concat()));
    let tr = run_dir(&ok(&[&["train"][..], &common].concat()));
    assert_eq!(fs::read(tr.join("history.jsonl")).unwrap(), fs::read(bn.join("history.jsonl")).unwrap());
    assert_eq!(tree(&tr.join("checkpoint")), tree(&bn.join("checkpoint")));
    let ckpt = tr.join("checkpoint");
    let ev = run_dir(&ok(&[&["eval", "--checkpoint", ckpt.to_str().unwrap()][..], &common].concat()));
    assert_eq!(fs::read(ev.join("report.json")).unwrap(), fs::read(bn.join("report.json")).unwrap());
    assert_eq!(fs::read(ev.join("predictions.csv")).unwrap(), fs::read(bn.join("predictions.csv")).unwrap());
}

#[test]
fn usage_errors_exit_2_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let store = synth(tmp.path());
    let missing = tmp.path().join("missing");
    let cases: Vec<Vec<&str>> = vec![
        vec!["base-new", "--store", &store, "--bogus"],
        vec!["base-new", "--store", missing.to_str().unwrap()],
        vec!["base-new", "--store", &store, "--heads", "5"],
        vec!["base-new", "--store", &store, "--lr", "-1"],
        vec!["base-new", "--store", &store, "--base-share", "1.5"],
        vec!["sweep-share", "--store", &store, "--shares", "0.5,1.0"],
        vec!["frobnicate"],
    ];
    for args in cases {
        let out = mma(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let line = stderr_line(&out);
        assert!(line.starts_with("error[usage]: "), "{args:?}: {line}");
    }
}

#[test]
fn runtime_errors_exit_1_with_their_category() {
    let tmp = tempfile::tempdir().unwrap();
    let store = synth(tmp.path());
    let blob = Path::new(&store).join("train.images.f32");
    let mut bytes = fs::read(&blob).unwrap();
    bytes[0] ^= 1;
    fs::write(&blob, &bytes).unwrap();
    let out = mma(&["validate-store", "--store", &store]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).starts_with("error[checksum]: "));
    fs::write(&blob, &bytes[..8]).unwrap();
    let out = mma(&["base-new", "--store", &store]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).starts_with("error[count-mismatch]: "));
}

#[test]
fn too_few_shots_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let store = synth(tmp.path());
    let out = mma(&["base-new", "--store", &store, "--shots", "21", "--val-shots", "2", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).starts_with("error[data]: "));
}

#[test]
fn flags_override_config_file_which_overrides_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let store = synth(tmp.path());
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "lr = 0.01\nheads = 2\nmax-epochs = 2\nbase-share = 0.5\n").unwrap();
    let o = tmp.path().join("runs");
    let dir = run_dir(&ok(&[
        "base-new", "--store", &store, "--config", cfg.to_str().unwrap(), "--lr", "0.02", "--out", o.to_str().unwrap(),
    ]));
    let c: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(c["train"]["lr"], 0.02);
    assert_eq!(c["adapter"]["heads"], 2);
    assert_eq!(c["train"]["max_epochs"], 2);
    assert_eq!(c["train"]["batch_size"], 256);
    assert_eq!(c["adapter"]["emb_dim"], 32);

    fs::write(&cfg, "learning-rate = 1\n").unwrap();
    let out = mma(&["base-new", "--store", &store, "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).starts_with("error[usage]: "));
}

#[test]
fn ablate_emits_full_grid_and_text_adaptation_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let store = synth(tmp.path());
    let o = tmp.path().join("runs");
    let args = ["ablate", "--store", &store, "--max-epochs", "2", "--shots", "5", "--heads", "2", "--out", o.to_str().unwrap()];
    let dir = run_dir(&ok(&args));
    let rows = read_reports_csv(&fs::read(dir.join("ablation.csv")).unwrap()).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels.len(), 10);
    assert_eq!(labels[0], "CLIP Baseline");
    assert_eq!(labels[1], "CLIP-Adapter");
    for a in ["MHA", "Transformer"] {
        for u in ["linear", "MLP"] {
            let l = format!("{a} adapter, {u} up-/downsampling");
            assert!(labels.contains(&l.as_str()), "{l}");
            assert!(labels.contains(&format!("{l}, w/o text adaptation").as_str()));
        }
    }
    let grid = fs::read_to_string(dir.join("ablation.txt")).unwrap();
    assert!(grid.lines().next().unwrap().split_whitespace().eq(["Configuration", "Base", "New", "All"]));
    assert_eq!(grid.lines().count(), 12);
    let pairs = fs::read_to_string(dir.join("text_adaptation.txt")).unwrap();
    assert_eq!(pairs.matches(", w/ text adaptation").count(), 4);
    assert_eq!(pairs.matches(", w/o text adaptation").count(), 4);

    // threads change nothing but wall time
    let mut par = args.to_vec();
    par.extend(["--jobs", "3"]);
    assert_eq!(tree(&run_dir(&ok(&par))), tree(&dir));
}

#[test]
fn sweep_and_noise_write_their_series() {
    let tmp = tempfile::tempdir().unwrap();
    let store = synth(tmp.path());
    let o = tmp.path().join("runs");
    let o = o.to_str().unwrap();
    let dir = run_dir(&ok(&["sweep-share", "--store", &store, "--shares", "0.34,0.67", "--max-epochs", "2", "--out", o]));
    let series = fs::read_to_string(dir.join("series.csv")).unwrap();
    assert!(series.starts_with("share,base_classes,new_classes,base_acc,new_acc,all_acc,harmonic_mean\n"));
    assert!(series.contains("\n0.34,3,3,"));
    assert!(series.contains("\n0.67,5,1,"));

    let dir = run_dir(&ok(&["noise", "--store", &store, "--sigma", "0.05", "--max-epochs", "2", "--out", o]));
    let noise = fs::read_to_string(dir.join("noise.csv")).unwrap();
    assert_eq!(noise.lines().count(), 7);
    let cfg = fs::read_to_string(dir.join("config.json")).unwrap();
    assert!(cfg.contains("\"noise_space\": \"embedding\""));
    assert!(cfg.contains("+gauss0.05-train-s0"));
}

#[test]
fn synth_and_validate_store() {
    let tmp = tempfile::tempdir().unwrap();
    let store = synth(tmp.path());
    let line = ok(&["validate-store", "--store", &store]);
    assert!(line.starts_with("ok synth-k6-c32-"), "{line}");
    assert!(line.contains("classes=6 emb_dim=32 train=120 test=30 zero_shot_test_acc="));
}

#[test]
fn help_lists_flags_with_defaults() {
    let text = ok(&["base-new", "--help"]);
    for f in ["--lambda", "--lambda-text", "--heads", "--lr", "--batch-size", "--beta1", "--patience", "--shots", "--base-share", "--seed", "--config", "--run-id"] {
        assert!(text.contains(f), "{f}");
    }
    assert!(text.contains("[default: 0.005]"));
    assert!(ok(&["--help"]).contains("validate-store"));
}

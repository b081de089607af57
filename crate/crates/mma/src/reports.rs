//! Machine-readable and aligned-text renderings of experiment results.
//!
//! Floats in CSV and JSONL files use Rust's shortest round-trip formatting,
//! so files parse back to the exact values and identical runs give identical
//! bytes. Text tables round to two decimals.

use std::fmt::Write as _;
use std::io;

use mma_core::eval::{AblationRow, EvalScope, NoisePair, Prediction, SweepPoint};
use mma_core::train::EpochRecord;
use mma_core::{AdapterKind, EvalReport};
use serde::{Deserialize, Serialize};

/// Columns of `report.csv`, `ablation.csv` and friends.
pub const REPORT_COLUMNS: [&str; 13] = [
    "label",
    "adapter",
    "base_acc",
    "new_acc",
    "all_acc",
    "harmonic_mean",
    "diff_pct",
    "param_count",
    "base_classes",
    "new_classes",
    "dataset_id",
    "seed",
    "config_hash",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn report_fields(r: &EvalReport) -> Vec<String> {
    vec![
        r.label.clone(),
        r.adapter.as_str().to_string(),
        r.base_acc.to_string(),
        opt(r.new_acc),
        r.all_acc.to_string(),
        opt(r.harmonic_mean),
        opt(r.diff_pct),
        r.param_count.to_string(),
        r.base_classes.to_string(),
        r.new_classes.to_string(),
        r.meta.dataset_id.clone(),
        r.meta.seed.to_string(),
        r.meta.config_hash.clone(),
    ]
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// One row per report, columns as in [`REPORT_COLUMNS`].
pub fn reports_csv<'a>(reports: impl IntoIterator<Item = &'a EvalReport>) -> Vec<u8> {
    csv_bytes(&REPORT_COLUMNS, reports.into_iter().map(report_fields))
}

/// Flat record used to read report CSV files back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub adapter: String,
    pub base_acc: f64,
    pub new_acc: Option<f64>,
    pub all_acc: f64,
    pub harmonic_mean: Option<f64>,
    pub diff_pct: Option<f64>,
    pub param_count: usize,
    pub base_classes: usize,
    pub new_classes: usize,
    pub dataset_id: String,
    pub seed: u64,
    pub config_hash: String,
}

pub fn read_reports_csv(bytes: &[u8]) -> Result<Vec<ReportRow>, csv::Error> {
    csv::Reader::from_reader(bytes).deserialize().collect()
}

#[derive(Serialize)]
struct HistoryLine {
    epoch: usize,
    train_loss: f64,
    val_acc: f64,
}

/// One JSON object per epoch: `{"epoch":1,"train_loss":..,"val_acc":..}`.
pub fn history_jsonl(history: &[EpochRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for h in history {
        let line = HistoryLine {
            epoch: h.epoch,
            train_loss: h.train_loss,
            val_acc: h.val_acc,
        };
        serde_json::to_writer(&mut out, &line).expect("in-memory write");
        out.push(b'\n');
    }
    out
}

pub fn read_history_jsonl(text: &str) -> Result<Vec<EpochRecord>, serde_json::Error> {
    #[derive(Deserialize)]
    struct Line {
        epoch: usize,
        train_loss: f64,
        val_acc: f64,
    }
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let r: Line = serde_json::from_str(l)?;
            Ok(EpochRecord {
                epoch: r.epoch,
                train_loss: r.train_loss,
                val_acc: r.val_acc,
            })
        })
        .collect()
}

pub const PREDICTION_COLUMNS: [&str; 4] = ["scope", "index", "label", "predicted"];

/// Per-image predictions, all scopes in one file.
pub fn predictions_csv(predictions: &[(EvalScope, Vec<Prediction>)]) -> Vec<u8> {
    let rows = predictions.iter().flat_map(|(scope, preds)| {
        preds.iter().map(move |p| {
            vec![
                scope.name().to_string(),
                p.index.to_string(),
                p.label.to_string(),
                p.predicted.to_string(),
            ]
        })
    });
    csv_bytes(&PREDICTION_COLUMNS, rows)
}

pub fn read_predictions_csv(bytes: &[u8]) -> io::Result<Vec<(EvalScope, Vec<Prediction>)>> {
    #[derive(Deserialize)]
    struct Row {
        scope: EvalScope,
        index: usize,
        label: usize,
        predicted: usize,
    }
    let mut out: Vec<(EvalScope, Vec<Prediction>)> = Vec::new();
    for row in csv::Reader::from_reader(bytes).deserialize::<Row>() {
        let r = row.map_err(io::Error::other)?;
        let p = Prediction {
            index: r.index,
            label: r.label,
            predicted: r.predicted,
        };
        match out.last_mut() {
            Some((s, v)) if *s == r.scope => v.push(p),
            _ => out.push((r.scope, vec![p])),
        }
    }
    Ok(out)
}

pub fn sweep_csv(points: &[SweepPoint]) -> Vec<u8> {
    let header = [
        "share",
        "base_classes",
        "new_classes",
        "base_acc",
        "new_acc",
        "all_acc",
        "harmonic_mean",
    ];
    csv_bytes(
        &header,
        points.iter().map(|p| {
            vec![
                p.share.to_string(),
                p.report.base_classes.to_string(),
                p.report.new_classes.to_string(),
                p.report.base_acc.to_string(),
                opt(p.report.new_acc),
                p.report.all_acc.to_string(),
                opt(p.report.harmonic_mean),
            ]
        }),
    )
}

pub fn noise_csv(pairs: &[NoisePair]) -> Vec<u8> {
    let mut header = vec!["training"];
    header.extend(REPORT_COLUMNS);
    csv_bytes(
        &header,
        pairs.iter().flat_map(|p| {
            [("clean", &p.clean), ("noisy", &p.noisy)].map(|(tag, r)| {
                let mut row = vec![tag.to_string()];
                row.extend(report_fields(r));
                row
            })
        }),
    )
}

// ----------------------------------------------------------------------
// aligned text

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt2).unwrap_or_else(|| "-".into())
}

/// Left-aligned first column, right-aligned rest, two spaces between.
pub fn aligned(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            if i == 0 {
                let _ = write!(s, "{c:<w$}");
            } else {
                let _ = write!(s, "{c:>w$}");
            }
        }
        s.trim_end().to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

/// Base, New, H and signed relative difference per report.
pub fn base_new_table(reports: &[&EvalReport]) -> String {
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                fmt2(r.base_acc),
                fmt_opt(r.new_acc),
                fmt_opt(r.harmonic_mean),
                r.diff_pct.map(|d| format!("{:+}", d.round() as i64)).unwrap_or_else(|| "-".into()),
                r.param_count.to_string(),
            ]
        })
        .collect();
    aligned(&["Method", "Base", "New", "H", "Diff %", "Params"], &rows)
}

/// Architecture grid with Base, New and All columns.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.spec_label.clone(),
                fmt2(r.report.base_acc),
                fmt_opt(r.report.new_acc),
                fmt2(r.report.all_acc),
            ]
        })
        .collect();
    aligned(&["Configuration", "Base", "New", "All"], &body)
}

/// Text adaptation on/off for each attention and up/down combination that
/// was run both ways, plus the baselines.
pub fn text_adaptation_table(rows: &[AblationRow]) -> String {
    let mut body = Vec::new();
    for r in rows.iter().filter(|r| r.kind != AdapterKind::Mma) {
        body.push(vec![
            r.spec_label.clone(),
            fmt2(r.report.base_acc),
            fmt_opt(r.report.new_acc),
            fmt_opt(r.report.harmonic_mean),
        ]);
    }
    for on in rows.iter().filter(|r| r.kind == AdapterKind::Mma && r.adapt_text) {
        let Some(off) = rows.iter().find(|o| {
            o.kind == AdapterKind::Mma && !o.adapt_text && o.attention == on.attention && o.updown == on.updown
        }) else {
            continue;
        };
        for (r, tag) in [(on, "w/ text adaptation"), (off, "w/o text adaptation")] {
            let arch = r.spec_label.split(", w/o").next().unwrap_or(&r.spec_label);
            body.push(vec![
                format!("{arch}, {tag}"),
                fmt2(r.report.base_acc),
                fmt_opt(r.report.new_acc),
                fmt_opt(r.report.harmonic_mean),
            ]);
        }
    }
    aligned(&["Method", "Base", "New", "H"], &body)
}

pub fn sweep_table(points: &[SweepPoint]) -> String {
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            vec![
                format!("{:.2}", p.share),
                p.report.base_classes.to_string(),
                fmt2(p.report.base_acc),
                fmt_opt(p.report.new_acc),
                fmt2(p.report.all_acc),
            ]
        })
        .collect();
    aligned(&["Share", "Base classes", "Base", "New", "All"], &rows)
}

pub fn noise_table(pairs: &[NoisePair]) -> String {
    let rows: Vec<Vec<String>> = pairs
        .iter()
        .map(|p| {
            vec![
                p.label.clone(),
                fmt2(p.clean.all_acc),
                fmt2(p.noisy.all_acc),
                fmt2(p.noisy.all_acc - p.clean.all_acc),
            ]
        })
        .collect();
    aligned(&["Method", "Clean", "Noisy", "Change"], &rows)
}

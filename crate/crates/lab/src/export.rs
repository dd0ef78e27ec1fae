//! Plot-ready CSV files and the JSON run report.

use std::path::Path;

use kase_core::eval::{EntropyHistogram, FeatureRow};
use kase_core::{EvalReport, LossBreakdown, TrainTrace};
use serde::{Deserialize, Serialize};

use crate::error::{io, LabError, Result};

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(io(path))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> LabError + '_ {
    move |e| LabError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    }
}

pub const TRACE_HEADER: [&str; 8] = [
    "epoch",
    "ce_known",
    "entropy_unknown",
    "consistency",
    "class_balance",
    "total",
    "target_known_entropy",
    "target_unknown_entropy",
];

pub fn write_trace(trace: &TrainTrace, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let e = csv_err(path);
    w.write_record(TRACE_HEADER).map_err(&e)?;
    for rec in &trace.epochs {
        let l = &rec.losses;
        w.write_record([
            rec.epoch.to_string(),
            l.ce_known.to_string(),
            l.entropy_unknown.to_string(),
            l.consistency.to_string(),
            l.class_balance.to_string(),
            l.total.to_string(),
            opt(rec.target_known_entropy),
            opt(rec.target_unknown_entropy),
        ])
        .map_err(&e)?;
    }
    w.flush().map_err(io(path))
}

/// `domain,true_label,pred_label,entropy,feat_1..feat_h`, plus `x_1,x_2`
/// when the inputs are two-dimensional. Unknown predictions are written as
/// `unknown`.
pub fn write_features(rows: &[FeatureRow], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let e = csv_err(path);
    let h = rows.first().map_or(0, |r| r.features.len());
    let with_input = rows.first().is_some_and(|r| r.input.len() == 2);
    let mut header = vec!["domain".to_string(), "true_label".into(), "pred_label".into(), "entropy".into()];
    header.extend((1..=h).map(|j| format!("feat_{j}")));
    if with_input {
        header.extend(["x_1".into(), "x_2".into()]);
    }
    w.write_record(&header).map_err(&e)?;
    for r in rows {
        let mut rec = vec![
            r.domain.as_str().to_string(),
            r.true_label.to_string(),
            r.pred_label.map_or_else(|| "unknown".to_string(), |p| p.to_string()),
            r.entropy.to_string(),
        ];
        rec.extend(r.features.iter().map(f64::to_string));
        if with_input {
            rec.extend(r.input.iter().map(f64::to_string));
        }
        w.write_record(&rec).map_err(&e)?;
    }
    w.flush().map_err(io(path))
}

pub fn write_histogram(hist: &EntropyHistogram, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let e = csv_err(path);
    w.write_record(["bin_lo", "bin_hi", "count_known", "count_unknown"]).map_err(&e)?;
    for b in 0..hist.known.len() {
        w.write_record([
            hist.edges[b].to_string(),
            hist.edges[b + 1].to_string(),
            hist.known[b].to_string(),
            hist.unknown[b].to_string(),
        ])
        .map_err(&e)?;
    }
    w.flush().map_err(io(path))
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub seed: u64,
    pub epochs: usize,
    pub final_losses: Option<LossBreakdown>,
    pub eval: EvalReport,
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io(path))?;
        serde_json::from_str(&text).map_err(|source| LabError::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

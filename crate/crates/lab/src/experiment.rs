//! Method × seed sweeps with per-run output directories and a summary
//! recomputed from the emitted reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use kase_core::data::{generate_synthetic, Protocol};
use kase_core::eval::{entropy_histogram, evaluate, feature_rows};
use kase_core::trainer::{fit_unknown_detector, train};
use kase_core::{Method, OpenSetDataset, SyntheticSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::load_csv;
use crate::error::{io, LabError, Result};
use crate::export::{write_features, write_histogram, write_trace, RunReport};

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Csv {
        path: PathBuf,
        known: Vec<u32>,
        source_unknown: Vec<u32>,
        target_unknown: Vec<u32>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

/// A method plus an optional override of source reweighting, written
/// `name` or `name:no-reweight`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MethodRun {
    pub method: Method,
    pub no_reweight: bool,
}

impl MethodRun {
    pub fn label(&self) -> String {
        if self.no_reweight {
            format!("{}:no-reweight", self.method)
        } else {
            self.method.to_string()
        }
    }

    pub fn dir_name(&self) -> String {
        self.label().replace(':', "-")
    }
}

impl std::str::FromStr for MethodRun {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let (name, variant) = match s.split_once(':') {
            Some((n, v)) => (n, Some(v)),
            None => (s, None),
        };
        let method = Method::parse(name).ok_or_else(|| {
            let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
            LabError::Config(format!("unknown method {name:?}; expected one of {}", names.join(", ")))
        })?;
        match variant {
            None => Ok(Self { method, no_reweight: false }),
            Some("no-reweight") => Ok(Self { method, no_reweight: true }),
            Some(v) => Err(LabError::Config(format!("unknown method variant {v:?}"))),
        }
    }
}

impl std::fmt::Display for MethodRun {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

impl Serialize for MethodRun {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for MethodRun {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub dataset: DataSource,
    pub methods: Vec<MethodRun>,
    pub seeds: Vec<u64>,
    /// Shared training settings; `method` and `seed` are set per run.
    pub train: TrainConfig,
    pub out: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            dataset: DataSource::default(),
            methods: ["source_only", "kase_no_kar", "kase_no_kaa", "kase"]
                .iter()
                .map(|m| m.parse().expect("known method"))
                .collect(),
            seeds: (0..5).collect(),
            train: TrainConfig::default(),
            out: PathBuf::from("runs"),
        }
    }
}

impl ExperimentSpec {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| LabError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io(path))?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(LabError::Config("at least one method is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(LabError::Config("at least one seed is required".into()));
        }
        self.train.validate()?;
        if let DataSource::Synthetic(s) = &self.dataset {
            s.validate()?;
        }
        Ok(())
    }

    /// The dataset of one run. Synthetic data is drawn with `spec.seed +
    /// seed`, so every seed sees a fresh sample of the same benchmark.
    pub fn dataset_for(&self, seed: u64) -> Result<OpenSetDataset> {
        match &self.dataset {
            DataSource::Synthetic(s) => Ok(generate_synthetic(&SyntheticSpec {
                seed: s.seed.wrapping_add(seed),
                ..s.clone()
            })?),
            DataSource::Csv {
                path,
                known,
                source_unknown,
                target_unknown,
            } => {
                let protocol = Protocol::new(known.clone(), source_unknown.clone(), target_unknown.clone())?;
                load_csv(path, protocol)
            }
        }
    }

    /// Training settings of one run. For synthetic data the augmentation
    /// noise comes from the dataset spec.
    pub fn config_for(&self, run: MethodRun, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig {
            method: run.method,
            seed,
            ..self.train.clone()
        };
        if run.no_reweight {
            cfg.reweight = false;
        }
        if let DataSource::Synthetic(s) = &self.dataset {
            cfg.augment_std = s.augment_std;
        }
        cfg
    }

    pub fn run_dir(&self, run: MethodRun, seed: u64) -> PathBuf {
        self.out.join(run.dir_name()).join(format!("seed_{seed}"))
    }
}

/// Trains, evaluates and writes every output file of one run.
pub fn run_one(spec: &ExperimentSpec, run: MethodRun, seed: u64) -> Result<RunReport> {
    let dir = spec.run_dir(run, seed);
    let report_path = dir.join("report.json");
    match std::fs::remove_file(&report_path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(io(&report_path)(e)),
        _ => {}
    }
    let dataset = spec.dataset_for(seed)?;
    let cfg = spec.config_for(run, seed);
    let (model, trace) = train(&dataset, &cfg)?;
    let detector = if run.method.uses_detector() {
        Some(fit_unknown_detector(&model, &dataset, &cfg)?)
    } else {
        None
    };
    let eval = evaluate(&model, detector.as_ref(), &dataset)?;

    std::fs::create_dir_all(&dir).map_err(io(&dir))?;
    write_trace(&trace, &dir.join("trace.csv"))?;
    write_features(
        &feature_rows(&model, detector.as_ref(), &dataset)?,
        &dir.join("features.csv"),
    )?;
    write_histogram(
        &entropy_histogram(&model, &dataset, HISTOGRAM_BINS)?,
        &dir.join("entropy_hist.csv"),
    )?;
    Checkpoint::capture(&model, detector.as_ref()).save(&dir.join("model.ckpt"))?;

    let mut warnings = trace.warnings.clone();
    warnings.extend(eval.warnings.iter().cloned());
    let report = RunReport {
        method: run.label(),
        seed,
        epochs: cfg.epochs,
        final_losses: trace.epochs.last().map(|e| e.losses),
        eval,
        warnings,
    };
    report.save(&report_path)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    /// `(seed, mAcc)` for every run whose report exists.
    pub runs: Vec<(u64, f64)>,
    pub median: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub methods: Vec<MethodSummary>,
    pub failures: Vec<String>,
}

impl Summary {
    pub fn median_of(&self, method: &str) -> Option<f64> {
        self.methods.iter().find(|m| m.method == method).and_then(|m| m.median)
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Builds the summary from the `report.json` files under `spec.out`.
pub fn summarize(spec: &ExperimentSpec, failures: Vec<String>) -> Result<Summary> {
    let mut methods = Vec::new();
    for &run in &spec.methods {
        let mut runs = Vec::new();
        for &seed in &spec.seeds {
            let path = spec.run_dir(run, seed).join("report.json");
            if path.exists() {
                runs.push((seed, RunReport::load(&path)?.eval.macc));
            }
        }
        let values: Vec<f64> = runs.iter().map(|r| r.1).collect();
        methods.push(MethodSummary {
            method: run.label(),
            median: median(&values),
            runs,
        });
    }
    Ok(Summary { methods, failures })
}

/// `summary.csv` has one row per method: `method,seed_<s>...,median`.
pub fn write_summary(spec: &ExperimentSpec, summary: &Summary) -> Result<()> {
    let json_path = spec.out.join("summary.json");
    let mut text = serde_json::to_string_pretty(summary).expect("summary serializes");
    text.push('\n');
    std::fs::write(&json_path, text).map_err(io(&json_path))?;

    let csv_path = spec.out.join("summary.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| LabError::Io {
        path: csv_path.clone(),
        source: e.into(),
    })?;
    let mut header = vec!["method".to_string()];
    header.extend(spec.seeds.iter().map(|s| format!("seed_{s}")));
    header.push("median".into());
    let csv_err = |e: csv::Error| LabError::Io {
        path: csv_path.clone(),
        source: e.into(),
    };
    w.write_record(&header).map_err(csv_err)?;
    for m in &summary.methods {
        let by_seed: BTreeMap<u64, f64> = m.runs.iter().copied().collect();
        let mut rec = vec![m.method.clone()];
        rec.extend(spec.seeds.iter().map(|s| by_seed.get(s).map_or(String::new(), f64::to_string)));
        rec.push(m.median.map_or(String::new(), |v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(io(&csv_path))
}

#[derive(Debug)]
pub struct Outcome {
    pub summary: Summary,
}

impl Outcome {
    pub fn all_ok(&self) -> bool {
        self.summary.failures.is_empty()
    }
}

/// Runs every (method, seed) pair on up to `jobs` threads. A failed run is
/// recorded and the rest continue.
pub fn run(spec: &ExperimentSpec, jobs: usize) -> Result<Outcome> {
    spec.validate()?;
    std::fs::create_dir_all(&spec.out).map_err(io(&spec.out))?;
    let tasks: Vec<(MethodRun, u64)> = spec
        .methods
        .iter()
        .flat_map(|&m| spec.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let next = AtomicUsize::new(0);
    let failures = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, tasks.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(run, seed)) = tasks.get(i) else { break };
                if let Err(e) = run_one(spec, run, seed) {
                    failures.lock().expect("no panics while locked").push((i, format!("{run} seed {seed}: {e}")));
                }
            });
        }
    });
    let mut failures = failures.into_inner().expect("threads joined");
    failures.sort();
    let summary = summarize(spec, failures.into_iter().map(|f| f.1).collect())?;
    write_summary(spec, &summary)?;
    Ok(Outcome { summary })
}

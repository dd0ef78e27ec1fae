//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Pass a filter that does not match "acceptance" to skip.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use kase_core::gradcheck::{grad_check, random_case, DEFAULT_STEP, MAX_PARAMS};
use kase_core::losses::{ce_known_loss, class_balance_loss, consistency_weight};
use kase_core::objective::{LossPlan, Term};
use kase_core::trainer::train;
use kase_core::{
    ClassWeights, Matrix, Method, MlpClassifier, Rng, StudentTeacherModel, SyntheticSpec, TrainConfig,
    WeightFormula,
};
use kase_lab::experiment::{self, DataSource, ExperimentSpec, MethodRun};
use kase_lab::export::{write_trace, RunReport};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let plan = LossPlan::kase(10.0, 0.1, WeightFormula::Corrected);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..20u64 {
        let c = 2 + seed as usize % 4;
        let sizes = [2 + seed as usize % 3, 6 + seed as usize % 5, 5 + seed as usize % 4, c];
        let (model, batch) = random_case(seed, &sizes).expect("valid sizes");
        assert!(model.student.num_params() <= MAX_PARAMS);
        let weights = ClassWeights::from_weights((0..c).map(|k| 0.5 + k as f64).collect()).unwrap();
        for term in [Term::Source, Term::Consistency, Term::ClassBalance, Term::Total] {
            match grad_check(&model, &batch, &plan, &weights, term, DEFAULT_STEP) {
                Ok(r) => worst = worst.max(r.max_rel_error),
                Err(e) => return verdict(false, format!("model {seed} {term:?}: {e}")),
            }
        }
        checked += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < 1e-4 && secs < 30.0,
        format!("{checked} models, max rel error {worst:.2e} (< 1e-4), {secs:.1}s (< 30s)"),
    )
}

fn weight_function() -> Verdict {
    let c = 4;
    let one_hot = [0.0, 0.0, 1.0, 0.0];
    let exact = consistency_weight(&one_hot, c, WeightFormula::Corrected) == 1.0
        && consistency_weight(&one_hot, c, WeightFormula::Literal) == 1.0;
    let uniform = [0.25; 4];
    let wc = consistency_weight(&uniform, c, WeightFormula::Corrected);
    let wl = consistency_weight(&uniform, c, WeightFormula::Literal);
    let uniform_ok = (wc - 4f64.powf(-0.25)).abs() < 1e-9 && (wl - 4f64.powf(0.25)).abs() < 1e-9;
    // walk from one-hot (t = 0) to uniform (t = 1)
    let weights: Vec<f64> = (0..=100)
        .map(|i| {
            let t = i as f64 / 100.0;
            let p: Vec<f64> = (0..c).map(|k| (1.0 - t) * one_hot[k] + t * 0.25).collect();
            consistency_weight(&p, c, WeightFormula::Corrected)
        })
        .collect();
    let decreasing = weights.windows(2).all(|w| w[1] < w[0]);
    verdict(
        exact && uniform_ok && decreasing,
        format!("w(one-hot) = 1: {exact}; w(uniform) = {wc:.10} / {wl:.10}; strictly decreasing: {decreasing}"),
    )
}

fn ulps(a: f64, b: f64) -> u64 {
    let key = |x: f64| {
        let bits = x.to_bits() as i64;
        if bits < 0 {
            i64::MIN - bits
        } else {
            bits
        }
    };
    key(a).abs_diff(key(b))
}

fn ema_algebra() -> Verdict {
    let mut rng = Rng::new(7);
    let sizes = [3, 8, 8, 4];
    let student = MlpClassifier::new(&sizes, &mut rng).unwrap();
    let teacher = MlpClassifier::new(&sizes, &mut rng).unwrap();
    let mut max_ulps = 0;
    for alpha in [0.5, 0.9, 0.99, 0.999, 0.123] {
        let mut m = StudentTeacherModel::from_parts(student.clone(), teacher.clone(), alpha).unwrap();
        m.ema_update().unwrap();
        for ((new, t), s) in m.teacher.params().zip(teacher.params()).zip(student.params()) {
            max_ulps = max_ulps.max(ulps(*new, alpha * t + (1.0 - alpha) * s));
        }
    }
    let mut zero = StudentTeacherModel::from_parts(student.clone(), teacher.clone(), 0.0).unwrap();
    zero.ema_update().unwrap();
    let mut one = StudentTeacherModel::from_parts(student.clone(), teacher.clone(), 1.0).unwrap();
    one.ema_update().unwrap();
    let boundaries = zero.teacher == student && one.teacher == teacher;

    let alpha = 0.9;
    let mut m = StudentTeacherModel::from_parts(student.clone(), teacher.clone(), alpha).unwrap();
    let gap0: Vec<f64> = teacher.params().zip(student.params()).map(|(t, s)| (t - s).abs()).collect();
    let mut geometric = true;
    for k in 1..=100 {
        m.ema_update().unwrap();
        let bound = alpha.powi(k);
        for ((t, s), g0) in m.teacher.params().zip(student.params()).zip(&gap0) {
            if (t - s).abs() > bound * g0 * (1.0 + 1e-9) + 1e-15 {
                geometric = false;
            }
        }
    }
    verdict(
        max_ulps <= 1 && boundaries && geometric,
        format!("max deviation {max_ulps} ulp; alpha in {{0,1}} exact: {boundaries}; geometric bound over 100 steps: {geometric}"),
    )
}

fn class_balance() -> Verdict {
    let mut rng = Rng::new(11);
    let mut min_excess = f64::INFINITY;
    let mut uniform_err = 0.0f64;
    for trial in 0..2000 {
        let c = 2 + trial % 9;
        let raw: Vec<f64> = (0..c).map(|_| rng.uniform() + 1e-3).collect();
        let s: f64 = raw.iter().sum();
        let m: Vec<f64> = raw.iter().map(|v| v / s).collect();
        min_excess = min_excess.min(class_balance_loss(&m) - (c as f64).ln());
        let u = vec![1.0 / c as f64; c];
        uniform_err = uniform_err.max((class_balance_loss(&u) - (c as f64).ln()).abs());
    }
    verdict(
        min_excess > 1e-9 && uniform_err < 1e-9,
        format!("non-uniform means exceed ln C by >= {min_excess:.2e}; uniform error {uniform_err:.1e}"),
    )
}

fn reweighting_oracle() -> Verdict {
    let mut rng = Rng::new(5);
    let (n0, n1) = (90, 10);
    let rows: Vec<Vec<f64>> = (0..n0 + n1)
        .map(|_| {
            let a = 0.02 + 0.96 * rng.uniform();
            vec![a, 1.0 - a]
        })
        .collect();
    let labels: Vec<usize> = (0..n0 + n1).map(|i| usize::from(i >= n0)).collect();
    let (weights, _) = ClassWeights::from_counts(&[n0, n1]).unwrap();
    let weighted = ce_known_loss(&Matrix::from_rows(&rows).unwrap(), &labels, &weights).unwrap();

    // balanced duplication: every minority row repeated 9 times
    let mut dup_rows = Vec::new();
    let mut dup_labels = Vec::new();
    for (r, &y) in rows.iter().zip(&labels) {
        let copies = if y == 1 { n0 / n1 } else { 1 };
        for _ in 0..copies {
            dup_rows.push(r.clone());
            dup_labels.push(y);
        }
    }
    let oracle: f64 = dup_rows
        .iter()
        .zip(&dup_labels)
        .map(|(r, &y)| -r[y].ln())
        .sum::<f64>()
        / dup_rows.len() as f64;
    let diff = (weighted - oracle).abs();
    verdict(diff < 1e-9, format!("weighted {weighted:.12} vs duplicated {oracle:.12}, |diff| = {diff:.1e}"))
}

fn trace_bytes(cfg: &TrainConfig, dir: &Path, name: &str) -> Vec<u8> {
    let d = kase_core::data::generate_synthetic(&SyntheticSpec::default()).unwrap();
    let (_, trace) = train(&d, cfg).unwrap();
    let path = dir.join(name);
    write_trace(&trace, &path).unwrap();
    std::fs::read(path).unwrap()
}

fn ablation_composability() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let kase_l0 = TrainConfig {
        lambda1: 0.0,
        ..TrainConfig::for_method(Method::Kase)
    };
    let a = trace_bytes(&kase_l0, tmp.path(), "a.csv");
    let b = trace_bytes(&TrainConfig::for_method(Method::KaseNoKaa), tmp.path(), "b.csv");
    let c = trace_bytes(
        &TrainConfig {
            entropy_terms: false,
            ..kase_l0
        },
        tmp.path(),
        "c.csv",
    );
    let d = trace_bytes(
        &TrainConfig {
            lambda1: 0.0,
            ..TrainConfig::for_method(Method::KaseNoKar)
        },
        tmp.path(),
        "d.csv",
    );
    verdict(
        a == b && c == d,
        format!("kase(lambda1=0) == kase_no_kaa: {}; entropy off == SE skeleton: {}", a == b, c == d),
    )
}

/// Runs the four-method ladder on the default benchmark.
fn ladder_reports(out: &Path) -> (f64, BTreeMap<String, Vec<RunReport>>, Option<String>) {
    let spec = ExperimentSpec {
        out: out.to_path_buf(),
        ..ExperimentSpec::default()
    };
    let start = Instant::now();
    let outcome = experiment::run(&spec, jobs());
    let secs = start.elapsed().as_secs_f64();
    let mut reports = BTreeMap::new();
    let failure = match outcome {
        Err(e) => Some(e.to_string()),
        Ok(o) if !o.all_ok() => Some(o.summary.failures.join("; ")),
        Ok(_) => None,
    };
    for &run in &spec.methods {
        let runs = spec
            .seeds
            .iter()
            .filter_map(|&s| RunReport::load(&spec.run_dir(run, s).join("report.json")).ok())
            .collect();
        reports.insert(run.label(), runs);
    }
    (secs, reports, failure)
}

fn median_macc(reports: &[RunReport]) -> f64 {
    let v: Vec<f64> = reports.iter().map(|r| r.eval.macc).collect();
    experiment::median(&v).unwrap_or(f64::NAN)
}

fn ladder(secs: f64, reports: &BTreeMap<String, Vec<RunReport>>, failure: &Option<String>) -> Verdict {
    if let Some(f) = failure {
        return verdict(false, format!("runs failed: {f}"));
    }
    let m = |name: &str| median_macc(&reports[name]);
    let (so, se, nk, k) = (m("source_only"), m("kase_no_kar"), m("kase_no_kaa"), m("kase"));
    let pass = so < se && se < nk && nk <= k && k - se >= 0.02 && secs < 300.0;
    verdict(
        pass,
        format!(
            "median mAcc source_only {so:.4} < SE {se:.4} < no_kaa {nk:.4} <= kase {k:.4}; kase - SE = {:.2} points (>= 2); {secs:.0}s (< 300s)",
            100.0 * (k - se)
        ),
    )
}

fn entropy_separation(reports: &BTreeMap<String, Vec<RunReport>>) -> Verdict {
    let runs = &reports["kase"];
    let separated = runs
        .iter()
        .filter(|r| match (r.eval.entropy_known_mean, r.eval.entropy_unknown_mean) {
            (Some(k), Some(u)) => u > k,
            _ => false,
        })
        .count();
    verdict(
        separated >= 4 && runs.len() == 5,
        format!("target-unknown entropy above target-known in {separated}/{} seeds (>= 4)", runs.len()),
    )
}

fn reweighting_ablation(out: &Path) -> Verdict {
    let spec = ExperimentSpec {
        dataset: DataSource::Synthetic(SyntheticSpec {
            source_unknown_multiplier: 5,
            ..SyntheticSpec::default()
        }),
        methods: vec![
            "closed_set_c_plus_1".parse().unwrap(),
            "closed_set_c_plus_1:no-reweight".parse().unwrap(),
        ],
        out: out.to_path_buf(),
        ..ExperimentSpec::default()
    };
    match experiment::run(&spec, jobs()) {
        Ok(o) if o.all_ok() => {
            let w = o.summary.median_of("closed_set_c_plus_1").unwrap_or(f64::NAN);
            let u = o.summary.median_of("closed_set_c_plus_1:no-reweight").unwrap_or(f64::NAN);
            verdict(w > u, format!("median mAcc reweighted {w:.4} > unweighted {u:.4}"))
        }
        Ok(o) => verdict(false, format!("runs failed: {}", o.summary.failures.join("; "))),
        Err(e) => verdict(false, e.to_string()),
    }
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = std::fs::read(&p).unwrap();
                files.insert(p, bytes);
            }
        }
    }
    files
}

fn determinism(out: &Path) -> Verdict {
    let spec = ExperimentSpec {
        methods: Method::ALL
            .iter()
            .map(|&method| MethodRun {
                method,
                no_reweight: false,
            })
            .collect(),
        seeds: vec![0, 1],
        train: TrainConfig {
            epochs: 10,
            ..TrainConfig::default()
        },
        out: out.to_path_buf(),
        ..ExperimentSpec::default()
    };
    let first = experiment::run(&spec, jobs()).map(|_| snapshot(out));
    let second = experiment::run(&spec, 1).map(|_| snapshot(out));
    match (first, second) {
        (Ok(a), Ok(b)) => {
            let reports = a.keys().filter(|p| p.ends_with("report.json")).count();
            verdict(
                a == b && reports == 10,
                format!("{} files ({reports} reports) byte-identical across runs: {}", a.len(), a == b),
            )
        }
        (Err(e), _) | (_, Err(e)) => verdict(false, e.to_string()),
    }
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let (secs, reports, failure) = ladder_reports(&tmp.path().join("ladder"));
    let checks: Vec<(&str, Verdict)> = vec![
        ("gradient correctness", gradient_correctness()),
        ("consistency weight function", weight_function()),
        ("EMA algebra", ema_algebra()),
        ("class-balance lower bound", class_balance()),
        ("reweighting oracle", reweighting_oracle()),
        ("ablation composability", ablation_composability()),
        ("method ladder", ladder(secs, &reports, &failure)),
        ("entropy separation", entropy_separation(&reports)),
        ("reweighting ablation", reweighting_ablation(&tmp.path().join("reweight"))),
        ("determinism", determinism(&tmp.path().join("determinism"))),
    ];
    let mut failed = 0;
    for (i, (name, v)) in checks.iter().enumerate() {
        println!("criterion {:>2} {} {name}: {}", i + 1, if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    println!("{} of {} criteria pass", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

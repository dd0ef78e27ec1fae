//! Loss terms over batches of probability rows.
//!
//! Every function takes an `n × C` matrix of probabilities (one row per
//! sample). Each term has a `*_grad` twin returning `dL/dp` of the same
//! shape; the objective pulls those back through the softmax. Logs are
//! floored at [`LOG_FLOOR`].

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::prob::{clamped_ln, entropy, LOG_FLOOR};

/// Per-term values of the training objective for one batch (or an average
/// over batches).
///
/// `total = ce_known − entropy_unknown + λ1·consistency + λ2·class_balance`:
/// the entropy of source-unknown predictions is maximized, so it enters with
/// a minus sign.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossBreakdown {
    pub ce_known: f64,
    pub entropy_unknown: f64,
    pub consistency: f64,
    pub class_balance: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossBreakdown {
    pub fn new(
        ce_known: f64,
        entropy_unknown: f64,
        consistency: f64,
        class_balance: f64,
        lambda1: f64,
        lambda2: f64,
    ) -> Self {
        let mut b = Self {
            ce_known,
            entropy_unknown,
            consistency,
            class_balance,
            total: 0.0,
            lambda1,
            lambda2,
        };
        b.total = b.combined();
        b
    }

    /// The supervised part `ce_known − entropy_unknown`.
    pub fn source_loss(&self) -> f64 {
        self.ce_known - self.entropy_unknown
    }

    pub fn combined(&self) -> f64 {
        self.source_loss() + self.lambda1 * self.consistency + self.lambda2 * self.class_balance
    }
}

/// Inverse-frequency class weights `w_c = 1 / r_c`, where `r_c` is the
/// fraction of the source set in bucket `c`. Buckets absent from the source
/// have no weight.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassWeights {
    weights: Vec<Option<f64>>,
}

impl ClassWeights {
    pub fn uniform(num_classes: usize) -> Self {
        Self {
            weights: alloc::vec![Some(1.0); num_classes],
        }
    }

    /// Weights from per-bucket counts; empty buckets are excluded with a
    /// warning.
    pub fn from_counts(counts: &[usize]) -> Result<(Self, Vec<String>)> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::Empty("source set"));
        }
        let mut warnings = Vec::new();
        let weights = counts
            .iter()
            .enumerate()
            .map(|(c, &n)| {
                if n == 0 {
                    warnings.push(alloc::format!("class bucket {c} has no source samples; excluded from weights"));
                    None
                } else {
                    Some(total as f64 / n as f64)
                }
            })
            .collect();
        Ok((Self { weights }, warnings))
    }

    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Config("class weights must be positive and finite".into()));
        }
        Ok(Self {
            weights: weights.into_iter().map(Some).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn get(&self, class: usize) -> Option<f64> {
        self.weights.get(class).copied().flatten()
    }

    pub fn as_slice(&self) -> &[Option<f64>] {
        &self.weights
    }
}

/// How per-sample consistency weights are derived from student entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum WeightFormula {
    /// `exp(−H/C)`: confident samples weigh 1, uncertain ones less.
    #[default]
    Corrected,
    /// `exp(+H/C)`: uncertain samples weigh more, up to `e` at the uniform
    /// prediction.
    Literal,
}

fn check_labels(probs: &Matrix, labels: &[usize]) -> Result<()> {
    if probs.rows() != labels.len() {
        return Err(Error::Shape {
            what: "labels",
            expected: (probs.rows(), 1),
            actual: (labels.len(), 1),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= probs.cols()) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes: probs.cols(),
        });
    }
    Ok(())
}

fn sample_weights(labels: &[usize], weights: &ClassWeights) -> Result<Vec<f64>> {
    labels
        .iter()
        .map(|&y| {
            weights.get(y).ok_or_else(|| {
                Error::Config(alloc::format!("class {y} has no weight (absent from source)"))
            })
        })
        .collect()
}

/// Class-weighted cross-entropy, normalized by the total weight of the batch:
/// `Σ_i w_{y_i}·(−ln p_{y_i}) / Σ_i w_{y_i}`. An empty batch gives 0.
///
/// With `w = 1/r` this equals the unweighted mean over a class-balanced
/// resampling of the same set, and unit or all-equal weights reduce it to the
/// plain mean.
pub fn ce_known_loss(probs: &Matrix, labels: &[usize], weights: &ClassWeights) -> Result<f64> {
    check_labels(probs, labels)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let w = sample_weights(labels, weights)?;
    let total_w: f64 = w.iter().sum();
    let s: f64 = labels
        .iter()
        .zip(&w)
        .enumerate()
        .map(|(i, (&y, wi))| wi * -clamped_ln(probs[(i, y)]))
        .sum();
    Ok(s / total_w)
}

pub fn ce_known_grad(probs: &Matrix, labels: &[usize], weights: &ClassWeights) -> Result<Matrix> {
    check_labels(probs, labels)?;
    let mut g = Matrix::zeros(probs.rows(), probs.cols());
    if labels.is_empty() {
        return Ok(g);
    }
    let w = sample_weights(labels, weights)?;
    let total_w: f64 = w.iter().sum();
    for (i, (&y, wi)) in labels.iter().zip(&w).enumerate() {
        let p = probs[(i, y)];
        if p > LOG_FLOOR {
            g[(i, y)] = -wi / (total_w * p);
        }
    }
    Ok(g)
}

fn clamped_entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| v * clamped_ln(v)).sum::<f64>()
}

/// Mean prediction entropy `(1/n) Σ_i H(p_i)`; 0 for an empty batch. The
/// objective subtracts it.
pub fn entropy_max_loss(probs: &Matrix) -> f64 {
    if probs.rows() == 0 {
        return 0.0;
    }
    probs.row_iter().map(clamped_entropy).sum::<f64>() / probs.rows() as f64
}

pub fn entropy_max_grad(probs: &Matrix) -> Matrix {
    let mut g = Matrix::zeros(probs.rows(), probs.cols());
    if probs.rows() == 0 {
        return g;
    }
    let n = probs.rows() as f64;
    for (gi, pi) in g.as_mut_slice().iter_mut().zip(probs.as_slice()) {
        *gi = if *pi > LOG_FLOOR {
            -(libm::log(*pi) + 1.0) / n
        } else {
            -libm::log(LOG_FLOOR) / n
        };
    }
    g
}

/// Per-sample consistency weight from the student's prediction `p` over `C`
/// known classes.
pub fn consistency_weight(p: &[f64], num_known: usize, formula: WeightFormula) -> f64 {
    let h = entropy(p) / num_known as f64;
    match formula {
        WeightFormula::Corrected => libm::exp(-h),
        WeightFormula::Literal => libm::exp(h),
    }
}

pub fn consistency_weights(student_probs: &Matrix, formula: WeightFormula) -> Vec<f64> {
    let c = student_probs.cols();
    student_probs
        .row_iter()
        .map(|p| consistency_weight(p, c, formula))
        .collect()
}

/// Confidence gate: weight 1 when the teacher's top probability exceeds
/// `threshold`, else 0.
pub fn confidence_mask(teacher_probs: &Matrix, threshold: f64) -> Vec<f64> {
    teacher_probs
        .row_iter()
        .map(|p| {
            let top = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if top > threshold {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

fn check_pair(f: &Matrix, g: &Matrix, w: &[f64]) -> Result<()> {
    if f.shape() != g.shape() {
        return Err(Error::Shape {
            what: "teacher probabilities",
            expected: f.shape(),
            actual: g.shape(),
        });
    }
    if w.len() != f.rows() {
        return Err(Error::Shape {
            what: "consistency weights",
            expected: (f.rows(), 1),
            actual: (w.len(), 1),
        });
    }
    Ok(())
}

/// Weighted squared difference `(1/n) Σ_i w_i·(1/C) Σ_k (f_ik − g_ik)²`.
pub fn consistency_loss(f: &Matrix, g: &Matrix, w: &[f64]) -> Result<f64> {
    check_pair(f, g, w)?;
    if f.rows() == 0 {
        return Ok(0.0);
    }
    let c = f.cols() as f64;
    let s: f64 = f
        .row_iter()
        .zip(g.row_iter())
        .zip(w)
        .map(|((fi, gi), wi)| {
            wi * fi.iter().zip(gi).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / c
        })
        .sum();
    Ok(s / f.rows() as f64)
}

/// Gradient with respect to `f` only; `g` and `w` are constants.
pub fn consistency_grad(f: &Matrix, g: &Matrix, w: &[f64]) -> Result<Matrix> {
    check_pair(f, g, w)?;
    let mut out = Matrix::zeros(f.rows(), f.cols());
    if f.rows() == 0 {
        return Ok(out);
    }
    let scale = 2.0 / (f.rows() * f.cols()) as f64;
    for i in 0..f.rows() {
        for k in 0..f.cols() {
            out[(i, k)] = scale * w[i] * (f[(i, k)] - g[(i, k)]);
        }
    }
    Ok(out)
}

/// Cross-entropy between the uniform distribution and a mean prediction `m`:
/// `−(1/C) Σ_k ln m_k`, minimized at `ln C` by the uniform `m`.
pub fn class_balance_loss(mean_probs: &[f64]) -> f64 {
    let c = mean_probs.len() as f64;
    -mean_probs.iter().map(|&m| clamped_ln(m)).sum::<f64>() / c
}

/// `L_B` of the column means of `probs`, with its gradient w.r.t. every row.
pub fn class_balance_batch(probs: &Matrix) -> (f64, Matrix) {
    let mut g = Matrix::zeros(probs.rows(), probs.cols());
    if probs.rows() == 0 {
        return (0.0, g);
    }
    let mean = probs.column_means();
    let n = probs.rows() as f64;
    let c = probs.cols() as f64;
    for i in 0..probs.rows() {
        for (k, &m) in mean.iter().enumerate() {
            if m > LOG_FLOOR {
                g[(i, k)] = -1.0 / (c * n * m);
            }
        }
    }
    (class_balance_loss(&mean), g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::LN_2;
    use proptest::prelude::*;

    fn rows(r: &[&[f64]]) -> Matrix {
        Matrix::from_rows(r).unwrap()
    }

    #[test]
    fn ce_examples() {
        let p = rows(&[&[0.5, 0.25, 0.25]]);
        let v = ce_known_loss(&p, &[0], &ClassWeights::uniform(3)).unwrap();
        assert!((v - LN_2).abs() < 1e-15);

        let onehot = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(ce_known_loss(&onehot, &[0, 1], &ClassWeights::uniform(2)).unwrap(), 0.0);

        assert!(matches!(
            ce_known_loss(&p, &[3], &ClassWeights::uniform(3)),
            Err(Error::LabelOutOfRange { label: 3, .. })
        ));
    }

    #[test]
    fn ce_reweighted_matches_hand_sum() {
        let (w, warn) = ClassWeights::from_counts(&[80, 20]).unwrap();
        assert!(warn.is_empty());
        assert_eq!(w.get(0), Some(1.25));
        assert_eq!(w.get(1), Some(5.0));
        let p = rows(&[&[0.7, 0.3], &[0.4, 0.6]]);
        let v = ce_known_loss(&p, &[0, 1], &w).unwrap();
        let oracle = (1.25 * -libm::log(0.7) + 5.0 * -libm::log(0.6)) / (1.25 + 5.0);
        assert!((v - oracle).abs() < 1e-15);
    }

    #[test]
    fn equal_weights_do_not_change_ce() {
        let p = rows(&[&[0.7, 0.3], &[0.4, 0.6], &[0.1, 0.9]]);
        let (balanced, _) = ClassWeights::from_counts(&[50, 50]).unwrap();
        assert_eq!(balanced.get(0), Some(2.0));
        let a = ce_known_loss(&p, &[0, 1, 1], &balanced).unwrap();
        let b = ce_known_loss(&p, &[0, 1, 1], &ClassWeights::uniform(2)).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn empty_bucket_is_excluded_with_warning() {
        let (w, warn) = ClassWeights::from_counts(&[10, 0, 30]).unwrap();
        assert_eq!(warn.len(), 1);
        assert_eq!(w.get(1), None);
        assert_eq!(w.get(0), Some(4.0));
        assert!(ClassWeights::from_counts(&[0, 0]).is_err());
    }

    #[test]
    fn entropy_max_examples() {
        let u = rows(&[&[0.25; 4], &[0.25; 4]]);
        assert!((entropy_max_loss(&u) - libm::log(4.0)).abs() < 1e-15);
        assert_eq!(entropy_max_loss(&rows(&[&[1.0, 0.0]])), 0.0);
        let mixed = rows(&[&[1.0, 0.0], &[0.5, 0.5]]);
        assert!((entropy_max_loss(&mixed) - LN_2 / 2.0).abs() < 1e-15);
        assert_eq!(entropy_max_loss(&Matrix::zeros(0, 3)), 0.0);
    }

    #[test]
    fn weight_examples() {
        for formula in [WeightFormula::Corrected, WeightFormula::Literal] {
            assert_eq!(consistency_weight(&[0.0, 1.0, 0.0, 0.0], 4, formula), 1.0);
        }
        let u = [0.25; 4];
        let corrected = consistency_weight(&u, 4, WeightFormula::Corrected);
        assert!((corrected - libm::pow(4.0, -0.25)).abs() < 1e-12);
        assert!((corrected - core::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        let literal = consistency_weight(&u, 4, WeightFormula::Literal);
        assert!((literal - libm::pow(4.0, 0.25)).abs() < 1e-12);
    }

    #[test]
    fn consistency_examples() {
        let f = rows(&[&[0.3, 0.7], &[0.9, 0.1]]);
        assert_eq!(consistency_loss(&f, &f, &[1.0, 1.0]).unwrap(), 0.0);

        let f = rows(&[&[1.0, 0.0]]);
        let g = rows(&[&[0.0, 1.0]]);
        assert_eq!(consistency_loss(&f, &g, &[1.0]).unwrap(), 1.0);

        assert!(consistency_loss(&f, &rows(&[&[1.0, 0.0], &[1.0, 0.0]]), &[1.0]).is_err());
        assert!(consistency_loss(&f, &g, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn consistency_matches_hand_sum() {
        let mut rng = crate::Rng::new(11);
        let (n, c) = (6, 3);
        let mut f = Matrix::zeros(n, c);
        let mut g = Matrix::zeros(n, c);
        for i in 0..n {
            let a: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
            let b: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
            f.row_mut(i).copy_from_slice(crate::softmax(&a).unwrap().as_slice());
            g.row_mut(i).copy_from_slice(crate::softmax(&b).unwrap().as_slice());
        }
        let w: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let mut oracle = 0.0;
        for i in 0..n {
            let mut sq = 0.0;
            for k in 0..c {
                sq += (f[(i, k)] - g[(i, k)]).powi(2);
            }
            oracle += w[i] * sq / c as f64;
        }
        oracle /= n as f64;
        assert!((consistency_loss(&f, &g, &w).unwrap() - oracle).abs() < 1e-15);
    }

    #[test]
    fn class_balance_examples() {
        assert!((class_balance_loss(&[0.5, 0.5]) - LN_2).abs() < 1e-15);
        let v = class_balance_loss(&[0.9, 0.1]);
        assert!((v - -0.5 * (libm::log(0.9) + libm::log(0.1))).abs() < 1e-15);
        assert!((v - 1.2040).abs() < 1e-4);
        // zeros are floored, not -inf
        assert!(class_balance_loss(&[1.0, 0.0]).is_finite());
    }

    #[test]
    fn breakdown_total() {
        let b = LossBreakdown::new(1.0, 0.5, 0.2, 2.0, 10.0, 0.1);
        assert!((b.total - (1.0 - 0.5 + 10.0 * 0.2 + 0.1 * 2.0)).abs() < 1e-12);
    }

    fn mix(c: usize, k: usize, t: f64) -> Vec<f64> {
        (0..c)
            .map(|j| t / c as f64 + if j == k { 1.0 - t } else { 0.0 })
            .collect()
    }

    proptest! {
        #[test]
        fn corrected_weight_decreases_towards_uniform(c in 2usize..9, k in 0usize..8, t0 in 0.0f64..0.99) {
            let k = k % c;
            let t1 = (t0 + 0.01).min(1.0);
            let w0 = consistency_weight(&mix(c, k, t0), c, WeightFormula::Corrected);
            let w1 = consistency_weight(&mix(c, k, t1), c, WeightFormula::Corrected);
            prop_assert!(w1 < w0);
        }

        #[test]
        fn weight_is_one_only_for_one_hot(z in proptest::collection::vec(-5.0f64..5.0, 2..8)) {
            let p = crate::softmax(&z).unwrap();
            for f in [WeightFormula::Corrected, WeightFormula::Literal] {
                prop_assert!(consistency_weight(p.as_slice(), z.len(), f) != 1.0);
            }
        }

        #[test]
        fn class_balance_above_log_c(z in proptest::collection::vec(-6.0f64..6.0, 2..10)) {
            let m = crate::softmax(&z).unwrap();
            let c = z.len() as f64;
            prop_assert!(class_balance_loss(m.as_slice()) - libm::log(c) >= -1e-12);
        }

        #[test]
        fn consistency_symmetric(a in proptest::collection::vec(0.0f64..1.0, 6), b in proptest::collection::vec(0.0f64..1.0, 6)) {
            let f = Matrix::from_vec(2, 3, a).unwrap();
            let g = Matrix::from_vec(2, 3, b).unwrap();
            let w = [0.4, 1.3];
            let x = consistency_loss(&f, &g, &w).unwrap();
            let y = consistency_loss(&g, &f, &w).unwrap();
            prop_assert_eq!(x, y);
            prop_assert_eq!(x == 0.0, f == g);
        }
    }

    #[test]
    fn reweighted_equals_balanced_duplication() {
        // 9:1 imbalanced set; duplicating the minority sample 9 times balances it
        let mut rng = crate::Rng::new(5);
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10 {
            let z = [rng.normal(), rng.normal()];
            probs.push(crate::softmax(&z).unwrap().into_vec());
            labels.push(if i < 9 { 0 } else { 1 });
        }
        let (w, _) = ClassWeights::from_counts(&[9, 1]).unwrap();
        let weighted = ce_known_loss(&Matrix::from_rows(&probs).unwrap(), &labels, &w).unwrap();

        let mut dup = probs[..9].to_vec();
        for _ in 0..9 {
            dup.push(probs[9].clone());
        }
        let plain: f64 = dup
            .iter()
            .enumerate()
            .map(|(i, p)| -libm::log(p[if i < 9 { 0 } else { 1 }]))
            .sum::<f64>()
            / dup.len() as f64;
        assert!((weighted - plain).abs() < 1e-9, "{weighted} vs {plain}");
    }

    #[test]
    fn confidence_gate_boundaries() {
        let t = rows(&[&[0.5, 0.5], &[1.0, 0.0], &[0.2, 0.8]]);
        assert_eq!(confidence_mask(&t, 1.0), alloc::vec![0.0; 3]);
        assert_eq!(confidence_mask(&t, 0.0), alloc::vec![1.0; 3]);
        let f = rows(&[&[0.9, 0.1], &[0.0, 1.0], &[0.6, 0.4]]);
        assert_eq!(consistency_loss(&f, &t, &confidence_mask(&t, 1.0)).unwrap(), 0.0);
    }

    #[test]
    fn reweighting_equalizes_class_gradient_share() {
        // 9:1 imbalance; each sample's gradient is -w_y / (W p_y) at its label
        let mut rng = crate::Rng::new(8);
        let probs: Vec<Vec<f64>> = (0..10)
            .map(|_| crate::softmax(&[rng.normal(), rng.normal()]).unwrap().into_vec())
            .collect();
        let labels: Vec<usize> = (0..10).map(|i| usize::from(i == 9)).collect();
        let (w, _) = ClassWeights::from_counts(&[9, 1]).unwrap();
        let g = ce_known_grad(&Matrix::from_rows(&probs).unwrap(), &labels, &w).unwrap();
        let total: f64 = labels.iter().map(|&y| w.get(y).unwrap()).sum();
        let mut share = [0.0; 2];
        for (i, &y) in labels.iter().enumerate() {
            let wy = w.get(y).unwrap();
            let oracle = -wy / (total * probs[i][y]);
            assert!((g[(i, y)] - oracle).abs() < 1e-12);
            assert_eq!(g[(i, 1 - y)], 0.0);
            share[y] += wy / total;
        }
        assert!((share[0] - 0.5).abs() < 1e-12 && (share[1] - 0.5).abs() < 1e-12);
    }
}

//! Open-set datasets: the class protocol, synthetic domain-shift generation
//! and input jitter.
//!
//! Class ids are arbitrary `u32`s; a [`Protocol`] splits them into known
//! classes (shared by both domains), source-private and target-private
//! classes. Known classes are indexed `0..C` in the order the protocol lists
//! them, and every source-private class shares the aggregated bucket `C`.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::eval::HiddenLabels;
use crate::losses::ClassWeights;
use crate::matrix::Matrix;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Protocol {
    known: Vec<u32>,
    source_unknown: Vec<u32>,
    target_unknown: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassRole {
    Known(usize),
    SourceUnknown,
    TargetUnknown,
}

impl Protocol {
    /// Requires at least one known class and pairwise-disjoint, duplicate-free
    /// id sets.
    pub fn new(known: Vec<u32>, source_unknown: Vec<u32>, target_unknown: Vec<u32>) -> Result<Self> {
        if known.is_empty() {
            return Err(Error::Protocol("no known classes".into()));
        }
        let mut all: Vec<u32> = known
            .iter()
            .chain(&source_unknown)
            .chain(&target_unknown)
            .copied()
            .collect();
        all.sort_unstable();
        if let Some(w) = all.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Protocol(alloc::format!(
                "class id {} appears in more than one role (or twice)",
                w[0]
            )));
        }
        Ok(Self {
            known,
            source_unknown,
            target_unknown,
        })
    }

    pub fn num_known(&self) -> usize {
        self.known.len()
    }

    pub fn known(&self) -> &[u32] {
        &self.known
    }

    pub fn source_unknown(&self) -> &[u32] {
        &self.source_unknown
    }

    pub fn target_unknown(&self) -> &[u32] {
        &self.target_unknown
    }

    pub fn role(&self, id: u32) -> Option<ClassRole> {
        if let Some(i) = self.known.iter().position(|&k| k == id) {
            Some(ClassRole::Known(i))
        } else if self.source_unknown.contains(&id) {
            Some(ClassRole::SourceUnknown)
        } else if self.target_unknown.contains(&id) {
            Some(ClassRole::TargetUnknown)
        } else {
            None
        }
    }

    pub fn known_index(&self, id: u32) -> Option<usize> {
        match self.role(id) {
            Some(ClassRole::Known(i)) => Some(i),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// Labeled source rows and unlabeled target rows. Target ground truth is
/// stored as [`HiddenLabels`], which only the evaluation module can read.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenSetDataset {
    protocol: Protocol,
    source_x: Matrix,
    source_y: Vec<u32>,
    target_x: Matrix,
    target_truth: HiddenLabels,
}

impl OpenSetDataset {
    pub fn new(
        protocol: Protocol,
        source_x: Matrix,
        source_y: Vec<u32>,
        target_x: Matrix,
        target_y: Vec<u32>,
    ) -> Result<Self> {
        if source_x.rows() != source_y.len() {
            return Err(Error::Shape {
                what: "source labels",
                expected: (source_x.rows(), 1),
                actual: (source_y.len(), 1),
            });
        }
        if target_x.rows() != target_y.len() {
            return Err(Error::Shape {
                what: "target labels",
                expected: (target_x.rows(), 1),
                actual: (target_y.len(), 1),
            });
        }
        if source_x.rows() > 0 && target_x.rows() > 0 && source_x.cols() != target_x.cols() {
            return Err(Error::Shape {
                what: "target features",
                expected: (target_x.rows(), source_x.cols()),
                actual: target_x.shape(),
            });
        }
        for &y in &source_y {
            match protocol.role(y) {
                Some(ClassRole::Known(_) | ClassRole::SourceUnknown) => {}
                _ => {
                    return Err(Error::Protocol(alloc::format!(
                        "source label {y} is neither known nor source-unknown"
                    )))
                }
            }
        }
        for &y in &target_y {
            match protocol.role(y) {
                Some(ClassRole::Known(_) | ClassRole::TargetUnknown) => {}
                _ => {
                    return Err(Error::Protocol(alloc::format!(
                        "target label {y} is neither known nor target-unknown"
                    )))
                }
            }
        }
        Ok(Self {
            protocol,
            source_x,
            source_y,
            target_x,
            target_truth: HiddenLabels::new(target_y),
        })
    }

    pub fn protocol(&self) -> &Protocol {
        &self.protocol
    }

    pub fn num_known(&self) -> usize {
        self.protocol.num_known()
    }

    pub fn input_dim(&self) -> usize {
        if self.source_x.rows() > 0 {
            self.source_x.cols()
        } else {
            self.target_x.cols()
        }
    }

    pub fn source_x(&self) -> &Matrix {
        &self.source_x
    }

    pub fn source_labels(&self) -> &[u32] {
        &self.source_y
    }

    pub fn target_x(&self) -> &Matrix {
        &self.target_x
    }

    pub fn target_truth(&self) -> &HiddenLabels {
        &self.target_truth
    }

    pub fn n_source(&self) -> usize {
        self.source_x.rows()
    }

    pub fn n_target(&self) -> usize {
        self.target_x.rows()
    }

    /// Bucket of source row `i`: its known index, or `C` for any
    /// source-private class.
    pub fn source_bucket(&self, i: usize) -> usize {
        self.protocol
            .known_index(self.source_y[i])
            .unwrap_or(self.protocol.num_known())
    }

    pub fn source_known_rows(&self) -> Vec<usize> {
        let c = self.num_known();
        (0..self.n_source()).filter(|&i| self.source_bucket(i) < c).collect()
    }

    pub fn source_unknown_rows(&self) -> Vec<usize> {
        let c = self.num_known();
        (0..self.n_source()).filter(|&i| self.source_bucket(i) == c).collect()
    }
}

/// Inverse-frequency weights over the `C + 1` source buckets (known classes
/// plus the aggregated source-private bucket). Empty buckets are dropped
/// with a warning.
pub fn class_ratios(dataset: &OpenSetDataset) -> Result<(ClassWeights, Vec<String>)> {
    let mut counts = alloc::vec![0usize; dataset.num_known() + 1];
    for i in 0..dataset.n_source() {
        counts[dataset.source_bucket(i)] += 1;
    }
    ClassWeights::from_counts(&counts)
}

/// How class means are assigned to equally spaced slots on the circle.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Layout {
    /// Class `j` sits in slot `j`: known, then source-private, then
    /// target-private classes.
    Sequential,
    /// Known classes spread out, private classes fill the gaps alternating
    /// source/target.
    #[default]
    Interleaved,
    /// One character per slot, counter-clockwise from angle 0: `k` known,
    /// `s` source-private, `t` target-private. Classes of each kind take
    /// their slots in id order.
    Pattern(String),
}

/// Slot order of the default benchmark (4 known, 3 source-private and 3
/// target-private classes).
pub const BENCHMARK_LAYOUT: &str = "tskskkttsk";

/// Parameters of the synthetic 2-D benchmark.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SyntheticSpec {
    pub num_known: usize,
    pub num_source_unknown: usize,
    pub num_target_unknown: usize,
    /// Samples per class per domain.
    pub samples_per_class: usize,
    /// Extra factor on the sample count of each source-private class.
    pub source_unknown_multiplier: usize,
    pub radius: f64,
    pub cluster_std: f64,
    /// Target rotation about the origin, radians.
    pub rotation: f64,
    pub translation: [f64; 2],
    pub augment_std: f64,
    pub layout: Layout,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_known: 4,
            num_source_unknown: 3,
            num_target_unknown: 3,
            samples_per_class: 100,
            source_unknown_multiplier: 1,
            radius: 3.0,
            cluster_std: 0.6,
            rotation: 30f64.to_radians(),
            translation: [0.5, -0.3],
            augment_std: 0.1,
            layout: Layout::Pattern(BENCHMARK_LAYOUT.into()),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_known", self.num_known),
            ("num_source_unknown", self.num_source_unknown),
            ("num_target_unknown", self.num_target_unknown),
            ("samples_per_class", self.samples_per_class),
            ("source_unknown_multiplier", self.source_unknown_multiplier),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(alloc::format!("{name} must be >= 1")));
        }
        if !(self.cluster_std > 0.0 && self.cluster_std.is_finite()) {
            return Err(Error::Config("cluster_std must be > 0".into()));
        }
        if !(self.augment_std >= 0.0 && self.augment_std.is_finite()) {
            return Err(Error::Config("augment_std must be >= 0".into()));
        }
        if !(self.radius.is_finite() && self.rotation.is_finite())
            || self.translation.iter().any(|t| !t.is_finite())
        {
            return Err(Error::Config("geometry must be finite".into()));
        }
        if let Layout::Pattern(p) = &self.layout {
            let count = |ch: char| p.chars().filter(|x| x.eq_ignore_ascii_case(&ch)).count();
            if p.chars().count() != self.num_classes()
                || count('k') != self.num_known
                || count('s') != self.num_source_unknown
                || count('t') != self.num_target_unknown
            {
                return Err(Error::Config(alloc::format!(
                    "layout pattern {p:?} does not match the class counts; \
                     set layout to \"interleaved\", \"sequential\" or a matching pattern"
                )));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_known + self.num_source_unknown + self.num_target_unknown
    }

    /// Protocol with ids `0..C` known, then source-private, then
    /// target-private.
    pub fn protocol(&self) -> Protocol {
        let c = self.num_known as u32;
        let s = self.num_source_unknown as u32;
        let t = self.num_target_unknown as u32;
        Protocol::new(
            (0..c).collect(),
            (c..c + s).collect(),
            (c + s..c + s + t).collect(),
        )
        .expect("ranges are disjoint")
    }

    /// Slot of every class id on the circle.
    pub fn slots(&self) -> Vec<usize> {
        let (c, s, t) = (self.num_known, self.num_source_unknown, self.num_target_unknown);
        let k = c + s + t;
        match &self.layout {
            Layout::Sequential => (0..k).collect(),
            Layout::Pattern(p) => {
                let mut next = [0, c, c + s];
                let mut slot_of = alloc::vec![usize::MAX; k];
                for (slot, ch) in p.chars().enumerate() {
                    let kind = match ch.to_ascii_lowercase() {
                        'k' => 0,
                        's' => 1,
                        _ => 2,
                    };
                    slot_of[next[kind]] = slot;
                    next[kind] += 1;
                }
                slot_of
            }
            Layout::Interleaved => {
                // known classes at evenly spread slots, private classes fill
                // the remaining slots in order SU0, TU0, SU1, TU1, ...
                let mut slot_of = alloc::vec![usize::MAX; k];
                let mut taken = alloc::vec![false; k];
                for (i, known_slot) in slot_of.iter_mut().take(c).enumerate() {
                    *known_slot = i * k / c;
                    taken[*known_slot] = true;
                }
                let mut private = Vec::with_capacity(s + t);
                for i in 0..s.max(t) {
                    if i < s {
                        private.push(c + i);
                    }
                    if i < t {
                        private.push(c + s + i);
                    }
                }
                let free = (0..k).filter(|&j| !taken[j]);
                for (class, slot) in private.into_iter().zip(free) {
                    slot_of[class] = slot;
                }
                slot_of
            }
        }
    }

    pub fn class_mean(&self, class: usize) -> [f64; 2] {
        let k = self.num_classes() as f64;
        let angle = 2.0 * core::f64::consts::PI * self.slots()[class] as f64 / k;
        [self.radius * libm::cos(angle), self.radius * libm::sin(angle)]
    }

    /// Maps a source-domain point into the target domain.
    pub fn shift(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = (libm::sin(self.rotation), libm::cos(self.rotation));
        [
            c * p[0] - s * p[1] + self.translation[0],
            s * p[0] + c * p[1] + self.translation[1],
        ]
    }
}

/// Gaussian clusters on a circle; target rows are the same generative
/// classes pushed through the rotation and translation. Rows are emitted
/// class by class; the generator draws source rows first.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<OpenSetDataset> {
    spec.validate()?;
    let protocol = spec.protocol();
    let mut rng = Rng::new(spec.seed);
    let n = spec.samples_per_class;

    let mut draw = |class: usize, count: usize, shifted: bool, xs: &mut Vec<f64>, ys: &mut Vec<u32>| {
        let mean = spec.class_mean(class);
        for _ in 0..count {
            let p = [
                mean[0] + spec.cluster_std * rng.normal(),
                mean[1] + spec.cluster_std * rng.normal(),
            ];
            let p = if shifted { spec.shift(p) } else { p };
            xs.extend_from_slice(&p);
            ys.push(class as u32);
        }
    };

    let (mut sx, mut sy) = (Vec::new(), Vec::new());
    for &id in protocol.known() {
        draw(id as usize, n, false, &mut sx, &mut sy);
    }
    for &id in protocol.source_unknown() {
        draw(id as usize, n * spec.source_unknown_multiplier, false, &mut sx, &mut sy);
    }
    let (mut tx, mut ty) = (Vec::new(), Vec::new());
    for &id in protocol.known() {
        draw(id as usize, n, true, &mut tx, &mut ty);
    }
    for &id in protocol.target_unknown() {
        draw(id as usize, n, true, &mut tx, &mut ty);
    }

    let source_x = Matrix::from_vec(sy.len(), 2, sx)?;
    let target_x = Matrix::from_vec(ty.len(), 2, tx)?;
    OpenSetDataset::new(protocol, source_x, sy, target_x, ty)
}

/// `x + N(0, σ²)` per coordinate. Always draws one normal per coordinate,
/// so the random stream does not depend on σ.
pub fn augment(x: &[f64], rng: &mut Rng, noise_std: f64) -> Vec<f64> {
    x.iter().map(|v| v + noise_std * rng.normal()).collect()
}

pub fn augment_rows(x: &Matrix, rng: &mut Rng, noise_std: f64) -> Matrix {
    let mut out = x.clone();
    for v in out.as_mut_slice() {
        *v += noise_std * rng.normal();
    }
    out
}

//! The student/teacher MLP classifiers and the post-hoc unknown detector.
//!
//! Layers are plain affine maps `z = x·W + b` (`W` is `in × out`) with a
//! rectifier between layers and identity on the output. There is no batch
//! normalization: it is unclear how running statistics would combine with
//! the teacher's moving average, and none of the losses need it.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::prob::ProbVector;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: Matrix::zeros(fan_in, fan_out),
            bias: alloc::vec![0.0; fan_out],
        }
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let mut layer = Self::zeros(fan_in, fan_out);
        for w in layer.weights.as_mut_slice() {
            *w = rng.uniform_range(-limit, limit);
        }
        layer
    }

    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }

    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut z = x.matmul(&self.weights)?;
        z.add_row_broadcast(&self.bias);
        Ok(z)
    }
}

/// Multi-layer perceptron over `sizes = [input, hidden..., output]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpClassifier {
    layers: Vec<Layer>,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` is the input to layer `l` (post-rectifier for `l > 0`).
    inputs: Vec<Matrix>,
    pub logits: Matrix,
}

impl ForwardCache {
    /// Output of the last hidden layer (after the rectifier).
    pub fn last_hidden(&self) -> &Matrix {
        self.inputs.last().expect("at least one layer")
    }
}

/// Parameter-shaped gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(net: &MlpClassifier) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Layer::zeros(l.fan_in(), l.fan_out()))
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(l.bias.iter()))
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.as_mut_slice().iter_mut().zip(b.weights.as_slice()) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }
}

impl MlpClassifier {
    pub fn new(sizes: &[usize], rng: &mut Rng) -> Result<Self> {
        check_sizes(sizes)?;
        Ok(Self {
            layers: sizes
                .windows(2)
                .map(|w| Layer::glorot(w[0], w[1], rng))
                .collect(),
        })
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        check_sizes(sizes)?;
        Ok(Self {
            layers: sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("classifier needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::Shape {
                    what: "layer chain",
                    expected: (pair[0].fan_out(), pair[1].fan_out()),
                    actual: (pair[1].fan_in(), i + 1),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.fan_out() {
                return Err(Error::Shape {
                    what: "bias",
                    expected: (1, l.fan_out()),
                    actual: (1, l.bias.len()),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.layers.len() + 1);
        s.push(self.layers[0].fan_in());
        s.extend(self.layers.iter().map(Layer::fan_out));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    /// `Σ (in + 1) · out` over layers.
    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| (l.fan_in() + 1) * l.fan_out())
            .sum()
    }

    /// Parameters in layer order; within a layer the row-major weights
    /// precede the bias.
    pub fn params(&self) -> impl Iterator<Item = &f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(l.bias.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers.iter_mut().flat_map(|l| {
            l.weights
                .as_mut_slice()
                .iter_mut()
                .chain(l.bias.iter_mut())
        })
    }

    pub fn param_vec(&self) -> Vec<f64> {
        self.params().copied().collect()
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Shape {
                what: "parameter vector",
                expected: (self.num_params(), 1),
                actual: (values.len(), 1),
            });
        }
        for (p, v) in self.params_mut().zip(values) {
            *p = *v;
        }
        Ok(())
    }

    /// Order-sensitive FNV-1a over the parameter bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params() {
            for b in p.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape {
                what: "classifier input",
                expected: (x.rows(), self.input_dim()),
                actual: x.shape(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = self.layers[0].apply(x)?;
        for layer in &self.layers[1..] {
            h.map_inplace(relu);
            h = layer.apply(&h)?;
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<ForwardCache> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        inputs.push(x.clone());
        let mut z = self.layers[0].apply(x)?;
        for layer in &self.layers[1..] {
            z.map_inplace(relu);
            let next = layer.apply(&z)?;
            inputs.push(z);
            z = next;
        }
        Ok(ForwardCache { inputs, logits: z })
    }

    /// Last hidden layer activations (the input itself for a single-layer net).
    pub fn hidden_features(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(x)?.inputs.pop().expect("non-empty"))
    }

    /// Reverse-mode pass: parameter gradients given `dL/dlogits`.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Matrix) -> Result<Gradients> {
        if dlogits.shape() != cache.logits.shape() {
            return Err(Error::Shape {
                what: "logit gradient",
                expected: cache.logits.shape(),
                actual: dlogits.shape(),
            });
        }
        let mut grads = Gradients::zeros_like(self);
        let mut delta = dlogits.clone();
        for l in (0..self.layers.len()).rev() {
            let input = &cache.inputs[l];
            grads.layers[l].weights = input.t_matmul(&delta)?;
            grads.layers[l].bias = delta.column_sums();
            if l > 0 {
                let mut upstream = delta.matmul_t(&self.layers[l].weights)?;
                // rectifier: the cached input is post-ReLU, so > 0 marks the active units
                for (u, a) in upstream.as_mut_slice().iter_mut().zip(input.as_slice()) {
                    if *a <= 0.0 {
                        *u = 0.0;
                    }
                }
                delta = upstream;
            }
        }
        Ok(grads)
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::Config(alloc::format!(
            "layer sizes must have >= 2 positive entries, got {sizes:?}"
        )));
    }
    Ok(())
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// A gradient-trained student and its moving-average teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentTeacherModel {
    pub student: MlpClassifier,
    pub teacher: MlpClassifier,
    ema_decay: f64,
}

impl StudentTeacherModel {
    /// The teacher starts as an exact copy of the student.
    pub fn new(student: MlpClassifier, ema_decay: f64) -> Result<Self> {
        check_decay(ema_decay)?;
        Ok(Self {
            teacher: student.clone(),
            student,
            ema_decay,
        })
    }

    pub fn from_parts(student: MlpClassifier, teacher: MlpClassifier, ema_decay: f64) -> Result<Self> {
        check_decay(ema_decay)?;
        if student.sizes() != teacher.sizes() {
            return Err(Error::Config("student and teacher shapes differ".into()));
        }
        Ok(Self {
            student,
            teacher,
            ema_decay,
        })
    }

    pub fn ema_decay(&self) -> f64 {
        self.ema_decay
    }

    pub fn set_ema_decay(&mut self, alpha: f64) -> Result<()> {
        check_decay(alpha)?;
        self.ema_decay = alpha;
        Ok(())
    }

    /// `θ_t ← α·θ_t + (1 − α)·θ_s` for every parameter.
    pub fn ema_update(&mut self) -> Result<()> {
        check_decay(self.ema_decay)?;
        if self.student.sizes() != self.teacher.sizes() {
            return Err(Error::Config("student and teacher shapes differ".into()));
        }
        let alpha = self.ema_decay;
        let beta = 1.0 - alpha;
        for (t, s) in self.teacher.params_mut().zip(self.student.params()) {
            *t = alpha * *t + beta * *s;
        }
        Ok(())
    }

    /// Copies the student into the teacher slot (single-network methods).
    pub fn sync_teacher(&mut self) {
        self.teacher = self.student.clone();
    }
}

fn check_decay(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(alloc::format!(
            "ema decay {alpha} outside [0, 1]"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Decision {
    Known,
    Unknown,
}

/// Two-layer known/unknown classifier on the known-class probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct UnknownDetector {
    net: MlpClassifier,
    threshold: f64,
    fitted: bool,
}

impl UnknownDetector {
    /// A freshly initialized, unfitted detector `C → hidden → 1`.
    pub fn new(num_known: usize, hidden: usize, threshold: f64, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            net: MlpClassifier::new(&[num_known, hidden, 1], rng)?,
            threshold,
            fitted: false,
        })
    }

    /// A detector with explicit parameters, considered fitted.
    pub fn from_layers(hidden: Layer, output: Layer, threshold: f64) -> Result<Self> {
        let net = MlpClassifier::from_layers(alloc::vec![hidden, output])?;
        if net.output_dim() != 1 {
            return Err(Error::Config("detector must output a single logit".into()));
        }
        Ok(Self {
            net,
            threshold,
            fitted: true,
        })
    }

    pub fn net(&self) -> &MlpClassifier {
        &self.net
    }

    pub(crate) fn net_mut(&mut self) -> &mut MlpClassifier {
        &mut self.net
    }

    pub(crate) fn mark_fitted(&mut self) {
        self.fitted = true;
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn num_known(&self) -> usize {
        self.net.input_dim()
    }

    /// Probability that `p` comes from an unknown class.
    pub fn unknown_probability(&self, p: &ProbVector) -> Result<f64> {
        if !self.fitted {
            return Err(Error::NotFitted);
        }
        let x = Matrix::from_vec(1, p.len(), p.as_slice().to_vec())?;
        let z = self.net.forward(&x)?[(0, 0)];
        Ok(sigmoid(z))
    }

    /// `Unknown` iff `sigmoid(logit) > τ`.
    pub fn detect_unknown(&self, p: &ProbVector) -> Result<Decision> {
        Ok(if self.unknown_probability(p)? > self.threshold {
            Decision::Unknown
        } else {
            Decision::Known
        })
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

//! Known-class aware self-ensembling for open-set domain adaptation.
//!
//! A student network learns from labeled source data and unlabeled target
//! data whose label sets only partly overlap. The teacher is an exponential
//! moving average of the student and makes the predictions. A small detector
//! on the teacher's known-class probabilities marks target samples as
//! "unknown". The loss terms live in [`losses`] and are combined in
//! [`objective`].
//!
//! The crate is `no_std` (it needs `alloc`). All transcendental functions go
//! through `libm`, so results are reproducible bit-for-bit across platforms.
//! File formats, the experiment runner and the command line live in the
//! `kase-lab` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod data;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod matrix;
pub mod network;
pub mod objective;
pub mod optim;
pub mod prob;
pub mod rng;
pub mod trainer;

pub use data::{OpenSetDataset, Protocol, SyntheticSpec};
pub use error::{Error, Result};
pub use eval::{EvalReport, Prediction};
pub use losses::{ClassWeights, LossBreakdown, WeightFormula};
pub use matrix::Matrix;
pub use network::{MlpClassifier, StudentTeacherModel, UnknownDetector};
pub use prob::{entropy, softmax, ProbVector};
pub use rng::Rng;
pub use trainer::{Method, TrainConfig, TrainTrace};


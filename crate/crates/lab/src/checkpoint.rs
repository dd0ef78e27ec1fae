//! Model checkpoints as JSON: layer sizes plus flat parameter vectors in the
//! order of `MlpClassifier::params`.

use std::path::Path;

use kase_core::network::Layer;
use kase_core::{MlpClassifier, StudentTeacherModel, UnknownDetector};
use serde::{Deserialize, Serialize};

use crate::error::{io, LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetState {
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
}

impl NetState {
    pub fn capture(net: &MlpClassifier) -> Self {
        Self {
            sizes: net.sizes(),
            params: net.param_vec(),
        }
    }

    pub fn restore(&self) -> Result<MlpClassifier> {
        let mut net = MlpClassifier::zeros(&self.sizes)?;
        net.set_params(&self.params)?;
        Ok(net)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorState {
    pub threshold: f64,
    pub net: NetState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub ema_decay: f64,
    pub student: NetState,
    pub teacher: NetState,
    pub detector: Option<DetectorState>,
}

impl Checkpoint {
    pub fn capture(model: &StudentTeacherModel, detector: Option<&UnknownDetector>) -> Self {
        Self {
            ema_decay: model.ema_decay(),
            student: NetState::capture(&model.student),
            teacher: NetState::capture(&model.teacher),
            detector: detector.map(|d| DetectorState {
                threshold: d.threshold(),
                net: NetState::capture(d.net()),
            }),
        }
    }

    pub fn restore(&self) -> Result<(StudentTeacherModel, Option<UnknownDetector>)> {
        let model =
            StudentTeacherModel::from_parts(self.student.restore()?, self.teacher.restore()?, self.ema_decay)?;
        let detector = match &self.detector {
            None => None,
            Some(d) => {
                let net = d.net.restore()?;
                let [hidden, output]: [Layer; 2] = net
                    .layers()
                    .to_vec()
                    .try_into()
                    .map_err(|_| LabError::Config("detector must have two layers".into()))?;
                Some(UnknownDetector::from_layers(hidden, output, d.threshold)?)
            }
        };
        Ok((model, detector))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
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

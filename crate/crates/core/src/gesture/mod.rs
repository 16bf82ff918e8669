//! Surgeme classification over short windows of kinematic data.

mod checkpoint;
mod model;
mod train;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use model::{
    loss_and_gradients, loss_and_gradients_views, ModelParams, ModelShape, Standardizer,
    TensorInfo,
};
pub use train::{
    accuracy, confusion, kfold_evaluate, train, Classifier, ConfusionMatrix, EpochMetrics, FoldReport,
    KFoldReport, LabeledWindow, TrainConfig, TrainOutcome,
};

/// Time steps per classification window (3 s at 20 Hz).
pub const WINDOW_LEN: usize = 60;
/// Linear velocity, angular velocity and gripper angle for each of four devices.
pub const STREAM_FEATURES: usize = 28;
pub const NUM_CLASSES: usize = 5;
pub const SAMPLE_RATE_HZ: f64 = 20.0;

/// The four fundamental suturing surgemes plus a catch-all.
///
/// The integer code doubles as the index into probability vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GestureClass {
    Other = 0,
    Positioning = 1,
    Push = 2,
    Pull = 3,
    Handoff = 4,
}

impl GestureClass {
    pub const ALL: [GestureClass; NUM_CLASSES] = [
        GestureClass::Other,
        GestureClass::Positioning,
        GestureClass::Push,
        GestureClass::Pull,
        GestureClass::Handoff,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            GestureClass::Other => "Other",
            GestureClass::Positioning => "Positioning",
            GestureClass::Push => "Push",
            GestureClass::Pull => "Pull",
            GestureClass::Handoff => "Handoff",
        }
    }

    /// Index of the largest probability; ties go to the lowest code.
    pub fn argmax(probs: &[f64; NUM_CLASSES]) -> (Self, f64) {
        let mut best = 0;
        for i in 1..NUM_CLASSES {
            if probs[i] > probs[best] {
                best = i;
            }
        }
        (Self::ALL[best], probs[best])
    }
}

impl std::fmt::Display for GestureClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for GestureClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown gesture class {s:?}")))
    }
}

/// 60 x 28 block of streaming features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureWindow {
    data: Array2<f64>,
}

impl FeatureWindow {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.dim() != (WINDOW_LEN, STREAM_FEATURES) {
            return Err(Error::Shape(format!(
                "feature window must be {WINDOW_LEN}x{STREAM_FEATURES}, got {:?}",
                data.dim()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("feature window has non-finite entries".into()));
        }
        Ok(Self { data })
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_round_trip() {
        for c in GestureClass::ALL {
            assert_eq!(GestureClass::from_code(c.code()), Some(c));
            assert_eq!(c.name().parse::<GestureClass>().unwrap(), c);
        }
        assert_eq!(GestureClass::Positioning.code(), 1);
        assert_eq!(GestureClass::Other.code(), 0);
        assert!(GestureClass::from_code(5).is_none());
    }

    #[test]
    fn argmax_tie_prefers_lowest_code() {
        let (c, p) = GestureClass::argmax(&[0.1, 0.35, 0.35, 0.1, 0.1]);
        assert_eq!(c, GestureClass::Positioning);
        assert_eq!(p, 0.35);
        let (c, _) = GestureClass::argmax(&[0.2; 5]);
        assert_eq!(c, GestureClass::Other);
    }

    #[test]
    fn window_shape_is_checked() {
        assert!(FeatureWindow::new(Array2::zeros((60, 28))).is_ok());
        assert!(FeatureWindow::new(Array2::zeros((59, 28))).is_err());
        let mut a = Array2::zeros((60, 28));
        a[(3, 3)] = f64::INFINITY;
        assert!(FeatureWindow::new(a).is_err());
    }
}

//! Beta-posterior trust in the visual tracking stream.
//!
//! Each tick the keydot (tool) and ChArUco (phantom) marker detections are
//! reduced to a binary performance sample. Detections add `w1` to alpha,
//! losses add `w0` to beta, and the posterior mean is the confidence λ that
//! the shared controller feeds into the blending law. Only the last `n`
//! samples count: when a sample leaves the window its contribution is
//! subtracted again.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisibilitySample {
    pub kd_visible: bool,
    pub ch_visible: bool,
    pub timestamp_tick: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Performance {
    Lost = 0,
    Tracked = 1,
}

impl Performance {
    pub fn value(self) -> u8 {
        self as u8
    }
}

/// Either marker seen means the tracking is usable.
pub fn classify_performance(v: &VisibilitySample) -> Performance {
    if v.kd_visible || v.ch_visible {
        Performance::Tracked
    } else {
        Performance::Lost
    }
}

/// Tunables, named after their configuration keys.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfidenceConfig {
    pub alpha0: f64,
    pub beta0: f64,
    pub w0: f64,
    pub w1: f64,
    pub window_n: usize,
    pub lambda_cap: f64,
    /// Affine map applied to the posterior mean before clamping to `[0, cap]`.
    pub lambda_scale: f64,
    pub lambda_offset: f64,
}

impl Default for ConfidenceConfig {
    fn default() -> Self {
        Self {
            alpha0: 1.0,
            beta0: 1.0,
            w0: 3.0,
            w1: 1.0,
            window_n: 100,
            lambda_cap: 0.8,
            lambda_scale: 1.0,
            lambda_offset: 0.0,
        }
    }
}

impl ConfidenceConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha0", self.alpha0),
            ("beta0", self.beta0),
            ("w0", self.w0),
            ("w1", self.w1),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.window_n == 0 {
            return Err(Error::Config("window_n must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_cap) {
            return Err(Error::Config(format!(
                "lambda_cap must lie in [0, 1], got {}",
                self.lambda_cap
            )));
        }
        if !self.lambda_scale.is_finite() || !self.lambda_offset.is_finite() {
            return Err(Error::Config("lambda scaling must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceState {
    pub alpha: f64,
    pub beta: f64,
    pub alpha0: f64,
    pub beta0: f64,
    pub w0: f64,
    pub w1: f64,
    pub lambda_cap: f64,
    pub lambda_scale: f64,
    pub lambda_offset: f64,
}

impl ConfidenceState {
    pub fn from_config(cfg: &ConfidenceConfig) -> Self {
        Self {
            alpha: cfg.alpha0,
            beta: cfg.beta0,
            alpha0: cfg.alpha0,
            beta0: cfg.beta0,
            w0: cfg.w0,
            w1: cfg.w1,
            lambda_cap: cfg.lambda_cap,
            lambda_scale: cfg.lambda_scale,
            lambda_offset: cfg.lambda_offset,
        }
    }

    /// Posterior mean of the Beta distribution.
    pub fn posterior_mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }
}

pub fn update(state: &ConfidenceState, p: Performance) -> ConfidenceState {
    let mut next = *state;
    match p {
        Performance::Tracked => next.alpha += state.w1,
        Performance::Lost => next.beta += state.w0,
    }
    next
}

/// Confidence handed to the controller: the posterior mean, scaled and
/// clamped to `[0, cap]`.
pub fn lambda_of(state: &ConfidenceState) -> f64 {
    let raw = state.posterior_mean();
    (state.lambda_scale * raw + state.lambda_offset).clamp(0.0, state.lambda_cap)
}

/// Removes an expired sample's contribution. Never drops below the prior.
pub fn decay_window(state: &ConfidenceState, expired: Performance) -> ConfidenceState {
    let mut next = *state;
    match expired {
        Performance::Tracked => next.alpha = (state.alpha - state.w1).max(state.alpha0),
        Performance::Lost => next.beta = (state.beta - state.w0).max(state.beta0),
    }
    next
}

/// Bounded history of performance samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryWindow {
    capacity: usize,
    samples: VecDeque<Performance>,
}

impl HistoryWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            samples: VecDeque::with_capacity(capacity + 1),
        }
    }

    /// Pushes a sample and returns the one that fell out, if any.
    pub fn push(&mut self, p: Performance) -> Option<Performance> {
        self.samples.push_back(p);
        if self.samples.len() > self.capacity {
            self.samples.pop_front()
        } else {
            None
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Performance> + '_ {
        self.samples.iter().copied()
    }
}

/// Windowed trust estimator for one manipulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceEngine {
    state: ConfidenceState,
    history: HistoryWindow,
}

impl ConfidenceEngine {
    pub fn new(cfg: &ConfidenceConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            state: ConfidenceState::from_config(cfg),
            history: HistoryWindow::new(cfg.window_n),
        })
    }

    pub fn observe(&mut self, v: &VisibilitySample) -> f64 {
        self.push(classify_performance(v))
    }

    pub fn push(&mut self, p: Performance) -> f64 {
        self.state = update(&self.state, p);
        if let Some(expired) = self.history.push(p) {
            self.state = decay_window(&self.state, expired);
        }
        self.lambda()
    }

    pub fn lambda(&self) -> f64 {
        lambda_of(&self.state)
    }

    pub fn state(&self) -> &ConfidenceState {
        &self.state
    }

    pub fn history(&self) -> &HistoryWindow {
        &self.history
    }

    /// Overrides the cap, e.g. to 1.0 for coactive experiments.
    pub fn set_cap(&mut self, cap: f64) {
        self.state.lambda_cap = cap.clamp(0.0, 1.0);
    }
}

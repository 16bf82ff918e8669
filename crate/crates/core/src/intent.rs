//! Human target estimation from interaction force.
//!
//! The operator is modeled as an impedance around a hidden target τ_h:
//!
//! ```text
//! u_h = -L1 (x - τ_h) - L2 ẋ
//! ```
//!
//! Solving for τ_h gives a pseudo-measurement of the target every tick. A
//! random-walk Kalman filter smooths those measurements into the estimate
//! τ̂_h used by the shared controller.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::Vec3;

/// Control period shared by the estimator, controller and simulator.
pub const TICK_SECONDS: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ImpedanceSpec", into = "ImpedanceSpec")]
pub struct ImpedanceParams {
    stiffness: Matrix3<f64>,
    viscosity: Matrix3<f64>,
    stiffness_inv: Matrix3<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct ImpedanceSpec {
    stiffness: Matrix3<f64>,
    viscosity: Matrix3<f64>,
}

impl TryFrom<ImpedanceSpec> for ImpedanceParams {
    type Error = Error;
    fn try_from(s: ImpedanceSpec) -> Result<Self> {
        ImpedanceParams::new(s.stiffness, s.viscosity)
    }
}

impl From<ImpedanceParams> for ImpedanceSpec {
    fn from(p: ImpedanceParams) -> Self {
        ImpedanceSpec {
            stiffness: p.stiffness,
            viscosity: p.viscosity,
        }
    }
}

fn is_positive_definite(m: &Matrix3<f64>) -> bool {
    let sym = (m + m.transpose()) * 0.5;
    m.iter().all(|v| v.is_finite()) && sym.cholesky().is_some()
}

impl ImpedanceParams {
    /// `stiffness` in N/m, `viscosity` in N·s/m. Both must be positive definite.
    pub fn new(stiffness: Matrix3<f64>, viscosity: Matrix3<f64>) -> Result<Self> {
        if !is_positive_definite(&stiffness) {
            return Err(Error::Config("stiffness L1 must be positive definite".into()));
        }
        if !is_positive_definite(&viscosity) {
            return Err(Error::Config("viscosity L2 must be positive definite".into()));
        }
        let stiffness_inv = stiffness
            .try_inverse()
            .ok_or_else(|| Error::Config("stiffness L1 is singular".into()))?;
        Ok(Self {
            stiffness,
            viscosity,
            stiffness_inv,
        })
    }

    pub fn isotropic(stiffness: f64, viscosity: f64) -> Result<Self> {
        Self::new(
            Matrix3::from_diagonal_element(stiffness),
            Matrix3::from_diagonal_element(viscosity),
        )
    }

    pub fn stiffness(&self) -> &Matrix3<f64> {
        &self.stiffness
    }

    pub fn viscosity(&self) -> &Matrix3<f64> {
        &self.viscosity
    }
}

impl Default for ImpedanceParams {
    fn default() -> Self {
        Self::isotropic(120.0, 15.0).expect("default impedance is valid")
    }
}

/// Interaction force produced by an operator pulling toward `target`.
pub fn impedance_force(target: &Vec3, x: &Vec3, xdot: &Vec3, imp: &ImpedanceParams) -> Vec3 {
    -imp.stiffness * (x - target) - imp.viscosity * xdot
}

/// Inverts the impedance model: τ = x + L1⁻¹ (u_h + L2 ẋ).
pub fn pseudo_measurement(u_h: &Vec3, x: &Vec3, xdot: &Vec3, imp: &ImpedanceParams) -> Vec3 {
    x + imp.stiffness_inv * (u_h + imp.viscosity * xdot)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntentEstimate {
    pub tau_h_hat: Vec3,
    pub covariance: Matrix3<f64>,
    pub innovation: Vec3,
    pub timestamp: f64,
    /// Set when the last measurement was unusable and the update was skipped.
    pub skipped: bool,
}

impl IntentEstimate {
    pub fn initial(position: Vec3, covariance: Matrix3<f64>, timestamp: f64) -> Self {
        Self {
            tau_h_hat: position,
            covariance,
            innovation: Vec3::zeros(),
            timestamp,
            skipped: false,
        }
    }
}

/// Switches the random-walk process noise between a hold level (target at
/// rest, estimate keeps averaging) and the nominal level (operator moving
/// or target jump detected).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionGate {
    /// Hand speed above which the target is treated as moving, m/s.
    pub speed_threshold: f64,
    /// Fraction of the nominal process noise applied while holding.
    pub hold_scale: f64,
    /// Per-axis normalized innovation that counts as a jump.
    pub jump_sigma: f64,
    /// Consecutive ticks above `jump_sigma` before a jump is declared.
    pub jump_ticks: u32,
}

impl Default for MotionGate {
    fn default() -> Self {
        Self {
            speed_threshold: 0.005,
            hold_scale: 0.0,
            jump_sigma: 3.0,
            jump_ticks: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KalmanConfig {
    /// Random-walk process noise Q, m² per tick.
    pub process_noise: Matrix3<f64>,
    /// Pseudo-measurement noise R, m².
    pub measurement_noise: Matrix3<f64>,
    pub initial_covariance: Matrix3<f64>,
    pub gate: Option<MotionGate>,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        let mm2 = |v: f64| Matrix3::from_diagonal_element((v * 1e-3).powi(2));
        Self {
            process_noise: mm2(2.0),
            measurement_noise: mm2(5.0),
            initial_covariance: mm2(50.0),
            gate: Some(MotionGate::default()),
        }
    }
}

fn is_psd(m: &Matrix3<f64>) -> bool {
    if m.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().iter().all(|&e| e >= -1e-15)
}

impl KalmanConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, m) in [
            ("process_noise", &self.process_noise),
            ("measurement_noise", &self.measurement_noise),
            ("initial_covariance", &self.initial_covariance),
        ] {
            if !is_psd(m) {
                return Err(Error::Config(format!("{name} must be positive semi-definite")));
            }
        }
        Ok(())
    }
}

fn symmetrize(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

/// One random-walk predict + update. A non-finite measurement skips the
/// update: the covariance still grows by Q and the result is flagged.
pub fn kf_step(state: &IntentEstimate, measurement: &Vec3, cfg: &KalmanConfig) -> IntentEstimate {
    let predicted_cov = state.covariance + cfg.process_noise;
    if measurement.iter().any(|v| !v.is_finite()) {
        return IntentEstimate {
            tau_h_hat: state.tau_h_hat,
            covariance: symmetrize(&predicted_cov),
            innovation: Vec3::zeros(),
            timestamp: state.timestamp,
            skipped: true,
        };
    }
    let innovation = measurement - state.tau_h_hat;
    let s = predicted_cov + cfg.measurement_noise;
    let s_inv = match s.cholesky() {
        Some(c) => c.inverse(),
        None => s.try_inverse().unwrap_or_else(Matrix3::zeros),
    };
    let gain = predicted_cov * s_inv;
    let i_minus_k = Matrix3::identity() - gain;
    // Joseph form keeps the covariance PSD under rounding.
    let covariance = i_minus_k * predicted_cov * i_minus_k.transpose()
        + gain * cfg.measurement_noise * gain.transpose();
    IntentEstimate {
        tau_h_hat: state.tau_h_hat + gain * innovation,
        covariance: symmetrize(&covariance),
        innovation,
        timestamp: state.timestamp,
        skipped: false,
    }
}

/// One tick of operator interaction as seen by the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteractionSample {
    pub timestamp: f64,
    pub force: Vec3,
    pub position: Vec3,
    pub velocity: Vec3,
}

/// Stateful estimator owned by one manipulator's control loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentEstimator {
    impedance: ImpedanceParams,
    config: KalmanConfig,
    state: Option<IntentEstimate>,
    jump_streak: [u32; 3],
}

impl IntentEstimator {
    pub fn new(impedance: ImpedanceParams, config: KalmanConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            impedance,
            config,
            state: None,
            jump_streak: [0; 3],
        })
    }

    pub fn estimate(&self) -> Option<&IntentEstimate> {
        self.state.as_ref()
    }

    pub fn impedance(&self) -> &ImpedanceParams {
        &self.impedance
    }

    pub fn reset(&mut self) {
        self.state = None;
        self.jump_streak = [0; 3];
    }

    pub fn step(&mut self, sample: &InteractionSample) -> Result<IntentEstimate> {
        let measurement = pseudo_measurement(
            &sample.force,
            &sample.position,
            &sample.velocity,
            &self.impedance,
        );
        let prior = match &self.state {
            None => IntentEstimate::initial(
                sample.position,
                self.config.initial_covariance,
                sample.timestamp,
            ),
            Some(prev) => {
                if !(sample.timestamp > prev.timestamp) {
                    return Err(Error::Config(format!(
                        "non-monotone timestamp {} after {}",
                        sample.timestamp, prev.timestamp
                    )));
                }
                *prev
            }
        };

        let mut cfg = self.config;
        let mut prior = prior;
        if let Some(gate) = self.config.gate {
            let moving = sample.velocity.norm() > gate.speed_threshold;
            let mut jump = false;
            if measurement.iter().all(|v| v.is_finite()) {
                let hold_q = self.config.process_noise * gate.hold_scale;
                for i in 0..3 {
                    let s = prior.covariance[(i, i)]
                        + hold_q[(i, i)]
                        + self.config.measurement_noise[(i, i)];
                    let nu = measurement[i] - prior.tau_h_hat[i];
                    if s > 0.0 && nu.abs() > gate.jump_sigma * s.sqrt() {
                        self.jump_streak[i] += 1;
                    } else {
                        self.jump_streak[i] = 0;
                    }
                    if self.jump_streak[i] >= gate.jump_ticks {
                        jump = true;
                    }
                }
            }
            if jump {
                let nu = measurement - prior.tau_h_hat;
                prior.covariance += Matrix3::from_diagonal(&nu.component_mul(&nu));
                self.jump_streak = [0; 3];
            }
            if !(moving || jump) {
                cfg.process_noise *= gate.hold_scale;
            }
        }

        let mut next = kf_step(&prior, &measurement, &cfg);
        next.timestamp = sample.timestamp;
        self.state = Some(next);
        Ok(next)
    }
}

/// Runs the estimator over a whole interaction stream.
pub fn estimate_intent<'a>(
    samples: impl IntoIterator<Item = &'a InteractionSample>,
    impedance: &ImpedanceParams,
    config: &KalmanConfig,
) -> Result<Vec<IntentEstimate>> {
    let mut est = IntentEstimator::new(*impedance, *config)?;
    samples.into_iter().map(|s| est.step(s)).collect()
}

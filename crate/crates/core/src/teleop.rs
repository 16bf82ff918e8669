//! One operator hand driving one manipulator: delay, clutch, intent
//! estimation, confidence, blending and pedal-triggered reorientation.

use std::collections::VecDeque;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::confidence::{ConfidenceConfig, ConfidenceEngine, VisibilitySample};
use crate::control::{
    auto_orient, CommandFlags, ControlInput, ControllerConfig, SharedController,
};
use crate::error::{Error, Result};
use crate::gesture::GestureClass;
use crate::intent::{
    ImpedanceParams, IntentEstimate, IntentEstimator, InteractionSample, KalmanConfig,
};
use crate::kinematics::{DeviceId, EntryPointSet, Pose, Rot3, TaskFrame, Vec3};
use crate::sim::{DelayLine, Manipulator, Mode, SimConfig, SimEvent};

/// Ceiling of the linear confidence ramp.
pub const RAMP_CAP: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LambdaSource {
    /// Marker-visibility Beta posterior.
    Bayes,
    /// 0 to [`RAMP_CAP`] over `duration` seconds after each ramp reset.
    LinearRamp { duration: f64 },
    Fixed { value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IntentSource {
    Estimated,
    /// The operator's true target, when the input carries one.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub lambda: LambdaSource,
    pub intent: IntentSource,
    pub impedance: ImpedanceParams,
    pub kalman: KalmanConfig,
    pub confidence: ConfidenceConfig,
    pub controller: ControllerConfig,
    /// Largest autonomous reorientation per tick, rad.
    pub orient_step: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Ciac,
            lambda: LambdaSource::Bayes,
            intent: IntentSource::Estimated,
            impedance: ImpedanceParams::default(),
            kalman: KalmanConfig::default(),
            confidence: ConfidenceConfig::default(),
            controller: ControllerConfig::default(),
            orient_step: 0.1,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        match self.lambda {
            LambdaSource::LinearRamp { duration } if !(duration > 0.0) => {
                return Err(Error::Config("ramp duration must be positive".into()));
            }
            LambdaSource::Fixed { value } if !(0.0..=1.0).contains(&value) => {
                return Err(Error::Config(format!("fixed lambda {value} outside [0, 1]")));
            }
            _ => {}
        }
        if !(self.orient_step > 0.0) || !self.orient_step.is_finite() {
            return Err(Error::Config("orient_step must be positive".into()));
        }
        self.kalman.validate()?;
        self.confidence.validate()?;
        self.controller.validate()
    }
}

/// One operator hand sample in task-frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandInput {
    pub position: Vec3,
    pub velocity: Vec3,
    pub orientation: Rot3,
    pub angular_velocity: Vec3,
    pub gripper: f64,
    /// Interaction force on the master device.
    pub force: Vec3,
    pub pedal: bool,
    pub clutch: bool,
    /// Where the operator is actually heading; only scripted operators know.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec3>,
}

impl HandInput {
    pub fn at_rest(position: Vec3, orientation: Rot3) -> Self {
        Self {
            position,
            velocity: Vec3::zeros(),
            orientation,
            angular_velocity: Vec3::zeros(),
            gripper: 0.0,
            force: Vec3::zeros(),
            pedal: false,
            clutch: false,
            target: None,
        }
    }
}

/// What the pipeline did in one tick.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineTick {
    pub command: Pose,
    pub tau_h_hat: Vec3,
    pub lambda: f64,
    pub lambda_used: Vec3,
    pub flags: CommandFlags,
    pub rejected: bool,
    pub auto_orienting: bool,
    pub events: Vec<SimEvent>,
}

#[derive(Debug, Clone)]
pub struct TeleopPipeline {
    config: PipelineConfig,
    sim: SimConfig,
    frame: TaskFrame,
    mode: Mode,
    pending_mode: Option<Mode>,
    delay: DelayLine<HandInput>,
    estimator: IntentEstimator,
    confidence: ConfidenceEngine,
    controller: SharedController,
    tool: Manipulator,
    position_offset: Vec3,
    orientation_offset: Rot3,
    clutched: bool,
    pedal_down: bool,
    pedal_latched: bool,
    orient_queue: VecDeque<Rot3>,
    last_command: Pose,
    last_intent: Option<IntentEstimate>,
    lambda_cap: Option<f64>,
    ramp_start: u64,
    tick: u64,
}

impl TeleopPipeline {
    pub fn new(
        config: PipelineConfig,
        sim: SimConfig,
        frame: TaskFrame,
        start: Pose,
    ) -> Result<Self> {
        config.validate()?;
        sim.validate()?;
        let entries = EntryPointSet::along_wound(&sim.entry_offsets)?;
        Ok(Self {
            config,
            sim,
            frame,
            mode: config.mode,
            pending_mode: None,
            delay: DelayLine::new(sim.delay_ticks),
            estimator: IntentEstimator::new(config.impedance, config.kalman)?,
            confidence: ConfidenceEngine::new(&config.confidence)?,
            controller: SharedController::new(config.controller, entries)?,
            tool: Manipulator::new(DeviceId::Psm1, start),
            position_offset: Vec3::zeros(),
            orientation_offset: Rot3::identity(),
            clutched: false,
            pedal_down: false,
            pedal_latched: false,
            orient_queue: VecDeque::new(),
            last_command: start,
            last_intent: None,
            lambda_cap: None,
            ramp_start: 0,
            tick: 0,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Switches mode at the start of the next step.
    pub fn request_mode(&mut self, mode: Mode) {
        self.pending_mode = Some(mode);
    }

    pub fn tool(&self) -> &Manipulator {
        &self.tool
    }

    pub fn controller(&self) -> &SharedController {
        &self.controller
    }

    pub fn frame(&self) -> &TaskFrame {
        &self.frame
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    /// Restarts the linear ramp from zero at the next step.
    pub fn reset_ramp(&mut self) {
        self.ramp_start = self.tick;
    }

    pub fn set_entry_index(&mut self, index: usize) -> Result<()> {
        self.controller.set_entry_index(index)
    }

    /// Upper bound applied to λ from any source; `None` removes it.
    pub fn set_lambda_cap(&mut self, cap: Option<f64>) {
        self.lambda_cap = cap.map(|c| c.clamp(0.0, 1.0));
    }

    fn lambda(&mut self, visibility: &VisibilitySample) -> f64 {
        let bayes = self.confidence.observe(visibility);
        let raw = match self.config.lambda {
            LambdaSource::Bayes => bayes,
            LambdaSource::LinearRamp { duration } => {
                let elapsed = (self.tick - self.ramp_start) as f64 * self.sim.tick;
                RAMP_CAP * (elapsed / duration).min(1.0)
            }
            LambdaSource::Fixed { value } => value,
        };
        match self.lambda_cap {
            Some(c) => raw.min(c),
            None => raw,
        }
    }

    fn intent(&mut self, time: f64, hand: &HandInput, mapped: &Vec3) -> IntentEstimate {
        let est = match self.config.intent {
            IntentSource::Oracle => Some(IntentEstimate::initial(
                hand.target.map_or(*mapped, |t| t + self.position_offset),
                Matrix3::zeros(),
                time,
            )),
            IntentSource::Estimated => self
                .estimator
                .step(&InteractionSample {
                    timestamp: time,
                    force: hand.force,
                    position: *mapped,
                    velocity: hand.velocity,
                })
                .ok(),
        };
        match est {
            Some(e) => {
                self.last_intent = Some(e);
                e
            }
            // Leaves the controller to flag the input as stale.
            None => self.last_intent.unwrap_or_else(|| {
                IntentEstimate::initial(*mapped, Matrix3::zeros(), f64::NEG_INFINITY)
            }),
        }
    }

    fn orientation(
        &mut self,
        hand: &HandInput,
        surgeme: GestureClass,
        events: &mut Vec<SimEvent>,
    ) -> (Rot3, bool) {
        let follow = self.orientation_offset.compose(&hand.orientation);
        if !hand.pedal {
            self.pedal_latched = false;
        }
        if self.mode == Mode::Traditional {
            return (follow, false);
        }
        let allowed = matches!(surgeme, GestureClass::Positioning | GestureClass::Push);
        if hand.pedal && !self.pedal_latched && allowed && self.orient_queue.is_empty() {
            self.pedal_latched = true;
            let path = auto_orient(&self.tool.pose.orientation, &self.frame, self.config.orient_step);
            events.push(SimEvent::AutoOrient { steps: path.len() });
            self.orient_queue.extend(path);
        }
        match self.orient_queue.pop_front() {
            Some(r) => {
                if self.orient_queue.is_empty() {
                    self.orientation_offset = r.compose(&hand.orientation.transpose());
                }
                (r, true)
            }
            None => (follow, false),
        }
    }

    /// Advances one tick with the current (undelayed) hand sample, the
    /// surgeme the controller should act on and the marker visibility.
    pub fn step(
        &mut self,
        hand: &HandInput,
        surgeme: GestureClass,
        visibility: &VisibilitySample,
    ) -> PipelineTick {
        let time = self.tick as f64 * self.sim.tick;
        let mut events = Vec::new();
        if let Some(m) = self.pending_mode.take() {
            if m != self.mode {
                self.mode = m;
                self.controller.reset();
                self.orient_queue.clear();
                events.push(SimEvent::ModeChanged { mode: m });
            }
        }

        let d = self.delay.push(*hand);
        let lambda = self.lambda(visibility);
        if d.pedal && !self.pedal_down {
            events.push(SimEvent::Pedal);
        }
        self.pedal_down = d.pedal;

        let mut flags = CommandFlags::default();
        let mut lambda_used = Vec3::zeros();
        let mut auto_orienting = false;
        let command = if d.clutch {
            self.clutched = true;
            self.last_command
        } else {
            if self.clutched {
                self.clutched = false;
                self.position_offset = self.last_command.position - d.position;
                self.orientation_offset =
                    self.last_command.orientation.compose(&d.orientation.transpose());
                self.estimator.reset();
                self.last_intent = None;
                self.controller.reset();
            }
            let mapped = d.position + self.position_offset;
            let intent = self.intent(time, &d, &mapped);
            let position = match self.mode {
                Mode::Traditional => mapped,
                Mode::Ciac => {
                    let cmd = self.controller.control_tick(&ControlInput {
                        timestamp: time,
                        surgeme,
                        intent,
                        lambda,
                        hand_position: mapped,
                        pedal: d.pedal,
                    });
                    flags = cmd.flags;
                    lambda_used = cmd.lambda_used;
                    cmd.tau
                }
            };
            let (orientation, auto) = self.orientation(&d, surgeme, &mut events);
            auto_orienting = auto;
            Pose::new(position, orientation)
        };

        let accepted = self.tool.step(&command, d.gripper, &self.sim);
        if accepted {
            self.last_command = command;
        }
        self.tick += 1;
        PipelineTick {
            command,
            tau_h_hat: self.last_intent.map_or(d.position + self.position_offset, |e| e.tau_h_hat),
            lambda,
            lambda_used,
            flags,
            rejected: !accepted,
            auto_orienting,
            events,
        }
    }
}

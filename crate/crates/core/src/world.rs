//! The bimanual scene: PSM1 behind the shared-control pipeline, PSM2 under
//! direct teleoperation, marker occlusion, online surgeme classification
//! and the per-tick log.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gesture::{Classifier, GestureClass, NUM_CLASSES};
use crate::kinematics::{perpendicularity_error, DeviceId, KinematicSample, Pose, Rot3, TaskFrame, Vec3};
use crate::sim::{
    DelayLine, LogHeader, Manipulator, Mode, OcclusionProcess, SimConfig, SimEvent, SimEventLog,
    TickRecord,
};
use crate::stream::{LabelStrategy, RawGestureLabel, RecordingRow, StreamConfig, StreamState, KINEMATIC_COLUMNS};
use crate::teleop::{HandInput, PipelineConfig, TeleopPipeline};

/// Geometric stand-in for a successful needle insertion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuccessCriterion {
    /// Tool tip distance to the entry point, m.
    pub position_tolerance: f64,
    /// Degrees.
    pub max_perpendicularity: f64,
    /// Tool speed below which the tip counts as placed, m/s.
    pub settle_speed: f64,
}

impl Default for SuccessCriterion {
    fn default() -> Self {
        Self {
            position_tolerance: 0.0015,
            max_perpendicularity: 10.0,
            settle_speed: 0.005,
        }
    }
}

impl SuccessCriterion {
    pub fn holds(&self, tool: &Manipulator, entry: &Vec3, frame: &TaskFrame) -> bool {
        (tool.pose.position - entry).norm() <= self.position_tolerance
            && perpendicularity_error(&tool.pose.orientation, frame) < self.max_perpendicularity
            && tool.linear_velocity.norm() < self.settle_speed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub sim: SimConfig,
    pub pipeline: PipelineConfig,
    pub stream: StreamConfig,
    pub success: SuccessCriterion,
    pub frame: TaskFrame,
    pub right_start: Pose,
    pub left_start: Pose,
    /// Occlusion seed.
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            pipeline: PipelineConfig::default(),
            stream: StreamConfig::default(),
            success: SuccessCriterion::default(),
            frame: TaskFrame::identity(),
            right_start: Pose::new(Vec3::new(0.0, 0.0, 0.010), Rot3::identity()),
            left_start: Pose::new(Vec3::new(0.035, 0.030, 0.025), Rot3::identity()),
            seed: 0,
        }
    }
}

/// Everything the world consumes in one tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameInput {
    pub right: HandInput,
    pub left: HandInput,
    /// Ground-truth gesture the operator is performing.
    pub label: RawGestureLabel,
    /// Hides both markers this tick.
    #[serde(default)]
    pub occlude: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub set_mode: Option<Mode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_trial: Option<usize>,
    #[serde(default)]
    pub end_trial: bool,
    /// Caps the confidence from this tick on; 1 lifts the cap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_cap: Option<f64>,
}

/// Where the surgeme driving the controller comes from.
#[derive(Clone)]
pub enum SurgemeSource {
    /// Ground truth, grouped by the broad label strategy.
    Oracle,
    Model {
        model: Arc<dyn Classifier + Send + Sync>,
        stream: StreamState,
    },
}

impl std::fmt::Debug for SurgemeSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Oracle => f.write_str("Oracle"),
            Self::Model { stream, .. } => f.debug_struct("Model").field("stream", stream).finish(),
        }
    }
}

impl SurgemeSource {
    pub fn model(model: Arc<dyn Classifier + Send + Sync>, config: StreamConfig) -> Result<Self> {
        Ok(Self::Model {
            model,
            stream: StreamState::new(config)?,
        })
    }

    fn classify(
        &mut self,
        row: &RecordingRow,
        truth: GestureClass,
    ) -> (GestureClass, Option<[f64; NUM_CLASSES]>) {
        match self {
            Self::Oracle => (truth, None),
            Self::Model { model, stream } => {
                let out = stream.step(&row.streaming_features(), model.as_ref());
                (out.emitted, out.averaged)
            }
        }
    }
}

fn sample(device: DeviceId, pose: &Pose, v: Vec3, w: Vec3, gripper: f64, t: f64) -> KinematicSample {
    KinematicSample {
        device,
        position: pose.position,
        orientation: pose.orientation,
        linear_velocity: v,
        angular_velocity: w,
        gripper_angle: gripper,
        timestamp: t,
    }
}

fn hand_sample(device: DeviceId, h: &HandInput, t: f64) -> KinematicSample {
    let pose = Pose::new(h.position, h.orientation);
    sample(device, &pose, h.velocity, h.angular_velocity, h.gripper, t)
}

fn arm_sample(m: &Manipulator, t: f64) -> KinematicSample {
    sample(m.device, &m.pose, m.linear_velocity, m.angular_velocity, m.gripper_angle, t)
}

#[derive(Debug)]
pub struct World {
    config: WorldConfig,
    pipeline: TeleopPipeline,
    psm2: Manipulator,
    left_delay: DelayLine<HandInput>,
    occlusion: OcclusionProcess,
    source: SurgemeSource,
    trial: Option<usize>,
    log: SimEventLog,
}

impl World {
    pub fn new(config: WorldConfig, source: SurgemeSource, header: LogHeader) -> Result<Self> {
        Ok(Self {
            pipeline: TeleopPipeline::new(config.pipeline, config.sim, config.frame, config.right_start)?,
            psm2: Manipulator::new(DeviceId::Psm2, config.left_start),
            left_delay: DelayLine::new(config.sim.delay_ticks),
            occlusion: OcclusionProcess::new(config.sim.occlusion, config.seed)?,
            source,
            trial: None,
            log: SimEventLog::new(header),
            config,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn pipeline(&self) -> &TeleopPipeline {
        &self.pipeline
    }

    pub fn psm2(&self) -> &Manipulator {
        &self.psm2
    }

    pub fn log(&self) -> &SimEventLog {
        &self.log
    }

    pub fn into_log(self) -> SimEventLog {
        self.log
    }

    /// Active reaching trial, if any.
    pub fn trial(&self) -> Option<usize> {
        self.trial
    }

    /// Kinematic row the classifier sees this tick: both arms as they stand
    /// before moving, both hands as sampled.
    fn row(&self, input: &FrameInput, t: f64) -> RecordingRow {
        let mut kinematics = [0.0; KINEMATIC_COLUMNS];
        let blocks = [
            arm_sample(self.pipeline.tool(), t),
            arm_sample(&self.psm2, t),
            hand_sample(DeviceId::SigmaR, &input.right, t),
            hand_sample(DeviceId::SigmaL, &input.left, t),
        ];
        for (chunk, s) in kinematics.chunks_exact_mut(19).zip(blocks.iter()) {
            chunk.copy_from_slice(&s.features());
        }
        RecordingRow {
            kinematics,
            label: input.label,
        }
    }

    /// Advances one tick, appends its record and returns the kinematic row.
    pub fn step(&mut self, input: &FrameInput) -> Result<RecordingRow> {
        let tick = self.pipeline.tick();
        let time = tick as f64 * self.config.sim.tick;
        let mut events = Vec::new();

        if let Some(m) = input.set_mode {
            self.pipeline.request_mode(m);
        }
        if let Some(c) = input.lambda_cap {
            self.pipeline.set_lambda_cap(Some(c));
        }
        if let Some(j) = input.start_trial {
            self.pipeline.set_entry_index(j)?;
            self.pipeline.reset_ramp();
            self.trial = Some(j);
            events.push(SimEvent::TrialStart { entry: j });
        }

        let visibility = self.occlusion.next(input.occlude);
        let row = self.row(input, time);
        let truth = LabelStrategy::Broad.map(input.label);
        let (emitted, probabilities) = self.source.classify(&row, truth);

        let out = self.pipeline.step(&input.right, emitted, &visibility);
        events.extend(out.events.iter().copied());

        let left = self.left_delay.push(input.left);
        self.psm2.step(&Pose::new(left.position, left.orientation), left.gripper, &self.config.sim);

        let tool = *self.pipeline.tool();
        if let Some(j) = self.trial {
            let entry = self.pipeline.controller().entries().points()[j];
            if self.config.success.holds(&tool, &entry, &self.config.frame) {
                events.push(SimEvent::Reached { entry: j });
                self.trial = None;
            } else if input.end_trial {
                events.push(SimEvent::Timeout { entry: j });
                self.trial = None;
            }
        }

        self.log.push(TickRecord {
            tick,
            time,
            mode: self.pipeline.mode(),
            raw_label: input.label,
            true_surgeme: truth,
            emitted_surgeme: emitted,
            probabilities,
            hand_position: input.right.position,
            hand_velocity: input.right.velocity,
            operator_force: input.right.force,
            tau_h_hat: out.tau_h_hat,
            lambda: out.lambda,
            lambda_used: out.lambda_used,
            command: out.command.position,
            tool_position: tool.pose.position,
            tool_orientation: tool.pose.orientation,
            psm2_position: self.psm2.pose.position,
            perpendicularity: perpendicularity_error(&tool.pose.orientation, &self.config.frame),
            visibility,
            entry_index: self.pipeline.controller().entries().index(),
            flags: out.flags,
            rejected: out.rejected,
            pedal: input.right.pedal,
            clutch: input.right.clutch,
            auto_orienting: out.auto_orienting,
            events,
        })?;
        Ok(row)
    }

    /// Runs a whole input stream; returns the kinematic rows.
    pub fn run(&mut self, frames: &[FrameInput]) -> Result<Vec<RecordingRow>> {
        frames.iter().map(|f| self.step(f)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::teleop::LambdaSource;

    fn still(label: u8) -> FrameInput {
        let cfg = WorldConfig::default();
        FrameInput {
            right: HandInput::at_rest(cfg.right_start.position, Rot3::identity()),
            left: HandInput::at_rest(cfg.left_start.position, Rot3::identity()),
            label: RawGestureLabel::new(label).unwrap(),
            occlude: false,
            set_mode: None,
            start_trial: None,
            end_trial: false,
            lambda_cap: None,
        }
    }

    fn world(mode: Mode) -> World {
        let mut cfg = WorldConfig::default();
        cfg.pipeline.mode = mode;
        cfg.pipeline.lambda = LambdaSource::Fixed { value: 1.0 };
        World::new(cfg, SurgemeSource::Oracle, LogHeader::new("test", 0, serde_json::Value::Null)).unwrap()
    }

    #[test]
    fn row_layout_matches_devices() {
        let mut w = world(Mode::Traditional);
        let mut f = still(2);
        f.right.gripper = 0.7;
        f.left.velocity = Vec3::new(0.1, 0.2, 0.3);
        let row = w.step(&f).unwrap();
        assert_eq!(row.device(DeviceId::SigmaR)[18], 0.7);
        assert_eq!(&row.device(DeviceId::SigmaL)[12..15], &[0.1, 0.2, 0.3]);
        assert_eq!(&row.device(DeviceId::Psm1)[0..3], &[0.0, 0.0, 0.010]);
        assert_eq!(w.log().records[0].true_surgeme, GestureClass::Positioning);
    }

    #[test]
    fn trial_times_out_when_hovering_above_entry() {
        let mut w = world(Mode::Ciac);
        let mut first = still(3);
        first.start_trial = Some(0);
        w.step(&first).unwrap();
        let mut reached = None;
        for k in 1..200 {
            w.step(&still(3)).unwrap();
            if w.log().records[k].events.contains(&SimEvent::Reached { entry: 0 }) {
                reached = Some(k);
            }
        }
        // Hand hovers 10 mm above the wound, so only x is assisted: no success.
        assert_eq!(reached, None);
        assert_eq!(w.trial(), Some(0));
        let mut last = still(3);
        last.end_trial = true;
        w.step(&last).unwrap();
        assert!(w.log().records[200].events.contains(&SimEvent::Timeout { entry: 0 }));
    }

    #[test]
    fn occlusion_flag_hides_markers() {
        let mut w = world(Mode::Ciac);
        let mut f = still(1);
        f.occlude = true;
        w.step(&f).unwrap();
        let v = w.log().records[0].visibility;
        assert!(!v.kd_visible && !v.ch_visible);
    }
}

//! Live sessions: one world stepped by an interactive client.
//!
//! Every applied frame is recorded, so a saved session replays through
//! [`crate::experiment::replay`] to the same log.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{write_inputs, RunSpec};
use crate::kinematics::{Rot3, Vec3};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::sim::{Mode, OcclusionConfig, SimEventLog, TickRecord};
use crate::stream::RawGestureLabel;
use crate::teleop::{HandInput, LambdaSource};
use crate::world::{FrameInput, SurgemeSource, World, WorldConfig};

/// Named starting configurations for sessions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Push-paradigm reaching with the linear confidence ramp, no occlusion.
    Reach,
    /// Bayesian confidence with occlusion episodes.
    Suture,
}

impl Preset {
    pub fn world(self) -> WorldConfig {
        let mut w = WorldConfig::default();
        w.pipeline.mode = Mode::Ciac;
        match self {
            Self::Reach => {
                w.pipeline.lambda = LambdaSource::LinearRamp { duration: 2.0 };
                w.sim.occlusion = OcclusionConfig::none();
            }
            Self::Suture => w.pipeline.lambda = LambdaSource::Bayes,
        }
        w
    }

    /// Gesture assumed when the client does not name one.
    pub fn default_gesture(self) -> u8 {
        match self {
            Self::Reach => 3,
            Self::Suture => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Reach => "reach",
            Self::Suture => "suture",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "reach" => Ok(Self::Reach),
            "suture" => Ok(Self::Suture),
            _ => Err(Error::Config(format!("unknown preset {s:?}"))),
        }
    }
}

/// One client sample. Held state (pedal, clutch, occlusion) persists
/// until the client changes it; the remaining flags act once.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientInput {
    pub position: Option<Vec3>,
    /// Finite difference of positions when absent.
    pub velocity: Option<Vec3>,
    pub orientation: Option<Rot3>,
    pub gripper: Option<f64>,
    pub pedal: Option<bool>,
    pub clutch: Option<bool>,
    pub occlude: Option<bool>,
    /// Raw gesture number the operator declares.
    pub gesture: Option<u8>,
    pub toggle_mode: bool,
    pub lambda_cap: Option<f64>,
    pub start_trial: Option<usize>,
    pub end_trial: bool,
}

impl ClientInput {
    /// Folds a later sample into this one: later values win field by
    /// field, paired mode toggles cancel, trial ends accumulate.
    pub fn merge(&mut self, later: &ClientInput) {
        fn pick<T: Copy>(a: &mut Option<T>, b: Option<T>) {
            if b.is_some() {
                *a = b;
            }
        }
        pick(&mut self.position, later.position);
        pick(&mut self.velocity, later.velocity);
        pick(&mut self.orientation, later.orientation);
        pick(&mut self.gripper, later.gripper);
        pick(&mut self.pedal, later.pedal);
        pick(&mut self.clutch, later.clutch);
        pick(&mut self.occlude, later.occlude);
        pick(&mut self.gesture, later.gesture);
        pick(&mut self.lambda_cap, later.lambda_cap);
        pick(&mut self.start_trial, later.start_trial);
        self.toggle_mode ^= later.toggle_mode;
        self.end_trial |= later.end_trial;
    }
}

pub struct Session {
    world: World,
    frames: Vec<FrameInput>,
    hand: HandInput,
    occlude: bool,
    label: RawGestureLabel,
    mode: Mode,
}

impl Session {
    pub fn new(world: WorldConfig, source: SurgemeSource, gesture: u8) -> Result<Self> {
        let spec = RunSpec::Session { world, inputs: None };
        let hand = HandInput::at_rest(world.right_start.position, world.right_start.orientation);
        Ok(Self {
            world: World::new(world, source, spec.header()?)?,
            frames: Vec::new(),
            hand,
            occlude: false,
            label: RawGestureLabel::new(gesture)?,
            mode: world.pipeline.mode,
        })
    }

    pub fn from_preset(preset: Preset, source: SurgemeSource) -> Result<Self> {
        Self::new(preset.world(), source, preset.default_gesture())
    }

    pub fn config(&self) -> &WorldConfig {
        self.world.config()
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn log(&self) -> &SimEventLog {
        self.world.log()
    }

    pub fn frames(&self) -> &[FrameInput] {
        &self.frames
    }

    pub fn metrics(&self) -> MetricsReport {
        compute_metrics(self.world.log())
    }

    /// Builds this tick's frame from the latest client sample, or holds
    /// the hand still when none arrived.
    fn frame(&mut self, input: Option<&ClientInput>) -> Result<FrameInput> {
        let dt = self.world.config().sim.tick;
        let mut set_mode = None;
        let mut frame_cap = None;
        let (mut start_trial, mut end_trial) = (None, false);
        let prev = self.hand.position;
        self.hand.velocity = Vec3::zeros();
        self.hand.angular_velocity = Vec3::zeros();
        if let Some(c) = input {
            if let Some(p) = c.position {
                self.hand.position = p;
                self.hand.velocity = (p - prev) / dt;
            }
            if let Some(v) = c.velocity {
                self.hand.velocity = v;
            }
            if let Some(r) = c.orientation {
                self.hand.angular_velocity = self.hand.orientation.transpose().compose(&r).to_quaternion().scaled_axis() / dt;
                self.hand.orientation = r;
            }
            if let Some(g) = c.gripper {
                self.hand.gripper = g;
            }
            self.hand.pedal = c.pedal.unwrap_or(self.hand.pedal);
            self.hand.clutch = c.clutch.unwrap_or(self.hand.clutch);
            self.occlude = c.occlude.unwrap_or(self.occlude);
            if let Some(g) = c.gesture {
                self.label = RawGestureLabel::new(g)?;
            }
            if c.toggle_mode {
                self.mode = match self.mode {
                    Mode::Ciac => Mode::Traditional,
                    Mode::Traditional => Mode::Ciac,
                };
                set_mode = Some(self.mode);
            }
            if let Some(cap) = c.lambda_cap {
                if !cap.is_finite() {
                    return Err(Error::Config("lambda cap must be finite".into()));
                }
                frame_cap = Some(cap.clamp(0.0, 1.0));
            }
            if let Some(j) = c.start_trial {
                if j >= self.world.config().sim.entry_offsets.len() {
                    return Err(Error::Config(format!("no entry point {j}")));
                }
                start_trial = Some(j);
            }
            end_trial = c.end_trial;
        }
        let left = HandInput::at_rest(self.world.config().left_start.position, self.world.config().left_start.orientation);
        Ok(FrameInput {
            right: self.hand,
            left,
            label: self.label,
            occlude: self.occlude,
            set_mode,
            start_trial,
            end_trial,
            lambda_cap: frame_cap,
        })
    }

    /// Advances one tick. A malformed sample is rejected before anything
    /// is applied; the caller may step again with `None`.
    pub fn step(&mut self, input: Option<&ClientInput>) -> Result<&TickRecord> {
        let saved = (self.hand, self.occlude, self.label, self.mode);
        let frame = match self.frame(input) {
            Ok(f) => f,
            Err(e) => {
                (self.hand, self.occlude, self.label, self.mode) = saved;
                return Err(e);
            }
        };
        self.world.step(&frame)?;
        self.frames.push(frame);
        Ok(self.world.log().records.last().expect("record just pushed"))
    }

    /// Writes `<stem>.inputs.ndjson` and `<stem>.log.ndjson` to `dir`; the
    /// log header points at the inputs so it can be replayed.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<SimEventLog> {
        std::fs::create_dir_all(dir)?;
        let inputs = dir.join(format!("{stem}.inputs.ndjson"));
        write_inputs(&inputs, &self.frames)?;
        let spec = RunSpec::Session {
            world: *self.world.config(),
            inputs: Some(inputs),
        };
        let mut log = self.world.log().clone();
        log.header = spec.header()?;
        let f = std::fs::File::create(dir.join(format!("{stem}.log.ndjson")))?;
        log.write_ndjson(std::io::BufWriter::new(f))?;
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::replay;

    fn at(x: f64) -> ClientInput {
        ClientInput {
            position: Some(Vec3::new(x, 0.0, 0.010)),
            ..Default::default()
        }
    }

    #[test]
    fn merge_keeps_latest_values() {
        let mut a = ClientInput { pedal: Some(true), toggle_mode: true, ..at(0.001) };
        a.merge(&ClientInput { toggle_mode: true, end_trial: true, ..at(0.002) });
        assert_eq!(a.position.unwrap().x, 0.002);
        assert_eq!(a.pedal, Some(true));
        assert!(!a.toggle_mode);
        assert!(a.end_trial);
    }

    #[test]
    fn presets_parse() {
        assert_eq!("Reach".parse::<Preset>().unwrap(), Preset::Reach);
        assert_eq!("suture".parse::<Preset>().unwrap(), Preset::Suture);
        assert!("other".parse::<Preset>().is_err());
    }

    #[test]
    fn missing_samples_hold_the_hand() {
        let mut s = Session::from_preset(Preset::Reach, SurgemeSource::Oracle).unwrap();
        s.step(Some(&at(0.004))).unwrap();
        s.step(None).unwrap();
        let f = s.frames();
        assert_eq!(f[1].right.position, f[0].right.position);
        assert_eq!(f[1].right.velocity, Vec3::zeros());
        assert!((f[0].right.velocity.x - 0.004 / 0.05).abs() < 1e-12);
    }

    #[test]
    fn toggle_switches_mode_once() {
        let mut s = Session::from_preset(Preset::Reach, SurgemeSource::Oracle).unwrap();
        let t = ClientInput { toggle_mode: true, ..Default::default() };
        s.step(Some(&t)).unwrap();
        s.step(None).unwrap();
        assert_eq!(s.frames()[0].set_mode, Some(Mode::Traditional));
        assert_eq!(s.frames()[1].set_mode, None);
        assert_eq!(s.world().pipeline().mode(), Mode::Traditional);
    }

    #[test]
    fn bad_sample_changes_nothing() {
        let mut s = Session::from_preset(Preset::Suture, SurgemeSource::Oracle).unwrap();
        let bad = ClientInput { gesture: Some(42), pedal: Some(true), ..at(0.01) };
        assert!(s.step(Some(&bad)).is_err());
        assert!(s.frames().is_empty());
        s.step(None).unwrap();
        assert!(!s.frames()[0].right.pedal);
        assert_eq!(s.frames()[0].right.position, Preset::Suture.world().right_start.position);
    }

    #[test]
    fn saved_session_replays() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Session::from_preset(Preset::Suture, SurgemeSource::Oracle).unwrap();
        for k in 0..60 {
            let mut c = at(0.0005 * k as f64);
            c.pedal = Some(k == 20);
            c.lambda_cap = (k == 30).then_some(0.4);
            s.step(Some(&c)).unwrap();
        }
        let log = s.save(dir.path(), "s").unwrap();
        let text = std::fs::read(dir.path().join("s.log.ndjson")).unwrap();
        let back = SimEventLog::read_ndjson(&text[..]).unwrap();
        assert_eq!(back.records.len(), 60);
        assert_eq!(replay(&back).unwrap().resimulated, Some(true));
        assert!(log.records[40].lambda <= 0.4);
    }
}

//! Deterministic kinematic scene: manipulators with first-order tracking,
//! teleoperation delay, marker occlusion and the per-tick event log.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::confidence::VisibilitySample;
use crate::control::CommandFlags;
use crate::error::{Error, Result};
use crate::gesture::{GestureClass, NUM_CLASSES};
use crate::stream::RawGestureLabel;
use crate::intent::{impedance_force, ImpedanceParams, TICK_SECONDS};
use crate::kinematics::{DeviceId, Pose, Rot3};

type Vec3 = Vector3<f64>;

pub const LOG_FORMAT: &str = "ciac-sim-log";
pub const LOG_VERSION: u32 = 1;

/// Two-state Markov occlusion process per marker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcclusionConfig {
    /// Long-run fraction of ticks the tool marker is hidden.
    pub kd_rate: f64,
    /// Long-run fraction of ticks the phantom marker is hidden.
    pub ch_rate: f64,
    /// Mean occlusion episode length, ticks.
    pub mean_episode_ticks: f64,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self {
            kd_rate: 0.2,
            ch_rate: 0.2,
            mean_episode_ticks: 20.0,
        }
    }
}

impl OcclusionConfig {
    pub fn none() -> Self {
        Self {
            kd_rate: 0.0,
            ch_rate: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (n, r) in [("kd_rate", self.kd_rate), ("ch_rate", self.ch_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{n} must be in [0, 1]")));
            }
        }
        if !(self.mean_episode_ticks >= 1.0) {
            return Err(Error::Config("mean_episode_ticks must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub tick: f64,
    pub delay_ticks: usize,
    /// Entry point positions along the wound, m.
    pub entry_offsets: [f64; 4],
    /// First-order tracking time constant, s.
    pub tracking_tau: f64,
    /// Manipulator speed limit, m/s.
    pub max_speed: f64,
    /// Manipulator angular speed limit, rad/s.
    pub max_angular_speed: f64,
    pub occlusion: OcclusionConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            tick: TICK_SECONDS,
            delay_ticks: 1,
            entry_offsets: [0.015, 0.030, 0.045, 0.060],
            tracking_tau: 0.1,
            max_speed: 0.2,
            max_angular_speed: 6.0,
            occlusion: OcclusionConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tick > 0.0) || !(self.tracking_tau > 0.0) {
            return Err(Error::Config("tick and tracking_tau must be positive".into()));
        }
        if !(self.max_speed > 0.0) || !(self.max_angular_speed > 0.0) {
            return Err(Error::Config("speed limits must be positive".into()));
        }
        if self.entry_offsets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("entry offsets must be strictly increasing".into()));
        }
        self.occlusion.validate()
    }
}

/// Kinematic arm model: moves toward its command with first-order lag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Manipulator {
    pub device: DeviceId,
    pub pose: Pose,
    pub linear_velocity: Vec3,
    pub angular_velocity: Vec3,
    pub gripper_angle: f64,
}

impl Manipulator {
    pub fn new(device: DeviceId, pose: Pose) -> Self {
        Self {
            device,
            pose,
            linear_velocity: Vec3::zeros(),
            angular_velocity: Vec3::zeros(),
            gripper_angle: 0.0,
        }
    }

    /// Advances one tick. A command with non-finite values is rejected:
    /// the pose holds, velocities drop to zero and `false` is returned.
    pub fn step(&mut self, command: &Pose, gripper: f64, cfg: &SimConfig) -> bool {
        let finite = command.position.iter().all(|v| v.is_finite())
            && command.orientation.matrix().iter().all(|v| v.is_finite())
            && gripper.is_finite();
        if !finite {
            self.linear_velocity = Vec3::zeros();
            self.angular_velocity = Vec3::zeros();
            return false;
        }
        let dt = cfg.tick;
        let alpha = 1.0 - (-dt / cfg.tracking_tau).exp();

        let mut delta = (command.position - self.pose.position) * alpha;
        let max_step = cfg.max_speed * dt;
        if delta.norm() > max_step {
            delta *= max_step / delta.norm();
        }
        self.pose.position += delta;
        self.linear_velocity = delta / dt;

        let q0 = self.pose.orientation.to_quaternion();
        let q1 = command.orientation.to_quaternion();
        let full = q0.angle_to(&q1);
        let mut frac = alpha;
        let max_turn = cfg.max_angular_speed * dt;
        if full * frac > max_turn {
            frac = max_turn / full;
        }
        let q = q0.try_slerp(&q1, frac, 1e-12).unwrap_or(q1);
        let rel = q * q0.inverse();
        self.angular_velocity = rel.scaled_axis() / dt;
        self.pose.orientation = Rot3::from_quaternion(&q);

        self.gripper_angle += (gripper - self.gripper_angle) * alpha;
        true
    }
}

/// Fixed integer-tick delay. Until filled, the output is the first input.
#[derive(Debug, Clone)]
pub struct DelayLine<T: Clone> {
    delay: usize,
    buf: VecDeque<T>,
}

impl<T: Clone> DelayLine<T> {
    pub fn new(delay: usize) -> Self {
        Self {
            delay,
            buf: VecDeque::with_capacity(delay + 1),
        }
    }

    pub fn delay(&self) -> usize {
        self.delay
    }

    /// Pushes the current value and returns the value from `delay` ticks ago.
    pub fn push(&mut self, v: T) -> T {
        if self.buf.is_empty() {
            for _ in 0..self.delay {
                self.buf.push_back(v.clone());
            }
        }
        self.buf.push_back(v);
        self.buf.pop_front().expect("non-empty buffer")
    }
}

/// Command stream of direct teleoperation: the hand pose `delay` ticks ago.
pub fn traditional_command<T: Clone>(hand: &[T], delay: usize) -> Vec<T> {
    let mut line = DelayLine::new(delay);
    hand.iter().map(|h| line.push(h.clone())).collect()
}

/// Operator force from the impedance model plus isotropic tremor.
///
/// `tremor_sigma` is expressed as an equivalent target displacement in m,
/// so the force noise is the stiffness applied to a Gaussian offset.
pub fn synthesize_operator_force<R: Rng + ?Sized>(
    target: &Vec3,
    x: &Vec3,
    xdot: &Vec3,
    imp: &ImpedanceParams,
    tremor_sigma: f64,
    rng: &mut R,
) -> Vec3 {
    let mut tremor = Vec3::zeros();
    if tremor_sigma > 0.0 {
        let n = Normal::new(0.0, tremor_sigma).expect("positive sigma");
        tremor = Vec3::from_fn(|_, _| n.sample(rng));
    }
    impedance_force(&(target + tremor), x, xdot, imp)
}

/// Per-tick marker visibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionTimeline {
    pub kd_visible: Vec<bool>,
    pub ch_visible: Vec<bool>,
}

fn markov_track(rate: f64, mean_episode: f64, ticks: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    if rate <= 0.0 {
        return vec![true; ticks];
    }
    if rate >= 1.0 {
        return vec![false; ticks];
    }
    let p_exit = 1.0 / mean_episode;
    let p_enter = (rate * p_exit / (1.0 - rate)).min(1.0);
    let mut occluded = rng.random::<f64>() < rate;
    (0..ticks)
        .map(|_| {
            let u: f64 = rng.random();
            occluded = if occluded { u >= p_exit } else { u < p_enter };
            !occluded
        })
        .collect()
}

impl OcclusionTimeline {
    /// Independent on/off processes for the two markers.
    pub fn generate(cfg: &OcclusionConfig, ticks: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kd_visible = markov_track(cfg.kd_rate, cfg.mean_episode_ticks, ticks, &mut rng);
        let ch_visible = markov_track(cfg.ch_rate, cfg.mean_episode_ticks, ticks, &mut rng);
        Ok(Self {
            kd_visible,
            ch_visible,
        })
    }

    pub fn len(&self) -> usize {
        self.kd_visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kd_visible.is_empty()
    }

    /// Visibility at `tick`; ticks past the end count as visible.
    pub fn sample(&self, tick: usize) -> VisibilitySample {
        VisibilitySample {
            kd_visible: self.kd_visible.get(tick).copied().unwrap_or(true),
            ch_visible: self.ch_visible.get(tick).copied().unwrap_or(true),
            timestamp_tick: tick as u64,
        }
    }
}

/// Streaming occlusion source for open-ended sessions.
#[derive(Debug, Clone)]
pub struct OcclusionProcess {
    cfg: OcclusionConfig,
    rng: ChaCha8Rng,
    kd_occluded: bool,
    ch_occluded: bool,
    tick: u64,
}

impl OcclusionProcess {
    pub fn new(cfg: OcclusionConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kd_occluded = rng.random::<f64>() < cfg.kd_rate;
        let ch_occluded = rng.random::<f64>() < cfg.ch_rate;
        Ok(Self {
            cfg,
            rng,
            kd_occluded,
            ch_occluded,
            tick: 0,
        })
    }

    fn advance(occluded: bool, rate: f64, mean: f64, u: f64) -> bool {
        if rate <= 0.0 {
            return false;
        }
        if rate >= 1.0 {
            return true;
        }
        let p_exit = 1.0 / mean;
        let p_enter = (rate * p_exit / (1.0 - rate)).min(1.0);
        if occluded {
            u >= p_exit
        } else {
            u < p_enter
        }
    }

    /// Next visibility sample. `force_hidden` occludes both markers this tick.
    pub fn next(&mut self, force_hidden: bool) -> VisibilitySample {
        let (u1, u2): (f64, f64) = (self.rng.random(), self.rng.random());
        let c = self.cfg;
        self.kd_occluded = Self::advance(self.kd_occluded, c.kd_rate, c.mean_episode_ticks, u1);
        self.ch_occluded = Self::advance(self.ch_occluded, c.ch_rate, c.mean_episode_ticks, u2);
        let s = VisibilitySample {
            kd_visible: !(self.kd_occluded || force_hidden),
            ch_visible: !(self.ch_occluded || force_hidden),
            timestamp_tick: self.tick,
        };
        self.tick += 1;
        s
    }
}

/// Minimum-jerk point-to-point segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinJerk {
    pub start: Vec3,
    pub goal: Vec3,
    pub t0: f64,
    pub duration: f64,
}

impl MinJerk {
    pub fn new(start: Vec3, goal: Vec3, t0: f64, duration: f64) -> Self {
        Self {
            start,
            goal,
            t0,
            duration: duration.max(1e-6),
        }
    }

    fn phase(&self, t: f64) -> f64 {
        ((t - self.t0) / self.duration).clamp(0.0, 1.0)
    }

    pub fn position(&self, t: f64) -> Vec3 {
        let s = self.phase(t);
        let shape = s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
        self.start + (self.goal - self.start) * shape
    }

    pub fn velocity(&self, t: f64) -> Vec3 {
        let s = self.phase(t);
        if s <= 0.0 || s >= 1.0 {
            return Vec3::zeros();
        }
        let ds = 30.0 * s * s * (1.0 - s) * (1.0 - s) / self.duration;
        (self.goal - self.start) * ds
    }

    pub fn done(&self, t: f64) -> bool {
        t >= self.t0 + self.duration
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Traditional,
    Ciac,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Traditional => "TRADITIONAL",
            Mode::Ciac => "CIAC",
        })
    }
}

/// Discrete happenings attached to a tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimEvent {
    /// A reaching trial toward entry point `entry` began.
    TrialStart { entry: usize },
    /// The tool satisfied the insertion predicate at entry point `entry`.
    Reached { entry: usize },
    /// The trial toward `entry` ran out of time.
    Timeout { entry: usize },
    /// The operator pressed the pedal.
    Pedal,
    /// An autonomous reorientation of `steps` ticks was queued.
    AutoOrient { steps: usize },
    ModeChanged { mode: Mode },
}

/// Everything that happened in one tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u64,
    pub time: f64,
    pub mode: Mode,
    pub raw_label: RawGestureLabel,
    pub true_surgeme: GestureClass,
    pub emitted_surgeme: GestureClass,
    pub probabilities: Option<[f64; NUM_CLASSES]>,
    pub hand_position: Vec3,
    pub hand_velocity: Vec3,
    pub operator_force: Vec3,
    pub tau_h_hat: Vec3,
    pub lambda: f64,
    pub lambda_used: Vec3,
    pub command: Vec3,
    pub tool_position: Vec3,
    pub tool_orientation: Rot3,
    pub psm2_position: Vec3,
    pub perpendicularity: f64,
    pub visibility: VisibilitySample,
    pub entry_index: usize,
    pub flags: CommandFlags,
    pub rejected: bool,
    pub pedal: bool,
    pub clutch: bool,
    pub auto_orienting: bool,
    pub events: Vec<SimEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub format: String,
    pub version: u32,
    /// Which run produced the log (`reach`, `suture`, `session`).
    pub kind: String,
    pub seed: u64,
    /// Full configuration of the run, enough to regenerate it.
    pub config: serde_json::Value,
}

impl LogHeader {
    pub fn new(kind: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            format: LOG_FORMAT.into(),
            version: LOG_VERSION,
            kind: kind.into(),
            seed,
            config,
        }
    }
}

/// Append-only per-tick log, serialized as newline-delimited JSON with the
/// header on the first line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEventLog {
    pub header: LogHeader,
    pub records: Vec<TickRecord>,
}

impl SimEventLog {
    pub fn new(header: LogHeader) -> Self {
        Self {
            header,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, r: TickRecord) -> Result<()> {
        let expected = self.records.len() as u64;
        if r.tick != expected {
            return Err(Error::Log(format!("expected tick {expected}, got {}", r.tick)));
        }
        self.records.push(r);
        Ok(())
    }

    pub fn write_ndjson<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_ndjson(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_ndjson(&mut buf)?;
        Ok(buf)
    }

    pub fn read_ndjson<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Log("empty log".into()))??;
        let header: LogHeader = serde_json::from_str(&first)?;
        if header.format != LOG_FORMAT {
            return Err(Error::Log(format!("unknown log format {:?}", header.format)));
        }
        if header.version != LOG_VERSION {
            return Err(Error::Log(format!("unsupported log version {}", header.version)));
        }
        let mut log = Self::new(header);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TickRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Log(format!("record {i}: {e}")))?;
            log.push(rec)?;
        }
        Ok(log)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.write_ndjson(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::read_ndjson(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Rotation of `from` toward `to` by at most `max_angle` radians.
pub fn rotate_toward(from: &Rot3, to: &Rot3, max_angle: f64) -> Rot3 {
    let q0 = from.to_quaternion();
    let q1 = to.to_quaternion();
    let a = q0.angle_to(&q1);
    if a <= max_angle {
        return *to;
    }
    let q: UnitQuaternion<f64> = q0.try_slerp(&q1, max_angle / a, 1e-12).unwrap_or(q1);
    Rot3::from_quaternion(&q)
}

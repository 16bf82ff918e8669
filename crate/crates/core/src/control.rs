//! Per-surgeme shared control: which axes the robot may assist on, where it
//! pulls them, and how far it is trusted on each.
//!
//! All positions here are task-frame coordinates (x along the wound, z out of
//! the tissue).

use nalgebra::{Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gesture::GestureClass;
use crate::intent::{IntentEstimate, TICK_SECONDS};
use crate::kinematics::{perpendicularity_error, EntryPointSet, Rot3, TaskFrame};

type Vec3 = Vector3<f64>;

/// Per-axis robot authority, each component in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisConfidence(Vec3);

impl AxisConfidence {
    /// Clamps into [0, 1]; the flag reports whether anything was changed.
    /// NaN components become 0.
    pub fn clamped(v: Vec3) -> (Self, bool) {
        let mut flagged = false;
        let c = v.map(|x| {
            let y = if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
            if y != x {
                flagged = true;
            }
            y
        });
        (Self(c), flagged)
    }

    pub fn new(v: Vec3) -> Result<Self> {
        match Self::clamped(v) {
            (c, false) => Ok(c),
            (_, true) => Err(Error::Config(format!("axis confidence {v:?} outside [0, 1]"))),
        }
    }

    pub fn uniform(l: f64) -> Self {
        Self::clamped(Vec3::repeat(l)).0
    }

    pub fn zero() -> Self {
        Self(Vec3::zeros())
    }

    pub fn get(&self) -> &Vec3 {
        &self.0
    }
}

/// Componentwise convex blend `lambda * robot + (1 - lambda) * human`.
///
/// Out-of-range weights are clamped first; the flag reports the clamp.
pub fn blend(tau_r: &Vec3, tau_h_hat: &Vec3, lambda: &Vec3) -> (Vec3, bool) {
    let (l, flagged) = AxisConfidence::clamped(*lambda);
    let l = l.0;
    let tau = Vec3::from_fn(|i, _| {
        let (r, h, w) = (tau_r[i], tau_h_hat[i], l[i]);
        // Endpoint cases are exact; the interior form keeps the result
        // between the two inputs.
        if w == 0.0 {
            h
        } else if w == 1.0 {
            r
        } else {
            (w * r + (1.0 - w) * h).clamp(r.min(h), r.max(h))
        }
    });
    (tau, flagged)
}

/// Where the robot pulls one axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "value", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TargetRule {
    /// Follow the estimated human target.
    Human,
    /// A constant coordinate (fixed height or a frozen hold value).
    Fixed(f64),
    /// The x coordinate of entry point `j`.
    EntryPoint(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurgemeParadigm {
    pub surgeme: GestureClass,
    pub targets: [TargetRule; 3],
    /// `true` where the scalar confidence applies; `false` forces zero.
    pub live: [bool; 3],
    /// The next entry point was requested past the last one.
    pub entry_overflow: bool,
}

impl SurgemeParadigm {
    pub fn mask(&self, lambda: f64) -> Vec3 {
        Vec3::from_fn(|i, _| if self.live[i] { lambda } else { 0.0 })
    }

    /// Robot target on each axis; human-rule axes take `tau_h_hat`.
    pub fn robot_target(&self, entries: &EntryPointSet, tau_h_hat: &Vec3) -> Vec3 {
        Vec3::from_fn(|i, _| match self.targets[i] {
            TargetRule::Human => tau_h_hat[i],
            TargetRule::Fixed(v) => v,
            TargetRule::EntryPoint(j) => entries.points()[j][i],
        })
    }
}

/// Target rules and confidence masks for each surgeme.
///
/// `hold` supplies the frozen y/z values used while pulling the thread and
/// during the handoff.
pub fn paradigm_for(
    surgeme: GestureClass,
    entries: &EntryPointSet,
    fixed_height: f64,
    hold: &Vec3,
) -> SurgemeParadigm {
    use TargetRule::*;
    let j = entries.index();
    let overflow = j + 1 >= entries.len();
    let next = if overflow { entries.len() - 1 } else { j + 1 };
    let (targets, live, entry_overflow) = match surgeme {
        GestureClass::Positioning => ([Human, Human, Fixed(fixed_height)], [false, false, true], false),
        GestureClass::Push => ([EntryPoint(j), Human, Human], [true, false, false], false),
        GestureClass::Pull => ([EntryPoint(next), Fixed(hold.y), Fixed(hold.z)], [true; 3], overflow),
        GestureClass::Handoff => ([EntryPoint(next), Human, Fixed(hold.z)], [true, false, true], overflow),
        GestureClass::Other => ([Human; 3], [false; 3], false),
    };
    SurgemeParadigm {
        surgeme,
        targets,
        live,
        entry_overflow,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    /// Positioning height above the tissue, m.
    pub fixed_height: f64,
    /// Largest command change per tick, m.
    pub rate_limit: f64,
    /// Handoff counts toward advancing when the command is this close to the
    /// next entry point along the wound, m.
    pub advance_radius: f64,
    /// Inputs older than this relative to the tick are stale, s.
    pub max_input_age: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            fixed_height: 0.010,
            rate_limit: 0.005,
            advance_radius: 0.015,
            max_input_age: TICK_SECONDS,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rate_limit", self.rate_limit),
            ("advance_radius", self.advance_radius),
            ("max_input_age", self.max_input_age),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.fixed_height.is_finite() {
            return Err(Error::Config("fixed_height must be finite".into()));
        }
        Ok(())
    }
}

/// Everything one control tick consumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub timestamp: f64,
    pub surgeme: GestureClass,
    pub intent: IntentEstimate,
    pub lambda: f64,
    /// Operator-side hand position mapped into the task frame.
    pub hand_position: Vec3,
    pub pedal: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandFlags {
    pub lambda_clamped: bool,
    pub stale: bool,
    pub entry_overflow: bool,
    pub rate_limited: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlendCommand {
    pub tau: Vec3,
    pub lambda_used: Vec3,
    pub surgeme: GestureClass,
    pub auto_orient: bool,
    pub entry_index: usize,
    pub flags: CommandFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum Cycle {
    Idle,
    Pulled,
    HandedOff,
}

/// Stateful per-manipulator control loop.
#[derive(Debug, Clone)]
pub struct SharedController {
    config: ControllerConfig,
    entries: EntryPointSet,
    hold: Option<Vec3>,
    cycle: Cycle,
    last: Option<BlendCommand>,
}

impl SharedController {
    pub fn new(config: ControllerConfig, entries: EntryPointSet) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            entries,
            hold: None,
            cycle: Cycle::Idle,
            last: None,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn entries(&self) -> &EntryPointSet {
        &self.entries
    }

    /// Forgets the previous command, the hold pose and cycle progress.
    pub fn reset(&mut self) {
        self.last = None;
        self.hold = None;
        self.cycle = Cycle::Idle;
    }

    /// Jumps to entry point `index` and restarts the pull/handoff cycle.
    pub fn set_entry_index(&mut self, index: usize) -> Result<()> {
        self.entries.set_index(index)?;
        self.cycle = Cycle::Idle;
        Ok(())
    }

    pub fn last_command(&self) -> Option<&BlendCommand> {
        self.last.as_ref()
    }

    /// Frozen hold values, if pulling or handing off.
    pub fn hold(&self) -> Option<Vec3> {
        self.hold
    }

    fn is_stale(&self, input: &ControlInput) -> bool {
        let finite = input.intent.tau_h_hat.iter().all(|v| v.is_finite())
            && input.hand_position.iter().all(|v| v.is_finite())
            && input.timestamp.is_finite()
            && !input.lambda.is_nan();
        let age = input.timestamp - input.intent.timestamp;
        !finite || age > self.config.max_input_age + 1e-9 || age < -1e-9
    }

    pub fn control_tick(&mut self, input: &ControlInput) -> BlendCommand {
        if self.is_stale(input) {
            let mut cmd = self.last.unwrap_or(BlendCommand {
                tau: input.hand_position.map(|v| if v.is_finite() { v } else { 0.0 }),
                lambda_used: Vec3::zeros(),
                surgeme: GestureClass::Other,
                auto_orient: false,
                entry_index: self.entries.index(),
                flags: CommandFlags::default(),
            });
            cmd.flags = CommandFlags {
                stale: true,
                ..CommandFlags::default()
            };
            cmd.auto_orient = false;
            self.last = Some(cmd);
            return cmd;
        }

        let surgeme = input.surgeme;
        match surgeme {
            GestureClass::Pull | GestureClass::Handoff => {
                if self.hold.is_none() {
                    self.hold = Some(input.hand_position);
                }
            }
            _ => self.hold = None,
        }
        let hold = self.hold.unwrap_or(input.hand_position);

        let tau_h = input.intent.tau_h_hat;
        let paradigm = paradigm_for(surgeme, &self.entries, self.config.fixed_height, &hold);
        let tau_r = paradigm.robot_target(&self.entries, &tau_h);
        let (lambda_used, lambda_clamped) = AxisConfidence::clamped(paradigm.mask(input.lambda));
        let (target, _) = blend(&tau_r, &tau_h, lambda_used.get());

        let mut flags = CommandFlags {
            lambda_clamped,
            entry_overflow: paradigm.entry_overflow,
            ..CommandFlags::default()
        };
        let tau = match &self.last {
            Some(prev) => {
                let step = target - prev.tau;
                let n = step.norm();
                if n > self.config.rate_limit {
                    flags.rate_limited = true;
                    prev.tau + step * (self.config.rate_limit / n)
                } else {
                    target
                }
            }
            None => target,
        };

        self.update_cycle(surgeme, &tau);
        let cmd = BlendCommand {
            tau,
            lambda_used: *lambda_used.get(),
            surgeme,
            auto_orient: input.pedal,
            entry_index: self.entries.index(),
            flags,
        };
        self.last = Some(cmd);
        cmd
    }

    /// Pull, then a handoff near the next entry point, then positioning
    /// moves on to the next entry point.
    fn update_cycle(&mut self, surgeme: GestureClass, tau: &Vec3) {
        self.cycle = match (self.cycle, surgeme) {
            (_, GestureClass::Pull) => Cycle::Pulled,
            (Cycle::Pulled | Cycle::HandedOff, GestureClass::Handoff) => match self.entries.next() {
                Some(next) if (tau.x - next.x).abs() <= self.config.advance_radius => Cycle::HandedOff,
                _ => self.cycle,
            },
            (Cycle::HandedOff, GestureClass::Positioning) => {
                self.entries.advance();
                Cycle::Idle
            }
            (c, GestureClass::Other) => c,
            (c, GestureClass::Handoff) => c,
            _ => Cycle::Idle,
        };
    }
}

/// Orientation whose x-axis lies along the wound, reached from `current` by
/// the smallest rotation.
pub fn perpendicular_target(current: &Rot3, frame: &TaskFrame) -> Rot3 {
    let a = current.axis(0).normalize();
    let b = frame.wound_axis().normalize();
    let Some(q) = UnitQuaternion::rotation_between(&a, &b) else {
        // Antiparallel: any half-turn about an axis normal to `a` works; the
        // tool's own y-axis keeps the motion a pure flip of the needle plane.
        let axis = Unit::new_normalize(current.axis(1));
        let q = UnitQuaternion::from_axis_angle(&axis, std::f64::consts::PI);
        return Rot3::from_quaternion(&(q * current.to_quaternion()));
    };
    Rot3::from_quaternion(&(q * current.to_quaternion()))
}

/// Orientation waypoints, one per tick, from `current` to the perpendicular
/// target. Each step turns at most `max_step` radians; the last waypoint is
/// the target. Empty when already aligned within `1e-9` radians.
pub fn auto_orient(current: &Rot3, frame: &TaskFrame, max_step: f64) -> Vec<Rot3> {
    let start = current.to_quaternion();
    let target = perpendicular_target(current, frame).to_quaternion();
    let angle = start.angle_to(&target);
    if angle <= 1e-9 || !max_step.is_finite() || max_step <= 0.0 {
        return Vec::new();
    }
    let steps = (angle / max_step).ceil() as usize;
    (1..=steps)
        .map(|k| {
            let t = k as f64 / steps as f64;
            let q = start.try_slerp(&target, t, 1e-12).unwrap_or(target);
            Rot3::from_quaternion(&q)
        })
        .collect()
}

/// Perpendicularity error in degrees along a trajectory.
pub fn trajectory_errors(trajectory: &[Rot3], frame: &TaskFrame) -> Vec<f64> {
    trajectory.iter().map(|r| perpendicularity_error(r, frame)).collect()
}

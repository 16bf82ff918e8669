//! Scripted operators. Both generate their whole input stream up front from
//! a seed, so any two runs given the same seed consume identical frames.
//!
//! Hand motion is a chain of minimum-jerk segments per channel (position,
//! orientation angles, gripper). Interaction forces come from the impedance
//! model pulling toward the active segment's goal, plus tremor.

use nalgebra::UnitQuaternion;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intent::ImpedanceParams;
use crate::kinematics::{Rot3, Vec3};
use crate::sim::{synthesize_operator_force, MinJerk};
use crate::stream::RawGestureLabel;
use crate::teleop::HandInput;
use crate::world::{FrameInput, WorldConfig};

/// Piecewise minimum-jerk signal. Between segments the value holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    start: Vec3,
    segments: Vec<MinJerk>,
}

impl Channel {
    pub fn new(start: Vec3) -> Self {
        Self {
            start,
            segments: Vec::new(),
        }
    }

    pub fn end_value(&self) -> Vec3 {
        self.segments.last().map_or(self.start, |s| s.goal)
    }

    pub fn end_time(&self) -> f64 {
        self.segments.last().map_or(f64::NEG_INFINITY, |s| s.t0 + s.duration)
    }

    /// Appends a segment to `goal` starting at `t0`, no earlier than the end
    /// of the previous one.
    pub fn to(&mut self, t0: f64, duration: f64, goal: Vec3) {
        let t0 = t0.max(self.end_time());
        let start = self.end_value();
        self.segments.push(MinJerk::new(start, goal, t0, duration.max(1e-3)));
    }

    /// Adds `delta` to the current end value.
    pub fn by(&mut self, t0: f64, duration: f64, delta: Vec3) {
        let goal = self.end_value() + delta;
        self.to(t0, duration, goal);
    }

    /// Value, rate and the goal currently pursued at time `t`.
    pub fn at(&self, t: f64) -> (Vec3, Vec3, Vec3) {
        let idx = self.segments.partition_point(|s| s.t0 <= t);
        if idx == 0 {
            return (self.start, Vec3::zeros(), self.start);
        }
        let s = &self.segments[idx - 1];
        if s.done(t) {
            (s.goal, Vec3::zeros(), s.goal)
        } else {
            (s.position(t), s.velocity(t), s.goal)
        }
    }
}

/// Slow sinusoidal drift of the hand's yaw and pitch.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Wobble {
    amplitude: f64,
    freq: [f64; 2],
    phase: [f64; 2],
}

impl Wobble {
    fn draw<R: Rng>(amplitude_deg: f64, rng: &mut R) -> Self {
        Self {
            amplitude: amplitude_deg.to_radians(),
            freq: [rng.random_range(0.2..0.6), rng.random_range(0.2..0.6)],
            phase: [rng.random_range(0.0..6.3), rng.random_range(0.0..6.3)],
        }
    }

    fn at(&self, t: f64) -> (f64, f64) {
        let w = |i: usize| {
            self.amplitude * (std::f64::consts::TAU * self.freq[i] * t + self.phase[i]).sin()
        };
        (w(0), w(1))
    }
}

/// One operator hand: position, (yaw, pitch, roll) and gripper channels.
#[derive(Debug, Clone)]
pub struct HandScript {
    pub position: Channel,
    pub angles: Channel,
    pub gripper: Channel,
    wobble: Wobble,
}

fn orientation_from(angles: &Vec3, wobble: (f64, f64)) -> Rot3 {
    Rot3::from_axis_angle(&Vec3::z(), angles.x + wobble.0)
        .compose(&Rot3::from_axis_angle(&Vec3::y(), angles.y + wobble.1))
        .compose(&Rot3::from_axis_angle(&Vec3::x(), angles.z))
}

impl HandScript {
    fn new<R: Rng>(position: Vec3, gripper: f64, wobble_deg: f64, rng: &mut R) -> Self {
        Self {
            position: Channel::new(position),
            angles: Channel::new(Vec3::zeros()),
            gripper: Channel::new(Vec3::new(gripper, 0.0, 0.0)),
            wobble: Wobble::draw(wobble_deg, rng),
        }
    }

    pub fn orientation(&self, t: f64) -> Rot3 {
        orientation_from(&self.angles.at(t).0, self.wobble.at(t))
    }

    /// World-frame angular velocity by central difference.
    pub fn angular_velocity(&self, t: f64) -> Vec3 {
        let h = 1e-4;
        let a: UnitQuaternion<f64> = self.orientation(t - h).to_quaternion();
        let b = self.orientation(t + h).to_quaternion();
        (b * a.inverse()).scaled_axis() / (2.0 * h)
    }

    fn end_time(&self) -> f64 {
        self.position
            .end_time()
            .max(self.angles.end_time())
            .max(self.gripper.end_time())
    }
}

/// Noise and motor parameters shared by both scripts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotorProfile {
    /// Tremor as an equivalent target displacement, m.
    pub tremor: f64,
    /// Additive noise on reported hand velocity, m/s.
    pub velocity_noise: f64,
    /// Orientation drift amplitude, degrees.
    pub wobble_deg: f64,
    pub impedance: ImpedanceParams,
}

impl Default for MotorProfile {
    fn default() -> Self {
        Self {
            tremor: 0.001,
            velocity_noise: 0.0,
            wobble_deg: 1.0,
            impedance: ImpedanceParams::default(),
        }
    }
}

fn gaussian<R: Rng>(rng: &mut R, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("positive sigma").sample(rng)
    } else {
        0.0
    }
}

fn gaussian3<R: Rng>(rng: &mut R, sigma: f64) -> Vec3 {
    Vec3::new(gaussian(rng, sigma), gaussian(rng, sigma), gaussian(rng, sigma))
}

/// Samples a hand at time `t`; the force pulls toward the active goal.
fn hand_input<R: Rng>(h: &HandScript, t: f64, motor: &MotorProfile, with_force: bool, rng: &mut R) -> HandInput {
    let (x, v, goal) = h.position.at(t);
    let force = if with_force {
        synthesize_operator_force(&goal, &x, &v, &motor.impedance, motor.tremor, rng)
    } else {
        Vec3::zeros()
    };
    HandInput {
        position: x,
        velocity: v + gaussian3(rng, motor.velocity_noise),
        orientation: h.orientation(t),
        angular_velocity: h.angular_velocity(t),
        gripper: h.gripper.at(t).0.x,
        force,
        pedal: false,
        clutch: false,
        target: Some(goal),
    }
}

/// A labeled stretch of script time.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Phase {
    label: u8,
    start: f64,
    end: f64,
}

fn label(n: u8) -> RawGestureLabel {
    RawGestureLabel::new(n).expect("script labels are valid")
}

// ---------------------------------------------------------------------------
// Target reaching

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReachProfile {
    pub motor: MotorProfile,
    /// Delay before each submovement, s.
    pub reaction_latency: f64,
    /// Submovement duration `a + b log2(A / W + 1)` with W twice the tolerance.
    pub fitts_a: f64,
    pub fitts_b: f64,
    /// Endpoint scatter as a fraction of amplitude.
    pub endpoint_along: f64,
    pub endpoint_lateral: f64,
    /// Noise on the operator's own error judgment, m.
    pub perception_sigma: f64,
    /// Judged error below which the operator stops correcting, m.
    pub stop_threshold: f64,
    pub max_submovements: usize,
    /// Hold at the final position before ending the trial, s.
    pub dwell: f64,
    pub return_duration: f64,
    pub rest: f64,
}

impl Default for ReachProfile {
    fn default() -> Self {
        Self {
            motor: MotorProfile::default(),
            reaction_latency: 0.15,
            fitts_a: 0.25,
            fitts_b: 0.15,
            endpoint_along: 0.08,
            endpoint_lateral: 0.03,
            perception_sigma: 0.0002,
            stop_threshold: 0.0008,
            max_submovements: 12,
            dwell: 0.5,
            return_duration: 1.2,
            rest: 0.5,
        }
    }
}

impl ReachProfile {
    /// Noise-free operator: one exact submovement per target.
    pub fn ideal() -> Self {
        Self {
            motor: MotorProfile {
                tremor: 0.0,
                velocity_noise: 0.0,
                wobble_deg: 0.0,
                ..MotorProfile::default()
            },
            endpoint_along: 0.0,
            endpoint_lateral: 0.0,
            perception_sigma: 0.0,
            ..Self::default()
        }
    }

    pub fn movement_time(&self, amplitude: f64, tolerance: f64) -> f64 {
        self.fitts_a + self.fitts_b * (amplitude / (2.0 * tolerance) + 1.0).log2()
    }
}

/// Reaching script: from the start pose to each entry point in turn,
/// returning to the start between trials.
pub fn reach_script(world: &WorldConfig, profile: &ReachProfile, seed: u64) -> Result<Vec<FrameInput>> {
    let mut plan_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let dt = world.sim.tick;
    let start = world.right_start.position;
    let tol = world.success.position_tolerance;
    let mut right = HandScript::new(start, 0.1, profile.motor.wobble_deg, &mut plan_rng);
    let left = HandScript::new(world.left_start.position, 0.3, 0.0, &mut plan_rng);

    // (entry, start time, end time)
    let mut trials = Vec::new();
    let mut t = 0.0;
    for (j, &x) in world.sim.entry_offsets.iter().enumerate() {
        let target = Vec3::new(x, 0.0, 0.0);
        let trial_start = t;
        t += profile.reaction_latency;
        let mut here = right.position.end_value();
        for _ in 0..profile.max_submovements.max(1) {
            let d = target - here;
            let a = d.norm();
            let along = if a > 0.0 { d / a } else { Vec3::x() };
            let lat1 = along.cross(&Vec3::z());
            let lat1 = if lat1.norm() > 1e-9 { lat1.normalize() } else { Vec3::y() };
            let lat2 = along.cross(&lat1);
            let goal = target
                + along * gaussian(&mut plan_rng, profile.endpoint_along * a)
                + lat1 * gaussian(&mut plan_rng, profile.endpoint_lateral * a)
                + lat2 * gaussian(&mut plan_rng, profile.endpoint_lateral * a);
            let dur = profile.movement_time(a, tol);
            right.position.to(t, dur, goal);
            t += dur + profile.reaction_latency;
            here = goal;
            let judged = (goal - target) + gaussian3(&mut plan_rng, profile.perception_sigma);
            if judged.norm() <= profile.stop_threshold {
                break;
            }
        }
        t += profile.dwell;
        trials.push((j, trial_start, t));
        right.position.to(t, profile.return_duration, start);
        t += profile.return_duration + profile.rest;
    }

    let ticks = (t / dt).ceil() as usize;
    let tick_of = |time: f64| (time / dt - 1e-9).ceil() as usize;
    let trials: Vec<(usize, usize, usize)> =
        trials.iter().map(|&(j, s, e)| (j, tick_of(s), tick_of(e))).collect();
    let mut frames = Vec::with_capacity(ticks);
    for k in 0..ticks {
        let time = k as f64 * dt;
        let trial = trials.iter().find(|(_, s, e)| (*s..*e).contains(&k));
        let mut f = FrameInput {
            right: hand_input(&right, time, &profile.motor, true, &mut noise_rng),
            left: hand_input(&left, time, &profile.motor, false, &mut noise_rng),
            label: label(if trial.is_some() { 3 } else { 11 }),
            occlude: false,
            set_mode: None,
            start_trial: None,
            end_trial: false,
            lambda_cap: None,
        };
        if let Some(&(j, s, e)) = trial {
            f.start_trial = (k == s).then_some(j);
            f.end_trial = k + 1 == e;
        }
        frames.push(f);
    }
    Ok(frames)
}

// ---------------------------------------------------------------------------
// Suturing

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SutureProfile {
    pub motor: MotorProfile,
    /// Mean and spread of the yaw misalignment the operator settles into
    /// after reorienting the needle, degrees.
    pub misalignment_mean: f64,
    pub misalignment_std: f64,
    /// Per-recording range of the overall speed factor.
    pub speed_range: (f64, f64),
    /// Per-phase duration jitter, fraction.
    pub duration_jitter: f64,
    /// Goal scatter, m.
    pub placement_sigma: f64,
    /// How long before the end of positioning the pedal is held, s.
    pub pedal_hold: f64,
}

impl Default for SutureProfile {
    fn default() -> Self {
        Self {
            motor: MotorProfile {
                velocity_noise: 0.002,
                wobble_deg: 3.0,
                ..MotorProfile::default()
            },
            misalignment_mean: 25.0,
            misalignment_std: 6.0,
            speed_range: (0.85, 1.15),
            duration_jitter: 0.1,
            placement_sigma: 0.002,
            pedal_hold: 0.4,
        }
    }
}

/// Suturing script plus the bookkeeping needed to check it.
#[derive(Debug, Clone)]
pub struct SutureScript {
    pub frames: Vec<FrameInput>,
    /// Raw label per throw segment, in order.
    pub throw_labels: Vec<Vec<u8>>,
}

struct SutureBuilder<'a> {
    right: HandScript,
    left: HandScript,
    phases: Vec<Phase>,
    pedal: Vec<(f64, f64)>,
    t: f64,
    speed: f64,
    profile: &'a SutureProfile,
    rng: ChaCha8Rng,
}

impl SutureBuilder<'_> {
    fn duration(&mut self, nominal: f64) -> f64 {
        let j = self.profile.duration_jitter;
        let f = if j > 0.0 { self.rng.random_range(1.0 - j..1.0 + j) } else { 1.0 };
        nominal * self.speed * f
    }

    fn scatter(&mut self) -> Vec3 {
        gaussian3(&mut self.rng, self.profile.placement_sigma)
    }

    fn yaw(&mut self) -> f64 {
        let p = self.profile;
        (p.misalignment_mean + gaussian(&mut self.rng, p.misalignment_std)).to_radians()
    }

    /// Opens a phase of nominal length `nominal` and returns (start, length).
    fn phase(&mut self, label: u8, nominal: f64) -> (f64, f64) {
        let d = self.duration(nominal);
        let s = self.t;
        self.phases.push(Phase {
            label,
            start: s,
            end: s + d,
        });
        self.t += d;
        (s, d)
    }
}

const RIGHT_REST: Vec3 = Vec3::new(-0.02, -0.03, 0.04);

/// Four-throw style suturing: G1, then per throw
/// G2 G3 G6 [G10] G9 G4 G8 G5, then G11.
pub fn suture_script(world: &WorldConfig, profile: &SutureProfile, throws: usize, seed: u64) -> Result<SutureScript> {
    if throws == 0 {
        return Err(Error::Config("at least one throw is required".into()));
    }
    let offsets = world.sim.entry_offsets;
    let spacing = offsets[offsets.len() - 1] - offsets[offsets.len() - 2];
    let entry_x = |j: usize| {
        if j < offsets.len() {
            offsets[j]
        } else {
            offsets[offsets.len() - 1] + spacing * (j + 1 - offsets.len()) as f64
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let speed = rng.random_range(profile.speed_range.0..=profile.speed_range.1);
    let park = world.left_start.position;
    let right = HandScript::new(RIGHT_REST, 0.6, profile.motor.wobble_deg, &mut rng);
    let left = HandScript::new(park, 0.6, profile.motor.wobble_deg * 0.5, &mut rng);
    let mut b = SutureBuilder {
        right,
        left,
        phases: Vec::new(),
        pedal: Vec::new(),
        t: 0.5,
        speed,
        profile,
        rng,
    };

    // G1: reach for the needle.
    let (s, d) = b.phase(1, 3.0);
    let yaw0 = b.yaw();
    let above = Vec3::new(entry_x(0), -0.004, 0.020) + b.scatter();
    b.right.position.to(s, d * 0.8, above);
    b.right.angles.to(s + d * 0.2, d * 0.6, Vec3::new(yaw0, 0.0, 0.0));
    b.right.gripper.to(s + d * 0.7, d * 0.3, Vec3::new(0.1, 0.0, 0.0));
    b.left.gripper.to(s, d * 0.5, Vec3::new(0.3, 0.0, 0.0));

    let mut throw_labels = Vec::new();
    for j in 0..throws {
        let x = entry_x(j);
        let xn = entry_x(j + 1);
        let mut labels = Vec::new();

        // G2: needle tip onto the entry point at working height.
        let (s, d) = b.phase(2, 3.0);
        labels.push(2);
        let p = Vec3::new(x, -0.004, 0.010) + b.scatter() * 0.5;
        b.right.position.to(s, d * 0.75, p);
        b.right.angles.by(s, d * 0.5, Vec3::new(0.0, 0.08, 0.0));
        let hold = profile.pedal_hold.min(d * 0.5);
        b.pedal.push((s + d - hold, s + d));

        // G3: rotate the needle through the tissue.
        let (s, d) = b.phase(3, 3.0);
        labels.push(3);
        b.right.angles.to(s, d * 0.9, Vec3::new(b.right.angles.end_value().x, 0.0, 1.75));
        b.right.position.by(s, d * 0.9, Vec3::new(0.0, 0.008, -0.004));

        // G6: left grasps the tip and pulls the suture through.
        let (s, d) = b.phase(6, 2.5);
        labels.push(6);
        let exit = Vec3::new(x, 0.006, 0.004) + b.scatter() * 0.5;
        b.left.position.to(s, d * 0.35, exit);
        b.left.gripper.to(s + d * 0.3, d * 0.15, Vec3::new(0.1, 0.0, 0.0));
        let up = Vec3::new(x + 0.005, 0.035, 0.045) + b.scatter();
        b.left.position.to(s + d * 0.45, d * 0.55, up);
        b.left.angles.to(s + d * 0.45, d * 0.5, Vec3::new(0.0, 0.0, 0.5));
        b.right.gripper.to(s, d * 0.3, Vec3::new(0.5, 0.0, 0.0));

        // G10: pay out more suture (early throws only).
        if j < 2 {
            let (s, d) = b.phase(10, 2.0);
            labels.push(10);
            b.left.position.by(s, d * 0.45, Vec3::new(0.008, -0.012, -0.018));
            b.left.position.by(s + d * 0.5, d * 0.45, Vec3::new(-0.004, 0.010, 0.016));
            b.left.angles.to(s, d * 0.8, Vec3::new(0.0, 0.0, -0.3));
        }

        // G9: right hand helps tighten.
        let (s, d) = b.phase(9, 1.5);
        labels.push(9);
        b.right.position.by(s, d * 0.45, Vec3::new(-0.003, -0.008, 0.004));
        b.right.position.by(s + d * 0.5, d * 0.45, Vec3::new(0.003, 0.006, -0.002));
        b.right.gripper.to(s, d * 0.4, Vec3::new(0.8, 0.0, 0.0));
        b.right.gripper.to(s + d * 0.5, d * 0.4, Vec3::new(0.5, 0.0, 0.0));

        // G4: needle passed from left to right near the next entry point.
        let (s, d) = b.phase(4, 2.5);
        labels.push(4);
        let meet = Vec3::new(xn, 0.012, 0.022) + b.scatter();
        b.left.position.to(s, d * 0.6, meet + Vec3::new(0.0, 0.004, 0.0));
        b.right.position.to(s, d * 0.6, meet - Vec3::new(0.0, 0.004, 0.0));
        let yaw = b.right.angles.end_value().x;
        b.right.angles.to(s, d * 0.6, Vec3::new(yaw, 0.0, 0.0));
        b.left.angles.to(s, d * 0.6, Vec3::zeros());
        b.right.gripper.to(s + d * 0.6, d * 0.2, Vec3::new(0.1, 0.0, 0.0));
        b.left.gripper.to(s + d * 0.8, d * 0.2, Vec3::new(0.6, 0.0, 0.0));

        // G8: reorient the needle in the gripper.
        let (s, d) = b.phase(8, 2.0);
        labels.push(8);
        let yaw_next = b.yaw();
        b.right.angles.to(s, d * 0.8, Vec3::new(yaw_next, 0.0, 0.35));
        b.right.position.by(s, d * 0.6, Vec3::new(0.0, -0.004, 0.005));
        let back = park + b.scatter();
        b.left.position.to(s, d * 0.7, back);

        // G5: carry the needle to the next entry point.
        let (s, d) = b.phase(5, 2.0);
        labels.push(5);
        let next_above = Vec3::new(xn, -0.004, 0.018) + b.scatter();
        b.right.position.to(s, d * 0.8, next_above);
        b.right.angles.to(s, d * 0.8, Vec3::new(yaw_next, 0.0, 0.0));
        throw_labels.push(labels);
    }

    // G11: drop the suture and withdraw.
    let (s, d) = b.phase(11, 2.5);
    b.right.position.to(s, d * 0.8, RIGHT_REST);
    b.right.gripper.to(s, d * 0.3, Vec3::new(0.6, 0.0, 0.0));
    b.left.position.to(s, d * 0.8, park + Vec3::new(0.01, 0.02, 0.02));
    b.left.gripper.to(s, d * 0.3, Vec3::new(0.8, 0.0, 0.0));

    let end = b.t.max(b.right.end_time()).max(b.left.end_time());
    let dt = world.sim.tick;
    let ticks = (end / dt).ceil() as usize;
    let mut frames = Vec::with_capacity(ticks);
    let first = b.phases[0].label;
    for k in 0..ticks {
        let time = k as f64 * dt;
        let phase = b.phases.iter().rev().find(|p| time >= p.start);
        let mut right = hand_input(&b.right, time, &profile.motor, true, &mut noise_rng);
        right.pedal = b.pedal.iter().any(|&(s, e)| time >= s && time < e);
        frames.push(FrameInput {
            right,
            left: hand_input(&b.left, time, &profile.motor, false, &mut noise_rng),
            label: label(phase.map_or(first, |p| p.label)),
            occlude: false,
            set_mode: None,
            start_trial: None,
            end_trial: false,
            lambda_cap: None,
        });
    }
    Ok(SutureScript { frames, throw_labels })
}

/// Run-length encoding of the raw labels of a frame stream.
pub fn label_runs(frames: &[FrameInput]) -> Vec<(u8, usize)> {
    let mut runs: Vec<(u8, usize)> = Vec::new();
    for f in frames {
        let n = f.label.number();
        match runs.last_mut() {
            Some((l, c)) if *l == n => *c += 1,
            _ => runs.push((n, 1)),
        }
    }
    runs
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn channel_holds_between_segments() {
        let mut c = Channel::new(Vec3::zeros());
        c.to(1.0, 1.0, Vec3::x());
        c.to(3.0, 1.0, Vec3::zeros());
        assert_eq!(c.at(0.5).0, Vec3::zeros());
        assert_eq!(c.at(2.5), (Vec3::x(), Vec3::zeros(), Vec3::x()));
        assert!((c.at(1.5).0.x - 0.5).abs() < 1e-12);
        assert_eq!(c.at(1.5).2, Vec3::x());
        assert_eq!(c.at(10.0).0, Vec3::zeros());
    }

    #[test]
    fn reach_script_marks_every_trial() {
        let w = WorldConfig::default();
        let frames = reach_script(&w, &ReachProfile::default(), 4).unwrap();
        let starts: Vec<usize> = frames.iter().filter_map(|f| f.start_trial).collect();
        assert_eq!(starts, vec![0, 1, 2, 3]);
        assert_eq!(frames.iter().filter(|f| f.end_trial).count(), 4);
        assert_eq!(frames, reach_script(&w, &ReachProfile::default(), 4).unwrap());
        assert_ne!(frames, reach_script(&w, &ReachProfile::default(), 5).unwrap());
    }

    #[test]
    fn ideal_reach_goes_straight_to_target() {
        let w = WorldConfig::default();
        let frames = reach_script(&w, &ReachProfile::ideal(), 0).unwrap();
        let end = frames.iter().position(|f| f.end_trial).unwrap();
        assert_eq!(frames[end].right.position, Vec3::new(0.015, 0.0, 0.0));
        assert_eq!(frames[end].right.force, Vec3::zeros());
    }

    #[test]
    fn suture_script_follows_throw_order() {
        let w = WorldConfig::default();
        let s = suture_script(&w, &SutureProfile::default(), 4, 1).unwrap();
        let runs: Vec<u8> = label_runs(&s.frames).into_iter().map(|r| r.0).collect();
        let mut expected = vec![1];
        for labels in &s.throw_labels {
            expected.extend(labels);
        }
        expected.push(11);
        assert_eq!(runs, expected);
        assert_eq!(s.throw_labels[0], vec![2, 3, 6, 10, 9, 4, 8, 5]);
        assert_eq!(s.throw_labels[3], vec![2, 3, 6, 9, 4, 8, 5]);
        let pedal_runs = s.frames.windows(2).filter(|p| p[1].right.pedal && !p[0].right.pedal).count();
        assert_eq!(pedal_runs, 4);
        assert!(suture_script(&w, &SutureProfile::default(), 0, 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn hand_motion_is_c1(seed in 0u64..1000) {
            let w = WorldConfig::default();
            let profile = SutureProfile {
                motor: MotorProfile { velocity_noise: 0.0, ..SutureProfile::default().motor },
                ..SutureProfile::default()
            };
            let s = suture_script(&w, &profile, 2, seed).unwrap();
            let dt = w.sim.tick;
            for p in s.frames.windows(2) {
                let (a, b) = (&p[0].right, &p[1].right);
                // trapezoid rule on a C1 signal sampled at 20 Hz
                let predicted = a.position + (a.velocity + b.velocity) * (dt / 2.0);
                prop_assert!((predicted - b.position).norm() < 2e-4);
                prop_assert!((b.velocity - a.velocity).norm() < 0.05);
            }
        }
    }
}

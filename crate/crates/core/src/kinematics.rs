//! Geometric and kinematic domain types shared by every other module.
//!
//! Everything is SI (meters, seconds, radians). Degrees only show up in
//! reporting helpers such as [`perpendicularity_error`].

use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Orthonormality / determinant tolerance accepted by [`Rot3::new`].
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// A proper rotation stored as a 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rot3(Matrix3<f64>);

impl Rot3 {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidRotation("non-finite entry".into()));
        }
        let gram = m.transpose() * m - Matrix3::identity();
        let off = gram.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        if off > ROTATION_TOLERANCE {
            return Err(Error::InvalidRotation(format!(
                "not orthonormal (max |RᵀR - I| = {off:e})"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::InvalidRotation(format!("determinant {det} != 1")));
        }
        Ok(Self(m))
    }

    /// Row-major 9-element encoding, the layout used by the recording format.
    pub fn from_row_major(v: &[f64; 9]) -> Result<Self> {
        Self::new(Matrix3::from_row_slice(v))
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let axis = Unit::new_normalize(*axis);
        Self(*Rotation3::from_axis_angle(&axis, angle).matrix())
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>) -> Self {
        Self(*UnitQuaternion::new_normalize(*q.quaternion()).to_rotation_matrix().matrix())
    }

    pub fn to_quaternion(&self) -> UnitQuaternion<f64> {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.0));
        UnitQuaternion::new_normalize(q.into_inner())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    /// Column `i` of the matrix: the i-th body axis expressed in the parent frame.
    pub fn axis(&self, i: usize) -> Vec3 {
        self.0.column(i).into_owned()
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn compose(&self, other: &Rot3) -> Self {
        Self(self.0 * other.0)
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    /// Geodesic angle between two rotations, radians.
    pub fn angle_to(&self, other: &Rot3) -> f64 {
        let rel = self.0.transpose() * other.0;
        ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// Re-orthonormalize after accumulated floating point drift.
    pub fn renormalized(&self) -> Self {
        Self::from_quaternion(&self.to_quaternion())
    }
}

impl Default for Rot3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Serialize for Rot3 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_major().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Rot3 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = <[f64; 9]>::deserialize(d)?;
        Rot3::from_row_major(&v).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: Rot3,
}

impl Pose {
    pub fn new(position: Vec3, orientation: Rot3) -> Self {
        Self {
            position,
            orientation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DeviceId {
    Psm1,
    Psm2,
    SigmaR,
    SigmaL,
}

impl DeviceId {
    /// Column-block order of the recording format.
    pub const ALL: [DeviceId; 4] = [
        DeviceId::Psm1,
        DeviceId::Psm2,
        DeviceId::SigmaR,
        DeviceId::SigmaL,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DeviceId::Psm1 => "PSM1",
            DeviceId::Psm2 => "PSM2",
            DeviceId::SigmaR => "SIGMA_R",
            DeviceId::SigmaL => "SIGMA_L",
        }
    }
}

/// Number of kinematic features one device contributes to a recording row.
pub const FEATURES_PER_DEVICE: usize = 19;

/// One 20 Hz frame of a device's state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinematicSample {
    pub device: DeviceId,
    pub position: Vec3,
    pub orientation: Rot3,
    pub linear_velocity: Vec3,
    pub angular_velocity: Vec3,
    pub gripper_angle: f64,
    pub timestamp: f64,
}

impl KinematicSample {
    /// position(3), rotation(9), linear velocity(3), angular velocity(3), gripper(1).
    pub fn features(&self) -> [f64; FEATURES_PER_DEVICE] {
        let mut out = [0.0; FEATURES_PER_DEVICE];
        out[0..3].copy_from_slice(self.position.as_slice());
        out[3..12].copy_from_slice(&self.orientation.to_row_major());
        out[12..15].copy_from_slice(self.linear_velocity.as_slice());
        out[15..18].copy_from_slice(self.angular_velocity.as_slice());
        out[18] = self.gripper_angle;
        out
    }

    pub fn from_features(
        device: DeviceId,
        f: &[f64; FEATURES_PER_DEVICE],
        timestamp: f64,
    ) -> Result<Self> {
        let mut rot = [0.0; 9];
        rot.copy_from_slice(&f[3..12]);
        Ok(Self {
            device,
            position: Vec3::new(f[0], f[1], f[2]),
            orientation: Rot3::from_row_major(&rot)?,
            linear_velocity: Vec3::new(f[12], f[13], f[14]),
            angular_velocity: Vec3::new(f[15], f[16], f[17]),
            gripper_angle: f[18],
            timestamp,
        })
    }
}

/// Tissue-attached frame: x along the wound, y across it in-plane, z the
/// outward tissue normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskFrame {
    pub origin: Vec3,
    pub orientation: Rot3,
}

impl TaskFrame {
    pub fn new(origin: Vec3, orientation: Rot3) -> Self {
        Self {
            origin,
            orientation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Vec3::zeros(), Rot3::identity())
    }

    pub fn wound_axis(&self) -> Vec3 {
        self.orientation.axis(0)
    }

    pub fn normal(&self) -> Vec3 {
        self.orientation.axis(2)
    }
}

impl Default for TaskFrame {
    fn default() -> Self {
        Self::identity()
    }
}

pub fn to_task_frame(p: &Vec3, f: &TaskFrame) -> Vec3 {
    f.orientation.matrix().transpose() * (p - f.origin)
}

pub fn from_task_frame(p: &Vec3, f: &TaskFrame) -> Vec3 {
    f.orientation.matrix() * p + f.origin
}

/// Angle in degrees between the needle-plane normal (tool x-axis) and the
/// wound direction (task x-axis). Zero means the needle plane is
/// perpendicular to the wound.
pub fn perpendicularity_error(tool: &Rot3, f: &TaskFrame) -> f64 {
    let a = tool.axis(0);
    let b = f.wound_axis();
    let c = (a.dot(&b) / (a.norm() * b.norm())).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// Planned insertion points along the wound, in task-frame coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryPointSet {
    points: Vec<Vec3>,
    current: usize,
}

impl EntryPointSet {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Config("entry point set is empty".into()));
        }
        if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Config("non-finite entry point".into()));
        }
        if points.windows(2).any(|w| w[1].x <= w[0].x) {
            return Err(Error::Config(
                "entry points must be strictly ordered along +x".into(),
            ));
        }
        Ok(Self { points, current: 0 })
    }

    /// Points on the wound line (y = 0, z = 0) at the given x offsets.
    pub fn along_wound(offsets: &[f64]) -> Result<Self> {
        Self::new(offsets.iter().map(|&x| Vec3::new(x, 0.0, 0.0)).collect())
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn index(&self) -> usize {
        self.current
    }

    pub fn current(&self) -> Vec3 {
        self.points[self.current]
    }

    /// The entry point after the current one, or `None` past the last.
    pub fn next(&self) -> Option<Vec3> {
        self.points.get(self.current + 1).copied()
    }

    pub fn set_index(&mut self, j: usize) -> Result<()> {
        if j >= self.points.len() {
            return Err(Error::Config(format!(
                "entry index {j} out of range (count {})",
                self.points.len()
            )));
        }
        self.current = j;
        Ok(())
    }

    /// Moves to the next entry point; saturates at the last one.
    pub fn advance(&mut self) -> bool {
        if self.current + 1 < self.points.len() {
            self.current += 1;
            true
        } else {
            false
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn rot_strategy() -> impl Strategy<Value = Rot3> {
        (
            -1.0..1.0f64,
            -1.0..1.0f64,
            -1.0..1.0f64,
            -std::f64::consts::PI..std::f64::consts::PI,
        )
            .prop_filter("axis", |(x, y, z, _)| x * x + y * y + z * z > 1e-3)
            .prop_map(|(x, y, z, a)| Rot3::from_axis_angle(&Vec3::new(x, y, z), a))
    }

    #[test]
    fn origin_maps_to_zero() {
        let f = TaskFrame::new(
            Vec3::new(0.1, -0.2, 0.3),
            Rot3::from_axis_angle(&Vec3::new(1.0, 2.0, 3.0), 0.7),
        );
        assert_abs_diff_eq!(to_task_frame(&f.origin, &f), Vec3::zeros(), epsilon = 1e-15);
    }

    #[test]
    fn identity_frame_is_identity() {
        let p = Vec3::new(0.01, 0.02, -0.03);
        assert_eq!(to_task_frame(&p, &TaskFrame::identity()), p);
        assert_eq!(from_task_frame(&p, &TaskFrame::identity()), p);
    }

    #[test]
    fn rejects_non_orthonormal() {
        let mut m = Matrix3::identity();
        m[(0, 1)] = 1e-6;
        assert!(Rot3::new(m).is_err());
        // reflection
        let m = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(Rot3::new(m).is_err());
        assert!(Rot3::new(Matrix3::from_element(f64::NAN)).is_err());
    }

    #[test]
    fn perpendicularity_worked_cases() {
        let f = TaskFrame::identity();
        assert_abs_diff_eq!(perpendicularity_error(&Rot3::identity(), &f), 0.0);
        let yaw = Rot3::from_axis_angle(&Vec3::z(), std::f64::consts::FRAC_PI_2);
        assert_abs_diff_eq!(perpendicularity_error(&yaw, &f), 90.0, epsilon = 1e-9);
    }

    #[test]
    fn entry_points_must_increase() {
        assert!(EntryPointSet::along_wound(&[0.015, 0.03]).is_ok());
        assert!(EntryPointSet::along_wound(&[0.03, 0.015]).is_err());
        assert!(EntryPointSet::along_wound(&[]).is_err());
        let mut e = EntryPointSet::along_wound(&[0.015, 0.03]).unwrap();
        assert!(e.advance());
        assert!(!e.advance());
        assert_eq!(e.index(), 1);
        assert!(e.next().is_none());
    }

    #[test]
    fn sample_feature_round_trip() {
        let s = KinematicSample {
            device: DeviceId::SigmaL,
            position: Vec3::new(1.0, 2.0, 3.0),
            orientation: Rot3::from_axis_angle(&Vec3::y(), 0.3),
            linear_velocity: Vec3::new(0.1, 0.2, 0.3),
            angular_velocity: Vec3::new(-0.1, 0.0, 0.5),
            gripper_angle: 0.4,
            timestamp: 0.05,
        };
        let f = s.features();
        let back = KinematicSample::from_features(DeviceId::SigmaL, &f, 0.05).unwrap();
        assert_eq!(back, s);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn task_frame_round_trip(r in rot_strategy(),
                                 o in prop::array::uniform3(-1.0..1.0f64),
                                 p in prop::array::uniform3(-1.0..1.0f64)) {
            let f = TaskFrame::new(Vec3::from(o), r);
            let p = Vec3::from(p);
            let back = to_task_frame(&from_task_frame(&p, &f), &f);
            prop_assert!((back - p).abs().max() < 1e-12);
            let back = from_task_frame(&to_task_frame(&p, &f), &f);
            prop_assert!((back - p).abs().max() < 1e-12);
        }

        #[test]
        fn perpendicularity_matches_direct_formula(tool in rot_strategy(), frame in rot_strategy()) {
            let f = TaskFrame::new(Vec3::zeros(), frame);
            let expected = tool.axis(0).dot(&frame.axis(0)).clamp(-1.0, 1.0).acos().to_degrees();
            let got = perpendicularity_error(&tool, &f);
            prop_assert!((got - expected).abs() < 1e-9);
            prop_assert!((0.0..=180.0).contains(&got));
        }

        #[test]
        fn perpendicularity_invariant_to_roll_about_measured_axis(
            tool in rot_strategy(), frame in rot_strategy(), roll in -3.0..3.0f64
        ) {
            let f = TaskFrame::new(Vec3::zeros(), frame);
            let rolled = tool.compose(&Rot3::from_axis_angle(&Vec3::x(), roll));
            let a = perpendicularity_error(&tool, &f);
            let b = perpendicularity_error(&rolled, &f);
            prop_assert!((a - b).abs() < 1e-6);
        }

        #[test]
        fn constructed_rotations_validate(r in rot_strategy()) {
            prop_assert!(Rot3::new(*r.matrix()).is_ok());
            prop_assert!(Rot3::from_row_major(&r.to_row_major()).is_ok());
        }
    }
}

//! Frames, rigid transforms, rotations and distance metrics.
//!
//! A [`RigidTransform`] is a coordinate mapping: a point expressed in
//! `from` is mapped into `to` as `p_to = R * p_from + t`. The pose of a
//! tag seen by a camera is therefore a `Tag(id) -> Camera(j)` transform,
//! and the pose of the head in the world is `Head -> World`.
//!
//! Lengths are millimeters, angles at the API surface are degrees.

use std::fmt;

use nalgebra::{Matrix3, Matrix4, Quaternion, Rotation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Image-plane coordinate in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2Px {
    pub u: f64,
    pub v: f64,
}

impl Point2Px {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &Point2Px) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

/// 3D point in millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3Mm {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3Mm {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_vector(self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

impl From<Vec3> for Point3Mm {
    fn from(v: Vec3) -> Self {
        Self::new(v.x, v.y, v.z)
    }
}

impl From<Point3Mm> for Vec3 {
    fn from(p: Point3Mm) -> Self {
        p.to_vector()
    }
}

/// Unit-quaternion rotation kept in canonical form (`w >= 0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(UnitQuaternion<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Self(UnitQuaternion::identity())
    }

    /// Builds from raw `(w, x, y, z)` components, normalizing them.
    pub fn from_wxyz(q: [f64; 4]) -> Result<Self> {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = quat.norm();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::DegenerateGeometry(format!(
                "quaternion {q:?} cannot be normalized"
            )));
        }
        Ok(Self::from_unit(UnitQuaternion::from_quaternion(quat)))
    }

    pub fn from_unit(q: UnitQuaternion<f64>) -> Self {
        // Re-normalize and canonicalize so the hemisphere is stable.
        let q = q.into_inner();
        let q = q / q.norm();
        let q = if q.w < 0.0 { -q } else { q };
        Self(UnitQuaternion::new_unchecked(q))
    }

    pub fn from_axis_angle_deg(axis: Vec3, degrees: f64) -> Self {
        match Unit::try_new(axis, 1e-15) {
            Some(axis) => Self::from_unit(UnitQuaternion::from_axis_angle(&axis, degrees.to_radians())),
            None => Self::identity(),
        }
    }

    /// Rotation vector (axis * angle, radians).
    pub fn from_scaled_axis(omega: Vec3) -> Self {
        Self::from_unit(UnitQuaternion::from_scaled_axis(omega))
    }

    pub fn rot_x_deg(degrees: f64) -> Self {
        Self::from_axis_angle_deg(Vec3::x(), degrees)
    }

    pub fn rot_y_deg(degrees: f64) -> Self {
        Self::from_axis_angle_deg(Vec3::y(), degrees)
    }

    pub fn rot_z_deg(degrees: f64) -> Self {
        Self::from_axis_angle_deg(Vec3::z(), degrees)
    }

    /// Nearest rotation to an arbitrary 3x3 matrix (SVD projection onto SO(3)).
    /// Nearest rotation to `m` (SVD projection onto SO(3)).
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let (u, v_t) = (svd.u.expect("requested U"), svd.v_t.expect("requested V^T"));
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)) * v_t;
        }
        Self::from_unit(UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r)))
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.0.to_rotation_matrix().into_inner()
    }

    /// Components as `[w, x, y, z]`.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn unit_quaternion(&self) -> &UnitQuaternion<f64> {
        &self.0
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    pub fn inverse(&self) -> Self {
        Self::from_unit(self.0.inverse())
    }

    /// `self * other`: apply `other` first.
    pub fn then_after(&self, other: &Rotation) -> Self {
        Self::from_unit(self.0 * other.0)
    }

    pub fn scaled_axis(&self) -> Vec3 {
        self.0.scaled_axis()
    }

    pub fn angle_deg(&self) -> f64 {
        angular_distance(&Rotation::identity(), self)
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        self.then_after(&rhs)
    }
}

impl Serialize for Rotation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.wxyz().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Rotation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let q = <[f64; 4]>::deserialize(d)?;
        Rotation::from_wxyz(q).map_err(serde::de::Error::custom)
    }
}

/// Named coordinate frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameId {
    World,
    Camera(u32),
    Tag(u32),
    Head,
    Coil,
}

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FrameId::World => write!(f, "world"),
            FrameId::Camera(j) => write!(f, "camera({j})"),
            FrameId::Tag(id) => write!(f, "tag({id})"),
            FrameId::Head => write!(f, "head"),
            FrameId::Coil => write!(f, "coil"),
        }
    }
}

/// Rigid motion mapping coordinates in `from` into `to`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vec3,
    pub from: FrameId,
    pub to: FrameId,
}

impl RigidTransform {
    pub fn new(rotation: Rotation, translation: Vec3, from: FrameId, to: FrameId) -> Self {
        Self { rotation, translation, from, to }
    }

    pub fn identity(from: FrameId, to: FrameId) -> Self {
        Self::new(Rotation::identity(), Vec3::zeros(), from, to)
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    /// `self ∘ b`: maps `b.from` into `self.to`.
    pub fn compose(&self, b: &RigidTransform) -> Result<RigidTransform> {
        compose(self, b)
    }

    pub fn inverse(&self) -> RigidTransform {
        invert(self)
    }

    /// Same motion, different frame labels.
    pub fn relabeled(mut self, from: FrameId, to: FrameId) -> Self {
        self.from = from;
        self.to = to;
        self
    }

    /// Homogeneous 4x4 matrix.
    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major 16 values, as used by config documents.
    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.matrix();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    /// Parses a row-major 4x4 matrix, rejecting anything that is not a
    /// proper rigid motion (orthonormal rotation block with det +1 and a
    /// `[0 0 0 1]` last row).
    pub fn from_row_major(values: &[f64], from: FrameId, to: FrameId) -> std::result::Result<Self, String> {
        if values.len() != 16 {
            return Err(format!("expected 16 values, found {}", values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err("non-finite entry".into());
        }
        let m = Matrix4::from_row_slice(values);
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(format!("last row must be [0, 0, 0, 1], found {bottom:?}"));
        }
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let det = r.determinant();
        if det.abs() < 1e-9 {
            return Err("rotation block is singular".into());
        }
        if det < 0.0 {
            return Err("rotation block is a reflection (det < 0)".into());
        }
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > 1e-6 {
            return Err(format!("rotation block is not orthonormal (max |RᵀR - I| = {ortho:.3e})"));
        }
        let t = Vec3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
        Ok(Self::new(Rotation::from_matrix(&r), t, from, to))
    }

    pub fn translation_point(&self) -> Point3Mm {
        self.translation.into()
    }
}

/// `a ∘ b`. Requires `a.from == b.to`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> Result<RigidTransform> {
    if a.from != b.to {
        return Err(Error::FrameMismatch { expected: a.from, found: b.to });
    }
    Ok(RigidTransform {
        rotation: a.rotation * b.rotation,
        translation: a.rotation.rotate(&b.translation) + a.translation,
        from: b.from,
        to: a.to,
    })
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    let r_inv = t.rotation.inverse();
    RigidTransform {
        rotation: r_inv,
        translation: -r_inv.rotate(&t.translation),
        from: t.to,
        to: t.from,
    }
}

/// Geodesic angle between two rotations, degrees in `[0, 180]`.
pub fn angular_distance(a: &Rotation, b: &Rotation) -> f64 {
    let d = a.0.inverse() * b.0;
    let q = d.quaternion();
    let s = q.imag().norm();
    (2.0 * s.atan2(q.w.abs())).to_degrees()
}

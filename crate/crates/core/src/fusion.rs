//! Reprojection-error driven uncertainty and inverse-variance fusion.
//!
//! Per camera, the mean reprojection error `e` at depth `t_z` gives
//! translation sigmas `e·t_z/f_x`, `e·t_z/f_y`, `e·t_z/√(f_x² + f_y²)`,
//! which are linearized onto the distance `d = ‖t‖`. Estimates are then
//! fused with weights `1/σ²`.
//!
//! Summation always runs in a canonical order (camera id, then tag id,
//! then value) so results are bit-identical regardless of input order.

use std::cmp::Ordering;

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3Mm, Rotation};
use crate::projection::CameraIntrinsics;

/// Sigmas are floored here before they become weights.
pub const SIGMA_FLOOR: f64 = 1e-9;
/// Sigma multiplier for ambiguous estimates that are kept.
pub const AMBIGUOUS_INFLATION: f64 = 10.0;

/// Per-axis translation standard deviations, mm.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TranslationSigma {
    pub sigma_tx: f64,
    pub sigma_ty: f64,
    pub sigma_tz: f64,
}

impl TranslationSigma {
    pub const fn new(sigma_tx: f64, sigma_ty: f64, sigma_tz: f64) -> Self {
        Self { sigma_tx, sigma_ty, sigma_tz }
    }

    pub fn isotropic(s: f64) -> Self {
        Self::new(s, s, s)
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.sigma_tx, self.sigma_ty, self.sigma_tz]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(self.sigma_tx * factor, self.sigma_ty * factor, self.sigma_tz * factor)
    }

    pub fn total_variance(&self) -> f64 {
        self.sigma_tx.powi(2) + self.sigma_ty.powi(2) + self.sigma_tz.powi(2)
    }

    /// Axis sigmas of the diagonal covariance after rotating it by `r`
    /// (diagonal of `R·diag(σ²)·Rᵀ`).
    pub fn rotated(&self, r: &Rotation) -> Self {
        let m = r.matrix();
        let var = [self.sigma_tx.powi(2), self.sigma_ty.powi(2), self.sigma_tz.powi(2)];
        let axis = |i: usize| (0..3).map(|k| m[(i, k)].powi(2) * var[k]).sum::<f64>().sqrt();
        Self::new(axis(0), axis(1), axis(2))
    }
}

/// Translation sigmas from the mean reprojection error.
///
/// The y sigma divides by `f_y`; with square pixels this is the same as
/// dividing by `f_x`.
pub fn propagate_sigma(e_proj: f64, t_z: f64, k: &CameraIntrinsics) -> Result<TranslationSigma> {
    if !(t_z > 0.0) {
        return Err(Error::InvalidDepth(t_z));
    }
    if !(e_proj >= 0.0) {
        return Err(Error::DegenerateGeometry(format!("negative reprojection error {e_proj}")));
    }
    Ok(TranslationSigma::new(
        e_proj * t_z / k.fx,
        e_proj * t_z / k.fy,
        e_proj * t_z / k.fx.hypot(k.fy),
    ))
}

/// Distance `‖t‖` and its linearized sigma.
pub fn distance_sigma(t: &Point3Mm, s: &TranslationSigma) -> Result<(f64, f64)> {
    let d = t.norm();
    if !(d > 0.0) {
        return Err(Error::ZeroNorm);
    }
    let sigma = ((t.x / d * s.sigma_tx).powi(2) + (t.y / d * s.sigma_ty).powi(2) + (t.z / d * s.sigma_tz).powi(2)).sqrt();
    Ok((d, sigma))
}

/// One camera's distance to a tag with its sigma.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceEstimate {
    pub camera_id: u32,
    pub distance: f64,
    pub sigma: f64,
    pub translation: Point3Mm,
}

impl DistanceEstimate {
    pub fn new(camera_id: u32, translation: Point3Mm, s: &TranslationSigma) -> Result<Self> {
        let (distance, sigma) = distance_sigma(&translation, s)?;
        Ok(Self { camera_id, distance, sigma, translation })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusedDistance {
    pub distance: f64,
    pub sigma: f64,
    pub contributor_count: usize,
}

fn floored(s: f64) -> f64 {
    s.max(SIGMA_FLOOR)
}

/// Inverse-variance weighted distance.
pub fn fuse_distances(estimates: &[DistanceEstimate]) -> Result<FusedDistance> {
    match estimates {
        [] => Err(Error::Empty("fuse_distances")),
        [only] => Ok(FusedDistance { distance: only.distance, sigma: only.sigma, contributor_count: 1 }),
        _ => {
            let mut sorted = estimates.to_vec();
            sorted.sort_by(|a, b| {
                a.camera_id
                    .cmp(&b.camera_id)
                    .then(a.distance.total_cmp(&b.distance))
                    .then(a.sigma.total_cmp(&b.sigma))
            });
            let (num, den) = sorted.iter().fold((0.0, 0.0), |(num, den), e| {
                let w = 1.0 / floored(e.sigma).powi(2);
                (num + w * e.distance, den + w)
            });
            Ok(FusedDistance { distance: num / den, sigma: (1.0 / den).sqrt(), contributor_count: sorted.len() })
        }
    }
}

/// A world-frame position with per-axis sigmas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionEstimate {
    pub camera_id: u32,
    pub tag_id: u32,
    pub position: Point3Mm,
    pub sigma: TranslationSigma,
}

fn position_order(a: &PositionEstimate, b: &PositionEstimate) -> Ordering {
    a.camera_id
        .cmp(&b.camera_id)
        .then(a.tag_id.cmp(&b.tag_id))
        .then(a.position.x.total_cmp(&b.position.x))
        .then(a.position.y.total_cmp(&b.position.y))
        .then(a.position.z.total_cmp(&b.position.z))
}

/// Per-axis inverse-variance weighted mean; axes are treated independently.
pub fn fuse_positions(estimates: &[PositionEstimate]) -> Result<(Point3Mm, TranslationSigma)> {
    match estimates {
        [] => Err(Error::Empty("fuse_positions")),
        [only] => Ok((only.position, only.sigma)),
        _ => {
            let mut sorted = estimates.to_vec();
            sorted.sort_by(position_order);
            let mut num = [0.0; 3];
            let mut den = [0.0; 3];
            for e in &sorted {
                let p = [e.position.x, e.position.y, e.position.z];
                for (axis, s) in e.sigma.to_array().into_iter().enumerate() {
                    let w = 1.0 / floored(s).powi(2);
                    num[axis] += w * p[axis];
                    den[axis] += w;
                }
            }
            let point = Point3Mm::new(num[0] / den[0], num[1] / den[1], num[2] / den[2]);
            let sigma = TranslationSigma::new((1.0 / den[0]).sqrt(), (1.0 / den[1]).sqrt(), (1.0 / den[2]).sqrt());
            Ok((point, sigma))
        }
    }
}

/// Scalar reliability weight for rotation fusion: `1/(σx² + σy² + σz²)`.
pub fn rotation_weight(s: &TranslationSigma) -> f64 {
    1.0 / s.total_variance().max(SIGMA_FLOOR * SIGMA_FLOOR)
}

/// Weighted chordal mean: principal eigenvector of `Σ wᵢ qᵢ qᵢᵀ`.
pub fn fuse_rotations(estimates: &[(Rotation, f64)]) -> Result<Rotation> {
    if estimates.is_empty() {
        return Err(Error::Empty("fuse_rotations"));
    }
    if estimates.iter().any(|(_, w)| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::DegenerateGeometry("rotation weights must be positive and finite".into()));
    }
    if let [(only, _)] = estimates {
        return Ok(*only);
    }
    let mut sorted = estimates.to_vec();
    sorted.sort_by(|a, b| {
        let (qa, qb) = (a.0.wxyz(), b.0.wxyz());
        a.1.total_cmp(&b.1)
            .then(qa[0].total_cmp(&qb[0]))
            .then(qa[1].total_cmp(&qb[1]))
            .then(qa[2].total_cmp(&qb[2]))
            .then(qa[3].total_cmp(&qb[3]))
    });
    let mut m = Matrix4::<f64>::zeros();
    for (r, w) in &sorted {
        let q = nalgebra::Vector4::from(r.wxyz());
        m += q * q.transpose() * *w;
    }
    let eig = m.symmetric_eigen();
    let (idx, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("four eigenvalues");
    let v = eig.eigenvectors.column(idx);
    Rotation::from_wxyz([v[0], v[1], v[2], v[3]])
}

/// What to do with a candidate given which candidates were flagged
/// ambiguous: `None` drops it, `Some(f)` keeps it with sigma scaled by `f`.
///
/// Flagged candidates are dropped when at least two unflagged ones exist,
/// otherwise kept with sigma inflated.
pub fn ambiguity_policy(flags: &[bool]) -> Vec<Option<f64>> {
    let clean = flags.iter().filter(|f| !**f).count();
    flags
        .iter()
        .map(|&ambiguous| match (ambiguous, clean >= 2) {
            (false, _) => Some(1.0),
            (true, true) => None,
            (true, false) => Some(AMBIGUOUS_INFLATION),
        })
        .collect()
}

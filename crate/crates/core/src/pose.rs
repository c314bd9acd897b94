//! Per-camera planar marker pose: homography initialization, damped
//! least-squares refinement of the squared reprojection residual, the
//! mean-pixel reprojection error, and the two-fold planar ambiguity check.

use nalgebra::{Matrix3, SMatrix, SVector, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FrameId, Point2Px, RigidTransform, Rotation, Vec3};
use crate::projection::{project_marker, CameraIntrinsics, MarkerSpec};

pub const MAX_ITERATIONS: usize = 100;
pub const STEP_TOLERANCE: f64 = 1e-10;
/// Gradient norm (px², mixed rad/mm parameters) below which a solve counts as converged.
pub const GRADIENT_TOLERANCE: f64 = 1e-6;
/// Relative error gap under which the two planar branches are considered indistinguishable.
pub const AMBIGUITY_RATIO: f64 = 0.10;

const LAMBDA_INIT: f64 = 1e-3;
const LAMBDA_MAX: f64 = 1e12;

type Residual = SVector<f64, 8>;
type Jacobian = SMatrix<f64, 8, 6>;

/// Four detected corners of one tag in one camera image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TagObservation {
    pub camera_id: u32,
    pub tag_id: u32,
    pub corners: [Point2Px; 4],
    pub timestamp_us: u64,
}

/// Solved tag pose (`Tag -> Camera`) with its fit quality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub pose: RigidTransform,
    /// Mean per-corner pixel distance at the solution.
    pub reproj_error: f64,
    /// Reprojection error of the homography initialization.
    pub initial_error: f64,
    pub n_points: usize,
    pub converged: bool,
    pub iterations: usize,
    /// Set when the mirrored planar solution fits nearly as well.
    pub ambiguous: bool,
    /// Reprojection error of the rejected branch, once `ambiguity_check` ran.
    pub alternative_error: Option<f64>,
}

/// Mean Euclidean pixel distance between detected and projected corners.
pub fn reprojection_error(
    k: &CameraIntrinsics,
    marker: &MarkerSpec,
    pose: &RigidTransform,
    obs: &TagObservation,
) -> Result<f64> {
    let projected = project_marker(k, marker, pose)?;
    let n = projected.len() as f64;
    Ok(projected.iter().zip(&obs.corners).map(|(p, x)| p.distance(x)).sum::<f64>() / n)
}

fn check_geometry(obs: &TagObservation) -> Result<()> {
    let c = &obs.corners;
    if c.iter().any(|p| !p.is_finite()) {
        return Err(Error::DegenerateGeometry("non-finite corner".into()));
    }
    let mut max_side: f64 = 0.0;
    for i in 0..4 {
        for j in (i + 1)..4 {
            let d = c[i].distance(&c[j]);
            if d < 1e-6 {
                return Err(Error::DegenerateGeometry(format!("corners {i} and {j} coincide")));
            }
            max_side = max_side.max(d);
        }
    }
    for skip in 0..4 {
        let idx: Vec<usize> = (0..4).filter(|&i| i != skip).collect();
        let (a, b, p) = (c[idx[0]], c[idx[1]], c[idx[2]]);
        let area2 = ((b.u - a.u) * (p.v - a.v) - (b.v - a.v) * (p.u - a.u)).abs();
        if area2 < 1e-9 * max_side * max_side {
            return Err(Error::DegenerateGeometry(format!("corners {idx:?} are collinear")));
        }
    }
    Ok(())
}

/// Similarity transform that centers points and scales their mean distance to √2.
fn normalizing_transform(pts: &[(f64, f64); 4]) -> Matrix3<f64> {
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p.0 / 4.0, sy + p.1 / 4.0));
    let mean_dist = pts.iter().map(|p| (p.0 - mx).hypot(p.1 - my)).sum::<f64>() / 4.0;
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0)
}

/// Plane-to-image homography from four correspondences (normalized DLT).
fn homography(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Result<Matrix3<f64>> {
    let ts = normalizing_transform(src);
    let td = normalizing_transform(dst);
    let apply = |t: &Matrix3<f64>, p: &(f64, f64)| {
        let v = t * Vec3::new(p.0, p.1, 1.0);
        (v.x / v.z, v.y / v.z)
    };
    // 8 equations padded with a zero row so the SVD yields the full null space.
    let mut a = SMatrix::<f64, 9, 9>::zeros();
    for i in 0..4 {
        let (x, y) = apply(&ts, &src[i]);
        let (u, v) = apply(&td, &dst[i]);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(2 * i, c)] = r0[c];
            a[(2 * i + 1, c)] = r1[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::DegenerateGeometry("homography SVD failed".into()))?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nine singular values");
    let h = v_t.row(min_idx);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| Error::DegenerateGeometry("singular normalization".into()))?;
    Ok(td_inv * hn * ts)
}

/// Initial pose from the homography `H ∝ [r1 r2 t]` in normalized coordinates.
fn pose_from_homography(h: &Matrix3<f64>, camera_id: u32, tag_id: u32) -> Result<RigidTransform> {
    let h1 = h.column(0).into_owned();
    let h2 = h.column(1).into_owned();
    let h3 = h.column(2).into_owned();
    let norm = 0.5 * (h1.norm() + h2.norm());
    if !(norm > 1e-15) {
        return Err(Error::DegenerateGeometry("homography has vanishing columns".into()));
    }
    let mut scale = 1.0 / norm;
    if h3.z * scale < 0.0 {
        scale = -scale;
    }
    let r1 = h1 * scale;
    let r2 = h2 * scale;
    let r3 = r1.cross(&r2);
    let m = Matrix3::from_columns(&[r1, r2, r3]);
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * v_t;
    }
    Ok(RigidTransform::new(
        Rotation::from_matrix(&r),
        h3 * scale,
        FrameId::Tag(tag_id),
        FrameId::Camera(camera_id),
    ))
}

/// Stacked pixel residuals (projected − detected) and their Jacobian with
/// respect to a left rotation increment `δω` and a translation increment `δt`.
pub fn residuals_and_jacobian(
    k: &CameraIntrinsics,
    marker: &MarkerSpec,
    pose: &RigidTransform,
    obs: &TagObservation,
) -> Result<(SVector<f64, 8>, SMatrix<f64, 8, 6>)> {
    let mut r = Residual::zeros();
    let mut j = Jacobian::zeros();
    for (i, c) in marker.corners().iter().enumerate() {
        let rx = pose.rotation.rotate(c);
        let p = rx + pose.translation;
        if !(p.z > 0.0) {
            return Err(Error::CornerBehindCamera { corner: i, z: p.z });
        }
        let iz = 1.0 / p.z;
        let u = k.fx * p.x * iz + k.cx;
        let v = k.fy * p.y * iz + k.cy;
        r[2 * i] = u - obs.corners[i].u;
        r[2 * i + 1] = v - obs.corners[i].v;

        let dproj = SMatrix::<f64, 2, 3>::new(
            k.fx * iz, 0.0, -k.fx * p.x * iz * iz,
            0.0, k.fy * iz, -k.fy * p.y * iz * iz,
        );
        // d(exp(δω)·R·X)/dδω = -[R·X]×
        let skew = Matrix3::new(0.0, -rx.z, rx.y, rx.z, 0.0, -rx.x, -rx.y, rx.x, 0.0);
        let d_rot = dproj * (-skew);
        j.fixed_view_mut::<2, 3>(2 * i, 0).copy_from(&d_rot);
        j.fixed_view_mut::<2, 3>(2 * i, 3).copy_from(&dproj);
    }
    Ok((r, j))
}

/// Applies a `[δω, δt]` increment.
pub fn retract(pose: &RigidTransform, delta: &Vector6<f64>) -> RigidTransform {
    let dw = Vec3::new(delta[0], delta[1], delta[2]);
    let dt = Vec3::new(delta[3], delta[4], delta[5]);
    RigidTransform { rotation: Rotation::from_scaled_axis(dw) * pose.rotation, translation: pose.translation + dt, ..*pose }
}

struct Refined {
    pose: RigidTransform,
    iterations: usize,
    converged: bool,
}

fn refine(k: &CameraIntrinsics, marker: &MarkerSpec, obs: &TagObservation, start: RigidTransform) -> Refined {
    let cost_of = |pose: &RigidTransform| residuals_and_jacobian(k, marker, pose, obs).map(|(r, j)| (r.norm_squared(), r, j));
    let Ok((mut cost, mut r, mut jac)) = cost_of(&start) else {
        return Refined { pose: start, iterations: 0, converged: false };
    };
    let mut pose = start;
    let mut lambda = LAMBDA_INIT;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let jtj = jac.transpose() * jac;
        let grad = jac.transpose() * r;
        if grad.norm() < GRADIENT_TOLERANCE * 1e-6 {
            break;
        }
        let mut damped = jtj;
        for d in 0..6 {
            damped[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
        }
        let Some(chol) = damped.cholesky() else {
            lambda *= 10.0;
            if lambda > LAMBDA_MAX {
                break;
            }
            continue;
        };
        let delta = chol.solve(&(-grad));
        let candidate = retract(&pose, &delta);
        match cost_of(&candidate) {
            Ok((c, rc, jc)) if c < cost => {
                pose = candidate;
                cost = c;
                r = rc;
                jac = jc;
                lambda = (lambda / 10.0).max(1e-15);
            }
            _ => {
                lambda *= 10.0;
                if lambda > LAMBDA_MAX {
                    break;
                }
            }
        }
        if delta.norm() < STEP_TOLERANCE {
            break;
        }
    }
    let grad = jac.transpose() * r;
    Refined { pose, iterations, converged: grad.norm() < GRADIENT_TOLERANCE }
}

/// Solves the tag pose from one observation: homography initialization
/// followed by damped least-squares refinement of the squared pixel
/// residuals. `converged = false` carries the best pose found.
pub fn solve_pnp_planar(k: &CameraIntrinsics, marker: &MarkerSpec, obs: &TagObservation) -> Result<PoseEstimate> {
    if obs.tag_id != marker.tag_id {
        return Err(Error::DegenerateGeometry(format!(
            "observation of tag {} solved against marker {}",
            obs.tag_id, marker.tag_id
        )));
    }
    check_geometry(obs)?;
    let src = marker.corners().map(|c| (c.x, c.y));
    let dst = obs.corners.map(|p| k.normalize(&p));
    let h = homography(&src, &dst)?;
    let init = pose_from_homography(&h, obs.camera_id, obs.tag_id)?;
    let initial_error = reprojection_error(k, marker, &init, obs)?;
    let refined = refine(k, marker, obs, init);
    let reproj_error = reprojection_error(k, marker, &refined.pose, obs)?;
    Ok(PoseEstimate {
        pose: refined.pose,
        reproj_error,
        initial_error,
        n_points: 4,
        converged: refined.converged,
        iterations: refined.iterations,
        ambiguous: false,
        alternative_error: None,
    })
}

/// Mirrors the marker normal about the line of sight to the tag center:
/// the second local minimum of a planar pose.
pub fn mirrored_pose(pose: &RigidTransform) -> RigidTransform {
    let n = pose.rotation.rotate(&Vec3::z());
    let los = pose.translation.normalize();
    let mirrored = los * (2.0 * n.dot(&los)) - n;
    let align = match nalgebra::UnitQuaternion::rotation_between(&n, &mirrored) {
        Some(q) => Rotation::from_unit(q),
        // Antiparallel: the marker is seen exactly edge-on.
        None => Rotation::from_axis_angle_deg(los, 180.0),
    };
    RigidTransform { rotation: align * pose.rotation, ..*pose }
}

/// Refines the mirrored branch and keeps whichever branch reprojects
/// better, flagging the estimate when the two are within 10 %.
pub fn ambiguity_check(
    estimate: &PoseEstimate,
    k: &CameraIntrinsics,
    marker: &MarkerSpec,
    obs: &TagObservation,
) -> PoseEstimate {
    let alt = refine(k, marker, obs, mirrored_pose(&estimate.pose));
    let Ok(alt_error) = reprojection_error(k, marker, &alt.pose, obs) else {
        return PoseEstimate { alternative_error: None, ..*estimate };
    };
    let (best, other_error) = if alt_error < estimate.reproj_error {
        let swapped = PoseEstimate {
            pose: alt.pose,
            reproj_error: alt_error,
            converged: alt.converged,
            iterations: estimate.iterations + alt.iterations,
            ..*estimate
        };
        (swapped, estimate.reproj_error)
    } else {
        (*estimate, alt_error)
    };
    let hi = best.reproj_error.max(other_error);
    let ambiguous = (other_error - best.reproj_error).abs() <= AMBIGUITY_RATIO * hi;
    PoseEstimate { ambiguous, alternative_error: Some(other_error), ..best }
}

/// `solve_pnp_planar` followed by `ambiguity_check`.
pub fn estimate_tag_pose(k: &CameraIntrinsics, marker: &MarkerSpec, obs: &TagObservation) -> Result<PoseEstimate> {
    let est = solve_pnp_planar(k, marker, obs)?;
    Ok(ambiguity_check(&est, k, marker, obs))
}

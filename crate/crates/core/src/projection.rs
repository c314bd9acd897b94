//! Pinhole projection of camera-frame points and marker corners.
//!
//! `s·[u, v, 1]ᵀ = K·[X, Y, Z]ᵀ` with `s = Z`: the point is divided by its
//! depth before the intrinsics are applied. There is no distortion model
//! and outputs are never rounded.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point2Px, Point3Mm, RigidTransform, Vec3};

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: f64, height: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    /// Square-pixel intrinsics from a horizontal field of view, principal
    /// point at the image center.
    pub fn from_hfov(hfov_deg: f64, width: f64, height: f64) -> Result<Self> {
        let f = (width / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        Self::new(f, f, width / 2.0, height / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.fx, self.fy, self.cx, self.cy, self.width, self.height];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidIntrinsics("non-finite value".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidIntrinsics(format!("fx = {}, fy = {} must be > 0", self.fx, self.fy)));
        }
        if !(self.cx > 0.0 && self.cx < self.width) {
            return Err(Error::InvalidIntrinsics(format!("cx = {} outside (0, {})", self.cx, self.width)));
        }
        if !(self.cy > 0.0 && self.cy < self.height) {
            return Err(Error::InvalidIntrinsics(format!("cy = {} outside (0, {})", self.cy, self.height)));
        }
        Ok(())
    }

    pub fn contains(&self, p: &Point2Px) -> bool {
        p.u >= 0.0 && p.u < self.width && p.v >= 0.0 && p.v < self.height
    }

    /// Pixel → normalized image coordinates `(x/z, y/z)`.
    pub fn normalize(&self, p: &Point2Px) -> (f64, f64) {
        ((p.u - self.cx) / self.fx, (p.v - self.cy) / self.fy)
    }
}

/// Square planar fiducial.
///
/// In the marker frame the tag lies in `z = 0` with `x` to the right and
/// `y` downward as printed; the printed face looks toward `-z`, so a
/// camera sees the face when the marker's `+z` axis points away from it.
/// Corners are ordered counter-clockwise as seen on the printed face,
/// starting top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerSpec {
    pub tag_id: u32,
    pub side_mm: f64,
}

impl MarkerSpec {
    pub const fn new(tag_id: u32, side_mm: f64) -> Self {
        Self { tag_id, side_mm }
    }

    pub fn corners(&self) -> [Vec3; 4] {
        let h = self.side_mm / 2.0;
        [
            Vec3::new(-h, -h, 0.0),
            Vec3::new(-h, h, 0.0),
            Vec3::new(h, h, 0.0),
            Vec3::new(h, -h, 0.0),
        ]
    }

    pub fn corner_points(&self) -> [Point3Mm; 4] {
        self.corners().map(Point3Mm::from)
    }
}

pub fn project_point(k: &CameraIntrinsics, p: &Point3Mm) -> Result<Point2Px> {
    project_vector(k, &p.to_vector())
}

pub(crate) fn project_vector(k: &CameraIntrinsics, p: &Vec3) -> Result<Point2Px> {
    if !(p.z > 0.0) {
        return Err(Error::BehindCamera { z: p.z });
    }
    Ok(Point2Px::new(k.fx * (p.x / p.z) + k.cx, k.fy * (p.y / p.z) + k.cy))
}

/// Projects the four marker corners through `pose` (marker → camera).
pub fn project_marker(k: &CameraIntrinsics, marker: &MarkerSpec, pose: &RigidTransform) -> Result<[Point2Px; 4]> {
    let mut out = [Point2Px::new(0.0, 0.0); 4];
    for (i, c) in marker.corners().iter().enumerate() {
        let p = pose.apply(c);
        out[i] = project_vector(k, &p).map_err(|_| Error::CornerBehindCamera { corner: i, z: p.z })?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{FrameId, Rotation};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(1000.0, 1000.0, 960.0, 640.0, 1920.0, 1280.0).unwrap()
    }

    fn pose(r: Rotation, t: [f64; 3]) -> RigidTransform {
        RigidTransform::new(r, Vec3::from(t), FrameId::Tag(0), FrameId::Camera(0))
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        assert_eq!(project_point(&k(), &Point3Mm::new(0.0, 0.0, 500.0)).unwrap(), Point2Px::new(960.0, 640.0));
    }

    #[test]
    fn lateral_offset() {
        assert_eq!(project_point(&k(), &Point3Mm::new(50.0, 0.0, 500.0)).unwrap(), Point2Px::new(1060.0, 640.0));
    }

    #[test]
    fn behind_camera() {
        assert!(matches!(
            project_point(&k(), &Point3Mm::new(0.0, 0.0, -10.0)),
            Err(Error::BehindCamera { .. })
        ));
        assert!(project_point(&k(), &Point3Mm::new(0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn fronto_parallel_marker_corners() {
        let m = MarkerSpec::new(0, 24.0);
        let px = project_marker(&k(), &m, &pose(Rotation::identity(), [0.0, 0.0, 600.0])).unwrap();
        let expected = [(940.0, 620.0), (940.0, 660.0), (980.0, 660.0), (980.0, 620.0)];
        for (p, (u, v)) in px.iter().zip(expected) {
            assert_abs_diff_eq!(p.u, u, epsilon = 1e-9);
            assert_abs_diff_eq!(p.v, v, epsilon = 1e-9);
        }
    }

    #[test]
    fn corner_order_follows_marker_indexing() {
        let m = MarkerSpec::new(0, 24.0);
        let t = pose(Rotation::rot_z_deg(180.0), [0.0, 0.0, 600.0]);
        let px = project_marker(&k(), &m, &t).unwrap();
        // Corner 0 (top-left on the tag) now lands bottom-right in the image.
        assert_abs_diff_eq!(px[0].u, 980.0, epsilon = 1e-9);
        assert_abs_diff_eq!(px[0].v, 660.0, epsilon = 1e-9);
        for (i, c) in m.corners().iter().enumerate() {
            assert_eq!(px[i], project_vector(&k(), &t.apply(c)).unwrap());
        }
    }

    #[test]
    fn marker_behind_camera_names_corner() {
        let m = MarkerSpec::new(0, 24.0);
        let err = project_marker(&k(), &m, &pose(Rotation::identity(), [0.0, 0.0, -600.0])).unwrap_err();
        assert!(matches!(err, Error::CornerBehindCamera { corner: 0, .. }));
    }

    #[test]
    fn side_length_scales_with_depth() {
        let m = MarkerSpec::new(0, 24.0);
        for z in [530.0, 700.0, 990.0] {
            let px = project_marker(&k(), &m, &pose(Rotation::identity(), [0.0, 0.0, z])).unwrap();
            assert_abs_diff_eq!(px[0].distance(&px[1]), 1000.0 * 24.0 / z, epsilon = 1e-9);
            assert_abs_diff_eq!(px[1].distance(&px[2]), 1000.0 * 24.0 / z, epsilon = 1e-9);
        }
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 2.0, 2.0).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 3.0, 1.0, 2.0, 2.0).is_err());
        let k = CameraIntrinsics::from_hfov(65.0, 1920.0, 1280.0).unwrap();
        assert_abs_diff_eq!(k.fx, 1506.898, epsilon = 1e-3);
    }

    proptest! {
        #[test]
        fn ray_scale_invariance(x in -500.0..500.0f64, y in -500.0..500.0f64, z in 1.0..2000.0f64, s in 0.01..100.0f64) {
            let a = project_point(&k(), &Point3Mm::new(x, y, z)).unwrap();
            let b = project_point(&k(), &Point3Mm::new(s * x, s * y, s * z)).unwrap();
            prop_assert!(a.distance(&b) < 1e-9);
        }
    }
}

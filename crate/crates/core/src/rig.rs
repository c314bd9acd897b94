//! Rig configuration, world anchoring from head markers, head/coil pose
//! assembly and stimulation-target localization.
//!
//! Transform conventions (see [`crate::geometry`]):
//! - camera extrinsic: `Camera(j) -> World` (pose of the camera in the world)
//! - marker mount: `Tag(id) -> Head` or `Tag(id) -> Coil`
//! - head pose: `Head -> World`, coil pose: `Coil -> World`
//!
//! A head candidate from camera `j` seeing head tag `i` is
//! `extrinsic_j ∘ (tag_i -> camera_j) ∘ mount_i⁻¹`.

use std::collections::HashSet;

use nalgebra::Matrix3;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{
    ambiguity_policy, fuse_positions, fuse_rotations, propagate_sigma, rotation_weight, PositionEstimate,
    TranslationSigma,
};
use crate::geometry::{FrameId, Point3Mm, RigidTransform, Rotation, Vec3};
use crate::pose::PoseEstimate;
use crate::projection::{CameraIntrinsics, MarkerSpec};

pub const PAPER_DEFAULT_PRESET: &str = "paper-default";
pub const DEFAULT_COIL_OFFSET_MM: f64 = 10.0;
pub const DEFAULT_TAG_SIDE_MM: f64 = 24.0;
/// Cameras must agree on a frame timestamp within this window.
pub const SYNC_TOLERANCE_US: u64 = 10_000;

/// Head-frame center of the sphere used by the default layout.
pub const HEAD_SPHERE_CENTER: [f64; 3] = [0.0, -20.0, 0.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    pub id: u32,
    pub intrinsics: CameraIntrinsics,
    /// `Camera(id) -> World`.
    pub extrinsic: RigidTransform,
}

impl CameraConfig {
    pub fn center(&self) -> Vec3 {
        self.extrinsic.translation
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MountedMarker {
    pub marker: MarkerSpec,
    /// `Tag(id) -> Head` or `Tag(id) -> Coil`.
    pub mount: RigidTransform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarkerRole {
    Head,
    Coil,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigConfig {
    pub cameras: Vec<CameraConfig>,
    pub head_markers: Vec<MountedMarker>,
    pub coil_marker: MountedMarker,
    /// Target depth below the coil tag, along coil `-z`.
    pub coil_offset_mm: f64,
}

/// Camera pose looking from `eye` at `target` with image `y` pointing
/// away from `up`.
pub fn look_at(camera_id: u32, eye: Vec3, target: Vec3, up: Vec3) -> RigidTransform {
    let z = (target - eye).normalize();
    let x = z.cross(&up).normalize();
    let y = z.cross(&x);
    let r = Matrix3::from_columns(&[x, y, z]);
    RigidTransform::new(Rotation::from_matrix(&r), eye, FrameId::Camera(camera_id), FrameId::World)
}

/// Mount transform for a tag whose printed face looks along `outward`,
/// with the tag's `y` axis as close to `-up` as possible.
pub fn facing_mount(tag_id: u32, position: Vec3, outward: Vec3, up: Vec3, body: FrameId) -> RigidTransform {
    let z = -outward.normalize();
    let down = -up;
    let y = (down - z * down.dot(&z)).normalize();
    let x = y.cross(&z);
    let r = Matrix3::from_columns(&[x, y, z]);
    RigidTransform::new(Rotation::from_matrix(&r), position, FrameId::Tag(tag_id), body)
}

impl RigConfig {
    /// Three 1920x1280 cameras with a 65° horizontal field of view: one
    /// frontal and two lateral at ±60° azimuth, 700 mm out and 200 mm above
    /// the head center, all aimed at it. Four 24 mm head tags (tags 1-4:
    /// right cheek, left cheek, forehead, back) and the coil tag 0.
    ///
    /// World frame: origin at the resting head-sphere center, x toward the
    /// subject's right, y anterior, z superior. The head frame has the same
    /// axes with its origin at the centroid of the four mount points.
    pub fn paper_default() -> Self {
        let k = CameraIntrinsics::from_hfov(65.0, 1920.0, 1280.0).expect("valid preset intrinsics");
        let up = Vec3::z();
        let cameras = [0.0f64, 60.0, -60.0]
            .iter()
            .enumerate()
            .map(|(j, az)| {
                let az = az.to_radians();
                let eye = Vec3::new(700.0 * az.sin(), 700.0 * az.cos(), 200.0);
                CameraConfig { id: j as u32, intrinsics: k, extrinsic: look_at(j as u32, eye, Vec3::zeros(), up) }
            })
            .collect();
        let center = Vec3::from(HEAD_SPHERE_CENTER);
        let head_markers = [
            (1, Vec3::new(72.0, 30.0, -42.0)),
            (2, Vec3::new(-72.0, 30.0, -42.0)),
            (3, Vec3::new(0.0, 62.0, 48.0)),
            (4, Vec3::new(0.0, -122.0, 36.0)),
        ]
        .into_iter()
        .map(|(id, p)| MountedMarker {
            marker: MarkerSpec::new(id, DEFAULT_TAG_SIDE_MM),
            mount: facing_mount(id, p, p - center, up, FrameId::Head),
        })
        .collect();
        let coil_marker = MountedMarker {
            marker: MarkerSpec::new(0, DEFAULT_TAG_SIDE_MM),
            mount: RigidTransform::new(Rotation::rot_x_deg(180.0), Vec3::zeros(), FrameId::Tag(0), FrameId::Coil),
        };
        Self { cameras, head_markers, coil_marker, coil_offset_mm: DEFAULT_COIL_OFFSET_MM }
    }

    /// Resting `Head -> World` pose for the default layout.
    pub fn default_head_pose() -> RigidTransform {
        RigidTransform::new(Rotation::identity(), -Vec3::from(HEAD_SPHERE_CENTER), FrameId::Head, FrameId::World)
    }

    pub fn camera(&self, id: u32) -> Option<&CameraConfig> {
        self.cameras.iter().find(|c| c.id == id)
    }

    pub fn marker(&self, tag_id: u32) -> Option<(MarkerRole, &MountedMarker)> {
        if self.coil_marker.marker.tag_id == tag_id {
            return Some((MarkerRole::Coil, &self.coil_marker));
        }
        self.head_markers.iter().find(|m| m.marker.tag_id == tag_id).map(|m| (MarkerRole::Head, m))
    }

    pub fn all_markers(&self) -> impl Iterator<Item = (MarkerRole, &MountedMarker)> {
        self.head_markers.iter().map(|m| (MarkerRole::Head, m)).chain(std::iter::once((MarkerRole::Coil, &self.coil_marker)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(config_err("cameras", "at least one camera is required"));
        }
        let mut ids = HashSet::new();
        for (i, c) in self.cameras.iter().enumerate() {
            if !ids.insert(c.id) {
                return Err(Error::DuplicateCameraId(c.id));
            }
            c.intrinsics.validate().map_err(|e| config_err(&format!("cameras[{i}]"), &e.to_string()))?;
            if c.extrinsic.from != FrameId::Camera(c.id) || c.extrinsic.to != FrameId::World {
                return Err(config_err(&format!("cameras[{i}].extrinsic"), "must map the camera frame into the world"));
            }
        }
        if self.head_markers.is_empty() {
            return Err(config_err("head_markers", "at least one head marker is required"));
        }
        let mut tags = HashSet::new();
        for (role, m) in self.all_markers() {
            if !tags.insert(m.marker.tag_id) {
                return Err(Error::DuplicateTagId(m.marker.tag_id));
            }
            let body = match role {
                MarkerRole::Head => FrameId::Head,
                MarkerRole::Coil => FrameId::Coil,
            };
            if !(m.marker.side_mm > 0.0 && m.marker.side_mm.is_finite()) {
                return Err(config_err(&format!("tag {}.side_mm", m.marker.tag_id), "must be positive"));
            }
            if m.mount.from != FrameId::Tag(m.marker.tag_id) || m.mount.to != body {
                return Err(config_err(&format!("tag {}.mount", m.marker.tag_id), "frame labels do not match the marker"));
            }
        }
        if !(self.coil_offset_mm.is_finite() && self.coil_offset_mm >= 0.0) {
            return Err(config_err("coil_offset_mm", "must be a non-negative number"));
        }
        Ok(())
    }

    /// Parses and validates a rig document (see [`RigDocument`]).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: RigDocument = parse_toml(text)?;
        doc.into_config()
    }

    pub fn to_document(&self) -> RigDocument {
        RigDocument {
            preset: None,
            coil_offset_mm: Some(self.coil_offset_mm),
            cameras: Some(
                self.cameras
                    .iter()
                    .map(|c| CameraDoc {
                        id: c.id,
                        fx: c.intrinsics.fx,
                        fy: c.intrinsics.fy,
                        cx: c.intrinsics.cx,
                        cy: c.intrinsics.cy,
                        width: c.intrinsics.width,
                        height: c.intrinsics.height,
                        extrinsic: c.extrinsic.to_row_major().to_vec(),
                    })
                    .collect(),
            ),
            head_markers: Some(self.head_markers.iter().map(MarkerDoc::from_mounted).collect()),
            coil_marker: Some(MarkerDoc::from_mounted(&self.coil_marker)),
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&self.to_document()).expect("rig documents always serialize")
    }
}

/// Alias matching the operation name used across the crate.
pub fn load_rig_config(text: &str) -> Result<RigConfig> {
    RigConfig::from_toml_str(text)
}

fn config_err(path: &str, message: &str) -> Error {
    Error::Config { path: path.to_string(), message: message.to_string() }
}

/// Deserializes a TOML document, reporting the failing field path.
pub fn parse_toml<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = toml::Deserializer::parse(text).map_err(|e| config_err("<document>", e.message()))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let message = e.into_inner().message().to_string();
        config_err(&path, &message)
    })
}

/// On-disk rig document.
///
/// ```toml
/// preset = "paper-default"   # optional; fills every section not given
/// coil_offset_mm = 10.0
///
/// [[cameras]]
/// id = 0
/// fx = 1506.9
/// fy = 1506.9
/// cx = 960.0
/// cy = 640.0
/// width = 1920
/// height = 1280
/// extrinsic = [ ...16 values, row-major, camera -> world... ]
///
/// [[head_markers]]
/// tag_id = 1
/// side_mm = 24.0
/// mount = [ ...16 values, row-major, tag -> head... ]
///
/// [coil_marker]
/// tag_id = 0
/// side_mm = 24.0
/// mount = [ ...16 values, row-major, tag -> coil... ]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coil_offset_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cameras: Option<Vec<CameraDoc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_markers: Option<Vec<MarkerDoc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coil_marker: Option<MarkerDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraDoc {
    pub id: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
    pub extrinsic: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkerDoc {
    pub tag_id: u32,
    pub side_mm: f64,
    pub mount: Vec<f64>,
}

impl MarkerDoc {
    fn from_mounted(m: &MountedMarker) -> Self {
        Self { tag_id: m.marker.tag_id, side_mm: m.marker.side_mm, mount: m.mount.to_row_major().to_vec() }
    }

    fn into_mounted(self, path: &str, body: FrameId) -> Result<MountedMarker> {
        let mount = RigidTransform::from_row_major(&self.mount, FrameId::Tag(self.tag_id), body)
            .map_err(|reason| config_err(&format!("{path}.mount"), &reason))?;
        Ok(MountedMarker { marker: MarkerSpec::new(self.tag_id, self.side_mm), mount })
    }
}

impl RigDocument {
    pub fn into_config(self) -> Result<RigConfig> {
        let base = match self.preset.as_deref() {
            None => None,
            Some(PAPER_DEFAULT_PRESET) => Some(RigConfig::paper_default()),
            Some(other) => return Err(config_err("preset", &format!("unknown preset `{other}`"))),
        };
        let cameras = match (self.cameras, &base) {
            (Some(docs), _) => docs
                .into_iter()
                .enumerate()
                .map(|(i, c)| {
                    let path = format!("cameras[{i}]");
                    let intrinsics = CameraIntrinsics::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height)
                        .map_err(|e| config_err(&path, &e.to_string()))?;
                    let extrinsic = RigidTransform::from_row_major(&c.extrinsic, FrameId::Camera(c.id), FrameId::World)
                        .map_err(|reason| Error::NonInvertibleExtrinsic { path: format!("{path}.extrinsic"), reason })?;
                    Ok(CameraConfig { id: c.id, intrinsics, extrinsic })
                })
                .collect::<Result<Vec<_>>>()?,
            (None, Some(b)) => b.cameras.clone(),
            (None, None) => return Err(config_err("cameras", "missing field")),
        };
        let head_markers = match (self.head_markers, &base) {
            (Some(docs), _) => docs
                .into_iter()
                .enumerate()
                .map(|(i, m)| m.into_mounted(&format!("head_markers[{i}]"), FrameId::Head))
                .collect::<Result<Vec<_>>>()?,
            (None, Some(b)) => b.head_markers.clone(),
            (None, None) => return Err(config_err("head_markers", "missing field")),
        };
        let coil_marker = match (self.coil_marker, &base) {
            (Some(doc), _) => doc.into_mounted("coil_marker", FrameId::Coil)?,
            (None, Some(b)) => b.coil_marker,
            (None, None) => return Err(config_err("coil_marker", "missing field")),
        };
        let coil_offset_mm = self.coil_offset_mm.unwrap_or(DEFAULT_COIL_OFFSET_MM);
        let rig = RigConfig { cameras, head_markers, coil_marker, coil_offset_mm };
        rig.validate()?;
        Ok(rig)
    }
}

/// One solved tag in one camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TagMeasurement {
    pub camera_id: u32,
    pub tag_id: u32,
    pub estimate: PoseEstimate,
}

impl TagMeasurement {
    /// Camera-frame translation sigmas of this tag.
    pub fn sigma(&self, k: &CameraIntrinsics) -> Result<TranslationSigma> {
        propagate_sigma(self.estimate.reproj_error, self.estimate.pose.translation.z, k)
    }
}

/// Fused rigid-body pose with per-axis world sigmas of its origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyPose {
    pub pose: RigidTransform,
    pub sigma: TranslationSigma,
    pub contributors: usize,
}

fn body_pose(per_tag: &[TagMeasurement], rig: &RigConfig, role: MarkerRole, body: FrameId) -> Result<Option<BodyPose>> {
    let mut candidates = Vec::new();
    for m in per_tag {
        let Some((r, mounted)) = rig.marker(m.tag_id) else { continue };
        if r != role {
            continue;
        }
        let Some(camera) = rig.camera(m.camera_id) else { continue };
        let tag_to_camera = m.estimate.pose;
        let candidate = camera.extrinsic.compose(&tag_to_camera)?.compose(&mounted.mount.inverse())?;
        let sigma = m.sigma(&camera.intrinsics)?.rotated(&camera.extrinsic.rotation);
        candidates.push((m, candidate, sigma));
    }
    if candidates.is_empty() {
        return Ok(None);
    }
    let flags: Vec<bool> = candidates.iter().map(|(m, _, _)| m.estimate.ambiguous).collect();
    let mut positions = Vec::new();
    let mut rotations = Vec::new();
    for ((m, candidate, sigma), action) in candidates.iter().zip(ambiguity_policy(&flags)) {
        let Some(factor) = action else { continue };
        let sigma = sigma.scaled(factor);
        positions.push(PositionEstimate { camera_id: m.camera_id, tag_id: m.tag_id, position: candidate.translation_point(), sigma });
        rotations.push((candidate.rotation, rotation_weight(&sigma)));
    }
    let (position, sigma) = fuse_positions(&positions)?;
    let rotation = fuse_rotations(&rotations)?;
    Ok(Some(BodyPose {
        pose: RigidTransform::new(rotation, position.to_vector(), body, FrameId::World),
        sigma,
        contributors: positions.len(),
    }))
}

/// Fused `Head -> World` pose from every visible head tag.
pub fn head_pose_from_markers(per_tag: &[TagMeasurement], rig: &RigConfig) -> Result<BodyPose> {
    body_pose(per_tag, rig, MarkerRole::Head, FrameId::Head)?.ok_or(Error::NoHeadMarkerVisible)
}

/// Fused `Coil -> World` pose from the coil tag.
pub fn coil_pose(per_tag: &[TagMeasurement], rig: &RigConfig) -> Result<BodyPose> {
    body_pose(per_tag, rig, MarkerRole::Coil, FrameId::Coil)?.ok_or(Error::CoilNotVisible)
}

/// Stimulation target in head coordinates: the point `coil_offset_mm`
/// below the coil origin along coil `-z`.
pub fn target_point(head: &RigidTransform, coil: &RigidTransform, rig: &RigConfig) -> Result<Point3Mm> {
    target_point_with_offset(head, coil, rig.coil_offset_mm)
}

pub fn target_point_with_offset(head: &RigidTransform, coil: &RigidTransform, offset_mm: f64) -> Result<Point3Mm> {
    if head.from != FrameId::Head {
        return Err(Error::FrameMismatch { expected: FrameId::Head, found: head.from });
    }
    if coil.from != FrameId::Coil {
        return Err(Error::FrameMismatch { expected: FrameId::Coil, found: coil.from });
    }
    let coil_in_head = head.inverse().compose(coil)?;
    Ok(coil_in_head.apply(&Vec3::new(0.0, 0.0, -offset_mm)).into())
}

//! Synthetic rig: ground-truth head/coil motion rendered into noisy
//! corner observations.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`), seeded with
//! `seed_from_u64(seed)` and `set_stream(stream)`; corner noise is
//! `noise_px · N(0, 1)` drawn with `rand_distr::StandardNormal`. Eight
//! normals are drawn for every (camera, tag) pair every frame, visible or
//! not, so occlusions never shift the random stream of other pairs.
//!
//! Trajectories are sample-and-hold: the pose at time `t` is the last
//! keyframe at or before `t` (the first keyframe before that).

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FrameId, Point2Px, Point3Mm, RigidTransform, Rotation, Vec3};
use crate::pose::TagObservation;
use crate::projection::project_marker;
use crate::rig::{parse_toml, target_point, RigConfig, RigDocument, HEAD_SPHERE_CENTER};

pub const DEFAULT_NOISE_PX: f64 = 0.3;
pub const DEFAULT_FRAME_RATE_HZ: f64 = 30.0;
/// Tags seen at a larger angle from their face normal are not detected.
pub const DEFAULT_MAX_INCIDENCE_DEG: f64 = 75.0;
pub const PRECISION_DEPTHS_MM: [f64; 5] = [530.0, 645.0, 760.0, 875.0, 990.0];
pub const PRECISION_FRAMES: u64 = 100;
pub const PRECISION_TILT_DEG: f64 = 20.0;
pub const LOCALIZATION_RADIUS_MM: f64 = 90.0;
pub const LOCALIZATION_ELEVATIONS_DEG: [f64; 3] = [0.0, 30.0, 60.0];
pub const LOCALIZATION_AZIMUTHS_DEG: [f64; 5] = [-60.0, -30.0, 0.0, 30.0, 60.0];
pub const LOCALIZATION_FRAMES_PER_TARGET: u64 = 100;
pub const MAX_NOISE_PX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedPose {
    pub t_us: u64,
    pub pose: RigidTransform,
}

/// A (camera, tag) pair hidden over `[start_us, end_us]`; `tag_id = None`
/// hides the whole camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Occlusion {
    pub camera_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag_id: Option<u32>,
    pub start_us: u64,
    pub end_us: u64,
}

impl Occlusion {
    pub fn hides(&self, camera_id: u32, tag_id: u32, t_us: u64) -> bool {
        self.camera_id == camera_id
            && self.tag_id.is_none_or(|t| t == tag_id)
            && (self.start_us..=self.end_us).contains(&t_us)
    }

    pub fn whole_camera(camera_id: u32) -> Self {
        Self { camera_id, tag_id: None, start_us: 0, end_us: u64::MAX }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub rig: RigConfig,
    /// `Head -> World` keyframes.
    pub head_trajectory: Vec<TimedPose>,
    /// `Coil -> World` keyframes.
    pub coil_trajectory: Vec<TimedPose>,
    pub noise_px: f64,
    pub occlusions: Vec<Occlusion>,
    pub frame_rate_hz: f64,
    /// `None` runs forever.
    pub frames: Option<u64>,
    pub seed: u64,
    pub stream: u64,
    pub max_incidence_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub head: RigidTransform,
    pub coil: RigidTransform,
    pub target_head: Point3Mm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimFrame {
    pub index: u64,
    pub timestamp_us: u64,
    pub observations: Vec<TagObservation>,
    pub truth: GroundTruth,
}

fn sample_hold(trajectory: &[TimedPose], t_us: u64) -> RigidTransform {
    let idx = trajectory.partition_point(|k| k.t_us <= t_us);
    trajectory[idx.saturating_sub(1)].pose
}

impl Scenario {
    /// Static scene on the default rig.
    pub fn fixed(name: &str, rig: RigConfig, head: RigidTransform, coil: RigidTransform, frames: u64) -> Self {
        Self {
            name: name.to_string(),
            rig,
            head_trajectory: vec![TimedPose { t_us: 0, pose: head }],
            coil_trajectory: vec![TimedPose { t_us: 0, pose: coil }],
            noise_px: DEFAULT_NOISE_PX,
            occlusions: Vec::new(),
            frame_rate_hz: DEFAULT_FRAME_RATE_HZ,
            frames: Some(frames),
            seed: 0,
            stream: 0,
            max_incidence_deg: DEFAULT_MAX_INCIDENCE_DEG,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_noise(mut self, noise_px: f64) -> Self {
        self.noise_px = noise_px;
        self
    }

    pub fn with_occlusion(mut self, occlusion: Occlusion) -> Self {
        self.occlusions.push(occlusion);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.rig.validate()?;
        for (name, traj, body) in [
            ("head_trajectory", &self.head_trajectory, FrameId::Head),
            ("coil_trajectory", &self.coil_trajectory, FrameId::Coil),
        ] {
            if traj.is_empty() {
                return Err(scenario_err(name, "needs at least one keyframe"));
            }
            if traj.windows(2).any(|w| w[0].t_us > w[1].t_us) {
                return Err(scenario_err(name, "keyframes must be time-sorted"));
            }
            if traj.iter().any(|k| k.pose.from != body || k.pose.to != FrameId::World) {
                return Err(scenario_err(name, "poses must map the body frame into the world"));
            }
        }
        if !(self.noise_px >= 0.0 && self.noise_px.is_finite()) {
            return Err(scenario_err("noise_px", "must be >= 0"));
        }
        if !(self.frame_rate_hz > 0.0 && self.frame_rate_hz.is_finite()) {
            return Err(scenario_err("frame_rate_hz", "must be > 0"));
        }
        if !(self.max_incidence_deg > 0.0 && self.max_incidence_deg <= 90.0) {
            return Err(scenario_err("max_incidence_deg", "must be in (0, 90]"));
        }
        Ok(())
    }

    pub fn timestamp_us(&self, index: u64) -> u64 {
        (index as f64 * 1e6 / self.frame_rate_hz).round() as u64
    }

    pub fn frame_period_us(&self) -> u64 {
        (1e6 / self.frame_rate_hz).round() as u64
    }

    pub fn truth_at(&self, t_us: u64) -> (RigidTransform, RigidTransform) {
        (sample_hold(&self.head_trajectory, t_us), sample_hold(&self.coil_trajectory, t_us))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: ScenarioDocument = parse_toml(text)?;
        doc.into_scenario()
    }

    pub fn to_document(&self) -> ScenarioDocument {
        let key = |k: &TimedPose| KeyframeDoc { t_us: k.t_us, pose: k.pose.to_row_major().to_vec() };
        ScenarioDocument {
            name: Some(self.name.clone()),
            preset: None,
            position: None,
            seed: Some(self.seed),
            stream: Some(self.stream),
            noise_px: Some(self.noise_px),
            frame_rate_hz: Some(self.frame_rate_hz),
            frames: self.frames,
            max_incidence_deg: Some(self.max_incidence_deg),
            rig: Some(self.rig.to_document()),
            head_trajectory: Some(self.head_trajectory.iter().map(key).collect()),
            coil_trajectory: Some(self.coil_trajectory.iter().map(key).collect()),
            occlusions: Some(self.occlusions.clone()),
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&self.to_document()).expect("scenario documents always serialize")
    }
}

fn scenario_err(path: &str, message: &str) -> Error {
    Error::Config { path: path.to_string(), message: message.to_string() }
}

/// On-disk scenario: same TOML dialect as the rig document, with the rig
/// inline under `[rig]` (defaults to the `paper-default` preset).
///
/// `preset` is one of `precision-study` (pick `position` 0-4),
/// `localization-study` or `guidance-demo`; explicit fields override it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_px: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_rate_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_incidence_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occlusions: Option<Vec<Occlusion>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_trajectory: Option<Vec<KeyframeDoc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coil_trajectory: Option<Vec<KeyframeDoc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rig: Option<RigDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyframeDoc {
    pub t_us: u64,
    /// Row-major 4x4, body -> world.
    pub pose: Vec<f64>,
}

impl ScenarioDocument {
    pub fn into_scenario(self) -> Result<Scenario> {
        let rig = match self.rig {
            Some(doc) => doc.into_config()?,
            None => RigConfig::paper_default(),
        };
        let mut scenario = match self.preset.as_deref() {
            None => Scenario {
                rig: rig.clone(),
                ..Scenario::fixed("custom", rig.clone(), RigConfig::default_head_pose(), default_coil_pose(), 1)
            },
            Some("precision-study") => {
                let position = self.position.unwrap_or(0);
                let mut all = preset_precision_study();
                if position >= all.len() {
                    return Err(scenario_err("position", "precision-study has positions 0-4"));
                }
                all.swap_remove(position)
            }
            Some("localization-study") => preset_localization_study(),
            Some("guidance-demo") => preset_guidance_demo(),
            Some(other) => return Err(scenario_err("preset", &format!("unknown scenario preset `{other}`"))),
        };
        if self.preset.is_some() {
            let (head, coil) = (scenario.head_trajectory.clone(), scenario.coil_trajectory.clone());
            scenario = Scenario { rig, head_trajectory: head, coil_trajectory: coil, ..scenario };
        }
        let keys = |docs: Vec<KeyframeDoc>, name: &str, body: FrameId| {
            docs.into_iter()
                .enumerate()
                .map(|(i, k)| {
                    RigidTransform::from_row_major(&k.pose, body, FrameId::World)
                        .map(|pose| TimedPose { t_us: k.t_us, pose })
                        .map_err(|m| scenario_err(&format!("{name}[{i}].pose"), &m))
                })
                .collect::<Result<Vec<_>>>()
        };
        if let Some(docs) = self.head_trajectory {
            scenario.head_trajectory = keys(docs, "head_trajectory", FrameId::Head)?;
        }
        if let Some(docs) = self.coil_trajectory {
            scenario.coil_trajectory = keys(docs, "coil_trajectory", FrameId::Coil)?;
        }
        if let Some(name) = self.name {
            scenario.name = name;
        }
        if let Some(v) = self.seed {
            scenario.seed = v;
        }
        if let Some(v) = self.stream {
            scenario.stream = v;
        }
        if let Some(v) = self.noise_px {
            scenario.noise_px = v;
        }
        if let Some(v) = self.frame_rate_hz {
            scenario.frame_rate_hz = v;
        }
        if let Some(v) = self.frames {
            scenario.frames = Some(v);
        }
        if let Some(v) = self.max_incidence_deg {
            scenario.max_incidence_deg = v;
        }
        if let Some(v) = self.occlusions {
            scenario.occlusions = v;
        }
        scenario.validate()?;
        Ok(scenario)
    }
}

/// Coil 10 mm above the vertex of the default head, facing up.
fn default_coil_pose() -> RigidTransform {
    let head = RigConfig::default_head_pose();
    let dir = Vec3::new(0.0, 0.4, 1.0).normalize();
    head.compose(&coil_on_sphere(dir, LOCALIZATION_RADIUS_MM, crate::rig::DEFAULT_COIL_OFFSET_MM))
        .expect("head -> world chains with coil -> head")
}

/// `Coil -> Head` pose for a coil whose target lies on the head sphere in
/// direction `dir`, with coil `-z` pointing at the sphere center.
pub fn coil_on_sphere(dir: Vec3, radius_mm: f64, offset_mm: f64) -> RigidTransform {
    let z = dir.normalize();
    let up = Vec3::z();
    let mut y = up - z * up.dot(&z);
    if y.norm() < 1e-9 {
        y = Vec3::y();
    }
    let y = y.normalize();
    let x = y.cross(&z);
    let r = nalgebra::Matrix3::from_columns(&[x, y, z]);
    let origin = Vec3::from(HEAD_SPHERE_CENTER) + z * (radius_mm + offset_mm);
    RigidTransform::new(Rotation::from_matrix(&r), origin, FrameId::Coil, FrameId::Head)
}

/// Five static coil placements on camera 0's optical axis at depths
/// 530-990 mm, facing the camera with a 20° tilt; 100 frames each at
/// 0.3 px noise. Scenario `i` uses generator stream `i`.
pub fn preset_precision_study() -> Vec<Scenario> {
    let rig = RigConfig::paper_default();
    let cam = rig.cameras[0];
    let r_cam = cam.extrinsic.rotation;
    let axis = r_cam.rotate(&Vec3::z());
    let facing = r_cam * Rotation::rot_x_deg(180.0) * Rotation::rot_x_deg(PRECISION_TILT_DEG);
    PRECISION_DEPTHS_MM
        .iter()
        .enumerate()
        .map(|(i, &depth)| {
            let coil = RigidTransform::new(facing, cam.center() + axis * depth, FrameId::Coil, FrameId::World);
            let mut s = Scenario::fixed(
                &format!("precision-{depth:.0}mm"),
                rig.clone(),
                RigConfig::default_head_pose(),
                coil,
                PRECISION_FRAMES,
            );
            s.stream = i as u64;
            s
        })
        .collect()
}

/// Head-frame target points of the localization study, in placement order.
pub fn localization_targets() -> Vec<Vec3> {
    localization_directions()
        .into_iter()
        .map(|d| Vec3::from(HEAD_SPHERE_CENTER) + d * LOCALIZATION_RADIUS_MM)
        .collect()
}

fn localization_directions() -> Vec<Vec3> {
    let mut dirs = Vec::new();
    for el in LOCALIZATION_ELEVATIONS_DEG {
        for az in LOCALIZATION_AZIMUTHS_DEG {
            let (el, az) = (el.to_radians(), az.to_radians());
            dirs.push(Vec3::new(el.cos() * az.sin(), el.cos() * az.cos(), el.sin()));
        }
    }
    dirs
}

/// Fifteen coil placements on a 90 mm hemisphere (3 elevations × 5
/// azimuths over the front of the head), static head, 100 frames each.
pub fn preset_localization_study() -> Scenario {
    let rig = RigConfig::paper_default();
    let head = RigConfig::default_head_pose();
    let period = 1e6 / DEFAULT_FRAME_RATE_HZ;
    let coil_trajectory = localization_directions()
        .into_iter()
        .enumerate()
        .map(|(i, dir)| {
            let coil_in_head = coil_on_sphere(dir, LOCALIZATION_RADIUS_MM, rig.coil_offset_mm);
            let t_us = ((i as u64 * LOCALIZATION_FRAMES_PER_TARGET) as f64 * period).round() as u64;
            TimedPose { t_us, pose: head.compose(&coil_in_head).expect("chain") }
        })
        .collect::<Vec<_>>();
    let frames = coil_trajectory.len() as u64 * LOCALIZATION_FRAMES_PER_TARGET;
    Scenario {
        coil_trajectory,
        ..Scenario::fixed("localization-study", rig, head, default_coil_pose(), frames)
    }
}

impl Scenario {
    /// Frame index range of placement `i` in the localization study.
    pub fn localization_placement(index: u64) -> usize {
        (index / LOCALIZATION_FRAMES_PER_TARGET) as usize
    }
}

/// Endless static scene for interactive steering.
pub fn preset_guidance_demo() -> Scenario {
    let mut s = Scenario::fixed(
        "guidance-demo",
        RigConfig::paper_default(),
        RigConfig::default_head_pose(),
        default_coil_pose(),
        0,
    );
    s.frames = None;
    s
}

/// Frame generator. Supports live mutation between frames (coil nudges,
/// noise changes) for the steering server.
pub struct Simulator {
    scenario: Scenario,
    rng: ChaCha8Rng,
    next_index: u64,
    /// Accumulated `Coil -> Coil` adjustment applied on top of the trajectory.
    coil_adjust: RigidTransform,
}

impl Simulator {
    pub fn new(scenario: Scenario) -> Result<Self> {
        scenario.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        rng.set_stream(scenario.stream);
        Ok(Self { scenario, rng, next_index: 0, coil_adjust: RigidTransform::identity(FrameId::Coil, FrameId::Coil) })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    /// Moves the coil by `delta`, expressed in the coil's own frame.
    pub fn nudge_coil(&mut self, delta: &RigidTransform) -> Result<()> {
        self.coil_adjust = self.coil_adjust.compose(delta)?;
        Ok(())
    }

    pub fn set_noise(&mut self, noise_px: f64) -> Result<()> {
        if !(0.0..=MAX_NOISE_PX).contains(&noise_px) {
            return Err(scenario_err("noise_px", &format!("must be in [0, {MAX_NOISE_PX}]")));
        }
        self.scenario.noise_px = noise_px;
        Ok(())
    }

    /// Ground truth the next generated frame will use.
    pub fn upcoming_truth(&self) -> GroundTruth {
        self.truth(self.scenario.timestamp_us(self.next_index))
    }

    fn truth(&self, t_us: u64) -> GroundTruth {
        let (head, coil) = self.scenario.truth_at(t_us);
        let coil = coil.compose(&self.coil_adjust).expect("coil adjust chains");
        let target_head = target_point(&head, &coil, &self.scenario.rig).expect("head/coil frames");
        GroundTruth { head, coil, target_head }
    }

    pub fn next_frame(&mut self) -> Option<SimFrame> {
        let index = self.next_index;
        if self.scenario.frames.is_some_and(|n| index >= n) {
            return None;
        }
        self.next_index += 1;
        let timestamp_us = self.scenario.timestamp_us(index);
        let truth = self.truth(timestamp_us);
        let s = &self.scenario;
        let cos_max = s.max_incidence_deg.to_radians().cos();
        let mut cameras: Vec<_> = s.rig.cameras.iter().collect();
        cameras.sort_by_key(|c| c.id);
        let mut markers: Vec<_> = s.rig.all_markers().collect();
        markers.sort_by_key(|(_, m)| m.marker.tag_id);

        let mut observations = Vec::new();
        for cam in cameras {
            let world_to_cam = cam.extrinsic.inverse();
            for (role, mounted) in &markers {
                let mut noise = [0.0f64; 8];
                for n in noise.iter_mut() {
                    *n = self.rng.sample::<f64, _>(StandardNormal);
                }
                let tag_id = mounted.marker.tag_id;
                if s.occlusions.iter().any(|o| o.hides(cam.id, tag_id, timestamp_us)) {
                    continue;
                }
                let body = match role {
                    crate::rig::MarkerRole::Head => &truth.head,
                    crate::rig::MarkerRole::Coil => &truth.coil,
                };
                let tag_to_world = body.compose(&mounted.mount).expect("mount chains into body");
                let face = tag_to_world.rotation.rotate(&-Vec3::z());
                let to_camera = cam.center() - tag_to_world.translation;
                let cos_inc = face.dot(&to_camera) / to_camera.norm();
                if !(cos_inc > 0.0 && cos_inc >= cos_max) {
                    continue;
                }
                let tag_to_cam = world_to_cam.compose(&tag_to_world).expect("world chains");
                let Ok(exact) = project_marker(&cam.intrinsics, &mounted.marker, &tag_to_cam) else {
                    continue;
                };
                let mut corners = [Point2Px::new(0.0, 0.0); 4];
                for (i, c) in exact.iter().enumerate() {
                    corners[i] = Point2Px::new(c.u + s.noise_px * noise[2 * i], c.v + s.noise_px * noise[2 * i + 1]);
                }
                if corners.iter().all(|c| cam.intrinsics.contains(c)) {
                    observations.push(TagObservation { camera_id: cam.id, tag_id, corners, timestamp_us });
                }
            }
        }
        Some(SimFrame { index, timestamp_us, observations, truth })
    }
}

impl Iterator for Simulator {
    type Item = SimFrame;

    fn next(&mut self) -> Option<SimFrame> {
        self.next_frame()
    }
}

/// Stream of frames for `scenario`.
pub fn simulate(scenario: Scenario) -> Result<Simulator> {
    Simulator::new(scenario)
}

/// One line of a frame record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimRecord {
    Header { v: u32, scenario: String, seed: u64, generator: String, frame_rate_hz: f64 },
    Frame(SimFrame),
}

pub const RECORD_VERSION: u32 = 1;

pub fn write_header(out: &mut impl Write, scenario: &Scenario) -> Result<()> {
    let header = SimRecord::Header {
        v: RECORD_VERSION,
        scenario: scenario.name.clone(),
        seed: scenario.seed,
        generator: "chacha8".into(),
        frame_rate_hz: scenario.frame_rate_hz,
    };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn write_frame(out: &mut impl Write, frame: &SimFrame) -> Result<()> {
    serde_json::to_writer(&mut *out, &SimRecord::Frame(frame.clone()))?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Writes the header and every frame as newline-delimited JSON.
pub fn write_records(out: &mut impl Write, scenario: &Scenario) -> Result<u64> {
    write_header(out, scenario)?;
    let mut count = 0;
    for frame in simulate(scenario.clone())? {
        write_frame(out, &frame)?;
        count += 1;
    }
    Ok(count)
}

/// Reads a record file. Lines may be `SimRecord`s or bare `TagObservation`s;
/// bare observations come back as frames with no ground truth attached.
pub fn read_records(input: impl BufRead) -> Result<Vec<RecordLine>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = match serde_json::from_str::<SimRecord>(&line) {
            Ok(SimRecord::Header { .. }) => continue,
            Ok(SimRecord::Frame(f)) => RecordLine::Frame(f),
            Err(_) => match serde_json::from_str::<TagObservation>(&line) {
                Ok(obs) => RecordLine::Observation(obs),
                Err(e) => return Err(Error::Protocol(format!("line {}: {e}", n + 1))),
            },
        };
        out.push(parsed);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecordLine {
    Frame(SimFrame),
    Observation(TagObservation),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo(frames: u64) -> Scenario {
        let mut s = preset_guidance_demo();
        s.frames = Some(frames);
        s
    }

    #[test]
    fn deterministic_given_seed() {
        let a: Vec<_> = simulate(demo(20).with_seed(9)).unwrap().collect();
        let b: Vec<_> = simulate(demo(20).with_seed(9)).unwrap().collect();
        assert_eq!(a, b);
        let mut ba = Vec::new();
        write_records(&mut ba, &demo(20).with_seed(9)).unwrap();
        let mut bb = Vec::new();
        write_records(&mut bb, &demo(20).with_seed(9)).unwrap();
        assert_eq!(ba, bb);
        let c: Vec<_> = simulate(demo(20).with_seed(10)).unwrap().collect();
        assert_ne!(a, c);
    }

    #[test]
    fn occlusion_interval_removes_only_that_pair() {
        let base = demo(90).with_seed(3);
        let occluded = base.clone().with_occlusion(Occlusion { camera_id: 2, tag_id: Some(3), start_us: 1_000_000, end_us: 2_000_000 });
        for (a, b) in simulate(base).unwrap().zip(simulate(occluded).unwrap()) {
            let hidden = (1_000_000..=2_000_000).contains(&a.timestamp_us);
            let expected: Vec<_> = a
                .observations
                .iter()
                .filter(|o| !(hidden && o.camera_id == 2 && o.tag_id == 3))
                .copied()
                .collect();
            assert_eq!(b.observations, expected);
            if hidden {
                assert!(a.observations.iter().any(|o| o.camera_id == 2 && o.tag_id == 3));
            }
        }
    }

    #[test]
    fn observations_are_on_sensor_and_facing() {
        for frame in simulate(preset_localization_study().with_seed(1)).unwrap().step_by(37) {
            for o in &frame.observations {
                let k = preset_guidance_demo().rig.camera(o.camera_id).unwrap().intrinsics;
                assert!(o.corners.iter().all(|c| k.contains(c)));
            }
            // The back-of-head tag never faces the front cameras.
            assert!(frame.observations.iter().all(|o| o.tag_id != 4));
        }
    }

    #[test]
    fn precision_preset_shape() {
        let all = preset_precision_study();
        assert_eq!(all.len(), 5);
        assert_eq!(all[0].frames, Some(100));
        assert!(all.iter().all(|s| s.noise_px == 0.3));
        let cam = all[0].rig.cameras[0];
        for (s, depth) in all.iter().zip(PRECISION_DEPTHS_MM) {
            let coil = s.coil_trajectory[0].pose;
            let in_cam = cam.extrinsic.inverse().apply(&coil.translation);
            assert!((in_cam.z - depth).abs() < 1e-9);
        }
        assert_eq!(PRECISION_DEPTHS_MM[0], 530.0);
        assert_eq!(PRECISION_DEPTHS_MM[4], 990.0);
    }

    #[test]
    fn localization_preset_shape() {
        let s = preset_localization_study();
        assert_eq!(s.coil_trajectory.len(), 15);
        assert_eq!(s.frames, Some(1500));
        let head = RigConfig::default_head_pose();
        let center = head.apply(&Vec3::from(HEAD_SPHERE_CENTER));
        for k in &s.coil_trajectory {
            let down = k.pose.rotation.rotate(&-Vec3::z());
            let to_center = (center - k.pose.translation).normalize();
            assert!((down - to_center).norm() < 1e-9);
        }
        let targets = localization_targets();
        let mut sim = simulate(s).unwrap();
        let first = sim.next_frame().unwrap();
        assert!((first.truth.target_head.to_vector() - targets[0]).norm() < 1e-9);
    }

    #[test]
    fn nudge_moves_truth() {
        let mut sim = simulate(demo(10)).unwrap();
        let before = sim.next_frame().unwrap().truth;
        sim.nudge_coil(&RigidTransform::new(Rotation::identity(), Vec3::new(0.0, 0.0, -5.0), FrameId::Coil, FrameId::Coil))
            .unwrap();
        let after = sim.next_frame().unwrap().truth;
        let axis = before.coil.rotation.rotate(&Vec3::z());
        let moved = after.coil.translation - before.coil.translation;
        assert!((moved + axis * 5.0).norm() < 1e-9);
    }

    #[test]
    fn scenario_document_roundtrip() {
        let s = preset_precision_study().remove(2).with_seed(77);
        let back = Scenario::from_toml_str(&s.to_toml_string()).unwrap();
        assert_eq!(back.seed, 77);
        assert_eq!(back.frames, Some(100));
        let a: Vec<_> = simulate(s).unwrap().take(3).collect();
        let b: Vec<_> = simulate(back).unwrap().take(3).collect();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.observations.len(), y.observations.len());
            for (p, q) in x.observations.iter().zip(&y.observations) {
                assert!(p.corners.iter().zip(&q.corners).all(|(c, d)| c.distance(d) < 1e-6));
            }
        }

        let s = Scenario::from_toml_str("preset = \"localization-study\"\nseed = 4\nnoise_px = 0.0\n").unwrap();
        assert_eq!((s.seed, s.noise_px, s.coil_trajectory.len()), (4, 0.0, 15));
        assert!(Scenario::from_toml_str("noise_px = -1.0\n").is_err());
        assert!(Scenario::from_toml_str("preset = \"precision-study\"\nposition = 9\n").is_err());
    }

    #[test]
    fn record_file_roundtrip() {
        let mut buf = Vec::new();
        write_records(&mut buf, &demo(3)).unwrap();
        let lines = read_records(&buf[..]).unwrap();
        assert_eq!(lines.len(), 3);
        assert!(matches!(lines[0], RecordLine::Frame(_)));
    }
}

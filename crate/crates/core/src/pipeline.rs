//! Observation stream → per-camera solves → fusion → per-frame guidance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::fusion::{DistanceEstimate, TranslationSigma};
use crate::geometry::{FrameId, Point3Mm, RigidTransform, Vec3};
use crate::pose::{estimate_tag_pose, TagObservation};
use crate::rig::{coil_pose, head_pose_from_markers, target_point, BodyPose, RigConfig, TagMeasurement, SYNC_TOLERANCE_US};
use crate::simulator::SimFrame;

/// Observations sharing one frame timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationFrame {
    pub timestamp_us: u64,
    pub observations: Vec<TagObservation>,
}

impl From<&SimFrame> for ObservationFrame {
    fn from(f: &SimFrame) -> Self {
        Self { timestamp_us: f.timestamp_us, observations: f.observations.clone() }
    }
}

impl From<SimFrame> for ObservationFrame {
    fn from(f: SimFrame) -> Self {
        Self { timestamp_us: f.timestamp_us, observations: f.observations }
    }
}

/// Groups a loose observation stream into frames.
///
/// A frame opens at the earliest pending timestamp and takes every
/// observation within [`SYNC_TOLERANCE_US`] of it. Within a frame only the
/// newest observation per (camera, tag) survives; older ones are stale.
pub fn assemble_frames(mut observations: Vec<TagObservation>) -> Vec<ObservationFrame> {
    observations.sort_by_key(|o| (o.timestamp_us, o.camera_id, o.tag_id));
    let mut frames: Vec<ObservationFrame> = Vec::new();
    for obs in observations {
        match frames.last_mut() {
            Some(f) if obs.timestamp_us - f.timestamp_us <= SYNC_TOLERANCE_US => {
                f.observations.retain(|o| !(o.camera_id == obs.camera_id && o.tag_id == obs.tag_id));
                f.observations.push(obs);
            }
            _ => frames.push(ObservationFrame { timestamp_us: obs.timestamp_us, observations: vec![obs] }),
        }
    }
    for f in &mut frames {
        f.observations.sort_by_key(|o| (o.camera_id, o.tag_id));
    }
    frames
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraDiagnostic {
    pub camera_id: u32,
    pub tag_id: u32,
    pub e_proj: f64,
    pub sigma_d: f64,
    pub ambiguous: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackedBody {
    pub pose: RigidTransform,
    pub sigma: TranslationSigma,
    pub contributors: usize,
    /// Carried over from an earlier frame.
    pub stale: bool,
}

impl TrackedBody {
    fn fresh(b: BodyPose) -> Self {
        Self { pose: b.pose, sigma: b.sigma, contributors: b.contributors, stale: false }
    }
}

/// Everything the operator sees for one assembled frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceState {
    pub timestamp_us: u64,
    pub head: Option<TrackedBody>,
    pub coil: Option<TrackedBody>,
    /// Present only when head and coil were both resolved this frame.
    pub target_head: Option<Point3Mm>,
    pub goal_head: Option<Point3Mm>,
    pub distance_to_goal_mm: Option<f64>,
    pub angle_to_goal_deg: Option<f64>,
    pub diagnostics: Vec<CameraDiagnostic>,
    pub failures: Vec<String>,
}

impl GuidanceState {
    pub fn tracked(&self) -> bool {
        self.target_head.is_some()
    }
}

/// Per-frame solver and fusion state.
pub struct Tracker {
    rig: RigConfig,
    goal: Option<Point3Mm>,
    last_head: Option<TrackedBody>,
    last_coil: Option<TrackedBody>,
}

impl Tracker {
    pub fn new(rig: RigConfig) -> Self {
        Self { rig, goal: None, last_head: None, last_coil: None }
    }

    pub fn rig(&self) -> &RigConfig {
        &self.rig
    }

    pub fn set_goal(&mut self, goal: Option<Point3Mm>) {
        self.goal = goal;
    }

    pub fn goal(&self) -> Option<Point3Mm> {
        self.goal
    }

    /// Solves every observation (in parallel) and returns the usable
    /// measurements, their diagnostics and any per-observation failures.
    pub fn measure(&self, observations: &[TagObservation]) -> (Vec<TagMeasurement>, Vec<CameraDiagnostic>, Vec<String>) {
        let results: Vec<Result<(TagMeasurement, CameraDiagnostic), String>> = observations
            .par_iter()
            .map(|obs| {
                let camera = self.rig.camera(obs.camera_id).ok_or_else(|| format!("unknown camera {}", obs.camera_id))?;
                let (_, mounted) = self.rig.marker(obs.tag_id).ok_or_else(|| format!("unknown tag {}", obs.tag_id))?;
                let fail = |e: Error| format!("camera {} tag {}: {e}", obs.camera_id, obs.tag_id);
                let estimate = estimate_tag_pose(&camera.intrinsics, &mounted.marker, obs).map_err(fail)?;
                let m = TagMeasurement { camera_id: obs.camera_id, tag_id: obs.tag_id, estimate };
                let sigma = m.sigma(&camera.intrinsics).map_err(fail)?;
                let d = DistanceEstimate::new(obs.camera_id, estimate.pose.translation_point(), &sigma).map_err(fail)?;
                let diag = CameraDiagnostic {
                    camera_id: obs.camera_id,
                    tag_id: obs.tag_id,
                    e_proj: estimate.reproj_error,
                    sigma_d: d.sigma,
                    ambiguous: estimate.ambiguous,
                };
                Ok((m, diag))
            })
            .collect();
        let mut measurements = Vec::new();
        let mut diagnostics = Vec::new();
        let mut failures = Vec::new();
        for r in results {
            match r {
                Ok((m, d)) => {
                    measurements.push(m);
                    diagnostics.push(d);
                }
                Err(e) => failures.push(e),
            }
        }
        (measurements, diagnostics, failures)
    }

    pub fn process(&mut self, frame: &ObservationFrame) -> GuidanceState {
        let (measurements, diagnostics, mut failures) = self.measure(&frame.observations);
        let mut resolve = |r: crate::Result<BodyPose>, last: &mut Option<TrackedBody>| match r {
            Ok(b) => {
                let fresh = TrackedBody::fresh(b);
                *last = Some(fresh);
                Some(fresh)
            }
            Err(e) => {
                failures.push(e.to_string());
                last.map(|l| TrackedBody { stale: true, ..l })
            }
        };
        let head = resolve(head_pose_from_markers(&measurements, &self.rig), &mut self.last_head);
        let coil = resolve(coil_pose(&measurements, &self.rig), &mut self.last_coil);

        let target_head = match (&head, &coil) {
            (Some(h), Some(c)) if !h.stale && !c.stale => target_point(&h.pose, &c.pose, &self.rig).ok(),
            _ => None,
        };
        let distance_to_goal_mm = match (target_head, self.goal) {
            (Some(t), Some(g)) => Some((t.to_vector() - g.to_vector()).norm()),
            _ => None,
        };
        let angle_to_goal_deg = match (&head, &coil, self.goal, target_head) {
            (Some(h), Some(c), Some(g), Some(_)) => coil_goal_angle(&h.pose, &c.pose, &g),
            _ => None,
        };
        GuidanceState {
            timestamp_us: frame.timestamp_us,
            head,
            coil,
            target_head,
            goal_head: self.goal,
            distance_to_goal_mm,
            angle_to_goal_deg,
            diagnostics,
            failures,
        }
    }
}

/// Angle between the coil's `-z` axis and the ray from the coil origin to
/// the goal, degrees.
fn coil_goal_angle(head: &RigidTransform, coil: &RigidTransform, goal: &Point3Mm) -> Option<f64> {
    let coil_in_head = head.inverse().compose(coil).ok()?;
    debug_assert_eq!(coil_in_head.from, FrameId::Coil);
    let axis = coil_in_head.rotation.rotate(&-Vec3::z());
    let to_goal = goal.to_vector() - coil_in_head.translation;
    if to_goal.norm() < 1e-12 {
        return Some(0.0);
    }
    Some(axis.angle(&to_goal).to_degrees())
}

/// Lazily runs the tracker over a frame source.
pub fn run_pipeline<I>(source: I, rig: RigConfig) -> impl Iterator<Item = GuidanceState>
where
    I: IntoIterator,
    I::Item: Into<ObservationFrame>,
{
    let mut tracker = Tracker::new(rig);
    source.into_iter().map(move |f| tracker.process(&f.into()))
}

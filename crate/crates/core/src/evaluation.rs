//! Precision and localization studies over simulated scenes, plus their
//! CSV / text reports.
//!
//! Report schemas:
//!
//! `precision.csv`
//! ```text
//! position,depth_mm,samples,distance_mean_mm,distance_std_mm,distance_fit_mu_mm,distance_fit_sigma_mm,distance_abs_error_mm,angle_mean_deg,angle_std_deg,angle_fit_mu_deg,angle_fit_sigma_deg,angle_abs_error_deg
//! ```
//! `localization.csv`
//! ```text
//! point,target_x_mm,target_y_mm,target_z_mm,frames,tracked_frames,mean_error_mm,bucket
//! ```
//! `bucket` is one of `lt4`, `4to6`, `ge6`, `untracked`.
//!
//! Distances are measured from camera 0's optical center to the coil origin;
//! each camera's estimate carries its propagated σ and they are fused by
//! inverse variance. The reported angle is the coil tilt against camera 0's
//! line of sight. Absolute angle error is the rotation distance between the
//! fused and true coil orientation.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{ambiguity_policy, fuse_distances, DistanceEstimate};
use crate::geometry::{angular_distance, Point3Mm, RigidTransform, Vec3};
use crate::pipeline::{ObservationFrame, Tracker};
use crate::rig::coil_pose;
use crate::simulator::{simulate, Scenario, SimFrame};

pub const DEFAULT_HISTOGRAM_BINS: usize = 30;
pub const MIN_PRECISION_SAMPLES: usize = 10;
/// Localization bucket edges, mm.
pub const BUCKET_LOW_MM: f64 = 4.0;
pub const BUCKET_HIGH_MM: f64 = 6.0;

/// Published hardware measurements of the reference system and its
/// comparators. Reported next to simulated results for context only.
pub mod published {
    pub const DISTANCE_STD_MM: (f64, f64) = (0.07, 0.09);
    pub const ANGLE_STD_DEG: (f64, f64) = (0.04, 0.06);
    pub const MAX_DISTANCE_ABS_ERROR_MM: f64 = 0.5;
    pub const MAX_ANGLE_ABS_ERROR_DEG: f64 = 0.3;
    pub const LOCALIZATION_MEAN_MM: f64 = 4.94;
    pub const VUFORIA_HOLOLENS1_MM: f64 = 3.1;
    pub const HOLOLENS_VENTRICULOSTOMY_MM: f64 = 5.2;
    pub const REALSENSE_SR300_MM: f64 = 20.0;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` ascending edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Equal-width bins spanning the sample range. A zero-width range is
    /// widened to ±0.5 around the value.
    pub fn new(samples: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let (mut lo, mut hi) = samples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        if samples.is_empty() {
            (lo, hi) = (0.0, 1.0);
        } else if hi - lo <= 0.0 {
            (lo, hi) = (lo - 0.5, hi + 0.5);
        }
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
        let mut counts = vec![0u64; bins];
        for &x in samples {
            let i = (((x - lo) / width) as usize).min(bins - 1);
            counts[i] += 1;
        }
        Self { edges, counts }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n − 1).
    pub std: f64,
    /// Maximum-likelihood normal fit.
    pub fit: GaussianFit,
}

impl SampleStats {
    pub fn new(samples: &[f64]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::InsufficientSamples { found: n, required: 2 });
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let ss: f64 = samples.iter().map(|x| (x - mean).powi(2)).sum();
        Ok(Self {
            n,
            mean,
            std: (ss / (n - 1) as f64).sqrt(),
            fit: GaussianFit { mu: mean, sigma: (ss / n as f64).sqrt() },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionReport {
    pub name: String,
    /// True camera-0 to coil distance.
    pub true_distance_mm: f64,
    pub true_angle_deg: f64,
    pub frames: usize,
    pub distance: SampleStats,
    pub angle: SampleStats,
    pub distance_abs_error_mm: f64,
    pub angle_abs_error_deg: f64,
    pub distance_histogram: Histogram,
    pub angle_histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionReport {
    pub positions: Vec<PositionReport>,
}

struct PrecisionSample {
    distance: f64,
    angle: f64,
    rotation_error: f64,
}

fn tilt_deg(coil: &RigidTransform, eye: &Vec3) -> f64 {
    let face = coil.rotation.rotate(&Vec3::z());
    face.angle(&(eye - coil.translation)).to_degrees()
}

fn precision_sample(tracker: &Tracker, frame: &SimFrame) -> Option<PrecisionSample> {
    let rig = tracker.rig();
    let eye = rig.cameras.iter().min_by_key(|c| c.id)?.center();
    let (measurements, _, _) = tracker.measure(&frame.observations);
    let coil_tag = rig.coil_marker.marker.tag_id;
    let coil_meas: Vec<_> = measurements.iter().filter(|m| m.tag_id == coil_tag).collect();
    let inflation = ambiguity_policy(&coil_meas.iter().map(|m| m.estimate.ambiguous).collect::<Vec<_>>());
    let unmount = rig.coil_marker.mount.inverse();
    let mut distances = Vec::new();
    for (m, factor) in coil_meas.iter().zip(inflation) {
        let Some(factor) = factor else { continue };
        let camera = rig.camera(m.camera_id)?;
        let sigma = m.sigma(&camera.intrinsics).ok()?.scaled(factor);
        let tag_in_cam = m.estimate.pose;
        let coil_world = camera.extrinsic.compose(&tag_in_cam).ok()?.compose(&unmount).ok()?;
        let d = DistanceEstimate::new(m.camera_id, tag_in_cam.translation_point(), &sigma).ok()?;
        distances.push(DistanceEstimate { distance: (coil_world.translation - eye).norm(), ..d });
    }
    let fused = fuse_distances(&distances).ok()?;
    let coil = coil_pose(&measurements, rig).ok()?.pose;
    Some(PrecisionSample {
        distance: fused.distance,
        angle: tilt_deg(&coil, &eye),
        rotation_error: angular_distance(&coil.rotation, &frame.truth.coil.rotation),
    })
}

fn precision_position(scenario: &Scenario) -> Result<PositionReport> {
    let tracker = Tracker::new(scenario.rig.clone());
    let frames: Vec<SimFrame> = simulate(scenario.clone())?.collect();
    let samples: Vec<PrecisionSample> = frames.iter().filter_map(|f| precision_sample(&tracker, f)).collect();
    if samples.len() < MIN_PRECISION_SAMPLES {
        return Err(Error::InsufficientSamples { found: samples.len(), required: MIN_PRECISION_SAMPLES });
    }
    let eye = scenario.rig.cameras.iter().min_by_key(|c| c.id).expect("validated rig has cameras").center();
    let truth = frames[0].truth.coil;
    let true_distance_mm = (truth.translation - eye).norm();
    let true_angle_deg = tilt_deg(&truth, &eye);
    let distances: Vec<f64> = samples.iter().map(|s| s.distance).collect();
    let angles: Vec<f64> = samples.iter().map(|s| s.angle).collect();
    let n = samples.len() as f64;
    Ok(PositionReport {
        name: scenario.name.clone(),
        true_distance_mm,
        true_angle_deg,
        frames: frames.len(),
        distance: SampleStats::new(&distances)?,
        angle: SampleStats::new(&angles)?,
        distance_abs_error_mm: distances.iter().map(|d| (d - true_distance_mm).abs()).sum::<f64>() / n,
        angle_abs_error_deg: samples.iter().map(|s| s.rotation_error).sum::<f64>() / n,
        distance_histogram: Histogram::new(&distances, DEFAULT_HISTOGRAM_BINS),
        angle_histogram: Histogram::new(&angles, DEFAULT_HISTOGRAM_BINS),
    })
}

/// Runs each static scenario (in parallel) and summarizes its samples.
pub fn run_precision_study(scenarios: &[Scenario]) -> Result<PrecisionReport> {
    let positions = scenarios.par_iter().map(precision_position).collect::<Result<Vec<_>>>()?;
    Ok(PrecisionReport { positions })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    Below4,
    From4To6,
    AtLeast6,
    Untracked,
}

impl Bucket {
    pub fn of(mean_error_mm: Option<f64>) -> Self {
        match mean_error_mm {
            None => Self::Untracked,
            Some(e) if e < BUCKET_LOW_MM => Self::Below4,
            Some(e) if e < BUCKET_HIGH_MM => Self::From4To6,
            Some(_) => Self::AtLeast6,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Below4 => "lt4",
            Self::From4To6 => "4to6",
            Self::AtLeast6 => "ge6",
            Self::Untracked => "untracked",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointReport {
    pub truth: Point3Mm,
    pub frames: usize,
    pub tracked_frames: usize,
    /// Mean ‖estimate − truth‖ over tracked frames.
    pub mean_error_mm: Option<f64>,
    pub bucket: Bucket,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub points: Vec<PointReport>,
    /// Mean of the per-point errors over tracked points.
    pub mean_error_mm: Option<f64>,
    /// Mean over every tracked frame.
    pub frame_mean_error_mm: Option<f64>,
    pub fraction_below_4: f64,
    pub fraction_4_to_6: f64,
    pub fraction_at_least_6: f64,
    pub fraction_untracked: f64,
    /// Tracked frames over all frames.
    pub continuity: f64,
    pub error_histogram: Histogram,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Runs the scenario once and scores the target estimate of every frame.
/// Frames are grouped into points by the coil keyframe in effect.
pub fn run_localization_study(scenario: &Scenario) -> Result<LocalizationReport> {
    let frames: Vec<SimFrame> = simulate(scenario.clone())?.collect();
    let keys = &scenario.coil_trajectory;
    let mut groups: Vec<Vec<SimFrame>> = vec![Vec::new(); keys.len()];
    for f in frames {
        let k = keys.partition_point(|key| key.t_us <= f.timestamp_us).saturating_sub(1);
        groups[k].push(f);
    }
    groups.retain(|g| !g.is_empty());

    let per_point: Vec<(PointReport, Vec<f64>)> = groups
        .par_iter()
        .map(|group| {
            let mut tracker = Tracker::new(scenario.rig.clone());
            let errors: Vec<f64> = group
                .iter()
                .filter_map(|f| {
                    let state = tracker.process(&ObservationFrame::from(f));
                    state.target_head.map(|t| (t.to_vector() - f.truth.target_head.to_vector()).norm())
                })
                .collect();
            let mean_error_mm = mean(&errors);
            let report = PointReport {
                truth: group[0].truth.target_head,
                frames: group.len(),
                tracked_frames: errors.len(),
                mean_error_mm,
                bucket: Bucket::of(mean_error_mm),
            };
            (report, errors)
        })
        .collect();

    let points: Vec<PointReport> = per_point.iter().map(|(p, _)| p.clone()).collect();
    let all_errors: Vec<f64> = per_point.iter().flat_map(|(_, e)| e.iter().copied()).collect();
    let n = points.len().max(1) as f64;
    let fraction = |b: Bucket| points.iter().filter(|p| p.bucket == b).count() as f64 / n;
    let total_frames: usize = points.iter().map(|p| p.frames).sum();
    Ok(LocalizationReport {
        mean_error_mm: mean(&points.iter().filter_map(|p| p.mean_error_mm).collect::<Vec<_>>()),
        frame_mean_error_mm: mean(&all_errors),
        fraction_below_4: fraction(Bucket::Below4),
        fraction_4_to_6: fraction(Bucket::From4To6),
        fraction_at_least_6: fraction(Bucket::AtLeast6),
        fraction_untracked: fraction(Bucket::Untracked),
        continuity: all_errors.len() as f64 / total_frames.max(1) as f64,
        error_histogram: Histogram::new(&all_errors, DEFAULT_HISTOGRAM_BINS),
        points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Txt,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "txt" => Ok(Self::Txt),
            other => Err(Error::UnsupportedFormat(other.to_string())),
        }
    }
}

/// A report that can be rendered as CSV or structured text.
pub trait Report {
    fn to_csv(&self) -> String;
    fn to_text(&self) -> String;
}

pub fn emit_report(report: &impl Report, format: Format) -> String {
    match format {
        Format::Csv => report.to_csv(),
        Format::Txt => report.to_text(),
    }
}

pub const PRECISION_CSV_HEADER: &str = "position,depth_mm,samples,distance_mean_mm,distance_std_mm,distance_fit_mu_mm,distance_fit_sigma_mm,distance_abs_error_mm,angle_mean_deg,angle_std_deg,angle_fit_mu_deg,angle_fit_sigma_deg,angle_abs_error_deg";
pub const LOCALIZATION_CSV_HEADER: &str = "point,target_x_mm,target_y_mm,target_z_mm,frames,tracked_frames,mean_error_mm,bucket";

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

fn write_histogram(out: &mut String, name: &str, h: &Histogram) {
    let edges: Vec<String> = h.edges.iter().map(|e| format!("{e:.6}")).collect();
    let counts: Vec<String> = h.counts.iter().map(u64::to_string).collect();
    let _ = writeln!(out, "  {name}.edges = [{}]", edges.join(", "));
    let _ = writeln!(out, "  {name}.counts = [{}]", counts.join(", "));
}

impl Report for PrecisionReport {
    fn to_csv(&self) -> String {
        let mut out = format!("{PRECISION_CSV_HEADER}\n");
        for p in &self.positions {
            let _ = writeln!(
                out,
                "{},{:.3},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                p.name,
                p.true_distance_mm,
                p.distance.n,
                p.distance.mean,
                p.distance.std,
                p.distance.fit.mu,
                p.distance.fit.sigma,
                p.distance_abs_error_mm,
                p.angle.mean,
                p.angle.std,
                p.angle.fit.mu,
                p.angle.fit.sigma,
                p.angle_abs_error_deg,
            );
        }
        out
    }

    fn to_text(&self) -> String {
        let mut out = String::from("[precision]\n");
        let (d_lo, d_hi) = published::DISTANCE_STD_MM;
        let (a_lo, a_hi) = published::ANGLE_STD_DEG;
        let _ = writeln!(out, "reference.distance_std_mm = {d_lo:.2}-{d_hi:.2}");
        let _ = writeln!(out, "reference.angle_std_deg = {a_lo:.2}-{a_hi:.2}");
        let _ = writeln!(
            out,
            "reference.max_abs_error = {:.1} mm / {:.1} deg",
            published::MAX_DISTANCE_ABS_ERROR_MM,
            published::MAX_ANGLE_ABS_ERROR_DEG
        );
        for p in &self.positions {
            let _ = writeln!(out, "\nposition {}", p.name);
            let _ = writeln!(out, "  true_distance_mm = {:.6}", p.true_distance_mm);
            let _ = writeln!(out, "  true_angle_deg = {:.6}", p.true_angle_deg);
            let _ = writeln!(out, "  samples = {} of {} frames", p.distance.n, p.frames);
            let _ = writeln!(out, "  distance_mean_mm = {:.6}", p.distance.mean);
            let _ = writeln!(out, "  distance_std_mm = {:.6}", p.distance.std);
            let _ = writeln!(out, "  distance_fit = mu {:.6}, sigma {:.6}", p.distance.fit.mu, p.distance.fit.sigma);
            let _ = writeln!(out, "  distance_abs_error_mm = {:.6}", p.distance_abs_error_mm);
            let _ = writeln!(out, "  angle_mean_deg = {:.6}", p.angle.mean);
            let _ = writeln!(out, "  angle_std_deg = {:.6}", p.angle.std);
            let _ = writeln!(out, "  angle_fit = mu {:.6}, sigma {:.6}", p.angle.fit.mu, p.angle.fit.sigma);
            let _ = writeln!(out, "  angle_abs_error_deg = {:.6}", p.angle_abs_error_deg);
            write_histogram(&mut out, "distance_histogram", &p.distance_histogram);
            write_histogram(&mut out, "angle_histogram", &p.angle_histogram);
        }
        out
    }
}

impl Report for LocalizationReport {
    fn to_csv(&self) -> String {
        let mut out = format!("{LOCALIZATION_CSV_HEADER}\n");
        for (i, p) in self.points.iter().enumerate() {
            let _ = writeln!(
                out,
                "{i},{:.3},{:.3},{:.3},{},{},{},{}",
                p.truth.x,
                p.truth.y,
                p.truth.z,
                p.frames,
                p.tracked_frames,
                opt(p.mean_error_mm),
                p.bucket.label()
            );
        }
        out
    }

    fn to_text(&self) -> String {
        let mut out = String::from("[localization]\n");
        let _ = writeln!(out, "reference.mean_error_mm = {:.2}", published::LOCALIZATION_MEAN_MM);
        let _ = writeln!(out, "reference.vuforia_hololens1_mm = {:.1}", published::VUFORIA_HOLOLENS1_MM);
        let _ = writeln!(out, "reference.hololens_ventriculostomy_mm = {:.1}", published::HOLOLENS_VENTRICULOSTOMY_MM);
        let _ = writeln!(out, "reference.realsense_sr300_mm = {:.1}", published::REALSENSE_SR300_MM);
        let _ = writeln!(out, "points = {}", self.points.len());
        let _ = writeln!(out, "mean_error_mm = {}", opt(self.mean_error_mm));
        let _ = writeln!(out, "frame_mean_error_mm = {}", opt(self.frame_mean_error_mm));
        let _ = writeln!(out, "fraction_lt4 = {:.6}", self.fraction_below_4);
        let _ = writeln!(out, "fraction_4to6 = {:.6}", self.fraction_4_to_6);
        let _ = writeln!(out, "fraction_ge6 = {:.6}", self.fraction_at_least_6);
        let _ = writeln!(out, "fraction_untracked = {:.6}", self.fraction_untracked);
        let _ = writeln!(out, "continuity = {:.6}", self.continuity);
        write_histogram(&mut out, "error_histogram", &self.error_histogram);
        out
    }
}

//! Multi-camera fiducial tracking for coil navigation.
//!
//! Cameras observe square tags on the subject's head and on the stimulation
//! coil. Each observation is solved for a tag pose, weighted by its
//! reprojection-derived uncertainty and fused across cameras into head and
//! coil poses, from which the stimulation target is located in the head
//! frame. A seeded simulator generates observations for evaluation and for
//! the TCP guidance server.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod geometry;
pub mod pipeline;
pub mod pose;
pub mod projection;
pub mod protocol;
pub mod rig;
pub mod server;
pub mod simulator;

pub use error::{Error, Result};
pub use fusion::{DistanceEstimate, FusedDistance, TranslationSigma};
pub use geometry::{angular_distance, compose, invert, FrameId, Point2Px, Point3Mm, RigidTransform, Rotation, Vec3};
pub use pipeline::{run_pipeline, GuidanceState, ObservationFrame, Tracker};
pub use pose::{estimate_tag_pose, solve_pnp_planar, PoseEstimate, TagObservation};
pub use projection::{project_marker, project_point, CameraIntrinsics, MarkerSpec};
pub use protocol::{CommandRecord, StateRecord, SteerCommand};
pub use rig::{load_rig_config, CameraConfig, RigConfig};
pub use simulator::{simulate, Scenario, SimFrame, Simulator};

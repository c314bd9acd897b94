//! Wire records exchanged with operator clients: one JSON object per line,
//! each carrying the schema version `v`.
//!
//! Server → client: [`StateRecord`] every frame, [`ErrorRecord`] in reply to
//! a rejected command. Client → server: [`CommandRecord`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FrameId, Point3Mm, RigidTransform, Rotation, Vec3};
use crate::pipeline::{GuidanceState, TrackedBody};

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_NUDGE_MM: f64 = 20.0;
pub const MAX_NUDGE_DEG: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyRecord {
    /// `[w, x, y, z]`, body → world.
    pub q: [f64; 4],
    pub t: [f64; 3],
    pub sigma: [f64; 3],
    pub stale: bool,
}

impl From<&TrackedBody> for BodyRecord {
    fn from(b: &TrackedBody) -> Self {
        Self {
            q: b.pose.rotation.wxyz(),
            t: b.pose.translation.into(),
            sigma: b.sigma.to_array(),
            stale: b.stale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: u32,
    pub tag: u32,
    pub e_proj: f64,
    pub sigma_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRecord {
    pub v: u32,
    pub t_us: u64,
    pub head: Option<BodyRecord>,
    pub coil: Option<BodyRecord>,
    /// Head frame.
    pub target: Option<[f64; 3]>,
    /// Head frame.
    pub goal: Option<[f64; 3]>,
    pub dist_mm: Option<f64>,
    pub angle_deg: Option<f64>,
    pub cams: Vec<CameraRecord>,
}

impl From<&GuidanceState> for StateRecord {
    fn from(s: &GuidanceState) -> Self {
        let p = |p: Point3Mm| [p.x, p.y, p.z];
        Self {
            v: PROTOCOL_VERSION,
            t_us: s.timestamp_us,
            head: s.head.as_ref().map(BodyRecord::from),
            coil: s.coil.as_ref().map(BodyRecord::from),
            target: s.target_head.map(p),
            goal: s.goal_head.map(p),
            dist_mm: s.distance_to_goal_mm,
            angle_deg: s.angle_to_goal_deg,
            cams: s
                .diagnostics
                .iter()
                .map(|d| CameraRecord { id: d.camera_id, tag: d.tag_id, e_proj: d.e_proj, sigma_d: d.sigma_d })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub v: u32,
    pub error: String,
}

impl ErrorRecord {
    pub fn new(message: impl Into<String>) -> Self {
        Self { v: PROTOCOL_VERSION, error: message.into() }
    }
}

/// Operator steering commands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case", deny_unknown_fields)]
pub enum SteerCommand {
    /// Sets the head-frame goal point; `null` or an absent point clears it.
    SetGoal { point: Option<[f64; 3]> },
    /// Moves the coil in its own frame. Rotation is a rotation vector in
    /// degrees, applied about the coil origin.
    NudgeCoil {
        #[serde(default)]
        translate_mm: [f64; 3],
        #[serde(default)]
        rotate_deg: [f64; 3],
    },
    SetNoise { noise_px: f64 },
    Pause,
    Resume,
}

impl SteerCommand {
    /// Checks bounds that do not depend on simulator state.
    pub fn validate(&self) -> Result<()> {
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        match self {
            Self::SetGoal { point: Some(p) } if !finite(p) => Err(Error::Protocol("goal must be finite".into())),
            Self::NudgeCoil { translate_mm, rotate_deg } => {
                if !finite(translate_mm) || !finite(rotate_deg) {
                    return Err(Error::Protocol("nudge must be finite".into()));
                }
                if Vec3::from(*translate_mm).norm() > MAX_NUDGE_MM {
                    return Err(Error::Protocol(format!("nudge translation exceeds {MAX_NUDGE_MM} mm")));
                }
                if Vec3::from(*rotate_deg).norm() > MAX_NUDGE_DEG {
                    return Err(Error::Protocol(format!("nudge rotation exceeds {MAX_NUDGE_DEG} deg")));
                }
                Ok(())
            }
            Self::SetNoise { noise_px } if !noise_px.is_finite() => Err(Error::Protocol("noise must be finite".into())),
            _ => Ok(()),
        }
    }

    /// `Coil -> Coil` delta of a nudge.
    pub fn nudge_transform(translate_mm: [f64; 3], rotate_deg: [f64; 3]) -> RigidTransform {
        let rotation = Rotation::from_scaled_axis(Vec3::from(rotate_deg).map(f64::to_radians));
        RigidTransform::new(rotation, Vec3::from(translate_mm), FrameId::Coil, FrameId::Coil)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub v: u32,
    #[serde(flatten)]
    pub command: SteerCommand,
}

impl CommandRecord {
    pub fn new(command: SteerCommand) -> Self {
        Self { v: PROTOCOL_VERSION, command }
    }
}

/// Parses one client line into a validated command.
pub fn parse_command(line: &str) -> Result<SteerCommand> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| Error::Protocol(format!("malformed record: {e}")))?;
    match value.get("v").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(PROTOCOL_VERSION) => {}
        Some(v) => return Err(Error::Protocol(format!("unsupported protocol version {v}"))),
        None => return Err(Error::Protocol("missing protocol version `v`".into())),
    }
    let mut fields = match value {
        serde_json::Value::Object(fields) => fields,
        _ => return Err(Error::Protocol("a command must be a JSON object".into())),
    };
    fields.remove("v");
    let keys: Vec<String> = fields.keys().cloned().collect();
    let command: SteerCommand = serde_json::from_value(serde_json::Value::Object(fields))
        .map_err(|e| Error::Protocol(format!("invalid command: {e}")))?;
    // Internally tagged unit variants (`pause`, `resume`) ignore extra keys
    // even under deny_unknown_fields, so check against what the command writes.
    let known = serde_json::to_value(command).expect("commands always serialize");
    if let Some(extra) = keys.iter().find(|k| known.get(k.as_str()).is_none()) {
        return Err(Error::Protocol(format!("invalid command: unknown field `{extra}`")));
    }
    command.validate()?;
    Ok(command)
}

/// Serializes a record as a single line, newline included.
pub fn to_line<T: Serialize>(record: &T) -> String {
    let mut line = serde_json::to_string(record).expect("wire records always serialize");
    line.push('\n');
    line
}

//! Query-message serialization, exact byte accounting and budget
//! enforcement.
//!
//! Wire layout (little-endian): magic `CQRY`, version `u16`, sender `u16`,
//! `N_q: u32`, `C_q: u32`, sender pose as 4 x f32 (x, y, z, yaw), then
//! reference points row-major (`N_q x 3` f32) and query features row-major
//! (`N_q x C_q` f32).

use crate::scene::AgentPose;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"CQRY";
pub const WIRE_VERSION: u16 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported wire version {0}")]
    BadVersion(u16),
    #[error("message truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("inconsistent payload: {0}")]
    Inconsistent(String),
}

/// One agent's transmission: queries plus reference points and pose.
///
/// `payload_bytes` counts the query features only (`N_q * C_q * 4`); the
/// reference points, pose and header are tracked in `metadata_bytes` so
/// total wire size stays truthful while the headline number matches the
/// query-feature accounting.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryMessage {
    pub sender: u16,
    pub n_q: u32,
    pub c_q: u32,
    pub sender_pose: AgentPose,
    /// Row-major `N_q x 3`.
    pub reference_points: Vec<f32>,
    /// Row-major `N_q x C_q`.
    pub features: Vec<f32>,
}

const HEADER_BYTES: usize = 4 + 2 + 2 + 4 + 4;
const POSE_BYTES: usize = 4 * 4;

impl QueryMessage {
    pub fn new(
        sender: u16,
        c_q: u32,
        sender_pose: AgentPose,
        reference_points: Vec<f32>,
        features: Vec<f32>,
    ) -> Result<Self, WireError> {
        if reference_points.len() % 3 != 0 {
            return Err(WireError::Inconsistent("reference points not N x 3".into()));
        }
        let n_q = (reference_points.len() / 3) as u32;
        if features.len() != (n_q * c_q) as usize {
            return Err(WireError::Inconsistent(format!(
                "expected {} feature values, got {}",
                n_q * c_q,
                features.len()
            )));
        }
        Ok(QueryMessage { sender, n_q, c_q, sender_pose, reference_points, features })
    }

    /// Query-feature payload: `N_q * C_q * 4` bytes.
    pub fn payload_bytes(&self) -> usize {
        self.n_q as usize * self.c_q as usize * 4
    }

    /// Header + pose + reference points.
    pub fn metadata_bytes(&self) -> usize {
        HEADER_BYTES + POSE_BYTES + self.n_q as usize * 3 * 4
    }

    pub fn wire_bytes(&self) -> usize {
        self.payload_bytes() + self.metadata_bytes()
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_bytes());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&WIRE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.extend_from_slice(&self.n_q.to_le_bytes());
        out.extend_from_slice(&self.c_q.to_le_bytes());
        for v in [
            self.sender_pose.x,
            self.sender_pose.y,
            self.sender_pose.z,
            self.sender_pose.yaw,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.reference_points {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self, WireError> {
        if bytes.len() < HEADER_BYTES {
            return Err(WireError::Truncated { need: HEADER_BYTES, have: bytes.len() });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(WireError::BadMagic(magic));
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != WIRE_VERSION {
            return Err(WireError::BadVersion(version));
        }
        let sender = u16::from_le_bytes(bytes[6..8].try_into().unwrap());
        let n_q = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let c_q = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let need = HEADER_BYTES
            + POSE_BYTES
            + (n_q as usize * 3 + n_q as usize * c_q as usize) * 4;
        if bytes.len() != need {
            return Err(WireError::Truncated { need, have: bytes.len() });
        }
        let mut off = HEADER_BYTES;
        let read_f32 = |off: &mut usize| {
            let v = f32::from_le_bytes(bytes[*off..*off + 4].try_into().unwrap());
            *off += 4;
            v
        };
        let pose = AgentPose {
            x: read_f32(&mut off),
            y: read_f32(&mut off),
            z: read_f32(&mut off),
            yaw: read_f32(&mut off),
        };
        let reference_points =
            (0..n_q as usize * 3).map(|_| read_f32(&mut off)).collect();
        let features =
            (0..(n_q * c_q) as usize).map(|_| read_f32(&mut off)).collect();
        Ok(QueryMessage {
            sender,
            n_q,
            c_q,
            sender_pose: pose,
            reference_points,
            features,
        })
    }
}

/// Dense BEV feature transmission size: `H * W * C * bytes_per_elem`.
pub fn bev_baseline_bytes(h: usize, w: usize, c: usize, bytes_per_elem: usize) -> usize {
    h * w * c * bytes_per_elem
}

/// Megabytes with MB = 10^6 bytes, printed to 3 decimals.
pub fn mb_string(bytes: usize) -> String {
    format!("{:.3}", bytes as f64 / 1e6)
}

/// Greedy whole-message admission in ascending sender order; the admitted
/// query payloads never exceed `budget_bytes`.
pub fn enforce_budget(messages: Vec<QueryMessage>, budget_bytes: usize) -> Vec<QueryMessage> {
    let mut msgs = messages;
    msgs.sort_by_key(|m| m.sender);
    let mut used = 0usize;
    let mut admitted = Vec::new();
    for m in msgs {
        let p = m.payload_bytes();
        if used + p <= budget_bytes {
            used += p;
            admitted.push(m);
        }
    }
    admitted
}

/// Per-frame communication volume, raw and log2-scaled.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct CommRecord {
    pub bytes: usize,
    /// `log2(bytes)`; `None` when nothing was transmitted.
    pub log2_bytes: Option<f64>,
}

impl CommRecord {
    pub fn from_bytes(bytes: usize) -> Self {
        CommRecord {
            bytes,
            log2_bytes: if bytes == 0 { None } else { Some((bytes as f64).log2()) },
        }
    }
}

/// Aggregated communication report for a run.
#[derive(Clone, Debug, Default, serde::Serialize)]
pub struct CommReport {
    pub frames: Vec<CommRecord>,
}

impl CommReport {
    pub fn push_frame(&mut self, message_bytes: &[usize]) {
        self.frames
            .push(CommRecord::from_bytes(message_bytes.iter().sum()));
    }

    pub fn total_bytes(&self) -> usize {
        self.frames.iter().map(|f| f.bytes).sum()
    }

    pub fn mean_bytes(&self) -> f64 {
        if self.frames.is_empty() {
            0.0
        } else {
            self.total_bytes() as f64 / self.frames.len() as f64
        }
    }

    pub fn mean_log2(&self) -> Option<f64> {
        let mean = self.mean_bytes();
        if mean > 0.0 {
            Some(mean.log2())
        } else {
            None
        }
    }
}

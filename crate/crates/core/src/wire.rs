//! Length-prefixed JSON framing shared by every control-plane link.
//!
//! A frame is a 4-byte big-endian length followed by that many bytes of UTF-8
//! JSON. Frames above [`MAX_FRAME`] are refused; the caller drops the
//! connection. Bulk data (proxy and origin replies) uses [`write_block`],
//! the same prefix carrying a status byte and raw payload.

use std::io::{Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

use crate::batch::JobSpec;
use crate::scheduler::ScaleMode;
use crate::dataset::DatasetSpec;
use crate::engine::{Histogram, PipelineSpec, TaskResult, TaskSpec};

pub const MAX_FRAME: usize = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("frame of {0} bytes exceeds the 16 MiB limit")]
    Oversize(usize),
    #[error("connection closed")]
    Closed,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("decode: {0}")]
    Decode(#[from] serde_json::Error),
}

/// Every message exchanged between clients, workers, the scheduler and
/// batch-sim. Serialized as `{"kind": ..., "body": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body", deny_unknown_fields)]
pub enum WireMessage {
    WorkerHello(WorkerHello),
    Heartbeat(Heartbeat),
    AssignTask(TaskSpec),
    TaskDone(TaskDone),
    TaskFailed(TaskFailed),
    SubmitJob(SubmitJob),
    JobStatus(JobStatus),
    ScaleRequest(ScaleRequest),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerHello {
    pub worker_id: String,
    pub n_cores: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heartbeat {
    pub worker_id: String,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDone {
    pub job_id: u64,
    pub result: TaskResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFailed {
    pub job_id: u64,
    pub chunk_id: u64,
    pub worker_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRef {
    Name(String),
    Spec(DatasetSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitJob {
    pub pipeline: PipelineSpec,
    pub dataset: DatasetRef,
    #[serde(default)]
    pub chunk_size: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobPhase {
    Running,
    Done,
    Failed,
}

/// Both the status query (only `job_id`/`tag` set) and its answer.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct JobStatus {
    #[serde(default)]
    pub job_id: Option<u64>,
    #[serde(default)]
    pub tag: Option<String>,
    #[serde(default)]
    pub cluster_id: Option<String>,
    #[serde(default)]
    pub phase: Option<JobPhase>,
    #[serde(default)]
    pub n_chunks: u64,
    #[serde(default)]
    pub n_done: u64,
    #[serde(default)]
    pub n_failed: u64,
    #[serde(default)]
    pub histograms: Vec<Histogram>,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleOp {
    /// Client -> scheduler: change the cluster's scale policy.
    SetPolicy(ScaleMode),
    /// Scheduler -> batch-sim: start a worker job.
    Submit(JobSpec),
    /// Scheduler -> batch-sim: stop a worker job.
    Cancel { handle: u64 },
    /// Reply: accepted, with the job handle.
    Accepted { handle: u64 },
    /// Reply: refused.
    Rejected { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRequest {
    pub op: ScaleOp,
}

impl WireMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            WireMessage::WorkerHello(_) => "WorkerHello",
            WireMessage::Heartbeat(_) => "Heartbeat",
            WireMessage::AssignTask(_) => "AssignTask",
            WireMessage::TaskDone(_) => "TaskDone",
            WireMessage::TaskFailed(_) => "TaskFailed",
            WireMessage::SubmitJob(_) => "SubmitJob",
            WireMessage::JobStatus(_) => "JobStatus",
            WireMessage::ScaleRequest(_) => "ScaleRequest",
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        encode_frame(self)
    }

    /// Decodes a frame body (without the length prefix).
    pub fn decode(body: &[u8]) -> Result<Self, WireError> {
        Ok(serde_json::from_slice(body)?)
    }
}

/// Serializes `msg` with its length prefix.
pub fn encode_frame<T: Serialize>(msg: &T) -> Result<Vec<u8>, WireError> {
    let body = serde_json::to_vec(msg)?;
    if body.len() > MAX_FRAME {
        return Err(WireError::Oversize(body.len()));
    }
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

fn check_len(prefix: [u8; 4]) -> Result<usize, WireError> {
    let len = u32::from_be_bytes(prefix) as usize;
    if len > MAX_FRAME + 1 {
        return Err(WireError::Oversize(len));
    }
    Ok(len)
}

fn map_eof(e: std::io::Error) -> WireError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        WireError::Closed
    } else {
        WireError::Io(e)
    }
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<Vec<u8>, WireError> {
    let mut prefix = [0u8; 4];
    r.read_exact(&mut prefix).map_err(map_eof)?;
    let len = check_len(prefix)?;
    if len > MAX_FRAME {
        return Err(WireError::Oversize(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(map_eof)?;
    Ok(body)
}

pub fn send<W: Write, T: Serialize>(w: &mut W, msg: &T) -> Result<(), WireError> {
    w.write_all(&encode_frame(msg)?)?;
    w.flush()?;
    Ok(())
}

pub fn recv<R: Read, T: DeserializeOwned>(r: &mut R) -> Result<T, WireError> {
    Ok(serde_json::from_slice(&read_frame(r)?)?)
}

pub async fn read_frame_async<R: AsyncRead + Unpin>(r: &mut R) -> Result<Vec<u8>, WireError> {
    let mut prefix = [0u8; 4];
    r.read_exact(&mut prefix).await.map_err(map_eof)?;
    let len = check_len(prefix)?;
    if len > MAX_FRAME {
        return Err(WireError::Oversize(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).await.map_err(map_eof)?;
    Ok(body)
}

pub async fn send_async<W: AsyncWrite + Unpin, T: Serialize>(
    w: &mut W,
    msg: &T,
) -> Result<(), WireError> {
    w.write_all(&encode_frame(msg)?).await?;
    w.flush().await?;
    Ok(())
}

pub async fn recv_async<R: AsyncRead + Unpin, T: DeserializeOwned>(
    r: &mut R,
) -> Result<T, WireError> {
    Ok(serde_json::from_slice(&read_frame_async(r).await?)?)
}

/// Status byte of a binary block reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum BlockStatus {
    Ok = 0,
    NotFound = 1,
    Denied = 2,
    BadRequest = 3,
}

impl BlockStatus {
    fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0 => BlockStatus::Ok,
            1 => BlockStatus::NotFound,
            2 => BlockStatus::Denied,
            3 => BlockStatus::BadRequest,
            _ => return None,
        })
    }
}

fn block_bytes(status: BlockStatus, payload: &[u8]) -> Result<Vec<u8>, WireError> {
    if payload.len() > MAX_FRAME {
        return Err(WireError::Oversize(payload.len()));
    }
    let mut out = Vec::with_capacity(5 + payload.len());
    out.extend_from_slice(&((payload.len() + 1) as u32).to_be_bytes());
    out.push(status as u8);
    out.extend_from_slice(payload);
    Ok(out)
}

fn split_block(body: Vec<u8>) -> Result<(BlockStatus, Vec<u8>), WireError> {
    let (&first, _) = body.split_first().ok_or(WireError::Closed)?;
    let status = BlockStatus::from_byte(first).ok_or_else(|| {
        WireError::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("bad block status {first}"),
        ))
    })?;
    Ok((status, body[1..].to_vec()))
}

pub fn write_block<W: Write>(w: &mut W, status: BlockStatus, payload: &[u8]) -> Result<(), WireError> {
    w.write_all(&block_bytes(status, payload)?)?;
    w.flush()?;
    Ok(())
}

pub fn read_block<R: Read>(r: &mut R) -> Result<(BlockStatus, Vec<u8>), WireError> {
    let mut prefix = [0u8; 4];
    r.read_exact(&mut prefix).map_err(map_eof)?;
    let len = check_len(prefix)?;
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(map_eof)?;
    split_block(body)
}

pub async fn write_block_async<W: AsyncWrite + Unpin>(
    w: &mut W,
    status: BlockStatus,
    payload: &[u8],
) -> Result<(), WireError> {
    w.write_all(&block_bytes(status, payload)?).await?;
    w.flush().await?;
    Ok(())
}

pub async fn read_block_async<R: AsyncRead + Unpin>(
    r: &mut R,
) -> Result<(BlockStatus, Vec<u8>), WireError> {
    let mut prefix = [0u8; 4];
    r.read_exact(&mut prefix).await.map_err(map_eof)?;
    let len = check_len(prefix)?;
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).await.map_err(map_eof)?;
    split_block(body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::JobSpec;
    use crate::dataset::FileChunk;
    use proptest::prelude::*;

    #[test]
    fn envelope_shape() {
        let msg = WireMessage::Heartbeat(Heartbeat {
            worker_id: "w001".into(),
            seq: 3,
        });
        let frame = msg.encode().unwrap();
        let len = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
        assert_eq!(len, frame.len() - 4);
        let v: serde_json::Value = serde_json::from_slice(&frame[4..]).unwrap();
        assert_eq!(v["kind"], "Heartbeat");
        assert_eq!(v["body"]["seq"], 3);
    }

    #[test]
    fn unknown_kind_rejected() {
        let body = br#"{"kind":"Teleport","body":{}}"#;
        assert!(WireMessage::decode(body).is_err());
    }

    #[test]
    fn oversize_frame_refused() {
        let mut bytes = ((MAX_FRAME + 2) as u32).to_be_bytes().to_vec();
        bytes.extend_from_slice(b"{}");
        let err = read_frame(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(err, WireError::Oversize(_)));
    }

    #[test]
    fn block_round_trip() {
        let mut buf = Vec::new();
        write_block(&mut buf, BlockStatus::NotFound, b"missing").unwrap();
        let (status, payload) = read_block(&mut buf.as_slice()).unwrap();
        assert_eq!(status, BlockStatus::NotFound);
        assert_eq!(payload, b"missing");
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL
    }

    fn text() -> impl Strategy<Value = String> {
        "[ -~]{0,24}"
    }

    fn histogram() -> impl Strategy<Value = Histogram> {
        (text(), 1usize..6, finite(), 0u64..1000, 0u64..1000).prop_map(|(name, n, lo, u, o)| {
            let mut h = Histogram::empty(&name, n, lo, lo.abs() + 1.0);
            h.underflow = u;
            h.overflow = o;
            h.n_filled = u + o;
            h
        })
    }

    fn pipeline() -> impl Strategy<Value = PipelineSpec> {
        (text(), text()).prop_map(|(a, b)| {
            serde_json::from_value(serde_json::json!([
                {"define": [a, b]}, {"filter": "pt>1"}, {"hist": ["h", "pt", 3, 0.5, 2.5]}
            ]))
            .unwrap()
        })
    }

    fn chunk() -> impl Strategy<Value = FileChunk> {
        (text(), any::<u64>(), any::<u64>(), any::<u64>()).prop_map(|(file, start, len, chunk_id)| {
            FileChunk {
                file,
                start,
                len,
                chunk_id,
            }
        })
    }

    fn message() -> impl Strategy<Value = WireMessage> {
        prop_oneof![
            (text(), any::<u32>())
                .prop_map(|(worker_id, n_cores)| WireMessage::WorkerHello(WorkerHello { worker_id, n_cores })),
            (text(), any::<u64>()).prop_map(|(worker_id, seq)| WireMessage::Heartbeat(Heartbeat { worker_id, seq })),
            (any::<u64>(), chunk(), pipeline()).prop_map(|(job_id, chunk, pipeline)| {
                WireMessage::AssignTask(TaskSpec { job_id, chunk, pipeline })
            }),
            (any::<u64>(), any::<u64>(), prop::collection::vec(histogram(), 0..3), text(), finite(), finite())
                .prop_map(|(job_id, chunk_id, histograms, worker_id, t0, t1)| {
                    WireMessage::TaskDone(TaskDone {
                        job_id,
                        result: TaskResult {
                            chunk_id,
                            n_events_in: 10,
                            n_events_pass: 4,
                            histograms,
                            worker_id,
                            t_start: t0,
                            t_end: t1,
                        },
                    })
                }),
            (any::<u64>(), any::<u64>(), text(), text()).prop_map(|(job_id, chunk_id, worker_id, reason)| {
                WireMessage::TaskFailed(TaskFailed { job_id, chunk_id, worker_id, reason })
            }),
            (pipeline(), text(), proptest::option::of(any::<u64>())).prop_map(|(pipeline, name, chunk_size)| {
                WireMessage::SubmitJob(SubmitJob { pipeline, dataset: DatasetRef::Name(name), chunk_size })
            }),
            (proptest::option::of(any::<u64>()), proptest::option::of(text()), prop::collection::vec(histogram(), 0..2))
                .prop_map(|(job_id, tag, histograms)| WireMessage::JobStatus(JobStatus {
                    job_id,
                    tag,
                    phase: Some(JobPhase::Done),
                    histograms,
                    ..Default::default()
                })),
            (text(), any::<u64>(), 0usize..3).prop_map(|(token, handle, which)| {
                let op = match which {
                    0 => ScaleOp::Submit(JobSpec::worker("img", serde_json::json!({"w": handle}), token)),
                    1 => ScaleOp::Cancel { handle },
                    _ => ScaleOp::Rejected { reason: token },
                };
                WireMessage::ScaleRequest(ScaleRequest { op })
            }),
        ]
    }

    proptest! {
        #[test]
        fn encode_decode_identity(msg in message()) {
            let frame = msg.encode().unwrap();
            let body = read_frame(&mut frame.as_slice()).unwrap();
            prop_assert_eq!(WireMessage::decode(&body).unwrap(), msg);
        }
    }
}

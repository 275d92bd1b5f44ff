//! The task stream: worker and task lifecycle events, exportable as CSV.

use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StreamKind {
    WorkerUp,
    WorkerDown,
    TaskStart,
    TaskEnd,
    ScaleDecision,
}

impl fmt::Display for StreamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StreamKind::WorkerUp => "WorkerUp",
            StreamKind::WorkerDown => "WorkerDown",
            StreamKind::TaskStart => "TaskStart",
            StreamKind::TaskEnd => "TaskEnd",
            StreamKind::ScaleDecision => "ScaleDecision",
        })
    }
}

impl FromStr for StreamKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "WorkerUp" => StreamKind::WorkerUp,
            "WorkerDown" => StreamKind::WorkerDown,
            "TaskStart" => StreamKind::TaskStart,
            "TaskEnd" => StreamKind::TaskEnd,
            "ScaleDecision" => StreamKind::ScaleDecision,
            other => return Err(format!("unknown stream event kind {other:?}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStreamEvent {
    pub kind: StreamKind,
    pub worker_id: String,
    pub chunk_id: Option<u64>,
    pub t: f64,
    pub detail: String,
}

pub const STREAM_CSV_HEADER: &str = "kind,worker_id,chunk_id,t,detail";

impl TaskStreamEvent {
    pub fn csv_row(&self) -> String {
        let chunk = self.chunk_id.map(|c| c.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{:.6},{}",
            self.kind,
            self.worker_id,
            chunk,
            self.t,
            self.detail.replace([',', '\n'], ";")
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self, String> {
        let mut parts = line.splitn(5, ',');
        let mut next = |what: &str| parts.next().ok_or_else(|| format!("missing {what} in {line:?}"));
        let kind = next("kind")?.parse()?;
        let worker_id = next("worker_id")?.to_owned();
        let chunk = next("chunk_id")?;
        let chunk_id = if chunk.is_empty() {
            None
        } else {
            Some(chunk.parse().map_err(|e| format!("bad chunk_id {chunk:?}: {e}"))?)
        };
        let t_text = next("t")?;
        let t = t_text.parse().map_err(|e| format!("bad t {t_text:?}: {e}"))?;
        let detail = next("detail").unwrap_or_default();
        Ok(Self {
            kind,
            worker_id,
            chunk_id,
            t,
            detail: detail.to_owned(),
        })
    }
}

/// Append-only event log.
#[derive(Debug, Clone, Default)]
pub struct TaskStream {
    events: Vec<TaskStreamEvent>,
}

impl TaskStream {
    pub fn push(&mut self, kind: StreamKind, worker_id: &str, chunk_id: Option<u64>, t: f64, detail: impl Into<String>) {
        self.events.push(TaskStreamEvent {
            kind,
            worker_id: worker_id.to_owned(),
            chunk_id,
            t,
            detail: detail.into(),
        });
    }

    pub fn events(&self) -> &[TaskStreamEvent] {
        &self.events
    }

    /// Events ordered by time, ties broken by worker id (insertion order
    /// otherwise preserved).
    pub fn ordered(&self) -> Vec<TaskStreamEvent> {
        let mut out = self.events.clone();
        out.sort_by(|a, b| a.t.total_cmp(&b.t).then_with(|| a.worker_id.cmp(&b.worker_id)));
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(STREAM_CSV_HEADER);
        out.push('\n');
        for e in self.ordered() {
            out.push_str(&e.csv_row());
            out.push('\n');
        }
        out
    }
}

pub fn parse_stream_csv(text: &str) -> Result<Vec<TaskStreamEvent>, String> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && *l != STREAM_CSV_HEADER)
        .map(TaskStreamEvent::parse_csv_row)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_and_ordering() {
        let mut s = TaskStream::default();
        s.push(StreamKind::TaskStart, "w002", Some(3), 1.5, "job 1");
        s.push(StreamKind::WorkerUp, "w001", None, 0.0, "");
        s.push(StreamKind::TaskStart, "w001", Some(2), 1.5, "job 1, retry");
        let csv = s.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], STREAM_CSV_HEADER);
        assert_eq!(lines[1], "WorkerUp,w001,,0.000000,");
        assert_eq!(lines[2], "TaskStart,w001,2,1.500000,job 1; retry");
        let parsed = parse_stream_csv(&csv).unwrap();
        assert_eq!(parsed.len(), 3);
        assert_eq!(parsed[2].worker_id, "w002");
        assert_eq!(parsed[2].chunk_id, Some(3));
        assert!(parse_stream_csv("Bogus,w,,0,").is_err());
    }
}

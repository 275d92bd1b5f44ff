//! The per-user cluster scheduler.
//!
//! [`Scheduler`] is a plain state machine driven by explicit timestamps, so
//! the same code runs under the virtual clock and behind the TLS server in
//! [`crate::net::scheduler`]. Tasks are handed out FIFO by `(job_id,
//! chunk_id)`; among workers with a free core the one with the fewest running
//! tasks wins, ties going to the smaller worker id.

mod autoscale;
mod stream;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;
use tracing::debug;

pub use autoscale::{autoscale_target, ScaleActions, ScaleAdapter, ScaleMode, ScalePolicy};
pub use stream::{parse_stream_csv, StreamKind, TaskStream, TaskStreamEvent, STREAM_CSV_HEADER};

use crate::dataset::{plan_chunks, DatasetError, DatasetSpec, FileChunk};
use crate::engine::{merge_into, Histogram, HistogramError, PipelineError, PipelineSpec, TaskResult, TaskSpec};
use crate::wire::{JobPhase, JobStatus};

pub type JobId = u64;
pub type TaskKey = (JobId, u64);

pub const HEARTBEAT_INTERVAL: f64 = 2.0;
pub const HEARTBEAT_TIMEOUT: f64 = 10.0;
pub const AUTOSCALE_INTERVAL: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedulerError {
    #[error("invalid pipeline: {0}")]
    InvalidPipeline(#[from] PipelineError),
    #[error("dataset: {0}")]
    Dataset(#[from] DatasetError),
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("unknown chunk {chunk_id} in job {job_id}")]
    UnknownChunk { job_id: JobId, chunk_id: u64 },
    #[error("worker {worker_id} does not own chunk {chunk_id} of job {job_id}")]
    NotOwner {
        worker_id: String,
        job_id: JobId,
        chunk_id: u64,
    },
    #[error("unknown worker {0}")]
    UnknownWorker(String),
    #[error("worker {0} already registered")]
    DuplicateWorker(String),
    #[error("merge: {0}")]
    Merge(#[from] HistogramError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerState {
    pub worker_id: String,
    /// Subject of the worker's client certificate.
    pub identity: String,
    pub n_cores: u32,
    pub registered_at: f64,
    pub last_heartbeat: f64,
    pub running: BTreeSet<TaskKey>,
    pub first_task_at: Option<f64>,
    /// Workers register when their batch slot starts and take tasks once ready.
    pub ready: bool,
    pub idle_since: f64,
}

impl WorkerState {
    /// Time from registration to first task, once the worker has run one.
    pub fn stall(&self) -> Option<f64> {
        self.first_task_at.map(|t| t - self.registered_at)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobState {
    pub job_id: JobId,
    pub pipeline: PipelineSpec,
    pub dataset: DatasetSpec,
    pub chunks: BTreeMap<u64, FileChunk>,
    pub queued: BTreeSet<u64>,
    /// chunk_id -> worker running it
    pub assigned: BTreeMap<u64, String>,
    pub done: BTreeSet<u64>,
    pub failed: BTreeMap<u64, String>,
    pub merged: Vec<Histogram>,
    pub n_events_in: u64,
    pub n_events_pass: u64,
    pub submitted_at: f64,
    pub finished_at: Option<f64>,
}

impl JobState {
    pub fn is_finished(&self) -> bool {
        self.queued.is_empty() && self.assigned.is_empty()
    }

    pub fn phase(&self) -> JobPhase {
        match (self.is_finished(), self.failed.is_empty()) {
            (false, _) => JobPhase::Running,
            (true, true) => JobPhase::Done,
            (true, false) => JobPhase::Failed,
        }
    }

    pub fn progress(&self) -> JobProgress {
        JobProgress {
            job_id: self.job_id,
            n_chunks: self.chunks.len() as u64,
            n_done: self.done.len() as u64,
            n_failed: self.failed.len() as u64,
            finished: self.is_finished(),
        }
    }

    pub fn status(&self) -> JobStatus {
        JobStatus {
            job_id: Some(self.job_id),
            phase: Some(self.phase()),
            n_chunks: self.chunks.len() as u64,
            n_done: self.done.len() as u64,
            n_failed: self.failed.len() as u64,
            histograms: if self.is_finished() { self.merged.clone() } else { Vec::new() },
            error: self.failed.values().next().cloned(),
            ..JobStatus::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JobProgress {
    pub job_id: JobId,
    pub n_chunks: u64,
    pub n_done: u64,
    pub n_failed: u64,
    pub finished: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Scheduler {
    policy: ScalePolicy,
    workers: BTreeMap<String, WorkerState>,
    jobs: BTreeMap<JobId, JobState>,
    queue: BTreeSet<TaskKey>,
    stream: TaskStream,
    next_job: JobId,
    last_busy: f64,
    last_target: Option<u32>,
}

impl Scheduler {
    pub fn new(policy: ScalePolicy) -> Self {
        Self {
            policy,
            next_job: 1,
            ..Self::default()
        }
    }

    pub fn policy(&self) -> &ScalePolicy {
        &self.policy
    }

    pub fn set_policy(&mut self, policy: ScalePolicy) {
        self.policy = policy;
        self.last_target = None;
    }

    pub fn workers(&self) -> &BTreeMap<String, WorkerState> {
        &self.workers
    }

    pub fn worker(&self, id: &str) -> Option<&WorkerState> {
        self.workers.get(id)
    }

    pub fn job(&self, id: JobId) -> Option<&JobState> {
        self.jobs.get(&id)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &JobState> {
        self.jobs.values()
    }

    pub fn stream(&self) -> &TaskStream {
        &self.stream
    }

    pub fn queued_len(&self) -> u64 {
        self.queue.len() as u64
    }

    pub fn running_len(&self) -> u64 {
        self.workers.values().map(|w| w.running.len() as u64).sum()
    }

    pub fn is_busy(&self, worker_id: &str) -> bool {
        self.workers.get(worker_id).is_some_and(|w| !w.running.is_empty())
    }

    pub fn submit_job(
        &mut self,
        pipeline: PipelineSpec,
        dataset: DatasetSpec,
        chunk_size: u64,
        now: f64,
    ) -> Result<JobId, SchedulerError> {
        let compiled = pipeline.compile()?;
        let chunks = plan_chunks(&dataset, chunk_size)?;
        let job_id = self.next_job;
        self.next_job += 1;
        let queued: BTreeSet<u64> = chunks.iter().map(|c| c.chunk_id).collect();
        self.queue.extend(queued.iter().map(|&c| (job_id, c)));
        let job = JobState {
            job_id,
            pipeline,
            dataset,
            chunks: chunks.into_iter().map(|c| (c.chunk_id, c)).collect(),
            queued,
            assigned: BTreeMap::new(),
            done: BTreeSet::new(),
            failed: BTreeMap::new(),
            merged: compiled.empty_histograms(),
            n_events_in: 0,
            n_events_pass: 0,
            submitted_at: now,
            finished_at: None,
        };
        let empty = job.is_finished();
        self.jobs.insert(job_id, job);
        if empty {
            self.jobs.get_mut(&job_id).unwrap().finished_at = Some(now);
        }
        self.last_busy = now;
        if self.policy.mode == ScaleMode::Adaptive {
            let target = autoscale_target(self.queued_len(), self.running_len(), &self.policy);
            self.emit_target(target, now);
        }
        Ok(job_id)
    }

    pub fn register_worker(
        &mut self,
        worker_id: &str,
        identity: &str,
        n_cores: u32,
        now: f64,
        ready: bool,
    ) -> Result<(), SchedulerError> {
        if self.workers.contains_key(worker_id) {
            return Err(SchedulerError::DuplicateWorker(worker_id.to_owned()));
        }
        self.workers.insert(
            worker_id.to_owned(),
            WorkerState {
                worker_id: worker_id.to_owned(),
                identity: identity.to_owned(),
                n_cores: n_cores.max(1),
                registered_at: now,
                last_heartbeat: now,
                running: BTreeSet::new(),
                first_task_at: None,
                ready,
                idle_since: now,
            },
        );
        self.stream
            .push(StreamKind::WorkerUp, worker_id, None, now, format!("cores={n_cores}"));
        Ok(())
    }

    pub fn mark_ready(&mut self, worker_id: &str, now: f64) -> Result<(), SchedulerError> {
        let w = self
            .workers
            .get_mut(worker_id)
            .ok_or_else(|| SchedulerError::UnknownWorker(worker_id.to_owned()))?;
        w.ready = true;
        w.last_heartbeat = w.last_heartbeat.max(now);
        Ok(())
    }

    pub fn heartbeat(&mut self, worker_id: &str, now: f64) -> Result<(), SchedulerError> {
        let w = self
            .workers
            .get_mut(worker_id)
            .ok_or_else(|| SchedulerError::UnknownWorker(worker_id.to_owned()))?;
        w.last_heartbeat = w.last_heartbeat.max(now);
        Ok(())
    }

    /// Assigns queued tasks to workers with free cores.
    pub fn schedule_step(&mut self, now: f64) -> Vec<(String, TaskSpec)> {
        let mut out = Vec::new();
        while let Some(&key) = self.queue.first() {
            let Some(worker_id) = self
                .workers
                .values()
                .filter(|w| w.ready && (w.running.len() as u32) < w.n_cores)
                .min_by(|a, b| a.running.len().cmp(&b.running.len()).then_with(|| a.worker_id.cmp(&b.worker_id)))
                .map(|w| w.worker_id.clone())
            else {
                break;
            };
            self.queue.pop_first();
            let (job_id, chunk_id) = key;
            let job = self.jobs.get_mut(&job_id).expect("queued task belongs to a job");
            job.queued.remove(&chunk_id);
            job.assigned.insert(chunk_id, worker_id.clone());
            let spec = TaskSpec {
                job_id,
                chunk: job.chunks[&chunk_id].clone(),
                pipeline: job.pipeline.clone(),
            };
            let w = self.workers.get_mut(&worker_id).unwrap();
            w.running.insert(key);
            w.first_task_at.get_or_insert(now);
            self.stream
                .push(StreamKind::TaskStart, &worker_id, Some(chunk_id), now, format!("job={job_id}"));
            out.push((worker_id, spec));
        }
        if !out.is_empty() {
            self.last_busy = now;
        }
        out
    }

    fn take_assignment(&mut self, worker_id: &str, job_id: JobId, chunk_id: u64) -> Result<bool, SchedulerError> {
        let job = self.jobs.get(&job_id).ok_or(SchedulerError::UnknownJob(job_id))?;
        if !job.chunks.contains_key(&chunk_id) {
            return Err(SchedulerError::UnknownChunk { job_id, chunk_id });
        }
        if job.done.contains(&chunk_id) || job.failed.contains_key(&chunk_id) {
            debug!(worker_id, job_id, chunk_id, "duplicate completion ignored");
            return Ok(false);
        }
        if job.assigned.get(&chunk_id).map(String::as_str) != Some(worker_id) {
            return Err(SchedulerError::NotOwner {
                worker_id: worker_id.to_owned(),
                job_id,
                chunk_id,
            });
        }
        Ok(true)
    }

    fn release(&mut self, worker_id: &str, key: TaskKey, now: f64) {
        if let Some(w) = self.workers.get_mut(worker_id) {
            w.running.remove(&key);
            if w.running.is_empty() {
                w.idle_since = now;
            }
        }
        self.last_busy = now;
    }

    /// Records a finished task and merges its histograms into the job.
    /// Repeated completions of a finished chunk are ignored.
    pub fn complete_task(
        &mut self,
        worker_id: &str,
        job_id: JobId,
        result: &TaskResult,
        now: f64,
    ) -> Result<JobProgress, SchedulerError> {
        let chunk_id = result.chunk_id;
        if !self.take_assignment(worker_id, job_id, chunk_id)? {
            return Ok(self.jobs[&job_id].progress());
        }
        let job = self.jobs.get_mut(&job_id).unwrap();
        let mut merged = job.merged.clone();
        merge_into(&mut merged, &result.histograms)?;
        job.merged = merged;
        job.n_events_in += result.n_events_in;
        job.n_events_pass += result.n_events_pass;
        job.assigned.remove(&chunk_id);
        job.done.insert(chunk_id);
        if job.is_finished() {
            job.finished_at = Some(now);
        }
        let progress = job.progress();
        self.release(worker_id, (job_id, chunk_id), now);
        self.stream
            .push(StreamKind::TaskEnd, worker_id, Some(chunk_id), now, format!("job={job_id}"));
        Ok(progress)
    }

    pub fn fail_task(
        &mut self,
        worker_id: &str,
        job_id: JobId,
        chunk_id: u64,
        reason: &str,
        now: f64,
    ) -> Result<JobProgress, SchedulerError> {
        if !self.take_assignment(worker_id, job_id, chunk_id)? {
            return Ok(self.jobs[&job_id].progress());
        }
        let job = self.jobs.get_mut(&job_id).unwrap();
        job.assigned.remove(&chunk_id);
        job.failed.insert(chunk_id, reason.to_owned());
        if job.is_finished() {
            job.finished_at = Some(now);
        }
        let progress = job.progress();
        self.release(worker_id, (job_id, chunk_id), now);
        self.stream.push(
            StreamKind::TaskEnd,
            worker_id,
            Some(chunk_id),
            now,
            format!("job={job_id} failed: {reason}"),
        );
        Ok(progress)
    }

    /// Removes a worker and puts its running chunks back in the queue.
    pub fn remove_worker(&mut self, worker_id: &str, now: f64, reason: &str) -> Vec<TaskKey> {
        let Some(w) = self.workers.remove(worker_id) else {
            return Vec::new();
        };
        let requeued: Vec<TaskKey> = w.running.into_iter().collect();
        for &(job_id, chunk_id) in &requeued {
            if let Some(job) = self.jobs.get_mut(&job_id) {
                job.assigned.remove(&chunk_id);
                job.queued.insert(chunk_id);
                self.queue.insert((job_id, chunk_id));
            }
        }
        self.stream.push(StreamKind::WorkerDown, worker_id, None, now, reason);
        requeued
    }

    /// Drops workers whose last heartbeat is older than `timeout` and
    /// re-queues their chunks.
    pub fn reap_lost_workers(&mut self, now: f64, timeout: f64) -> Vec<TaskKey> {
        let lost: Vec<String> = self
            .workers
            .values()
            .filter(|w| now - w.last_heartbeat > timeout)
            .map(|w| w.worker_id.clone())
            .collect();
        lost.iter()
            .flat_map(|id| self.remove_worker(id, now, "heartbeat timeout"))
            .collect()
    }

    /// Fails every unfinished chunk of every job (cluster teardown).
    pub fn abort_jobs(&mut self, reason: &str, now: f64) {
        self.queue.clear();
        for job in self.jobs.values_mut() {
            let open: Vec<u64> = job.queued.iter().copied().chain(job.assigned.keys().copied()).collect();
            for c in open {
                job.failed.insert(c, reason.to_owned());
            }
            job.queued.clear();
            job.assigned.clear();
            job.finished_at.get_or_insert(now);
        }
        for w in self.workers.values_mut() {
            w.running.clear();
        }
    }

    /// Desired number of batch workers at `now`. In adaptive mode an empty
    /// queue holds the current count until every worker has been idle for
    /// `idle_timeout`, then falls to `n_min`.
    pub fn autoscale(&mut self, now: f64, current: u32) -> u32 {
        let target = match self.policy.mode {
            ScaleMode::Fixed(n) => n,
            ScaleMode::Adaptive => {
                let (queued, running) = (self.queued_len(), self.running_len());
                let want = autoscale_target(queued, running, &self.policy);
                if queued + running == 0 && now - self.last_busy < self.policy.idle_timeout {
                    want.max(current.min(self.policy.n_max))
                } else {
                    want
                }
            }
        };
        if queued_or_running(self) {
            self.last_busy = now;
        }
        self.emit_target(target, now);
        target
    }

    fn emit_target(&mut self, target: u32, now: f64) {
        if self.last_target != Some(target) {
            self.last_target = Some(target);
            self.stream
                .push(StreamKind::ScaleDecision, "scheduler", None, now, format!("target={target}"));
        }
    }
}

fn queued_or_running(s: &Scheduler) -> bool {
    s.queued_len() + s.running_len() > 0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetFile;

    fn pipeline() -> PipelineSpec {
        PipelineSpec::from_json(r#"[{"hist":["h","x",2,0,2]}]"#).unwrap()
    }

    fn dataset(files: &[u64]) -> DatasetSpec {
        DatasetSpec::new(
            "ds",
            files
                .iter()
                .enumerate()
                .map(|(i, &n)| DatasetFile {
                    path: format!("f{i}"),
                    n_events: n,
                })
                .collect(),
        )
        .unwrap()
    }

    fn result(chunk_id: u64, worker: &str, bin: usize) -> TaskResult {
        let mut h = Histogram::empty("h", 2, 0.0, 2.0);
        h.counts[bin] = 1;
        h.n_filled = 1;
        TaskResult {
            chunk_id,
            n_events_in: 1,
            n_events_pass: 1,
            histograms: vec![h],
            worker_id: worker.into(),
            t_start: 0.0,
            t_end: 0.0,
        }
    }

    #[test]
    fn submit_plans_ninety_tasks() {
        let mut s = Scheduler::new(ScalePolicy::adaptive());
        let id = s.submit_job(pipeline(), dataset(&[25_000; 18]), 5_000, 0.0).unwrap();
        assert_eq!(s.job(id).unwrap().queued.len(), 90);
        let decision = s.stream().events().last().unwrap();
        assert_eq!(decision.kind, StreamKind::ScaleDecision);
        assert_eq!(decision.detail, "target=23");
    }

    #[test]
    fn submit_errors() {
        let mut s = Scheduler::new(ScalePolicy::fixed(0));
        let hollow = DatasetSpec {
            name: "x".into(),
            files: vec![],
            n_events_total: 0,
        };
        assert!(matches!(s.submit_job(pipeline(), hollow, 10, 0.0), Err(SchedulerError::Dataset(_))));
        let bad = PipelineSpec::from_json(r#"[{"filter":"x>"}]"#).unwrap();
        assert!(matches!(s.submit_job(bad, dataset(&[1]), 10, 0.0), Err(SchedulerError::InvalidPipeline(_))));
    }

    #[test]
    fn assignment_discipline() {
        let mut s = Scheduler::new(ScalePolicy::fixed(0));
        assert!(s.schedule_step(0.0).is_empty());
        s.submit_job(pipeline(), dataset(&[3]), 1, 0.0).unwrap();
        assert!(s.schedule_step(0.0).is_empty(), "no workers");
        s.register_worker("w1", "w1", 4, 0.0, true).unwrap();
        let got = s.schedule_step(1.0);
        assert_eq!(got.len(), 3);
        assert!(got.iter().all(|(w, _)| w == "w1"));
        assert_eq!(s.worker("w1").unwrap().first_task_at, Some(1.0));

        let mut s = Scheduler::new(ScalePolicy::fixed(0));
        s.register_worker("w2", "w2", 4, 0.0, true).unwrap();
        s.register_worker("w1", "w1", 4, 0.0, true).unwrap();
        s.submit_job(pipeline(), dataset(&[1]), 1, 0.0).unwrap();
        assert_eq!(s.schedule_step(0.0)[0].0, "w1");
    }

    #[test]
    fn fewest_running_and_core_cap() {
        let mut s = Scheduler::new(ScalePolicy::fixed(0));
        s.register_worker("w1", "w1", 2, 0.0, true).unwrap();
        s.register_worker("w2", "w2", 2, 0.0, true).unwrap();
        s.register_worker("w3", "w3", 2, 0.0, false).unwrap();
        s.submit_job(pipeline(), dataset(&[10]), 1, 0.0).unwrap();
        let got: Vec<String> = s.schedule_step(0.0).into_iter().map(|(w, _)| w).collect();
        assert_eq!(got, vec!["w1", "w2", "w1", "w2"]);
        assert_eq!(s.queued_len(), 6);
        s.mark_ready("w3", 1.0).unwrap();
        assert_eq!(s.schedule_step(1.0).len(), 2);
    }

    #[test]
    fn completion_merges_and_is_idempotent() {
        let mut s = Scheduler::new(ScalePolicy::fixed(0));
        s.register_worker("w1", "w1", 4, 0.0, true).unwrap();
        s.register_worker("w2", "w2", 4, 0.0, true).unwrap();
        let job = s.submit_job(pipeline(), dataset(&[2]), 1, 0.0).unwrap();
        let a = s.schedule_step(0.0);
        let (w0, t0) = (&a[0].0, a[0].1.chunk.chunk_id);
        let (w1, t1) = (&a[1].0, a[1].1.chunk.chunk_id);

        let err = s.complete_task(w1, job, &result(t0, w1, 0), 1.0).unwrap_err();
        assert!(matches!(err, SchedulerError::NotOwner { .. }));

        let p = s.complete_task(w0, job, &result(t0, w0, 0), 1.0).unwrap();
        assert!(!p.finished);
        let before = s.job(job).unwrap().clone();
        let again = s.complete_task(w0, job, &result(t0, w0, 0), 1.5).unwrap();
        assert_eq!(again, p);
        assert_eq!(s.job(job).unwrap(), &before);

        let p = s.complete_task(w1, job, &result(t1, w1, 1), 2.0).unwrap();
        assert!(p.finished);
        let j = s.job(job).unwrap();
        assert_eq!(j.finished_at, Some(2.0));
        assert_eq!(j.merged[0].counts, vec![1, 1]);
        assert_eq!(j.phase(), JobPhase::Done);
        assert!(matches!(
            s.complete_task(w1, job, &result(99, w1, 0), 2.0),
            Err(SchedulerError::UnknownChunk { .. })
        ));
    }

    #[test]
    fn lost_worker_chunks_are_requeued() {
        let mut s = Scheduler::new(ScalePolicy::fixed(0));
        s.register_worker("w1", "w1", 4, 0.0, true).unwrap();
        s.register_worker("w2", "w2", 4, 0.0, true).unwrap();
        s.submit_job(pipeline(), dataset(&[4]), 1, 0.0).unwrap();
        s.schedule_step(0.0);
        assert!(s.reap_lost_workers(5.0, HEARTBEAT_TIMEOUT).is_empty());
        s.heartbeat("w2", 8.0).unwrap();
        let requeued = s.reap_lost_workers(11.0, HEARTBEAT_TIMEOUT);
        assert_eq!(requeued, vec![(1, 0), (1, 2)]);
        assert!(s.worker("w1").is_none());
        assert_eq!(s.queued_len(), 2);
        assert_eq!(s.stream().events().last().unwrap().kind, StreamKind::WorkerDown);
        // A heartbeat gap shorter than the timeout keeps the worker.
        assert!(s.reap_lost_workers(12.0, HEARTBEAT_TIMEOUT).is_empty());
    }

    #[test]
    fn adaptive_holds_then_scales_to_min() {
        let mut s = Scheduler::new(ScalePolicy::adaptive());
        let job = s.submit_job(pipeline(), dataset(&[8]), 1, 0.0).unwrap();
        assert_eq!(s.autoscale(0.0, 0), 2);
        s.register_worker("w1", "w1", 8, 0.0, true).unwrap();
        for (w, t) in s.schedule_step(1.0) {
            s.complete_task(&w, job, &result(t.chunk.chunk_id, &w, 0), 2.0).unwrap();
        }
        assert_eq!(s.autoscale(10.0, 2), 2, "held while recently busy");
        assert_eq!(s.autoscale(40.0, 2), 0, "idle past timeout");
    }
}

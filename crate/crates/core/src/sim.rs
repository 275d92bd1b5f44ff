//! Virtual-clock facility: one scheduler, the batch simulator and simulated
//! workers, advanced as a discrete-event system in integer microseconds.
//!
//! Simulated workers share an aggregate event rate equally among their
//! running tasks (at most `n_cores` of them). Remaining work is kept in units
//! scaled by `lcm(1..=n_cores)` so every share is an exact integer.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::batch::{BatchAuth, BatchError, BatchSim, BatchState, DelayModel, JobHandle, JobSpec, Transition};
use crate::dataset::DatasetSpec;
use crate::engine::{Histogram, PipelineOutput, PipelineSpec, TaskResult, TaskSpec};
use crate::format::RangeRead;
use crate::scheduler::{
    JobId, ScaleAdapter, ScalePolicy, Scheduler, SchedulerError, TaskStream, AUTOSCALE_INTERVAL, HEARTBEAT_INTERVAL,
    HEARTBEAT_TIMEOUT,
};
use crate::worker::execute_task;

const US: u64 = 1_000_000;

pub fn to_micros(s: f64) -> u64 {
    (s * US as f64).round() as u64
}

pub fn to_secs(us: u64) -> f64 {
    us as f64 / US as f64
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error("simulation passed its time limit of {0} s")]
    TimeLimit(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// How simulated workers produce task results.
#[derive(Clone)]
pub enum Compute {
    /// Only timing is modelled; results carry the chunk's event count and
    /// empty histograms.
    Simulated,
    /// Chunks are read through the source and the pipeline is evaluated.
    Real(Arc<dyn RangeRead>),
}

impl std::fmt::Debug for Compute {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Compute::Simulated => f.write_str("Simulated"),
            Compute::Real(_) => f.write_str("Real"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub policy: ScalePolicy,
    pub delay: DelayModel,
    pub slots: u32,
    pub worker_cores: u32,
    /// Aggregate events/s of one batch worker.
    pub worker_rate: u64,
    /// Cores and rate of a pre-warmed dedicated worker, if any.
    pub dedicated: Option<(u32, u64)>,
    pub batch_token: String,
    pub batch_auth: Option<BatchAuth>,
    pub compute: Compute,
    pub time_limit: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            policy: ScalePolicy::fixed(0),
            delay: DelayModel::default(),
            slots: 200,
            worker_cores: 4,
            worker_rate: 4_000,
            dedicated: None,
            batch_token: String::new(),
            batch_auth: None,
            compute: Compute::Simulated,
            time_limit: 3_600.0,
        }
    }
}

pub const DEDICATED_WORKER_ID: &str = "dedicated";

fn lcm_upto(n: u32) -> u64 {
    fn gcd(a: u64, b: u64) -> u64 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    (1..=u64::from(n.max(1))).fold(1, |acc, k| acc / gcd(acc, k) * k)
}

#[derive(Debug)]
struct RunningTask {
    job_id: JobId,
    chunk_id: u64,
    remaining: u64,
    t_start: u64,
    outcome: Result<PipelineOutput, String>,
}

#[derive(Debug)]
struct SimWorker {
    rate: u64,
    scale: u64,
    alive: bool,
    handle: Option<JobHandle>,
    tasks: Vec<RunningTask>,
    last: u64,
}

impl SimWorker {
    fn new(n_cores: u32, rate: u64, handle: Option<JobHandle>, now: u64) -> Self {
        Self {
            rate,
            scale: lcm_upto(n_cores),
            alive: true,
            handle,
            tasks: Vec::new(),
            last: now,
        }
    }

    fn per_us(&self) -> u64 {
        self.rate * self.scale / self.tasks.len().max(1) as u64
    }

    fn progress_to(&mut self, now: u64) {
        if !self.tasks.is_empty() {
            let dec = (now - self.last).saturating_mul(self.per_us());
            for t in &mut self.tasks {
                t.remaining = t.remaining.saturating_sub(dec);
            }
        }
        self.last = now;
    }

    fn next_completion(&self) -> Option<u64> {
        let min = self.tasks.iter().map(|t| t.remaining).min()?;
        Some(self.last + min.div_ceil(self.per_us()))
    }
}

/// Outcome of one finished job.
#[derive(Debug, Clone, PartialEq)]
pub struct JobReport {
    pub job_id: JobId,
    pub submitted_at: f64,
    pub finished_at: f64,
    pub wallclock: f64,
    pub n_chunks: u64,
    pub n_failed: u64,
    pub n_events_in: u64,
    pub n_events_pass: u64,
    pub histograms: Vec<Histogram>,
}

#[derive(Debug)]
pub struct FacilitySim {
    cfg: SimConfig,
    now: u64,
    sched: Scheduler,
    batch: BatchSim,
    adapter: ScaleAdapter,
    workers: BTreeMap<String, SimWorker>,
    by_handle: BTreeMap<JobHandle, String>,
    kills: Vec<(u64, String)>,
    next_tick: u64,
    next_heartbeat: u64,
}

impl FacilitySim {
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        if !cfg.policy.is_valid() {
            return Err(SimError::Config("n_min must not exceed n_max".into()));
        }
        if cfg.worker_rate == 0 || cfg.worker_cores == 0 {
            return Err(SimError::Config("worker rate and cores must be positive".into()));
        }
        let mut sim = Self {
            sched: Scheduler::new(cfg.policy),
            batch: BatchSim::new(cfg.delay, cfg.slots, cfg.batch_auth.clone()),
            adapter: ScaleAdapter::default(),
            workers: BTreeMap::new(),
            by_handle: BTreeMap::new(),
            kills: Vec::new(),
            now: 0,
            next_tick: 0,
            next_heartbeat: to_micros(HEARTBEAT_INTERVAL),
            cfg,
        };
        if let Some((cores, rate)) = sim.cfg.dedicated {
            sim.sched.register_worker(DEDICATED_WORKER_ID, "dedicated", cores, 0.0, true)?;
            sim.workers
                .insert(DEDICATED_WORKER_ID.to_owned(), SimWorker::new(cores, rate, None, 0));
        }
        Ok(sim)
    }

    pub fn now(&self) -> f64 {
        to_secs(self.now)
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.sched
    }

    pub fn batch(&self) -> &BatchSim {
        &self.batch
    }

    pub fn stream(&self) -> &TaskStream {
        self.sched.stream()
    }

    pub fn set_policy(&mut self, policy: ScalePolicy) {
        self.sched.set_policy(policy);
    }

    /// Submits a job at the current virtual time.
    pub fn submit_job(&mut self, pipeline: PipelineSpec, dataset: DatasetSpec, chunk_size: u64) -> Result<JobId, SimError> {
        let id = self.sched.submit_job(pipeline, dataset, chunk_size, self.now())?;
        self.dispatch();
        Ok(id)
    }

    /// Kills a worker's process at virtual time `at` without telling the
    /// scheduler; it is noticed through missing heartbeats.
    pub fn schedule_kill(&mut self, worker_id: &str, at: f64) {
        self.kills.push((to_micros(at), worker_id.to_owned()));
        self.kills.sort();
    }

    fn next_event(&self) -> u64 {
        let mut t = self.next_tick.min(self.next_heartbeat);
        if let Some(b) = self.batch.next_event_time() {
            t = t.min(to_micros(b).max(self.now));
        }
        if let Some((k, _)) = self.kills.first() {
            t = t.min((*k).max(self.now));
        }
        for w in self.workers.values().filter(|w| w.alive) {
            if let Some(c) = w.next_completion() {
                t = t.min(c);
            }
        }
        t
    }

    /// Runs until every submitted job has finished.
    pub fn run_until_idle(&mut self) -> Result<(), SimError> {
        while self.sched.jobs().any(|j| !j.is_finished()) {
            self.step()?;
        }
        Ok(())
    }

    /// Runs until virtual time `until` (inclusive of events at `until`).
    pub fn run_until(&mut self, until: f64) -> Result<(), SimError> {
        let until = to_micros(until);
        while self.next_event() <= until {
            self.step()?;
        }
        Ok(())
    }

    /// Processes every event at the next event time.
    pub fn step(&mut self) -> Result<(), SimError> {
        let t = self.next_event();
        if to_secs(t) > self.cfg.time_limit {
            return Err(SimError::TimeLimit(self.cfg.time_limit));
        }
        self.now = t;
        let now_s = to_secs(t);

        let fired = self.batch.advance(now_s)?;
        self.apply_transitions(&fired);
        self.finish_tasks()?;
        self.apply_kills();
        if t >= self.next_heartbeat {
            for (id, w) in &self.workers {
                if w.alive {
                    self.sched.heartbeat(id, now_s)?;
                }
            }
            self.next_heartbeat += to_micros(HEARTBEAT_INTERVAL);
        }
        if t >= self.next_tick {
            self.reap();
            self.autoscale()?;
            self.next_tick += to_micros(AUTOSCALE_INTERVAL);
        }
        self.dispatch();
        Ok(())
    }

    fn apply_transitions(&mut self, transitions: &[Transition]) {
        for tr in transitions {
            let Some(id) = self.by_handle.get(&tr.handle).cloned() else {
                continue;
            };
            match tr.to {
                BatchState::Starting => {
                    self.sched
                        .register_worker(&id, "batch", self.cfg.worker_cores, tr.t, false)
                        .expect("fresh worker id");
                    self.workers.insert(
                        id,
                        SimWorker::new(self.cfg.worker_cores, self.cfg.worker_rate, Some(tr.handle), self.now),
                    );
                }
                BatchState::Running => {
                    let _ = self.sched.mark_ready(&id, tr.t);
                }
                BatchState::Cancelled => {
                    self.workers.remove(&id);
                    self.sched.remove_worker(&id, tr.t, "cancelled");
                }
                BatchState::Lost => {
                    if let Some(w) = self.workers.get_mut(&id) {
                        w.alive = false;
                        w.tasks.clear();
                    }
                }
                BatchState::New | BatchState::Queued => {}
            }
        }
    }

    fn finish_tasks(&mut self) -> Result<(), SimError> {
        let now = self.now;
        let mut done = Vec::new();
        for (id, w) in self.workers.iter_mut().filter(|(_, w)| w.alive) {
            w.progress_to(now);
            let mut i = 0;
            while i < w.tasks.len() {
                if w.tasks[i].remaining == 0 {
                    done.push((id.clone(), w.tasks.remove(i)));
                } else {
                    i += 1;
                }
            }
        }
        done.sort_by(|a, b| (a.1.job_id, a.1.chunk_id).cmp(&(b.1.job_id, b.1.chunk_id)));
        for (id, task) in done {
            let now_s = to_secs(now);
            match task.outcome {
                Ok(out) => {
                    let result = TaskResult::from_output(task.chunk_id, out, &id, to_secs(task.t_start), now_s);
                    self.sched.complete_task(&id, task.job_id, &result, now_s)?;
                }
                Err(reason) => {
                    self.sched.fail_task(&id, task.job_id, task.chunk_id, &reason, now_s)?;
                }
            }
        }
        Ok(())
    }

    fn apply_kills(&mut self) {
        while self.kills.first().is_some_and(|(t, _)| *t <= self.now) {
            let (_, id) = self.kills.remove(0);
            let handle = self.workers.get(&id).and_then(|w| w.handle);
            match handle {
                Some(h) => {
                    let (_, trs) = self.batch.kill(h, self.now()).expect("known handle");
                    self.apply_transitions(&trs);
                }
                None => {
                    if let Some(w) = self.workers.get_mut(&id) {
                        w.alive = false;
                        w.tasks.clear();
                    }
                }
            }
        }
    }

    fn reap(&mut self) {
        let now_s = self.now();
        let before: Vec<String> = self.sched.workers().keys().cloned().collect();
        self.sched.reap_lost_workers(now_s, HEARTBEAT_TIMEOUT);
        for id in before {
            if self.sched.worker(&id).is_none() {
                self.workers.remove(&id);
                if let Some(h) = self.adapter.forget_worker(&id) {
                    self.by_handle.remove(&h);
                    let _ = self.batch.cancel(h, now_s);
                }
            }
        }
    }

    fn autoscale(&mut self) -> Result<(), SimError> {
        let now_s = self.now();
        let target = self.sched.autoscale(now_s, self.adapter.current());
        let sched = &self.sched;
        let actions = self.adapter.plan(target, |w| sched.is_busy(w));
        for id in actions.submit {
            let config = serde_json::json!({ "worker_id": id, "n_cores": self.cfg.worker_cores });
            let spec = JobSpec::worker("casa-worker:latest", config, self.cfg.batch_token.clone());
            self.adapter.record_submit(id.clone());
            match self.batch.submit(spec, now_s) {
                Ok((handle, trs)) => {
                    self.adapter.record_handle(&id, handle);
                    self.by_handle.insert(handle, id);
                    self.apply_transitions(&trs);
                }
                Err(e) => {
                    self.adapter.record_rejected(&id);
                    return Err(e.into());
                }
            }
        }
        for handle in actions.cancel {
            let (_, trs) = self.batch.cancel(handle, now_s)?;
            self.apply_transitions(&trs);
            self.by_handle.remove(&handle);
        }
        Ok(())
    }

    fn dispatch(&mut self) {
        let now = self.now;
        for (id, spec) in self.sched.schedule_step(to_secs(now)) {
            let w = self.workers.get_mut(&id).expect("scheduled worker is simulated");
            w.progress_to(now);
            let outcome = match &self.cfg.compute {
                Compute::Simulated => spec
                    .pipeline
                    .compile()
                    .map(|p| PipelineOutput {
                        n_events_in: spec.chunk.len,
                        n_events_pass: 0,
                        histograms: p.empty_histograms(),
                    })
                    .map_err(|e| format!("pipeline: {e}")),
                Compute::Real(source) => execute_task(source.as_ref(), &spec),
            };
            w.tasks.push(task_entry(&spec, w.scale, now, outcome));
        }
    }

    pub fn job_report(&self, job_id: JobId) -> Option<JobReport> {
        let j = self.sched.job(job_id)?;
        let finished_at = j.finished_at?;
        Some(JobReport {
            job_id,
            submitted_at: j.submitted_at,
            finished_at,
            wallclock: finished_at - j.submitted_at,
            n_chunks: j.chunks.len() as u64,
            n_failed: j.failed.len() as u64,
            n_events_in: j.n_events_in,
            n_events_pass: j.n_events_pass,
            histograms: j.merged.clone(),
        })
    }

    /// Number of live simulated workers (dedicated included).
    pub fn live_workers(&self) -> usize {
        self.workers.values().filter(|w| w.alive).count()
    }
}

fn task_entry(spec: &TaskSpec, scale: u64, now: u64, outcome: Result<PipelineOutput, String>) -> RunningTask {
    RunningTask {
        job_id: spec.job_id,
        chunk_id: spec.chunk.chunk_id,
        remaining: spec.chunk.len.max(1) * US * scale,
        t_start: now,
        outcome,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic_spec;
    use crate::scheduler::StreamKind;

    fn pipeline() -> PipelineSpec {
        PipelineSpec::from_json(r#"[{"hist":["x","px",10,0,100]}]"#).unwrap()
    }

    #[test]
    fn lcm_values() {
        assert_eq!(lcm_upto(4), 12);
        assert_eq!(lcm_upto(8), 840);
        assert_eq!(lcm_upto(1), 1);
    }

    #[test]
    fn single_worker_runs_at_configured_rate() {
        let mut sim = FacilitySim::new(SimConfig {
            policy: ScalePolicy::fixed(1),
            delay: DelayModel { s0: 0.0, c: 0.0, ..DelayModel::default() },
            ..SimConfig::default()
        })
        .unwrap();
        let id = sim.submit_job(pipeline(), synthetic_spec("d", 1, 40_000), 5_000).unwrap();
        sim.run_until_idle().unwrap();
        let r = sim.job_report(id).unwrap();
        assert_eq!(r.n_events_in, 40_000);
        assert!((r.wallclock - 10.0).abs() < 1e-6, "{}", r.wallclock);
    }

    #[test]
    fn dedicated_worker_needs_no_batch() {
        let mut sim = FacilitySim::new(SimConfig {
            dedicated: Some((8, 8_000)),
            ..SimConfig::default()
        })
        .unwrap();
        let id = sim.submit_job(pipeline(), synthetic_spec("d", 1, 5_000), 5_000).unwrap();
        sim.run_until_idle().unwrap();
        assert_eq!(sim.job_report(id).unwrap().n_failed, 0);
        assert_eq!(sim.batch().submissions(), 0);
        let starts: Vec<_> = sim
            .stream()
            .events()
            .iter()
            .filter(|e| e.kind == StreamKind::TaskStart)
            .collect();
        assert_eq!(starts[0].t, 0.0);
    }

    #[test]
    fn wave_stalls_follow_delay_model() {
        let mut sim = FacilitySim::new(SimConfig {
            policy: ScalePolicy::fixed(3),
            ..SimConfig::default()
        })
        .unwrap();
        sim.submit_job(pipeline(), synthetic_spec("d", 3, 20_000), 5_000).unwrap();
        sim.run_until_idle().unwrap();
        let stalls: Vec<f64> = ["w001", "w002", "w003"]
            .iter()
            .map(|w| sim.scheduler().worker(w).unwrap().stall().unwrap())
            .collect();
        assert_eq!(stalls, vec![3.0, 4.0, 5.0]);
    }

    #[test]
    fn killed_worker_is_reaped_and_replaced() {
        let mut sim = FacilitySim::new(SimConfig {
            policy: ScalePolicy::fixed(2),
            ..SimConfig::default()
        })
        .unwrap();
        let id = sim.submit_job(pipeline(), synthetic_spec("d", 4, 25_000), 5_000).unwrap();
        sim.schedule_kill("w001", 6.0);
        sim.run_until_idle().unwrap();
        let r = sim.job_report(id).unwrap();
        assert_eq!((r.n_failed, r.n_events_in), (0, 100_000));
        let downs: Vec<_> = sim
            .stream()
            .events()
            .iter()
            .filter(|e| e.kind == StreamKind::WorkerDown)
            .collect();
        assert_eq!(downs.len(), 1);
        assert_eq!(downs[0].worker_id, "w001");
        assert!(downs[0].t > 6.0 + HEARTBEAT_TIMEOUT - HEARTBEAT_INTERVAL);
        assert!(sim.scheduler().worker("w003").is_some());
    }

    #[test]
    fn adaptive_first_tick_requests_one_worker_per_four_tasks() {
        let mut sim = FacilitySim::new(SimConfig {
            policy: ScalePolicy::adaptive(),
            ..SimConfig::default()
        })
        .unwrap();
        sim.submit_job(pipeline(), synthetic_spec("d", 4, 130_000), 5_000).unwrap();
        sim.step().unwrap();
        assert_eq!(sim.batch().submissions(), 26);
        sim.run_until_idle().unwrap();
        sim.run_until(sim.now() + 40.0).unwrap();
        assert_eq!(sim.live_workers(), 0);
    }
}

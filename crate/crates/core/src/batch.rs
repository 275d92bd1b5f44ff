//! A simulated HTCondor-like batch system.
//!
//! Jobs wait for a slot, then start after a delay drawn from [`DelayModel`]:
//! the k-th start granted at one instant (a scale-out wave) becomes Running
//! `s0 + c*k` seconds later. The core is a single-threaded discrete-event
//! machine: callers submit and cancel at explicit times and pull transitions
//! with [`BatchSim::advance`]. Identical inputs and seed give an identical
//! transition log.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auth::{Audience, TokenError, TokenKeys};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BatchError {
    #[error("batch token rejected: {0}")]
    Token(#[from] TokenError),
    #[error("malformed job spec: {0}")]
    Malformed(String),
    #[error("time moved backwards: {to} < {now}")]
    TimeBackwards { now: f64, to: f64 },
    #[error("unknown job handle {0}")]
    UnknownHandle(u64),
}

/// Submit description for one worker job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    /// Informational container image tag.
    pub image: String,
    pub n_cores: u32,
    pub memory_gb: u32,
    pub open_ports: Vec<u16>,
    /// Worker configuration handed to the launched worker.
    pub worker_config: serde_json::Value,
    pub batch_token: String,
}

impl JobSpec {
    /// A batch worker with the default 4 cores / 6 GB shape.
    pub fn worker(image: &str, worker_config: serde_json::Value, batch_token: String) -> Self {
        Self {
            image: image.to_owned(),
            n_cores: 4,
            memory_gb: 6,
            open_ports: Vec::new(),
            worker_config,
            batch_token,
        }
    }

    fn validate(&self) -> Result<(), BatchError> {
        if self.n_cores == 0 {
            return Err(BatchError::Malformed("n_cores must be > 0".into()));
        }
        if self.memory_gb == 0 {
            return Err(BatchError::Malformed("memory_gb must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayModel {
    /// Base startup delay, seconds.
    pub s0: f64,
    /// Extra delay per position in the wave, seconds.
    pub c: f64,
    pub seed: u64,
    /// Relative jitter; each delay is scaled by `1 + jitter * u`, u in [-1, 1).
    pub jitter: f64,
}

impl Default for DelayModel {
    fn default() -> Self {
        Self {
            s0: 2.0,
            c: 1.0,
            seed: 0,
            jitter: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotPool {
    pub total: u32,
    pub in_use: u32,
}

impl SlotPool {
    pub fn new(total: u32) -> Self {
        Self { total, in_use: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BatchState {
    New,
    Queued,
    Starting,
    Running,
    Cancelled,
    /// Worker died without being cancelled (failure injection).
    Lost,
}

impl BatchState {
    pub fn is_terminal(self) -> bool {
        matches!(self, BatchState::Cancelled | BatchState::Lost)
    }

    fn holds_slot(self) -> bool {
        matches!(self, BatchState::Starting | BatchState::Running)
    }
}

impl fmt::Display for BatchState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

pub type JobHandle = u64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub handle: JobHandle,
    pub from: BatchState,
    pub to: BatchState,
    pub t: f64,
}

pub const TRANSITION_CSV_HEADER: &str = "handle,from,to,t";

pub fn transitions_to_csv(log: &[Transition]) -> String {
    let mut out = String::from(TRANSITION_CSV_HEADER);
    out.push('\n');
    for tr in log {
        out.push_str(&format!("{},{},{},{:.6}\n", tr.handle, tr.from, tr.to, tr.t));
    }
    out
}

#[derive(Debug, Clone)]
struct BatchJob {
    spec: JobSpec,
    state: BatchState,
    start_at: Option<f64>,
}

/// Token checking for submissions: the facility keys plus the unix time
/// that corresponds to virtual time zero.
#[derive(Debug, Clone)]
pub struct BatchAuth {
    pub keys: TokenKeys,
    pub epoch_unix: u64,
}

#[derive(Debug)]
pub struct BatchSim {
    now: f64,
    delay: DelayModel,
    pool: SlotPool,
    auth: Option<BatchAuth>,
    rng: ChaCha8Rng,
    next_handle: JobHandle,
    jobs: BTreeMap<JobHandle, BatchJob>,
    queue: VecDeque<JobHandle>,
    /// (time bits, seq) -> handle becoming Running. Times are >= 0 so their
    /// bit patterns sort numerically.
    pending: BinaryHeap<Reverse<(u64, u64, JobHandle)>>,
    seq: u64,
    wave: Option<(f64, u32)>,
    log: Vec<Transition>,
    submissions: u64,
}

impl BatchSim {
    pub fn new(delay: DelayModel, slots: u32, auth: Option<BatchAuth>) -> Self {
        Self {
            now: 0.0,
            rng: ChaCha8Rng::seed_from_u64(delay.seed),
            delay,
            pool: SlotPool::new(slots),
            auth,
            next_handle: 1,
            jobs: BTreeMap::new(),
            queue: VecDeque::new(),
            pending: BinaryHeap::new(),
            seq: 0,
            wave: None,
            log: Vec::new(),
            submissions: 0,
        }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn pool(&self) -> SlotPool {
        self.pool
    }

    pub fn log(&self) -> &[Transition] {
        &self.log
    }

    pub fn submissions(&self) -> u64 {
        self.submissions
    }

    pub fn state(&self, handle: JobHandle) -> Option<BatchState> {
        self.jobs.get(&handle).map(|j| j.state)
    }

    pub fn start_time(&self, handle: JobHandle) -> Option<f64> {
        self.jobs.get(&handle).and_then(|j| j.start_at)
    }

    pub fn spec(&self, handle: JobHandle) -> Option<&JobSpec> {
        self.jobs.get(&handle).map(|j| &j.spec)
    }

    pub fn count_in(&self, state: BatchState) -> usize {
        self.jobs.values().filter(|j| j.state == state).count()
    }

    pub fn next_event_time(&self) -> Option<f64> {
        self.pending.peek().map(|Reverse((bits, _, _))| f64::from_bits(*bits))
    }

    fn move_clock(&mut self, to: f64) -> Result<(), BatchError> {
        if to < self.now {
            return Err(BatchError::TimeBackwards { now: self.now, to });
        }
        self.now = to;
        Ok(())
    }

    fn transition(&mut self, handle: JobHandle, to: BatchState, t: f64) -> Transition {
        let job = self.jobs.get_mut(&handle).expect("known handle");
        let from = job.state;
        if from.holds_slot() && !to.holds_slot() {
            self.pool.in_use -= 1;
        } else if !from.holds_slot() && to.holds_slot() {
            self.pool.in_use += 1;
        }
        job.state = to;
        let tr = Transition { handle, from, to, t };
        self.log.push(tr);
        tr
    }

    fn startup_delay(&mut self, k: u32) -> f64 {
        let u: f64 = self.rng.gen_range(-1.0..1.0);
        let base = self.delay.s0 + self.delay.c * f64::from(k);
        (base * (1.0 + self.delay.jitter * u)).max(0.0)
    }

    /// Grants free slots to queued jobs at the current time.
    fn start_queued(&mut self) -> Vec<Transition> {
        let mut out = Vec::new();
        while self.pool.in_use < self.pool.total {
            let Some(handle) = self.queue.pop_front() else { break };
            let k = match self.wave {
                Some((t, k)) if t == self.now => k + 1,
                _ => 1,
            };
            self.wave = Some((self.now, k));
            // Whole microseconds, so the event loop's clock lands on it exactly.
            let start_at = ((self.now + self.startup_delay(k)) * 1e6).round() / 1e6;
            self.jobs.get_mut(&handle).unwrap().start_at = Some(start_at);
            out.push(self.transition(handle, BatchState::Starting, self.now));
            self.seq += 1;
            self.pending.push(Reverse((start_at.to_bits(), self.seq, handle)));
        }
        out
    }

    /// Accepts a job at time `now`. Returns the handle and the transitions it
    /// caused immediately (Queued, and Starting if a slot was free).
    pub fn submit(&mut self, spec: JobSpec, now: f64) -> Result<(JobHandle, Vec<Transition>), BatchError> {
        if let Some(auth) = &self.auth {
            let unix_now = auth.epoch_unix + now.max(0.0) as u64;
            auth.keys.verify(&spec.batch_token, Audience::Batch, unix_now)?;
        }
        spec.validate()?;
        self.move_clock(now)?;
        let handle = self.next_handle;
        self.next_handle += 1;
        self.submissions += 1;
        self.jobs.insert(
            handle,
            BatchJob {
                spec,
                state: BatchState::New,
                start_at: None,
            },
        );
        let mut out = vec![self.transition(handle, BatchState::Queued, now)];
        self.queue.push_back(handle);
        out.extend(self.start_queued());
        Ok((handle, out))
    }

    /// Fires every transition scheduled at or before `to`, in time order.
    pub fn advance(&mut self, to: f64) -> Result<Vec<Transition>, BatchError> {
        if to < self.now {
            return Err(BatchError::TimeBackwards { now: self.now, to });
        }
        let mut out = Vec::new();
        while let Some(&Reverse((bits, _, handle))) = self.pending.peek() {
            let t = f64::from_bits(bits);
            if t > to {
                break;
            }
            self.pending.pop();
            self.now = t;
            if self.jobs[&handle].state == BatchState::Starting {
                out.push(self.transition(handle, BatchState::Running, t));
            }
        }
        self.now = to;
        Ok(out)
    }

    fn stop(&mut self, handle: JobHandle, now: f64, to: BatchState) -> Result<(BatchState, Vec<Transition>), BatchError> {
        let state = self.state(handle).ok_or(BatchError::UnknownHandle(handle))?;
        if state.is_terminal() {
            return Ok((state, Vec::new()));
        }
        self.move_clock(now)?;
        if state == BatchState::Queued {
            self.queue.retain(|&h| h != handle);
        }
        let mut out = vec![self.transition(handle, to, now)];
        out.extend(self.start_queued());
        Ok((to, out))
    }

    /// Cancels a job. Cancelling a finished job is a no-op that returns its
    /// final state.
    pub fn cancel(&mut self, handle: JobHandle, now: f64) -> Result<(BatchState, Vec<Transition>), BatchError> {
        self.stop(handle, now, BatchState::Cancelled)
    }

    /// Kills a job's worker without telling anyone (failure injection).
    pub fn kill(&mut self, handle: JobHandle, now: f64) -> Result<(BatchState, Vec<Transition>), BatchError> {
        self.stop(handle, now, BatchState::Lost)
    }

    /// Handles of jobs that are not yet terminal.
    pub fn active(&self) -> Vec<JobHandle> {
        self.jobs
            .iter()
            .filter(|(_, j)| !j.state.is_terminal())
            .map(|(h, _)| *h)
            .collect()
    }
}

//! Queue-length driven scaling and the batch scale-out bookkeeping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    Fixed(u32),
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalePolicy {
    /// Pending tasks each worker is expected to absorb (rho).
    pub tasks_per_worker: u32,
    pub n_min: u32,
    pub n_max: u32,
    /// Seconds of idleness before an adaptive cluster drops to `n_min`.
    pub idle_timeout: f64,
    pub mode: ScaleMode,
}

impl Default for ScalePolicy {
    fn default() -> Self {
        Self {
            tasks_per_worker: 4,
            n_min: 0,
            n_max: 50,
            idle_timeout: 30.0,
            mode: ScaleMode::Adaptive,
        }
    }
}

impl ScalePolicy {
    pub fn fixed(n: u32) -> Self {
        Self {
            mode: ScaleMode::Fixed(n),
            ..Self::default()
        }
    }

    pub fn adaptive() -> Self {
        Self::default()
    }

    pub fn is_valid(&self) -> bool {
        self.n_min <= self.n_max && self.tasks_per_worker >= 1
    }
}

/// `clamp(ceil((queued + running) / rho), n_min, n_max)`.
pub fn autoscale_target(queued: u64, running: u64, policy: &ScalePolicy) -> u32 {
    let rho = u64::from(policy.tasks_per_worker.max(1));
    let want = (queued + running).div_ceil(rho);
    want.clamp(u64::from(policy.n_min), u64::from(policy.n_max)) as u32
}

/// What the scale-out adapter should do to reach a target.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScaleActions {
    /// Worker ids to request from the batch system.
    pub submit: Vec<String>,
    /// Batch handles to cancel.
    pub cancel: Vec<u64>,
}

/// Tracks batch jobs the scheduler asked for, from submission until the
/// worker goes away.
#[derive(Debug, Clone, Default)]
pub struct ScaleAdapter {
    next_seq: u32,
    /// handle -> worker id, for every batch job not yet cancelled.
    jobs: BTreeMap<u64, String>,
    /// Worker ids submitted but not yet acknowledged with a handle.
    unacked: Vec<String>,
}

impl ScaleAdapter {
    pub fn next_worker_id(&mut self) -> String {
        self.next_seq += 1;
        format!("w{:03}", self.next_seq)
    }

    /// Number of batch workers requested and still alive or pending.
    pub fn current(&self) -> u32 {
        (self.jobs.len() + self.unacked.len()) as u32
    }

    pub fn record_submit(&mut self, worker_id: String) {
        self.unacked.push(worker_id);
    }

    pub fn record_handle(&mut self, worker_id: &str, handle: u64) {
        self.unacked.retain(|w| w != worker_id);
        self.jobs.insert(handle, worker_id.to_owned());
    }

    /// Drops a submission that the batch system refused.
    pub fn record_rejected(&mut self, worker_id: &str) {
        self.unacked.retain(|w| w != worker_id);
    }

    pub fn forget_worker(&mut self, worker_id: &str) -> Option<u64> {
        let handle = self.jobs.iter().find(|(_, w)| *w == worker_id).map(|(h, _)| *h)?;
        self.jobs.remove(&handle);
        Some(handle)
    }

    pub fn handles(&self) -> impl Iterator<Item = (u64, &str)> {
        self.jobs.iter().map(|(h, w)| (*h, w.as_str()))
    }

    pub fn handle_of(&self, worker_id: &str) -> Option<u64> {
        self.jobs.iter().find(|(_, w)| *w == worker_id).map(|(h, _)| *h)
    }

    /// Plans submissions or cancellations. `is_busy(worker_id)` reports
    /// whether a worker has running tasks; busy workers are never cancelled.
    /// Newest jobs are cancelled first.
    pub fn plan(&mut self, target: u32, is_busy: impl Fn(&str) -> bool) -> ScaleActions {
        let current = self.current();
        let mut actions = ScaleActions::default();
        if target > current {
            for _ in current..target {
                actions.submit.push(self.next_worker_id());
            }
        } else if target < current {
            let mut excess = current - target;
            for (handle, worker) in self.jobs.iter().rev() {
                if excess == 0 {
                    break;
                }
                if !is_busy(worker) {
                    actions.cancel.push(*handle);
                    excess -= 1;
                }
            }
            for handle in &actions.cancel {
                self.jobs.remove(handle);
            }
        }
        actions
    }
}

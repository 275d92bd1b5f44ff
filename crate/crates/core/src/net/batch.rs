//! Batch-sim on the wall clock: a TCP service that accepts worker job
//! submissions and launches worker agents when their slot starts.

use std::collections::BTreeMap;
use std::io;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinHandle;
use tokio::time::Instant;
use tracing::{debug, warn};

use super::worker::{run_worker, WorkerConfig};
use super::NetError;
use crate::batch::{transitions_to_csv, BatchError, BatchSim, BatchState, JobHandle, JobSpec, Transition};
use crate::wire::{self, ScaleOp, ScaleRequest, WireError, WireMessage};

/// Starts whatever a batch job runs once its slot is granted.
pub trait WorkerLauncher: Send + Sync {
    fn launch(&self, handle: JobHandle, spec: &JobSpec) -> Option<JoinHandle<()>>;
}

/// Runs the worker agent described by the job's `worker_config` inside this
/// process.
#[derive(Debug, Default, Clone, Copy)]
pub struct InProcessWorkers;

impl WorkerLauncher for InProcessWorkers {
    fn launch(&self, handle: JobHandle, spec: &JobSpec) -> Option<JoinHandle<()>> {
        let cfg: WorkerConfig = match serde_json::from_value(spec.worker_config.clone()) {
            Ok(c) => c,
            Err(e) => {
                warn!(handle, "job carries no usable worker config: {e}");
                return None;
            }
        };
        Some(tokio::spawn(async move {
            if let Err(e) = run_worker(cfg).await {
                warn!(handle, "worker exited: {e}");
            }
        }))
    }
}

/// Launches nothing; used when only the batch bookkeeping matters.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoWorkers;

impl WorkerLauncher for NoWorkers {
    fn launch(&self, _: JobHandle, _: &JobSpec) -> Option<JoinHandle<()>> {
        None
    }
}

struct Inner {
    sim: BatchSim,
    running: BTreeMap<JobHandle, JoinHandle<()>>,
}

pub struct BatchService {
    inner: Mutex<Inner>,
    start: Instant,
    launcher: Arc<dyn WorkerLauncher>,
}

impl std::fmt::Debug for BatchService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BatchService").field("now", &self.now()).finish_non_exhaustive()
    }
}

impl BatchService {
    /// The sim's virtual time zero is the moment of construction.
    pub fn new(sim: BatchSim, launcher: Arc<dyn WorkerLauncher>) -> Arc<Self> {
        Arc::new(Self {
            inner: Mutex::new(Inner {
                sim,
                running: BTreeMap::new(),
            }),
            start: Instant::now(),
            launcher,
        })
    }

    pub fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().expect("batch lock")
    }

    fn apply(&self, inner: &mut Inner, trs: &[Transition]) {
        for tr in trs {
            match tr.to {
                BatchState::Running => {
                    let spec = inner.sim.spec(tr.handle).cloned();
                    if let Some(h) = spec.and_then(|s| self.launcher.launch(tr.handle, &s)) {
                        inner.running.insert(tr.handle, h);
                    }
                }
                BatchState::Cancelled | BatchState::Lost => {
                    if let Some(h) = inner.running.remove(&tr.handle) {
                        h.abort();
                    }
                }
                _ => {}
            }
        }
    }

    /// Moves the sim to the current wall-clock time.
    pub fn tick(&self) -> Result<(), BatchError> {
        let now = self.now();
        let mut inner = self.lock();
        let now = now.max(inner.sim.now());
        let trs = inner.sim.advance(now)?;
        self.apply(&mut inner, &trs);
        Ok(())
    }

    pub fn submit(&self, spec: JobSpec) -> Result<JobHandle, BatchError> {
        let now = self.now();
        let mut inner = self.lock();
        let now = now.max(inner.sim.now());
        let trs = inner.sim.advance(now)?;
        self.apply(&mut inner, &trs);
        let (handle, trs) = inner.sim.submit(spec, now)?;
        self.apply(&mut inner, &trs);
        Ok(handle)
    }

    pub fn cancel(&self, handle: JobHandle) -> Result<BatchState, BatchError> {
        self.stop(handle, false)
    }

    /// Simulates the node dying under the job.
    pub fn kill(&self, handle: JobHandle) -> Result<BatchState, BatchError> {
        self.stop(handle, true)
    }

    fn stop(&self, handle: JobHandle, kill: bool) -> Result<BatchState, BatchError> {
        let now = self.now();
        let mut inner = self.lock();
        let now = now.max(inner.sim.now());
        let (state, trs) = if kill {
            inner.sim.kill(handle, now)?
        } else {
            inner.sim.cancel(handle, now)?
        };
        self.apply(&mut inner, &trs);
        Ok(state)
    }

    pub fn state(&self, handle: JobHandle) -> Option<BatchState> {
        self.lock().sim.state(handle)
    }

    pub fn spec(&self, handle: JobHandle) -> Option<JobSpec> {
        self.lock().sim.spec(handle).cloned()
    }

    pub fn submissions(&self) -> u64 {
        self.lock().sim.submissions()
    }

    pub fn count_in(&self, state: BatchState) -> usize {
        self.lock().sim.count_in(state)
    }

    pub fn active(&self) -> Vec<JobHandle> {
        self.lock().sim.active()
    }

    pub fn transitions_csv(&self) -> String {
        transitions_to_csv(self.lock().sim.log())
    }

    /// Cancels every live job.
    pub fn cancel_all(&self) {
        for h in self.active() {
            let _ = self.cancel(h);
        }
    }

    pub fn handle_request(&self, req: ScaleRequest) -> ScaleRequest {
        let res = match req.op {
            ScaleOp::Submit(spec) => self.submit(spec),
            ScaleOp::Cancel { handle } => self.cancel(handle).map(|_| handle),
            other => {
                return rejected(format!("unsupported operation {other:?}"));
            }
        };
        match res {
            Ok(handle) => ScaleRequest {
                op: ScaleOp::Accepted { handle },
            },
            Err(e) => rejected(e.to_string()),
        }
    }
}

fn rejected(reason: String) -> ScaleRequest {
    ScaleRequest {
        op: ScaleOp::Rejected { reason },
    }
}

/// Drives the sim clock every `tick` and serves submissions until the
/// listener fails.
pub async fn serve_batch(listener: TcpListener, svc: Arc<BatchService>, tick: Duration) -> io::Result<()> {
    let driver = {
        let svc = svc.clone();
        tokio::spawn(async move {
            let mut iv = tokio::time::interval(tick);
            loop {
                iv.tick().await;
                if let Err(e) = svc.tick() {
                    warn!("batch clock: {e}");
                }
            }
        })
    };
    let res = loop {
        let (sock, peer) = match listener.accept().await {
            Ok(a) => a,
            Err(e) => break Err(e),
        };
        let svc = svc.clone();
        tokio::spawn(async move {
            if let Err(e) = batch_connection(sock, svc).await {
                debug!(%peer, "batch connection ended: {e}");
            }
        });
    };
    driver.abort();
    res
}

async fn batch_connection(mut sock: TcpStream, svc: Arc<BatchService>) -> Result<(), WireError> {
    loop {
        let msg: WireMessage = match wire::recv_async(&mut sock).await {
            Ok(m) => m,
            Err(WireError::Closed) => return Ok(()),
            Err(e) => return Err(e),
        };
        let reply = match msg {
            WireMessage::ScaleRequest(req) => svc.handle_request(req),
            other => rejected(format!("unexpected {}", other.kind())),
        };
        wire::send_async(&mut sock, &WireMessage::ScaleRequest(reply)).await?;
    }
}

/// Async client for the batch service; one connection per request.
#[derive(Debug, Clone)]
pub struct BatchClient {
    addr: String,
}

impl BatchClient {
    pub fn new(addr: &str) -> Self {
        Self { addr: addr.to_owned() }
    }

    async fn call(&self, op: ScaleOp) -> Result<u64, NetError> {
        let mut sock = tokio::time::timeout(Duration::from_secs(5), TcpStream::connect(&self.addr))
            .await
            .map_err(|_| NetError::Timeout(format!("connect {}", self.addr)))??;
        wire::send_async(&mut sock, &WireMessage::ScaleRequest(ScaleRequest { op })).await?;
        match wire::recv_async(&mut sock).await? {
            WireMessage::ScaleRequest(ScaleRequest {
                op: ScaleOp::Accepted { handle },
            }) => Ok(handle),
            WireMessage::ScaleRequest(ScaleRequest {
                op: ScaleOp::Rejected { reason },
            }) => Err(NetError::Rejected(reason)),
            other => Err(NetError::Protocol(format!("unexpected reply {}", other.kind()))),
        }
    }

    pub async fn submit(&self, spec: JobSpec) -> Result<JobHandle, NetError> {
        self.call(ScaleOp::Submit(spec)).await
    }

    pub async fn cancel(&self, handle: JobHandle) -> Result<(), NetError> {
        self.call(ScaleOp::Cancel { handle }).await.map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auth::{unix_now, Audience, TokenKeys};
    use crate::batch::{BatchAuth, DelayModel};

    #[tokio::test]
    async fn submit_cancel_over_tcp_with_token() {
        let keys = TokenKeys::generate();
        let sim = BatchSim::new(
            DelayModel {
                s0: 0.05,
                c: 0.01,
                ..DelayModel::default()
            },
            4,
            Some(BatchAuth {
                keys: keys.clone(),
                epoch_unix: unix_now(),
            }),
        );
        let svc = BatchService::new(sim, Arc::new(NoWorkers));
        let l = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = l.local_addr().unwrap().to_string();
        tokio::spawn(serve_batch(l, svc.clone(), Duration::from_millis(10)));
        let client = BatchClient::new(&addr);

        let tok = keys.mint("alice", Audience::Batch, unix_now(), 600);
        let h = client
            .submit(JobSpec::worker("img", serde_json::json!({}), tok))
            .await
            .unwrap();
        let bad = client
            .submit(JobSpec::worker("img", serde_json::json!({}), "junk".into()))
            .await;
        assert!(matches!(bad, Err(NetError::Rejected(r)) if r.contains("batch token rejected")));
        let data = keys.mint("alice", Audience::Data, unix_now(), 600);
        assert!(client.submit(JobSpec::worker("img", serde_json::json!({}), data)).await.is_err());

        tokio::time::sleep(Duration::from_millis(200)).await;
        assert_eq!(svc.state(h), Some(BatchState::Running));
        client.cancel(h).await.unwrap();
        assert_eq!(svc.state(h), Some(BatchState::Cancelled));
        assert!(client.cancel(999).await.is_err());
        assert_eq!(svc.submissions(), 1);
        assert!(svc.transitions_csv().lines().count() >= 4);
    }
}

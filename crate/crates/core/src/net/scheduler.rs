//! The per-cluster scheduler service. One actor task owns the [`Scheduler`];
//! connection tasks talk to it over a command channel.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use rustls::ServerConfig;
use tokio::io::{AsyncRead, AsyncWrite};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::JoinHandle;
use tokio::time::Instant;
use tracing::{debug, info, warn};

use super::batch::BatchClient;
use super::worker::WorkerConfig;
use super::{tls, NetError};
use crate::batch::JobSpec;
use crate::dataset::{Catalog, DEFAULT_CHUNK_SIZE};
use crate::scheduler::{ScaleAdapter, ScaleMode, ScalePolicy, Scheduler, AUTOSCALE_INTERVAL, HEARTBEAT_TIMEOUT};
use crate::wire::{self, DatasetRef, JobPhase, JobStatus, ScaleOp, ScaleRequest, SubmitJob, WireError, WireMessage};

/// How the scheduler asks the batch system for workers.
#[derive(Debug, Clone)]
pub struct BatchLink {
    pub addr: String,
    pub batch_token: String,
    pub image: String,
    /// Copied into every worker job with `worker_id` filled in.
    pub template: WorkerConfig,
}

#[derive(Clone)]
pub struct SchedulerServerConfig {
    pub cluster_id: String,
    pub policy: ScalePolicy,
    pub tls: Arc<ServerConfig>,
    pub catalog: Arc<Catalog>,
    pub batch: Option<BatchLink>,
    pub tick: Duration,
    pub heartbeat_timeout: f64,
}

impl SchedulerServerConfig {
    pub fn new(cluster_id: &str, tls: Arc<ServerConfig>, catalog: Arc<Catalog>) -> Self {
        Self {
            cluster_id: cluster_id.to_owned(),
            policy: ScalePolicy::fixed(0),
            tls,
            catalog,
            batch: None,
            tick: Duration::from_secs_f64(AUTOSCALE_INTERVAL),
            heartbeat_timeout: HEARTBEAT_TIMEOUT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerSummary {
    pub worker_id: String,
    pub identity: String,
    pub n_cores: u32,
    pub running: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub workers: Vec<WorkerSummary>,
    pub queued: u64,
    pub running: u64,
    /// Batch jobs the scheduler currently holds.
    pub batch_jobs: u32,
    pub stream_csv: String,
}

type Outbox = mpsc::UnboundedSender<WireMessage>;

enum Cmd {
    Join {
        worker_id: String,
        identity: String,
        n_cores: u32,
        conn: u64,
        outbox: Outbox,
        reply: oneshot::Sender<Result<(), String>>,
    },
    FromWorker {
        worker_id: String,
        conn: u64,
        msg: WireMessage,
    },
    Gone {
        worker_id: String,
        conn: u64,
    },
    Request {
        msg: WireMessage,
        reply: oneshot::Sender<WireMessage>,
    },
    Snapshot(oneshot::Sender<Snapshot>),
    Abort {
        reason: String,
        reply: oneshot::Sender<Vec<u64>>,
    },
}

struct Actor {
    cluster_id: String,
    catalog: Arc<Catalog>,
    batch: Option<(BatchLink, BatchClient)>,
    heartbeat_timeout: f64,
    sched: Scheduler,
    adapter: ScaleAdapter,
    sessions: BTreeMap<String, (u64, Outbox)>,
    start: Instant,
}

impl Actor {
    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    async fn handle(&mut self, cmd: Cmd) {
        match cmd {
            Cmd::Join {
                worker_id,
                identity,
                n_cores,
                conn,
                outbox,
                reply,
            } => {
                let now = self.now();
                if self.sessions.remove(&worker_id).is_some() || self.sched.worker(&worker_id).is_some() {
                    self.sched.remove_worker(&worker_id, now, "reconnected");
                }
                let res = self
                    .sched
                    .register_worker(&worker_id, &identity, n_cores, now, true)
                    .map_err(|e| e.to_string());
                if res.is_ok() {
                    info!(cluster = %self.cluster_id, worker = %worker_id, %identity, "worker joined");
                    self.sessions.insert(worker_id, (conn, outbox));
                }
                let _ = reply.send(res);
            }
            Cmd::FromWorker { worker_id, conn, msg } => {
                if self.sessions.get(&worker_id).map(|s| s.0) != Some(conn) {
                    return;
                }
                let now = self.now();
                let res = match msg {
                    WireMessage::Heartbeat(_) => self.sched.heartbeat(&worker_id, now).map(|_| ()),
                    WireMessage::TaskDone(d) => self
                        .sched
                        .complete_task(&worker_id, d.job_id, &d.result, now)
                        .map(|_| ()),
                    WireMessage::TaskFailed(f) => self
                        .sched
                        .fail_task(&worker_id, f.job_id, f.chunk_id, &f.reason, now)
                        .map(|_| ()),
                    other => {
                        debug!("scheduler ignores {} from a worker", other.kind());
                        Ok(())
                    }
                };
                if let Err(e) = res {
                    warn!(worker = %worker_id, "worker message rejected: {e}");
                }
                let _ = self.sched.heartbeat(&worker_id, now);
            }
            Cmd::Gone { worker_id, conn } => {
                if self.sessions.get(&worker_id).map(|s| s.0) == Some(conn) {
                    self.drop_worker(&worker_id, "disconnected").await;
                }
            }
            Cmd::Request { msg, reply } => {
                let submitted = matches!(msg, WireMessage::SubmitJob(_));
                let out = self.request(msg);
                let _ = reply.send(out);
                if submitted {
                    // Scale out right away instead of waiting for the next tick.
                    self.tick().await;
                }
            }
            Cmd::Snapshot(reply) => {
                let _ = reply.send(self.snapshot());
            }
            Cmd::Abort { reason, reply } => {
                let now = self.now();
                let open: Vec<u64> = self.sched.jobs().filter(|j| !j.is_finished()).map(|j| j.job_id).collect();
                self.sched.abort_jobs(&reason, now);
                let batch_workers: Vec<String> = self.adapter.handles().map(|(_, w)| w.to_owned()).collect();
                for id in batch_workers {
                    self.drop_worker(&id, &reason).await;
                }
                self.sched.set_policy(ScalePolicy {
                    mode: ScaleMode::Fixed(0),
                    ..*self.sched.policy()
                });
                let _ = reply.send(open);
            }
        }
        self.dispatch();
    }

    /// Forgets a worker, re-queues its chunks and releases its batch job.
    async fn drop_worker(&mut self, worker_id: &str, reason: &str) {
        let now = self.now();
        self.sessions.remove(worker_id);
        self.sched.remove_worker(worker_id, now, reason);
        if let Some(h) = self.adapter.forget_worker(worker_id) {
            if let Some((_, client)) = &self.batch {
                if let Err(e) = client.cancel(h).await {
                    debug!("batch cancel {h}: {e}");
                }
            }
        }
    }

    fn request(&mut self, msg: WireMessage) -> WireMessage {
        let now = self.now();
        match msg {
            WireMessage::SubmitJob(SubmitJob {
                pipeline,
                dataset,
                chunk_size,
            }) => {
                let spec = match dataset {
                    DatasetRef::Name(n) => self.catalog.get(&n).cloned(),
                    DatasetRef::Spec(s) => Ok(s),
                };
                let res = spec.map_err(|e| e.to_string()).and_then(|spec| {
                    self.sched
                        .submit_job(pipeline, spec, chunk_size.unwrap_or(DEFAULT_CHUNK_SIZE), now)
                        .map_err(|e| e.to_string())
                });
                let status = match res {
                    Ok(id) => self.sched.job(id).map(|j| j.status()).unwrap_or_default(),
                    Err(e) => JobStatus {
                        phase: Some(JobPhase::Failed),
                        error: Some(e),
                        ..JobStatus::default()
                    },
                };
                WireMessage::JobStatus(self.stamp(status))
            }
            WireMessage::JobStatus(q) => {
                let mut status = match q.job_id {
                    Some(id) => self.sched.job(id).map(|j| j.status()).unwrap_or_else(|| JobStatus {
                        job_id: Some(id),
                        error: Some(format!("unknown job {id}")),
                        ..JobStatus::default()
                    }),
                    None => JobStatus::default(),
                };
                status.tag = q.tag;
                WireMessage::JobStatus(self.stamp(status))
            }
            WireMessage::ScaleRequest(ScaleRequest {
                op: ScaleOp::SetPolicy(mode),
            }) => {
                let policy = ScalePolicy {
                    mode,
                    ..*self.sched.policy()
                };
                let op = if self.batch.is_none() && mode != ScaleMode::Fixed(0) {
                    ScaleOp::Rejected {
                        reason: "cluster has no batch link".into(),
                    }
                } else {
                    self.sched.set_policy(policy);
                    ScaleOp::Accepted { handle: 0 }
                };
                WireMessage::ScaleRequest(ScaleRequest { op })
            }
            other => WireMessage::JobStatus(self.stamp(JobStatus {
                error: Some(format!("unexpected {}", other.kind())),
                ..JobStatus::default()
            })),
        }
    }

    fn stamp(&self, mut s: JobStatus) -> JobStatus {
        s.cluster_id = Some(self.cluster_id.clone());
        s
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            workers: self
                .sched
                .workers()
                .values()
                .map(|w| WorkerSummary {
                    worker_id: w.worker_id.clone(),
                    identity: w.identity.clone(),
                    n_cores: w.n_cores,
                    running: w.running.len(),
                })
                .collect(),
            queued: self.sched.queued_len(),
            running: self.sched.running_len(),
            batch_jobs: self.adapter.current(),
            stream_csv: self.sched.stream().to_csv(),
        }
    }

    fn dispatch(&mut self) {
        loop {
            let now = self.now();
            let mut dead = Vec::new();
            for (worker_id, spec) in self.sched.schedule_step(now) {
                let sent = self
                    .sessions
                    .get(&worker_id)
                    .is_some_and(|(_, tx)| tx.send(WireMessage::AssignTask(spec)).is_ok());
                if !sent {
                    dead.push(worker_id);
                }
            }
            if dead.is_empty() {
                return;
            }
            for id in dead {
                self.sessions.remove(&id);
                self.sched.remove_worker(&id, now, "unreachable");
            }
        }
    }

    async fn tick(&mut self) {
        let now = self.now();
        let before: Vec<String> = self.sched.workers().keys().cloned().collect();
        self.sched.reap_lost_workers(now, self.heartbeat_timeout);
        for id in before {
            if self.sched.worker(&id).is_none() && self.sessions.contains_key(&id) {
                self.drop_worker(&id, "heartbeat timeout").await;
            }
        }
        if let Some((link, client)) = self.batch.clone() {
            let target = self.sched.autoscale(now, self.adapter.current());
            let owners: BTreeMap<u64, String> = self.adapter.handles().map(|(h, w)| (h, w.to_owned())).collect();
            let sched = &self.sched;
            let actions = self.adapter.plan(target, |w| sched.is_busy(w));
            for id in actions.submit {
                let cfg = WorkerConfig {
                    worker_id: id.clone(),
                    ..link.template.clone()
                };
                let value = serde_json::to_value(&cfg).expect("worker config serializes");
                let mut spec = JobSpec::worker(&link.image, value, link.batch_token.clone());
                spec.n_cores = cfg.n_cores;
                self.adapter.record_submit(id.clone());
                match client.submit(spec).await {
                    Ok(h) => self.adapter.record_handle(&id, h),
                    Err(e) => {
                        warn!(cluster = %self.cluster_id, "batch submit refused: {e}");
                        self.adapter.record_rejected(&id);
                    }
                }
            }
            for h in actions.cancel {
                if let Err(e) = client.cancel(h).await {
                    debug!("batch cancel {h}: {e}");
                }
                if let Some(id) = owners.get(&h) {
                    self.sessions.remove(id);
                    self.sched.remove_worker(id, self.now(), "scaled down");
                }
            }
        }
        self.dispatch();
    }
}

/// A running scheduler service.
pub struct SchedulerHandle {
    addr: SocketAddr,
    cluster_id: String,
    cmd: mpsc::UnboundedSender<Cmd>,
    shutdown: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl std::fmt::Debug for SchedulerHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SchedulerHandle")
            .field("addr", &self.addr)
            .field("cluster_id", &self.cluster_id)
            .finish_non_exhaustive()
    }
}

impl SchedulerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn cluster_id(&self) -> &str {
        &self.cluster_id
    }

    async fn ask(&self, msg: WireMessage) -> Result<WireMessage, NetError> {
        let (tx, rx) = oneshot::channel();
        self.cmd
            .send(Cmd::Request { msg, reply: tx })
            .map_err(|_| NetError::Protocol("scheduler stopped".into()))?;
        rx.await.map_err(|_| NetError::Protocol("scheduler stopped".into()))
    }

    pub async fn submit(&self, job: SubmitJob) -> Result<JobStatus, NetError> {
        expect_status(self.ask(WireMessage::SubmitJob(job)).await?)
    }

    pub async fn status(&self, job_id: u64) -> Result<JobStatus, NetError> {
        let q = JobStatus {
            job_id: Some(job_id),
            ..JobStatus::default()
        };
        expect_status(self.ask(WireMessage::JobStatus(q)).await?)
    }

    pub async fn set_mode(&self, mode: ScaleMode) -> Result<(), NetError> {
        let msg = WireMessage::ScaleRequest(ScaleRequest {
            op: ScaleOp::SetPolicy(mode),
        });
        match self.ask(msg).await? {
            WireMessage::ScaleRequest(ScaleRequest {
                op: ScaleOp::Accepted { .. },
            }) => Ok(()),
            WireMessage::ScaleRequest(ScaleRequest {
                op: ScaleOp::Rejected { reason },
            }) => Err(NetError::Rejected(reason)),
            other => Err(NetError::Protocol(format!("unexpected {}", other.kind()))),
        }
    }

    pub async fn snapshot(&self) -> Result<Snapshot, NetError> {
        let (tx, rx) = oneshot::channel();
        self.cmd
            .send(Cmd::Snapshot(tx))
            .map_err(|_| NetError::Protocol("scheduler stopped".into()))?;
        rx.await.map_err(|_| NetError::Protocol("scheduler stopped".into()))
    }

    /// Polls until at least `n` workers are registered.
    pub async fn wait_for_workers(&self, n: usize, timeout: Duration) -> Result<Snapshot, NetError> {
        let deadline = Instant::now() + timeout;
        loop {
            let snap = self.snapshot().await?;
            if snap.workers.len() >= n {
                return Ok(snap);
            }
            if Instant::now() >= deadline {
                return Err(NetError::Timeout(format!("{} of {n} workers", snap.workers.len())));
            }
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
    }

    /// Polls until the job has finished.
    pub async fn wait_job(&self, job_id: u64, timeout: Duration) -> Result<JobStatus, NetError> {
        let deadline = Instant::now() + timeout;
        loop {
            let s = self.status(job_id).await?;
            if s.phase != Some(JobPhase::Running) {
                return Ok(s);
            }
            if Instant::now() >= deadline {
                return Err(NetError::Timeout(format!("job {job_id}")));
            }
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
    }

    /// Fails all unfinished work and releases every batch worker. Returns
    /// the jobs that were still running.
    pub async fn abort(&self, reason: &str) -> Result<Vec<u64>, NetError> {
        let (tx, rx) = oneshot::channel();
        self.cmd
            .send(Cmd::Abort {
                reason: reason.to_owned(),
                reply: tx,
            })
            .map_err(|_| NetError::Protocol("scheduler stopped".into()))?;
        rx.await.map_err(|_| NetError::Protocol("scheduler stopped".into()))
    }

    /// Stops the listener, the actor and every open connection.
    pub fn shutdown(&self) {
        let _ = self.shutdown.send(true);
        for t in &self.tasks {
            t.abort();
        }
    }
}

impl Drop for SchedulerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn expect_status(msg: WireMessage) -> Result<JobStatus, NetError> {
    match msg {
        WireMessage::JobStatus(s) => Ok(s),
        other => Err(NetError::Protocol(format!("unexpected {}", other.kind()))),
    }
}

/// Starts the actor and the mTLS listener.
pub fn start_scheduler(listener: TcpListener, cfg: SchedulerServerConfig) -> Result<SchedulerHandle, NetError> {
    let addr = listener.local_addr()?;
    let (cmd_tx, mut cmd_rx) = mpsc::unbounded_channel::<Cmd>();
    let (shut_tx, shut_rx) = watch::channel(false);
    let mut actor = Actor {
        cluster_id: cfg.cluster_id.clone(),
        catalog: cfg.catalog.clone(),
        batch: cfg.batch.clone().map(|l| {
            let c = BatchClient::new(&l.addr);
            (l, c)
        }),
        heartbeat_timeout: cfg.heartbeat_timeout,
        sched: Scheduler::new(cfg.policy),
        adapter: ScaleAdapter::default(),
        sessions: BTreeMap::new(),
        start: Instant::now(),
    };
    let tick = cfg.tick;
    let actor_task = tokio::spawn(async move {
        let mut iv = tokio::time::interval(tick);
        iv.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                cmd = cmd_rx.recv() => match cmd {
                    Some(c) => actor.handle(c).await,
                    None => break,
                },
                _ = iv.tick() => actor.tick().await,
            }
        }
    });
    let acceptor = tls::acceptor(cfg.tls.clone());
    let listen_cmd = cmd_tx.clone();
    let cluster = cfg.cluster_id.clone();
    let listen_task = tokio::spawn(async move {
        let mut next_conn = 0u64;
        loop {
            let (sock, peer) = match listener.accept().await {
                Ok(a) => a,
                Err(e) => {
                    warn!(%cluster, "scheduler accept failed: {e}");
                    continue;
                }
            };
            next_conn += 1;
            let (acceptor, cmd, mut shut) = (acceptor.clone(), listen_cmd.clone(), shut_rx.clone());
            let conn = next_conn;
            tokio::spawn(async move {
                tokio::select! {
                    r = connection(sock, acceptor, cmd, conn) => {
                        if let Err(e) = r {
                            debug!(%peer, "scheduler connection ended: {e}");
                        }
                    }
                    _ = shut.changed() => {}
                }
            });
        }
    });
    Ok(SchedulerHandle {
        addr,
        cluster_id: cfg.cluster_id,
        cmd: cmd_tx,
        shutdown: shut_tx,
        tasks: vec![actor_task, listen_task],
    })
}

async fn connection(
    sock: TcpStream,
    acceptor: tokio_rustls::TlsAcceptor,
    cmd: mpsc::UnboundedSender<Cmd>,
    conn: u64,
) -> Result<(), NetError> {
    sock.set_nodelay(true)?;
    let stream = tokio::time::timeout(Duration::from_secs(10), acceptor.accept(sock))
        .await
        .map_err(|_| NetError::Timeout("tls handshake".into()))??;
    let identity = tls::peer_identity(stream.get_ref().1).unwrap_or_default();
    let (mut rd, mut wr) = tokio::io::split(stream);
    let first: WireMessage = wire::recv_async(&mut rd).await?;
    match first {
        WireMessage::WorkerHello(hello) => worker_session(rd, wr, hello, identity, cmd, conn).await,
        msg => {
            let mut msg = msg;
            loop {
                let reply = round_trip(&cmd, msg).await?;
                wire::send_async(&mut wr, &reply).await?;
                msg = match wire::recv_async(&mut rd).await {
                    Ok(m) => m,
                    Err(WireError::Closed) => return Ok(()),
                    Err(e) => return Err(e.into()),
                };
            }
        }
    }
}

async fn round_trip(cmd: &mpsc::UnboundedSender<Cmd>, msg: WireMessage) -> Result<WireMessage, NetError> {
    let (tx, rx) = oneshot::channel();
    cmd.send(Cmd::Request { msg, reply: tx })
        .map_err(|_| NetError::Protocol("scheduler stopped".into()))?;
    rx.await.map_err(|_| NetError::Protocol("scheduler stopped".into()))
}

async fn worker_session<R, W>(
    mut rd: R,
    mut wr: W,
    hello: wire::WorkerHello,
    identity: String,
    cmd: mpsc::UnboundedSender<Cmd>,
    conn: u64,
) -> Result<(), NetError>
where
    R: AsyncRead + Unpin,
    W: AsyncWrite + Unpin + Send + 'static,
{
    let worker_id = hello.worker_id.clone();
    let (out_tx, mut out_rx) = mpsc::unbounded_channel();
    let (tx, rx) = oneshot::channel();
    cmd.send(Cmd::Join {
        worker_id: worker_id.clone(),
        identity,
        n_cores: hello.n_cores,
        conn,
        outbox: out_tx,
        reply: tx,
    })
    .map_err(|_| NetError::Protocol("scheduler stopped".into()))?;
    let joined = rx.await.map_err(|_| NetError::Protocol("scheduler stopped".into()))?;
    if let Err(e) = joined {
        let refusal = JobStatus {
            error: Some(e.clone()),
            ..JobStatus::default()
        };
        wire::send_async(&mut wr, &WireMessage::JobStatus(refusal)).await?;
        return Err(NetError::Rejected(e));
    }
    wire::send_async(&mut wr, &WireMessage::WorkerHello(hello)).await?;
    let writer = tokio::spawn(async move {
        while let Some(m) = out_rx.recv().await {
            if wire::send_async(&mut wr, &m).await.is_err() {
                break;
            }
        }
    });
    let res = loop {
        match wire::recv_async::<_, WireMessage>(&mut rd).await {
            Ok(msg) => {
                let c = Cmd::FromWorker {
                    worker_id: worker_id.clone(),
                    conn,
                    msg,
                };
                if cmd.send(c).is_err() {
                    break Ok(());
                }
            }
            Err(WireError::Closed) => break Ok(()),
            Err(e) => break Err(e.into()),
        }
    };
    writer.abort();
    let _ = cmd.send(Cmd::Gone { worker_id, conn });
    res
}

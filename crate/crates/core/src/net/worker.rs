//! Worker agent: registers with the scheduler over mTLS, heartbeats, and runs
//! assigned chunks with data read through the proxy open-hook.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::io::{AsyncRead, AsyncWrite};
use tokio::sync::{mpsc, Semaphore};
use tokio::task::AbortHandle;
use tracing::{debug, info, warn};

use super::{tls, unix_secs_f64, NetError};
use crate::engine::{TaskResult, TaskSpec};
use crate::proxy::OpenHook;
use crate::scheduler::HEARTBEAT_INTERVAL;
use crate::wire::{self, Heartbeat, TaskDone, TaskFailed, WireError, WireMessage, WorkerHello};
use crate::worker::execute_task;

fn default_cores() -> u32 {
    4
}
fn default_heartbeat() -> f64 {
    HEARTBEAT_INTERVAL
}
fn default_retries() -> u32 {
    3
}
fn default_retry_delay() -> f64 {
    1.0
}

/// Everything a worker needs, as handed over by the batch job or read from
/// a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerConfig {
    pub worker_id: String,
    /// Where to connect (the ingress address, or the scheduler directly).
    pub scheduler_addr: String,
    /// SNI value and expected certificate name of the scheduler.
    pub server_name: String,
    pub ca_cert: String,
    pub user_cert: String,
    pub user_key: String,
    pub data_token: String,
    pub proxy_addr: String,
    #[serde(default = "default_cores")]
    pub n_cores: u32,
    #[serde(default = "default_heartbeat")]
    pub heartbeat_interval: f64,
    /// Reconnection attempts after a lost or failed connection.
    #[serde(default = "default_retries")]
    pub connect_retries: u32,
    #[serde(default = "default_retry_delay")]
    pub retry_delay: f64,
}

struct AbortOnDrop(Vec<AbortHandle>);

impl Drop for AbortOnDrop {
    fn drop(&mut self) {
        for h in &self.0 {
            h.abort();
        }
    }
}

/// Runs until the scheduler refuses the worker, or until `connect_retries`
/// reconnection attempts in a row have failed.
pub async fn run_worker(cfg: WorkerConfig) -> Result<(), NetError> {
    let tls_cfg = tls::client_config(&cfg.ca_cert, &cfg.user_cert, &cfg.user_key)?;
    let hook = Arc::new(OpenHook::new(&cfg.proxy_addr, &cfg.data_token));
    let mut retries_left = cfg.connect_retries;
    loop {
        let mut registered = false;
        let res = match tls::connect(tls_cfg.clone(), &cfg.scheduler_addr, &cfg.server_name).await {
            Ok(stream) => session(&cfg, stream, hook.clone(), &mut registered).await,
            Err(e) => Err(e),
        };
        match res {
            Err(NetError::Rejected(r)) => return Err(NetError::Rejected(r)),
            Ok(()) => info!(worker = %cfg.worker_id, "scheduler closed the connection"),
            Err(e) => warn!(worker = %cfg.worker_id, "scheduler link: {e}"),
        }
        if registered {
            retries_left = cfg.connect_retries;
        } else if retries_left == 0 {
            return Err(NetError::Unreachable {
                addr: cfg.scheduler_addr.clone(),
                attempts: cfg.connect_retries + 1,
            });
        } else {
            retries_left -= 1;
        }
        tokio::time::sleep(Duration::from_secs_f64(cfg.retry_delay)).await;
    }
}

async fn session<S>(
    cfg: &WorkerConfig,
    stream: S,
    hook: Arc<OpenHook>,
    registered: &mut bool,
) -> Result<(), NetError>
where
    S: AsyncRead + AsyncWrite + Unpin + Send + 'static,
{
    let (mut rd, mut wr) = tokio::io::split(stream);
    let hello = WorkerHello {
        worker_id: cfg.worker_id.clone(),
        n_cores: cfg.n_cores,
    };
    wire::send_async(&mut wr, &WireMessage::WorkerHello(hello)).await?;
    match wire::recv_async(&mut rd).await? {
        WireMessage::WorkerHello(_) => {}
        WireMessage::JobStatus(s) => {
            return Err(NetError::Rejected(s.error.unwrap_or_else(|| "refused".into())));
        }
        other => return Err(NetError::Protocol(format!("unexpected {}", other.kind()))),
    }
    *registered = true;
    info!(worker = %cfg.worker_id, "registered");

    let (tx, mut rx) = mpsc::unbounded_channel::<WireMessage>();
    let writer = tokio::spawn(async move {
        while let Some(m) = rx.recv().await {
            if let Err(e) = wire::send_async(&mut wr, &m).await {
                debug!("worker write failed: {e}");
                break;
            }
        }
    });
    let period = Duration::from_secs_f64(cfg.heartbeat_interval);
    let heart = {
        let (tx, worker_id) = (tx.clone(), cfg.worker_id.clone());
        tokio::spawn(async move {
            let mut iv = tokio::time::interval_at(tokio::time::Instant::now() + period, period);
            for seq in 1.. {
                iv.tick().await;
                let hb = Heartbeat {
                    worker_id: worker_id.clone(),
                    seq,
                };
                if tx.send(WireMessage::Heartbeat(hb)).is_err() {
                    break;
                }
            }
        })
    };
    let _guard = AbortOnDrop(vec![writer.abort_handle(), heart.abort_handle()]);
    let slots = Arc::new(Semaphore::new(cfg.n_cores.max(1) as usize));

    loop {
        match wire::recv_async::<_, WireMessage>(&mut rd).await {
            Ok(WireMessage::AssignTask(spec)) => {
                let (tx, slots, hook) = (tx.clone(), slots.clone(), hook.clone());
                let worker_id = cfg.worker_id.clone();
                tokio::spawn(async move {
                    let Ok(_permit) = slots.acquire_owned().await else { return };
                    let msg = run_task(hook, spec, worker_id).await;
                    let _ = tx.send(msg);
                });
            }
            Ok(other) => debug!("worker ignores {}", other.kind()),
            Err(WireError::Closed) => return Ok(()),
            Err(e) => return Err(e.into()),
        }
    }
}

async fn run_task(hook: Arc<OpenHook>, spec: TaskSpec, worker_id: String) -> WireMessage {
    let (job_id, chunk_id) = (spec.job_id, spec.chunk.chunk_id);
    let t_start = unix_secs_f64();
    let out = tokio::task::spawn_blocking(move || execute_task(hook.as_ref(), &spec))
        .await
        .unwrap_or_else(|e| Err(format!("task panicked: {e}")));
    match out {
        Ok(out) => WireMessage::TaskDone(TaskDone {
            job_id,
            result: TaskResult::from_output(chunk_id, out, &worker_id, t_start, unix_secs_f64()),
        }),
        Err(reason) => WireMessage::TaskFailed(TaskFailed {
            job_id,
            chunk_id,
            worker_id,
            reason,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tokio::net::TcpListener;

    fn config(addr: &str) -> WorkerConfig {
        let ca = crate::auth::ClusterCa::generate("t-1").unwrap();
        let user = ca.issue_user("t").unwrap();
        WorkerConfig {
            worker_id: "w1".into(),
            scheduler_addr: addr.into(),
            server_name: "t-1.dask.local".into(),
            ca_cert: ca.cert_pem(),
            user_cert: user.cert_pem,
            user_key: user.key_pem,
            data_token: String::new(),
            proxy_addr: "127.0.0.1:1".into(),
            n_cores: 2,
            heartbeat_interval: 2.0,
            connect_retries: 3,
            retry_delay: 0.01,
        }
    }

    #[tokio::test]
    async fn gives_up_after_retries() {
        let l = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = l.local_addr().unwrap().to_string();
        drop(l);
        let err = run_worker(config(&addr)).await.unwrap_err();
        assert!(matches!(err, NetError::Unreachable { attempts: 4, .. }), "{err}");
    }

    #[tokio::test(start_paused = true)]
    async fn heartbeats_every_interval() {
        let (ours, theirs) = tokio::io::duplex(1 << 16);
        let cfg = config("unused");
        let hook = Arc::new(OpenHook::new("127.0.0.1:1", ""));
        tokio::spawn(async move {
            let mut registered = false;
            let _ = session(&cfg, theirs, hook, &mut registered).await;
        });
        let (mut rd, mut wr) = tokio::io::split(ours);
        let hello: WireMessage = wire::recv_async(&mut rd).await.unwrap();
        wire::send_async(&mut wr, &hello).await.unwrap();
        let t0 = tokio::time::Instant::now();
        let mut beats = 0;
        loop {
            tokio::select! {
                m = wire::recv_async::<_, WireMessage>(&mut rd) => {
                    assert!(matches!(m.unwrap(), WireMessage::Heartbeat(_)));
                    beats += 1;
                }
                _ = tokio::time::sleep_until(t0 + Duration::from_millis(10_001)) => break,
            }
        }
        assert_eq!(beats, 5);
    }
}

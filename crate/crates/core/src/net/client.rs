//! User-side client of a cluster's scheduler, reached through the ingress.

use std::sync::Arc;
use std::time::Duration;

use rustls::ClientConfig;
use tokio::net::TcpStream;
use tokio_rustls::client::TlsStream;

use super::{tls, NetError};
use crate::auth::CredentialBundle;
use crate::scheduler::ScaleMode;
use crate::wire::{self, JobPhase, JobStatus, ScaleOp, ScaleRequest, SubmitJob, WireMessage};

pub struct ClusterClient {
    stream: TlsStream<TcpStream>,
}

impl std::fmt::Debug for ClusterClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClusterClient").finish_non_exhaustive()
    }
}

impl ClusterClient {
    pub async fn connect(cfg: Arc<ClientConfig>, addr: &str, hostname: &str) -> Result<Self, NetError> {
        Ok(Self {
            stream: tls::connect(cfg, addr, hostname).await?,
        })
    }

    /// Connects with the user certificate of a credential bundle.
    pub async fn with_bundle(bundle: &CredentialBundle, addr: &str) -> Result<Self, NetError> {
        let cfg = tls::client_config(&bundle.ca_cert, &bundle.user_cert, &bundle.user_key)?;
        Self::connect(cfg, addr, &bundle.hostname).await
    }

    pub async fn call(&mut self, msg: &WireMessage) -> Result<WireMessage, NetError> {
        wire::send_async(&mut self.stream, msg).await?;
        Ok(wire::recv_async(&mut self.stream).await?)
    }

    async fn status_call(&mut self, msg: &WireMessage) -> Result<JobStatus, NetError> {
        match self.call(msg).await? {
            WireMessage::JobStatus(s) => Ok(s),
            other => Err(NetError::Protocol(format!("unexpected {}", other.kind()))),
        }
    }

    pub async fn submit(&mut self, job: SubmitJob) -> Result<JobStatus, NetError> {
        self.status_call(&WireMessage::SubmitJob(job)).await
    }

    pub async fn status(&mut self, job_id: u64) -> Result<JobStatus, NetError> {
        let q = JobStatus {
            job_id: Some(job_id),
            ..JobStatus::default()
        };
        self.status_call(&WireMessage::JobStatus(q)).await
    }

    /// Round trip carrying only a tag; the reply names the cluster that
    /// answered.
    pub async fn echo(&mut self, tag: &str) -> Result<JobStatus, NetError> {
        let q = JobStatus {
            tag: Some(tag.to_owned()),
            ..JobStatus::default()
        };
        self.status_call(&WireMessage::JobStatus(q)).await
    }

    pub async fn set_mode(&mut self, mode: ScaleMode) -> Result<(), NetError> {
        let msg = WireMessage::ScaleRequest(ScaleRequest {
            op: ScaleOp::SetPolicy(mode),
        });
        match self.call(&msg).await? {
            WireMessage::ScaleRequest(ScaleRequest {
                op: ScaleOp::Accepted { .. },
            }) => Ok(()),
            WireMessage::ScaleRequest(ScaleRequest {
                op: ScaleOp::Rejected { reason },
            }) => Err(NetError::Rejected(reason)),
            other => Err(NetError::Protocol(format!("unexpected {}", other.kind()))),
        }
    }

    /// Polls the job until it leaves the running phase.
    pub async fn wait(&mut self, job_id: u64, timeout: Duration) -> Result<JobStatus, NetError> {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let s = self.status(job_id).await?;
            if s.phase != Some(JobPhase::Running) {
                return Ok(s);
            }
            if tokio::time::Instant::now() >= deadline {
                return Err(NetError::Timeout(format!("job {job_id}")));
            }
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
    }
}

//! Facility composition root: authd, ingress, data proxy and origin, the
//! batch system, and per-user clusters provisioned on login.

use std::collections::BTreeMap;
use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinHandle;
use tracing::{info, warn};

use crate::auth::{unix_now, AuthError, Authd, CredentialBundle, IdpVerifier, MintedCluster, SignedAssertion, TokenKeys};
use crate::batch::{BatchAuth, BatchSim, DelayModel};
use crate::dataset::{Catalog, DatasetError};
use crate::ingress::{serve_admin, serve_ingress, IngressStats, RouteTable, DEFAULT_PEEK_TIMEOUT};
use crate::net::batch::{serve_batch, BatchService, InProcessWorkers};
use crate::net::scheduler::{start_scheduler, BatchLink, SchedulerHandle, SchedulerServerConfig, Snapshot};
use crate::net::worker::{run_worker, WorkerConfig};
use crate::net::{tls, NetError};
use crate::proxy::{serve_origin, serve_proxy, DataProxy, DirOrigin, ProxyConfig, TcpOrigin};
use crate::scheduler::ScalePolicy;
use crate::sim::DEDICATED_WORKER_ID;
use crate::wire;

#[derive(Debug, Error)]
pub enum FacilityError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Auth(#[from] AuthError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("config: {0}")]
    Config(String),
    #[error("unknown cluster")]
    UnknownCluster,
    #[error("no free scheduler port")]
    PortExhaustion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FacilityConfig {
    /// Shared TLS ingress address.
    pub listen: String,
    pub admin: String,
    pub authd: String,
    pub proxy: String,
    pub origin: String,
    pub batch: String,
    /// First scheduler port; 0 lets the OS pick.
    pub scheduler_port_base: u16,
    pub max_clusters: u16,
    pub domain: String,
    /// PEM public key of the identity provider, or a path to one.
    pub idp_public_key: Option<String>,
    pub required_group: String,
    pub token_ttl: u64,
    pub slots: u32,
    pub delay: DelayModel,
    pub data_root: PathBuf,
    pub federation_host: String,
    pub federation_credential: String,
    pub cache_dir: Option<PathBuf>,
    pub block_size: u64,
    pub max_cache_bytes: Option<u64>,
    pub policy: ScalePolicy,
    pub dedicated_cores: u32,
    pub worker_cores: u32,
    pub peek_timeout: f64,
    /// Scheduler housekeeping period, seconds.
    pub tick: f64,
}

impl Default for FacilityConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8443".into(),
            admin: "127.0.0.1:8444".into(),
            authd: "127.0.0.1:8445".into(),
            proxy: "127.0.0.1:9000".into(),
            origin: "127.0.0.1:9001".into(),
            batch: "127.0.0.1:9002".into(),
            scheduler_port_base: 8801,
            max_clusters: 64,
            domain: "dask.local".into(),
            idp_public_key: None,
            required_group: "cms".into(),
            token_ttl: 3600,
            slots: 200,
            delay: DelayModel::default(),
            data_root: PathBuf::from("data"),
            federation_host: "fed.example".into(),
            federation_credential: "federation-secret".into(),
            cache_dir: None,
            block_size: crate::proxy::DEFAULT_BLOCK_SIZE,
            max_cache_bytes: None,
            policy: ScalePolicy::fixed(0),
            dedicated_cores: 8,
            worker_cores: 4,
            peek_timeout: DEFAULT_PEEK_TIMEOUT.as_secs_f64(),
            tick: 1.0,
        }
    }
}

impl FacilityConfig {
    /// Every listener on an OS-chosen loopback port.
    pub fn ephemeral(data_root: &Path) -> Self {
        let any = "127.0.0.1:0".to_owned();
        Self {
            listen: any.clone(),
            admin: any.clone(),
            authd: any.clone(),
            proxy: any.clone(),
            origin: any.clone(),
            batch: any,
            scheduler_port_base: 0,
            data_root: data_root.to_path_buf(),
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self, FacilityError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| FacilityError::Config(format!("{}: {e}", path.display())))
    }

    fn idp(&self) -> Result<Option<IdpVerifier>, FacilityError> {
        let Some(key) = &self.idp_public_key else { return Ok(None) };
        let pem = if key.contains("-----BEGIN") {
            key.clone()
        } else {
            std::fs::read_to_string(key)?
        };
        IdpVerifier::from_pem(&pem)
            .map(Some)
            .map_err(|e| FacilityError::Config(format!("identity provider key: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub cluster_id: String,
    pub subject: String,
    /// Loopback address the scheduler listens on.
    pub backend: String,
    pub hostname: String,
    pub dedicated_worker: String,
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeardownReport {
    pub cluster_id: String,
    /// Jobs that were still running and are now failed.
    pub failed_jobs: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FacilityAddrs {
    pub ingress: SocketAddr,
    pub admin: SocketAddr,
    pub authd: SocketAddr,
    pub proxy: SocketAddr,
    pub origin: SocketAddr,
    pub batch: SocketAddr,
}

struct Cluster {
    record: ClusterRecord,
    scheduler: SchedulerHandle,
    dedicated: JoinHandle<()>,
}

pub struct Facility {
    cfg: FacilityConfig,
    authd: Arc<Authd>,
    routes: Arc<RouteTable>,
    ingress_stats: Arc<IngressStats>,
    proxy: Arc<DataProxy>,
    origin: DirOrigin,
    batch: Arc<BatchService>,
    addrs: FacilityAddrs,
    clusters: tokio::sync::Mutex<BTreeMap<String, Cluster>>,
    next_port: Mutex<u16>,
    tasks: Mutex<Vec<JoinHandle<()>>>,
}

impl std::fmt::Debug for Facility {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Facility").field("addrs", &self.addrs).finish_non_exhaustive()
    }
}

fn spawn_logged<F>(what: &'static str, fut: F) -> JoinHandle<()>
where
    F: std::future::Future<Output = io::Result<()>> + Send + 'static,
{
    tokio::spawn(async move {
        if let Err(e) = fut.await {
            warn!("{what} stopped: {e}");
        }
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LoginRequest {
    Login { assertion: SignedAssertion },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoginReply {
    pub ok: bool,
    #[serde(default)]
    pub bundle: Option<CredentialBundle>,
    #[serde(default)]
    pub cluster: Option<ClusterRecord>,
    #[serde(default)]
    pub error: Option<String>,
}

/// Sends an identity assertion to a facility's login port.
pub async fn remote_login(addr: &str, assertion: SignedAssertion) -> Result<(CredentialBundle, ClusterRecord), NetError> {
    let mut sock = TcpStream::connect(addr).await?;
    wire::send_async(&mut sock, &LoginRequest::Login { assertion }).await?;
    let reply: LoginReply = wire::recv_async(&mut sock).await?;
    match (reply.ok, reply.bundle, reply.cluster) {
        (true, Some(b), Some(c)) => Ok((b, c)),
        _ => Err(NetError::Rejected(reply.error.unwrap_or_else(|| "login refused".into()))),
    }
}

impl Facility {
    /// Binds every listener and starts the shared services.
    pub async fn start(cfg: FacilityConfig, keys: TokenKeys) -> Result<Arc<Self>, FacilityError> {
        let authd = Arc::new(
            Authd::new(keys.clone(), cfg.idp()?)
                .with_required_group(&cfg.required_group)
                .with_ttl(cfg.token_ttl)
                .with_domain(&cfg.domain),
        );
        let ingress_l = TcpListener::bind(&cfg.listen).await?;
        let admin_l = TcpListener::bind(&cfg.admin).await?;
        let authd_l = TcpListener::bind(&cfg.authd).await?;
        let proxy_l = TcpListener::bind(&cfg.proxy).await?;
        let origin_l = TcpListener::bind(&cfg.origin).await?;
        let batch_l = TcpListener::bind(&cfg.batch).await?;
        let addrs = FacilityAddrs {
            ingress: ingress_l.local_addr()?,
            admin: admin_l.local_addr()?,
            authd: authd_l.local_addr()?,
            proxy: proxy_l.local_addr()?,
            origin: origin_l.local_addr()?,
            batch: batch_l.local_addr()?,
        };

        let routes = Arc::new(RouteTable::default());
        let ingress_stats = Arc::new(IngressStats::default());
        let origin = DirOrigin::new(&cfg.data_root);
        let proxy = Arc::new(DataProxy::new(
            Arc::new(TcpOrigin::new(&addrs.origin.to_string(), &cfg.federation_credential)),
            keys.clone(),
            ProxyConfig {
                block_size: cfg.block_size,
                max_cache_bytes: cfg.max_cache_bytes,
                cache_dir: cfg.cache_dir.clone(),
            },
        ));
        let batch = BatchService::new(
            BatchSim::new(
                cfg.delay,
                cfg.slots,
                Some(BatchAuth {
                    keys,
                    epoch_unix: unix_now(),
                }),
            ),
            Arc::new(InProcessWorkers),
        );
        let peek = Duration::from_secs_f64(cfg.peek_timeout);
        let tasks = vec![
            spawn_logged("ingress", serve_ingress(ingress_l, routes.clone(), ingress_stats.clone(), peek)),
            spawn_logged("ingress admin", serve_admin(admin_l, routes.clone())),
            spawn_logged(
                "origin",
                serve_origin(origin_l, origin.clone(), cfg.federation_credential.clone()),
            ),
            spawn_logged("proxy", serve_proxy(proxy_l, proxy.clone())),
            spawn_logged("batch", serve_batch(batch_l, batch.clone(), Duration::from_millis(50))),
        ];
        let facility = Arc::new(Self {
            next_port: Mutex::new(cfg.scheduler_port_base),
            cfg,
            authd,
            routes,
            ingress_stats,
            proxy,
            origin,
            batch,
            addrs,
            clusters: tokio::sync::Mutex::new(BTreeMap::new()),
            tasks: Mutex::new(tasks),
        });
        let login = {
            let f = Arc::downgrade(&facility);
            tokio::spawn(async move {
                loop {
                    let Ok((sock, _)) = authd_l.accept().await else { break };
                    let Some(f) = f.upgrade() else { break };
                    tokio::spawn(async move { login_connection(f, sock).await });
                }
            })
        };
        facility.tasks.lock().expect("tasks lock").push(login);
        info!(ingress = %addrs.ingress, authd = %addrs.authd, "facility up");
        Ok(facility)
    }

    pub fn addrs(&self) -> FacilityAddrs {
        self.addrs
    }

    pub fn config(&self) -> &FacilityConfig {
        &self.cfg
    }

    pub fn authd(&self) -> &Authd {
        &self.authd
    }

    pub fn routes(&self) -> &RouteTable {
        &self.routes
    }

    pub fn ingress_stats(&self) -> &IngressStats {
        &self.ingress_stats
    }

    pub fn proxy(&self) -> &DataProxy {
        &self.proxy
    }

    pub fn origin(&self) -> &DirOrigin {
        &self.origin
    }

    pub fn batch(&self) -> &BatchService {
        &self.batch
    }

    /// Verifies the assertion, mints credentials and provisions (or returns)
    /// the subject's cluster.
    pub async fn login(&self, signed: &SignedAssertion) -> Result<(CredentialBundle, ClusterRecord), FacilityError> {
        let minted = self.authd.login(signed, unix_now())?;
        let record = self.provision_cluster(&minted).await?;
        Ok((minted.bundle, record))
    }

    /// Mints for `subject` without an identity check, for trusted local use.
    pub async fn login_trusted(&self, subject: &str) -> Result<(CredentialBundle, ClusterRecord), FacilityError> {
        let minted = self.authd.mint_bundle(subject, self.cfg.token_ttl, unix_now())?;
        let record = self.provision_cluster(&minted).await?;
        Ok((minted.bundle, record))
    }

    async fn bind_scheduler(&self) -> Result<TcpListener, FacilityError> {
        let base = *self.next_port.lock().expect("port lock");
        if base == 0 {
            return Ok(TcpListener::bind("127.0.0.1:0").await?);
        }
        for _ in 0..self.cfg.max_clusters {
            let port = {
                let mut next = self.next_port.lock().expect("port lock");
                let p = *next;
                *next = next.checked_add(1).ok_or(FacilityError::PortExhaustion)?;
                p
            };
            match TcpListener::bind(("127.0.0.1", port)).await {
                Ok(l) => return Ok(l),
                Err(e) => warn!(port, "scheduler port unavailable: {e}"),
            }
        }
        Err(FacilityError::PortExhaustion)
    }

    /// Starts the scheduler and its dedicated worker and installs the SNI
    /// route. Returns the existing record if the subject already has one.
    pub async fn provision_cluster(&self, minted: &MintedCluster) -> Result<ClusterRecord, FacilityError> {
        let bundle = &minted.bundle;
        let mut clusters = self.clusters.lock().await;
        if let Some(c) = clusters.get(&bundle.subject) {
            return Ok(c.record.clone());
        }
        let catalog = Arc::new(Catalog::scan(&self.cfg.data_root, &self.cfg.federation_host)?);
        let listener = self.bind_scheduler().await?;
        let backend = listener.local_addr()?.to_string();
        let template = WorkerConfig {
            worker_id: String::new(),
            scheduler_addr: backend.clone(),
            server_name: bundle.hostname.clone(),
            ca_cert: bundle.ca_cert.clone(),
            user_cert: bundle.user_cert.clone(),
            user_key: bundle.user_key.clone(),
            data_token: bundle.data_token.clone(),
            proxy_addr: self.addrs.proxy.to_string(),
            n_cores: self.cfg.worker_cores,
            heartbeat_interval: crate::scheduler::HEARTBEAT_INTERVAL,
            connect_retries: 3,
            retry_delay: 1.0,
        };
        let mut sched_cfg = SchedulerServerConfig::new(
            &bundle.cluster_id,
            tls::server_config(&bundle.ca_cert, &minted.host.cert_pem, &minted.host.key_pem)?,
            catalog,
        );
        sched_cfg.policy = self.cfg.policy;
        sched_cfg.tick = Duration::from_secs_f64(self.cfg.tick);
        sched_cfg.batch = Some(BatchLink {
            addr: self.addrs.batch.to_string(),
            batch_token: bundle.batch_token.clone(),
            image: "casa-worker:latest".into(),
            template: template.clone(),
        });
        let scheduler = start_scheduler(listener, sched_cfg)?;

        let dedicated_cfg = WorkerConfig {
            worker_id: DEDICATED_WORKER_ID.into(),
            n_cores: self.cfg.dedicated_cores,
            ..template
        };
        let dedicated = tokio::spawn(async move {
            if let Err(e) = run_worker(dedicated_cfg).await {
                warn!("dedicated worker exited: {e}");
            }
        });
        if let Err(e) = scheduler.wait_for_workers(1, Duration::from_secs(10)).await {
            dedicated.abort();
            scheduler.shutdown();
            return Err(e.into());
        }
        if let Err(e) = self.routes.register(&bundle.hostname, &backend) {
            dedicated.abort();
            scheduler.shutdown();
            return Err(FacilityError::Config(e.to_string()));
        }
        let record = ClusterRecord {
            cluster_id: bundle.cluster_id.clone(),
            subject: bundle.subject.clone(),
            backend,
            hostname: bundle.hostname.clone(),
            dedicated_worker: DEDICATED_WORKER_ID.into(),
            created_at: unix_now(),
        };
        info!(cluster = %record.cluster_id, backend = %record.backend, "cluster provisioned");
        clusters.insert(
            bundle.subject.clone(),
            Cluster {
                record: record.clone(),
                scheduler,
                dedicated,
            },
        );
        Ok(record)
    }

    /// Fails running jobs, cancels the cluster's batch jobs, removes its
    /// route and stops the scheduler.
    pub async fn teardown_cluster(&self, cluster_id: &str) -> Result<TeardownReport, FacilityError> {
        let cluster = {
            let mut clusters = self.clusters.lock().await;
            let subject = clusters
                .iter()
                .find(|(_, c)| c.record.cluster_id == cluster_id)
                .map(|(s, _)| s.clone())
                .ok_or(FacilityError::UnknownCluster)?;
            clusters.remove(&subject).expect("found above")
        };
        let _ = self.routes.remove(&cluster.record.hostname);
        let failed_jobs = cluster.scheduler.abort("cluster torn down").await.unwrap_or_default();
        cluster.dedicated.abort();
        cluster.scheduler.shutdown();
        info!(cluster = %cluster_id, "cluster torn down");
        Ok(TeardownReport {
            cluster_id: cluster_id.to_owned(),
            failed_jobs,
        })
    }

    pub async fn clusters(&self) -> Vec<ClusterRecord> {
        self.clusters.lock().await.values().map(|c| c.record.clone()).collect()
    }

    pub async fn cluster_snapshot(&self, cluster_id: &str) -> Result<Snapshot, FacilityError> {
        let clusters = self.clusters.lock().await;
        let c = clusters
            .values()
            .find(|c| c.record.cluster_id == cluster_id)
            .ok_or(FacilityError::UnknownCluster)?;
        Ok(c.scheduler.snapshot().await?)
    }

    /// Tears down every cluster and stops the shared services.
    pub async fn shutdown(&self) {
        let ids: Vec<String> = self.clusters().await.into_iter().map(|c| c.cluster_id).collect();
        for id in ids {
            let _ = self.teardown_cluster(&id).await;
        }
        self.batch.cancel_all();
        for t in self.tasks.lock().expect("tasks lock").drain(..) {
            t.abort();
        }
    }
}

async fn login_connection(f: Arc<Facility>, mut sock: TcpStream) {
    while let Ok(LoginRequest::Login { assertion }) = wire::recv_async(&mut sock).await {
        let reply = match f.login(&assertion).await {
            Ok((bundle, cluster)) => LoginReply {
                ok: true,
                bundle: Some(bundle),
                cluster: Some(cluster),
                error: None,
            },
            Err(e) => LoginReply {
                ok: false,
                bundle: None,
                cluster: None,
                error: Some(e.to_string()),
            },
        };
        if wire::send_async(&mut sock, &reply).await.is_err() {
            break;
        }
    }
}

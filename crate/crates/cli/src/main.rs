use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

use casa_core::auth::{unix_now, CredentialBundle, IdentityAssertion, IdpSigner, SignedAssertion, TokenKeys};
use casa_core::bench::{
    measured_peak, oracle_peak, oracle_throughput, run_sweep, stall_profile, stall_report, sweep_csv, BenchConfig,
};
use casa_core::dataset::generate_files;
use casa_core::engine::PipelineSpec;
use casa_core::ingress::{serve_admin, serve_ingress, IngressStats, RouteTable};
use casa_core::launcher::{remote_login, Facility, FacilityConfig};
use casa_core::net::client::ClusterClient;
use casa_core::net::worker::{run_worker, WorkerConfig};
use casa_core::proxy::{serve_origin, serve_proxy, DataProxy, DirOrigin, ProxyConfig, TcpOrigin};
use casa_core::scheduler::ScaleMode;
use casa_core::wire::{DatasetRef, JobPhase, SubmitJob};

#[derive(Parser)]
#[command(name = "casa-mini", version, about = "Miniature interactive analysis facility")]
struct Cli {
    /// Credentials directory.
    #[arg(long, env = "CASA_HOME", global = true)]
    home: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the whole facility in one process.
    Facility {
        #[command(subcommand)]
        cmd: FacilityCmd,
    },
    /// Exchange an identity assertion for cluster credentials.
    Login {
        #[arg(long)]
        assertion: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8445")]
        authd: String,
        /// Ingress address stored alongside the credentials.
        #[arg(long, default_value = "127.0.0.1:8443")]
        ingress: String,
    },
    /// Set the scale policy of the logged-in cluster.
    Cluster {
        #[command(subcommand)]
        cmd: ClusterCmd,
    },
    /// Submit a job and wait for its histograms.
    Submit {
        #[arg(long)]
        pipeline: PathBuf,
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        chunk_size: Option<u64>,
        /// Seconds to wait for completion.
        #[arg(long, default_value_t = 600.0)]
        timeout: f64,
        /// Write the final status JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Worker-scaling sweep on the virtual clock.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
        /// Also write the task stream of a fixed(n) run for the largest n.
        #[arg(long)]
        stream_out: Option<PathBuf>,
    },
    /// Per-worker stall profile from a task-stream CSV.
    Stalls {
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a worker agent from a JSON config.
    Worker { config: PathBuf },
    /// Standalone SNI ingress.
    Ingress {
        #[arg(long, default_value = "127.0.0.1:8443")]
        listen: String,
        #[arg(long, default_value = "127.0.0.1:8444")]
        admin: String,
        #[arg(long, default_value_t = 5.0)]
        peek_timeout: f64,
    },
    /// Standalone caching data proxy.
    Proxy {
        #[arg(long, default_value = "127.0.0.1:9000")]
        listen: String,
        #[arg(long, default_value = "127.0.0.1:9001")]
        origin: String,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long, default_value_t = casa_core::proxy::DEFAULT_BLOCK_SIZE)]
        block_size: u64,
        /// Facility token keys (JSON).
        #[arg(long)]
        keys: PathBuf,
        #[arg(long, env = "CASA_FEDERATION_CREDENTIAL", default_value = "federation-secret")]
        credential: String,
    },
    /// Simulated federation origin serving `<root>/store/...`.
    Origin {
        #[arg(long, default_value = "127.0.0.1:9001")]
        listen: String,
        #[arg(long)]
        root: PathBuf,
        #[arg(long, env = "CASA_FEDERATION_CREDENTIAL", default_value = "federation-secret")]
        credential: String,
    },
    /// Mock identity provider.
    Idp {
        #[command(subcommand)]
        cmd: IdpCmd,
    },
    /// Write a generated dataset under `<root>/store/<dataset>/`.
    GenData {
        #[arg(long, default_value = "data")]
        root: PathBuf,
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value_t = 4)]
        files: usize,
        #[arg(long, default_value_t = 25_000)]
        events: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum FacilityCmd {
    Up {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Token keys; generated and written here if missing.
        #[arg(long)]
        keys: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ClusterCmd {
    Up(ClusterUp),
}

#[derive(Args)]
#[group(multiple = false)]
struct ClusterUp {
    /// Fixed number of batch workers.
    #[arg(long)]
    workers: Option<u32>,
    /// Queue-driven scaling.
    #[arg(long)]
    adaptive: bool,
}

#[derive(Subcommand)]
enum IdpCmd {
    /// Generate a signing key; writes `<out>` and `<out>.pub`.
    Keygen {
        #[arg(long, default_value = "idp.pem")]
        out: PathBuf,
    },
    /// Sign an identity assertion.
    Sign {
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        sub: String,
        #[arg(long, value_delimiter = ',', default_value = "cms")]
        groups: Vec<String>,
        #[arg(long, default_value_t = 3600)]
        ttl: u64,
        #[arg(long, default_value = "assertion.json")]
        out: PathBuf,
    },
}

/// What `login` leaves behind for later commands.
#[derive(Debug, Serialize, Deserialize)]
struct Session {
    cluster_id: String,
    hostname: String,
    ingress: String,
}

fn home(cli_home: Option<PathBuf>) -> PathBuf {
    cli_home.unwrap_or_else(|| {
        std::env::var_os("HOME")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("."))
            .join(".casa-mini")
    })
}

fn load_session(home: &Path) -> Result<(Session, CredentialBundle)> {
    let path = home.join("session.json");
    let text = std::fs::read_to_string(&path).with_context(|| format!("no session at {}; run login", path.display()))?;
    let session: Session = serde_json::from_str(&text)?;
    let bundle = CredentialBundle::read_from(&home.join(&session.cluster_id))?;
    Ok((session, bundle))
}

async fn connect(home: &Path) -> Result<ClusterClient> {
    let (session, bundle) = load_session(home)?;
    Ok(ClusterClient::with_bundle(&bundle, &session.ingress).await?)
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_keys(path: &Path, create: bool) -> Result<TokenKeys> {
    if path.exists() {
        let text = std::fs::read_to_string(path)?;
        return Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?);
    }
    if !create {
        bail!("key file {} not found", path.display());
    }
    let keys = TokenKeys::generate();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(&keys)?)?;
    Ok(keys)
}

async fn run(cli: Cli) -> Result<()> {
    let home = home(cli.home);
    match cli.cmd {
        Cmd::Facility {
            cmd: FacilityCmd::Up { config, keys },
        } => {
            let cfg = match config {
                Some(p) => FacilityConfig::load(&p)?,
                None => FacilityConfig::default(),
            };
            let keys = load_keys(&keys.unwrap_or_else(|| home.join("facility-keys.json")), true)?;
            let facility = Facility::start(cfg, keys).await?;
            let a = facility.addrs();
            println!("ingress {}", a.ingress);
            println!("admin   {}", a.admin);
            println!("authd   {}", a.authd);
            println!("proxy   {}", a.proxy);
            println!("origin  {}", a.origin);
            println!("batch   {}", a.batch);
            tokio::signal::ctrl_c().await?;
            facility.shutdown().await;
        }
        Cmd::Login {
            assertion,
            authd,
            ingress,
        } => {
            let text = std::fs::read_to_string(&assertion)?;
            let signed = SignedAssertion::from_json(&text)?;
            let (bundle, record) = remote_login(&authd, signed).await?;
            bundle.write_to(&home.join(&bundle.cluster_id))?;
            let session = Session {
                cluster_id: record.cluster_id.clone(),
                hostname: record.hostname.clone(),
                ingress,
            };
            std::fs::write(home.join("session.json"), serde_json::to_vec_pretty(&session)?)?;
            println!("{} -> {}", record.cluster_id, record.hostname);
        }
        Cmd::Cluster {
            cmd: ClusterCmd::Up(up),
        } => {
            let mode = match (up.workers, up.adaptive) {
                (_, true) => ScaleMode::Adaptive,
                (Some(n), false) => ScaleMode::Fixed(n),
                (None, false) => bail!("give --workers n or --adaptive"),
            };
            connect(&home).await?.set_mode(mode).await?;
            println!("scale policy set to {mode:?}");
        }
        Cmd::Submit {
            pipeline,
            dataset,
            chunk_size,
            timeout,
            out,
        } => {
            let spec = PipelineSpec::from_json(&std::fs::read_to_string(&pipeline)?)
                .with_context(|| format!("parsing {}", pipeline.display()))?;
            let mut client = connect(&home).await?;
            let st = client
                .submit(SubmitJob {
                    pipeline: spec,
                    dataset: DatasetRef::Name(dataset),
                    chunk_size,
                })
                .await?;
            let Some(job_id) = st.job_id else {
                bail!("submission refused: {}", st.error.unwrap_or_default());
            };
            eprintln!("job {job_id}: {} chunks", st.n_chunks);
            let done = client.wait(job_id, Duration::from_secs_f64(timeout)).await?;
            write_out(out.as_deref(), &(serde_json::to_string_pretty(&done)? + "\n"))?;
            if done.phase != Some(JobPhase::Done) {
                bail!("job {job_id} failed: {}", done.error.unwrap_or_default());
            }
        }
        Cmd::Bench {
            config,
            out,
            stream_out,
        } => {
            let cfg: BenchConfig = match config {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(&p)?)?,
                None => BenchConfig::default(),
            };
            let points = run_sweep(&cfg)?;
            std::fs::write(&out, sweep_csv(&points))?;
            for p in &points {
                let oracle = oracle_throughput(p.n, &cfg)?;
                println!(
                    "n={:>3} mean={:>10.1} Hz std={:>8.1} oracle={:>10.1} Hz dev={:+.2}%",
                    p.n,
                    p.mean_hz,
                    p.std_hz,
                    oracle,
                    100.0 * (p.mean_hz - oracle) / oracle
                );
            }
            let max_n = cfg.sweep.iter().copied().max().unwrap_or(1);
            println!(
                "measured peak n={:?}, oracle peak n={}",
                measured_peak(&points),
                oracle_peak(&cfg, max_n)
            );
            if let Some(path) = stream_out {
                std::fs::write(path, stall_profile(max_n, &cfg)?)?;
            }
        }
        Cmd::Stalls { stream, out } => {
            let report = stall_report(&std::fs::read_to_string(&stream)?)?;
            write_out(out.as_deref(), &report.to_csv())?;
            eprintln!(
                "max stall {:.3} s, trend {:+.4} s/worker, {} idle",
                report.max_stall,
                report.trend_slope,
                report.idle_workers.len()
            );
        }
        Cmd::Worker { config } => {
            let cfg: WorkerConfig = serde_json::from_str(&std::fs::read_to_string(&config)?)?;
            run_worker(cfg).await?;
        }
        Cmd::Ingress {
            listen,
            admin,
            peek_timeout,
        } => {
            let routes = Arc::new(RouteTable::default());
            let stats = Arc::new(IngressStats::default());
            let admin_l = TcpListener::bind(&admin).await?;
            tokio::spawn(serve_admin(admin_l, routes.clone()));
            let l = TcpListener::bind(&listen).await?;
            serve_ingress(l, routes, stats, Duration::from_secs_f64(peek_timeout)).await?;
        }
        Cmd::Proxy {
            listen,
            origin,
            cache_dir,
            block_size,
            keys,
            credential,
        } => {
            let keys = load_keys(&keys, false)?;
            let proxy = Arc::new(DataProxy::new(
                Arc::new(TcpOrigin::new(&origin, &credential)),
                keys,
                ProxyConfig {
                    block_size,
                    max_cache_bytes: None,
                    cache_dir,
                },
            ));
            serve_proxy(TcpListener::bind(&listen).await?, proxy).await?;
        }
        Cmd::Origin {
            listen,
            root,
            credential,
        } => {
            serve_origin(TcpListener::bind(&listen).await?, DirOrigin::new(root), credential).await?;
        }
        Cmd::Idp {
            cmd: IdpCmd::Keygen { out },
        } => {
            let signer = IdpSigner::generate();
            std::fs::write(&out, signer.to_pem())?;
            let mut public = out.clone().into_os_string();
            public.push(".pub");
            std::fs::write(&public, signer.public_pem())?;
            println!("wrote {} and {}", out.display(), PathBuf::from(public).display());
        }
        Cmd::Idp {
            cmd:
                IdpCmd::Sign {
                    key,
                    sub,
                    groups,
                    ttl,
                    out,
                },
        } => {
            let signer = IdpSigner::from_pem(&std::fs::read_to_string(&key)?)?;
            let now = unix_now();
            let signed = signer.sign(&IdentityAssertion {
                sub,
                groups,
                iat: now,
                exp: now + ttl,
            });
            std::fs::write(&out, signed.to_json())?;
        }
        Cmd::GenData {
            root,
            dataset,
            files,
            events,
            seed,
        } => {
            let paths = generate_files(&root.join("store").join(&dataset), "f", files, events, seed)?;
            println!("wrote {} files under {}", paths.len(), root.join("store").join(&dataset).display());
        }
    }
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

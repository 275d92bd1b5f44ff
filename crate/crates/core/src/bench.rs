//! Scaling-study harness: fixed-size sweeps on the virtual clock, the
//! closed-form throughput model and stall profiles from task streams.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::DelayModel;
use crate::dataset::{DatasetFile, DatasetSpec};
use crate::engine::PipelineSpec;
use crate::scheduler::{parse_stream_csv, ScalePolicy, StreamKind, TaskStream};
use crate::sim::{FacilitySim, SimConfig, SimError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("worker count must be at least 1")]
    ZeroWorkers,
    #[error("repeats must be at least 1")]
    ZeroRepeats,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{0} chunks failed at n={1}")]
    FailedTasks(u64, u32),
    #[error("bad task stream: {0}")]
    Stream(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub n_datasets: usize,
    pub events_per_dataset: u64,
    pub chunk_size: u64,
    /// Events/s of one worker.
    pub rate: u64,
    pub delay: DelayModel,
    pub sweep: Vec<u32>,
    pub repeats: u32,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_datasets: 18,
            events_per_dataset: 25_000,
            chunk_size: 5_000,
            rate: 4_000,
            delay: DelayModel::default(),
            sweep: vec![2, 5, 10, 15, 20, 26],
            repeats: 5,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn total_events(&self) -> u64 {
        self.n_datasets as u64 * self.events_per_dataset
    }

    /// One file per dataset, all under a single benchmark job.
    pub fn dataset(&self) -> DatasetSpec {
        let files = (0..self.n_datasets.max(1))
            .map(|i| DatasetFile {
                path: format!("/store/bench/ds{i:02}/nano.cacf"),
                n_events: self.events_per_dataset,
            })
            .collect();
        DatasetSpec::new("bench", files).expect("at least one file")
    }
}

pub fn benchmark_pipeline() -> PipelineSpec {
    PipelineSpec::from_json(
        r#"[
            {"define": ["pt", "sqrt(px*px + py*py)"]},
            {"filter": "pt > 20 && abs(eta) < 2.4"},
            {"hist": ["pt", "pt", 50, 0, 200]},
            {"hist": ["mass", "mass", 60, 60, 120]}
        ]"#,
    )
    .expect("benchmark pipeline parses")
}

/// `T(n) = s0 + c(n+1)/2 + E/(r n)`.
pub fn oracle_time(n: u32, cfg: &BenchConfig) -> Result<f64, BenchError> {
    if n == 0 {
        return Err(BenchError::ZeroWorkers);
    }
    let n = f64::from(n);
    let e = cfg.total_events() as f64;
    Ok(cfg.delay.s0 + cfg.delay.c * (n + 1.0) / 2.0 + e / (cfg.rate as f64 * n))
}

pub fn oracle_throughput(n: u32, cfg: &BenchConfig) -> Result<f64, BenchError> {
    Ok(cfg.total_events() as f64 / oracle_time(n, cfg)?)
}

/// Integer worker count maximising the oracle throughput over `1..=max_n`.
pub fn oracle_peak(cfg: &BenchConfig, max_n: u32) -> u32 {
    (1..=max_n.max(1))
        .map(|n| (n, oracle_throughput(n, cfg).unwrap()))
        .fold((1, f64::MIN), |best, (n, v)| if v > best.1 { (n, v) } else { best })
        .0
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub wallclock_s: f64,
    pub throughput_hz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkPoint {
    pub n: u32,
    pub runs: Vec<RunRecord>,
    pub mean_hz: f64,
    pub std_hz: f64,
}

impl BenchmarkPoint {
    fn from_runs(n: u32, runs: Vec<RunRecord>) -> Self {
        let k = runs.len() as f64;
        let mean = runs.iter().map(|r| r.throughput_hz).sum::<f64>() / k;
        let var = if runs.len() > 1 {
            runs.iter().map(|r| (r.throughput_hz - mean).powi(2)).sum::<f64>() / (k - 1.0)
        } else {
            0.0
        };
        Self {
            n,
            runs,
            mean_hz: mean,
            std_hz: var.sqrt(),
        }
    }
}

/// A single benchmark run with `n` fixed batch workers.
pub fn run_fixed(n: u32, cfg: &BenchConfig, seed: u64) -> Result<(RunRecord, TaskStream), BenchError> {
    if n == 0 {
        return Err(BenchError::ZeroWorkers);
    }
    let mut sim = FacilitySim::new(SimConfig {
        policy: ScalePolicy::fixed(n),
        delay: DelayModel { seed, ..cfg.delay },
        worker_rate: cfg.rate,
        ..SimConfig::default()
    })?;
    let job = sim.submit_job(benchmark_pipeline(), cfg.dataset(), cfg.chunk_size)?;
    sim.run_until_idle()?;
    let report = sim.job_report(job).expect("finished job");
    if report.n_failed > 0 {
        return Err(BenchError::FailedTasks(report.n_failed, n));
    }
    let record = RunRecord {
        wallclock_s: report.wallclock,
        throughput_hz: cfg.total_events() as f64 / report.wallclock,
    };
    Ok((record, sim.stream().clone()))
}

pub fn run_sweep(cfg: &BenchConfig) -> Result<Vec<BenchmarkPoint>, BenchError> {
    if cfg.repeats == 0 {
        return Err(BenchError::ZeroRepeats);
    }
    cfg.sweep
        .iter()
        .map(|&n| {
            let runs = (0..cfg.repeats)
                .map(|i| run_fixed(n, cfg, cfg.seed.wrapping_add(u64::from(i))).map(|(r, _)| r))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(BenchmarkPoint::from_runs(n, runs))
        })
        .collect()
}

pub const SWEEP_CSV_HEADER: &str = "n,run,wallclock_s,throughput_hz,mean_hz,std_hz";

pub fn sweep_csv(points: &[BenchmarkPoint]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for p in points {
        for (i, r) in p.runs.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{:.6},{:.3},{:.3},{:.3}\n",
                p.n,
                i + 1,
                r.wallclock_s,
                r.throughput_hz,
                p.mean_hz,
                p.std_hz
            ));
        }
    }
    out
}

/// Measured argmax of mean throughput; the first maximum wins ties.
pub fn measured_peak(points: &[BenchmarkPoint]) -> Option<u32> {
    points
        .iter()
        .fold(None::<&BenchmarkPoint>, |best, p| match best {
            Some(b) if b.mean_hz >= p.mean_hz => Some(b),
            _ => Some(p),
        })
        .map(|p| p.n)
}

/// Target requested at the first autoscale tick of an adaptive run over
/// `n_chunks` chunks, and the number of batch submissions it caused.
pub fn adaptive_first_tick(cfg: &BenchConfig, n_chunks: u64) -> Result<(u32, u64), BenchError> {
    let mut sim = FacilitySim::new(SimConfig {
        policy: ScalePolicy::adaptive(),
        delay: DelayModel { seed: cfg.seed, ..cfg.delay },
        worker_rate: cfg.rate,
        ..SimConfig::default()
    })?;
    let dataset = DatasetSpec::new(
        "adaptive",
        vec![DatasetFile {
            path: "/store/bench/adaptive.cacf".into(),
            n_events: n_chunks * cfg.chunk_size,
        }],
    )
    .expect("one file");
    sim.submit_job(benchmark_pipeline(), dataset, cfg.chunk_size)?;
    sim.step()?;
    let target = sim
        .stream()
        .events()
        .iter()
        .rev()
        .find(|e| e.kind == StreamKind::ScaleDecision)
        .and_then(|e| e.detail.strip_prefix("target=")?.parse().ok())
        .unwrap_or(0);
    Ok((target, sim.batch().submissions()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerStall {
    pub worker_id: String,
    pub up_t: f64,
    pub first_task_t: f64,
    pub stall_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StallReport {
    /// Workers that ran at least one task, in order of registration.
    pub stalls: Vec<WorkerStall>,
    /// Workers that came up but never started a task.
    pub idle_workers: Vec<String>,
    pub max_stall: f64,
    /// Least-squares slope of stall against position in registration order.
    pub trend_slope: f64,
}

pub const STALL_CSV_HEADER: &str = "worker_id,up_t,first_task_t,stall_s";

impl StallReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(STALL_CSV_HEADER);
        out.push('\n');
        for s in &self.stalls {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                s.worker_id, s.up_t, s.first_task_t, s.stall_s
            ));
        }
        out
    }
}

pub fn stall_report(stream_csv: &str) -> Result<StallReport, BenchError> {
    let events = parse_stream_csv(stream_csv).map_err(BenchError::Stream)?;
    let mut up: Vec<(f64, String)> = Vec::new();
    let mut first: BTreeMap<String, f64> = BTreeMap::new();
    for e in &events {
        match e.kind {
            StreamKind::WorkerUp => up.push((e.t, e.worker_id.clone())),
            StreamKind::TaskStart => {
                let t = first.entry(e.worker_id.clone()).or_insert(e.t);
                *t = t.min(e.t);
            }
            _ => {}
        }
    }
    up.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    let mut stalls = Vec::new();
    let mut idle_workers = Vec::new();
    for (up_t, id) in up {
        match first.get(&id) {
            Some(&ft) if ft >= up_t => stalls.push(WorkerStall {
                worker_id: id,
                up_t,
                first_task_t: ft,
                stall_s: ft - up_t,
            }),
            _ => idle_workers.push(id),
        }
    }
    let max_stall = stalls.iter().map(|s| s.stall_s).fold(0.0, f64::max);
    Ok(StallReport {
        trend_slope: slope(&stalls.iter().map(|s| s.stall_s).collect::<Vec<_>>()),
        stalls,
        idle_workers,
        max_stall,
    })
}

fn slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let mx = (n + 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = (i + 1) as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// Task stream of one fixed-size run, as CSV.
pub fn stall_profile(n: u32, cfg: &BenchConfig) -> Result<String, BenchError> {
    Ok(run_fixed(n, cfg, cfg.seed)?.1.to_csv())
}

use std::collections::BTreeMap;

use casa_core::auth::{Audience, TokenKeys};
use casa_core::bench::{benchmark_pipeline, run_fixed, BenchConfig};
use casa_core::engine::{eval_expr, fill_histogram, parse_expr, run_pipeline, HistSpec};
use casa_core::format::ColumnBatch;
use casa_core::ingress::parse_sni;
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(n: usize) -> ColumnBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut col = |lo: f64, hi: f64| (0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<f64>>();
    let columns: BTreeMap<String, Vec<f64>> = [
        ("px".to_string(), col(-80.0, 80.0)),
        ("py".to_string(), col(-80.0, 80.0)),
        ("eta".to_string(), col(-4.0, 4.0)),
        ("mass".to_string(), col(0.0, 120.0)),
    ]
    .into();
    ColumnBatch::new(columns).unwrap()
}

/// Minimal TLS 1.2 ClientHello carrying one server_name.
fn client_hello(host: &str) -> Vec<u8> {
    let name = host.as_bytes();
    let mut sni = Vec::new();
    sni.extend((name.len() as u16 + 3).to_be_bytes());
    sni.push(0);
    sni.extend((name.len() as u16).to_be_bytes());
    sni.extend(name);
    let mut ext = vec![0, 0];
    ext.extend((sni.len() as u16).to_be_bytes());
    ext.extend(sni);

    let mut body = vec![3, 3];
    body.extend([7u8; 32]);
    body.push(0);
    body.extend([0, 2, 0x13, 0x01]);
    body.extend([1, 0]);
    body.extend((ext.len() as u16).to_be_bytes());
    body.extend(ext);

    let mut hs = vec![1];
    hs.extend(&(body.len() as u32).to_be_bytes()[1..]);
    hs.extend(body);
    let mut rec = vec![0x16, 3, 1];
    rec.extend((hs.len() as u16).to_be_bytes());
    rec.extend(hs);
    rec
}

fn kernels(c: &mut Criterion) {
    let n = 100_000;
    let b = batch(n);
    let pt = parse_expr("sqrt(px*px + py*py)").unwrap();
    let cut = parse_expr("sqrt(px*px + py*py) > 20 && abs(eta) < 2.4").unwrap();

    let mut g = c.benchmark_group("engine");
    g.throughput(Throughput::Elements(n as u64));
    g.bench_function("eval_pt", |bch| bch.iter(|| eval_expr(black_box(&pt), &b).unwrap()));
    g.bench_function("eval_cut", |bch| bch.iter(|| eval_expr(black_box(&cut), &b).unwrap()));
    let mass = b.column("mass").unwrap();
    let spec = HistSpec::new(60, 60.0, 120.0).unwrap();
    g.bench_function("fill_histogram", |bch| {
        bch.iter(|| fill_histogram("mass", black_box(mass), spec).unwrap())
    });
    let pipeline = benchmark_pipeline().compile().unwrap();
    g.bench_function("benchmark_pipeline", |bch| bch.iter(|| run_pipeline(black_box(&b), &pipeline).unwrap()));
    g.finish();
}

fn control_plane(c: &mut Criterion) {
    let hello = client_hello("alice-1.dask.local");
    assert_eq!(parse_sni(&hello).unwrap().as_deref(), Some("alice-1.dask.local"));
    c.bench_function("parse_sni", |bch| bch.iter(|| parse_sni(black_box(&hello)).unwrap()));

    let keys = TokenKeys::generate();
    let token = keys.mint("alice", Audience::Data, 1_000, 3_600);
    c.bench_function("verify_token", |bch| {
        bch.iter(|| keys.verify(black_box(&token), Audience::Data, 2_000).unwrap())
    });
}

fn simulation(c: &mut Criterion) {
    let cfg = BenchConfig::default();
    let mut g = c.benchmark_group("sim_run");
    g.sample_size(20);
    for n in [5u32, 15, 26] {
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, &n| {
            bch.iter(|| run_fixed(n, &cfg, 0).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, kernels, control_plane, simulation);
criterion_main!(benches);

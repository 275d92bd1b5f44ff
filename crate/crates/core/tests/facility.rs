mod common;

use std::sync::Arc;
use std::time::Duration;

use casa_core::auth::{unix_now, IdentityAssertion, IdpSigner, SignedAssertion, TokenKeys};
use casa_core::batch::DelayModel;
use casa_core::bench::benchmark_pipeline;
use casa_core::launcher::{remote_login, Facility, FacilityConfig, FacilityError};
use casa_core::net::client::ClusterClient;
use casa_core::scheduler::ScaleMode;
use casa_core::wire::{DatasetRef, JobPhase, SubmitJob};

fn assertion(idp: &IdpSigner, sub: &str, groups: &[&str]) -> SignedAssertion {
    let now = unix_now();
    idp.sign(&IdentityAssertion {
        sub: sub.into(),
        groups: groups.iter().map(|g| g.to_string()).collect(),
        iat: now,
        exp: now + 600,
    })
}

async fn facility(dir: &std::path::Path, tweak: impl FnOnce(&mut FacilityConfig)) -> (Arc<Facility>, IdpSigner) {
    let idp = IdpSigner::generate();
    let mut cfg = FacilityConfig::ephemeral(dir);
    cfg.idp_public_key = Some(idp.public_pem());
    cfg.delay = DelayModel {
        s0: 0.05,
        c: 0.01,
        ..DelayModel::default()
    };
    cfg.tick = 0.1;
    tweak(&mut cfg);
    (Facility::start(cfg, TokenKeys::generate()).await.unwrap(), idp)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn login_provisions_one_cluster_per_subject() {
    let dir = tempfile::tempdir().unwrap();
    let (f, idp) = facility(dir.path(), |_| {}).await;
    let authd = f.addrs().authd.to_string();

    let (bundle, rec) = remote_login(&authd, assertion(&idp, "alice", &["cms"])).await.unwrap();
    assert_eq!(rec.hostname, "alice-1.dask.local");
    assert_eq!(bundle.cluster_id, "alice-1");
    let snap = f.cluster_snapshot("alice-1").await.unwrap();
    assert_eq!(snap.workers.len(), 1);
    assert_eq!(snap.workers[0].worker_id, "dedicated");
    assert_eq!(snap.workers[0].n_cores, 8);
    assert_eq!(snap.workers[0].identity, "alice");

    let (_, again) = remote_login(&authd, assertion(&idp, "alice", &["cms"])).await.unwrap();
    assert_eq!(again.cluster_id, rec.cluster_id);
    assert_eq!(again.backend, rec.backend);
    assert_eq!(f.routes().len(), 1);

    let (_, bob) = remote_login(&authd, assertion(&idp, "bob", &["cms", "atlas"])).await.unwrap();
    assert_ne!(bob.backend, rec.backend);
    assert_eq!(f.routes().len(), 2);

    let err = remote_login(&authd, assertion(&idp, "mallory", &["atlas"])).await.unwrap_err();
    assert!(err.to_string().contains("not a member"), "{err}");
    assert_eq!(f.routes().len(), 2);
    f.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn dedicated_worker_runs_jobs_without_batch() {
    let dir = tempfile::tempdir().unwrap();
    common::seed_dataset(dir.path(), "ds1", 3, 4_000, 11);
    let (f, idp) = facility(dir.path(), |_| {}).await;
    let (bundle, _) = f.login(&assertion(&idp, "alice", &["cms"])).await.unwrap();

    let mut client = ClusterClient::with_bundle(&bundle, &f.addrs().ingress.to_string())
        .await
        .unwrap();
    let pipeline = benchmark_pipeline();
    let st = client
        .submit(SubmitJob {
            pipeline: pipeline.clone(),
            dataset: DatasetRef::Name("ds1".into()),
            chunk_size: Some(1_500),
        })
        .await
        .unwrap();
    assert_eq!(st.cluster_id.as_deref(), Some("alice-1"));
    let done = client.wait(st.job_id.unwrap(), Duration::from_secs(30)).await.unwrap();
    assert_eq!(done.phase, Some(JobPhase::Done), "{:?}", done.error);
    assert_eq!(done.n_chunks, 9);
    assert_eq!(done.histograms, common::single_batch_oracle(dir.path(), "ds1", &pipeline));
    assert_eq!(f.batch().submissions(), 0);
    assert!(f.proxy().stats().origin_fetches > 0);

    let unknown = client
        .submit(SubmitJob {
            pipeline,
            dataset: DatasetRef::Name("nope".into()),
            chunk_size: None,
        })
        .await
        .unwrap();
    assert_eq!(unknown.phase, Some(JobPhase::Failed));
    f.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn adaptive_cluster_scales_through_batch() {
    let dir = tempfile::tempdir().unwrap();
    common::seed_dataset(dir.path(), "ds2", 4, 6_000, 5);
    let (f, idp) = facility(dir.path(), |c| c.dedicated_cores = 1).await;
    let (bundle, rec) = f.login(&assertion(&idp, "carol", &["cms"])).await.unwrap();
    let mut client = ClusterClient::with_bundle(&bundle, &f.addrs().ingress.to_string())
        .await
        .unwrap();
    client.set_mode(ScaleMode::Adaptive).await.unwrap();
    let pipeline = benchmark_pipeline();
    let st = client
        .submit(SubmitJob {
            pipeline: pipeline.clone(),
            dataset: DatasetRef::Name("ds2".into()),
            chunk_size: Some(200),
        })
        .await
        .unwrap();
    let done = client.wait(st.job_id.unwrap(), Duration::from_secs(60)).await.unwrap();
    assert_eq!(done.phase, Some(JobPhase::Done), "{:?}", done.error);
    assert_eq!(done.histograms, common::single_batch_oracle(dir.path(), "ds2", &pipeline));
    assert!(f.batch().submissions() > 0);

    f.teardown_cluster(&rec.cluster_id).await.unwrap();
    tokio::time::sleep(Duration::from_millis(100)).await;
    assert!(f.batch().active().is_empty());
    f.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn teardown_fails_jobs_and_closes_route() {
    let dir = tempfile::tempdir().unwrap();
    common::seed_dataset(dir.path(), "big", 1, 20_000, 3);
    let (f, idp) = facility(dir.path(), |c| c.dedicated_cores = 1).await;
    let (bundle, rec) = f.login(&assertion(&idp, "dave", &["cms"])).await.unwrap();
    let ingress = f.addrs().ingress.to_string();
    let mut client = ClusterClient::with_bundle(&bundle, &ingress).await.unwrap();
    let st = client
        .submit(SubmitJob {
            pipeline: benchmark_pipeline(),
            dataset: DatasetRef::Name("big".into()),
            chunk_size: Some(10),
        })
        .await
        .unwrap();

    let report = f.teardown_cluster(&rec.cluster_id).await.unwrap();
    assert_eq!(report.failed_jobs, vec![st.job_id.unwrap()]);
    assert!(f.routes().is_empty());
    assert!(f.batch().active().is_empty());
    assert!(matches!(
        f.teardown_cluster(&rec.cluster_id).await,
        Err(FacilityError::UnknownCluster)
    ));
    assert_eq!(FacilityError::UnknownCluster.to_string(), "unknown cluster");
    assert!(ClusterClient::with_bundle(&bundle, &ingress).await.is_err());
    f.shutdown().await;
}

use std::collections::BTreeMap;
use std::sync::Arc;

use metastack::forest::{ForestParams, Grid};
use metastack::stacking::{fit_deployment, CvPlan, Deployment};
use metastack::tabular::{
    generate_synthetic, impute_marker, partition_by_unit, Dataset, ImputationConfig, SynthSpec, UnitPartition,
};
use metastack::transport::{audit_confidentiality, decode, encode, BoundaryMessage, MessageKind, RawIndex};
use metastack_service::{
    decode_unit_response, replay, spawn_mesh, subunit_router, ReplayOptions, RetryPolicy, SubUnitState,
};

struct Fixture {
    ds: Dataset,
    parts: Vec<UnitPartition>,
    deployment: Deployment,
}

fn fixture(n: usize, seed: u64) -> Fixture {
    let ds = impute_marker(&generate_synthetic(&SynthSpec::four_lines(n, seed)).unwrap(), &ImputationConfig::default())
        .unwrap();
    let parts = partition_by_unit(&ds).unwrap();
    let deployment = fit_deployment(&ds, &parts, &Grid::single(10, 8), &CvPlan::default(), &ForestParams::default())
        .unwrap();
    Fixture { ds, parts, deployment }
}

async fn post(url: &str, body: Vec<u8>) -> (u16, Vec<u8>) {
    let resp = reqwest::Client::new().post(url).body(body).send().await.unwrap();
    (resp.status().as_u16(), resp.bytes().await.unwrap().to_vec())
}

#[tokio::test]
async fn replay_matches_in_process_predictions() {
    let f = fixture(400, 3);
    let mesh = spawn_mesh(&f.deployment, "127.0.0.1", 0, RetryPolicy::default()).await.unwrap();
    let items: Vec<usize> = (0..120).collect();
    let out = replay(&f.ds, &f.parts, &mesh.unit_urls, &items, &ReplayOptions::default()).await.unwrap();
    let (_, metas) = f.deployment.predict_in_process(&f.ds, &f.parts, &items).unwrap();

    assert_eq!(out.rows.len(), items.len());
    assert_eq!(out.failed(), 0);
    for (row, m) in out.rows.iter().zip(&metas) {
        if row.units_visited == 0 {
            assert!(row.prediction.is_none());
            continue;
        }
        assert_eq!(row.prediction.as_deref(), Some(m.label.as_str()));
        assert_eq!(row.probability.unwrap().to_bits(), m.certainty.to_bits());
    }

    let index = RawIndex::from_dataset(&f.ds, &f.parts);
    let verdict = audit_confidentiality(&out.transcript, &index);
    assert!(verdict.pass, "{:?}", verdict.violations.first());
    assert!(out.transcript.iter().all(|m| m.kind() != MessageKind::RawRow));
    let captured = mesh.meta.transcript.snapshot();
    assert_eq!(captured.len(), out.transcript.len());
    assert!(audit_confidentiality(&captured, &index).pass);
}

#[tokio::test]
async fn unit_order_does_not_change_final_predictions() {
    let f = fixture(300, 4);
    let mesh = spawn_mesh(&f.deployment, "127.0.0.1", 0, RetryPolicy::default()).await.unwrap();
    let items: Vec<usize> = (0..60).collect();
    let plain = replay(&f.ds, &f.parts, &mesh.unit_urls, &items, &ReplayOptions::default()).await.unwrap();
    let mesh2 = spawn_mesh(&f.deployment, "127.0.0.1", 0, RetryPolicy::default()).await.unwrap();
    let opts = ReplayOptions { rate: Some(2000.0), shuffle_seed: Some(9) };
    let shuffled = replay(&f.ds, &f.parts, &mesh2.unit_urls, &items, &opts).await.unwrap();
    assert_eq!(plain.rows, shuffled.rows);
    let empty = replay(&f.ds, &f.parts, &mesh.unit_urls, &[], &opts).await.unwrap();
    assert!(empty.rows.is_empty() && empty.transcript.is_empty());
}

#[tokio::test]
async fn services_reject_bad_requests() {
    let f = fixture(200, 5);
    let mesh = spawn_mesh(&f.deployment, "127.0.0.1", 0, RetryPolicy::default()).await.unwrap();
    let l0 = format!("{}/predict", mesh.unit_urls["L0"]);
    let meta = format!("{}/predict", mesh.meta_url);

    assert_eq!(post(&l0, b"not json".to_vec()).await.0, 400);
    let wrong_kind = encode(&BoundaryMessage::sub_prediction("p", "L0", "scrap", 0.5)).unwrap();
    assert_eq!(post(&l0, wrong_kind).await.0, 400);
    let foreign = encode(&BoundaryMessage::raw_row("p", "L0", [("L1_S0_F0".to_string(), 1.0)])).unwrap();
    assert_eq!(post(&l0, foreign).await.0, 422);
    let unknown_unit = encode(&BoundaryMessage::sub_prediction("p", "L9", &f.ds.classes()[0], 0.5)).unwrap();
    assert_eq!(post(&meta, unknown_unit).await.0, 422);
    assert_eq!(post(&meta, b"{\"kind\":\"sub_prediction\"}".to_vec()).await.0, 400);

    let client = reqwest::Client::new();
    assert_eq!(client.get(&l0).send().await.unwrap().status().as_u16(), 404);
    let other = format!("{}/health", mesh.meta_url);
    assert_eq!(client.post(&other).body("{}").send().await.unwrap().status().as_u16(), 404);
}

#[tokio::test]
async fn empty_row_predicts_and_forwards_no_features() {
    let f = fixture(200, 6);
    let mesh = spawn_mesh(&f.deployment, "127.0.0.1", 0, RetryPolicy::default()).await.unwrap();
    let url = format!("{}/predict", mesh.unit_urls["L3"]);
    let body = encode(&BoundaryMessage::raw_row("x1", "L3", [])).unwrap();
    // An empty payload apart from identifiers is still a valid row.
    let (status, bytes) = post(&url, body).await;
    assert_eq!(status, 200);
    let (sub, meta) = decode_unit_response(&bytes).unwrap();
    assert_eq!(sub.unit_id(), Some("L3"));
    assert!(meta.is_some());
    let captured = mesh.meta.transcript.snapshot();
    let fields: Vec<&String> = captured.iter().flat_map(|m| m.payload().keys()).collect();
    assert!(fields.iter().all(|k| ["part_id", "unit_id", "prediction", "probability"].contains(&k.as_str())));
}

#[tokio::test]
async fn duplicate_sub_prediction_replaces_the_earlier_one() {
    let f = fixture(200, 7);
    let mesh = spawn_mesh(&f.deployment, "127.0.0.1", 0, RetryPolicy::default()).await.unwrap();
    let meta = format!("{}/predict", mesh.meta_url);
    let classes = f.ds.classes();
    for (label, c) in [(&classes[0], 0.7), (&classes[1], 0.8)] {
        let (status, _) = post(&meta, encode(&BoundaryMessage::sub_prediction("d", "L0", label, c)).unwrap()).await;
        assert_eq!(status, 200);
    }
    let entry = mesh.meta.buffer.get("d").unwrap();
    assert_eq!(entry.subs.len(), 1);
    assert_eq!((entry.subs["L0"].label.as_str(), entry.subs["L0"].certainty), (classes[1].as_str(), 0.8));
    let expected = f.deployment.meta.predict_subs("d", &[entry.subs["L0"].clone()]).unwrap();
    assert_eq!(entry.last.unwrap(), expected);
}

#[tokio::test]
async fn unreachable_meta_still_returns_the_prediction() {
    let f = fixture(200, 8);
    // Reserve a port, then free it so nothing listens there.
    let dead = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let dead_url = format!("http://{}", dead.local_addr().unwrap());
    drop(dead);
    let state = Arc::new(SubUnitState::new(
        f.deployment.units[0].clone(),
        Some(dead_url),
        RetryPolicy { attempts: 2, backoff_ms: 5 },
    ));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let url = format!("http://{}/predict", listener.local_addr().unwrap());
    tokio::spawn(metastack_service::serve(listener, subunit_router(state)));

    let features: BTreeMap<String, f64> = BTreeMap::new();
    let body = encode(&BoundaryMessage::raw_row("p", "L0", features)).unwrap();
    let (status, bytes) = post(&url, body).await;
    assert_eq!(status, 502);
    let (sub, meta) = decode_unit_response(&bytes).unwrap();
    assert!(meta.is_none());
    assert_eq!(decode(&encode(&sub).unwrap()).unwrap().kind(), MessageKind::SubPrediction);
}

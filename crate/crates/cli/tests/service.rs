use std::sync::Arc;

use angioqa::synth::{build_dataset, write_dataset, SynthConfig};
use angioqa_cli::service::{router, Service, ServiceConfig};
use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use serde_json::{json, Value};
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    config: ServiceConfig,
}

impl Fixture {
    fn new(n: usize, calibration_size: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = build_dataset(n, 1, 0.8, &SynthConfig::default()).unwrap();
        let manifest = write_dataset(&data, dir.path(), 1).unwrap();
        let config = ServiceConfig {
            manifest,
            ratings: dir.path().join("ratings.jsonl"),
            calibration_size,
        };
        Fixture { _dir: dir, config }
    }

    fn open(&self) -> Arc<Service> {
        Service::open(&self.config).unwrap()
    }

    fn log_lines(&self) -> usize {
        std::fs::read_to_string(&self.config.ratings).map_or(0, |t| t.lines().count())
    }
}

async fn call(
    service: &Arc<Service>,
    method: Method,
    uri: &str,
    body: Option<String>,
) -> (StatusCode, Vec<u8>) {
    let request = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, Body::from))
        .unwrap();
    let response = router(service.clone()).oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = axum::body::to_bytes(response.into_body(), usize::MAX)
        .await
        .unwrap();
    (status, bytes.to_vec())
}

async fn get_json(service: &Arc<Service>, uri: &str) -> (StatusCode, Value) {
    let (status, body) = call(service, Method::GET, uri, None).await;
    (status, serde_json::from_slice(&body).unwrap_or(Value::Null))
}

async fn rate(service: &Arc<Service>, rater: &str, triplet: &str, scores: [f64; 3]) -> StatusCode {
    let body = json!({"rater_id": rater, "triplet_id": triplet, "vmc": scores[0], "vbd": scores[1], "oq": scores[2]});
    call(
        service,
        Method::POST,
        "/api/ratings",
        Some(body.to_string()),
    )
    .await
    .0
}

fn id(i: usize) -> String {
    format!("t{i:05}")
}

#[tokio::test]
async fn next_serves_images_of_the_first_unrated_triplet() {
    let f = Fixture::new(12, 200);
    let service = f.open();
    let (status, next) = get_json(&service, "/api/session/alice/next").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(next["triplet_id"], "t00000");
    assert_eq!(next["total"], 12);
    assert_eq!(next["rated"], 0);
    for role in ["mask", "contrast", "generated"] {
        let url = next["images"][role].as_str().unwrap();
        assert_eq!(url, format!("/images/t00000/{role}.png"));
        let (status, bytes) = call(&service, Method::GET, url, None).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n");
    }
    for bad in [
        "/images/t00000/shadow.png",
        "/images/t00000/mask.jpg",
        "/images/zzz/mask.png",
    ] {
        assert_eq!(
            call(&service, Method::GET, bad, None).await.0,
            StatusCode::NOT_FOUND,
            "{bad}"
        );
    }
}

#[tokio::test]
async fn rating_contract() {
    let f = Fixture::new(12, 200);
    let service = f.open();
    assert_eq!(
        rate(&service, "alice", "t00000", [10.0, 20.0, 30.0]).await,
        StatusCode::CREATED
    );
    assert_eq!(f.log_lines(), 1);
    assert_eq!(
        rate(&service, "alice", "t00000", [11.0, 20.0, 30.0]).await,
        StatusCode::OK
    );
    assert_eq!(f.log_lines(), 2);
    assert_eq!(
        service
            .snapshot()
            .get("alice", "t00000", angioqa::Metric::Vmc),
        Some(11.0)
    );

    assert_eq!(
        rate(&service, "alice", "t00001", [150.0, 20.0, 30.0]).await,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    assert_eq!(
        rate(&service, "alice", "t00001", [50.0, -0.5, 30.0]).await,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    assert_eq!(
        rate(&service, "alice", "nope", [50.0, 20.0, 30.0]).await,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        rate(&service, "", "t00001", [50.0, 20.0, 30.0]).await,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    let missing_field =
        json!({"rater_id": "alice", "triplet_id": "t00001", "vmc": 1, "vbd": 2}).to_string();
    assert_eq!(
        call(&service, Method::POST, "/api/ratings", Some(missing_field))
            .await
            .0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    assert_eq!(
        call(
            &service,
            Method::POST,
            "/api/ratings",
            Some("{not json".into())
        )
        .await
        .0,
        StatusCode::BAD_REQUEST
    );
    // rejected submissions never reach the log
    assert_eq!(f.log_lines(), 2);
    // the boundaries are valid scores
    assert_eq!(
        rate(&service, "alice", "t00001", [0.0, 100.0, 50.0]).await,
        StatusCode::CREATED
    );
}

#[tokio::test]
async fn a_full_sweep_visits_every_triplet_once() {
    let f = Fixture::new(15, 200);
    let service = f.open();
    let mut seen = Vec::new();
    loop {
        let (status, next) = get_json(&service, "/api/session/bob/next").await;
        if status == StatusCode::NO_CONTENT {
            break;
        }
        let t = next["triplet_id"].as_str().unwrap().to_string();
        assert!(!seen.contains(&t), "{t} served twice");
        assert_eq!(next["rated"], seen.len());
        assert_eq!(
            rate(&service, "bob", &t, [40.0, 50.0, 60.0]).await,
            StatusCode::CREATED
        );
        seen.push(t);
    }
    assert_eq!(seen, (0..15).map(id).collect::<Vec<_>>());
    // another rater still starts at the beginning
    assert_eq!(
        get_json(&service, "/api/session/carol/next").await.1["triplet_id"],
        "t00000"
    );
}

#[tokio::test]
async fn restart_replays_the_log() {
    let f = Fixture::new(12, 200);
    let service = f.open();
    for i in 0..4 {
        rate(&service, "dana", &id(i), [i as f64 * 10.0, 50.0, 50.0]).await;
    }
    rate(&service, "dana", &id(2), [99.0, 50.0, 50.0]).await;
    let before = service.snapshot();
    drop(service);

    let service = f.open();
    assert_eq!(*service.snapshot(), *before);
    assert_eq!(
        service.snapshot().get("dana", &id(2), angioqa::Metric::Vmc),
        Some(99.0)
    );
    let (_, next) = get_json(&service, "/api/session/dana/next").await;
    assert_eq!(next["triplet_id"], id(4));
    assert_eq!(
        rate(&service, "dana", &id(4), [1.0, 2.0, 3.0]).await,
        StatusCode::CREATED
    );
    assert_eq!(f.log_lines(), 6);
}

#[tokio::test]
async fn a_torn_or_corrupt_log_is_refused_at_startup() {
    let f = Fixture::new(12, 200);
    std::fs::write(
        &f.config.ratings,
        "{\"subject_id\":\"a\",\"triplet_id\":\"t00000\",\"vmc\":1,\"vbd\":2,\"oq\":3}\n{\"subject_id\":",
    )
    .unwrap();
    let err = Service::open(&f.config).err().expect("corrupt log");
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("line 2"), "{err}");
}

#[tokio::test]
async fn a_log_without_final_newline_is_continued_on_a_new_line() {
    let f = Fixture::new(12, 200);
    std::fs::write(
        &f.config.ratings,
        "{\"subject_id\":\"a\",\"triplet_id\":\"t00000\",\"vmc\":1,\"vbd\":2,\"oq\":3}",
    )
    .unwrap();
    let service = f.open();
    assert_eq!(
        rate(&service, "a", "t00001", [4.0, 5.0, 6.0]).await,
        StatusCode::CREATED
    );
    drop(service);
    assert_eq!(f.open().snapshot().len(), 6);
}

async fn calibration(service: &Arc<Service>, rater: &str) -> Value {
    let (status, body) = get_json(service, &format!("/api/calibration/{rater}")).await;
    assert_eq!(status, StatusCode::OK);
    body
}

#[tokio::test]
async fn calibration_against_the_consensus_of_others() {
    let f = Fixture::new(20, 10);
    let service = f.open();
    let reference = |i: usize| {
        [
            5.0 + 9.0 * i as f64,
            90.0 - 7.0 * i as f64,
            20.0 + (i * 37 % 60) as f64,
        ]
    };

    // nobody to compare with yet
    rate(&service, "ref1", &id(0), reference(0)).await;
    let c = calibration(&service, "ref1").await;
    assert_eq!(c["pairs"], 0);
    assert_eq!(c["passed"], false);
    assert!(c["plcc"].is_null() && c["message"].is_string());

    for i in 0..10 {
        rate(&service, "ref1", &id(i), reference(i)).await;
        rate(&service, "ref2", &id(i), reference(i)).await;
    }
    for i in 0..10 {
        rate(&service, "exact", &id(i), reference(i)).await;
    }
    // ratings outside the calibration subset are ignored
    rate(&service, "exact", &id(15), [0.0, 100.0, 0.0]).await;

    let c = calibration(&service, "exact").await;
    assert_eq!(c["pairs"], 30);
    assert_eq!(c["plcc"], 1.0);
    assert_eq!(c["srcc"], 1.0);
    assert_eq!(c["passed"], true);
    assert!(c["active_seconds"].as_f64().unwrap() >= 0.0);

    for i in 0..10 {
        rate(
            &service,
            "reversed",
            &id(i),
            reference(i).map(|v| 100.0 - v),
        )
        .await;
    }
    let c = calibration(&service, "reversed").await;
    assert_eq!(c["plcc"], -1.0);
    assert_eq!(c["passed"], false);
}

#[tokio::test]
async fn calibration_fails_below_the_threshold() {
    let f = Fixture::new(20, 20);
    let service = f.open();
    for i in 0..20 {
        let v = 5.0 * i as f64;
        rate(&service, "a", &id(i), [v, v, v]).await;
        rate(&service, "b", &id(i), [v, v, v]).await;
        // agrees on the first half only
        let w = if i < 10 { v } else { 100.0 - v };
        rate(&service, "c", &id(i), [w, w, w]).await;
    }
    let c = calibration(&service, "c").await;
    let (plcc, srcc) = (c["plcc"].as_f64().unwrap(), c["srcc"].as_f64().unwrap());
    assert!(plcc < 0.7 || srcc < 0.7, "{c}");
    assert_eq!(c["passed"], false);
}

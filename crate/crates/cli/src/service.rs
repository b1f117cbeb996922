//! HTTP rating service. Ratings go to an append-only JSONL log through a
//! single writer; handlers read from an immutable snapshot of the replayed log.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use angioqa::subjective::{reliability_gate, RatingLog, RatingSubmission};
use angioqa::synth::{Manifest, Role};
use angioqa::Metric;
use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::{io_error, CliError};

/// Gaps between a rater's requests longer than this do not count as active time.
pub const IDLE_GAP: Duration = Duration::from_secs(120);

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub manifest: PathBuf,
    pub ratings: PathBuf,
    pub calibration_size: usize,
}

struct Writer {
    file: File,
    log: RatingLog,
}

#[derive(Clone, Copy)]
struct Activity {
    last: Instant,
    active: Duration,
}

pub struct Service {
    manifest: Manifest,
    index: HashMap<String, usize>,
    calibration_size: usize,
    snapshot: RwLock<Arc<RatingLog>>,
    writer: Mutex<Writer>,
    activity: Mutex<HashMap<String, Activity>>,
}

#[derive(Debug, Deserialize)]
pub struct RatingRequest {
    pub rater_id: String,
    pub triplet_id: String,
    pub vmc: f64,
    pub vbd: f64,
    pub oq: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ImageUrls {
    pub mask: String,
    pub contrast: String,
    pub generated: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NextTriplet {
    pub triplet_id: String,
    pub images: ImageUrls,
    pub rated: usize,
    pub total: usize,
    pub active_seconds: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Calibration {
    pub rater_id: String,
    /// Paired (rater, consensus-of-others) scores over the calibration subset and all metrics.
    pub pairs: usize,
    pub plcc: Option<f64>,
    pub srcc: Option<f64>,
    pub passed: bool,
    pub message: Option<String>,
    pub active_seconds: f64,
}

impl Service {
    /// Reads the manifest and replays the ratings log, creating it if absent.
    pub fn open(config: &ServiceConfig) -> Result<Arc<Self>, CliError> {
        let manifest = Manifest::read(&config.manifest)?;
        let path = &config.ratings;
        let text = match std::fs::read_to_string(path) {
            Ok(text) => text,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(io_error(path, e)),
        };
        let log = RatingLog::parse_jsonl(&text)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| io_error(path, e))?;
        if !text.is_empty() && !text.ends_with('\n') {
            file.write_all(b"\n").map_err(|e| io_error(path, e))?;
        }
        let index = manifest
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.clone(), i))
            .collect();
        Ok(Arc::new(Service {
            index,
            calibration_size: config.calibration_size.min(manifest.rows.len()),
            manifest,
            snapshot: RwLock::new(Arc::new(log.clone())),
            writer: Mutex::new(Writer { file, log }),
            activity: Mutex::new(HashMap::new()),
        }))
    }

    pub fn snapshot(&self) -> Arc<RatingLog> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    /// Records a request by `rater` and returns their active time in seconds.
    fn touch(&self, rater: &str) -> f64 {
        let now = Instant::now();
        let mut activity = self.activity.lock().expect("activity lock");
        let entry = activity.entry(rater.to_string()).or_insert(Activity {
            last: now,
            active: Duration::ZERO,
        });
        let gap = now - entry.last;
        if gap <= IDLE_GAP {
            entry.active += gap;
        }
        entry.last = now;
        entry.active.as_secs_f64()
    }

    fn fully_rated(log: &RatingLog, rater: &str, triplet: &str) -> bool {
        Metric::ALL
            .iter()
            .all(|&m| log.get(rater, triplet, m).is_some())
    }

    /// First manifest triplet the rater has not scored on all three metrics.
    pub fn next_for(&self, rater: &str) -> (Option<&str>, usize) {
        let log = self.snapshot();
        let mut next = None;
        let mut rated = 0;
        for row in &self.manifest.rows {
            if Self::fully_rated(&log, rater, &row.id) {
                rated += 1;
            } else if next.is_none() {
                next = Some(row.id.as_str());
            }
        }
        (next, rated)
    }

    /// Appends one submission to the log. Returns whether the rater had already
    /// scored this triplet.
    pub fn record(&self, submission: &RatingSubmission) -> std::io::Result<bool> {
        let mut line = serde_json::to_string(submission).map_err(std::io::Error::other)?;
        line.push('\n');
        let mut writer = self.writer.lock().expect("writer lock");
        let existed = Metric::ALL.iter().any(|&m| {
            writer
                .log
                .get(&submission.subject_id, &submission.triplet_id, m)
                .is_some()
        });
        writer.file.write_all(line.as_bytes())?;
        writer.file.sync_data()?;
        for r in submission.records() {
            writer.log.insert(&r);
        }
        *self.snapshot.write().expect("snapshot lock") = Arc::new(writer.log.clone());
        Ok(existed)
    }

    /// Rater scores against the mean score of all other raters, pooled over the
    /// calibration subset and the three metrics.
    pub fn calibration_pairs(&self, rater: &str) -> (Vec<f64>, Vec<f64>) {
        let log = self.snapshot();
        let others: Vec<String> = log.subjects().into_iter().filter(|s| s != rater).collect();
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for row in &self.manifest.rows[..self.calibration_size] {
            for m in Metric::ALL {
                let Some(own) = log.get(rater, &row.id, m) else {
                    continue;
                };
                let theirs: Vec<f64> = others
                    .iter()
                    .filter_map(|o| log.get(o, &row.id, m))
                    .collect();
                if theirs.is_empty() {
                    continue;
                }
                xs.push(own);
                ys.push(theirs.iter().sum::<f64>() / theirs.len() as f64);
            }
        }
        (xs, ys)
    }

    fn image_path(&self, id: &str, role: Role) -> Option<PathBuf> {
        self.index
            .get(id)
            .map(|&i| self.manifest.resolve(&self.manifest.rows[i], role))
    }
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/api/session/{rater}/next", get(next))
        .route("/api/ratings", post(post_rating))
        .route("/api/calibration/{rater}", get(calibration))
        .route("/images/{id}/{file}", get(image))
        .with_state(service)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn image_url(id: &str, role: Role) -> String {
    format!("/images/{id}/{}.png", role.as_str())
}

async fn next(State(service): State<Arc<Service>>, UrlPath(rater): UrlPath<String>) -> Response {
    let active_seconds = service.touch(&rater);
    match service.next_for(&rater) {
        (Some(id), rated) => Json(NextTriplet {
            triplet_id: id.to_string(),
            images: ImageUrls {
                mask: image_url(id, Role::Mask),
                contrast: image_url(id, Role::Contrast),
                generated: image_url(id, Role::Generated),
            },
            rated,
            total: service.manifest.rows.len(),
            active_seconds,
        })
        .into_response(),
        (None, _) => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn post_rating(State(service): State<Arc<Service>>, body: Bytes) -> Response {
    let request: RatingRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) if e.is_data() => return error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    if request.rater_id.trim().is_empty() {
        return error(StatusCode::UNPROCESSABLE_ENTITY, "rater_id is empty");
    }
    if !service.index.contains_key(&request.triplet_id) {
        return error(
            StatusCode::NOT_FOUND,
            format!("unknown triplet {}", request.triplet_id),
        );
    }
    for (name, v) in [
        ("vmc", request.vmc),
        ("vbd", request.vbd),
        ("oq", request.oq),
    ] {
        if !(0.0..=100.0).contains(&v) {
            return error(
                StatusCode::UNPROCESSABLE_ENTITY,
                format!("{name} = {v} is outside [0, 100]"),
            );
        }
    }
    service.touch(&request.rater_id);
    let submission = RatingSubmission {
        subject_id: request.rater_id,
        triplet_id: request.triplet_id,
        vmc: request.vmc,
        vbd: request.vbd,
        oq: request.oq,
        timestamp: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
    };
    let existed = {
        let service = service.clone();
        let submission = submission.clone();
        match tokio::task::spawn_blocking(move || service.record(&submission)).await {
            Ok(Ok(existed)) => existed,
            Ok(Err(e)) => {
                return error(
                    StatusCode::INTERNAL_SERVER_ERROR,
                    format!("rating log: {e}"),
                )
            }
            Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        }
    };
    let (status, word) = if existed {
        (StatusCode::OK, "updated")
    } else {
        (StatusCode::CREATED, "created")
    };
    let body = json!({
        "status": word,
        "rater_id": submission.subject_id,
        "triplet_id": submission.triplet_id,
    });
    (status, Json(body)).into_response()
}

async fn calibration(
    State(service): State<Arc<Service>>,
    UrlPath(rater): UrlPath<String>,
) -> Json<Calibration> {
    let active_seconds = service.touch(&rater);
    let (xs, ys) = service.calibration_pairs(&rater);
    let (plcc, srcc, passed, message) = match reliability_gate(&xs, &ys) {
        Ok(g) => (Some(g.plcc), Some(g.srcc), g.passed, None),
        Err(e) => (None, None, false, Some(e.to_string())),
    };
    Json(Calibration {
        rater_id: rater,
        pairs: xs.len(),
        plcc,
        srcc,
        passed,
        message,
        active_seconds,
    })
}

async fn image(
    State(service): State<Arc<Service>>,
    UrlPath((id, file)): UrlPath<(String, String)>,
) -> Response {
    let role = file
        .strip_suffix(".png")
        .and_then(|r| r.parse::<Role>().ok());
    let Some(path) = role.and_then(|role| service.image_path(&id, role)) else {
        return error(StatusCode::NOT_FOUND, format!("no image {id}/{file}"));
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        Err(_) => error(
            StatusCode::NOT_FOUND,
            format!("image file {} is missing", path.display()),
        ),
    }
}

/// Runs the service until interrupted. Prints the bound address first so a
/// caller using port 0 can find it.
pub fn serve_blocking(config: ServiceConfig, host: &str, port: u16) -> Result<(), CliError> {
    let service = Service::open(&config)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .map_err(|e| CliError::Internal(format!("bind {host}:{port}: {e}")))?;
        let addr = listener
            .local_addr()
            .map_err(|e| CliError::Internal(e.to_string()))?;
        println!("listening on http://{addr}");
        std::io::stdout().flush().ok();
        axum::serve(listener, router(service))
            .with_graceful_shutdown(async {
                tokio::signal::ctrl_c().await.ok();
            })
            .await
            .map_err(|e| CliError::Internal(e.to_string()))
    })
}

//! HTTP API behind the pairwise annotation UI. Pairs are served blinded in
//! their recorded presentation order; judgments go to the append-only store.

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use groundrl::calibrate::{
    append_judgment, learn_alpha, load_judgments, CandidatePair, Judgment, JudgmentStore, Preference,
};
use groundrl::corpus::{GroundedExample, Utterance};
use groundrl::metrics::EmbeddingProvider;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

const PLACEHOLDER: &str = "<!doctype html><html><head><meta charset=\"utf-8\"><title>groundrl annotation</title></head>\
<body><p>The annotation UI bundle is not installed. Start the service with --ui-dir pointing at a built bundle, \
or use the JSON API under /api.</p></body></html>";

pub struct ServiceState {
    pairs: Vec<CandidatePair>,
    examples: HashMap<String, GroundedExample>,
    provider: Box<dyn EmbeddingProvider>,
    store: Mutex<Ledger>,
}

/// The store plus the ids already judged, guarded together so that the
/// duplicate check and the append cannot interleave.
struct Ledger {
    store: JudgmentStore,
    judged: HashSet<String>,
}

impl ServiceState {
    /// Picks up any judgments already in the store so a restarted session
    /// resumes where it stopped.
    pub fn new(
        pairs: Vec<CandidatePair>,
        examples: Vec<GroundedExample>,
        store: JudgmentStore,
        provider: Box<dyn EmbeddingProvider>,
    ) -> anyhow::Result<Self> {
        let examples: HashMap<String, GroundedExample> = examples.into_iter().map(|e| (e.id.clone(), e)).collect();
        if let Some(p) = pairs.iter().find(|p| !examples.contains_key(&p.example_id)) {
            anyhow::bail!("pair {} refers to unknown example {}", p.pair_id, p.example_id);
        }
        let judged = load_judgments(&store)?.into_iter().map(|j| j.pair_id).collect();
        Ok(ServiceState {
            pairs,
            examples,
            provider,
            store: Mutex::new(Ledger { store, judged }),
        })
    }
}

#[derive(Debug, Serialize)]
pub struct PairView<'a> {
    pub pair_id: &'a str,
    pub history: &'a [Utterance],
    pub knowledge: &'a str,
    pub first: &'a str,
    pub second: &'a str,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    First,
    Second,
    Skip,
}

#[derive(Debug, Deserialize)]
pub struct Submission {
    pub pair_id: String,
    pub choice: Choice,
    pub annotator: String,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

async fn next_pair(State(st): State<Arc<ServiceState>>) -> Response {
    let judged = st.store.lock().expect("store lock").judged.clone();
    let Some(pair) = st.pairs.iter().find(|p| !judged.contains(&p.pair_id)) else {
        return Json(json!({ "complete": true })).into_response();
    };
    let ex = &st.examples[&pair.example_id];
    let (first, second) = pair.presented();
    Json(PairView {
        pair_id: &pair.pair_id,
        history: &ex.history,
        knowledge: &ex.knowledge,
        first,
        second,
    })
    .into_response()
}

async fn submit(State(st): State<Arc<ServiceState>>, Json(sub): Json<Submission>) -> Response {
    let annotator = sub.annotator.trim();
    if annotator.is_empty() {
        return error(StatusCode::BAD_REQUEST, "annotator must not be empty");
    }
    let Some(pair) = st.pairs.iter().find(|p| p.pair_id == sub.pair_id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown pair {}", sub.pair_id));
    };
    let preferred = match sub.choice {
        Choice::First => Preference::from(pair.presented_first),
        Choice::Second => Preference::from(pair.presented_first.other()),
        Choice::Skip => Preference::Skip,
    };
    let judgment = Judgment {
        pair_id: pair.pair_id.clone(),
        preferred,
        annotator: annotator.to_string(),
        timestamp: chrono::Utc::now(),
        presented_first: pair.presented_first,
    };
    let mut ledger = st.store.lock().expect("store lock");
    if ledger.judged.contains(&pair.pair_id) {
        return error(StatusCode::CONFLICT, format!("pair {} was already judged", pair.pair_id));
    }
    if let Err(e) = append_judgment(&ledger.store, &judgment) {
        return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
    }
    ledger.judged.insert(pair.pair_id.clone());
    Json(json!({ "ok": true })).into_response()
}

async fn progress(State(st): State<Arc<ServiceState>>) -> Response {
    let ledger = st.store.lock().expect("store lock");
    let done = st.pairs.iter().filter(|p| ledger.judged.contains(&p.pair_id)).count();
    Json(json!({ "done": done, "total": st.pairs.len() })).into_response()
}

async fn calibrate(State(st): State<Arc<ServiceState>>) -> Response {
    let judgments = {
        let ledger = st.store.lock().expect("store lock");
        load_judgments(&ledger.store)
    };
    let judgments = match judgments {
        Ok(j) => j,
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    let st2 = st.clone();
    let result =
        tokio::task::spawn_blocking(move || learn_alpha(&st2.pairs, &judgments, &st2.examples, st2.provider.as_ref()))
            .await;
    match result {
        Ok(Ok(r)) => Json(r).into_response(),
        Ok(Err(e)) => error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

pub fn router(state: Arc<ServiceState>, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/pairs/next", get(next_pair))
        .route("/api/judgments", post(submit))
        .route("/api/progress", get(progress))
        .route("/api/calibrate", post(calibrate))
        .with_state(state);
    match ui_dir {
        Some(dir) if dir.join("index.html").is_file() => api.fallback_service(ServeDir::new(dir)),
        _ => api.route("/", get(|| async { Html(PLACEHOLDER) })),
    }
}

//! Read-only JSON service over one checkpoint and dataset.
//!
//! Responses depend only on the loaded artifacts and the request body, so
//! identical requests get identical bodies regardless of concurrency. The
//! wall-clock cost of an answer travels in the `x-elapsed-ms` header.

use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use brainlang::checkpoint::Checkpoint;
use brainlang::dataset::{Dataset, Split};
use brainlang::eval::SentenceEmbedder;
use brainlang::experiments::{microstim_sweep, person_terms, stimulate, StimMask, SweepResult, SweepSpec, PERSON_TOKENS};
use brainlang::generate::{generate, trial_evidence, GenerationConfig};
use brainlang::model::FusionModel;
use brainlang::Error;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::pipeline::{microstim_generation, stim_masks, MaskSummary};

pub struct ServeState {
    pub cfg: RunConfig,
    pub model: FusionModel,
    pub dataset: Dataset,
    pub split: Split,
    pub masks: Vec<StimMask>,
    pub embedder: SentenceEmbedder,
    pub fingerprint: String,
}

impl ServeState {
    pub fn new(cfg: RunConfig, checkpoint: &Checkpoint, dataset: Dataset, split: Split) -> brainlang::Result<Self> {
        let (masks, _) = stim_masks(&cfg, &dataset, &split)?;
        Ok(Self {
            embedder: SentenceEmbedder::from_model(&checkpoint.model),
            fingerprint: checkpoint.fingerprint()?,
            model: checkpoint.model.clone(),
            cfg,
            dataset,
            split,
            masks,
        })
    }

    fn mask(&self, id: &str) -> Result<&StimMask, ApiError> {
        self.masks
            .iter()
            .find(|m| m.id == id)
            .ok_or_else(|| ApiError::not_found("unknown_mask", format!("no mask named {id}")))
    }

    fn trial(&self, id: u32) -> Result<&brainlang::dataset::Trial, ApiError> {
        self.dataset
            .trial(id)
            .ok_or_else(|| ApiError::not_found("unknown_trial", format!("no trial with id {id}")))
    }
}

// ---------------------------------------------------------------------------
// Errors

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
            },
        }
    }
    pub fn not_found(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }
    pub fn bad_request(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }
    pub fn unprocessable(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Numerical(m) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "numerical", m),
            Error::InvalidArgument(m) => Self::bad_request("invalid_request", m),
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(bytes: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::bad_request("malformed_body", e.to_string()))
}

// ---------------------------------------------------------------------------
// Schemas

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
    pub fingerprint: String,
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub category: String,
    pub count: u8,
    pub setting: String,
    pub has_person: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial_id: u32,
    pub split: String,
    /// Ground truth; clients hide it until the user reveals it.
    pub scene: SceneSummary,
    pub ground_truth_hidden: bool,
    pub caption_preview: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasksResponse {
    pub masks: Vec<MaskSummary>,
    pub grid: Vec<f64>,
    pub max_grid: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationOverrides {
    pub beams: Option<usize>,
    pub min_p: Option<f64>,
    pub temperature: Option<f64>,
    pub max_new_tokens: Option<usize>,
    pub seed: Option<u64>,
    pub stochastic: Option<bool>,
}

impl GenerationOverrides {
    pub fn apply(&self, base: &GenerationConfig) -> GenerationConfig {
        GenerationConfig {
            beams: self.beams.unwrap_or(base.beams),
            min_p: self.min_p.unwrap_or(base.min_p),
            temperature: self.temperature.unwrap_or(base.temperature),
            max_new_tokens: self.max_new_tokens.unwrap_or(base.max_new_tokens),
            seed: self.seed.unwrap_or(base.seed),
            stochastic: self.stochastic.unwrap_or(base.stochastic),
            absolute_min_p: base.absolute_min_p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AskRequest {
    pub trial_id: u32,
    pub question: String,
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub mask_id: Option<String>,
    #[serde(default)]
    pub evidence_tokens: Option<Vec<String>>,
    #[serde(default)]
    pub generation: Option<GenerationOverrides>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub tokens: Vec<String>,
    pub step_sums: Vec<f64>,
    pub aggregate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AskResponse {
    pub trial_id: u32,
    pub question: String,
    pub beta: f64,
    pub mask_id: Option<String>,
    pub text: String,
    pub evidence: Option<Evidence>,
    /// Embedding similarity to the trial's reference captions.
    pub caption_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRequest {
    pub trial_id: u32,
    pub mask_id: String,
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
    #[serde(default)]
    pub question: Option<String>,
}

// ---------------------------------------------------------------------------
// Core handlers, callable without HTTP

pub fn answer(state: &ServeState, req: &AskRequest) -> Result<AskResponse, ApiError> {
    if !req.beta.is_finite() {
        return Err(ApiError::bad_request("invalid_beta", "beta must be finite"));
    }
    let trial = state.trial(req.trial_id)?;
    let mask = match (&req.mask_id, req.beta != 0.0) {
        (Some(id), _) => Some(state.mask(id)?),
        (None, true) => return Err(ApiError::bad_request("mask_required", "beta != 0 requires mask_id")),
        (None, false) => None,
    };
    let gen = req
        .generation
        .as_ref()
        .map_or_else(|| state.cfg.generation.clone(), |o| o.apply(&state.cfg.generation));
    gen.validate().map_err(|e| ApiError::bad_request("invalid_generation", e.to_string()))?;
    let betas = match mask {
        Some(m) if req.beta != 0.0 => stimulate(&trial.betas, m, req.beta)?,
        _ => trial.betas.clone(),
    };
    let text = generate(&state.model, &betas, &req.question, &gen)?.text;
    let evidence = match &req.evidence_tokens {
        Some(tokens) => {
            let words: Vec<&str> = tokens.iter().map(String::as_str).collect();
            let tr = trial_evidence(&state.model, &betas, &req.question, &words, state.cfg.microstim.evidence_max_steps)
                .map_err(|e| ApiError::bad_request("invalid_evidence_tokens", e.to_string()))?;
            Some(Evidence {
                tokens: tokens.clone(),
                step_sums: tr.step_sums,
                aggregate: tr.aggregate,
            })
        }
        None => None,
    };
    let refs: Vec<&str> = trial.captions.iter().map(String::as_str).collect();
    Ok(AskResponse {
        trial_id: req.trial_id,
        question: req.question.clone(),
        beta: req.beta,
        mask_id: req.mask_id.clone(),
        caption_score: state.embedder.caption_score(&text, &refs, state.cfg.eval.score_weight),
        text,
        evidence,
    })
}

pub fn sweep(state: &ServeState, req: &SweepRequest) -> Result<SweepResult, ApiError> {
    let grid = req.grid.clone().unwrap_or_else(|| state.cfg.microstim.grid.clone());
    if grid.iter().any(|b| !b.is_finite()) {
        return Err(ApiError::bad_request("invalid_grid", "grid values must be finite"));
    }
    if grid.is_empty() || grid.len() > state.cfg.serve.max_grid {
        return Err(ApiError::unprocessable(
            "grid_size",
            format!("grid must have 1..={} points, got {}", state.cfg.serve.max_grid, grid.len()),
        ));
    }
    let trial = state.trial(req.trial_id)?;
    let mask = state.mask(&req.mask_id)?;
    let prompt = req.question.clone().unwrap_or_else(|| state.cfg.microstim.prompt.clone());
    let terms = person_terms();
    let spec = SweepSpec {
        grid: &grid,
        prompt: &prompt,
        mention_terms: &terms,
        evidence_tokens: &PERSON_TOKENS,
        max_steps: state.cfg.microstim.evidence_max_steps,
    };
    Ok(microstim_sweep(&state.model, &[trial], mask, &spec, &microstim_generation(&state.cfg))?)
}

pub fn trials(state: &ServeState) -> Vec<TrialSummary> {
    let split_of = |id: u32| {
        if state.split.test_ids.binary_search(&id).is_ok() {
            "test"
        } else if state.split.val_ids.binary_search(&id).is_ok() {
            "val"
        } else {
            "train"
        }
    };
    state
        .dataset
        .trials
        .iter()
        .map(|t| TrialSummary {
            trial_id: t.trial_id,
            split: split_of(t.trial_id).into(),
            scene: SceneSummary {
                category: state.dataset.category_name(&t.scene).into(),
                count: t.scene.count,
                setting: state.dataset.setting_name(&t.scene).into(),
                has_person: t.scene.has_person,
            },
            ground_truth_hidden: true,
            caption_preview: t.captions.first().cloned().unwrap_or_default(),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// HTTP

type Shared = Arc<ServeState>;

async fn health(State(s): State<Shared>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        fingerprint: s.fingerprint.clone(),
        parallel: brainlang::par::is_parallel(),
    })
}

async fn list_trials(State(s): State<Shared>) -> Json<Vec<TrialSummary>> {
    Json(trials(&s))
}

async fn list_masks(State(s): State<Shared>) -> Json<MasksResponse> {
    Json(MasksResponse {
        masks: s.masks.iter().map(MaskSummary::from).collect(),
        grid: s.cfg.microstim.grid.clone(),
        max_grid: s.cfg.serve.max_grid,
    })
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

fn timed<T: Serialize>(start: Instant, body: T) -> Response {
    let mut r = Json(body).into_response();
    let ms = format!("{:.3}", start.elapsed().as_secs_f64() * 1e3);
    r.headers_mut()
        .insert("x-elapsed-ms", HeaderValue::from_str(&ms).expect("ascii number"));
    r
}

async fn ask(State(s): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let start = Instant::now();
    let req: AskRequest = parse_body(&body)?;
    let out = blocking(move || answer(&s, &req)).await?;
    Ok(timed(start, out))
}

async fn sweep_handler(State(s): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let start = Instant::now();
    let req: SweepRequest = parse_body(&body)?;
    let out = blocking(move || sweep(&s, &req)).await?;
    Ok(timed(start, out))
}

async fn fallback() -> ApiError {
    ApiError::not_found("no_route", "unknown endpoint")
}

pub fn router(state: Shared) -> Router {
    let app = Router::new()
        .route("/api/health", get(health))
        .route("/api/trials", get(list_trials))
        .route("/api/masks", get(list_masks))
        .route("/api/ask", post(ask))
        .route("/api/sweep", post(sweep_handler))
        .fallback(fallback)
        .with_state(state.clone());
    if state.cfg.serve.cors {
        app.layer(tower_http::cors::CorsLayer::permissive())
    } else {
        app
    }
}

pub async fn run(state: Shared, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

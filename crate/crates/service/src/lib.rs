//! JSON API for interactive auditing: browse held-out samples, request
//! counterfactuals at any relaxation `r`, and sweep over several.
//!
//! All state is loaded at startup and shared read-only between requests.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Query, State};
use axum::http::{HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use vaex_core::checkpoint::sha256_hex;
use vaex_core::classifier::ClassifierSnapshot;
use vaex_core::counterfactual::{make_counterfactual, CounterfactualRequest, CounterfactualResult, InterventionMode};
use vaex_core::data::{encode_png, to_rgb_image, ImageSet};
use vaex_core::{Error as CoreError, Tensor, VaexSnapshot};

/// Seeds drawn by the server stay below 2^53 so that JavaScript clients can
/// echo them back exactly.
pub const MAX_DRAWN_SEED: u64 = 1 << 53;
pub const MAX_PAGE_SIZE: usize = 200;
pub const DEFAULT_PAGE_SIZE: usize = 24;

/// Everything a request may read. Never mutated after construction.
pub struct ServiceState {
    model: VaexSnapshot<f32>,
    classifier: ClassifierSnapshot,
    samples: ImageSet,
    listing: Vec<SampleEntry>,
    checkpoint_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub label: usize,
    pub probs_raw: Vec<f64>,
    /// Base64-encoded PNG.
    pub thumbnail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    #[serde(rename = "K")]
    pub k: usize,
    pub variant: String,
    pub class_count: usize,
    pub image_size: usize,
    pub checkpoint_hash: String,
    pub classifier_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualBody {
    pub sample_id: String,
    pub target_class: usize,
    pub r: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub intervention: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepBody {
    pub sample_id: String,
    pub target_class: usize,
    pub r_list: Vec<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub intervention: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualPayload {
    pub sample_id: String,
    pub target_class: usize,
    pub original_png: String,
    pub reconstruction_png: String,
    pub counterfactual_png: String,
    pub probs_original: Vec<f64>,
    pub probs_counterfactual: Vec<f64>,
    pub success: bool,
    pub r: f64,
    pub seed: u64,
    pub checkpoint_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>, field: Option<&str>) -> Self {
        Self { status, body: ErrorBody { error: error.into(), field: field.map(str::to_string) } }
    }

    fn invalid(field: &str, error: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, error, Some(field))
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), None)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        let status = match r {
            JsonRejection::JsonDataError(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::BAD_REQUEST,
        };
        Self::new(status, r.body_text(), None)
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn png_b64(t: &Tensor<f32>) -> Result<String, CoreError> {
    Ok(B64.encode(encode_png(&to_rgb_image(t)?)?))
}

impl ServiceState {
    /// Classifies every sample and renders the thumbnails up front.
    pub fn new(model: VaexSnapshot<f32>, classifier: ClassifierSnapshot, samples: ImageSet) -> vaex_core::Result<Self> {
        if model.config().image_shape() != samples.image_shape() || classifier.config().image_size != model.config().image_size {
            return Err(CoreError::Contract("model, classifier and samples disagree on image shape".into()));
        }
        if classifier.config().class_count != model.config().class_count {
            return Err(CoreError::Contract("model and classifier disagree on the class count".into()));
        }
        let probs = classifier.predict_set(&samples, 128)?;
        let mut listing = Vec::with_capacity(samples.len());
        for (i, p) in probs.into_iter().enumerate() {
            listing.push(SampleEntry {
                id: samples.ids[i].clone(),
                label: samples.labels[i],
                probs_raw: p,
                thumbnail: png_b64(&samples.gather(&[i]))?,
            });
        }
        let checkpoint_hash = sha256_hex(&model.to_checkpoint().to_bytes());
        Ok(Self { model, classifier, samples, listing, checkpoint_hash })
    }

    pub fn checkpoint_hash(&self) -> &str {
        &self.checkpoint_hash
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    pub fn info(&self) -> ModelInfo {
        let cfg = self.model.config();
        ModelInfo {
            k: cfg.k(),
            variant: cfg.variant.to_string(),
            class_count: cfg.class_count,
            image_size: cfg.image_size,
            checkpoint_hash: self.checkpoint_hash.clone(),
            classifier_accuracy: self.classifier.accuracy(),
        }
    }

    /// Page `page` (zero-based) of the listing.
    pub fn page(&self, page: usize, page_size: usize) -> Result<&[SampleEntry], ApiError> {
        if page_size == 0 || page_size > MAX_PAGE_SIZE {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                format!("page_size must lie in 1..={MAX_PAGE_SIZE}"),
                Some("page_size"),
            ));
        }
        let start = page.saturating_mul(page_size);
        if start > self.listing.len() || (start == self.listing.len() && page > 0) {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("page {page} is past the end"), Some("page")));
        }
        Ok(&self.listing[start..(start + page_size).min(self.listing.len())])
    }

    fn validate(
        &self,
        sample_id: &str,
        target: usize,
        r_values: &[f64],
        sweep: bool,
        intervention: Option<&str>,
    ) -> Result<InterventionMode, ApiError> {
        let c = self.model.config().class_count;
        if target >= c {
            return Err(ApiError::invalid("target_class", format!("target_class must be below {c}")));
        }
        let field = if sweep { "r_list" } else { "r" };
        if let Some(r) = r_values.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(ApiError::invalid(field, format!("r = {r} is outside [0, 1]")));
        }
        let mode = match intervention {
            None => InterventionMode::default(),
            Some(s) => s.parse().map_err(|e: CoreError| ApiError::invalid("intervention", e.to_string()))?,
        };
        if self.samples.index_of(sample_id).is_none() {
            return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown sample `{sample_id}`"), Some("sample_id")));
        }
        Ok(mode)
    }

    fn payload(&self, res: &CounterfactualResult) -> Result<CounterfactualPayload, CoreError> {
        Ok(CounterfactualPayload {
            sample_id: res.sample_id.clone(),
            target_class: res.target,
            original_png: png_b64(&res.original)?,
            reconstruction_png: png_b64(&res.reconstruction)?,
            counterfactual_png: png_b64(&res.counterfactual)?,
            probs_original: res.probs_original.clone(),
            probs_counterfactual: res.probs_counterfactual.clone(),
            success: res.success,
            r: res.r,
            seed: res.seed,
            checkpoint_hash: self.checkpoint_hash.clone(),
        })
    }

    /// One payload per `r`, all with the same seed.
    pub fn run(
        &self,
        sample_id: &str,
        target: usize,
        r_values: &[f64],
        seed: u64,
        mode: InterventionMode,
    ) -> Result<Vec<CounterfactualPayload>, ApiError> {
        r_values
            .iter()
            .map(|&r| {
                let mut req = CounterfactualRequest::new(sample_id, target, r, seed);
                req.intervention = mode;
                let res = make_counterfactual(&req, &self.samples, &self.model, &self.classifier).map_err(|e| match e {
                    CoreError::Lookup(_) => ApiError::new(StatusCode::NOT_FOUND, e.to_string(), Some("sample_id")),
                    other => ApiError::internal(other),
                })?;
                self.payload(&res).map_err(ApiError::internal)
            })
            .collect()
    }
}

fn draw_seed() -> u64 {
    rand::thread_rng().gen_range(0..MAX_DRAWN_SEED)
}

#[derive(Debug, Deserialize)]
struct PageQuery {
    page: Option<usize>,
    page_size: Option<usize>,
}

async fn samples(
    State(st): State<Arc<ServiceState>>,
    q: Result<Query<PageQuery>, QueryRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Query(q) = q.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text(), None))?;
    let page = st.page(q.page.unwrap_or(0), q.page_size.unwrap_or(DEFAULT_PAGE_SIZE))?;
    let total = HeaderValue::from(st.listing.len());
    Ok(([(HeaderName::from_static("x-total-count"), total)], Json(page.to_vec())))
}

async fn model_info(State(st): State<Arc<ServiceState>>) -> Json<ModelInfo> {
    Json(st.info())
}

async fn counterfactual(
    State(st): State<Arc<ServiceState>>,
    body: Result<Json<CounterfactualBody>, JsonRejection>,
) -> ApiResult<CounterfactualPayload> {
    let Json(b) = body?;
    let mode = st.validate(&b.sample_id, b.target_class, &[b.r], false, b.intervention.as_deref())?;
    let seed = b.seed.unwrap_or_else(draw_seed);
    let mut out = tokio::task::spawn_blocking(move || st.run(&b.sample_id, b.target_class, &[b.r], seed, mode))
        .await
        .map_err(ApiError::internal)??;
    Ok(Json(out.remove(0)))
}

async fn sweep(State(st): State<Arc<ServiceState>>, body: Result<Json<SweepBody>, JsonRejection>) -> ApiResult<Vec<CounterfactualPayload>> {
    let Json(b) = body?;
    if b.r_list.is_empty() {
        return Err(ApiError::invalid("r_list", "r_list must not be empty"));
    }
    let mode = st.validate(&b.sample_id, b.target_class, &b.r_list, true, b.intervention.as_deref())?;
    let seed = b.seed.unwrap_or_else(draw_seed);
    let out = tokio::task::spawn_blocking(move || st.run(&b.sample_id, b.target_class, &b.r_list, seed, mode))
        .await
        .map_err(ApiError::internal)??;
    Ok(Json(out))
}

/// Origins allowed to call the API from a browser; `None` allows any.
pub fn router(state: Arc<ServiceState>, allowed_origin: Option<&str>) -> Router {
    let origin = match allowed_origin.and_then(|o| HeaderValue::from_str(o).ok()) {
        Some(o) => AllowOrigin::exact(o),
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new().allow_origin(origin).allow_methods(Any).allow_headers(Any).expose_headers(Any);
    Router::new()
        .route("/api/samples", get(samples))
        .route("/api/counterfactual", post(counterfactual))
        .route("/api/sweep", post(sweep))
        .route("/api/model/info", get(model_info))
        .layer(cors)
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: Arc<ServiceState>, addr: SocketAddr, allowed_origin: Option<&str>) -> std::io::Result<()> {
    let app = router(state, allowed_origin);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app).await
}

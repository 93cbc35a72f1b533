//! HTTP binding of the service. Writers are serialized behind one lock;
//! every call runs on the blocking pool since selection may train.

use std::sync::{Arc, RwLock};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use dpd_core::service::{
    AnalyzeRequest, AnnotateRequest, ExecuteRequest, FeedbackRequest, RecommendRequest, SelectRequest, Service, ServiceError,
};

pub type Shared = Arc<RwLock<Service>>;

pub struct ApiError(pub ServiceError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.0)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError(ServiceError::new(400, "invalid_request", r.body_text()))
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        ApiError(ServiceError::new(400, "invalid_request", r.body_text()))
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn write<R: Send + 'static>(state: Shared, f: impl FnOnce(&mut Service) -> Result<R, ServiceError> + Send + 'static) -> ApiResult<R> {
    tokio::task::spawn_blocking(move || {
        let mut svc = state.write().unwrap_or_else(|p| p.into_inner());
        f(&mut svc)
    })
    .await
    .map_err(|e| ApiError(ServiceError::new(500, "internal", e.to_string())))?
    .map(Json)
    .map_err(ApiError)
}

async fn read<R: Send + 'static>(state: Shared, f: impl FnOnce(&Service) -> Result<R, ServiceError> + Send + 'static) -> ApiResult<R> {
    tokio::task::spawn_blocking(move || {
        let svc = state.read().unwrap_or_else(|p| p.into_inner());
        f(&svc)
    })
    .await
    .map_err(|e| ApiError(ServiceError::new(500, "internal", e.to_string())))?
    .map(Json)
    .map_err(ApiError)
}

#[derive(Deserialize)]
struct RoleQuery {
    role: String,
}

#[derive(Deserialize)]
struct BudgetQuery {
    user: String,
    dataset: Option<String>,
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
}

pub fn router(svc: Service) -> Router {
    let state: Shared = Arc::new(RwLock::new(svc));
    Router::new()
        .route("/health", get(|| async { Json(Health { status: "ok" }) }))
        .route(
            "/catalog/annotate",
            post(|State(s): State<Shared>, body: Result<Json<AnnotateRequest>, JsonRejection>| async move {
                let Json(req) = body?;
                write(s, move |svc| svc.annotate(req)).await
            }),
        )
        .route(
            "/catalog",
            get(|State(s): State<Shared>, q: Result<Query<RoleQuery>, QueryRejection>| async move {
                let Query(q) = q?;
                read(s, move |svc| svc.catalog(&q.role)).await
            }),
        )
        .route(
            "/query/analyze",
            post(|State(s): State<Shared>, body: Result<Json<AnalyzeRequest>, JsonRejection>| async move {
                let Json(req) = body?;
                write(s, move |svc| svc.analyze(req)).await
            }),
        )
        .route(
            "/plans/recommend",
            post(|State(s): State<Shared>, body: Result<Json<RecommendRequest>, JsonRejection>| async move {
                let Json(req) = body?;
                write(s, move |svc| svc.recommend(req)).await
            }),
        )
        .route(
            "/plans/select",
            post(|State(s): State<Shared>, body: Result<Json<SelectRequest>, JsonRejection>| async move {
                let Json(req) = body?;
                write(s, move |svc| svc.select(req)).await
            }),
        )
        .route(
            "/execute",
            post(|State(s): State<Shared>, body: Result<Json<ExecuteRequest>, JsonRejection>| async move {
                let Json(req) = body?;
                write(s, move |svc| svc.execute(req)).await
            }),
        )
        .route(
            "/feedback",
            post(|State(s): State<Shared>, body: Result<Json<FeedbackRequest>, JsonRejection>| async move {
                let Json(req) = body?;
                write(s, move |svc| svc.feedback(req)).await
            }),
        )
        .route(
            "/budget",
            get(|State(s): State<Shared>, q: Result<Query<BudgetQuery>, QueryRejection>| async move {
                let Query(q) = q?;
                read(s, move |svc| svc.budget(&q.user, q.dataset.as_deref())).await
            }),
        )
        .route(
            "/sessions/{id}",
            get(|State(s): State<Shared>, Path(id): Path<String>| async move { read(s, move |svc| svc.session(&id).cloned()).await }),
        )
        .with_state(state)
}

pub async fn serve(svc: Service, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(svc)).await
}

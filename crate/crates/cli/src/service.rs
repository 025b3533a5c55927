//! Read-only HTTP API over one index and its checkpoint.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use codeseek_core::index::INDEX_VERSION;
use codeseek_core::{SearchHit, Searcher};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::{ServeDir, ServeFile};

/// Version of every JSON payload, sent as the top-level `v` field.
pub const API_VERSION: u32 = 1;
pub const MAX_K: usize = 100;
pub const DEFAULT_K: usize = 10;

const FALLBACK_PAGE: &str = include_str!("../assets/index.html");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub v: u32,
    pub query: String,
    pub k: usize,
    pub hits: Vec<SearchHit>,
}

/// Shared by the API and the CLI so both produce the same payload.
pub fn search_response(searcher: &Searcher, query: &str, k: usize) -> codeseek_core::Result<SearchResponse> {
    Ok(SearchResponse {
        v: API_VERSION,
        query: query.to_owned(),
        k,
        hits: searcher.search(query, k)?,
    })
}

fn bad_request(message: impl Into<String>) -> Response {
    let body = json!({"v": API_VERSION, "error": message.into()});
    (StatusCode::BAD_REQUEST, Json(body)).into_response()
}

async fn search(State(searcher): State<Arc<Searcher>>, Query(params): Query<HashMap<String, String>>) -> Response {
    let q = match params.get("q").map(|s| s.trim()) {
        Some(q) if !q.is_empty() => q.to_owned(),
        _ => return bad_request("missing or empty query parameter q"),
    };
    let k = match params.get("k") {
        None => DEFAULT_K,
        Some(raw) => match raw.parse::<usize>() {
            Ok(k) if (1..=MAX_K).contains(&k) => k,
            _ => return bad_request(format!("k must be an integer in [1, {MAX_K}]")),
        },
    };
    let worker = Arc::clone(&searcher);
    let result = tokio::task::spawn_blocking(move || search_response(&worker, &q, k)).await;
    match result {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) => bad_request(e.to_string()),
        Err(e) => {
            log::error!("search task failed: {e}");
            (
                StatusCode::INTERNAL_SERVER_ERROR,
                Json(json!({"v": API_VERSION, "error": "internal error"})),
            )
                .into_response()
        }
    }
}

async fn health(State(searcher): State<Arc<Searcher>>) -> Json<serde_json::Value> {
    Json(json!({
        "v": API_VERSION,
        "status": "ok",
        "model_fingerprint": searcher.index().fingerprint(),
        "pool_size": searcher.index().len(),
    }))
}

async fn stats(State(searcher): State<Arc<Searcher>>) -> Json<serde_json::Value> {
    let index = searcher.index();
    let ck = searcher.checkpoint();
    let languages: serde_json::Map<String, serde_json::Value> =
        index.languages().into_iter().map(|(l, n)| (l, n.into())).collect();
    Json(json!({
        "v": API_VERSION,
        "pool_size": index.len(),
        "dim": index.dim(),
        "index_version": INDEX_VERSION,
        "model_fingerprint": index.fingerprint(),
        "languages": languages,
        "vocab_size": ck.vocab.len(),
        "stage": ck.stage,
        "step": ck.step,
        "encoder": ck.config.encoder,
        "limits": ck.config.limits,
    }))
}

async fn fallback_page() -> Html<&'static str> {
    Html(FALLBACK_PAGE)
}

/// API routes plus static assets: files from `static_dir` when given, else a
/// built-in search page.
pub fn router(searcher: Searcher, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/search", get(search))
        .route("/api/health", get(health))
        .route("/api/stats", get(stats))
        .with_state(Arc::new(searcher));
    match static_dir {
        Some(dir) => {
            let index = dir.join("index.html");
            api.fallback_service(ServeDir::new(dir).fallback(ServeFile::new(index)))
        }
        None => api
            .route("/", get(fallback_page))
            .route("/index.html", get(fallback_page)),
    }
}

pub async fn serve(searcher: Searcher, addr: SocketAddr, static_dir: Option<PathBuf>) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!(
        "serving {} snippets on http://{}",
        searcher.index().len(),
        listener.local_addr()?
    );
    axum::serve(listener, router(searcher, static_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("shutting down");
        })
        .await?;
    Ok(())
}

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::Next;
use axum::response::{IntoResponse, Response};
use parking_lot::Mutex;

use super::AppState;

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";
pub const REPLAYED_HEADER: &str = "idempotent-replayed";

#[derive(Clone)]
struct Cached {
    status: StatusCode,
    content_type: Option<HeaderValue>,
    body: Bytes,
}

type Slot = Arc<tokio::sync::Mutex<Option<Cached>>>;

/// Responses to keyed mutations, by method, path and key.
#[derive(Default)]
pub struct IdempotencyCache {
    slots: Mutex<HashMap<String, Slot>>,
}

impl IdempotencyCache {
    fn slot(&self, key: String) -> Slot {
        self.slots.lock().entry(key).or_default().clone()
    }
}

/// Replays the stored response for a repeated `Idempotency-Key`. Concurrent
/// duplicates wait for the first to finish. Server-side failures (5xx) are
/// not stored so the client can retry them for real.
pub async fn middleware(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let mutating = matches!(*req.method(), Method::POST | Method::PUT | Method::PATCH | Method::DELETE);
    let key = req
        .headers()
        .get(IDEMPOTENCY_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_owned);
    let (true, Some(key)) = (mutating, key) else {
        return next.run(req).await;
    };
    let slot = state
        .idempotency
        .slot(format!("{} {} {key}", req.method(), req.uri().path()));
    let mut guard = slot.lock().await;
    if let Some(cached) = guard.as_ref() {
        let mut resp = rebuild(cached);
        resp.headers_mut()
            .insert(REPLAYED_HEADER, HeaderValue::from_static("true"));
        return resp;
    }

    let resp = next.run(req).await;
    let (parts, body) = resp.into_parts();
    let body = match axum::body::to_bytes(body, usize::MAX).await {
        Ok(b) => b,
        Err(e) => return (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    };
    let cached = Cached {
        status: parts.status,
        content_type: parts.headers.get(header::CONTENT_TYPE).cloned(),
        body,
    };
    if !cached.status.is_server_error() {
        *guard = Some(cached.clone());
    }
    Response::from_parts(parts, Body::from(cached.body))
}

fn rebuild(c: &Cached) -> Response {
    let mut resp = Response::new(Body::from(c.body.clone()));
    *resp.status_mut() = c.status;
    if let Some(ct) = &c.content_type {
        resp.headers_mut().insert(header::CONTENT_TYPE, ct.clone());
    }
    resp
}

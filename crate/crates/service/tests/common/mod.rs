#![allow(dead_code)]

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use memstrata_core::{Config, Provider};
use memstrata_service::{router, AppState, Clock, SessionRegistry};
use serde_json::Value;
use tower::ServiceExt;

/// A clock the test advances by hand.
#[derive(Clone, Default)]
pub struct ManualClock(pub Arc<AtomicU64>);

impl ManualClock {
    pub fn at(t: u64) -> Self {
        Self(Arc::new(AtomicU64::new(t)))
    }
    pub fn set(&self, t: u64) {
        self.0.store(t, Ordering::SeqCst);
    }
    pub fn clock(&self) -> Clock {
        let inner = Arc::clone(&self.0);
        Arc::new(move || inner.load(Ordering::SeqCst))
    }
}

pub struct TestApp {
    pub router: Router,
    pub registry: Arc<SessionRegistry>,
}

pub fn app(dir: &Path, config: Config, provider: Provider, clock: Clock, token: Option<&str>) -> TestApp {
    let registry = Arc::new(SessionRegistry::new(dir, config, provider, clock));
    let state = AppState { registry: Arc::clone(&registry), bearer_token: token.map(Arc::from) };
    TestApp { router: router(state), registry }
}

pub async fn call(router: &Router, method: Method, uri: &str, body: Option<Value>, token: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let req = match body {
        Some(v) => req.header("content-type", "application/json").body(Body::from(v.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = router.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let json = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    (status, json)
}

pub fn snapshot_bytes(dir: &Path, user: &str) -> Option<Vec<u8>> {
    std::fs::read(dir.join(user).join("memory.json")).ok()
}

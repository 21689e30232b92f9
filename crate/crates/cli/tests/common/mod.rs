#![allow(dead_code)]

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use jnd_core::dataset::Corpus;
use jnd_core::perturb::PerturbContext;
use jnd_core::reference::ReferencePool;
use jnd_core::session::{LabService, Renderer, ServiceConfig};
use jnd_core::PriorSpec;
use jndlab::server::{router, AppState};
use serde_json::{json, Value};
use tower::ServiceExt;

pub struct Client {
    pub state: AppState,
    pub app: Router,
}

pub struct Reply {
    pub status: StatusCode,
    pub content_type: Option<String>,
    pub bytes: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).expect("json body")
    }
}

impl Client {
    pub fn new(corpus_dir: &std::path::Path, seed: u64) -> Self {
        let renderer = Renderer::new(
            ReferencePool::synthetic(3, seed, 16_000),
            PerturbContext::builtin(),
            None,
        );
        let corpus = Corpus::open(corpus_dir, PriorSpec::default()).unwrap();
        let config = ServiceConfig {
            seed,
            logical_clock: true,
            ..Default::default()
        };
        let state = AppState::new(LabService::new(config, renderer, corpus).unwrap());
        Self {
            app: router(state.clone()),
            state,
        }
    }

    pub async fn call(&self, method: &str, uri: &str, body: Option<Value>) -> Reply {
        let req = Request::builder().method(method).uri(uri);
        let req = match body {
            Some(v) => req
                .header("content-type", "application/json")
                .body(Body::from(v.to_string())),
            None => req.body(Body::empty()),
        }
        .unwrap();
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let content_type = resp
            .headers()
            .get("content-type")
            .map(|v| v.to_str().unwrap().to_string());
        let bytes = resp
            .into_body()
            .collect()
            .await
            .unwrap()
            .to_bytes()
            .to_vec();
        Reply {
            status,
            content_type,
            bytes,
        }
    }

    pub async fn ok(&self, method: &str, uri: &str, body: Option<Value>) -> Value {
        let r = self.call(method, uri, body).await;
        assert_eq!(
            r.status,
            StatusCode::OK,
            "{method} {uri}: {}",
            String::from_utf8_lossy(&r.bytes)
        );
        r.json()
    }

    pub async fn create(&self) -> String {
        let v = self.ok("POST", "/api/sessions", None).await;
        assert_eq!(v["stage"], "calibration");
        v["session_id"].as_str().unwrap().to_string()
    }

    pub async fn stage(&self, id: &str, body: Value) -> Reply {
        self.call("POST", &format!("/api/sessions/{id}/stage"), Some(body))
            .await
    }

    /// Calibration, attention (correct word unless `word` is given) and
    /// teaching. Returns the stage after attention.
    pub async fn preamble(&self, id: &str, word: Option<&str>) -> Value {
        let v = self
            .stage(id, json!({"stage": "calibration", "acknowledged": true}))
            .await
            .json();
        assert_eq!(v["stage"], "attention");
        let answer = self.state.lock().config().attention.answer.clone();
        let v = self
            .stage(
                id,
                json!({"stage": "attention", "word": word.unwrap_or(&answer)}),
            )
            .await
            .json();
        if v["stage"] != "teaching" {
            return v;
        }
        let v = self
            .stage(
                id,
                json!({"stage": "teaching", "answers": ["same", "different"]}),
            )
            .await
            .json();
        assert_eq!(v["stage"], "trials");
        v
    }

    /// Answers all 30 trials: truthfully on sentinels unless
    /// `flip_sentinel`, and by `rho > 50` on adaptive trials.
    pub async fn trials(&self, id: &str, flip_sentinel: bool) {
        let mut flipped = false;
        for k in 0..30 {
            let t = self
                .ok("GET", &format!("/api/sessions/{id}/trial"), None)
                .await;
            assert_eq!(t["replay_allowed"], true);
            assert_eq!(t["progress"]["answered"], k);
            let (rho, sentinel) = {
                let service = self.state.lock();
                let p = service.session_state(id).unwrap().pending.clone().unwrap();
                (p.perturbed.rho, p.sentinel)
            };
            let mut different = rho > 50.0;
            if sentinel && flip_sentinel && !flipped {
                different = !different;
                flipped = true;
            }
            let response = if different { "different" } else { "same" };
            let ack = self
                .ok(
                    "POST",
                    &format!("/api/sessions/{id}/answer"),
                    Some(json!({"trial_id": t["trial_id"], "response": response})),
                )
                .await;
            assert_eq!(ack["progress"]["answered"], k + 1);
        }
    }

    pub async fn comments(&self, id: &str) -> Value {
        let r = self
            .stage(id, json!({"stage": "comments", "text": "fine"}))
            .await;
        assert_eq!(r.status, StatusCode::OK);
        r.json()
    }
}

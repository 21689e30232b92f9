mod common;

use axum::http::StatusCode;
use common::Client;
use jnd_core::dataset::{export_triplets, read_manifest, ExportAugment};
use jnd_core::perturb::PerturbContext;
use jnd_core::reference::ReferencePool;
use serde_json::json;

#[tokio::test]
async fn full_session_is_accepted_and_exports_24_triplets() {
    let dir = tempfile::tempdir().unwrap();
    let client = Client::new(dir.path(), 1);
    let id = client.create().await;
    client.preamble(&id, None).await;
    client.trials(&id, false).await;
    let state = client.ok("GET", &format!("/api/sessions/{id}"), None).await;
    assert_eq!(state["stage"], "comments");
    let done = client.comments(&id).await;
    assert_eq!(done["stage"], "done");
    assert_eq!(done["status"], "accepted");

    let out = dir.path().join("export");
    let manifest = {
        let service = client.state.lock();
        export_triplets(
            service.corpus(),
            &ReferencePool::synthetic(3, 1, 16_000),
            &PerturbContext::builtin(),
            &out,
            ExportAugment::None,
        )
        .unwrap()
    };
    assert_eq!(read_manifest(manifest).unwrap().len(), 24);
}

#[tokio::test]
async fn rejections_and_ordering_errors() {
    let dir = tempfile::tempdir().unwrap();
    let client = Client::new(dir.path(), 2);

    let id = client.create().await;
    let v = client.preamble(&id, Some("not-a-choice")).await;
    assert_eq!(v["stage"], "done");
    assert_eq!(v["status"], "rejected_attention");

    let id = client.create().await;
    // no skipping ahead, and a refused request leaves the state alone
    let before = client.ok("GET", &format!("/api/sessions/{id}"), None).await;
    let r = client
        .stage(
            &id,
            json!({"stage": "teaching", "answers": ["same", "same"]}),
        )
        .await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    let r = client
        .call("GET", &format!("/api/sessions/{id}/trial"), None)
        .await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_eq!(
        client.ok("GET", &format!("/api/sessions/{id}"), None).await,
        before
    );

    client.preamble(&id, None).await;
    let t = client
        .ok("GET", &format!("/api/sessions/{id}/trial"), None)
        .await;
    let r = client
        .call("GET", &format!("/api/sessions/{id}/trial"), None)
        .await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert!(r.json()["error"]
        .as_str()
        .unwrap()
        .contains("answer pending"));
    let r = client
        .call(
            "POST",
            &format!("/api/sessions/{id}/answer"),
            Some(json!({"trial_id": 999, "response": "same"})),
        )
        .await;
    assert_eq!(r.status, StatusCode::CONFLICT);

    let audio = client
        .call("GET", t["audio_url_per"].as_str().unwrap(), None)
        .await;
    assert_eq!(audio.status, StatusCode::OK);
    assert_eq!(audio.content_type.as_deref(), Some("audio/wav"));
    assert_eq!(&audio.bytes[..4], b"RIFF");
    let again = client
        .call("GET", t["audio_url_per"].as_str().unwrap(), None)
        .await;
    assert_eq!(again.bytes, audio.bytes);
    let missing = client.call("GET", "/api/audio/deadbeef.wav", None).await;
    assert_eq!(missing.status, StatusCode::NOT_FOUND);
    let unknown = client.call("GET", "/api/sessions/nope", None).await;
    assert_eq!(unknown.status, StatusCode::NOT_FOUND);

    client
        .ok(
            "POST",
            &format!("/api/sessions/{id}/answer"),
            Some(json!({"trial_id": t["trial_id"], "response": "same"})),
        )
        .await;
    let id2 = client.create().await;
    client.preamble(&id2, None).await;
    client.trials(&id2, true).await;
    let done = client.comments(&id2).await;
    assert_eq!(done["status"], "rejected_sentinel");
    let r = client
        .call(
            "POST",
            &format!("/api/sessions/{id2}/answer"),
            Some(json!({"trial_id": 0, "response": "same"})),
        )
        .await;
    assert_eq!(r.status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn sessions_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let id = {
        let client = Client::new(dir.path(), 3);
        let id = client.create().await;
        client.preamble(&id, None).await;
        let t = client
            .ok("GET", &format!("/api/sessions/{id}/trial"), None)
            .await;
        client
            .ok(
                "POST",
                &format!("/api/sessions/{id}/answer"),
                Some(json!({"trial_id": t["trial_id"], "response": "different"})),
            )
            .await;
        id
    };
    let client = Client::new(dir.path(), 3);
    let state = client.ok("GET", &format!("/api/sessions/{id}"), None).await;
    assert_eq!(state["stage"], "trials");
    assert_eq!(state["progress"]["answered"], 1);
}

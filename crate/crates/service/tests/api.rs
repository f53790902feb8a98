use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use slowfast_core::denoiser::ArchConfig;
use slowfast_core::model::Model;
use slowfast_core::video::decode_png;
use slowfast_service::api::{router, AppState};
use slowfast_service::RunConfig;
use tower::ServiceExt;

fn config() -> RunConfig {
    let mut c = RunConfig::default();
    c.world.tile_px = 2;
    c.world.border_px = 1;
    c.chunks.f_p = 2;
    c.chunks.f_g = 2;
    c.schedule.sample_steps = 4;
    c.fast.rank = 2;
    c.fast.lr = 1e-3;
    c.fast.k = 2;
    c.fast.seed = 3;
    c.metrics.calibration_transitions = 200;
    c
}

fn model(seed: u64) -> Model {
    let arch = ArchConfig {
        channels: 8,
        groups: 4,
        frame_size: 16,
        ..Default::default()
    };
    Model::new(arch, config().schedule(), seed).unwrap()
}

fn state() -> Arc<AppState> {
    Arc::new(AppState::new(config(), Some(model(1))).unwrap())
}

async fn call(state: &Arc<AppState>, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = router(state.clone()).oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, v)
}

async fn create(state: &Arc<AppState>, body: Value) -> String {
    let (s, v) = call(state, Method::POST, "/api/session", Some(body)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

async fn act(state: &Arc<AppState>, id: &str, name: &str) -> (StatusCode, Value) {
    call(state, Method::POST, &format!("/api/session/{id}/action"), Some(json!({ "action_name": name }))).await
}

fn decode_frame(b64: &Value) -> Vec<f32> {
    let bytes = base64::engine::general_purpose::STANDARD.decode(b64.as_str().unwrap()).unwrap();
    let (h, w, f) = decode_png(&bytes).unwrap();
    assert_eq!((h, w), (16, 16));
    f
}

#[tokio::test]
async fn health_and_action_list() {
    let st = state();
    let (s, v) = call(&st, Method::GET, "/api/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    let (s, v) = call(&st, Method::GET, "/api/actions", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v.as_array().unwrap().len(), 7);
}

#[tokio::test]
async fn create_act_and_timeline() {
    let st = state();
    let (s, v) = call(&st, Method::POST, "/api/session", Some(json!({ "world_seed": 4 }))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["f_g"], 2);
    assert_eq!(v["templora_enabled"], true);
    decode_frame(&v["first_frame"]);
    let id = v["session_id"].as_str().unwrap().to_string();

    let script = ["move_forward", "turn_left", "strafe_right"];
    for (i, a) in script.iter().enumerate() {
        let (s, v) = act(&st, &id, a).await;
        assert_eq!(s, StatusCode::OK, "{v}");
        assert_eq!(v["chunk_index"], i);
        assert_eq!(v["frames"].as_array().unwrap().len(), 2);
        assert_eq!(v["templora_loss_trace"].as_array().unwrap().len(), 2);
        assert!(v["elapsed_ms"].is_u64());
        assert!(v.get("baseline_frames").is_none());
    }
    let (s, v) = call(&st, Method::GET, &format!("/api/session/{id}/timeline"), None).await;
    assert_eq!(s, StatusCode::OK);
    let chunks = v["chunks"].as_array().unwrap();
    assert_eq!(chunks.len(), 3);
    let mut prev = 0;
    for (i, c) in chunks.iter().enumerate() {
        assert_eq!(c["index"], i);
        assert_eq!(c["action"], script[i]);
        assert_eq!(c["frames"].as_array().unwrap().len(), 2);
        let cuts = c["scuts_so_far"].as_u64().unwrap();
        assert!(cuts >= prev);
        prev = cuts;
    }
    assert!(v["scuts_threshold"].as_f64().unwrap() > 0.0);
}

#[tokio::test]
async fn timeline_frames_match_action_responses() {
    let st = state();
    let id = create(&st, json!({ "world_seed": 2 })).await;
    let (_, a) = act(&st, &id, "move_forward").await;
    let (_, t) = call(&st, Method::GET, &format!("/api/session/{id}/timeline"), None).await;
    assert_eq!(t["chunks"][0]["frames"], a["frames"]);
}

#[tokio::test]
async fn baseline_twin_matches_at_first_chunk() {
    let st = state();
    let id = create(&st, json!({ "world_seed": 5, "compare_baseline": true })).await;
    let (s, v) = act(&st, &id, "move_forward").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["frames"], v["baseline_frames"]);
    let (_, v) = act(&st, &id, "move_backward").await;
    assert_eq!(v["baseline_frames"].as_array().unwrap().len(), 2);
    let (_, t) = call(&st, Method::GET, &format!("/api/session/{id}/timeline"), None).await;
    assert_eq!(t["chunks"][1]["baseline_frames"], v["baseline_frames"]);
}

#[tokio::test]
async fn disabled_templora_has_empty_trace() {
    let st = state();
    let id = create(&st, json!({ "templora": { "enabled": false } })).await;
    let (_, v) = act(&st, &id, "turn_right").await;
    assert_eq!(v["templora_loss_trace"], json!([]));
    let (s, v) = call(&st, Method::POST, &format!("/api/session/{id}/templora/reset"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["templora_enabled"], false);
}

#[tokio::test]
async fn same_seed_sessions_agree() {
    let st = state();
    let a = create(&st, json!({ "world_seed": 6 })).await;
    let b = create(&st, json!({ "world_seed": 6 })).await;
    assert_ne!(a, b);
    for name in ["move_forward", "strafe_left"] {
        let (_, x) = act(&st, &a, name).await;
        let (_, y) = act(&st, &b, name).await;
        assert_eq!(x["frames"], y["frames"]);
        assert_eq!(x["templora_loss_trace"], y["templora_loss_trace"]);
    }
}

#[tokio::test]
async fn mark_revisit_scores() {
    let st = state();
    let id = create(&st, json!({ "world_seed": 7, "compare_baseline": true })).await;
    let uri = format!("/api/session/{id}/mark_revisit");
    let (s, _) = call(&st, Method::POST, &uri, Some(json!({ "first_visit_chunk": 0 }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    act(&st, &id, "noop").await;
    let (s, v) = call(&st, Method::POST, &uri, Some(json!({ "first_visit_chunk": 0 }))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["src"], 100.0);
    assert_eq!(v["baseline_src"], 100.0);
    assert_eq!(v["current_chunk"], 0);
    act(&st, &id, "turn_left").await;
    let (_, v) = call(&st, Method::POST, &uri, Some(json!({ "first_visit_chunk": 0 }))).await;
    let src = v["src"].as_f64().unwrap();
    assert!((-100.0..=100.0).contains(&src));
    assert_eq!(v["current_chunk"], 1);
    let (s, _) = call(&st, Method::POST, &uri, Some(json!({ "first_visit_chunk": 2 }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn reset_gives_fresh_adapter() {
    let st = state();
    let a = create(&st, json!({ "world_seed": 8 })).await;
    let b = create(&st, json!({ "world_seed": 8 })).await;
    act(&st, &a, "move_forward").await;
    act(&st, &b, "move_forward").await;
    let (s, v) = call(&st, Method::POST, &format!("/api/session/{a}/templora/reset"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["chunk_index"], 1);
    assert_eq!(v["templora_enabled"], true);
    let sess = st.session(&a).unwrap();
    let g = sess.lock().await;
    let adapter = &g.main.templora().unwrap().adapter;
    for p in adapter.point_names() {
        assert!(adapter.b(&p).unwrap().data().iter().all(|&x| x == 0.0));
    }
    drop(g);
    let sb = st.session(&b).unwrap();
    let gb = sb.lock().await;
    let ab = &gb.main.templora().unwrap().adapter;
    assert!(ab.point_names().iter().any(|p| ab.b(p).unwrap().data().iter().any(|&x| x != 0.0)));
}

#[tokio::test]
async fn unknown_session_is_404_everywhere() {
    let st = state();
    let body = Some(json!({ "action_name": "noop" }));
    assert_eq!(call(&st, Method::POST, "/api/session/nope/action", body).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&st, Method::GET, "/api/session/nope/timeline", None).await.0, StatusCode::NOT_FOUND);
    let mark = Some(json!({ "first_visit_chunk": 0 }));
    assert_eq!(call(&st, Method::POST, "/api/session/nope/mark_revisit", mark).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&st, Method::POST, "/api/session/nope/templora/reset", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&st, Method::DELETE, "/api/session/nope", None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn delete_then_404() {
    let st = state();
    let id = create(&st, json!({})).await;
    let (s, _) = call(&st, Method::DELETE, &format!("/api/session/{id}"), None).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    assert_eq!(act(&st, &id, "noop").await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&st, Method::DELETE, &format!("/api/session/{id}"), None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(st.session_count(), 0);
}

#[tokio::test]
async fn invalid_action_is_400_with_allowed_list() {
    let st = state();
    let id = create(&st, json!({})).await;
    for bad in ["jump", "null", ""] {
        let (s, v) = act(&st, &id, bad).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{bad}");
        let allowed: Vec<&str> = v["allowed"].as_array().unwrap().iter().map(|x| x.as_str().unwrap()).collect();
        assert_eq!(allowed.len(), 7);
        assert!(allowed.contains(&"move_forward") && allowed.contains(&"noop"));
        assert!(v["error"].as_str().unwrap().contains(bad));
    }
    let (_, t) = call(&st, Method::GET, &format!("/api/session/{id}/timeline"), None).await;
    assert_eq!(t["chunks"], json!([]));
}

#[tokio::test]
async fn malformed_bodies_are_400() {
    let st = state();
    let id = create(&st, json!({})).await;
    let uri = format!("/api/session/{id}/action");
    assert_eq!(call(&st, Method::POST, &uri, Some(json!({}))).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&st, Method::POST, &uri, Some(json!({ "action": "noop" }))).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&st, Method::POST, &uri, None).await.0, StatusCode::BAD_REQUEST);
    let (s, _) = call(&st, Method::POST, "/api/session", Some(json!({ "templora": { "rank": 0 } }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&st, Method::POST, "/api/session", Some(json!({ "colour": "red" }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&st, Method::POST, "/api/session", Some(json!({ "checkpoint": "/no/such/file.sfvg" }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn in_flight_generation_is_409() {
    let st = state();
    let id = create(&st, json!({})).await;
    let sess = st.session(&id).unwrap();
    let guard = sess.lock().await;
    let (s, v) = act(&st, &id, "move_forward").await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert!(v["error"].as_str().unwrap().contains("generating"));
    let (s, _) = call(&st, Method::POST, &format!("/api/session/{id}/templora/reset"), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    drop(guard);
    assert_eq!(act(&st, &id, "move_forward").await.0, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_posts_never_both_run() {
    let st = state();
    let id = create(&st, json!({ "world_seed": 9 })).await;
    let a = tokio::spawn({
        let (st, id) = (st.clone(), id.clone());
        async move { act(&st, &id, "move_forward").await.0 }
    });
    let b = tokio::spawn({
        let (st, id) = (st.clone(), id.clone());
        async move { act(&st, &id, "move_forward").await.0 }
    });
    let codes = [a.await.unwrap(), b.await.unwrap()];
    assert!(codes.contains(&StatusCode::OK));
    assert!(codes.iter().all(|c| *c == StatusCode::OK || *c == StatusCode::CONFLICT));
    let ok = codes.iter().filter(|c| **c == StatusCode::OK).count();
    let (_, t) = call(&st, Method::GET, &format!("/api/session/{id}/timeline"), None).await;
    assert_eq!(t["chunks"].as_array().unwrap().len(), ok);
}

#[tokio::test]
async fn sessions_from_checkpoint_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sfvg");
    model(2).save(&path).unwrap();
    let st = Arc::new(AppState::new(config(), None).unwrap());
    let (s, _) = call(&st, Method::POST, "/api/session", Some(json!({}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let id = create(&st, json!({ "checkpoint": path.to_str().unwrap() })).await;
    assert_eq!(act(&st, &id, "turn_left").await.0, StatusCode::OK);
    st.register_model("toy", model(2));
    let other = create(&st, json!({ "checkpoint": "toy" })).await;
    let (_, x) = call(&st, Method::GET, &format!("/api/session/{id}/timeline"), None).await;
    act(&st, &other, "turn_left").await;
    let (_, y) = call(&st, Method::GET, &format!("/api/session/{other}/timeline"), None).await;
    assert_eq!(x["first_frame"], y["first_frame"]);
    assert_eq!(x["chunks"][0]["frames"], y["chunks"][0]["frames"]);
}

#[tokio::test]
async fn mismatched_frame_size_is_400() {
    let st = state();
    let arch = ArchConfig {
        channels: 8,
        groups: 4,
        frame_size: 32,
        ..Default::default()
    };
    st.register_model("big", Model::new(arch, config().schedule(), 0).unwrap());
    let (s, v) = call(&st, Method::POST, "/api/session", Some(json!({ "checkpoint": "big" }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("px"));
}

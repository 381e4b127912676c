use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::Engine;
use chrono::{Duration, TimeZone, Utc};
use doorwatch::api::router;
use doorwatch::app::{App, AppParts};
use doorwatch::clock::{Clock, ManualClock, SteppingClock};
use doorwatch::config::Config;
use doorwatch::fixtures::{self, JohnAtEntrance};
use doorwatch::pipeline::encode_png;
use doorwatch_core::face_geometry::CaptureGuidance;
use doorwatch_core::store::Period;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Harness {
    _root: tempfile::TempDir,
    app: Arc<App>,
    clock: Arc<ManualClock>,
    paths: fixtures::FixturePaths,
    fx: JohnAtEntrance,
}

fn harness() -> Harness {
    let root = tempfile::tempdir().unwrap();
    let fx = JohnAtEntrance::generate();
    let paths = fx.write(root.path()).unwrap();
    let cfg = Config::load(&paths.config).unwrap();
    let clock = Arc::new(ManualClock::new(Utc.with_ymd_and_hms(2024, 6, 1, 9, 0, 0).unwrap()));
    let app = App::open(
        cfg,
        &root.path().join("data"),
        AppParts {
            clock: clock.clone(),
            ..AppParts::default()
        },
    )
    .unwrap();
    Harness {
        _root: root,
        app: Arc::new(app),
        clock,
        paths,
        fx,
    }
}

async fn call(r: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = r.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body)
}

async fn get(r: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b) = call(r, Request::get(uri).body(Body::empty()).unwrap()).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn post(r: &Router, uri: &str, token: Option<&str>, body: Value) -> (StatusCode, Value) {
    let mut req = Request::post(uri).header("content-type", "application/json");
    if let Some(t) = token {
        req = req.header("x-operator-token", t);
    }
    let (s, b) = call(r, req.body(Body::from(body.to_string())).unwrap()).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

fn b64(f: &doorwatch_core::GrayFrame) -> String {
    base64::engine::general_purpose::STANDARD.encode(encode_png(f))
}

#[tokio::test]
async fn door_starts_locked_and_opens_with_hold() {
    let h = harness();
    let r = router(h.app.clone());
    let (s, v) = get(&r, "/door").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!({"mode": "locked"}));

    let (s, _) = post(&r, "/door/open", None, json!({})).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, v) = post(&r, "/door/open", Some("intruder"), json!({})).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    assert_eq!(v["error"]["code"], "forbidden");

    let now = h.clock.now();
    let (s, v) = post(&r, "/door/open", Some("operator-token"), json!({"correlation": 1})).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["outcome"], "opened");
    let (_, v) = get(&r, "/door").await;
    assert_eq!(v["mode"], "unlocked");
    let close_at: chrono::DateTime<Utc> = serde_json::from_value(v["auto_close_at"].clone()).unwrap();
    assert_eq!(close_at, now + Duration::seconds(30));

    let (s, v) = call(
        &r,
        Request::post("/door/close?token=operator-token").body(Body::empty()).unwrap(),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&v));
    let (_, v) = get(&r, "/door").await;
    assert_eq!(v, json!({"mode": "locked"}));
}

#[tokio::test]
async fn profiles_events_scene_and_summary() {
    let h = harness();
    let r = router(h.app.clone());
    let fb = JohnAtEntrance::face_box().rect();
    let views: Vec<Value> = h
        .fx
        .enrollment
        .iter()
        .map(|f| json!({"image": b64(f), "face_box": [fb.x, fb.y, fb.width, fb.height]}))
        .collect();
    let person = json!({"name": "John", "contact": "+15550111", "relationship": "family", "views": views});
    let (s, v) = post(&r, "/profiles", None, person.clone()).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    let id = v["subject_id"].as_u64().unwrap();
    assert_eq!(v["view_ids"].as_array().unwrap().len(), 3);

    let (s, v) = post(&r, "/profiles", None, person).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"]["code"], "duplicate_person");

    let (_, v) = get(&r, "/profiles").await;
    assert_eq!(v[0]["name"], "John");

    let tiny = json!({"views": [{"image": b64(&h.fx.enrollment[0]), "face_box": [10, 10, 30, 30]}]});
    let (s, v) = post(&r, &format!("/profiles/{id}/views"), None, tiny).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{v}");

    let app = h.app.clone();
    let frames = h.paths.frames.clone();
    tokio::task::spawn_blocking(move || {
        let clock = SteppingClock::new(fixtures::start_time(), Duration::seconds(1));
        app.run_directory(fixtures::CAMERA_ID, &frames, &clock).unwrap();
    })
    .await
    .unwrap();

    let (s, v) = get(&r, "/events?since=0").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v.as_array().unwrap().len(), 1);
    assert_eq!(v[0]["summary_text"], "John at entrance talking over the phone");
    assert_eq!(v[0]["notifications"][0]["channel"], "mms");
    let (_, v) = get(&r, "/events?since=1").await;
    assert_eq!(v, json!([]));

    let (s, png) = call(&r, Request::get("/events/1/scene").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(doorwatch::pipeline::decode_image(&png).unwrap(), h.fx.frames[3]);
    let (s, v) = get(&r, "/events/9/scene").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["code"], "not_found");

    let anchor = "2024-06-01T12:00:00Z";
    let (s, body) = call(
        &r,
        Request::get(format!("/summary?period=daily&anchor={anchor}"))
            .body(Body::empty())
            .unwrap(),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let direct = h
        .app
        .store()
        .query_summary(Period::Daily, anchor.parse().unwrap());
    assert_eq!(body, serde_json::to_vec(&direct).unwrap());
    let (s, _) = get(&r, "/summary?period=yearly").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, body) = call(
        &r,
        Request::delete(format!("/profiles/{id}")).body(Body::empty()).unwrap(),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let (_, v) = get(&r, "/profiles").await;
    assert_eq!(v, json!([]));
    let (_, v) = get(&r, "/events").await;
    assert_eq!(v[0]["verdict"]["deleted"], true);
    let (s, _) = call(&r, Request::delete(format!("/profiles/{id}")).body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn guidance_phrases() {
    let h = harness();
    let r = router(h.app.clone());
    let (s, v) = post(
        &r,
        "/profiles/guidance",
        None,
        json!({"width": 640, "height": 480, "face_box": [0, 0, 100, 100]}),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["guidance"], "top_left");
    assert_eq!(v["phrase"], CaptureGuidance::TopLeft.phrase());

    let (_, v) = post(
        &r,
        "/profiles/guidance",
        None,
        json!({"image": b64(&h.fx.frames[3]), "face_box": [260, 80, 120, 120]}),
    )
    .await;
    assert_eq!(v["phrase"], CaptureGuidance::Center.phrase());

    let (_, v) = post(
        &r,
        "/profiles/guidance",
        None,
        json!({"width": 640, "height": 480, "face_box": [300, 200, 32, 32]}),
    )
    .await;
    assert_eq!(v["guidance"], serde_json::to_value(CaptureGuidance::TooSmallComeCloser).unwrap());

    let (s, v) = post(&r, "/profiles/guidance", None, json!({"face_box": [1, 1, 50, 50]})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["code"], "invalid_argument");
}

#[tokio::test]
async fn stream_pushes_new_events() {
    let h = harness();
    let r = router(h.app.clone());
    let resp = r
        .clone()
        .oneshot(Request::get("/events/stream").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.headers()["content-type"], "text/event-stream");
    let mut body = resp.into_body();

    let app = h.app.clone();
    let frames = h.paths.frames.clone();
    tokio::task::spawn_blocking(move || {
        let clock = SteppingClock::new(fixtures::start_time(), Duration::seconds(1));
        app.run_directory(fixtures::CAMERA_ID, &frames, &clock).unwrap();
    })
    .await
    .unwrap();

    let mut text = String::new();
    while !text.contains("\n\n") {
        let frame = tokio::time::timeout(std::time::Duration::from_secs(5), body.frame())
            .await
            .expect("event pushed")
            .unwrap()
            .unwrap();
        if let Ok(data) = frame.into_data() {
            text.push_str(std::str::from_utf8(&data).unwrap());
        }
    }
    assert!(text.contains("event: event"), "{text}");
    assert!(text.contains("id: 1"), "{text}");
    assert!(text.contains("An unknown person at the entrance talking over the phone"), "{text}");
}

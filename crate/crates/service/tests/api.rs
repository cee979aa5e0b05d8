use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use image::RgbImage;
use serde_json::Value;
use tower::ServiceExt;

use icseg::imageops::rgb_to_png_bytes;
use icseg::model::{ModelConfig, ModelState};
use icseg::palette::Palette;
use icseg::segmap::{SegmentMap, TaskKind};
use icseg_service::{router, AppState, ServiceConfig, TIMING_HEADER};

const SIDE: u32 = 16;
const BOUNDARY: &str = "icsegtestboundary";

fn small_model() -> ModelState<f32> {
    ModelState::init(ModelConfig {
        patch: 4,
        dim: 16,
        depth: 1,
        heads: 2,
        canvas_side: 2 * SIDE,
        seed: 3,
        ..Default::default()
    })
    .unwrap()
}

fn app_with(cfg: ServiceConfig) -> Router {
    router(AppState::new(small_model(), cfg))
}

fn app() -> Router {
    app_with(ServiceConfig::default())
}

fn image(seed: u8) -> RgbImage {
    RgbImage::from_fn(SIDE, SIDE, |x, y| {
        image::Rgb([
            (x * 13) as u8 ^ seed,
            (y * 7) as u8,
            seed.wrapping_mul(31).wrapping_add((x + y) as u8),
        ])
    })
}

fn mask(offset: u32) -> SegmentMap {
    let ids = (0..SIDE * SIDE)
        .map(|i| {
            let (x, y) = (i % SIDE, i / SIDE);
            if (x + offset) % SIDE < SIDE / 2 && y > 3 {
                1
            } else {
                0
            }
        })
        .collect();
    SegmentMap::from_ids(SIDE, SIDE, ids, TaskKind::Category)
}

fn palette() -> Palette {
    Palette::new([0, 0, 0], BTreeMap::from([(1, [250, 20, 20])]))
}

enum Part<'a> {
    File(&'a str, Vec<u8>),
    Text(&'a str, String),
}

fn multipart(parts: Vec<Part<'_>>) -> Body {
    let mut body = Vec::new();
    for p in parts {
        body.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        match p {
            Part::File(name, bytes) => {
                body.extend_from_slice(
                    format!("Content-Disposition: form-data; name=\"{name}\"; filename=\"{name}.png\"\r\nContent-Type: image/png\r\n\r\n")
                        .as_bytes(),
                );
                body.extend_from_slice(&bytes);
            }
            Part::Text(name, text) => {
                body.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n{text}").as_bytes());
            }
        }
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    Body::from(body)
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>, Option<String>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let timing = resp.headers().get(TIMING_HEADER).map(|v| v.to_str().unwrap().to_string());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes, timing)
}

fn json(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

async fn create_session(app: &Router) -> String {
    let (status, body, _) = send(app, Request::post("/sessions").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::CREATED);
    json(&body)["id"].as_str().unwrap().to_string()
}

fn example_request(sid: &str, src: &RgbImage, map: &SegmentMap, pal: &Palette) -> Request<Body> {
    Request::post(format!("/sessions/{sid}/examples"))
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(multipart(vec![
            Part::File("source", rgb_to_png_bytes(src).unwrap()),
            Part::File("mask", map.to_png_bytes().unwrap()),
            Part::Text("palette", pal.to_json()),
        ]))
        .unwrap()
}

async fn add_example(app: &Router, sid: &str, seed: u8) -> StatusCode {
    send(app, example_request(sid, &image(seed), &mask(seed as u32), &palette()))
        .await
        .0
}

fn predict_request(sid: &str, strategy: &str, grid_n: Option<u32>) -> Request<Body> {
    let mut parts = vec![
        Part::File("query", rgb_to_png_bytes(&image(99)).unwrap()),
        Part::Text("strategy", strategy.to_string()),
        Part::Text("task_kind", "category".to_string()),
    ];
    if let Some(n) = grid_n {
        parts.push(Part::Text("grid_n", n.to_string()));
    }
    Request::post(format!("/sessions/{sid}/predict"))
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(multipart(parts))
        .unwrap()
}

async fn predict_json(app: &Router, sid: &str, strategy: &str, grid_n: Option<u32>) -> Value {
    let (status, body, timing) = send(app, predict_request(sid, strategy, grid_n)).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    assert!(timing.unwrap().contains("model="));
    json(&body)
}

#[tokio::test]
async fn health_and_models() {
    let app = app();
    let (status, body, _) = send(&app, Request::get("/healthz").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json(&body)["status"], "ok");
    let (status, body, _) = send(&app, Request::get("/models").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let v = json(&body);
    assert_eq!(v["models"][0]["id"], "default");
    assert_eq!(v["models"][0]["config"]["canvas_side"], 32);
    assert_eq!(v["models"][0]["checksum"].as_str().unwrap().len(), 64);
}

#[tokio::test]
async fn example_lifecycle() {
    let app = app();
    let sid = create_session(&app).await;
    assert_eq!(add_example(&app, &sid, 1).await, StatusCode::CREATED);
    assert_eq!(add_example(&app, &sid, 2).await, StatusCode::CREATED);

    let (status, body, _) = send(&app, Request::get(format!("/sessions/{sid}/examples")).body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let v = json(&body);
    let ids: Vec<u64> = v["examples"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["id"].as_u64().unwrap())
        .collect();
    assert_eq!(ids, vec![1, 2]);
    let thumb = B64.decode(v["examples"][0]["thumbnail_png"].as_str().unwrap()).unwrap();
    assert!(image::load_from_memory(&thumb).is_ok());
    assert_eq!(v["examples"][0]["ids"], serde_json::json!([1]));

    let (status, body, _) = send(
        &app,
        Request::delete(format!("/sessions/{sid}/examples/1")).body(Body::empty()).unwrap(),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json(&body)["examples"].as_array().unwrap().len(), 1);
    let (status, _, _) = send(
        &app,
        Request::delete(format!("/sessions/{sid}/examples/1")).body(Body::empty()).unwrap(),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, _, _) = send(&app, Request::delete(format!("/sessions/{sid}")).body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (status, _, _) = send(&app, Request::get(format!("/sessions/{sid}/examples")).body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn unknown_session_is_404() {
    let app = app();
    assert_eq!(add_example(&app, "nope", 1).await, StatusCode::NOT_FOUND);
    let (status, body, _) = send(&app, predict_request("nope", "single", None)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(json(&body)["code"], "not_found");
}

#[tokio::test]
async fn predict_without_examples_is_409() {
    let app = app();
    let sid = create_session(&app).await;
    let (status, _, _) = send(&app, predict_request(&sid, "single", None)).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn example_cap_is_413() {
    let app = app_with(ServiceConfig {
        max_examples: 2,
        ..ServiceConfig::default()
    });
    let sid = create_session(&app).await;
    assert_eq!(add_example(&app, &sid, 1).await, StatusCode::CREATED);
    assert_eq!(add_example(&app, &sid, 2).await, StatusCode::CREATED);
    assert_eq!(add_example(&app, &sid, 3).await, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn bad_inputs_are_422_or_400() {
    let app = app();
    let sid = create_session(&app).await;
    let wrong = RgbImage::new(SIDE + 4, SIDE);
    let (status, _, _) = send(&app, example_request(&sid, &wrong, &mask(0), &palette())).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let mut two = mask(0);
    two.set(0, 0, 2);
    let (status, _, _) = send(&app, example_request(&sid, &image(1), &two, &palette())).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let req = Request::post(format!("/sessions/{sid}/examples"))
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(multipart(vec![Part::File("source", b"not a png".to_vec())]))
        .unwrap();
    assert_eq!(send(&app, req).await.0, StatusCode::UNPROCESSABLE_ENTITY);

    assert_eq!(add_example(&app, &sid, 1).await, StatusCode::CREATED);
    let (status, _, _) = send(&app, predict_request(&sid, "median", None)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn duplicated_feature_examples_match_single() {
    let app = app();
    let sid = create_session(&app).await;
    for _ in 0..3 {
        assert_eq!(add_example(&app, &sid, 5).await, StatusCode::CREATED);
    }
    let single = predict_json(&app, &sid, "single", None).await;
    let feature = predict_json(&app, &sid, "feature", None).await;
    assert_eq!(single["mask_png"], feature["mask_png"]);
    assert_eq!(single["prediction_png"], feature["prediction_png"]);
    assert_eq!(feature["examples"], 3);
}

#[tokio::test]
async fn spatial_grid_one_matches_single() {
    let app = app();
    let sid = create_session(&app).await;
    assert_eq!(add_example(&app, &sid, 7).await, StatusCode::CREATED);
    let single = predict_json(&app, &sid, "single", None).await;
    let spatial = predict_json(&app, &sid, "spatial", Some(1)).await;
    assert_eq!(single["mask_png"], spatial["mask_png"]);
    let mask = B64.decode(spatial["mask_png"].as_str().unwrap()).unwrap();
    let map = SegmentMap::from_png_bytes(&mask, TaskKind::Category).unwrap();
    assert_eq!(map.dimensions(), (SIDE, SIDE));
    assert!(map.ids().iter().all(|&i| i <= 1));
}

#[tokio::test]
async fn spatial_grid_too_small_is_422() {
    let app = app();
    let sid = create_session(&app).await;
    for s in 0..3 {
        assert_eq!(add_example(&app, &sid, s).await, StatusCode::CREATED);
    }
    let (status, _, _) = send(&app, predict_request(&sid, "spatial", Some(1))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn identical_requests_give_identical_bodies() {
    let app = app();
    let mut bodies = Vec::new();
    for _ in 0..2 {
        let sid = create_session(&app).await;
        for s in [1, 2] {
            assert_eq!(add_example(&app, &sid, s).await, StatusCode::CREATED);
        }
        let (status, body, _) = send(&app, predict_request(&sid, "feature", None)).await;
        assert_eq!(status, StatusCode::OK);
        bodies.push(body);
    }
    assert_eq!(bodies[0], bodies[1]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_adds_get_unique_ids() {
    let app = app();
    let sid = Arc::new(create_session(&app).await);
    let tasks: Vec<_> = (0..8u8)
        .map(|s| {
            let app = app.clone();
            let sid = Arc::clone(&sid);
            tokio::spawn(async move { add_example(&app, &sid, s).await })
        })
        .collect();
    for t in tasks {
        assert_eq!(t.await.unwrap(), StatusCode::CREATED);
    }
    let (_, body, _) = send(&app, Request::get(format!("/sessions/{sid}/examples")).body(Body::empty()).unwrap()).await;
    let mut ids: Vec<u64> = json(&body)["examples"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["id"].as_u64().unwrap())
        .collect();
    ids.sort_unstable();
    assert_eq!(ids, (1..=8).collect::<Vec<_>>());
}

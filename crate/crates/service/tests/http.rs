use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use gala_core::api::{Engine, QueryResponse};
use gala_core::dataset::extract_pair;
use gala_core::placement::PlacementConfig;
use gala_core::retrieval::{build_index, save_index};
use gala_core::synthetic::{generate_scene, SynthConfig};
use gala_core::{BoundingBox, EncoderConfig, ImageTensor, TowerRole, TowerWeights};
use gala_service::{router, AppState};
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    root: std::path::PathBuf,
    scenes: Vec<(ImageTensor, BoundingBox, String)>,
}

fn fixture(n: u64) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let cfg = SynthConfig::default();
    let mut fgs = Vec::new();
    let mut scenes = Vec::new();
    for seed in 0..n {
        let scene = generate_scene(seed, &cfg).unwrap();
        let (mask, cat) = &scene.instances[0];
        let id = format!("obj{seed}");
        let (bg, fg) = extract_pair(&scene.image, mask, &id, &id, cat).unwrap();
        fg.image.save(root.join(format!("{id}.png"))).unwrap();
        fg.mask.save(root.join(format!("{id}_mask.png"))).unwrap();
        scenes.push((scene.image.clone(), bg.bbox.unwrap(), id));
        fgs.push(fg);
    }
    let enc = EncoderConfig::desk();
    let fg_tower = TowerWeights::init(enc.clone(), TowerRole::Foreground, 2).unwrap();
    let bg_tower = TowerWeights::init(enc, TowerRole::Background, 1).unwrap();
    let mut index = build_index(&fgs, &fg_tower).unwrap();
    for i in 0..index.len() {
        let id = index.ids()[i].clone();
        let meta = index.meta_mut(i);
        meta.thumbnail_path = Some(format!("{id}.png"));
        meta.mask_path = Some(format!("{id}_mask.png"));
    }
    save_index(&index, &root.join("index.gidx")).unwrap();
    gala_core::encoder::checkpoint::save_checkpoint(&bg_tower, &root.join("background.ckpt")).unwrap();
    Fixture { _dir: dir, root, scenes }
}

fn placement() -> PlacementConfig {
    PlacementConfig {
        grid_k: 4,
        ..PlacementConfig::default()
    }
}

fn app(root: &Path) -> Router {
    let engine = Engine::load(&root.join("index.gidx"), root, placement()).unwrap();
    router(AppState::loaded(engine))
}

fn b64_png(image: &ImageTensor) -> String {
    B64.encode(image.encode_png().unwrap())
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, body.to_vec())
}

fn post_json(uri: &str, body: serde_json::Value) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(serde_json::to_vec(&body).unwrap()))
        .unwrap()
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn strip_timing(body: &[u8]) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_slice(body).unwrap();
    v.as_object_mut().unwrap().remove("elapsed_ms").expect("timing field");
    v
}

fn multipart(fields: &[(&str, Vec<u8>)]) -> (String, Vec<u8>) {
    let boundary = "gala-test-boundary";
    let mut body = Vec::new();
    for (name, data) in fields {
        body.extend_from_slice(format!("--{boundary}\r\n").as_bytes());
        if *name == "image" {
            body.extend_from_slice(
                b"Content-Disposition: form-data; name=\"image\"; filename=\"bg.png\"\r\nContent-Type: image/png\r\n\r\n",
            );
        } else {
            body.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n").as_bytes());
        }
        body.extend_from_slice(data);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    (format!("multipart/form-data; boundary={boundary}"), body)
}

#[tokio::test]
async fn endpoints_answer_503_before_the_index_is_loaded() {
    let app = router(AppState::empty(1, 4));
    let (status, body) = send(&app, get("/v1/health")).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(strip_or(&body), "loading");
    let (status, _) = send(&app, post_json("/v1/query", serde_json::json!({"image": "", "k": 1}))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let (status, _) = send(&app, get("/v1/objects/x/thumbnail")).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

fn strip_or(body: &[u8]) -> String {
    let v: serde_json::Value = serde_json::from_slice(body).unwrap();
    v["status"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn health_reports_the_loaded_index() {
    let fx = fixture(5);
    let state = AppState::empty(1, 4);
    let app = router(state.clone());
    assert!(state.install(Engine::load(&fx.root.join("index.gidx"), &fx.root, placement()).unwrap()));
    let (status, body) = send(&app, get("/v1/health")).await;
    assert_eq!(status, StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["index_size"], 5);
    assert_eq!(v["embed_dim"], 128);
}

#[tokio::test]
async fn boxed_query_ranks_the_gallery() {
    let fx = fixture(6);
    let app = app(&fx.root);
    let (image, b, _) = &fx.scenes[0];
    let req = serde_json::json!({"image": b64_png(image), "box": [b.left, b.top, b.width, b.height], "k": 4});
    let (status, body) = send(&app, post_json("/v1/query", req.clone())).await;
    assert_eq!(status, StatusCode::OK);
    let resp: QueryResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(resp.results.len(), 4);
    assert!(resp.bbox.is_none());
    assert!(resp.results.windows(2).all(|w| w[0].score >= w[1].score));
    for hit in &resp.results {
        assert_eq!(hit.thumbnail_url, format!("/v1/objects/{}/thumbnail", hit.id));
    }
    let (_, again) = send(&app, post_json("/v1/query", req)).await;
    assert_eq!(strip_timing(&body), strip_timing(&again));
}

#[tokio::test]
async fn k_of_one_on_a_single_object_gallery_returns_one_result() {
    let fx = fixture(1);
    let app = app(&fx.root);
    let (image, b, id) = &fx.scenes[0];
    let req = serde_json::json!({"image": b64_png(image), "box": [b.left, b.top, b.width, b.height], "k": 1});
    let (status, body) = send(&app, post_json("/v1/query", req)).await;
    assert_eq!(status, StatusCode::OK);
    let resp: QueryResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(resp.results.len(), 1);
    assert_eq!(&resp.results[0].id, id);
}

#[tokio::test]
async fn k_is_capped_at_fifty() {
    let fx = fixture(55);
    let app = app(&fx.root);
    let (image, b, _) = &fx.scenes[0];
    let req = serde_json::json!({"image": b64_png(image), "box": [b.left, b.top, b.width, b.height], "k": 500});
    let (status, body) = send(&app, post_json("/v1/query", req)).await;
    assert_eq!(status, StatusCode::OK);
    let resp: QueryResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(resp.results.len(), 50);
}

#[tokio::test]
async fn non_box_query_returns_a_placement() {
    let fx = fixture(4);
    let app = app(&fx.root);
    let (image, _, _) = &fx.scenes[1];
    let (status, body) = send(&app, post_json("/v1/query", serde_json::json!({"image": b64_png(image), "k": 3}))).await;
    assert_eq!(status, StatusCode::OK);
    let resp: QueryResponse = serde_json::from_slice(&body).unwrap();
    let [l, t, w, h] = resp.bbox.expect("predicted box");
    assert!(l + w <= image.width() && t + h <= image.height());
    let frac = (w * h) as f64 / image.area() as f64;
    let init = placement().init_area_fraction as f64;
    assert!(frac >= init * 1.2f64.powi(-4) && frac <= init * 1.2f64.powi(4), "area fraction {frac}");
    assert!(resp.object_id.is_some());
    let heat = B64.decode(resp.heatmap_png_b64.unwrap()).unwrap();
    let heat = ImageTensor::decode(&heat).unwrap();
    assert_eq!((heat.width(), heat.height()), (image.width(), image.height()));
}

#[tokio::test]
async fn malformed_requests_are_rejected_with_400() {
    let fx = fixture(2);
    let app = app(&fx.root);
    let (image, _, _) = &fx.scenes[0];
    let cases = [
        serde_json::json!({"image": "not base64!!", "k": 1}),
        serde_json::json!({"image": B64.encode(b"not an image"), "k": 1}),
        serde_json::json!({"image": b64_png(image), "box": [60, 60, 10, 10], "k": 1}),
        serde_json::json!({"image": b64_png(image), "box": [1, 1, 0, 3], "k": 1}),
        serde_json::json!({"image": b64_png(image), "k": 0}),
        serde_json::json!({"k": 1}),
    ];
    for req in cases {
        let (status, body) = send(&app, post_json("/v1/query", req.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{req}");
        let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
        assert!(v["error"].is_string());
    }
    let raw = Request::post("/v1/query").body(Body::from("{")).unwrap();
    assert_eq!(send(&app, raw).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn multipart_query_matches_json_query() {
    let fx = fixture(4);
    let app = app(&fx.root);
    let (image, b, _) = &fx.scenes[2];
    let json = serde_json::json!({"image": b64_png(image), "box": [b.left, b.top, b.width, b.height], "k": 3});
    let (_, json_body) = send(&app, post_json("/v1/query", json)).await;
    let (ctype, body) = multipart(&[
        ("image", image.encode_png().unwrap()),
        ("box", format!("{},{},{},{}", b.left, b.top, b.width, b.height).into_bytes()),
        ("k", b"3".to_vec()),
    ]);
    let req = Request::post("/v1/query").header("content-type", ctype).body(Body::from(body)).unwrap();
    let (status, mp_body) = send(&app, req).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&mp_body));
    assert_eq!(strip_timing(&json_body), strip_timing(&mp_body));
}

#[tokio::test]
async fn composite_returns_a_png_and_404s_unknown_objects() {
    let fx = fixture(3);
    let app = app(&fx.root);
    let (image, b, id) = &fx.scenes[0];
    let req = serde_json::json!({"image": b64_png(image), "object_id": id, "box": [b.left, b.top, b.width, b.height]});
    let (status, png) = send(&app, post_json("/v1/composite", req)).await;
    assert_eq!(status, StatusCode::OK);
    let out = ImageTensor::decode(&png).unwrap();
    assert_eq!((out.width(), out.height()), (image.width(), image.height()));

    let tiny = serde_json::json!({"image": b64_png(image), "object_id": id, "box": [3, 3, 1, 1]});
    assert_eq!(send(&app, post_json("/v1/composite", tiny)).await.0, StatusCode::OK);

    let unknown = serde_json::json!({"image": b64_png(image), "object_id": "nope", "box": [0, 0, 4, 4]});
    assert_eq!(send(&app, post_json("/v1/composite", unknown)).await.0, StatusCode::NOT_FOUND);

    let (ctype, body) = multipart(&[
        ("image", image.encode_png().unwrap()),
        ("object_id", id.clone().into_bytes()),
        ("box", b"[2,2,8,8]".to_vec()),
    ]);
    let req = Request::post("/v1/composite").header("content-type", ctype).body(Body::from(body)).unwrap();
    assert_eq!(send(&app, req).await.0, StatusCode::OK);
}

#[tokio::test]
async fn thumbnails_are_square_pngs() {
    let fx = fixture(3);
    let app = app(&fx.root);
    let (status, png) = send(&app, get("/v1/objects/obj1/thumbnail")).await;
    assert_eq!(status, StatusCode::OK);
    let thumb = ImageTensor::decode(&png).unwrap();
    assert_eq!(thumb.width(), thumb.height());
    assert_eq!(send(&app, get("/v1/objects/missing/thumbnail")).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn replaying_twenty_recorded_queries_is_byte_identical() {
    let fx = fixture(10);
    let mut requests = Vec::new();
    for i in 0..20 {
        let (image, b, _) = &fx.scenes[i % fx.scenes.len()];
        let mut req = serde_json::json!({"image": b64_png(image), "k": 5});
        if i % 2 == 0 {
            req["box"] = serde_json::json!([b.left, b.top, b.width, b.height]);
        }
        requests.push(req);
    }
    let recorder = app(&fx.root);
    let mut recorded = Vec::new();
    for req in &requests {
        let (status, body) = send(&recorder, post_json("/v1/query", req.clone())).await;
        assert_eq!(status, StatusCode::OK);
        recorded.push(body);
    }
    let replayer = app(&fx.root);
    for (req, old) in requests.iter().zip(&recorded).rev() {
        let (_, new) = send(&replayer, post_json("/v1/query", req.clone())).await;
        let cut = |b: &[u8]| {
            let s = String::from_utf8(b.to_vec()).unwrap();
            let at = s.find("\"elapsed_ms\":").unwrap();
            s[..at].to_string()
        };
        assert_eq!(cut(&new), cut(old));
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_do_not_interfere() {
    let fx = fixture(4);
    let app = app(&fx.root);
    let (image, b, _) = &fx.scenes[0];
    let req = serde_json::json!({"image": b64_png(image), "box": [b.left, b.top, b.width, b.height], "k": 4});
    let (_, reference) = send(&app, post_json("/v1/query", req.clone())).await;
    let mut handles = Vec::new();
    for _ in 0..8 {
        let (app, req) = (app.clone(), req.clone());
        handles.push(tokio::spawn(async move { send(&app, post_json("/v1/query", req)).await }));
    }
    for h in handles {
        let (status, body) = h.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        assert_eq!(strip_timing(&body), strip_timing(&reference));
    }
}

#[tokio::test]
async fn a_single_pending_slot_serves_sequential_traffic() {
    let fx = fixture(2);
    let engine = Engine::load(&fx.root.join("index.gidx"), &fx.root, placement()).unwrap();
    let state = AppState::empty(1, 1);
    state.install(engine);
    let app = router(state);
    for _ in 0..3 {
        assert_eq!(send(&app, get("/v1/objects/obj0/thumbnail")).await.0, StatusCode::OK);
    }
}

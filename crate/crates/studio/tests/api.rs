use std::io::Cursor;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::Engine;
use http_body_util::BodyExt;
use sha2::{Digest, Sha256};
use tower::ServiceExt;

use slgan::config::TrainConfig;
use slgan::domain::Domain;
use slgan::fixtures::synthetic_face;
use slgan::inference::FrozenModel;
use slgan::training::{save_checkpoint, ModelBundle};
use slgan_studio::{router, LoadedBundle, Studio, DEFAULT_BODY_LIMIT, DEFAULT_SESSION_TTL};

const BOUNDARY: &str = "slgan-test-boundary";

fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.model.resolution = 16;
    c.model.trunk_down_stages = 2;
    c.seed = 5;
    c
}

fn write_bundle(dir: &Path) -> std::path::PathBuf {
    let mut b = ModelBundle::init(&tiny_config(), 11).unwrap();
    b.step = 3;
    let p = dir.join("bundle.ckpt");
    save_checkpoint(&b, &p).unwrap();
    p
}

fn png(img: &image::DynamicImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).unwrap();
    buf.into_inner()
}

struct FaceFiles {
    image: Vec<u8>,
    parsing: Vec<u8>,
    landmarks: String,
}

fn face_files(domain: Domain, seed: u64) -> FaceFiles {
    let f = synthetic_face(32, domain, seed);
    FaceFiles {
        image: png(&image::DynamicImage::ImageRgb8(f.image)),
        parsing: png(&image::DynamicImage::ImageLuma8(f.labels)),
        landmarks: f.landmarks.iter().map(|(x, y)| format!("{x} {y}\n")).collect(),
    }
}

fn multipart(parts: &[(&str, &[u8])]) -> Vec<u8> {
    let mut body = Vec::new();
    for (name, data) in parts {
        body.extend_from_slice(
            format!(
                "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"{name}\"; filename=\"{name}\"\r\n\
                 Content-Type: application/octet-stream\r\n\r\n"
            )
            .as_bytes(),
        );
        body.extend_from_slice(data);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

fn face_parts(f: &FaceFiles, with_parsing: bool) -> Vec<u8> {
    let mut parts: Vec<(&str, &[u8])> = vec![("image", &f.image), ("landmarks", f.landmarks.as_bytes())];
    if with_parsing {
        parts.push(("parsing", &f.parsing));
    }
    multipart(&parts)
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, serde_json::Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let json = serde_json::from_slice(&bytes).unwrap_or(serde_json::Value::Null);
    (status, json)
}

fn upload(uri: &str, body: Vec<u8>) -> Request<Body> {
    Request::post(uri)
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap()
}

fn json_post(uri: &str, v: serde_json::Value) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(v.to_string()))
        .unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    app: Router,
    bundle_path: std::path::PathBuf,
}

fn fixture_with(limit: usize, ttl: Duration) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let bundle_path = write_bundle(dir.path());
    let studio = Arc::new(Studio::new(Some(LoadedBundle::load(&bundle_path).unwrap()), ttl));
    Fixture {
        app: router(studio, limit, None),
        bundle_path,
        _dir: dir,
    }
}

fn fixture() -> Fixture {
    fixture_with(DEFAULT_BODY_LIMIT, DEFAULT_SESSION_TTL)
}

async fn new_session(app: &Router, f: &FaceFiles) -> String {
    let (st, v) = send(app, upload("/session", face_parts(f, true))).await;
    assert_eq!(st, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

async fn add_ref(app: &Router, sid: &str, f: &FaceFiles, with_parsing: bool) -> serde_json::Value {
    let (st, v) = send(app, upload(&format!("/session/{sid}/reference"), face_parts(f, with_parsing))).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    v
}

fn decode_png(b64: &serde_json::Value) -> Vec<u8> {
    base64::engine::general_purpose::STANDARD
        .decode(b64.as_str().unwrap())
        .unwrap()
}

#[tokio::test]
async fn health_reports_checkpoint_hash_and_step() {
    let fx = fixture();
    let (st, v) = send(&fx.app, Request::get("/health").body(Body::empty()).unwrap()).await;
    assert_eq!(st, StatusCode::OK);
    let digest = hex::encode(Sha256::digest(std::fs::read(&fx.bundle_path).unwrap()));
    assert_eq!(v["bundle_hash"], digest.as_str());
    assert_eq!(v["step"], 3);
    assert_eq!(v["status"], "ok");
}

#[tokio::test]
async fn missing_bundle_is_503() {
    let app = router(Arc::new(Studio::new(None, DEFAULT_SESSION_TTL)), DEFAULT_BODY_LIMIT, None);
    let (st, _) = send(&app, Request::get("/health").body(Body::empty()).unwrap()).await;
    assert_eq!(st, StatusCode::SERVICE_UNAVAILABLE);
    let f = face_files(Domain::NonMakeup, 1);
    let (st, _) = send(&app, upload("/session", face_parts(&f, true))).await;
    assert_eq!(st, StatusCode::SERVICE_UNAVAILABLE);
    let (st, _) = send(&app, json_post("/session/x/render", serde_json::json!({"mode": "latent"}))).await;
    assert_eq!(st, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn sessions_get_distinct_ids_and_bad_uploads_are_rejected() {
    let fx = fixture();
    let f = face_files(Domain::NonMakeup, 1);
    let a = new_session(&fx.app, &f).await;
    let b = new_session(&fx.app, &f).await;
    assert_ne!(a, b);

    let (st, _) = send(&fx.app, upload("/session", multipart(&[("image", b"not an image")]))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _) = send(&fx.app, upload("/session", multipart(&[("parsing", &f.parsing)]))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);

    let small = png(&image::DynamicImage::new_luma8(8, 8));
    let (st, _) = send(
        &fx.app,
        upload("/session", multipart(&[("image", &f.image), ("parsing", &small)])),
    )
    .await;
    assert_eq!(st, StatusCode::BAD_REQUEST);

    let (st, v) = send(&fx.app, upload("/session", face_parts(&f, false))).await;
    assert_eq!(st, StatusCode::CREATED);
    assert_eq!(v["unmasked"], true);
}

#[tokio::test]
async fn oversize_upload_is_413() {
    let fx = fixture_with(1024, DEFAULT_SESSION_TTL);
    let f = face_files(Domain::NonMakeup, 1);
    let big = vec![7u8; 4096];
    let (st, _) = send(&fx.app, upload("/session", multipart(&[("image", &f.image), ("pad", &big)]))).await;
    assert_eq!(st, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn references_are_cached_and_flagged() {
    let fx = fixture();
    let (st, _) = send(
        &fx.app,
        upload("/session/nope/reference", face_parts(&face_files(Domain::Makeup, 2), true)),
    )
    .await;
    assert_eq!(st, StatusCode::NOT_FOUND);

    let sid = new_session(&fx.app, &face_files(Domain::NonMakeup, 1)).await;
    let r = face_files(Domain::Makeup, 2);
    let a = add_ref(&fx.app, &sid, &r, true).await;
    let b = add_ref(&fx.app, &sid, &r, true).await;
    assert_ne!(a["reference_id"], b["reference_id"]);
    let na = a["style_code_norm"].as_f64().unwrap();
    assert!(na.is_finite() && na > 0.0);
    assert_eq!(na.to_bits(), b["style_code_norm"].as_f64().unwrap().to_bits());
    assert_eq!(a["unmasked"], false);
    let c = add_ref(&fx.app, &sid, &r, false).await;
    assert_eq!(c["unmasked"], true);
}

#[tokio::test]
async fn one_hot_render_matches_direct_transfer() {
    let fx = fixture();
    let src = face_files(Domain::NonMakeup, 1);
    let sid = new_session(&fx.app, &src).await;
    let refs: Vec<FaceFiles> = (0..3).map(|i| face_files(Domain::Makeup, 20 + i)).collect();
    let mut ids = Vec::new();
    for r in &refs {
        ids.push(add_ref(&fx.app, &sid, r, true).await["reference_id"].clone());
    }
    let uri = format!("/session/{sid}/render");
    let (st, v) = send(
        &fx.app,
        json_post(&uri, serde_json::json!({"mode": "style", "weights": [0.0, 1.0, 0.0]})),
    )
    .await;
    assert_eq!(st, StatusCode::OK, "{v}");
    assert!(v["latency_ms"].as_f64().unwrap() >= 0.0);
    let served = decode_png(&v["image"]);

    let model = FrozenModel::load(&fx.bundle_path).unwrap();
    let face = |f: &FaceFiles| {
        model
            .face_from_bytes(&f.image, Some(&f.parsing), Some(&f.landmarks))
            .unwrap()
    };
    let direct = model.transfer(&face(&src), &face(&refs[1])).unwrap();
    let expected = png(&image::DynamicImage::ImageRgb8(direct.to_rgb8()));
    assert_eq!(served, expected);

    let (_, again) = send(
        &fx.app,
        json_post(
            &uri,
            serde_json::json!({"mode": "style", "weights": [1.0], "references": [ids[1]]}),
        ),
    )
    .await;
    assert_eq!(decode_png(&again["image"]), expected);
}

#[tokio::test]
async fn renders_are_idempotent_and_validated() {
    let fx = fixture();
    let sid = new_session(&fx.app, &face_files(Domain::NonMakeup, 1)).await;
    add_ref(&fx.app, &sid, &face_files(Domain::Makeup, 2), true).await;
    add_ref(&fx.app, &sid, &face_files(Domain::Makeup, 3), true).await;
    let uri = format!("/session/{sid}/render");
    let mix = serde_json::json!({"mode": "style", "weights": [0.3, 0.7]});
    let (_, a) = send(&fx.app, json_post(&uri, mix.clone())).await;
    let (_, b) = send(&fx.app, json_post(&uri, mix)).await;
    assert_eq!(a["image"], b["image"]);

    for bad in [
        serde_json::json!({"mode": "style", "weights": [0.3, 0.3]}),
        serde_json::json!({"mode": "style", "weights": [1.0]}),
        serde_json::json!({"mode": "style", "weights": [-0.5, 1.5]}),
        serde_json::json!({"mode": "warp"}),
        serde_json::json!({"mode": "blend", "alpha": 2.0}),
        serde_json::json!({"mode": "latent", "domain": "glitter"}),
    ] {
        let (st, v) = send(&fx.app, json_post(&uri, bad.clone())).await;
        assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY, "{bad} -> {v}");
    }
    let (st, _) = send(
        &fx.app,
        json_post(&uri, serde_json::json!({"mode": "style", "weights": [1.0], "references": ["missing"]})),
    )
    .await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = send(&fx.app, json_post("/session/missing/render", serde_json::json!({"mode": "latent"}))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);

    let latent = serde_json::json!({"mode": "latent", "seeds": [4, 9], "alpha": 0.25, "domain": "non-makeup"});
    let (st, a) = send(&fx.app, json_post(&uri, latent.clone())).await;
    assert_eq!(st, StatusCode::OK);
    let (_, b) = send(&fx.app, json_post(&uri, latent)).await;
    assert_eq!(a["image"], b["image"]);
}

#[tokio::test]
async fn sweep_endpoints_match_single_renders() {
    let fx = fixture();
    let sid = new_session(&fx.app, &face_files(Domain::NonMakeup, 1)).await;
    let rid = add_ref(&fx.app, &sid, &face_files(Domain::Makeup, 2), true).await["reference_id"].clone();
    let (st, v) = send(
        &fx.app,
        json_post(&format!("/session/{sid}/sweep"), serde_json::json!({"reference": rid, "steps": 5})),
    )
    .await;
    assert_eq!(st, StatusCode::OK, "{v}");
    let frames = v["frames"].as_array().unwrap();
    assert_eq!(frames.len(), 5);
    let uri = format!("/session/{sid}/render");
    for (alpha, idx) in [(0.0, 0), (1.0, 4)] {
        let (_, r) = send(&fx.app, json_post(&uri, serde_json::json!({"mode": "blend", "alpha": alpha}))).await;
        assert_eq!(r["image"], frames[idx], "alpha {alpha}");
    }
    let (st, _) = send(
        &fx.app,
        json_post(&format!("/session/{sid}/sweep"), serde_json::json!({"reference": rid, "steps": 1})),
    )
    .await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn expired_sessions_are_gone() {
    let fx = fixture_with(DEFAULT_BODY_LIMIT, Duration::ZERO);
    let sid = new_session(&fx.app, &face_files(Domain::NonMakeup, 1)).await;
    tokio::time::sleep(Duration::from_millis(5)).await;
    let (st, _) = send(&fx.app, json_post(&format!("/session/{sid}/render"), serde_json::json!({"mode": "latent"}))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_renders_agree() {
    let fx = fixture();
    let sid = new_session(&fx.app, &face_files(Domain::NonMakeup, 1)).await;
    add_ref(&fx.app, &sid, &face_files(Domain::Makeup, 2), true).await;
    add_ref(&fx.app, &sid, &face_files(Domain::Makeup, 3), true).await;
    let uri = format!("/session/{sid}/render");
    let body = serde_json::json!({"mode": "style", "weights": [0.5, 0.5]});
    let tasks: Vec<_> = (0..8)
        .map(|_| {
            let app = fx.app.clone();
            let req = json_post(&uri, body.clone());
            tokio::spawn(async move { send(&app, req).await })
        })
        .collect();
    let mut images = Vec::new();
    for t in tasks {
        let (st, v) = t.await.unwrap();
        assert_eq!(st, StatusCode::OK);
        images.push(v["image"].clone());
    }
    assert!(images.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test]
async fn cors_headers_are_present() {
    let fx = fixture();
    let resp = fx
        .app
        .clone()
        .oneshot(
            Request::get("/health")
                .header("origin", "http://localhost:5173")
                .body(Body::empty())
                .unwrap(),
        )
        .await
        .unwrap();
    assert!(resp.headers().contains_key("access-control-allow-origin"));
}

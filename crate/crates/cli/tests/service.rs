use std::net::SocketAddr;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use chargan_cli::service::{serve_listener, AppState};
use chargan_core::dataset::{CharacterDataset, Pose};
use chargan_core::losses::PerceptualBackend;
use chargan_core::network::{DiscriminatorConfig, GeneratorConfig};
use chargan_core::synthetic::make_synthetic_character;
use chargan_core::training::{train, TrainConfig};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

fn tiny(predict_mask: bool) -> TrainConfig {
    let mut cfg = TrainConfig {
        iterations: 1,
        batch_size: 1,
        working_resolution: [32, 32],
        checkpoint_every: 0,
        generator: GeneratorConfig {
            base_channels: 4,
            max_channels: 16,
            num_downsamples: 2,
            num_residual_blocks: 1,
            predict_mask,
            ..GeneratorConfig::default()
        },
        discriminator: DiscriminatorConfig { base_channels: 4, max_channels: 16, ..DiscriminatorConfig::default() },
        ..TrainConfig::default()
    };
    cfg.perceptual.backend = PerceptualBackend::Random;
    cfg
}

struct Server {
    base: String,
    data: CharacterDataset,
}

fn models(data: &CharacterDataset) -> AppState {
    let masked = train(data, &tiny(true)).unwrap().model;
    let plain = train(data, &tiny(false)).unwrap().model;
    AppState::new(vec![("hero".into(), masked), ("plain".into(), plain)])
        .unwrap()
        .with_sync_frame_limit(20)
}

/// Serve `state` on an ephemeral port from a background runtime.
fn spawn(state: Arc<AppState>) -> String {
    let (tx, rx) = std::sync::mpsc::channel::<SocketAddr>();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            serve_listener(state, listener).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

/// One server shared by most tests in this file.
fn server() -> &'static Server {
    static SERVER: OnceLock<Server> = OnceLock::new();
    SERVER.get_or_init(|| {
        let data = make_synthetic_character(3, (64, 64), 4).unwrap();
        Server { base: spawn(Arc::new(models(&data))), data }
    })
}

fn client() -> Client {
    Client::builder().timeout(Duration::from_secs(120)).build().unwrap()
}

fn pose(i: usize) -> Pose {
    server().data.samples()[i].pose.clone()
}

fn url(path: &str) -> String {
    format!("{}{path}", server().base)
}

#[test]
fn characters_are_listed_with_their_schema() {
    let c = client();
    assert_eq!(c.get(url("/health")).send().unwrap().status(), StatusCode::OK);
    let list: Value = c.get(url("/characters")).send().unwrap().json().unwrap();
    let ids: Vec<&str> = list.as_array().unwrap().iter().map(|v| v["id"].as_str().unwrap()).collect();
    assert_eq!(ids.len(), 2);
    assert!(ids.contains(&"hero") && ids.contains(&"plain"));

    let hero: Value = c.get(url("/characters/hero")).send().unwrap().json().unwrap();
    let schema = server().data.schema();
    assert_eq!(hero["predicts_mask"], true);
    assert_eq!(hero["schema"]["schema_hash"], schema.hash());
    assert_eq!(hero["schema"]["keypoint_count"], schema.keypoints.len());
    assert_eq!(hero["schema"]["keypoints"].as_array().unwrap().len(), schema.keypoints.len());
    assert_eq!(c.get(url("/characters/nobody")).send().unwrap().status(), StatusCode::NOT_FOUND);
}

#[test]
fn generate_is_deterministic_png() {
    let c = client();
    let body = json!({ "pose": pose(0) });
    let a = c.post(url("/characters/hero/generate")).json(&body).send().unwrap();
    assert_eq!(a.status(), StatusCode::OK);
    assert_eq!(a.headers()["content-type"], "image/png");
    assert_eq!(a.headers()["access-control-allow-origin"], "*");
    let a = a.bytes().unwrap();
    let b = c.post(url("/characters/hero/generate")).json(&body).send().unwrap().bytes().unwrap();
    assert_eq!(a, b);
    let img = image::load_from_memory(&a).unwrap();
    assert_eq!((img.width(), img.height()), (64, 64));
}

#[test]
fn generate_rejects_bad_requests_without_inference() {
    // a private server, so concurrent tests cannot move the counter
    let state = Arc::new(models(&server().data));
    let base = spawn(state.clone());
    let url = |path: &str| format!("{base}{path}");
    let c = client();
    let before = state.inference_calls();

    let r = c.post(url("/characters/ghost/generate")).json(&json!({ "pose": pose(0) })).send().unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);

    let mut bad = pose(0);
    let (&kp, _) = bad.positions.iter().nth(2).unwrap();
    bad.positions.insert(kp, [1e6, 5.0]);
    let r = c.post(url("/characters/hero/generate")).json(&json!({ "pose": bad })).send().unwrap();
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let v: Value = r.json().unwrap();
    assert_eq!(v["keypoint"], kp.0);

    let mut missing = pose(0);
    missing.positions.remove(&kp);
    let v: Value = c.post(url("/characters/hero/generate")).json(&json!({ "pose": missing })).send().unwrap().json().unwrap();
    assert_eq!(v["keypoint"], kp.0);

    let r = c
        .post(url("/characters/hero/generate"))
        .json(&json!({ "pose": pose(0), "schema_hash": "f".repeat(64) }))
        .send()
        .unwrap();
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);

    let r = c.post(url("/characters/plain/generate")).json(&json!({ "pose": pose(0), "return_mask": true })).send().unwrap();
    assert_eq!(r.status(), StatusCode::CONFLICT);
    let r = c
        .post(url("/characters/plain/generate"))
        .json(&json!({ "pose": pose(0), "mask_fix": true, "moved_keypoint": 0, "move_vec": [1.0, 0.0] }))
        .send()
        .unwrap();
    assert_eq!(r.status(), StatusCode::CONFLICT);
    let r = c.post(url("/characters/hero/generate")).json(&json!({ "pose": pose(0), "mask_fix": true })).send().unwrap();
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let r = c
        .post(url("/characters/hero/generate"))
        .json(&json!({ "pose": pose(0), "mask_fix": true, "moved_keypoint": 0, "move_vec": [1.0, 0.0], "delta": 2.0 }))
        .send()
        .unwrap();
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);

    assert_eq!(state.inference_calls(), before);
    c.post(url("/characters/hero/generate")).json(&json!({ "pose": pose(0) })).send().unwrap().bytes().unwrap();
    assert_eq!(state.inference_calls(), before + 1);
}

#[test]
fn mask_and_refinement_come_back_as_json() {
    let c = client();
    let r = c
        .post(url("/characters/hero/generate"))
        .json(&json!({ "pose": pose(1), "return_mask": true, "mask_fix": true, "moved_keypoint": 0, "move_vec": [3.0, -2.0], "max_fix_iters": 3 }))
        .send()
        .unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let v: Value = r.json().unwrap();
    let mask = image::load_from_memory(&B64.decode(v["mask"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!((mask.width(), mask.height()), (64, 64));
    assert!(B64.decode(v["image"].as_str().unwrap()).is_ok());
    let iters = v["refinement"]["iterations"].as_u64().unwrap();
    assert!(iters <= 3);
    assert_eq!(v["refinement"]["moves"].as_array().unwrap().len() as u64, iters);
    let repaired: Pose = serde_json::from_value(v["pose"].clone()).unwrap();
    assert_eq!(repaired.positions[&chargan_core::dataset::KeypointId(0)], pose(1).positions[&chargan_core::dataset::KeypointId(0)]);
}

fn timeline(fps: f64) -> Value {
    json!({ "fps": fps, "keyframes": [ { "time": 0.0, "pose": pose(0) }, { "time": 1.0, "pose": pose(2) } ] })
}

#[test]
fn animation_archive_matches_single_frame_generation() {
    let c = client();
    let r = c
        .post(url("/characters/hero/animate"))
        .json(&json!({ "timeline": timeline(10.0), "format": "png_sequence", "mode": "sync" }))
        .send()
        .unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let v: Value = r.json().unwrap();
    assert_eq!(v["frame_count"], 11);
    let frames = v["frames"].as_array().unwrap();
    assert_eq!(frames.len(), 11);
    let single = c.post(url("/characters/hero/generate")).json(&json!({ "pose": pose(0) })).send().unwrap().bytes().unwrap();
    assert_eq!(B64.decode(frames[0]["image"].as_str().unwrap()).unwrap(), single.to_vec());
    let last = c.post(url("/characters/hero/generate")).json(&json!({ "pose": pose(2) })).send().unwrap().bytes().unwrap();
    assert_eq!(B64.decode(frames[10]["image"].as_str().unwrap()).unwrap(), last.to_vec());

    let gif = c
        .post(url("/characters/hero/animate"))
        .json(&json!({ "timeline": timeline(10.0) }))
        .send()
        .unwrap();
    assert_eq!(gif.headers()["content-type"], "image/gif");
    let bytes = gif.bytes().unwrap();
    let mut dec = gif::DecodeOptions::new().read_info(bytes.as_ref()).unwrap();
    let mut n = 0;
    while dec.read_next_frame().unwrap().is_some() {
        n += 1;
    }
    assert_eq!(n, 11);
}

#[test]
fn long_animations_run_as_jobs() {
    let c = client();
    // 31 frames exceed the sync limit of 20
    let r = c.post(url("/characters/hero/animate")).json(&json!({ "timeline": timeline(30.0) })).send().unwrap();
    assert_eq!(r.status(), StatusCode::ACCEPTED);
    let job: Value = r.json().unwrap();
    assert_eq!(job["total_frames"], 31);
    let id = job["id"].as_u64().unwrap();

    let deadline = Instant::now() + Duration::from_secs(120);
    loop {
        let s: Value = c.get(url(&format!("/jobs/{id}"))).send().unwrap().json().unwrap();
        match s["status"].as_str().unwrap() {
            "done" => {
                assert_eq!(s["frames_done"], 31);
                break;
            }
            "failed" => panic!("job failed: {s}"),
            _ => {
                let early = c.get(url(&format!("/jobs/{id}/result"))).send().unwrap().status();
                assert!(early == StatusCode::CONFLICT || early == StatusCode::OK);
            }
        }
        assert!(Instant::now() < deadline, "job did not finish");
        std::thread::sleep(Duration::from_millis(50));
    }
    let result = c.get(url(&format!("/jobs/{id}/result"))).send().unwrap();
    assert_eq!(result.headers()["content-type"], "image/gif");
    assert_eq!(c.get(url("/jobs/999999")).send().unwrap().status(), StatusCode::NOT_FOUND);
}

#[test]
fn animate_rejects_bad_timelines() {
    let c = client();
    let post = |body: Value| c.post(url("/characters/hero/animate")).json(&body).send().unwrap().status();
    let unordered = json!({ "fps": 10, "keyframes": [ { "time": 1.0, "pose": pose(0) }, { "time": 0.5, "pose": pose(1) } ] });
    assert_eq!(post(json!({ "timeline": unordered })), StatusCode::UNPROCESSABLE_ENTITY);
    let by_file = json!({ "fps": 10, "keyframes": [ { "time": 0.0, "pose_file": "/etc/passwd" } ] });
    assert_eq!(post(json!({ "timeline": by_file })), StatusCode::UNPROCESSABLE_ENTITY);
    let huge = json!({ "fps": 1000, "keyframes": [ { "time": 0.0, "pose": pose(0) }, { "time": 10.0, "pose": pose(1) } ] });
    assert_eq!(post(json!({ "timeline": huge })), StatusCode::UNPROCESSABLE_ENTITY);
    let fix = json!({ "fps": 10, "mask_fix": true, "keyframes": [ { "time": 0.0, "pose": pose(0) }, { "time": 0.2, "pose": pose(1) } ] });
    let r = c.post(url("/characters/plain/animate")).json(&json!({ "timeline": fix })).send().unwrap();
    assert_eq!(r.status(), StatusCode::CONFLICT);
}

#[test]
fn stats_count_inference_calls() {
    let c = client();
    let before: Value = c.get(url("/stats")).send().unwrap().json().unwrap();
    assert_eq!(before["characters"], 2);
    c.post(url("/characters/plain/generate")).json(&json!({ "pose": pose(1) })).send().unwrap().bytes().unwrap();
    let after: Value = c.get(url("/stats")).send().unwrap().json().unwrap();
    assert!(after["inference_calls"].as_u64().unwrap() > before["inference_calls"].as_u64().unwrap());
}

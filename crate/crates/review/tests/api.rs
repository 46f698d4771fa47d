use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use depthseg::corpus::{
    coverage_stats, load_manifest, replay_journal, CorpusStats, Manifest, SampleStatus, COVERAGE_BINS,
};
use depthseg::raster::{self, decode_gray, decode_rgb, load_rgb, Raster2D};
use depthseg::synth::{flip_pixels, write_corpus, CorpusOptions, SceneParams};
use depthseg::BinaryMask;
use depthseg_review::{composite_overlay, router, ApiError, ApiSampleView, AppState, SamplePage, ServiceConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Fixture {
    dir: tempfile::TempDir,
    config: ServiceConfig,
}

impl Fixture {
    fn new(n: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let opts = CorpusOptions {
            train: n,
            test: 0,
            seed: 9,
            flip_fraction: 0.1,
            scene: SceneParams { width: 24, height: 16, ..Default::default() },
        };
        write_corpus(dir.path(), &opts).unwrap();
        let config = ServiceConfig::new(dir.path().join("manifest.json"), dir.path().join("journal.jsonl"));
        Self { dir, config }
    }

    fn app(&self) -> Router {
        router(Arc::new(AppState::load(self.config.clone()).unwrap()))
    }

    fn root(&self) -> &Path {
        self.dir.path()
    }

    fn journal_lines(&self) -> usize {
        std::fs::read_to_string(&self.config.journal).map(|s| s.lines().count()).unwrap_or(0)
    }
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn get_json<T: serde::de::DeserializeOwned>(app: &Router, uri: &str) -> T {
    let (status, body) = get(app, uri).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    serde_json::from_slice(&body).unwrap()
}

async fn decide(app: &Router, id: &str, body: Value) -> (StatusCode, Vec<u8>) {
    let req = Request::post(format!("/api/samples/{id}/decision"))
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    send(app, req).await
}

fn error_code(body: &[u8]) -> String {
    serde_json::from_slice::<ApiError>(body).unwrap().code
}

fn ids(page: &SamplePage) -> Vec<String> {
    page.items.iter().map(|s| s.id.clone()).collect()
}

#[tokio::test]
async fn fresh_manifest_lists_everything_pending() {
    let f = Fixture::new(5);
    let app = f.app();
    let page: SamplePage = get_json(&app, "/api/samples?status=pending").await;
    assert_eq!(page.total, 5);
    assert_eq!(ids(&page), (0..5).map(|i| format!("scene_{i:04}")).collect::<Vec<_>>());
    assert!(page.next_after.is_none());
    let v = &page.items[0];
    assert_eq!(v.image_url.as_deref(), Some("/api/samples/scene_0000/image.png"));
    assert!(v.depth_url.is_some() && v.overlay_url.is_some());
    assert!(v.coverage.is_some_and(|c| (0.0..=1.0).contains(&c)));

    let stats: CorpusStats = get_json(&app, "/api/stats").await;
    assert_eq!((stats.samples, stats.status.pending), (5, 5));
    assert_eq!(stats.coverage.total, 5);
}

#[tokio::test]
async fn cursor_pagination_walks_all_ids() {
    let f = Fixture::new(7);
    let app = f.app();
    let mut seen = Vec::new();
    let mut uri = "/api/samples?limit=3".to_string();
    loop {
        let page: SamplePage = get_json(&app, &uri).await;
        assert!(page.items.len() <= 3);
        seen.extend(ids(&page));
        match page.next_after {
            Some(a) => uri = format!("/api/samples?limit=3&after={a}"),
            None => break,
        }
    }
    let all: SamplePage = get_json(&app, "/api/samples").await;
    assert_eq!(seen, ids(&all));
    let end: SamplePage = get_json(&app, "/api/samples?after=scene_0006").await;
    assert!(end.items.is_empty() && end.next_after.is_none());
}

#[tokio::test]
async fn bad_queries_are_rejected() {
    let f = Fixture::new(1);
    let app = f.app();
    for (uri, code) in [
        ("/api/samples?status=maybe", "invalid_status"),
        ("/api/samples?limit=0", "invalid_limit"),
        ("/api/samples?limit=abc", "invalid_limit"),
        ("/api/samples/scene_0000/overlay.png?alpha=2", "invalid_alpha"),
    ] {
        let (status, body) = get(&app, uri).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{uri}");
        assert_eq!(error_code(&body), code);
    }
    let (status, body) = get(&app, "/api/samples/ghost").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&body), "not_found");
}

#[tokio::test]
async fn accept_updates_status_and_journal() {
    let f = Fixture::new(3);
    let app = f.app();
    let (status, body) = decide(&app, "scene_0001", json!({"verdict": "accept", "operator": "ana"})).await;
    assert_eq!(status, StatusCode::OK);
    let v: ApiSampleView = serde_json::from_slice(&body).unwrap();
    assert_eq!(v.status, SampleStatus::Accepted);
    assert_eq!(f.journal_lines(), 1);
    let stats: CorpusStats = get_json(&app, "/api/stats").await;
    assert_eq!((stats.status.accepted, stats.status.pending), (1, 2));
}

#[tokio::test]
async fn invalid_decisions_leave_journal_untouched() {
    let f = Fixture::new(2);
    let app = f.app();
    let (s, b) = decide(&app, "ghost", json!({"verdict": "accept"})).await;
    assert_eq!((s, error_code(&b).as_str()), (StatusCode::NOT_FOUND, "not_found"));
    let (s, b) = decide(&app, "scene_0000", json!({"verdict": "maybe"})).await;
    assert_eq!((s, error_code(&b).as_str()), (StatusCode::BAD_REQUEST, "invalid_verdict"));
    let req = Request::post("/api/samples/scene_0000/decision").body(Body::from("{oops")).unwrap();
    let (s, b) = send(&app, req).await;
    assert_eq!((s, error_code(&b).as_str()), (StatusCode::BAD_REQUEST, "invalid_body"));
    assert_eq!(f.journal_lines(), 0);
}

#[tokio::test]
async fn journal_failure_is_a_conflict_and_changes_nothing() {
    let f = Fixture::new(2);
    let app = f.app();
    // The journal path becomes unwritable after startup.
    std::fs::create_dir(&f.config.journal).unwrap();
    let (s, b) = decide(&app, "scene_0000", json!({"verdict": "reject"})).await;
    assert_eq!((s, error_code(&b).as_str()), (StatusCode::CONFLICT, "journal_append_failed"));
    let v: ApiSampleView = get_json(&app, "/api/samples/scene_0000").await;
    assert_eq!(v.status, SampleStatus::Pending);
}

#[tokio::test]
async fn full_coverage_writes_all_ones_mask() {
    let f = Fixture::new(2);
    let app = f.app();
    let (s, body) = decide(&app, "scene_0001", json!({"verdict": "full_coverage"})).await;
    assert_eq!(s, StatusCode::OK);
    let v: ApiSampleView = serde_json::from_slice(&body).unwrap();
    assert_eq!((v.status, v.coverage), (SampleStatus::FullCoverage, Some(1.0)));
    let mask_path = f.root().join("masks/full_coverage/scene_0001.png");
    let mask = BinaryMask::from_raster(&raster::load_gray(&mask_path).unwrap()).unwrap();
    let img = load_rgb(&f.root().join("images/scene_0001.png")).unwrap();
    assert_eq!((mask.width(), mask.height()), img.dims());
    assert_eq!(mask.foreground_count(), img.len());

    // Full tint at alpha 1 over an all-ones mask.
    let (s, png) = get(&app, "/api/samples/scene_0001/overlay.png?alpha=1").await;
    assert_eq!(s, StatusCode::OK);
    let out = decode_rgb(&png, Path::new("overlay.png")).unwrap();
    assert!(out.data().iter().all(|&px| px == [255, 0, 255]));
}

#[tokio::test]
async fn overlay_matches_blend_oracle() {
    let f = Fixture::new(1);
    let app = f.app();
    let src = load_rgb(&f.root().join("images/scene_0000.png")).unwrap();

    let (_, png) = get(&app, "/api/samples/scene_0000/overlay.png?alpha=0").await;
    assert_eq!(decode_rgb(&png, Path::new("o.png")).unwrap(), src);

    // Replace the mask with a random one and compare against per-pixel arithmetic.
    let mask = flip_pixels(&BinaryMask::zeros(24, 16), 0.5, 77);
    raster::save_gray(&mask.to_raster(), &f.root().join("masks/pseudo/scene_0000.png"), raster::ImageFormat::Png).unwrap();
    let (_, png) = get(&app, "/api/samples/scene_0000/overlay.png").await;
    let out = decode_rgb(&png, Path::new("o.png")).unwrap();
    for y in 0..16 {
        for x in 0..24 {
            let s = src.get(x, y);
            let expected = if mask.get(x, y) {
                let tint = [255.0, 0.0, 255.0];
                std::array::from_fn(|c| (0.55 * f64::from(s[c]) + 0.45 * tint[c]).round() as u8)
            } else {
                s
            };
            assert_eq!(out.get(x, y), expected, "pixel {x},{y}");
        }
    }
    assert_eq!(composite_overlay(&src, &mask, 0.45, [255, 0, 255]).unwrap(), out);
}

#[tokio::test]
async fn image_and_depth_endpoints() {
    let f = Fixture::new(1);
    let app = f.app();
    let (s, png) = get(&app, "/api/samples/scene_0000/image.png").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(decode_rgb(&png, Path::new("i.png")).unwrap(), load_rgb(&f.root().join("images/scene_0000.png")).unwrap());
    let (s, png) = get(&app, "/api/samples/scene_0000/depth.png").await;
    assert_eq!(s, StatusCode::OK);
    let Raster2D::Byte8(d) = decode_gray(&png, Path::new("d.png")).unwrap() else { panic!("expected 8-bit") };
    assert_eq!(d.dims(), (24, 16));
    assert!(d.data().contains(&0) && d.data().contains(&255));

    std::fs::remove_file(f.root().join("depth/scene_0000.pfm")).unwrap();
    let (s, b) = get(&app, "/api/samples/scene_0000/depth.png").await;
    assert_eq!((s, error_code(&b).as_str()), (StatusCode::NOT_FOUND, "not_found"));
    let v: ApiSampleView = get_json(&app, "/api/samples/scene_0000").await;
    assert!(v.depth_url.is_none() && v.image_url.is_some());
}

#[tokio::test]
async fn state_equals_replay_and_survives_restart() {
    let f = Fixture::new(6);
    let app = f.app();
    let verdicts = [
        ("scene_0000", "accept"),
        ("scene_0003", "reject"),
        ("scene_0001", "full_coverage"),
        ("scene_0003", "accept"),
        ("scene_0005", "reject"),
    ];
    for (id, v) in verdicts {
        assert_eq!(decide(&app, id, json!({"verdict": v, "operator": "t"})).await.0, StatusCode::OK);
    }
    assert_eq!(f.journal_lines(), 5);

    let mut base = load_manifest(&f.config.manifest).unwrap();
    coverage_stats(&mut base, COVERAGE_BINS);
    let replayed: Manifest = replay_journal(&f.config.journal, &base).unwrap().manifest;
    let pending: SamplePage = get_json(&app, "/api/samples?status=pending").await;
    let expected: Vec<String> =
        replayed.samples.iter().filter(|s| s.status == SampleStatus::Pending).map(|s| s.id.clone()).collect();
    assert_eq!(ids(&pending), expected);
    assert_eq!(ids(&pending), vec!["scene_0002", "scene_0004"]);

    let stats: CorpusStats = get_json(&app, "/api/stats").await;
    assert_eq!(stats, CorpusStats::of(&replayed));

    let restarted = AppState::load(f.config.clone()).unwrap();
    assert_eq!(restarted.manifest(), replayed);
    assert_eq!(restarted.stats(), stats);
}

#[tokio::test]
async fn concurrent_posts_serialize_in_journal_order() {
    let f = Fixture::new(1);
    let app = f.app();
    let verdicts = ["accept", "reject", "full_coverage"];
    let tasks: Vec<_> = (0..24)
        .map(|i| {
            let app = app.clone();
            tokio::spawn(async move { decide(&app, "scene_0000", json!({"verdict": verdicts[i % 3]})).await.0 })
        })
        .collect();
    for t in tasks {
        assert_eq!(t.await.unwrap(), StatusCode::OK);
    }
    assert_eq!(f.journal_lines(), 24);
    let journal = std::fs::read_to_string(&f.config.journal).unwrap();
    let last: Value = serde_json::from_str(journal.lines().last().unwrap()).unwrap();
    let v: ApiSampleView = get_json(&app, "/api/samples/scene_0000").await;
    let expected = match last["verdict"].as_str().unwrap() {
        "accept" => SampleStatus::Accepted,
        "reject" => SampleStatus::Rejected,
        _ => SampleStatus::FullCoverage,
    };
    assert_eq!(v.status, expected);
}

#[tokio::test]
async fn static_files_are_served() {
    let mut f = Fixture::new(1);
    let web: PathBuf = f.root().join("web");
    std::fs::create_dir(&web).unwrap();
    std::fs::write(web.join("index.html"), "<h1>queue</h1>").unwrap();
    f.config.static_dir = Some(web);
    let app = f.app();
    let (s, body) = get(&app, "/index.html").await;
    assert_eq!((s, body.as_slice()), (StatusCode::OK, b"<h1>queue</h1>".as_slice()));
    let (s, _) = get(&app, "/").await;
    assert_eq!(s, StatusCode::OK);
    let page: SamplePage = get_json(&app, "/api/samples").await;
    assert_eq!(page.total, 1);
}

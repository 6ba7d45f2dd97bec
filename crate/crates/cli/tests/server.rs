use std::collections::BTreeMap;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use styletune_cli::run_dir::RunDirectory;
use styletune_cli::server::{router, PoolSummary};
use styletune_core::feedback::{item_id, PoolItem, SamplePool, SelectionRecord, Strategy};
use styletune_core::raster::Image;
use styletune_core::text::build_prompt;
use styletune_core::tokenizer::{fit_codebook, TokenGrid};
use tower::ServiceExt;

/// Run directory with one pool of 4 prompts x 5 items.
fn run_with_pool(pool_id: &str) -> (tempfile::TempDir, RunDirectory, SamplePool) {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDirectory::create(dir.path()).unwrap();
    let imgs: Vec<Image> = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]
        .iter()
        .map(|&c| Image::filled(8, 8, c))
        .collect();
    let cb = fit_codebook(&imgs, 3, 4, 0).unwrap();
    let mut items = Vec::new();
    for p in 0..4 {
        for i in 0..5 {
            let id = item_id(pool_id, p, i);
            let spec = build_prompt("A circle", Some("ink")).unwrap();
            items.push(PoolItem {
                file: format!("{id}.png"),
                item_id: id,
                prompt_id: p,
                prompt: spec.text(),
                spec,
                tokens: TokenGrid::new(2, 3, vec![(p + i) % 3, 0, 1, 2]).unwrap(),
                scores: BTreeMap::from([("text".to_string(), 0.1 * i as f64)]),
            });
        }
    }
    let pool = SamplePool {
        pool_id: pool_id.into(),
        items,
    };
    let pdir = run.pool_dir(pool_id);
    pool.write(&pdir, &cb).unwrap();
    std::fs::write(pdir.join("reference.png"), imgs[1].png_bytes().unwrap()).unwrap();
    (dir, run, pool)
}

async fn send(run: &RunDirectory, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = router(run.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp
        .into_body()
        .collect()
        .await
        .unwrap()
        .to_bytes()
        .to_vec();
    (status, body)
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post(uri: &str, body: serde_json::Value) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

#[tokio::test]
async fn empty_run_lists_no_pools() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDirectory::create(dir.path()).unwrap();
    let (status, body) = send(&run, get("/api/pools")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        serde_json::from_slice::<Vec<PoolSummary>>(&body).unwrap(),
        []
    );
}

#[tokio::test]
async fn pools_manifests_and_images_are_served() {
    let (_d, run, pool) = run_with_pool("p1");
    let (status, body) = send(&run, get("/api/pools")).await;
    assert_eq!(status, StatusCode::OK);
    let list: Vec<PoolSummary> = serde_json::from_slice(&body).unwrap();
    assert_eq!(
        list,
        [PoolSummary {
            pool_id: "p1".into(),
            items: 20,
            prompts: 4,
            has_selection: false
        }]
    );

    let (status, body) = send(&run, get("/api/pools/p1")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<SamplePool>(&body).unwrap(), pool);
    let manifest: serde_json::Value = serde_json::from_slice(&body).unwrap();
    for key in ["item_id", "prompt_id", "prompt", "file", "scores"] {
        assert!(
            manifest["items"][0].get(key).is_some(),
            "manifest lacks {key}"
        );
    }

    let item = &pool.items[7];
    let (status, body) = send(&run, get(&format!("/api/images/{}.png", item.item_id))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        body,
        std::fs::read(run.pool_dir("p1").join(&item.file)).unwrap()
    );

    let (status, body) = send(&run, get("/api/reference/p1.png")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        body,
        std::fs::read(run.pool_dir("p1").join("reference.png")).unwrap()
    );
}

#[tokio::test]
async fn unknown_pools_and_items_are_404() {
    let (_d, run, _) = run_with_pool("p1");
    for uri in [
        "/api/pools/nope",
        "/api/pools/..",
        "/api/images/p1_009_000.png",
        "/api/images/nope_000_000.png",
        "/api/images/p1_000_000.jpg",
        "/api/reference/nope.png",
    ] {
        let (status, body) = send(&run, get(uri)).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        let err: serde_json::Value = serde_json::from_slice(&body).unwrap();
        assert_eq!(err["code"], "not_found");
    }
    let (status, _) = send(
        &run,
        post(
            "/api/pools/nope/selection",
            serde_json::json!({"chosen": []}),
        ),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn selection_is_persisted_once_unless_replaced() {
    let (_d, run, pool) = run_with_pool("p1");
    let chosen: Vec<String> = pool
        .items
        .iter()
        .step_by(2)
        .map(|i| i.item_id.clone())
        .collect();
    assert_eq!(chosen.len(), 10);
    let body = serde_json::json!({ "chosen": chosen, "annotator": "tester" });

    let (status, resp) = send(&run, post("/api/pools/p1/selection", body.clone())).await;
    assert_eq!(status, StatusCode::CREATED);
    let rec: SelectionRecord = serde_json::from_slice(&resp).unwrap();
    let stored = run.read_selection("p1").unwrap();
    assert_eq!(stored, rec);
    assert_eq!(stored.chosen, chosen);
    assert_eq!(stored.strategy, Strategy::Human);
    assert_eq!(stored.annotator.as_deref(), Some("tester"));

    let (status, resp) = send(&run, post("/api/pools/p1/selection", body)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let err: serde_json::Value = serde_json::from_slice(&resp).unwrap();
    assert_eq!(err["code"], "selection_exists");

    let fewer = serde_json::json!({ "chosen": &chosen[..3] });
    let (status, _) = send(&run, post("/api/pools/p1/selection?replace=true", fewer)).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(run.read_selection("p1").unwrap().chosen, &chosen[..3]);

    let (_, body) = send(&run, get("/api/pools")).await;
    let list: Vec<PoolSummary> = serde_json::from_slice(&body).unwrap();
    assert!(list[0].has_selection);
}

#[tokio::test]
async fn bad_selections_are_400() {
    let (_d, run, pool) = run_with_pool("p1");
    let foreign = serde_json::json!({ "chosen": [pool.items[0].item_id, "q_000_001"] });
    let (status, body) = send(&run, post("/api/pools/p1/selection", foreign)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let err: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(err["code"], "unknown_ids");
    assert_eq!(err["ids"], serde_json::json!(["q_000_001"]));
    assert!(err["message"].as_str().unwrap().contains("q_000_001"));

    for bad in [
        serde_json::json!({ "chosen": [] }),
        serde_json::json!({ "picked": ["p1_000_000"] }),
        serde_json::json!({ "chosen": "p1_000_000" }),
        serde_json::json!({ "chosen": ["p1_000_000", "p1_000_000"] }),
    ] {
        let (status, _) = send(&run, post("/api/pools/p1/selection", bad.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{bad}");
    }
    let raw = Request::post("/api/pools/p1/selection")
        .body(Body::from("{not json"))
        .unwrap();
    assert_eq!(send(&run, raw).await.0, StatusCode::BAD_REQUEST);
    assert!(!run.selection("p1").exists());
}

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use magicvid_eval::http::{router, StatsBody};
use magicvid_eval::{Choice, EvalState, Outcome, PairSpec};
use serde_json::{json, Value};
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    app: Router,
    state: Arc<Mutex<EvalState>>,
    /// pair id -> (ours bytes, theirs bytes)
    videos: HashMap<String, (Vec<u8>, Vec<u8>)>,
}

fn fixture(pairs: usize, seed: u64) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let mut pool = Vec::new();
    let mut videos = HashMap::new();
    for i in 0..pairs {
        let id = format!("p{i}");
        let ours = dir.path().join(format!("ours_{i}.gif"));
        let theirs = dir.path().join(format!("theirs_{i}.gif"));
        let (a, b) = (format!("OURS-{i}").into_bytes(), format!("THEIRS-{i}").into_bytes());
        std::fs::write(&ours, &a).unwrap();
        std::fs::write(&theirs, &b).unwrap();
        videos.insert(id.clone(), (a, b));
        pool.push(PairSpec {
            id,
            prompt: format!("a red circle moving left {i}"),
            ours,
            theirs,
            competitor: if i % 3 == 0 { "gen2" } else { "pika" }.into(),
        });
    }
    let state = Arc::new(Mutex::new(EvalState::with_log(pool, seed, &dir.path().join("votes.jsonl")).unwrap()));
    Fixture {
        _dir: dir,
        app: router(state.clone()),
        state,
        videos,
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn json_call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn session(app: &Router) -> String {
    let (s, v) = json_call(app, "POST", "/session", None).await;
    assert_eq!(s, StatusCode::OK);
    v["token"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn pair_payload_is_blind() {
    let f = fixture(6, 1);
    let token = session(&f.app).await;
    let (s, v) = json_call(&f.app, "GET", &format!("/pair?token={token}"), None).await;
    assert_eq!(s, StatusCode::OK);
    let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
    keys.sort();
    assert_eq!(keys, ["left_url", "pair_id", "prompt", "right_url"]);
    let text = v.to_string();
    for leak in ["ours", "theirs", "gen2", "pika", "competitor"] {
        assert!(!text.contains(leak), "pair payload leaks {leak}: {text}");
    }
    // Fetching again before voting returns the same presentation.
    let (_, again) = json_call(&f.app, "GET", &format!("/pair?token={token}"), None).await;
    assert_eq!(v, again);
}

#[tokio::test]
async fn video_urls_serve_the_hidden_mapping() {
    let f = fixture(3, 2);
    let token = session(&f.app).await;
    let (_, p) = json_call(&f.app, "GET", &format!("/pair?token={token}"), None).await;
    let pair_id = p["pair_id"].as_str().unwrap();
    let (s, left) = call(&f.app, "GET", p["left_url"].as_str().unwrap(), None).await;
    assert_eq!(s, StatusCode::OK);
    let (_, right) = call(&f.app, "GET", p["right_url"].as_str().unwrap(), None).await;
    let (ours, theirs) = &f.videos[pair_id];
    let left_is_ours = f.state.lock().unwrap().pending_left_is_ours(&token).unwrap();
    if left_is_ours {
        assert_eq!((&left, &right), (ours, theirs));
    } else {
        assert_eq!((&left, &right), (theirs, ours));
    }
    let (s, _) = call(&f.app, "GET", &format!("/video/{pair_id}/left?token=bogus"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn scripted_session_matches_ground_truth() {
    let f = fixture(30, 3);
    let token = session(&f.app).await;
    let prefs = [Outcome::Good, Outcome::Good, Outcome::Same, Outcome::Bad, Outcome::Good];
    let mut truth: HashMap<String, (u64, u64, u64)> = HashMap::new();
    for k in 0..30 {
        let (_, p) = json_call(&f.app, "GET", &format!("/pair?token={token}"), None).await;
        let pair_id = p["pair_id"].as_str().unwrap().to_string();
        // The scripted voter recognizes our video by its content.
        let (_, left) = call(&f.app, "GET", p["left_url"].as_str().unwrap(), None).await;
        let left_is_ours = left.starts_with(b"OURS");
        let pref = prefs[k % prefs.len()];
        let choice = Choice::expressing(pref, left_is_ours);
        let (s, v) = json_call(
            &f.app,
            "POST",
            "/vote",
            Some(json!({"token": token, "pair_id": pair_id, "choice": choice})),
        )
        .await;
        assert_eq!(s, StatusCode::OK, "{v}");
        assert_eq!(v["votes"], k + 1);
        let i: usize = pair_id[1..].parse().unwrap();
        let comp = if i % 3 == 0 { "gen2" } else { "pika" };
        let e = truth.entry(comp.into()).or_default();
        match pref {
            Outcome::Good => e.0 += 1,
            Outcome::Same => e.1 += 1,
            Outcome::Bad => e.2 += 1,
        }
    }
    let (s, _) = json_call(&f.app, "GET", &format!("/pair?token={token}"), None).await;
    assert_eq!(s, StatusCode::GONE);
    for (comp, (g, sm, b)) in truth {
        let (_, v) = json_call(&f.app, "GET", &format!("/stats?competitor={comp}"), None).await;
        let body: StatsBody = serde_json::from_value(v).unwrap();
        assert_eq!((body.good, body.same, body.bad), (g, sm, b), "{comp}");
        let ratio = (g + sm) as f64 / (b + sm) as f64;
        assert_eq!(body.ratio, Some(ratio));
        assert_eq!(body.ratio_rounded, Some((ratio * 100.0).round() / 100.0));
    }
}

#[tokio::test]
async fn error_statuses() {
    let f = fixture(2, 4);
    let (s, _) = json_call(&f.app, "GET", "/pair?token=nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let token = session(&f.app).await;
    let vote = |pair: &str| json!({"token": token, "pair_id": pair, "choice": "same"});
    let (s, _) = json_call(&f.app, "POST", "/vote", Some(vote("p0"))).await;
    assert_eq!(s, StatusCode::CONFLICT, "voting on an unassigned pair");
    let (s, _) = json_call(&f.app, "POST", "/vote", Some(vote("zzz"))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (_, p) = json_call(&f.app, "GET", &format!("/pair?token={token}"), None).await;
    let id = p["pair_id"].as_str().unwrap();
    let (s, _) = json_call(&f.app, "POST", "/vote", Some(vote(id))).await;
    assert_eq!(s, StatusCode::OK);
    let (s, _) = json_call(&f.app, "POST", "/vote", Some(vote(id))).await;
    assert_eq!(s, StatusCode::CONFLICT, "duplicate vote");
    let bad = json!({"token": token, "pair_id": id, "choice": "maybe"});
    let (s, _) = call(&f.app, "POST", "/vote", Some(bad)).await;
    assert!(s.is_client_error());
}

#[tokio::test]
async fn empty_stats_report_undefined_ratio() {
    let f = fixture(2, 5);
    let (s, v) = json_call(&f.app, "GET", "/stats?competitor=gen2", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!({"competitor": "gen2", "G": 0, "S": 0, "B": 0, "ratio": null, "ratio_rounded": null}));
    let (_, all) = json_call(&f.app, "GET", "/stats", None).await;
    assert_eq!(all.as_array().unwrap().len(), 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_votes_are_all_counted() {
    let f = fixture(10, 6);
    let mut tasks = Vec::new();
    for v in 0..8 {
        let app = f.app.clone();
        tasks.push(tokio::spawn(async move {
            let token = session(&app).await;
            for k in 0..10 {
                let (_, p) = json_call(&app, "GET", &format!("/pair?token={token}"), None).await;
                let choice = [Choice::Left, Choice::Same, Choice::Right][(v + k) % 3];
                let body = json!({"token": token, "pair_id": p["pair_id"], "choice": choice});
                let (s, _) = json_call(&app, "POST", "/vote", Some(body)).await;
                assert_eq!(s, StatusCode::OK);
            }
        }));
    }
    for t in tasks {
        t.await.unwrap();
    }
    let st = f.state.lock().unwrap();
    assert_eq!(st.total_votes(), 80);
    assert_eq!(st.all_stats().iter().map(|t| t.total()).sum::<u64>(), 80);
    let replayed = magicvid_eval::replay_log(st.log_path().unwrap()).unwrap();
    assert_eq!(replayed, st.all_stats());
}

use std::path::Path;
use std::process::Command;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use ballotaudit::service::router;
use ballotaudit_core::datasets::{sausalito, SAUSALITO_CSV};
use ballotaudit_core::discrepancy::{write_tallies_csv, HandTally};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let request = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

fn tally_json(id: &str, adjust: impl Fn(&mut HandTally)) -> Value {
    let contest = sausalito();
    let mut tally = HandTally::matching_reported(&contest, contest.precinct_index(id).unwrap());
    adjust(&mut tally);
    serde_json::to_value(tally).unwrap()
}

fn found_error(tally: &mut HandTally) {
    tally.votes[3] += 1;
    tally.undervotes -= 1;
}

async fn app_with_contest(dir: &Path) -> Router {
    let app = router(dir, None).unwrap();
    let (status, body) = call(
        &app,
        Method::POST,
        "/contests",
        Some(json!({"contest_id": "sausalito-2006", "f": 3, "csv": SAUSALITO_CSV})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    app
}

fn walkthrough_request() -> Value {
    json!({"contest_id": "sausalito-2006", "alpha": "1/100", "seed": 5, "initial": {"kind": "count", "n": 1}})
}

#[tokio::test]
async fn contest_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_with_contest(dir.path()).await;
    let (status, list) = call(&app, Method::GET, "/contests", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(list[0]["contest_id"], "sausalito-2006");
    assert_eq!(list[0]["precincts"], 9);

    let (status, spec) = call(&app, Method::GET, "/contests/sausalito-2006", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(spec["f"], 3);

    // Re-uploading the same document as JSON is idempotent.
    let (status, _) = call(&app, Method::POST, "/contests", Some(spec.clone())).await;
    assert_eq!(status, StatusCode::OK);
    let mut changed = spec.clone();
    changed["precincts"][0]["reported_ballots"] = json!(669);
    changed["precincts"][0]["reported_undervotes"] = json!(783);
    let (status, _) = call(&app, Method::POST, "/contests", Some(changed)).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (status, body) = call(&app, Method::POST, "/contests", Some(json!({"contest_id": "x", "f": 1, "csv": "junk"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
    let (status, _) = call(&app, Method::GET, "/contests/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, body) = call(&app, Method::POST, "/contests", Some(json!([1, 2]))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "bad_request");
}

#[tokio::test]
async fn sausalito_walkthrough_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_with_contest(dir.path()).await;
    let (status, created) = call(&app, Method::POST, "/sessions", Some(walkthrough_request())).await;
    assert_eq!(status, StatusCode::CREATED, "{created}");
    let id = created["session_id"].as_str().unwrap().to_string();
    let (status, _) = call(&app, Method::POST, "/sessions", Some(walkthrough_request())).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (_, drawn) = call(&app, Method::POST, &format!("/sessions/{id}/draw"), None).await;
    assert_eq!(drawn["precincts"], json!(["3107"]));

    let what_if = json!({"tallies": [tally_json("3107", found_error)]});
    let (status, projected) = call(&app, Method::POST, &format!("/sessions/{id}/what-if"), Some(what_if)).await;
    assert_eq!(status, StatusCode::OK, "{projected}");
    assert_eq!(projected["p_value"]["numerator"], "8");
    let (_, state) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(state["sample"][0]["overstatement"], Value::Null);

    let (status, early) = call(&app, Method::POST, &format!("/sessions/{id}/evaluate"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(early["error"], "missing_tallies");

    let body = json!({"tallies": [tally_json("3107", found_error)]});
    let (status, recorded) = call(&app, Method::POST, &format!("/sessions/{id}/tallies"), Some(body)).await;
    assert_eq!(status, StatusCode::OK, "{recorded}");
    assert_eq!(recorded["recorded"][0]["overstatement"], 1);

    let (_, evaluated) = call(&app, Method::POST, &format!("/sessions/{id}/evaluate"), None).await;
    assert!(evaluated["summary"].as_str().unwrap().starts_with("Escalate; stage P-value 8/9 ≈ 88.9% > α₁"));
    assert_eq!(evaluated["record"]["p_value"], json!({"numerator": "8", "denominator": "9", "decimal": "0.8889"}));
    assert_eq!(evaluated["status"], "full_count_required");

    let (status, report) = call(&app, Method::GET, &format!("/sessions/{id}/report"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(report["stages"][0]["p_value_display"], "8/9 (88.9%)");
    let (_, text) = call(&app, Method::GET, &format!("/sessions/{id}/report?format=text"), None).await;
    assert!(text.as_str().unwrap().contains("stage P-value"));
}

#[tokio::test]
async fn unknown_sessions_are_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_with_contest(dir.path()).await;
    for (method, path) in [
        (Method::GET, "/sessions/missing"),
        (Method::GET, "/sessions/missing/report"),
        (Method::POST, "/sessions/missing/draw"),
        (Method::POST, "/sessions/missing/evaluate"),
    ] {
        let (status, body) = call(&app, method, path, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{path}");
        assert_eq!(body["error"], "not_found");
    }
    let (status, _) = call(
        &app,
        Method::POST,
        "/sessions",
        Some(json!({"contest_id": "missing", "alpha": "1/10", "seed": 1})),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_on_one_session_are_serialized() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_with_contest(dir.path()).await;
    let request = json!({"contest_id": "sausalito-2006", "alpha": "1/100", "seed": 7, "initial": {"kind": "count", "n": 9}});
    let (_, created) = call(&app, Method::POST, "/sessions", Some(request)).await;
    let id = created["session_id"].as_str().unwrap().to_string();

    let draws: Vec<_> = (0..4)
        .map(|_| {
            let (app, id) = (app.clone(), id.clone());
            tokio::spawn(async move { call(&app, Method::POST, &format!("/sessions/{id}/draw"), None).await.0 })
        })
        .collect();
    let mut statuses = Vec::new();
    for handle in draws {
        statuses.push(handle.await.unwrap());
    }
    assert_eq!(statuses.iter().filter(|&&s| s == StatusCode::OK).count(), 1, "{statuses:?}");
    assert_eq!(statuses.iter().filter(|&&s| s == StatusCode::CONFLICT).count(), 3, "{statuses:?}");

    let contest = sausalito();
    let posts: Vec<_> = contest
        .precincts
        .iter()
        .map(|p| {
            let (app, id) = (app.clone(), id.clone());
            let body = json!({"tallies": [tally_json(&p.id, |_| {})]});
            tokio::spawn(async move { call(&app, Method::POST, &format!("/sessions/{id}/tallies"), Some(body)).await.0 })
        })
        .collect();
    for handle in posts {
        assert_eq!(handle.await.unwrap(), StatusCode::OK);
    }
    let (_, state) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    let tallied = state["sample"].as_array().unwrap().iter().filter(|s| !s["overstatement"].is_null()).count();
    assert_eq!(tallied, 9);

    // Everything acknowledged is on disk: a fresh service sees the same state.
    let reopened = router(dir.path(), None).unwrap();
    let (_, reloaded) = call(&reopened, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(reloaded, state);
}

#[tokio::test]
async fn corrupt_state_stops_startup() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_with_contest(dir.path()).await;
    let (_, created) = call(&app, Method::POST, "/sessions", Some(walkthrough_request())).await;
    let id = created["session_id"].as_str().unwrap();
    let path = dir.path().join("sessions").join(format!("{id}.json"));
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replace("\"seed\": 5", "\"seed\": 6")).unwrap();
    let err = router(dir.path(), None).unwrap_err();
    assert!(err.to_string().contains("stale or corrupt"), "{err}");
}

fn cli(args: &[&str]) -> String {
    let output = Command::new(env!("CARGO_BIN_EXE_ballotaudit")).args(args).output().unwrap();
    assert!(output.status.success(), "{args:?}: {}", String::from_utf8_lossy(&output.stderr));
    String::from_utf8(output.stdout).unwrap()
}

#[tokio::test]
async fn cli_and_service_agree() {
    let dir = tempfile::tempdir().unwrap();
    let contest_path = dir.path().join("sausalito-2006.csv");
    std::fs::write(&contest_path, SAUSALITO_CSV).unwrap();
    let session_path = dir.path().join("audit.json");
    let (contest_arg, session) = (contest_path.to_str().unwrap(), session_path.to_str().unwrap());
    let tallies_path = dir.path().join("t.csv");
    let contest = sausalito();
    let mut csv = Vec::new();
    let mut tally = HandTally::matching_reported(&contest, contest.precinct_index("3107").unwrap());
    found_error(&mut tally);
    write_tallies_csv(&[tally], &contest, &mut csv).unwrap();
    std::fs::write(&tallies_path, csv).unwrap();

    let cli_created: Value = serde_json::from_str(&cli(&[
        "run", "create", "--contest", contest_arg, "--f", "3", "--alpha", "0.01", "--seed", "5", "--initial-n", "1",
        "--session", session, "--json",
    ]))
    .unwrap();
    let cli_drawn: Value = serde_json::from_str(&cli(&["run", "draw", "--session", session, "--json"])).unwrap();
    let cli_recorded: Value = serde_json::from_str(&cli(&[
        "run", "record", "--session", session, "--tallies", tallies_path.to_str().unwrap(), "--json",
    ]))
    .unwrap();
    let cli_evaluated: Value = serde_json::from_str(&cli(&["run", "evaluate", "--session", session, "--json"])).unwrap();
    let cli_report: Value = serde_json::from_str(&cli(&["run", "report", "--session", session, "--json"])).unwrap();

    let state = tempfile::tempdir().unwrap();
    let app = app_with_contest(state.path()).await;
    let (_, created) = call(&app, Method::POST, "/sessions", Some(walkthrough_request())).await;
    let id = created["session_id"].as_str().unwrap().to_string();
    let (_, drawn) = call(&app, Method::POST, &format!("/sessions/{id}/draw"), None).await;
    let body = json!({"tallies": [tally_json("3107", found_error)]});
    let (_, recorded) = call(&app, Method::POST, &format!("/sessions/{id}/tallies"), Some(body)).await;
    let (_, evaluated) = call(&app, Method::POST, &format!("/sessions/{id}/evaluate"), None).await;
    let (_, report) = call(&app, Method::GET, &format!("/sessions/{id}/report"), None).await;

    assert_eq!(cli_created, created);
    assert_eq!(cli_drawn, drawn);
    assert_eq!(cli_recorded, recorded);
    assert_eq!(cli_evaluated, evaluated);
    assert_eq!(cli_report, report);

    // The saved session files are byte-identical too.
    let served = std::fs::read_to_string(state.path().join("sessions").join(format!("{id}.json"))).unwrap();
    assert_eq!(std::fs::read_to_string(&session_path).unwrap(), served);
}

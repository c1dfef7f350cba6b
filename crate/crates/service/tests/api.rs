mod common;

use std::collections::HashMap;

use axum::http::StatusCode;
use serde_json::{json, Value};

use common::{app, assert_valid, build_store, get_json, send};
use patternlens::patterns::{replay_statuses, PatternStatus, Registry};
use patternlens::store::{render_report, Explainer};

fn error_code(body: &str) -> String {
    let v: Value = serde_json::from_str(body).unwrap_or_else(|e| panic!("not an ApiError ({e}): {body}"));
    assert_valid("error.json", &v);
    v["code"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn health() {
    let dir = tempfile::tempdir().unwrap();
    build_store(dir.path(), false);
    let app = app(dir.path(), None);
    let (s, v) = get_json(&app, "/api/health").await;
    assert_eq!(s, StatusCode::OK);
    assert_valid("health.json", &v);
    assert_eq!(v["version"], env!("CARGO_PKG_VERSION"));
}

#[tokio::test]
async fn pattern_pages_and_filters() {
    let dir = tempfile::tempdir().unwrap();
    build_store(dir.path(), false);
    let reg = Registry::open(&dir.path().join("registry")).unwrap();
    let n = reg.len();
    assert!(n > 50, "fixture should span two pages, has {n}");
    let app = app(dir.path(), None);

    let (s, p1) = get_json(&app, "/api/patterns").await;
    assert_eq!(s, StatusCode::OK);
    assert_valid("pattern_page.json", &p1);
    assert_eq!(p1["page"], 1);
    assert_eq!(p1["total"], n);
    assert_eq!(p1["total_pages"], n.div_ceil(50));
    assert_eq!(p1["patterns"].as_array().unwrap().len(), 50);
    let (_, p2) = get_json(&app, "/api/patterns?page=2").await;
    assert_valid("pattern_page.json", &p2);
    let ids: Vec<u64> = p1["patterns"]
        .as_array()
        .unwrap()
        .iter()
        .chain(p2["patterns"].as_array().unwrap())
        .map(|p| p["pattern_id"].as_u64().unwrap())
        .collect();
    let expect: Vec<u64> = reg.patterns().map(|p| p.pattern_id as u64).collect();
    assert_eq!(ids, expect);
    let (_, past) = get_json(&app, "/api/patterns?page=99").await;
    assert_eq!(past["patterns"], json!([]));

    let accepted = reg.accepted().len();
    let (_, acc) = get_json(&app, "/api/patterns?status=accepted").await;
    assert_eq!(acc["total"], accepted);
    assert!(acc["patterns"]
        .as_array()
        .unwrap()
        .iter()
        .all(|p| p["status"] == "accepted"));

    let mut by_cat: HashMap<String, usize> = HashMap::new();
    for p in reg.patterns() {
        if let Some(a) = &p.annotation {
            *by_cat.entry(a.category.as_str().to_string()).or_default() += 1;
        }
    }
    for (cat, count) in by_cat {
        let (_, v) = get_json(&app, &format!("/api/patterns?category={cat}")).await;
        assert_eq!(v["total"], count, "category {cat}");
    }
    let (_, both) = get_json(&app, "/api/patterns?status=pending&category=cardiac").await;
    assert!(both["patterns"]
        .as_array()
        .unwrap()
        .iter()
        .all(|p| p["status"] == "pending" && p["category"] == "cardiac"));

    for bad in ["status=maybe", "category=bones", "page=0", "page=x", "sort=id"] {
        let (s, body) = send(&app, "GET", &format!("/api/patterns?{bad}"), None).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{bad}");
        assert_eq!(error_code(&body), "invalid_verdict");
    }
}

#[tokio::test]
async fn gallery_payload() {
    let dir = tempfile::tempdir().unwrap();
    let fx = build_store(dir.path(), false);
    let reg = Registry::open(&dir.path().join("registry")).unwrap();
    let p = reg.patterns().next().unwrap();
    let assets = tempfile::tempdir().unwrap();
    let first = &p.gallery.exemplars[0].record_id;
    std::fs::write(assets.path().join(format!("{first}.png")), b"\x89PNG").unwrap();
    let app = app(dir.path(), Some(assets.path().to_path_buf()));

    let (s, v) = get_json(&app, &format!("/api/patterns/{}/gallery", p.pattern_id)).await;
    assert_eq!(s, StatusCode::OK);
    assert_valid("gallery.json", &v);
    let ex = v["exemplars"].as_array().unwrap();
    assert_eq!(ex.len(), p.gallery.exemplars.len());
    for (i, (e, g)) in ex.iter().zip(&p.gallery.exemplars).enumerate() {
        assert_eq!(e["rank"], i + 1);
        assert_eq!(e["record_id"], g.record_id.as_str());
        assert_eq!(e["activation"], g.activation);
        let rec = fx.bench.dataset.find(&g.record_id).unwrap();
        assert_eq!(e["excerpt"], rec.report_excerpt.as_str());
    }
    let acts: Vec<f64> = ex.iter().map(|e| e["activation"].as_f64().unwrap()).collect();
    assert!(acts.windows(2).all(|w| w[0] >= w[1]));
    assert_eq!(ex[0]["thumbnail_url"], format!("/assets/{first}.png"));
    assert_eq!(ex[1]["thumbnail_url"], Value::Null);
    let (s, body) = send(&app, "GET", &format!("/assets/{first}.png"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(body.contains("PNG"));

    for bad in ["99999", "abc", "-1"] {
        let (s, body) = send(&app, "GET", &format!("/api/patterns/{bad}/gallery"), None).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{bad}");
        assert_eq!(error_code(&body), "not_found");
    }
}

#[tokio::test]
async fn verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let fx = build_store(dir.path(), false);
    // one pending pattern whose annotation misses the agreement bar
    let unverifiable = fx.pending_acceptable[1];
    {
        let mut reg = Registry::open(&dir.path().join("registry")).unwrap();
        let mut p = reg.get(unverifiable).unwrap().clone();
        p.annotation.as_mut().unwrap().agreement = Some(0.7);
        p.flagged_for_review = true;
        reg.update_pattern(p).unwrap();
    }
    let app = app(dir.path(), None);
    let id = fx.pending_acceptable[0];
    let url = format!("/api/patterns/{id}/verdict");

    let (s, body) = send(
        &app,
        "POST",
        &url,
        Some(r#"{"verdict":"accept","reviewer":"dr-a","note":"clear"}"#),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{body}");
    let v: Value = serde_json::from_str(&body).unwrap();
    assert_valid("pattern_summary.json", &v);
    assert_eq!(v["status"], "accepted");
    let (_, page) = get_json(&app, "/api/patterns?status=accepted").await;
    assert!(page["patterns"]
        .as_array()
        .unwrap()
        .iter()
        .any(|p| p["pattern_id"] == id));

    let reg = Registry::open(&dir.path().join("registry")).unwrap();
    let last = reg.audit_log().unwrap().pop().unwrap();
    assert_eq!(
        (last.pattern_id, last.reviewer.as_str(), last.note.as_deref()),
        (id, "dr-a", Some("clear"))
    );
    assert_eq!(last.prior_status, PatternStatus::Pending);
    assert_eq!(reg.get(id).unwrap().status, PatternStatus::Accepted);

    let cases = [
        (
            format!("/api/patterns/{unverifiable}/verdict"),
            r#"{"verdict":"accept","reviewer":"r"}"#,
            StatusCode::CONFLICT,
            "conflict",
        ),
        (
            url.clone(),
            r#"{"verdict":"maybe","reviewer":"r"}"#,
            StatusCode::BAD_REQUEST,
            "invalid_verdict",
        ),
        (
            url.clone(),
            r#"{"verdict":"accept","reviewer":"  "}"#,
            StatusCode::BAD_REQUEST,
            "invalid_verdict",
        ),
        (
            url.clone(),
            r#"{"verdict":"accept"}"#,
            StatusCode::BAD_REQUEST,
            "invalid_verdict",
        ),
        (
            url.clone(),
            r#"{"verdict":"accept","reviewer":"r","extra":1}"#,
            StatusCode::BAD_REQUEST,
            "invalid_verdict",
        ),
        (url.clone(), "not json", StatusCode::BAD_REQUEST, "invalid_verdict"),
        (
            "/api/patterns/99999/verdict".into(),
            r#"{"verdict":"reject","reviewer":"r"}"#,
            StatusCode::NOT_FOUND,
            "not_found",
        ),
    ];
    let before = reg.audit_log().unwrap().len();
    for (u, b, status, code) in cases {
        let (s, body) = send(&app, "POST", &u, Some(b)).await;
        assert_eq!(s, status, "{u} {b}: {body}");
        assert_eq!(error_code(&body), code);
    }
    assert_eq!(
        Registry::open(&dir.path().join("registry"))
            .unwrap()
            .audit_log()
            .unwrap()
            .len(),
        before
    );

    let (s, body) = send(
        &app,
        "POST",
        &format!("/api/patterns/{unverifiable}/verdict"),
        Some(r#"{"verdict":"reject","reviewer":"r"}"#),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{body}");
    let schema_ok: Value = serde_json::from_str(r#"{"verdict":"reject","reviewer":"r","note":null}"#).unwrap();
    assert_valid("verdict_request.json", &schema_ok);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_verdicts_are_serialized() {
    let dir = tempfile::tempdir().unwrap();
    let fx = build_store(dir.path(), false);
    let app = app(dir.path(), None);
    let before = Registry::open(&dir.path().join("registry"))
        .unwrap()
        .audit_log()
        .unwrap()
        .len();
    let targets: Vec<u32> = fx.pending_acceptable.iter().copied().take(4).collect();
    let mut handles = Vec::new();
    for i in 0..40usize {
        let app = app.clone();
        let id = targets[i % targets.len()];
        let verdict = if i % 3 == 0 { "reject" } else { "accept" };
        handles.push(tokio::spawn(async move {
            let body = format!(r#"{{"verdict":"{verdict}","reviewer":"r{i}"}}"#);
            send(&app, "POST", &format!("/api/patterns/{id}/verdict"), Some(&body)).await
        }));
    }
    for h in handles {
        let (s, body) = h.await.unwrap();
        assert_eq!(s, StatusCode::OK, "{body}");
    }
    let reg = Registry::open(&dir.path().join("registry")).unwrap();
    let log = reg.audit_log().unwrap();
    assert_eq!(log.len(), before + 40);
    assert!(log.iter().enumerate().all(|(i, e)| e.seq == i as u64));
    let replayed = replay_statuses(reg.patterns().map(|p| p.pattern_id), &log).unwrap();
    for &id in &targets {
        let last = log.iter().rev().find(|e| e.pattern_id == id).unwrap();
        assert_eq!(replayed[&id], last.new_status);
        assert_eq!(reg.get(id).unwrap().status, last.new_status);
    }
    let (_, v) = get_json(&app, "/api/patterns?status=accepted&page=1").await;
    let served_accepted = v["total"].as_u64().unwrap() as usize;
    assert_eq!(served_accepted, reg.accepted().len());
}

#[tokio::test]
async fn attribution_matches_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let fx = build_store(dir.path(), true);
    let app = app(dir.path(), None);
    let explainer = Explainer::load(&fx.layout).unwrap();
    let reg = Registry::open(&fx.layout.registry()).unwrap();
    for rec in fx.bench.dataset.records.iter().step_by(97) {
        for target in ["alpha", "1"] {
            let (s, body) = send(
                &app,
                "GET",
                &format!("/api/records/{}/attribution/{target}", rec.record_id),
                None,
            )
            .await;
            assert_eq!(s, StatusCode::OK, "{body}");
            let expect = render_report(&explainer.explain(&rec.record_id, target, Some(&reg)).unwrap()).unwrap();
            assert_eq!(body, expect);
            let v: Value = serde_json::from_str(&body).unwrap();
            assert_valid("attribution.json", &v);
        }
    }
    for uri in [
        "/api/records/nope/attribution/alpha",
        "/api/records/r0001/attribution/gamma",
    ] {
        let (s, body) = send(&app, "GET", uri, None).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(error_code(&body), "not_found");
    }
}

#[tokio::test]
async fn attribution_without_head_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    build_store(dir.path(), false);
    let app = app(dir.path(), None);
    let (s, body) = send(&app, "GET", "/api/records/r0001/attribution/alpha", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&body), "not_found");
    assert!(body.contains("encode") || body.contains("train-head"), "{body}");
}

#[tokio::test]
async fn unknown_routes_use_the_error_shape() {
    let dir = tempfile::tempdir().unwrap();
    build_store(dir.path(), false);
    let app = app(dir.path(), None);
    let (s, body) = send(&app, "GET", "/api/nothing", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&body), "not_found");
    let (s, body) = send(&app, "DELETE", "/api/patterns/0/verdict", None).await;
    assert_eq!(s, StatusCode::METHOD_NOT_ALLOWED);
    error_code(&body);
}

#[test]
fn missing_registry_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let err = patternlens_service::AppState::load(dir.path(), None).err().unwrap();
    assert!(matches!(err, patternlens::Error::NotFound(_)), "{err}");
    assert!(err.to_string().contains("discover"));
}

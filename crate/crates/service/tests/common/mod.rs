#![allow(dead_code)]

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use tower::ServiceExt;

use patternlens::embedstore::{assign_splits, Split};
use patternlens::featenc::{compute_pattern_thresholds, FeatureEncoder, PatternSet, ThresholdMode};
use patternlens::interphead::{train_head, HeadConfig};
use patternlens::patterns::{
    annotate_pattern, discover, verify_annotation, DiscoverConfig, MockClient, PatternId, Registry, Verdict,
};
use patternlens::store::StoreLayout;
use patternlens::synthgen::{generate_benchmark, Benchmark, SyntheticSpec};
use patternlens::transcoder::{Ensemble, TranscoderModel};
use patternlens_service::{router, AppState};

pub const N_FACTORS: usize = 64;

pub fn benchmark() -> Benchmark {
    let spec = SyntheticSpec {
        n_factors: N_FACTORS,
        d_img: 64,
        d_txt: 64,
        target_dim: 32,
        k_true: 2,
        noise_sigma: 0.0,
        label_rules: vec![vec![0, 1], vec![2, 3]],
        label_names: Some(vec!["alpha".into(), "beta".into()]),
        n_samples: 1500,
        n_patients: 300,
        seed: 11,
        dictionary: Default::default(),
    };
    let mut b = generate_benchmark(&spec).unwrap();
    assign_splits(&b.dataset, [0.7, 0.15, 0.15], 11)
        .unwrap()
        .apply(&mut b.dataset);
    b.dataset.refresh_manifest();
    b
}

/// A transcoder whose encoder rows are the planted atoms and whose decoder
/// rows are the planted mixing rows.
pub fn oracle_ensemble(b: &Benchmark) -> Ensemble {
    let m = b.truth.dictionary.len();
    let d_in = b.truth.dictionary[0].len();
    let d_out = b.truth.mixing[0].len();
    let mut t = TranscoderModel::zeros(d_in, m, d_out, 2).unwrap();
    for f in 0..m {
        let we = t.w_enc().start + f * d_in;
        t.params[we..we + d_in].copy_from_slice(&b.truth.dictionary[f]);
        let wd = t.w_dec().start + f * d_out;
        t.params[wd..wd + d_out].copy_from_slice(&b.truth.mixing[f]);
    }
    Ensemble::from_models(vec![t], 0).unwrap()
}

pub struct Fixture {
    pub layout: StoreLayout,
    pub bench: Benchmark,
    /// Acceptable patterns left pending for the tests to decide.
    pub pending_acceptable: Vec<PatternId>,
}

/// A complete store: dataset, registry with half the acceptable patterns
/// accepted, thresholds, features and head. `with_head = false` stops after
/// the registry.
pub fn build_store(root: &Path, with_head: bool) -> Fixture {
    let layout = StoreLayout::new(root);
    let b = benchmark();
    b.dataset.save(&layout.dataset()).unwrap();
    let ens = oracle_ensemble(&b);
    let cfg = DiscoverConfig {
        consistency_threshold: 0.0,
        ..Default::default()
    };
    let (mut patterns, _) = discover(&ens, &b.dataset, &cfg).unwrap();
    let text: HashMap<String, String> = b
        .dataset
        .records
        .iter()
        .map(|r| (r.record_id.clone(), r.report_excerpt.clone()))
        .collect();
    for p in &mut patterns {
        annotate_pattern(&MockClient, p, &text).unwrap();
        let _ = verify_annotation(&MockClient, p, &text);
    }
    let acceptable: Vec<PatternId> = patterns
        .iter()
        .filter(|p| p.is_acceptable())
        .map(|p| p.pattern_id)
        .collect();
    let mut reg = Registry::create(&layout.registry(), patterns).unwrap();
    let (accept, pending): (Vec<_>, Vec<_>) = acceptable.iter().partition(|&&id| id % 2 == 0);
    let verdicts: Vec<_> = accept.iter().map(|&id| (id, Verdict::Accept)).collect();
    reg.record_verdicts(&verdicts, "fixture", None).unwrap();
    if with_head {
        let taus = compute_pattern_thresholds(&reg, &ens, &b.dataset, ThresholdMode::All).unwrap();
        let enc = FeatureEncoder::new(PatternSet::accepted(&reg).unwrap(), &taus, 30).unwrap();
        let fm = enc.encode_dataset(&ens, &b.dataset).unwrap();
        fm.save(&layout.features()).unwrap();
        let train = b.dataset.indices_in(Split::Train);
        let feats: Vec<_> = train.iter().map(|&i| fm.rows[i].clone()).collect();
        let labels: Vec<Vec<Option<bool>>> = train
            .iter()
            .map(|&i| b.dataset.records[i].labels.iter().map(|l| l.as_bool()).collect())
            .collect();
        let head = train_head(
            &feats,
            &fm.pattern_ids,
            &labels,
            &b.dataset.manifest.label_names,
            &HeadConfig::default(),
        )
        .unwrap();
        head.save(&layout.head()).unwrap();
    }
    Fixture {
        layout,
        bench: b,
        pending_acceptable: pending,
    }
}

pub fn app(root: &Path, assets: Option<std::path::PathBuf>) -> Router {
    router(Arc::new(AppState::load(root, assets).unwrap()))
}

pub async fn send(app: &Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, String) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req
        .body(body.map_or(Body::empty(), |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8_lossy(&bytes).into_owned())
}

pub async fn get_json(app: &Router, uri: &str) -> (StatusCode, serde_json::Value) {
    let (s, body) = send(app, "GET", uri, None).await;
    (
        s,
        serde_json::from_str(&body).unwrap_or_else(|e| panic!("{uri}: {e}: {body}")),
    )
}

/// Resolves relative `$ref`s to sibling files in `schemas/`.
struct SchemaDir;

impl jsonschema::Retrieve for SchemaDir {
    fn retrieve(
        &self,
        uri: &jsonschema::Uri<String>,
    ) -> Result<serde_json::Value, Box<dyn std::error::Error + Send + Sync>> {
        let name = uri.path().as_str().trim_start_matches('/');
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(name);
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

pub fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(name);
    let value: serde_json::Value = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
    jsonschema::options().with_retriever(SchemaDir).build(&value).unwrap()
}

pub fn assert_valid(name: &str, v: &serde_json::Value) {
    let s = schema(name);
    let errors: Vec<String> = s.iter_errors(v).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{name}: {errors:?}\n{v:#}");
}

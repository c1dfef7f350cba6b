//! End-to-end run and its deterministic summary.
//!
//! The summary holds counts, rates and digests only. Nothing in it depends
//! on wall-clock time or on where the store lives, so two runs with the same
//! config produce byte-identical files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use patternlens::embedstore::Split;
use patternlens::interphead::HeadModel;
use patternlens::patterns::{DiscoveryReport, PatternId, Registry};
use patternlens::synthgen::{match_atoms, nearest_atoms, GroundTruth};
use patternlens::util::write_atomic;
use patternlens::{Error, Result};

use crate::pipeline::{evaluate_head, AnnotateReport, EncodeReport, Pipeline, TargetEval};

/// Cosine for counting a learned atom as a recovered factor.
pub const RECOVERY_COS: f64 = 0.8;
/// Cosine for naming the factor a pattern stands for when checking attributions.
pub const ATTRIBUTION_FACTOR_COS: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub records: usize,
    pub patients: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    #[serde(flatten)]
    pub eval: TargetEval,
    /// Share of positive test predictions whose largest contribution comes
    /// from a pattern standing for one of the target's rule factors.
    pub top_attribution_rule_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub version: String,
    pub seed: u64,
    pub dataset: DatasetSummary,
    pub classifier_test_accuracy: Option<Vec<f64>>,
    pub transcoder_members_ok: usize,
    pub recovery_rate: Option<f64>,
    pub discovery: DiscoveryReport,
    pub annotation: AnnotateReport,
    pub accepted_patterns: usize,
    pub accepted_recovery_rate: Option<f64>,
    pub features: EncodeReport,
    pub head_alpha: f64,
    pub targets: Vec<TargetSummary>,
    /// max |bias + Σ contributions − logit| over every record and target.
    pub max_attribution_residual: f64,
    /// Stage name → SHA-256 of its outputs.
    pub artifacts: BTreeMap<String, BTreeMap<String, String>>,
}

pub const STAGES: [&str; 10] = [
    "synth",
    "split",
    "train-classifier",
    "extract",
    "train-transcoders",
    "discover",
    "annotate",
    "thresholds",
    "encode",
    "train-head",
];

/// Run every stage on a synthetic benchmark, or on `input` records when given,
/// and write `summary.json`.
pub fn run_e2e(p: &Pipeline, input: Option<&Path>) -> Result<Summary> {
    p.write_config()?;
    match input {
        Some(path) => {
            p.ingest(path)?;
        }
        None => {
            p.synth()?;
        }
    }
    p.split()?;
    let classifier_acc = p.train_classifier()?;
    p.extract()?;
    let ens_manifest = p.train_transcoders()?;
    let discovery = p.discover(true)?;
    let annotation = p.annotate()?;
    p.thresholds()?;
    let features = p.encode()?;
    let evals = p.train_head()?;

    let ds = p.load_split_dataset()?;
    let reg = p.open_registry()?;
    let fm = p.load_features()?;
    let head = p.load_head()?;
    let truth = if input.is_none() {
        Some(GroundTruth::load(&p.layout.dataset())?)
    } else {
        None
    };
    let ens = p.load_ensemble()?;
    let recovery_rate = truth
        .as_ref()
        .map(|t| match_atoms(&ens.pooled_decoder_atoms(), &t.mixing, RECOVERY_COS).recovery_rate);
    let accepted_recovery_rate = truth.as_ref().map(|t| {
        let cents: Vec<Vec<f64>> = reg.accepted().iter().map(|p| p.centroid.clone()).collect();
        match_atoms(&cents, &t.mixing, RECOVERY_COS).recovery_rate
    });
    let rule_rates = match &truth {
        Some(t) => top_attribution_rule_rates(&head, &reg, t, &ds, &fm)?,
        None => vec![None; head.targets.len()],
    };
    let mut residual = 0.0f64;
    for fv in &fm.rows {
        for t in 0..head.targets.len() {
            let r = head.attribute(fv, t, None)?;
            residual = residual.max((r.reconstructed_logit() - r.logit).abs());
        }
    }
    let mut artifacts = BTreeMap::new();
    for stage in STAGES.iter().filter(|s| input.is_none() || **s != "synth") {
        let path = p.layout.stage_manifest(stage);
        let m: patternlens::store::StageManifest =
            serde_json::from_slice(&std::fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        artifacts.insert(stage.to_string(), m.outputs);
    }
    if input.is_some() {
        let path = p.layout.stage_manifest("ingest");
        let m: patternlens::store::StageManifest =
            serde_json::from_slice(&std::fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        artifacts.insert("ingest".into(), m.outputs);
    }
    let patients: std::collections::BTreeSet<&str> = ds.records.iter().map(|r| r.patient_id.as_str()).collect();
    let c = &ds.manifest.counts;
    let summary = Summary {
        version: env!("CARGO_PKG_VERSION").into(),
        seed: p.config.seed,
        dataset: DatasetSummary {
            records: ds.len(),
            patients: patients.len(),
            train: c.train,
            val: c.val,
            test: c.test,
            digest: ds.manifest.digest.clone(),
        },
        classifier_test_accuracy: Some(classifier_acc),
        transcoder_members_ok: Pipeline::ensemble_members_ok(&ens_manifest),
        recovery_rate,
        discovery,
        annotation,
        accepted_patterns: reg.accepted().len(),
        accepted_recovery_rate,
        features,
        head_alpha: head.alpha,
        targets: evals
            .into_iter()
            .zip(rule_rates)
            .map(|(eval, top_attribution_rule_rate)| TargetSummary {
                eval,
                top_attribution_rule_rate,
            })
            .collect(),
        max_attribution_residual: residual,
        artifacts,
    };
    write_atomic(&p.layout.summary(), &serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}

/// Per target, over test records the head calls positive: how often the top
/// contribution belongs to a pattern whose centroid is nearest to one of the
/// target's rule factors.
pub fn top_attribution_rule_rates(
    head: &HeadModel,
    reg: &Registry,
    truth: &GroundTruth,
    ds: &patternlens::embedstore::Dataset,
    fm: &patternlens::featenc::FeatureMatrix,
) -> Result<Vec<Option<f64>>> {
    let accepted = reg.accepted();
    let cents: Vec<Vec<f64>> = accepted.iter().map(|p| p.centroid.clone()).collect();
    let factor_of: BTreeMap<PatternId, Option<usize>> = accepted
        .iter()
        .map(|p| p.pattern_id)
        .zip(nearest_atoms(&cents, &truth.mixing, ATTRIBUTION_FACTOR_COS))
        .collect();
    let test = ds.indices_in(Split::Test);
    (0..head.targets.len())
        .map(|t| {
            let rule = truth.label_rules.get(t);
            let (mut pos, mut hit) = (0usize, 0usize);
            for &i in &test {
                let Some(fv) = fm.find(&ds.records[i].record_id) else {
                    continue;
                };
                if head.predict(fv, t)? < 0.5 {
                    continue;
                }
                pos += 1;
                let report = head.attribute(fv, t, None)?;
                let top_factor = report
                    .contributions
                    .first()
                    .and_then(|c| factor_of.get(&c.pattern_id).copied().flatten());
                if top_factor.is_some_and(|f| rule.is_some_and(|r| r.contains(&f))) {
                    hit += 1;
                }
            }
            Ok((pos > 0).then(|| hit as f64 / pos as f64))
        })
        .collect()
}

/// Re-evaluate an existing store without retraining.
pub fn evaluate_store(p: &Pipeline) -> Result<Vec<TargetEval>> {
    evaluate_head(&p.load_head()?, &p.load_split_dataset()?, &p.load_features()?)
}

//! One function per stage. Each reads its inputs from the store, writes its
//! outputs and a stage manifest, and returns a small report.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use patternlens::embedstore::{assign_splits, infer_manifest, ingest_records, Dataset, Split, SplitAssignment};
use patternlens::featenc::{compute_pattern_thresholds, FeatureEncoder, FeatureMatrix, FeatureVector, PatternSet};
use patternlens::interphead::{train_head, HeadModel};
use patternlens::mlpcls::{
    extract_logits, extract_penultimate, mean_label_accuracy, train_classifier, ClassifierModel,
};
use patternlens::patterns::annotate::{HttpTransport, LmmClient};
use patternlens::patterns::{
    annotate_pattern, discover, verify_annotation, AnnotationClient, DiscoveryReport, MockClient, PatternStatus,
    Registry, Verdict, AUTO_REVIEWER,
};
use patternlens::store::{render_report, require, Explainer, StageManifest, StoreLayout, ThresholdFile};
use patternlens::synthgen::generate_benchmark;
use patternlens::tensorfile::{Tensor, TensorFile};
use patternlens::transcoder::{train_ensemble, Ensemble, EnsembleManifest, MemberStatus};
use patternlens::util::write_atomic;
use patternlens::{Error, Result};

use crate::config::{ClientKind, PipelineConfig, TargetSource};

const CLASSIFIER_STEM: &str = "classifier";
const ANNOTATE_CHUNK: usize = 64;

pub struct Pipeline {
    pub layout: StoreLayout,
    pub config: PipelineConfig,
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Row-major matrix stored as a single tensor named `name`.
pub fn write_rows(path: &Path, name: &str, rows: &[Vec<f64>]) -> Result<()> {
    let cols = rows.first().map_or(0, Vec::len);
    let mut tf = TensorFile::default();
    tf.push(Tensor::from_f64(name, &[rows.len(), cols], &rows.concat()));
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    tf.write(path)
}

pub fn read_rows(path: &Path, name: &str) -> Result<Vec<Vec<f64>>> {
    let tf = TensorFile::read(path)?;
    let t = tf.get(name)?;
    if t.dims.len() != 2 {
        return Err(Error::Format(format!("{name} in {} is not a matrix", path.display())));
    }
    let cols = t.dims[1].max(1);
    Ok(t.to_f64().chunks(cols).map(<[f64]>::to_vec).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotateReport {
    pub attempted: usize,
    pub annotated: usize,
    pub verified: usize,
    pub acceptable: usize,
    pub flagged: usize,
    pub failed: usize,
    pub auto_accepted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeReport {
    pub records: usize,
    pub patterns: usize,
    pub mean_active: f64,
    pub max_active: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetEval {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
    pub test_accuracy: Option<f64>,
    pub nonzero_weights: usize,
    pub predicted_positive: usize,
}

impl Pipeline {
    pub fn new(store: impl Into<std::path::PathBuf>, config: PipelineConfig) -> Self {
        Pipeline {
            layout: StoreLayout::new(store),
            config,
        }
    }

    /// Echo the effective configuration into the store.
    pub fn write_config(&self) -> Result<()> {
        create_dir(&self.layout.root)?;
        write_atomic(&self.layout.config(), &serde_json::to_vec_pretty(&self.config)?)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let dir = self.layout.dataset();
        require(&dir.join(patternlens::embedstore::MANIFEST_FILE), "dataset", "ingest")?;
        Dataset::load(&dir)
    }

    /// Dataset with splits assigned.
    pub fn load_split_dataset(&self) -> Result<Dataset> {
        require(&self.layout.splits(), "split assignment", "split")?;
        self.load_dataset()
    }

    pub fn load_ensemble(&self) -> Result<Ensemble> {
        let dir = self.layout.transcoders();
        require(
            &dir.join(patternlens::transcoder::ENSEMBLE_MANIFEST),
            "transcoder ensemble",
            "train-transcoders",
        )?;
        Ensemble::load(&dir)
    }

    pub fn open_registry(&self) -> Result<Registry> {
        let dir = self.layout.registry();
        require(&dir.join("index.json"), "pattern registry", "discover")?;
        Registry::open(&dir)
    }

    pub fn load_features(&self) -> Result<FeatureMatrix> {
        require(
            &self.layout.features().join("features.json"),
            "feature matrix",
            "encode",
        )?;
        FeatureMatrix::load(&self.layout.features())
    }

    pub fn load_head(&self) -> Result<HeadModel> {
        require(&self.layout.head(), "head model", "train-head")?;
        HeadModel::load(&self.layout.head())
    }

    fn reset_downstream_of_dataset(&self) -> Result<()> {
        let dir = self.layout.dataset();
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(())
    }

    pub fn synth(&self) -> Result<Dataset> {
        let spec = self.config.synth.as_ref().ok_or_else(|| {
            Error::InvalidArgument("no synthetic spec: pass --spec or set `synth` in the config".into())
        })?;
        let bench = generate_benchmark(spec)?;
        self.reset_downstream_of_dataset()?;
        let dir = self.layout.dataset();
        bench.dataset.save(&dir)?;
        bench.truth.save(&dir)?;
        let d = spec.target_dim;
        let rows: Vec<Vec<f64>> = bench.targets.chunks(d).map(<[f64]>::to_vec).collect();
        write_rows(&self.layout.planted_targets(), "targets", &rows)?;
        StageManifest::new("synth", Some(spec.seed), serde_json::to_value(spec)?)
            .output("dataset", &dir)?
            .write(&self.layout)?;
        Ok(bench.dataset)
    }

    pub fn ingest(&self, input: &Path) -> Result<Dataset> {
        let mut manifest = infer_manifest(input)?;
        if let Some(names) = &self.config.ingest.label_names {
            if names.len() != manifest.n_labels {
                return Err(Error::InvalidArgument(format!(
                    "ingest.label_names has {} names but records carry {} labels",
                    names.len(),
                    manifest.n_labels
                )));
            }
            manifest.label_names = names.clone();
        }
        let ds = ingest_records(input, manifest)?;
        self.reset_downstream_of_dataset()?;
        ds.save(&self.layout.dataset())?;
        StageManifest::new("ingest", None, json!({ "label_names": ds.manifest.label_names }))
            .input("records", input)?
            .output("dataset", &self.layout.dataset())?
            .write(&self.layout)?;
        Ok(ds)
    }

    pub fn split(&self) -> Result<Dataset> {
        let mut ds = self.load_dataset()?;
        let c = &self.config.split;
        let assignment = assign_splits(&ds, c.ratios, c.seed)?;
        assignment.apply(&mut ds);
        ds.refresh_manifest();
        let dir = self.layout.dataset();
        let input_digest = patternlens::store::digest_path(&dir.join(patternlens::embedstore::RECORDS_FILE))?;
        ds.save(&dir)?;
        write_atomic(&self.layout.splits(), &serde_json::to_vec_pretty(&assignment)?)?;
        let mut m = StageManifest::new("split", Some(c.seed), json!({ "ratios": c.ratios }))
            .output("splits", &self.layout.splits())?
            .output("dataset", &dir)?;
        m.inputs.insert("dataset".into(), input_digest);
        m.write(&self.layout)?;
        Ok(ds)
    }

    pub fn load_splits(&self) -> Result<SplitAssignment> {
        require(&self.layout.splits(), "split assignment", "split")?;
        let p = self.layout.splits();
        Ok(serde_json::from_slice(
            &std::fs::read(&p).map_err(|e| Error::io(&p, e))?,
        )?)
    }

    /// Returns per-label test accuracy.
    pub fn train_classifier(&self) -> Result<Vec<f64>> {
        let ds = self.load_split_dataset()?;
        let cfg = &self.config.classifier;
        let (model, history) = train_classifier(&ds, cfg)?;
        let dir = self.layout.classifier();
        create_dir(&dir)?;
        model.save(&dir, CLASSIFIER_STEM, &ds.manifest.label_names)?;
        write_atomic(&dir.join("history.json"), &serde_json::to_vec_pretty(&history)?)?;
        let acc = mean_label_accuracy(&model, &ds, Split::Test)?;
        StageManifest::new("train-classifier", Some(cfg.seed), serde_json::to_value(cfg)?)
            .input("dataset", &self.layout.dataset())?
            .output("classifier", &dir)?
            .write(&self.layout)?;
        Ok(acc)
    }

    pub fn load_classifier(&self) -> Result<ClassifierModel> {
        let dir = self.layout.classifier();
        require(&dir, "classifier", "train-classifier")?;
        Ok(ClassifierModel::load(&dir, CLASSIFIER_STEM)?.0)
    }

    /// Write transcoder targets for every record. Returns `(rows, dim)`.
    pub fn extract(&self) -> Result<(usize, usize)> {
        let ds = self.load_split_dataset()?;
        let source = self.config.targets.source;
        let (rows, input_name, input_path) = match source {
            TargetSource::Penultimate => (
                extract_penultimate(&self.load_classifier()?, &ds)?,
                "classifier",
                self.layout.classifier(),
            ),
            TargetSource::Logits => (
                extract_logits(&self.load_classifier()?, &ds)?,
                "classifier",
                self.layout.classifier(),
            ),
            TargetSource::Planted => {
                let p = self.layout.planted_targets();
                require(&p, "planted targets", "synth")?;
                (read_rows(&p, "targets")?, "planted_targets", p)
            }
        };
        if rows.len() != ds.len() {
            return Err(Error::Dimension {
                context: "target rows vs records",
                expected: ds.len(),
                actual: rows.len(),
            });
        }
        let out = self.layout.targets();
        write_rows(&out, "targets", &rows)?;
        let dim = rows.first().map_or(0, Vec::len);
        StageManifest::new("extract", None, json!({ "source": source }))
            .input(input_name, &input_path)?
            .output("targets", &out)?
            .write(&self.layout)?;
        Ok((rows.len(), dim))
    }

    pub fn train_transcoders(&self) -> Result<EnsembleManifest> {
        let ds = self.load_split_dataset()?;
        require(&self.layout.targets(), "transcoder targets", "extract")?;
        let targets = read_rows(&self.layout.targets(), "targets")?;
        if targets.len() != ds.len() {
            return Err(Error::Dimension {
                context: "target rows vs records",
                expected: ds.len(),
                actual: targets.len(),
            });
        }
        let train = ds.indices_in(Split::Train);
        let xs: Vec<Vec<f64>> = train.iter().map(|&i| ds.records[i].joint_embedding()).collect();
        let ys: Vec<Vec<f64>> = train.iter().map(|&i| targets[i].clone()).collect();
        let c = &self.config.transcoders;
        let ens = train_ensemble(&xs, &ys, c.members, &c.model, c.seed)?;
        if ens.ok_members().next().is_none() {
            return Err(Error::Numeric("every transcoder member failed".into()));
        }
        let dir = self.layout.transcoders();
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        ens.save(&dir)?;
        StageManifest::new("train-transcoders", Some(c.seed), serde_json::to_value(c)?)
            .input("dataset", &self.layout.dataset())?
            .input("targets", &self.layout.targets())?
            .output("transcoders", &dir)?
            .write(&self.layout)?;
        Ok(ens.manifest)
    }

    pub fn discover(&self, force: bool) -> Result<DiscoveryReport> {
        let ds = self.load_split_dataset()?;
        let ens = self.load_ensemble()?;
        let dir = self.layout.registry();
        if dir.join("index.json").exists() {
            if !force {
                return Err(Error::Conflict(format!(
                    "registry already exists at {}; pass --force to discard it and its audit log",
                    dir.display()
                )));
            }
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let cfg = &self.config.discover;
        let (patterns, report) = discover(&ens, &ds, cfg)?;
        Registry::create(&dir, patterns)?;
        write_atomic(&self.layout.discovery_report(), &serde_json::to_vec_pretty(&report)?)?;
        StageManifest::new("discover", Some(cfg.probe_seed), serde_json::to_value(cfg)?)
            .input("dataset", &self.layout.dataset())?
            .input("transcoders", &self.layout.transcoders())?
            .output("patterns", &dir.join("patterns"))?
            .write(&self.layout)?;
        Ok(report)
    }

    fn annotation_client(&self) -> Box<dyn AnnotationClient> {
        match self.config.annotate.client {
            ClientKind::Mock => Box::new(MockClient),
            ClientKind::Http => Box::new(LmmClient {
                transport: HttpTransport::new(self.config.annotate.http.clone()),
            }),
        }
    }

    /// Annotate and verify every pending pattern that has no annotation yet.
    pub fn annotate(&self) -> Result<AnnotateReport> {
        let client = self.annotation_client();
        self.annotate_with(client.as_ref())
    }

    pub fn annotate_with(&self, client: &dyn AnnotationClient) -> Result<AnnotateReport> {
        let ds = self.load_dataset()?;
        let mut reg = self.open_registry()?;
        let excerpts: HashMap<String, String> = ds
            .records
            .iter()
            .map(|r| (r.record_id.clone(), r.report_excerpt.clone()))
            .collect();
        let c = &self.config.annotate;
        let todo: Vec<_> = reg
            .patterns()
            .filter(|p| p.status == PatternStatus::Pending && p.annotation.is_none())
            .map(|p| p.pattern_id)
            .collect();
        let mut rep = AnnotateReport {
            attempted: todo.len(),
            annotated: 0,
            verified: 0,
            acceptable: 0,
            flagged: 0,
            failed: 0,
            auto_accepted: 0,
        };
        // Results are flushed in chunks so an interrupted run keeps most of its work.
        for chunk in todo.chunks(ANNOTATE_CHUNK) {
            let mut updated = Vec::with_capacity(chunk.len());
            let mut accept = Vec::new();
            for &id in chunk {
                let mut p = reg.get(id).expect("listed above").clone();
                match retry(c.attempts, || annotate_pattern(client, &mut p, &excerpts)) {
                    Ok(_) => {
                        rep.annotated += 1;
                        match retry(c.attempts, || verify_annotation(client, &mut p, &excerpts)) {
                            Ok(_) => rep.verified += 1,
                            Err(e) => {
                                log::debug!("pattern {id}: not verified: {e}");
                                p.last_error = Some(e.to_string());
                            }
                        }
                    }
                    Err(e) => {
                        log::warn!("pattern {id}: annotation failed: {e}");
                        rep.failed += 1;
                    }
                }
                rep.flagged += usize::from(p.flagged_for_review);
                if p.is_acceptable() {
                    rep.acceptable += 1;
                    if c.auto_accept {
                        accept.push((id, Verdict::Accept));
                    }
                }
                updated.push(p);
            }
            reg.update_patterns(updated)?;
            rep.auto_accepted += reg.record_verdicts(&accept, AUTO_REVIEWER, None)?.len();
        }
        let unverified = rep.annotated - rep.verified;
        if unverified > 0 {
            log::info!("{unverified} annotated patterns could not be verified and stay pending");
        }
        // The audit log carries wall-clock timestamps, so only the pattern
        // files are digested.
        StageManifest::new("annotate", None, serde_json::to_value(c)?)
            .input("dataset", &self.layout.dataset())?
            .output("patterns", &self.layout.registry().join("patterns"))?
            .write(&self.layout)?;
        Ok(rep)
    }

    pub fn thresholds(&self) -> Result<ThresholdFile> {
        let ds = self.load_split_dataset()?;
        let ens = self.load_ensemble()?;
        let reg = self.open_registry()?;
        let mode = self.config.features.threshold_mode;
        let file = ThresholdFile {
            mode,
            thresholds: compute_pattern_thresholds(&reg, &ens, &ds, mode)?,
        };
        file.save(&self.layout.thresholds())?;
        StageManifest::new("thresholds", None, json!({ "mode": mode }))
            .input("dataset", &self.layout.dataset())?
            .input("transcoders", &self.layout.transcoders())?
            .input("patterns", &self.layout.registry().join("patterns"))?
            .output("thresholds", &self.layout.thresholds())?
            .write(&self.layout)?;
        Ok(file)
    }

    pub fn encode(&self) -> Result<EncodeReport> {
        let ds = self.load_split_dataset()?;
        let ens = self.load_ensemble()?;
        let reg = self.open_registry()?;
        require(&self.layout.thresholds(), "pattern thresholds", "thresholds")?;
        let taus = ThresholdFile::load(&self.layout.thresholds())?;
        let k = self.config.features.k_active;
        let enc = FeatureEncoder::new(PatternSet::accepted(&reg)?, &taus.thresholds, k)?;
        let fm = enc.encode_dataset(&ens, &ds)?;
        let dir = self.layout.features();
        fm.save(&dir)?;
        StageManifest::new("encode", None, json!({ "k_active": k }))
            .input("dataset", &self.layout.dataset())?
            .input("transcoders", &self.layout.transcoders())?
            .input("thresholds", &self.layout.thresholds())?
            .output("features", &dir)?
            .write(&self.layout)?;
        let nnz: Vec<usize> = fm.rows.iter().map(FeatureVector::nnz).collect();
        Ok(EncodeReport {
            records: nnz.len(),
            patterns: fm.pattern_ids.len(),
            mean_active: nnz.iter().sum::<usize>() as f64 / nnz.len().max(1) as f64,
            max_active: nnz.iter().copied().max().unwrap_or(0),
        })
    }

    /// Feature rows aligned with `idx` into the dataset.
    fn rows_for<'a>(ds: &Dataset, fm: &'a FeatureMatrix, idx: &[usize]) -> Result<Vec<&'a FeatureVector>> {
        idx.iter()
            .map(|&i| {
                let id = &ds.records[i].record_id;
                fm.find(id)
                    .ok_or_else(|| Error::NotFound(format!("no encoded features for record {id:?}; rerun `encode`")))
            })
            .collect()
    }

    pub fn train_head(&self) -> Result<Vec<TargetEval>> {
        let ds = self.load_split_dataset()?;
        let fm = self.load_features()?;
        let train = ds.indices_in(Split::Train);
        let feats: Vec<FeatureVector> = Self::rows_for(&ds, &fm, &train)?.into_iter().cloned().collect();
        let labels: Vec<Vec<Option<bool>>> = train.iter().map(|&i| labels_of(&ds, i)).collect();
        let cfg = &self.config.head;
        let head = train_head(&feats, &fm.pattern_ids, &labels, &ds.manifest.label_names, cfg)?;
        head.save(&self.layout.head())?;
        StageManifest::new("train-head", Some(cfg.seed), serde_json::to_value(cfg)?)
            .input("dataset", &self.layout.dataset())?
            .input("features", &self.layout.features())?
            .output("head", &self.layout.head())?
            .write(&self.layout)?;
        evaluate_head(&head, &ds, &fm)
    }

    /// The attribution report for one record, rendered exactly as the service returns it.
    pub fn explain(&self, record: &str, target: &str) -> Result<String> {
        let explainer = Explainer::load(&self.layout)?;
        let reg = self.open_registry()?;
        render_report(&explainer.explain(record, target, Some(&reg))?)
    }

    /// Write the curated pattern index and the audit log as one JSON document.
    pub fn curate_export(&self, out: &Path) -> Result<usize> {
        let reg = self.open_registry()?;
        let doc = json!({
            "patterns": reg.index(),
            "audit": reg.audit_log()?,
        });
        write_atomic(out, &serde_json::to_vec_pretty(&doc)?)?;
        Ok(reg.len())
    }

    pub fn ensemble_members_ok(manifest: &EnsembleManifest) -> usize {
        manifest.members.iter().filter(|m| m.status == MemberStatus::Ok).count()
    }
}

pub fn labels_of(ds: &Dataset, i: usize) -> Vec<Option<bool>> {
    ds.records[i].labels.iter().map(|l| l.as_bool()).collect()
}

/// Test-split accuracy and sparsity per target.
pub fn evaluate_head(head: &HeadModel, ds: &Dataset, fm: &FeatureMatrix) -> Result<Vec<TargetEval>> {
    let test = ds.indices_in(Split::Test);
    let rows = Pipeline::rows_for(ds, fm, &test)?;
    head.targets
        .iter()
        .enumerate()
        .map(|(t, th)| {
            let (mut seen, mut correct, mut positive) = (0usize, 0usize, 0usize);
            for (&i, fv) in test.iter().zip(&rows) {
                let p = head.predict(fv, t)?;
                positive += usize::from(p >= 0.5);
                if let Some(y) = ds.records[i].labels[t].as_bool() {
                    seen += 1;
                    correct += usize::from((p >= 0.5) == y);
                }
            }
            Ok(TargetEval {
                name: th.name.clone(),
                skipped: th.skipped.clone(),
                test_accuracy: (seen > 0).then(|| correct as f64 / seen as f64),
                nonzero_weights: th.nonzero(),
                predicted_positive: positive,
            })
        })
        .collect()
}

fn retry<T>(attempts: usize, mut f: impl FnMut() -> Result<T>) -> Result<T> {
    let mut n = 1;
    loop {
        match f() {
            Err(e) if e.is_retryable() && n < attempts => {
                log::warn!("attempt {n}/{attempts} failed: {e}; retrying");
                std::thread::sleep(std::time::Duration::from_millis(250 << n.min(4)));
                n += 1;
            }
            r => return r,
        }
    }
}

//! On-disk layout of a pipeline store and the artifacts shared by the CLI and
//! the HTTP service.
//!
//! ```text
//! <root>/config.json                 effective pipeline config
//! <root>/dataset/                    records.bin, manifest.json, splits.json
//! <root>/dataset/ground_truth.*      synthetic runs only
//! <root>/dataset/planted_targets.bin synthetic runs only
//! <root>/classifier/                 classifier weights + meta
//! <root>/targets/targets.bin         transcoder targets, one row per record
//! <root>/transcoders/                ensemble.json + tcNNN.bin
//! <root>/registry/                   pattern registry
//! <root>/thresholds.json
//! <root>/features/                   features.json + features.bin
//! <root>/head.json
//! <root>/stages/<stage>.json         stage manifests
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featenc::{FeatureMatrix, ThresholdMode};
use crate::interphead::{AttributionReport, HeadModel};
use crate::patterns::{PatternId, Registry};
use crate::util::{sha256_hex, write_atomic};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreLayout {
    pub root: PathBuf,
}

impl StoreLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        StoreLayout { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }
    pub fn splits(&self) -> PathBuf {
        self.dataset().join("splits.json")
    }
    pub fn planted_targets(&self) -> PathBuf {
        self.dataset().join("planted_targets.bin")
    }
    pub fn classifier(&self) -> PathBuf {
        self.root.join("classifier")
    }
    pub fn targets(&self) -> PathBuf {
        self.root.join("targets").join("targets.bin")
    }
    pub fn transcoders(&self) -> PathBuf {
        self.root.join("transcoders")
    }
    pub fn registry(&self) -> PathBuf {
        self.root.join("registry")
    }
    pub fn discovery_report(&self) -> PathBuf {
        self.root.join("discovery.json")
    }
    pub fn thresholds(&self) -> PathBuf {
        self.root.join("thresholds.json")
    }
    pub fn features(&self) -> PathBuf {
        self.root.join("features")
    }
    pub fn head(&self) -> PathBuf {
        self.root.join("head.json")
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }
    pub fn stage_manifest(&self, stage: &str) -> PathBuf {
        self.root.join("stages").join(format!("{stage}.json"))
    }
}

/// Fail with a message naming the stage that produces `path` when it is absent.
pub fn require(path: &Path, artifact: &str, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::NotFound(format!(
            "{artifact} not found at {}; run `{stage}` first",
            path.display()
        )))
    }
}

/// SHA-256 of a file, or of a directory's sorted `(relative path, file digest)` list.
pub fn digest_path(path: &Path) -> Result<String> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_file() {
        return Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?));
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut listing = String::new();
    for rel in files {
        let d = sha256_hex(&fs::read(path.join(&rel)).map_err(|e| Error::io(path.join(&rel), e))?);
        listing.push_str(&format!("{rel}\t{d}\n"));
    }
    Ok(sha256_hex(listing.as_bytes()))
}

fn collect_files(base: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        let name = entry.file_name();
        if name.to_string_lossy().starts_with('.') {
            continue;
        }
        if p.is_dir() {
            collect_files(base, &p, out)?;
        } else {
            let rel = p
                .strip_prefix(base)
                .expect("under base")
                .to_string_lossy()
                .replace('\\', "/");
            out.push(rel);
        }
    }
    Ok(())
}

/// Provenance record written by every pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub version: String,
    pub seed: Option<u64>,
    /// Artifact name → SHA-256 of what the stage read.
    pub inputs: BTreeMap<String, String>,
    /// Artifact name → SHA-256 of what the stage wrote.
    pub outputs: BTreeMap<String, String>,
    pub params: serde_json::Value,
}

impl StageManifest {
    pub fn new(stage: &str, seed: Option<u64>, params: serde_json::Value) -> Self {
        StageManifest {
            stage: stage.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            params,
        }
    }

    pub fn input(mut self, name: &str, path: &Path) -> Result<Self> {
        self.inputs.insert(name.to_string(), digest_path(path)?);
        Ok(self)
    }

    pub fn output(mut self, name: &str, path: &Path) -> Result<Self> {
        self.outputs.insert(name.to_string(), digest_path(path)?);
        Ok(self)
    }

    pub fn write(&self, layout: &StoreLayout) -> Result<()> {
        let p = layout.stage_manifest(&self.stage);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_atomic(&p, &serde_json::to_vec_pretty(self)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFile {
    pub mode: ThresholdMode,
    pub thresholds: BTreeMap<PatternId, f64>,
}

impl ThresholdFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(
            &fs::read(path).map_err(|e| Error::io(path, e))?,
        )?)
    }
}

/// Artifacts needed to explain a prediction.
pub struct Explainer {
    pub features: FeatureMatrix,
    pub head: HeadModel,
}

impl Explainer {
    pub fn load(layout: &StoreLayout) -> Result<Self> {
        require(&layout.features().join("features.json"), "feature matrix", "encode")?;
        require(&layout.head(), "head model", "train-head")?;
        Ok(Explainer {
            features: FeatureMatrix::load(&layout.features())?,
            head: HeadModel::load(&layout.head())?,
        })
    }

    /// Attribution for one record and target (name or index), with
    /// descriptions from `registry`. The completeness identity is checked
    /// before the report is returned.
    pub fn explain(&self, record_id: &str, target: &str, registry: Option<&Registry>) -> Result<AttributionReport> {
        let fv = self
            .features
            .find(record_id)
            .ok_or_else(|| Error::NotFound(format!("no encoded features for record {record_id:?}")))?;
        let t = self.head.target_index(target)?;
        let report = self.head.attribute(fv, t, registry)?;
        if report.reconstructed_logit() != report.logit {
            return Err(Error::Numeric(format!(
                "attribution for {record_id} does not sum to its logit"
            )));
        }
        Ok(report)
    }
}

/// Canonical JSON rendering of a report, shared by the CLI and the service.
pub fn render_report(report: &AttributionReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

//! Sparse interpretable feature vectors over accepted patterns.
//!
//! A record's pattern activation is the mean of its member neurons' code
//! values across the ensemble. Activations at or below the pattern's τ75 are
//! dropped, the largest `k_active` survivors are kept, and the result is
//! L2-normalized.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedstore::{Dataset, EmbeddingRecord, Split};
use crate::error::{Error, Result};
use crate::patterns::{NeuronRef, PatternId, PatternRecord, Registry};
use crate::transcoder::{Ensemble, SparseCode};
use crate::util::write_atomic;

pub const DEFAULT_K_ACTIVE: usize = 30;
/// Below this many positive training activations a pattern's threshold is 0.
pub const MIN_POSITIVES: usize = 20;
pub const THRESHOLD_PERCENTILE: f64 = 75.0;

/// Nearest-rank percentile: the `ceil(p/100 · n)`-th smallest value (1-based).
pub fn percentile_nearest_rank(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("percentile of an empty set".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("percentile {p} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    Ok(v[rank.clamp(1, v.len()) - 1])
}

/// Which training activations the per-pattern percentile ranges over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Every training record, zeros included. Patterns that fire on fewer than
    /// a quarter of records get τ = 0; frequent ones keep their strongest quarter.
    #[default]
    All,
    /// Strictly positive activations only: drops the weakest three quarters of
    /// every pattern's firings.
    Positive,
}

/// Per-pattern τ75 over `activations` (one entry per training record); 0 with
/// fewer than [`MIN_POSITIVES`] positive entries.
pub fn pattern_threshold(activations: &[f64], mode: ThresholdMode) -> f64 {
    let pos: Vec<f64> = activations.iter().copied().filter(|&a| a > 0.0).collect();
    if pos.len() < MIN_POSITIVES {
        return 0.0;
    }
    let pool = match mode {
        ThresholdMode::All => activations,
        ThresholdMode::Positive => &pos,
    };
    percentile_nearest_rank(pool, THRESHOLD_PERCENTILE).expect("non-empty, valid p")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub record_id: String,
    /// `(pattern_id, value)` sorted by pattern_id; values are positive.
    pub entries: Vec<(PatternId, f64)>,
    /// True when the entries were L2-normalized (i.e. non-empty).
    pub normalized: bool,
}

impl FeatureVector {
    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, pattern: PatternId) -> f64 {
        self.entries
            .binary_search_by_key(&pattern, |e| e.0)
            .map_or(0.0, |i| self.entries[i].1)
    }
}

/// Threshold, select and normalize one record's pattern activations.
/// `ids`, `acts` and `taus` are aligned. Values `≤ τ` are dropped; among the
/// rest the `k` largest are kept, ties to the lower pattern id.
pub fn sparsify(ids: &[PatternId], acts: &[f64], taus: &[f64], k: usize) -> (Vec<(PatternId, f64)>, bool) {
    debug_assert!(ids.len() == acts.len() && acts.len() == taus.len());
    let mut kept: Vec<(PatternId, f64)> = ids
        .iter()
        .zip(acts)
        .zip(taus)
        .filter(|((_, &a), &t)| a > t && a > 0.0)
        .map(|((&id, &a), _)| (id, a))
        .collect();
    if kept.len() > k {
        kept.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        kept.truncate(k);
    }
    kept.sort_by_key(|e| e.0);
    let n = kept.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt();
    if kept.is_empty() || n == 0.0 {
        return (Vec::new(), false);
    }
    kept.iter_mut().for_each(|e| e.1 /= n);
    (kept, true)
}

/// Accepted patterns' member lists in ascending id order.
#[derive(Debug, Clone)]
pub struct PatternSet {
    pub ids: Vec<PatternId>,
    pub members: Vec<Vec<NeuronRef>>,
}

impl PatternSet {
    pub fn accepted(registry: &Registry) -> Result<Self> {
        Self::from_patterns(registry.accepted().into_iter())
    }

    pub fn from_patterns<'a>(patterns: impl Iterator<Item = &'a PatternRecord>) -> Result<Self> {
        let mut list: Vec<&PatternRecord> = patterns.collect();
        if list.is_empty() {
            return Err(Error::Empty("no accepted patterns".into()));
        }
        list.sort_by_key(|p| p.pattern_id);
        Ok(PatternSet {
            ids: list.iter().map(|p| p.pattern_id).collect(),
            members: list.iter().map(|p| p.members.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn check(&self, ens: &Ensemble) -> Result<()> {
        for m in self.members.iter().flatten() {
            let model = ens
                .member(m.transcoder)
                .ok_or_else(|| Error::NotFound(format!("transcoder {} for neuron {m}", m.transcoder)))?;
            if m.neuron >= model.latent {
                return Err(Error::NotFound(format!("neuron {m} out of range")));
            }
        }
        Ok(())
    }

    /// Mean member code value per pattern for one input.
    pub fn activations(&self, ens: &Ensemble, x: &[f64]) -> Result<Vec<f64>> {
        let codes: Vec<Option<SparseCode>> = ens
            .members
            .iter()
            .map(|m| m.as_ref().map(|m| m.encode(x)).transpose())
            .collect::<Result<_>>()?;
        Ok(self
            .members
            .iter()
            .map(|ms| {
                let sum: f64 = ms
                    .iter()
                    .map(|n| codes[n.transcoder].as_ref().map_or(0.0, |c| c.get(n.neuron)))
                    .sum();
                sum / ms.len() as f64
            })
            .collect())
    }
}

/// τ75 per accepted pattern over the train split.
pub fn compute_pattern_thresholds(
    registry: &Registry,
    ens: &Ensemble,
    ds: &Dataset,
    mode: ThresholdMode,
) -> Result<BTreeMap<PatternId, f64>> {
    let set = PatternSet::accepted(registry)?;
    set.check(ens)?;
    let train = ds.indices_in(Split::Train);
    if train.is_empty() {
        return Err(Error::Empty("thresholds need a non-empty train split".into()));
    }
    let rows: Vec<Vec<f64>> = train
        .par_iter()
        .map(|&i| set.activations(ens, &ds.records[i].joint_embedding()))
        .collect::<Result<_>>()?;
    Ok(set
        .ids
        .iter()
        .enumerate()
        .map(|(j, &id)| {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            (id, pattern_threshold(&col, mode))
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct FeatureEncoder {
    pub patterns: PatternSet,
    pub taus: Vec<f64>,
    pub k_active: usize,
}

impl FeatureEncoder {
    pub fn new(patterns: PatternSet, thresholds: &BTreeMap<PatternId, f64>, k_active: usize) -> Result<Self> {
        if k_active == 0 {
            return Err(Error::InvalidArgument("k_active must be positive".into()));
        }
        let taus = patterns
            .ids
            .iter()
            .map(|id| {
                thresholds
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::NotFound(format!("threshold for pattern {id}")))
            })
            .collect::<Result<_>>()?;
        Ok(FeatureEncoder {
            patterns,
            taus,
            k_active,
        })
    }

    pub fn encode(&self, ens: &Ensemble, record: &EmbeddingRecord) -> Result<FeatureVector> {
        let acts = self.patterns.activations(ens, &record.joint_embedding())?;
        let (entries, normalized) = sparsify(&self.patterns.ids, &acts, &self.taus, self.k_active);
        Ok(FeatureVector {
            record_id: record.record_id.clone(),
            entries,
            normalized,
        })
    }

    /// Encode every record of `ds`, in dataset order.
    pub fn encode_dataset(&self, ens: &Ensemble, ds: &Dataset) -> Result<FeatureMatrix> {
        self.patterns.check(ens)?;
        let rows = ds
            .records
            .par_iter()
            .map(|r| self.encode(ens, r))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureMatrix {
            pattern_ids: self.patterns.ids.clone(),
            thresholds: self.taus.clone(),
            k_active: self.k_active,
            rows,
        })
    }
}

/// Encode a single record against a registry's accepted patterns.
pub fn encode(
    record: &EmbeddingRecord,
    ens: &Ensemble,
    registry: &Registry,
    thresholds: &BTreeMap<PatternId, f64>,
    k_active: usize,
) -> Result<FeatureVector> {
    FeatureEncoder::new(PatternSet::accepted(registry)?, thresholds, k_active)?.encode(ens, record)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    /// Column order.
    pub pattern_ids: Vec<PatternId>,
    pub thresholds: Vec<f64>,
    pub k_active: usize,
    pub rows: Vec<FeatureVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureHeader {
    version: u32,
    k_active: usize,
    pattern_ids: Vec<PatternId>,
    thresholds: Vec<f64>,
    record_ids: Vec<String>,
    normalized: Vec<bool>,
    nnz: usize,
}

const FEATURE_MAGIC: &[u8; 8] = b"PLFEATS\0";
const FEATURE_VERSION: u32 = 1;
const TRIPLET_BYTES: usize = 16;

impl FeatureMatrix {
    pub fn find(&self, record_id: &str) -> Option<&FeatureVector> {
        self.rows.iter().find(|r| r.record_id == record_id)
    }

    /// Dense row in column order.
    pub fn dense_row(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.pattern_ids.len()];
        for &(id, v) in &self.rows[i].entries {
            let col = self.pattern_ids.binary_search(&id).expect("entries use known ids");
            out[col] = v;
        }
        out
    }

    /// Writes `features.json` (header) and `features.bin`: magic, then
    /// `(record index u32, column u32, value f64)` little-endian triplets.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let nnz: usize = self.rows.iter().map(|r| r.entries.len()).sum();
        let mut bytes = Vec::with_capacity(8 + nnz * TRIPLET_BYTES);
        bytes.extend_from_slice(FEATURE_MAGIC);
        for (ri, row) in self.rows.iter().enumerate() {
            for &(id, v) in &row.entries {
                let col = self
                    .pattern_ids
                    .binary_search(&id)
                    .map_err(|_| Error::Format(format!("row {ri} uses unknown pattern {id}")))?;
                bytes.extend_from_slice(&(ri as u32).to_le_bytes());
                bytes.extend_from_slice(&(col as u32).to_le_bytes());
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = FeatureHeader {
            version: FEATURE_VERSION,
            k_active: self.k_active,
            pattern_ids: self.pattern_ids.clone(),
            thresholds: self.thresholds.clone(),
            record_ids: self.rows.iter().map(|r| r.record_id.clone()).collect(),
            normalized: self.rows.iter().map(|r| r.normalized).collect(),
            nnz,
        };
        write_atomic(&dir.join("features.bin"), &bytes)?;
        write_atomic(&dir.join("features.json"), &serde_json::to_vec_pretty(&header)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let hp = dir.join("features.json");
        let header: FeatureHeader = serde_json::from_slice(&fs::read(&hp).map_err(|e| Error::io(&hp, e))?)?;
        if header.version != FEATURE_VERSION {
            return Err(Error::Format(format!("unsupported feature version {}", header.version)));
        }
        if header.thresholds.len() != header.pattern_ids.len() || header.normalized.len() != header.record_ids.len() {
            return Err(Error::Format("feature header arrays disagree in length".into()));
        }
        let bp = dir.join("features.bin");
        let bytes = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
        if bytes.len() < 8 || &bytes[..8] != FEATURE_MAGIC {
            return Err(Error::Format("features.bin: bad magic".into()));
        }
        let body = &bytes[8..];
        if body.len() != header.nnz * TRIPLET_BYTES {
            return Err(Error::Format(format!(
                "features.bin holds {} bytes of triplets, header says {} entries",
                body.len(),
                header.nnz
            )));
        }
        let mut rows: Vec<FeatureVector> = header
            .record_ids
            .iter()
            .zip(&header.normalized)
            .map(|(id, &n)| FeatureVector {
                record_id: id.clone(),
                entries: Vec::new(),
                normalized: n,
            })
            .collect();
        for t in body.chunks_exact(TRIPLET_BYTES) {
            let ri = u32::from_le_bytes(t[0..4].try_into().unwrap()) as usize;
            let col = u32::from_le_bytes(t[4..8].try_into().unwrap()) as usize;
            let v = f64::from_le_bytes(t[8..16].try_into().unwrap());
            let (Some(row), Some(&id)) = (rows.get_mut(ri), header.pattern_ids.get(col)) else {
                return Err(Error::Format(format!("triplet ({ri}, {col}) out of range")));
            };
            row.entries.push((id, v));
        }
        for r in &mut rows {
            if r.entries.windows(2).any(|w| w[0].0 >= w[1].0) {
                return Err(Error::Format(format!("row {} is not sorted by pattern", r.record_id)));
            }
        }
        Ok(FeatureMatrix {
            pattern_ids: header.pattern_ids,
            thresholds: header.thresholds,
            k_active: header.k_active,
            rows,
        })
    }
}

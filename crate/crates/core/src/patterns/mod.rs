//! Pattern discovery and curation.
//!
//! Candidate neurons from every ensemble member are probed on a sample of
//! training records, filtered by activation frequency and gallery text
//! consistency, clustered across members by decoder direction, annotated, and
//! finally accepted or rejected through an audited registry.

pub mod annotate;
pub mod curation;
pub mod registry;
pub mod stats;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedstore::Dataset;
use crate::error::{Error, Result};
use crate::transcoder::Ensemble;

pub use annotate::{annotate_pattern, verify_annotation, AnnotationClient, MockClient};
pub use curation::{cluster_duplicates, consistency_score, filter_frequency, Cluster};
pub use registry::{record_curation_verdict, replay_statuses, AuditEntry, Registry, Verdict, AUTO_REVIEWER};
pub use stats::{build_gallery, compute_activation_stats, draw_probe, NeuronStats, ProbeActivations};

pub type PatternId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronRef {
    #[serde(rename = "transcoder_id")]
    pub transcoder: usize,
    #[serde(rename = "neuron_index")]
    pub neuron: usize,
}

impl fmt::Display for NeuronRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tc{:03}:{}", self.transcoder, self.neuron)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Cardiac,
    Pulmonary,
    Pleural,
    Structural,
    Device,
    Artifact,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Cardiac,
        Category::Pulmonary,
        Category::Pleural,
        Category::Structural,
        Category::Device,
        Category::Artifact,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Cardiac => "cardiac",
            Category::Pulmonary => "pulmonary",
            Category::Pleural => "pleural",
            Category::Structural => "structural",
            Category::Device => "device",
            Category::Artifact => "artifact",
        }
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown category {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternStatus {
    Pending,
    Accepted,
    Rejected,
}

impl FromStr for PatternStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pending" => Ok(PatternStatus::Pending),
            "accepted" => Ok(PatternStatus::Accepted),
            "rejected" => Ok(PatternStatus::Rejected),
            _ => Err(Error::InvalidArgument(format!("unknown status {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub record_id: String,
    pub activation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationGallery {
    pub neuron: NeuronRef,
    /// Sorted by activation descending, ties to the lower record_id.
    pub exemplars: Vec<Exemplar>,
    pub frequency: f64,
    pub mean_activation: f64,
    pub max_activation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub description: String,
    pub category: Category,
    /// Fraction of held-out exemplars the verifier affirmed; `None` until verified.
    #[serde(default)]
    pub agreement: Option<f64>,
}

pub const AGREEMENT_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternRecord {
    pub pattern_id: PatternId,
    pub members: Vec<NeuronRef>,
    /// Unit-normalized mean of the members' decoder atoms.
    pub centroid: Vec<f64>,
    pub gallery: ActivationGallery,
    /// Exemplars ranked just below the gallery, reserved for verification.
    #[serde(default)]
    pub holdout: Vec<Exemplar>,
    pub consistency: f64,
    /// Per-pattern activation threshold, set once thresholds are computed.
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub annotation: Option<Annotation>,
    pub status: PatternStatus,
    #[serde(default)]
    pub flagged_for_review: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_error: Option<String>,
}

impl PatternRecord {
    pub fn agreement(&self) -> Option<f64> {
        self.annotation.as_ref().and_then(|a| a.agreement)
    }

    pub fn is_acceptable(&self) -> bool {
        self.agreement().is_some_and(|a| a >= AGREEMENT_THRESHOLD)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscoverConfig {
    pub probe_size: usize,
    pub probe_seed: u64,
    pub gallery_size: usize,
    pub holdout_size: usize,
    pub freq_lo: f64,
    pub freq_hi: f64,
    pub consistency_threshold: f64,
    pub cluster_cos: f64,
}

impl Default for DiscoverConfig {
    fn default() -> Self {
        DiscoverConfig {
            probe_size: 1000,
            probe_seed: 0,
            gallery_size: 10,
            holdout_size: 10,
            freq_lo: 0.001,
            freq_hi: 0.5,
            consistency_threshold: 0.5,
            cluster_cos: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryReport {
    pub candidates: usize,
    pub passed_frequency: usize,
    pub passed_consistency: usize,
    pub patterns: usize,
}

/// Probe → frequency filter → galleries → consistency filter → clustering.
/// Returns pending patterns numbered from 0 in clustering order.
pub fn discover(ens: &Ensemble, ds: &Dataset, cfg: &DiscoverConfig) -> Result<(Vec<PatternRecord>, DiscoveryReport)> {
    let probe = draw_probe(ds, cfg.probe_size, cfg.probe_seed)?;
    let (acts, stats) = compute_activation_stats(ens, ds, &probe)?;
    let pass_freq = filter_frequency(&stats, cfg.freq_lo, cfg.freq_hi);
    let text: HashMap<&str, Vec<f64>> = probe
        .iter()
        .map(|&i| (ds.records[i].record_id.as_str(), ds.records[i].text_f64()))
        .collect();

    let mut passing = Vec::new();
    let mut n_freq = 0;
    for (s, ok) in stats.iter().zip(&pass_freq) {
        if !ok {
            continue;
        }
        n_freq += 1;
        let gallery = build_gallery(&acts, s.neuron, cfg.gallery_size);
        let embeds: Vec<&[f64]> = gallery
            .exemplars
            .iter()
            .map(|e| text[e.record_id.as_str()].as_slice())
            .collect();
        match consistency_score(&embeds) {
            Ok(c) if c >= cfg.consistency_threshold => passing.push((s.clone(), gallery, c)),
            _ => {}
        }
    }
    let n_cons = passing.len();
    let keyed: Vec<(NeuronRef, f64)> = passing.iter().map(|(s, _, _)| (s.neuron, s.max)).collect();
    let clusters = cluster_duplicates(&keyed, ens, cfg.cluster_cos)?;
    let by_neuron: HashMap<NeuronRef, usize> = passing.iter().enumerate().map(|(i, (s, _, _))| (s.neuron, i)).collect();
    let patterns: Vec<PatternRecord> = clusters
        .into_iter()
        .enumerate()
        .map(|(pid, c)| {
            let rep = c.members[0];
            let (_, gallery, consistency) = &passing[by_neuron[&rep]];
            let holdout = stats::ranked_exemplars(&acts, rep, cfg.gallery_size, cfg.holdout_size);
            PatternRecord {
                pattern_id: pid as PatternId,
                members: c.members,
                centroid: c.centroid,
                gallery: gallery.clone(),
                holdout,
                consistency: *consistency,
                threshold: None,
                annotation: None,
                status: PatternStatus::Pending,
                flagged_for_review: false,
                last_error: None,
            }
        })
        .collect();
    let report = DiscoveryReport {
        candidates: stats.len(),
        passed_frequency: n_freq,
        passed_consistency: n_cons,
        patterns: patterns.len(),
    };
    Ok((patterns, report))
}

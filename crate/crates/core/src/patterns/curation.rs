//! Curation filters and cross-member clustering.

use super::stats::NeuronStats;
use super::NeuronRef;
use crate::error::{Error, Result};
use crate::transcoder::Ensemble;
use crate::util::{cosine, dot, normalize};

/// Inclusive frequency band check per neuron.
pub fn filter_frequency(stats: &[NeuronStats], lo: f64, hi: f64) -> Vec<bool> {
    stats.iter().map(|s| lo <= s.frequency && s.frequency <= hi).collect()
}

/// Mean pairwise cosine similarity of exemplar text embeddings.
pub fn consistency_score(embeddings: &[&[f64]]) -> Result<f64> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "consistency needs at least 2 exemplars, gallery has {n}"
        )));
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += cosine(embeddings[i], embeddings[j]);
        }
    }
    Ok(sum / (n * (n - 1) / 2) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    /// First member is the founding (highest max-activation) neuron.
    pub members: Vec<NeuronRef>,
    pub centroid: Vec<f64>,
}

/// Greedy clustering by decoder direction. Neurons are visited by descending
/// max activation (ties by neuron ref); each joins the first cluster whose
/// centroid has cosine ≥ `cos_threshold` with its decoder atom, or founds a
/// new one. Centroids are the unit-normalized mean of member atoms.
pub fn cluster_duplicates(candidates: &[(NeuronRef, f64)], ens: &Ensemble, cos_threshold: f64) -> Result<Vec<Cluster>> {
    let mut order: Vec<(NeuronRef, f64)> = candidates.to_vec();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut clusters: Vec<Cluster> = Vec::new();
    let mut sums: Vec<Vec<f64>> = Vec::new();
    for (n, _) in order {
        let model = ens
            .member(n.transcoder)
            .ok_or_else(|| Error::NotFound(format!("transcoder {} is not a healthy member", n.transcoder)))?;
        if n.neuron >= model.latent {
            return Err(Error::NotFound(format!("neuron {n} out of range")));
        }
        let atom = model.decoder_atom(n.neuron);
        let mut unit = atom.to_vec();
        normalize(&mut unit);
        let hit = clusters.iter().position(|c| dot(&c.centroid, &unit) >= cos_threshold);
        match hit {
            Some(ci) => {
                clusters[ci].members.push(n);
                sums[ci].iter_mut().zip(atom).for_each(|(s, a)| *s += a);
                let mut c = sums[ci].clone();
                normalize(&mut c);
                clusters[ci].centroid = c;
            }
            None => {
                sums.push(atom.to_vec());
                clusters.push(Cluster {
                    members: vec![n],
                    centroid: unit,
                });
            }
        }
    }
    Ok(clusters)
}

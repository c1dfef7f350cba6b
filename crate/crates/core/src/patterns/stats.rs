//! Probe-set activation statistics and galleries.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ActivationGallery, Exemplar, NeuronRef};
use crate::embedstore::{Dataset, Split};
use crate::error::{Error, Result};
use crate::transcoder::Ensemble;
use crate::util::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronStats {
    pub neuron: NeuronRef,
    /// Fraction of probe records with activation > 0.
    pub frequency: f64,
    /// Mean over the nonzero activations (0 when the neuron never fires).
    pub mean_nonzero: f64,
    pub max: f64,
}

/// Per-neuron postings of positive activations over the probe set.
#[derive(Debug, Clone)]
pub struct ProbeActivations {
    pub record_ids: Vec<String>,
    /// `postings[member][latent]` = `(probe position, activation)` pairs. `None` for failed members.
    pub postings: Vec<Option<Vec<Vec<(u32, f64)>>>>,
}

impl ProbeActivations {
    pub fn probe_len(&self) -> usize {
        self.record_ids.len()
    }

    pub fn postings(&self, n: NeuronRef) -> &[(u32, f64)] {
        self.postings
            .get(n.transcoder)
            .and_then(|m| m.as_ref())
            .and_then(|m| m.get(n.neuron))
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }
}

/// Sorted sample of up to `size` train-split record indices.
pub fn draw_probe(ds: &Dataset, size: usize, seed: u64) -> Result<Vec<usize>> {
    let train = ds.indices_in(Split::Train);
    if train.is_empty() || size == 0 {
        return Err(Error::Empty("probe needs a non-empty train split".into()));
    }
    let n = size.min(train.len());
    let mut rng = rng_for(seed, "patterns/probe", 0);
    let mut picked: Vec<usize> = sample(&mut rng, train.len(), n).into_iter().map(|i| train[i]).collect();
    picked.sort_unstable();
    Ok(picked)
}

pub fn compute_activation_stats(
    ens: &Ensemble,
    ds: &Dataset,
    probe: &[usize],
) -> Result<(ProbeActivations, Vec<NeuronStats>)> {
    if probe.is_empty() {
        return Err(Error::Empty("empty probe set".into()));
    }
    if let Some(&bad) = probe.iter().find(|&&i| ds.records[i].split != Split::Train) {
        return Err(Error::InvalidArgument(format!(
            "probe record {} is not in the train split",
            ds.records[bad].record_id
        )));
    }
    let inputs: Vec<Vec<f64>> = probe.iter().map(|&i| ds.records[i].joint_embedding()).collect();
    let mut postings = Vec::with_capacity(ens.members.len());
    let mut stats = Vec::new();
    for (t, member) in ens.members.iter().enumerate() {
        let Some(model) = member else {
            postings.push(None);
            continue;
        };
        let codes = inputs.par_iter().map(|x| model.encode(x)).collect::<Result<Vec<_>>>()?;
        let mut lists: Vec<Vec<(u32, f64)>> = vec![Vec::new(); model.latent];
        for (pos, code) in codes.iter().enumerate() {
            for (&i, &v) in code.indices.iter().zip(&code.values) {
                lists[i].push((pos as u32, v));
            }
        }
        for (neuron, list) in lists.iter().enumerate() {
            let count = list.len();
            let sum: f64 = list.iter().map(|p| p.1).sum();
            let max = list.iter().map(|p| p.1).fold(0.0, f64::max);
            stats.push(NeuronStats {
                neuron: NeuronRef { transcoder: t, neuron },
                frequency: count as f64 / probe.len() as f64,
                mean_nonzero: if count == 0 { 0.0 } else { sum / count as f64 },
                max,
            });
        }
        postings.push(Some(lists));
    }
    let record_ids = probe.iter().map(|&i| ds.records[i].record_id.clone()).collect();
    Ok((ProbeActivations { record_ids, postings }, stats))
}

fn ranked(acts: &ProbeActivations, neuron: NeuronRef) -> Vec<Exemplar> {
    let mut list: Vec<Exemplar> = acts
        .postings(neuron)
        .iter()
        .map(|&(pos, v)| Exemplar {
            record_id: acts.record_ids[pos as usize].clone(),
            activation: v,
        })
        .collect();
    list.sort_by(|a, b| {
        b.activation
            .total_cmp(&a.activation)
            .then_with(|| a.record_id.cmp(&b.record_id))
    });
    list
}

/// Exemplars at ranks `skip .. skip + n` by activation.
pub fn ranked_exemplars(acts: &ProbeActivations, neuron: NeuronRef, skip: usize, n: usize) -> Vec<Exemplar> {
    ranked(acts, neuron).into_iter().skip(skip).take(n).collect()
}

pub fn build_gallery(acts: &ProbeActivations, neuron: NeuronRef, top_n: usize) -> ActivationGallery {
    let all = ranked(acts, neuron);
    let count = all.len();
    let sum: f64 = all.iter().map(|e| e.activation).sum();
    ActivationGallery {
        neuron,
        frequency: count as f64 / acts.probe_len().max(1) as f64,
        mean_activation: if count == 0 { 0.0 } else { sum / count as f64 },
        max_activation: all.first().map_or(0.0, |e| e.activation),
        exemplars: all.into_iter().take(top_n).collect(),
    }
}

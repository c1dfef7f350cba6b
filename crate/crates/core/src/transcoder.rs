//! Top-K sparse transcoders and ensembles of them.
//!
//! A transcoder maps a joint embedding `x` (length `d_in`) to a classifier-side
//! representation (length `d_out`) through a wide sparse code:
//!
//! ```text
//! codes = top_k(relu(W_enc x + b_enc), k)
//! recon = W_decᵀ codes + b_dec
//! ```
//!
//! Storage is row-per-latent: row `i` of `w_enc` is latent `i`'s encoder
//! direction and row `i` of `w_dec` is its decoder atom.

use std::cmp::Ordering;
use std::ops::Range;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tensorfile::{Tensor, TensorFile};
use crate::util::{derive_seed, normalize, rng_for, sha256_hex};

pub const ENSEMBLE_MANIFEST: &str = "ensemble.json";

fn topk_order(v: &[f64], a: usize, b: usize) -> Ordering {
    v[b].total_cmp(&v[a]).then(a.cmp(&b))
}

/// Indices of the `k` largest entries (ties toward the lower index), ascending.
pub fn top_k_indices(v: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(Error::InvalidArgument(format!(
            "top-k arity {k} out of range 1..={}",
            v.len()
        )));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    if k < v.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| topk_order(v, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable();
    Ok(idx)
}

/// Zero every entry outside the `k` largest.
pub fn top_k(v: &[f64], k: usize) -> Result<Vec<f64>> {
    let keep = top_k_indices(v, k)?;
    let mut out = vec![0.0; v.len()];
    for i in keep {
        out[i] = v[i];
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    /// Plain gradient descent; with a full batch this is the monotone sanity mode.
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TranscoderConfig {
    pub latent: usize,
    pub k: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub subset_fraction: f64,
    pub optimizer: OptimizerKind,
}

impl Default for TranscoderConfig {
    fn default() -> Self {
        TranscoderConfig {
            latent: 512,
            k: 32,
            lr: 3e-4,
            epochs: 50,
            batch_size: 256,
            subset_fraction: 0.95,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TranscoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.latent {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= k ({}) <= latent ({})",
                self.k, self.latent
            )));
        }
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "lr, epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(Error::InvalidArgument("subset_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Sparse latent code: active latent indices (ascending) and their positive values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseCode {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseCode {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn to_dense(&self, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; m];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i] = v;
        }
        out
    }

    pub fn get(&self, latent: usize) -> f64 {
        self.indices
            .binary_search(&latent)
            .map(|p| self.values[p])
            .unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranscoderModel {
    pub d_in: usize,
    pub latent: usize,
    pub d_out: usize,
    pub k: usize,
    pub params: Vec<f64>,
}

impl TranscoderModel {
    pub fn zeros(d_in: usize, latent: usize, d_out: usize, k: usize) -> Result<Self> {
        if k == 0 || k > latent || d_in == 0 || d_out == 0 {
            return Err(Error::InvalidArgument(format!(
                "invalid transcoder shape d_in={d_in} latent={latent} d_out={d_out} k={k}"
            )));
        }
        let n = latent * d_in + latent + latent * d_out + d_out;
        Ok(TranscoderModel {
            d_in,
            latent,
            d_out,
            k,
            params: vec![0.0; n],
        })
    }

    /// Gaussian encoder scaled by 1/√d_in; decoder rows start as the unit-normalized
    /// leading slice of the matching encoder row; zero biases.
    pub fn init(d_in: usize, latent: usize, d_out: usize, k: usize, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(d_in, latent, d_out, k)?;
        let mut rng = rng_for(seed, "tc/init", 0);
        let scale = 1.0 / (d_in as f64).sqrt();
        let we = m.w_enc();
        for p in &mut m.params[we] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *p = scale * z;
        }
        for i in 0..latent {
            let mut row: Vec<f64> = (0..d_out)
                .map(|j| {
                    if j < d_in {
                        m.params[i * d_in + j]
                    } else {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        scale * z
                    }
                })
                .collect();
            normalize(&mut row);
            let start = m.w_dec().start + i * d_out;
            m.params[start..start + d_out].copy_from_slice(&row);
        }
        Ok(m)
    }

    pub fn w_enc(&self) -> Range<usize> {
        0..self.latent * self.d_in
    }
    pub fn b_enc(&self) -> Range<usize> {
        let s = self.w_enc().end;
        s..s + self.latent
    }
    pub fn w_dec(&self) -> Range<usize> {
        let s = self.b_enc().end;
        s..s + self.latent * self.d_out
    }
    pub fn b_dec(&self) -> Range<usize> {
        let s = self.w_dec().end;
        s..s + self.d_out
    }

    pub fn encoder_row(&self, i: usize) -> &[f64] {
        &self.params[i * self.d_in..(i + 1) * self.d_in]
    }

    pub fn decoder_atom(&self, i: usize) -> &[f64] {
        let s = self.w_dec().start + i * self.d_out;
        &self.params[s..s + self.d_out]
    }

    pub fn decoder_bias(&self) -> &[f64] {
        &self.params[self.b_dec()]
    }

    /// Post-ReLU pre-Top-K latent activations.
    pub fn pre_activations(&self, x: &[f64]) -> Vec<f64> {
        let be = &self.params[self.b_enc()];
        (0..self.latent)
            .map(|i| {
                let row = self.encoder_row(i);
                let a = be[i] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                a.max(0.0)
            })
            .collect()
    }

    pub fn encode(&self, x: &[f64]) -> Result<SparseCode> {
        if x.len() != self.d_in {
            return Err(Error::Dimension {
                context: "transcoder input",
                expected: self.d_in,
                actual: x.len(),
            });
        }
        let pre = self.pre_activations(x);
        let keep = top_k_indices(&pre, self.k)?;
        let mut code = SparseCode::default();
        for i in keep {
            if pre[i] > 0.0 {
                code.indices.push(i);
                code.values.push(pre[i]);
            }
        }
        Ok(code)
    }

    pub fn decode(&self, code: &SparseCode) -> Vec<f64> {
        let mut out = self.decoder_bias().to_vec();
        for (&i, &c) in code.indices.iter().zip(&code.values) {
            out.iter_mut().zip(self.decoder_atom(i)).for_each(|(o, w)| *o += c * w);
        }
        out
    }

    /// `(codes, recon)` for one input.
    pub fn forward(&self, x: &[f64]) -> Result<(SparseCode, Vec<f64>)> {
        let code = self.encode(x)?;
        let recon = self.decode(&code);
        Ok((code, recon))
    }

    /// Accumulate the gradient of `scale · ‖recon − y‖²` for one sample; returns the squared error.
    fn backprop(&self, x: &[f64], y: &[f64], scale: f64, g: &mut [f64]) -> f64 {
        let code = self.encode(x).expect("dimensions checked by caller");
        let recon = self.decode(&code);
        let err: Vec<f64> = recon.iter().zip(y).map(|(r, t)| r - t).collect();
        let sq: f64 = err.iter().map(|e| e * e).sum();
        let gout: Vec<f64> = err.iter().map(|e| 2.0 * scale * e).collect();
        let (wd, bd, be) = (self.w_dec().start, self.b_dec().start, self.b_enc().start);
        g[bd..bd + self.d_out].iter_mut().zip(&gout).for_each(|(a, b)| *a += b);
        for (&i, &c) in code.indices.iter().zip(&code.values) {
            let atom = self.decoder_atom(i);
            let dc: f64 = atom.iter().zip(&gout).map(|(w, go)| w * go).sum();
            let grow = &mut g[wd + i * self.d_out..wd + (i + 1) * self.d_out];
            grow.iter_mut().zip(&gout).for_each(|(a, go)| *a += c * go);
            // c > 0, so the ReLU passes the gradient through.
            g[be + i] += dc;
            let erow = &mut g[i * self.d_in..(i + 1) * self.d_in];
            erow.iter_mut().zip(x).for_each(|(a, xv)| *a += dc * xv);
        }
        sq
    }

    /// Mean over samples of ‖recon − target‖² / d_out, and its gradient.
    pub fn loss_and_grad(&self, xs: &[&[f64]], ys: &[&[f64]]) -> (f64, Vec<f64>) {
        let scale = 1.0 / (xs.len() as f64 * self.d_out as f64);
        let n = self.params.len();
        let idx: Vec<usize> = (0..xs.len()).collect();
        let chunk = (xs.len() / 8).max(16);
        let partials: Vec<(f64, Vec<f64>)> = idx
            .par_chunks(chunk)
            .map(|c| {
                let mut g = vec![0.0; n];
                let sq: f64 = c.iter().map(|&i| self.backprop(xs[i], ys[i], scale, &mut g)).sum();
                (sq, g)
            })
            .collect();
        let mut grad = vec![0.0; n];
        let mut sq = 0.0;
        for (s, g) in partials {
            sq += s;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        (sq * scale, grad)
    }

    /// Mean reconstruction loss over a dataset.
    pub fn loss(&self, xs: &[&[f64]], ys: &[&[f64]]) -> f64 {
        let sq: f64 = xs
            .par_iter()
            .zip(ys.par_iter())
            .map(|(x, y)| {
                let (_, r) = self.forward(x).expect("dimensions checked by caller");
                r.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            })
            .collect::<Vec<f64>>()
            .iter()
            .sum();
        sq / (xs.len() as f64 * self.d_out as f64)
    }

    pub fn to_tensors(&self) -> TensorFile {
        let mut tf = TensorFile::default();
        let p = &self.params;
        tf.push(Tensor::from_f64("w_enc", &[self.latent, self.d_in], &p[self.w_enc()]));
        tf.push(Tensor::from_f64("b_enc", &[self.latent], &p[self.b_enc()]));
        tf.push(Tensor::from_f64("w_dec", &[self.latent, self.d_out], &p[self.w_dec()]));
        tf.push(Tensor::from_f64("b_dec", &[self.d_out], &p[self.b_dec()]));
        tf
    }

    pub fn from_tensors(tf: &TensorFile, k: usize) -> Result<Self> {
        let we = tf.get("w_enc")?;
        let wd = tf.get("w_dec")?;
        if we.dims.len() != 2 || wd.dims.len() != 2 {
            return Err(Error::Format("transcoder weights must be matrices".into()));
        }
        let (latent, d_in, d_out) = (we.dims[0], we.dims[1], wd.dims[1]);
        let mut m = Self::zeros(d_in, latent, d_out, k)?;
        for (name, range, dims) in [
            ("w_enc", m.w_enc(), vec![latent, d_in]),
            ("b_enc", m.b_enc(), vec![latent]),
            ("w_dec", m.w_dec(), vec![latent, d_out]),
            ("b_dec", m.b_dec(), vec![d_out]),
        ] {
            let v = tf.expect(name, &dims)?;
            m.params[range].copy_from_slice(&v);
        }
        if m.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Format("non-finite transcoder weight".into()));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
}

fn check_rows(inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<(usize, usize)> {
    if inputs.is_empty() {
        return Err(Error::Empty("no transcoder training rows".into()));
    }
    if inputs.len() != targets.len() {
        return Err(Error::Dimension {
            context: "transcoder inputs vs targets rows",
            expected: inputs.len(),
            actual: targets.len(),
        });
    }
    let (d_in, d_out) = (inputs[0].len(), targets[0].len());
    if let Some(bad) = inputs.iter().find(|r| r.len() != d_in) {
        return Err(Error::Dimension {
            context: "transcoder input row",
            expected: d_in,
            actual: bad.len(),
        });
    }
    if let Some(bad) = targets.iter().find(|r| r.len() != d_out) {
        return Err(Error::Dimension {
            context: "transcoder target row",
            expected: d_out,
            actual: bad.len(),
        });
    }
    Ok((d_in, d_out))
}

/// Train one transcoder on row-aligned `inputs`/`targets`.
pub fn train_transcoder(
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    cfg: &TranscoderConfig,
    seed: u64,
) -> Result<(TranscoderModel, TrainReport)> {
    cfg.validate()?;
    let (d_in, d_out) = check_rows(inputs, targets)?;
    let mut model = TranscoderModel::init(d_in, cfg.latent, d_out, cfg.k, seed)?;
    let mut adam = Adam::new(model.params.len());
    let mut shuffle = rng_for(seed, "tc/shuffle", 0);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let all_x: Vec<&[f64]> = inputs.iter().map(|v| v.as_slice()).collect();
    let all_y: Vec<&[f64]> = targets.iter().map(|v| v.as_slice()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        if cfg.batch_size < order.len() {
            order.shuffle(&mut shuffle);
        }
        let mut sum = 0.0;
        let mut rows = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| all_x[i]).collect();
            let ys: Vec<&[f64]> = batch.iter().map(|&i| all_y[i]).collect();
            let (loss, grad) = model.loss_and_grad(&xs, &ys);
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("transcoder loss diverged in epoch {epoch}")));
            }
            match cfg.optimizer {
                OptimizerKind::Adam => adam.step(&mut model.params, &grad, cfg.lr),
                OptimizerKind::Sgd => model.params.iter_mut().zip(&grad).for_each(|(p, g)| *p -= cfg.lr * g),
            }
            sum += loss * batch.len() as f64;
            rows += batch.len();
        }
        epoch_losses.push(sum / rows as f64);
    }
    let final_loss = model.loss(&all_x, &all_y);
    if !final_loss.is_finite() {
        return Err(Error::Numeric("transcoder final loss is not finite".into()));
    }
    Ok((
        model,
        TrainReport {
            epoch_losses,
            final_loss,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemberStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberEntry {
    pub id: String,
    pub init_seed: u64,
    pub subset_seed: u64,
    pub subset_size: usize,
    pub subset_digest: String,
    pub final_loss: Option<f64>,
    pub status: MemberStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub seed: u64,
    pub n_members: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub config: TranscoderConfig,
    pub members: Vec<MemberEntry>,
}

pub fn member_init_seed(seed: u64, member: usize) -> u64 {
    derive_seed(seed, "tc/member-init", member as u64)
}

pub fn member_subset_seed(seed: u64, member: usize) -> u64 {
    derive_seed(seed, "tc/member-subset", member as u64)
}

/// Sorted row indices of a member's training subset.
pub fn member_subset(n_rows: usize, fraction: f64, subset_seed: u64) -> Vec<usize> {
    let size = ((n_rows as f64 * fraction).round() as usize).clamp(1, n_rows);
    let mut rng = rng_for(subset_seed, "tc/subset", 0);
    let mut idx = sample(&mut rng, n_rows, size).into_vec();
    idx.sort_unstable();
    idx
}

fn subset_digest(idx: &[usize]) -> String {
    let bytes: Vec<u8> = idx.iter().flat_map(|&i| (i as u64).to_le_bytes()).collect();
    sha256_hex(&bytes)
}

/// A loaded ensemble. `members[i]` is `None` when member `i` failed.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub manifest: EnsembleManifest,
    pub members: Vec<Option<TranscoderModel>>,
}

impl Ensemble {
    /// Wrap already-built models as a healthy ensemble. Subset metadata is empty.
    pub fn from_models(models: Vec<TranscoderModel>, seed: u64) -> Result<Self> {
        let first = models
            .first()
            .ok_or_else(|| Error::InvalidArgument("ensemble needs at least one member".into()))?;
        let (d_in, d_out, latent, k) = (first.d_in, first.d_out, first.latent, first.k);
        if models
            .iter()
            .any(|m| (m.d_in, m.d_out, m.latent, m.k) != (d_in, d_out, latent, k))
        {
            return Err(Error::InvalidArgument("ensemble members must share one shape".into()));
        }
        let config = TranscoderConfig {
            latent,
            k,
            ..TranscoderConfig::default()
        };
        let members = (0..models.len())
            .map(|i| MemberEntry {
                id: format!("tc{i:03}"),
                init_seed: member_init_seed(seed, i),
                subset_seed: member_subset_seed(seed, i),
                subset_size: 0,
                subset_digest: String::new(),
                final_loss: None,
                status: MemberStatus::Ok,
                error: None,
            })
            .collect();
        Ok(Ensemble {
            manifest: EnsembleManifest {
                seed,
                n_members: models.len(),
                d_in,
                d_out,
                config,
                members,
            },
            members: models.into_iter().map(Some).collect(),
        })
    }

    pub fn member(&self, i: usize) -> Option<&TranscoderModel> {
        self.members.get(i).and_then(|m| m.as_ref())
    }

    pub fn ok_members(&self) -> impl Iterator<Item = (usize, &TranscoderModel)> {
        self.members
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.as_ref().map(|m| (i, m)))
    }

    /// Every decoder atom of every healthy member.
    pub fn pooled_decoder_atoms(&self) -> Vec<Vec<f64>> {
        self.ok_members()
            .flat_map(|(_, m)| (0..m.latent).map(move |i| m.decoder_atom(i).to_vec()))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (entry, model) in self.manifest.members.iter().zip(&self.members) {
            if let Some(m) = model {
                m.to_tensors().write(&dir.join(format!("{}.bin", entry.id)))?;
            }
        }
        let p = dir.join(ENSEMBLE_MANIFEST);
        std::fs::write(&p, serde_json::to_vec_pretty(&self.manifest)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(ENSEMBLE_MANIFEST);
        let manifest: EnsembleManifest = serde_json::from_slice(&std::fs::read(&p).map_err(|e| Error::io(&p, e))?)?;
        let members = manifest
            .members
            .iter()
            .map(|e| match e.status {
                MemberStatus::Ok => {
                    let tf = TensorFile::read(&dir.join(format!("{}.bin", e.id)))?;
                    TranscoderModel::from_tensors(&tf, manifest.config.k).map(Some)
                }
                MemberStatus::Failed => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Ensemble { manifest, members })
    }
}

/// Train `n_members` transcoders, each on its own seeded subset with its own
/// init seed. A failed member is recorded as failed; the rest proceed.
pub fn train_ensemble(
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    n_members: usize,
    cfg: &TranscoderConfig,
    seed: u64,
) -> Result<Ensemble> {
    if n_members == 0 {
        return Err(Error::InvalidArgument("ensemble needs at least one member".into()));
    }
    cfg.validate()?;
    let (d_in, d_out) = check_rows(inputs, targets)?;
    let results: Vec<(MemberEntry, Option<TranscoderModel>)> = (0..n_members)
        .into_par_iter()
        .map(|i| {
            let init_seed = member_init_seed(seed, i);
            let subset_seed = member_subset_seed(seed, i);
            let subset = member_subset(inputs.len(), cfg.subset_fraction, subset_seed);
            let xs: Vec<Vec<f64>> = subset.iter().map(|&r| inputs[r].clone()).collect();
            let ys: Vec<Vec<f64>> = subset.iter().map(|&r| targets[r].clone()).collect();
            let mut entry = MemberEntry {
                id: format!("tc{i:03}"),
                init_seed,
                subset_seed,
                subset_size: subset.len(),
                subset_digest: subset_digest(&subset),
                final_loss: None,
                status: MemberStatus::Ok,
                error: None,
            };
            match train_transcoder(&xs, &ys, cfg, init_seed) {
                Ok((model, report)) => {
                    entry.final_loss = Some(report.final_loss);
                    log::info!("transcoder {} final loss {:.6}", entry.id, report.final_loss);
                    (entry, Some(model))
                }
                Err(e) => {
                    entry.status = MemberStatus::Failed;
                    entry.error = Some(e.to_string());
                    (entry, None)
                }
            }
        })
        .collect();
    let (entries, members): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(Ensemble {
        manifest: EnsembleManifest {
            seed,
            n_members,
            d_in,
            d_out,
            config: cfg.clone(),
            members: entries,
        },
        members,
    })
}

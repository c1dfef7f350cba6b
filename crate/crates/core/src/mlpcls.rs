//! Base multilabel classifier over image embeddings.
//!
//! Three affine layers `d_in → h1 → h2 → L` with JumpReLU activations and
//! inverted dropout after each hidden layer. The post-activation `h2` output
//! (the penultimate representation) is what transcoders learn to reconstruct.
//!
//! Parameters live in one flat vector so the optimizer and gradient checks can
//! treat the model uniformly.

use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedstore::{Dataset, Split, UnknownLabelPolicy};
use crate::error::{Error, Result};
use crate::optim::{cosine_lr, Adam};
use crate::tensorfile::{Tensor, TensorFile};
use crate::util::{bce_cell, rng_for, sigmoid, Rng};

pub const DEFAULT_THETA: f64 = 0.03;
pub const MODEL_VERSION: u32 = 1;

/// Samples per gradient chunk; chunk gradients are summed in order so results
/// do not depend on the thread count.
const GRAD_CHUNK: usize = 16;

#[inline]
pub fn jump_relu(x: f64, theta: f64) -> f64 {
    if x > theta {
        x
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierShape {
    pub d_in: usize,
    pub h1: usize,
    pub h2: usize,
    pub n_out: usize,
}

impl ClassifierShape {
    pub fn n_params(&self) -> usize {
        self.b3().end
    }
    pub fn w1(&self) -> Range<usize> {
        0..self.h1 * self.d_in
    }
    pub fn b1(&self) -> Range<usize> {
        let s = self.w1().end;
        s..s + self.h1
    }
    pub fn w2(&self) -> Range<usize> {
        let s = self.b1().end;
        s..s + self.h2 * self.h1
    }
    pub fn b2(&self) -> Range<usize> {
        let s = self.w2().end;
        s..s + self.h2
    }
    pub fn w3(&self) -> Range<usize> {
        let s = self.b2().end;
        s..s + self.n_out * self.h2
    }
    pub fn b3(&self) -> Range<usize> {
        let s = self.w3().end;
        s..s + self.n_out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub shape: ClassifierShape,
    pub theta: f64,
    pub dropout: f64,
    pub params: Vec<f64>,
}

/// Per-sample activations kept for backprop.
struct Trace {
    a1: Vec<f64>,
    d1: Vec<f64>,
    a2: Vec<f64>,
    d2: Vec<f64>,
    mask1: Vec<f64>,
    mask2: Vec<f64>,
    logits: Vec<f64>,
}

impl ClassifierModel {
    pub fn zeros(shape: ClassifierShape, theta: f64, dropout: f64) -> Result<Self> {
        if !theta.is_finite() || theta < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "JumpReLU threshold {theta} must be finite and >= 0"
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidArgument(format!("dropout {dropout} must be in [0, 1)")));
        }
        if [shape.d_in, shape.h1, shape.h2, shape.n_out].contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        Ok(ClassifierModel {
            shape,
            theta,
            dropout,
            params: vec![0.0; shape.n_params()],
        })
    }

    /// He-normal weights, zero biases.
    pub fn init(shape: ClassifierShape, theta: f64, dropout: f64, rng: &mut Rng) -> Result<Self> {
        let mut m = Self::zeros(shape, theta, dropout)?;
        for (range, fan_in) in [(shape.w1(), shape.d_in), (shape.w2(), shape.h1), (shape.w3(), shape.h2)] {
            let std = (2.0 / fan_in as f64).sqrt();
            for p in &mut m.params[range] {
                let z: f64 = StandardNormal.sample(rng);
                *p = std * z;
            }
        }
        Ok(m)
    }

    fn trace(&self, x: &[f64], mode: Mode, rng: Option<&mut Rng>) -> Trace {
        let s = self.shape;
        let p = &self.params;
        let affine = |w: Range<usize>, b: Range<usize>, input: &[f64], out_dim: usize| -> Vec<f64> {
            let w = &p[w];
            let b = &p[b];
            (0..out_dim)
                .map(|o| {
                    let row = &w[o * input.len()..(o + 1) * input.len()];
                    b[o] + row.iter().zip(input).map(|(a, c)| a * c).sum::<f64>()
                })
                .collect()
        };
        let drop_mask = |n: usize, rng: &mut Option<&mut Rng>| -> Vec<f64> {
            match (mode, rng.as_deref_mut()) {
                (Mode::Train, Some(r)) if self.dropout > 0.0 => {
                    let keep = 1.0 - self.dropout;
                    (0..n)
                        .map(|_| if r.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect()
                }
                _ => vec![1.0; n],
            }
        };
        let mut rng = rng;
        let a1 = affine(s.w1(), s.b1(), x, s.h1);
        let mask1 = drop_mask(s.h1, &mut rng);
        let d1: Vec<f64> = a1
            .iter()
            .zip(&mask1)
            .map(|(&a, &m)| jump_relu(a, self.theta) * m)
            .collect();
        let a2 = affine(s.w2(), s.b2(), &d1, s.h2);
        let mask2 = drop_mask(s.h2, &mut rng);
        let d2: Vec<f64> = a2
            .iter()
            .zip(&mask2)
            .map(|(&a, &m)| jump_relu(a, self.theta) * m)
            .collect();
        let logits = affine(s.w3(), s.b3(), &d2, s.n_out);
        Trace {
            a1,
            d1,
            a2,
            d2,
            mask1,
            mask2,
            logits,
        }
    }

    /// Returns `(logits, penultimate)`. Dropout is applied only in train mode,
    /// and only when an RNG is supplied.
    pub fn forward(&self, x: &[f64], mode: Mode, rng: Option<&mut Rng>) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != self.shape.d_in {
            return Err(Error::Dimension {
                context: "classifier input",
                expected: self.shape.d_in,
                actual: x.len(),
            });
        }
        let t = self.trace(x, mode, rng);
        let pen = t.a2.iter().map(|&a| jump_relu(a, self.theta)).collect();
        Ok((t.logits, pen))
    }

    /// Accumulate the gradient of `scale · Σ_cells bce` for one sample.
    fn backprop(&self, x: &[f64], t: &Trace, y: &[f64], mask: &[bool], scale: f64, g: &mut [f64]) -> f64 {
        let s = self.shape;
        let p = &self.params;
        let mut loss = 0.0;
        let mut dz3 = vec![0.0; s.n_out];
        for o in 0..s.n_out {
            if mask[o] {
                loss += bce_cell(t.logits[o], y[o]);
                dz3[o] = (sigmoid(t.logits[o]) - y[o]) * scale;
            }
        }
        // layer 3
        let mut dd2 = vec![0.0; s.h2];
        {
            let w3 = &p[s.w3()];
            let (gw_start, gb_start) = (s.w3().start, s.b3().start);
            for o in 0..s.n_out {
                if dz3[o] == 0.0 {
                    continue;
                }
                g[gb_start + o] += dz3[o];
                let row = &w3[o * s.h2..(o + 1) * s.h2];
                let grow = &mut g[gw_start + o * s.h2..gw_start + (o + 1) * s.h2];
                for j in 0..s.h2 {
                    grow[j] += dz3[o] * t.d2[j];
                    dd2[j] += dz3[o] * row[j];
                }
            }
        }
        // layer 2
        let da2: Vec<f64> = (0..s.h2)
            .map(|j| if t.a2[j] > self.theta { dd2[j] * t.mask2[j] } else { 0.0 })
            .collect();
        let mut dd1 = vec![0.0; s.h1];
        {
            let w2 = &p[s.w2()];
            let (gw_start, gb_start) = (s.w2().start, s.b2().start);
            for j in 0..s.h2 {
                if da2[j] == 0.0 {
                    continue;
                }
                g[gb_start + j] += da2[j];
                let row = &w2[j * s.h1..(j + 1) * s.h1];
                let grow = &mut g[gw_start + j * s.h1..gw_start + (j + 1) * s.h1];
                for i in 0..s.h1 {
                    grow[i] += da2[j] * t.d1[i];
                    dd1[i] += da2[j] * row[i];
                }
            }
        }
        // layer 1
        let (gw_start, gb_start) = (s.w1().start, s.b1().start);
        for i in 0..s.h1 {
            if !(t.a1[i] > self.theta) {
                continue;
            }
            let da1 = dd1[i] * t.mask1[i];
            if da1 == 0.0 {
                continue;
            }
            g[gb_start + i] += da1;
            let grow = &mut g[gw_start + i * s.d_in..gw_start + (i + 1) * s.d_in];
            for (gw, &xv) in grow.iter_mut().zip(x) {
                *gw += da1 * xv;
            }
        }
        loss
    }

    /// Mean masked BCE over a batch and its gradient. `seeds` gives one dropout
    /// RNG seed per sample (train mode); `None` evaluates deterministically.
    pub fn loss_and_grad(
        &self,
        xs: &[&[f64]],
        ys: &[f64],
        mask: &[bool],
        dropout_seeds: Option<&[u64]>,
    ) -> Result<(f64, Vec<f64>)> {
        let l = self.shape.n_out;
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Empty("every label cell is masked".into()));
        }
        let scale = 1.0 / count as f64;
        let n_params = self.params.len();
        let idx: Vec<usize> = (0..xs.len()).collect();
        let partials: Vec<(f64, Vec<f64>)> = idx
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut g = vec![0.0; n_params];
                let mut loss = 0.0;
                for &i in chunk {
                    let trace = match dropout_seeds {
                        Some(seeds) => {
                            let mut r = <Rng as rand::SeedableRng>::seed_from_u64(seeds[i]);
                            self.trace(xs[i], Mode::Train, Some(&mut r))
                        }
                        None => self.trace(xs[i], Mode::Eval, None),
                    };
                    loss += self.backprop(
                        xs[i],
                        &trace,
                        &ys[i * l..(i + 1) * l],
                        &mask[i * l..(i + 1) * l],
                        scale,
                        &mut g,
                    );
                }
                (loss, g)
            })
            .collect();
        let mut grad = vec![0.0; n_params];
        let mut loss = 0.0;
        for (pl, pg) in partials {
            loss += pl;
            grad.iter_mut().zip(&pg).for_each(|(a, b)| *a += b);
        }
        Ok((loss * scale, grad))
    }

    pub fn save(&self, dir: &Path, stem: &str, label_names: &[String]) -> Result<()> {
        let s = self.shape;
        let mut tf = TensorFile::default();
        let p = &self.params;
        tf.push(Tensor::from_f64("w1", &[s.h1, s.d_in], &p[s.w1()]));
        tf.push(Tensor::from_f64("b1", &[s.h1], &p[s.b1()]));
        tf.push(Tensor::from_f64("w2", &[s.h2, s.h1], &p[s.w2()]));
        tf.push(Tensor::from_f64("b2", &[s.h2], &p[s.b2()]));
        tf.push(Tensor::from_f64("w3", &[s.n_out, s.h2], &p[s.w3()]));
        tf.push(Tensor::from_f64("b3", &[s.n_out], &p[s.b3()]));
        tf.write(&dir.join(format!("{stem}.bin")))?;
        let meta = ClassifierMeta {
            version: MODEL_VERSION,
            shape: s,
            theta: self.theta,
            dropout: self.dropout,
            label_names: label_names.to_vec(),
        };
        let path = dir.join(format!("{stem}.json"));
        std::fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<(Self, ClassifierMeta)> {
        let path = dir.join(format!("{stem}.json"));
        let meta: ClassifierMeta = serde_json::from_slice(&std::fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        if meta.version != MODEL_VERSION {
            return Err(Error::Format(format!("classifier version {}", meta.version)));
        }
        let tf = TensorFile::read(&dir.join(format!("{stem}.bin")))?;
        let s = meta.shape;
        let mut m = Self::zeros(s, meta.theta, meta.dropout)?;
        for (name, range, dims) in [
            ("w1", s.w1(), vec![s.h1, s.d_in]),
            ("b1", s.b1(), vec![s.h1]),
            ("w2", s.w2(), vec![s.h2, s.h1]),
            ("b2", s.b2(), vec![s.h2]),
            ("w3", s.w3(), vec![s.n_out, s.h2]),
            ("b3", s.b3(), vec![s.n_out]),
        ] {
            m.params[range].copy_from_slice(&tf.expect(name, &dims)?);
        }
        Ok((m, meta))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMeta {
    pub version: u32,
    pub shape: ClassifierShape,
    pub theta: f64,
    pub dropout: f64,
    pub label_names: Vec<String>,
}

/// Mean BCE over unmasked cells, stable form. `logits` and `labels` are row-major.
pub fn bce_loss(logits: &[f64], labels: &[f64], mask: &[bool]) -> Result<f64> {
    if logits.len() != labels.len() || logits.len() != mask.len() {
        return Err(Error::Dimension {
            context: "bce_loss operands",
            expected: logits.len(),
            actual: labels.len().min(mask.len()),
        });
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for ((&z, &y), &m) in logits.iter().zip(labels).zip(mask) {
        if m {
            sum += bce_cell(z, y);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("every label cell is masked".into()));
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub h1: usize,
    pub h2: usize,
    pub theta: f64,
    pub dropout: f64,
    pub unknown_labels: UnknownLabelPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 3e-4,
            weight_decay: 0.01,
            epochs: 20,
            patience: 3,
            batch_size: 64,
            seed: 0,
            h1: 512,
            h2: 256,
            theta: DEFAULT_THETA,
            dropout: 0.3,
            unknown_labels: UnknownLabelPolicy::Zero,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument(
                "lr_max must be > 0 and weight_decay >= 0".into(),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 || self.patience > self.epochs {
            return Err(Error::InvalidArgument(
                "epochs, batch_size, patience must be positive with patience <= epochs".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

fn eval_loss(model: &ClassifierModel, xs: &[Vec<f64>], ys: &[f64], mask: &[bool]) -> Result<f64> {
    let refs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
    let logits: Vec<f64> = refs
        .par_iter()
        .map(|x| model.trace(x, Mode::Eval, None).logits)
        .collect::<Vec<_>>()
        .concat();
    bce_loss(&logits, ys, mask)
}

/// AdamW + cosine annealing with validation-loss early stopping. Returns the
/// best-validation snapshot.
pub fn train_classifier(ds: &Dataset, cfg: &TrainConfig) -> Result<(ClassifierModel, TrainHistory)> {
    cfg.validate()?;
    let train_idx = ds.indices_in(Split::Train);
    let val_idx = ds.indices_in(Split::Val);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Empty("train and val splits must both be non-empty".into()));
    }
    let shape = ClassifierShape {
        d_in: ds.manifest.d_img,
        h1: cfg.h1,
        h2: cfg.h2,
        n_out: ds.manifest.n_labels,
    };
    let mut model = ClassifierModel::init(shape, cfg.theta, cfg.dropout, &mut rng_for(cfg.seed, "mlp/init", 0))?;
    let x_train: Vec<Vec<f64>> = train_idx.iter().map(|&i| ds.records[i].image_f64()).collect();
    let (y_train, m_train) = ds.label_matrix(&train_idx, cfg.unknown_labels);
    let x_val: Vec<Vec<f64>> = val_idx.iter().map(|&i| ds.records[i].image_f64()).collect();
    let (y_val, m_val) = ds.label_matrix(&val_idx, cfg.unknown_labels);

    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs) as u64;
    let mut opt =
        Adam::new(shape.n_params()).with_weight_decay(cfg.weight_decay, vec![shape.w1(), shape.w2(), shape.w3()]);
    let mut order: Vec<usize> = (0..train_idx.len()).collect();
    let mut shuffle_rng = rng_for(cfg.seed, "mlp/shuffle", 0);
    let mut drop_rng = rng_for(cfg.seed, "mlp/dropout", 0);
    let l = shape.n_out;

    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        stopped_early: false,
    };
    let mut best = model.clone();
    let mut bad_epochs = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        let mut lr = cfg.lr_max;
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| x_train[i].as_slice()).collect();
            let mut ys = Vec::with_capacity(batch.len() * l);
            let mut ms = Vec::with_capacity(batch.len() * l);
            for &i in batch {
                ys.extend_from_slice(&y_train[i * l..(i + 1) * l]);
                ms.extend_from_slice(&m_train[i * l..(i + 1) * l]);
            }
            if !ms.iter().any(|&m| m) {
                continue;
            }
            let seeds: Vec<u64> = batch.iter().map(|_| drop_rng.random()).collect();
            let (loss, grad) = model.loss_and_grad(&xs, &ys, &ms, Some(&seeds))?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "classifier loss diverged in epoch {epoch}; last finite epoch {}",
                    epoch - 1
                )));
            }
            lr = cosine_lr(opt.steps(), total_steps, cfg.lr_max);
            opt.step(&mut model.params, &grad, lr);
            loss_sum += loss;
            batches += 1;
        }
        let val_loss = eval_loss(&model, &x_val, &y_val, &m_val)?;
        if !val_loss.is_finite() || model.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric(format!(
                "classifier diverged in epoch {epoch}; last finite epoch {}",
                epoch - 1
            )));
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            val_loss,
            lr_end: lr,
        });
        log::debug!("classifier epoch {epoch}: val loss {val_loss:.6}");
        if val_loss < history.best_val_loss {
            history.best_val_loss = val_loss;
            history.best_epoch = epoch;
            best = model.clone();
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.patience {
                history.stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }
    Ok((best, history))
}

/// Eval-mode penultimate activations, row-aligned with `ds.records`.
pub fn extract_penultimate(model: &ClassifierModel, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    ds.records
        .par_iter()
        .map(|r| model.forward(&r.image_f64(), Mode::Eval, None).map(|(_, pen)| pen))
        .collect()
}

/// Eval-mode logits, row-aligned with `ds.records`.
pub fn extract_logits(model: &ClassifierModel, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    ds.records
        .par_iter()
        .map(|r| model.forward(&r.image_f64(), Mode::Eval, None).map(|(z, _)| z))
        .collect()
}

/// Mean over labels of per-label accuracy at probability threshold 0.5.
pub fn mean_label_accuracy(model: &ClassifierModel, ds: &Dataset, split: Split) -> Result<Vec<f64>> {
    let idx = ds.indices_in(split);
    let l = model.shape.n_out;
    let mut correct = vec![0usize; l];
    let mut seen = vec![0usize; l];
    for &i in &idx {
        let r = &ds.records[i];
        let (z, _) = model.forward(&r.image_f64(), Mode::Eval, None)?;
        for t in 0..l {
            let truth = match r.labels[t] {
                crate::embedstore::Label::Positive => true,
                crate::embedstore::Label::Negative => false,
                crate::embedstore::Label::Unknown => continue,
            };
            seen[t] += 1;
            if (z[t] > 0.0) == truth {
                correct[t] += 1;
            }
        }
    }
    Ok((0..l)
        .map(|t| {
            if seen[t] == 0 {
                0.0
            } else {
                correct[t] as f64 / seen[t] as f64
            }
        })
        .collect())
}

//! L1-regularized logistic head over pattern features, with exact attribution.
//!
//! Each target is fit independently by SAGA with a proximal soft-threshold
//! step; the bias is unpenalized. Losses are class-weighted so that both
//! classes carry half the total weight.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featenc::FeatureVector;
use crate::patterns::{PatternId, Registry};
use crate::util::{bce_cell, rng_for, sigmoid, write_atomic};

/// `(w_pos, w_neg) = (N / 2N_pos, N / 2N_neg)`.
pub fn class_weights(target: &str, labels: &[bool]) -> Result<(f64, f64)> {
    let n = labels.len();
    let pos = labels.iter().filter(|&&y| y).count();
    if pos == 0 || pos == n {
        return Err(Error::InvalidArgument(format!(
            "target {target:?} has a single class ({pos} positive of {n})"
        )));
    }
    Ok((n as f64 / (2 * pos) as f64, n as f64 / (2 * (n - pos)) as f64))
}

/// `sign(w) · max(|w| − λ, 0)`.
#[inline]
pub fn soft_threshold(w: f64, lambda: f64) -> f64 {
    if w > lambda {
        w - lambda
    } else if w < -lambda {
        w + lambda
    } else {
        0.0
    }
}

/// Sparse design rows: `(column, value)` pairs.
pub type SparseRow = Vec<(usize, f64)>;

/// Weighted mean logistic loss and its gradient in `(w, b)`.
pub fn smooth_loss_and_grad(
    w: &[f64],
    b: f64,
    rows: &[SparseRow],
    ys: &[bool],
    cw: (f64, f64),
) -> (f64, Vec<f64>, f64) {
    let n = rows.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; w.len()];
    let mut gb = 0.0;
    for (x, &y) in rows.iter().zip(ys) {
        let c = if y { cw.0 } else { cw.1 };
        let yf = if y { 1.0 } else { 0.0 };
        let z = b + x.iter().map(|&(j, v)| w[j] * v).sum::<f64>();
        loss += c * bce_cell(z, yf);
        let g = c * (sigmoid(z) - yf);
        gb += g;
        for &(j, v) in x {
            gw[j] += g * v;
        }
    }
    gw.iter_mut().for_each(|g| *g /= n);
    (loss / n, gw, gb / n)
}

pub fn objective(w: &[f64], b: f64, rows: &[SparseRow], ys: &[bool], cw: (f64, f64), alpha: f64) -> f64 {
    smooth_loss_and_grad(w, b, rows, ys, cw).0 + alpha * w.iter().map(|x| x.abs()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    #[default]
    Saga,
    /// Full-batch proximal gradient; slow but its objective never increases.
    FullBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub alpha: f64,
    pub max_passes: usize,
    /// Stop when no parameter moves more than this over a pass.
    pub tol: f64,
    pub seed: u64,
    pub solver: Solver,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            alpha: 0.01,
            max_passes: 500,
            tol: 1e-6,
            seed: 0,
            solver: Solver::Saga,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if self.max_passes == 0 || !(self.tol > 0.0) {
            return Err(Error::InvalidArgument("max_passes and tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub passes: usize,
    pub converged: bool,
}

fn lipschitz<'a>(rows: &'a [SparseRow], ys: &'a [bool], cw: (f64, f64)) -> impl Iterator<Item = f64> + 'a {
    rows.iter().zip(ys).map(move |(x, &y)| {
        let c = if y { cw.0 } else { cw.1 };
        c * (1.0 + x.iter().map(|e| e.1 * e.1).sum::<f64>()) / 4.0
    })
}

fn check_finite(w: &[f64], b: f64) -> Result<()> {
    if !b.is_finite() || w.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("head weights diverged".into()));
    }
    Ok(())
}

/// Fit one target. `dim` is the number of feature columns.
pub fn fit_target(
    rows: &[SparseRow],
    ys: &[bool],
    dim: usize,
    cw: (f64, f64),
    cfg: &HeadConfig,
    stream: u64,
) -> Result<FitResult> {
    cfg.validate()?;
    if rows.is_empty() || rows.len() != ys.len() {
        return Err(Error::InvalidArgument(
            "head rows and labels must be non-empty and aligned".into(),
        ));
    }
    if let Some(&(j, _)) = rows.iter().flatten().find(|e| e.0 >= dim) {
        return Err(Error::Dimension {
            context: "head feature column",
            expected: dim,
            actual: j + 1,
        });
    }
    match cfg.solver {
        Solver::Saga => saga(rows, ys, dim, cw, cfg, stream),
        Solver::FullBatch => full_batch(rows, ys, dim, cw, cfg),
    }
}

fn saga(
    rows: &[SparseRow],
    ys: &[bool],
    dim: usize,
    cw: (f64, f64),
    cfg: &HeadConfig,
    stream: u64,
) -> Result<FitResult> {
    let n = rows.len();
    let nf = n as f64;
    let l_max = lipschitz(rows, ys, cw).fold(0.0, f64::max);
    // the usual SAGA step for strongly convex-free problems
    let eta = 1.0 / (3.0 * l_max);
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let label = |y: bool| if y { 1.0 } else { 0.0 };
    let weight = |y: bool| if y { cw.0 } else { cw.1 };

    let mut table: Vec<f64> = ys.iter().map(|&y| weight(y) * (0.5 - label(y))).collect();
    let mut avg = vec![0.0; dim];
    let mut avg_b = 0.0;
    for (x, &g) in rows.iter().zip(&table) {
        for &(j, v) in x {
            avg[j] += g * v / nf;
        }
        avg_b += g / nf;
    }

    let mut rng = rng_for(cfg.seed, "head/saga", stream);
    let mut order: Vec<usize> = (0..n).collect();
    let mut prev_w = w.clone();
    let mut prev_b = b;
    for pass in 1..=cfg.max_passes {
        order.shuffle(&mut rng);
        for &i in &order {
            let x = &rows[i];
            let y = ys[i];
            let z = b + x.iter().map(|&(j, v)| w[j] * v).sum::<f64>();
            let g = weight(y) * (sigmoid(z) - label(y));
            let dg = g - table[i];
            let mut step = avg.clone();
            for &(j, v) in x {
                step[j] += dg * v;
            }
            for (wj, sj) in w.iter_mut().zip(&step) {
                *wj = soft_threshold(*wj - eta * sj, eta * cfg.alpha);
            }
            b -= eta * (dg + avg_b);
            for &(j, v) in x {
                avg[j] += dg * v / nf;
            }
            avg_b += dg / nf;
            table[i] = g;
        }
        check_finite(&w, b)?;
        let delta = w
            .iter()
            .zip(&prev_w)
            .map(|(a, p)| (a - p).abs())
            .fold((b - prev_b).abs(), f64::max);
        if delta < cfg.tol {
            return Ok(FitResult {
                weights: w,
                bias: b,
                passes: pass,
                converged: true,
            });
        }
        prev_w.copy_from_slice(&w);
        prev_b = b;
    }
    Ok(FitResult {
        weights: w,
        bias: b,
        passes: cfg.max_passes,
        converged: false,
    })
}

fn full_batch(rows: &[SparseRow], ys: &[bool], dim: usize, cw: (f64, f64), cfg: &HeadConfig) -> Result<FitResult> {
    let l = lipschitz(rows, ys, cw).sum::<f64>() / rows.len() as f64;
    let eta = 1.0 / l;
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    for pass in 1..=cfg.max_passes {
        let (_, gw, gb) = smooth_loss_and_grad(&w, b, rows, ys, cw);
        let mut delta = eta * gb.abs();
        b -= eta * gb;
        for (wj, g) in w.iter_mut().zip(&gw) {
            let next = soft_threshold(*wj - eta * g, eta * cfg.alpha);
            delta = delta.max((next - *wj).abs());
            *wj = next;
        }
        check_finite(&w, b)?;
        if delta < cfg.tol {
            return Ok(FitResult {
                weights: w,
                bias: b,
                passes: pass,
                converged: true,
            });
        }
    }
    Ok(FitResult {
        weights: w,
        bias: b,
        passes: cfg.max_passes,
        converged: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetHead {
    pub name: String,
    /// Dense over the model's pattern columns.
    pub weights: Vec<f64>,
    pub bias: f64,
    pub class_weights: (f64, f64),
    pub passes: usize,
    pub converged: bool,
    /// Why the target was not trained, if it was skipped.
    pub skipped: Option<String>,
}

impl TargetHead {
    pub fn nonzero(&self) -> usize {
        self.weights.iter().filter(|&&w| w != 0.0).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadModel {
    pub pattern_ids: Vec<PatternId>,
    pub alpha: f64,
    pub targets: Vec<TargetHead>,
}

fn sparse_rows(pattern_ids: &[PatternId], features: &[FeatureVector]) -> Result<Vec<SparseRow>> {
    features
        .iter()
        .map(|f| {
            f.entries
                .iter()
                .map(|&(id, v)| {
                    pattern_ids
                        .binary_search(&id)
                        .map(|c| (c, v))
                        .map_err(|_| Error::NotFound(format!("pattern {id} in record {}", f.record_id)))
                })
                .collect()
        })
        .collect()
}

/// Fit every target. `labels[i][t]` is `None` when unknown; such rows are left
/// out for that target. Single-class targets are skipped with a warning.
pub fn train_head(
    features: &[FeatureVector],
    pattern_ids: &[PatternId],
    labels: &[Vec<Option<bool>>],
    target_names: &[String],
    cfg: &HeadConfig,
) -> Result<HeadModel> {
    cfg.validate()?;
    if features.len() != labels.len() {
        return Err(Error::Dimension {
            context: "head labels",
            expected: features.len(),
            actual: labels.len(),
        });
    }
    if pattern_ids.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("pattern_ids must be strictly ascending".into()));
    }
    if let Some(bad) = labels.iter().find(|l| l.len() != target_names.len()) {
        return Err(Error::Dimension {
            context: "labels per record",
            expected: target_names.len(),
            actual: bad.len(),
        });
    }
    let all_rows = sparse_rows(pattern_ids, features)?;
    let dim = pattern_ids.len();
    let targets = target_names
        .par_iter()
        .enumerate()
        .map(|(t, name)| {
            let (rows, ys): (Vec<SparseRow>, Vec<bool>) = all_rows
                .iter()
                .zip(labels)
                .filter_map(|(r, l)| l[t].map(|y| (r.clone(), y)))
                .unzip();
            let skip = |why: String| {
                log::warn!("skipping target {name}: {why}");
                TargetHead {
                    name: name.clone(),
                    weights: vec![0.0; dim],
                    bias: 0.0,
                    class_weights: (1.0, 1.0),
                    passes: 0,
                    converged: false,
                    skipped: Some(why),
                }
            };
            let cw = match class_weights(name, &ys) {
                Ok(cw) => cw,
                Err(e) => return Ok(skip(e.to_string())),
            };
            let fit = fit_target(&rows, &ys, dim, cw, cfg, t as u64)?;
            if !fit.converged {
                log::warn!("target {name}: not converged after {} passes", fit.passes);
            }
            Ok(TargetHead {
                name: name.clone(),
                weights: fit.weights,
                bias: fit.bias,
                class_weights: cw,
                passes: fit.passes,
                converged: fit.converged,
                skipped: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HeadModel {
        pattern_ids: pattern_ids.to_vec(),
        alpha: cfg.alpha,
        targets,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub pattern_id: PatternId,
    pub activation: f64,
    pub weight: f64,
    pub contribution: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub record_id: String,
    pub target: String,
    pub target_index: usize,
    pub probability: f64,
    /// `bias` plus each contribution in listed order, summed left to right.
    pub logit: f64,
    pub bias: f64,
    /// Sorted by |contribution| descending, ties to the lower pattern_id.
    pub contributions: Vec<Contribution>,
}

impl AttributionReport {
    /// Left-to-right sum of the parts; equals `logit` exactly.
    pub fn reconstructed_logit(&self) -> f64 {
        self.contributions.iter().fold(self.bias, |acc, c| acc + c.contribution)
    }
}

impl HeadModel {
    pub fn target_index(&self, target: &str) -> Result<usize> {
        self.targets
            .iter()
            .position(|t| t.name == target)
            .or_else(|| target.parse::<usize>().ok().filter(|&i| i < self.targets.len()))
            .ok_or_else(|| Error::NotFound(format!("target {target:?}")))
    }

    fn parts(&self, fv: &FeatureVector, t: usize) -> Result<(f64, Vec<Contribution>)> {
        let head = self
            .targets
            .get(t)
            .ok_or_else(|| Error::NotFound(format!("target index {t}")))?;
        let mut parts = fv
            .entries
            .iter()
            .map(|&(id, a)| {
                let col = self
                    .pattern_ids
                    .binary_search(&id)
                    .map_err(|_| Error::NotFound(format!("pattern {id} is not a head feature")))?;
                let w = head.weights[col];
                Ok(Contribution {
                    pattern_id: id,
                    activation: a,
                    weight: w,
                    contribution: w * a,
                    description: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        parts.sort_by(|a, b| {
            b.contribution
                .abs()
                .total_cmp(&a.contribution.abs())
                .then(a.pattern_id.cmp(&b.pattern_id))
        });
        Ok((head.bias, parts))
    }

    /// `b_t + Σ w_j a_j`, summed in attribution order.
    pub fn logit(&self, fv: &FeatureVector, t: usize) -> Result<f64> {
        let (b, parts) = self.parts(fv, t)?;
        Ok(parts.iter().fold(b, |acc, c| acc + c.contribution))
    }

    pub fn predict(&self, fv: &FeatureVector, t: usize) -> Result<f64> {
        self.logit(fv, t).map(sigmoid)
    }

    pub fn attribute(&self, fv: &FeatureVector, t: usize, registry: Option<&Registry>) -> Result<AttributionReport> {
        let (bias, mut contributions) = self.parts(fv, t)?;
        if let Some(reg) = registry {
            for c in &mut contributions {
                c.description = reg
                    .get(c.pattern_id)
                    .and_then(|p| p.annotation.as_ref())
                    .map(|a| a.description.clone());
            }
        }
        let logit = contributions.iter().fold(bias, |acc, c| acc + c.contribution);
        Ok(AttributionReport {
            record_id: fv.record_id.clone(),
            target: self.targets[t].name.clone(),
            target_index: t,
            probability: sigmoid(logit),
            logit,
            bias,
            contributions,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(&HeadFile::from(self))?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice::<HeadFile>(&bytes)?.try_into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WeightEntry {
    pattern_id: PatternId,
    weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetFile {
    name: String,
    bias: f64,
    w_pos: f64,
    w_neg: f64,
    passes: usize,
    converged: bool,
    nonzero: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    skipped: Option<String>,
    weights: Vec<WeightEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadFile {
    version: u32,
    alpha: f64,
    pattern_ids: Vec<PatternId>,
    targets: Vec<TargetFile>,
}

impl From<&HeadModel> for HeadFile {
    fn from(m: &HeadModel) -> Self {
        HeadFile {
            version: 1,
            alpha: m.alpha,
            pattern_ids: m.pattern_ids.clone(),
            targets: m
                .targets
                .iter()
                .map(|t| TargetFile {
                    name: t.name.clone(),
                    bias: t.bias,
                    w_pos: t.class_weights.0,
                    w_neg: t.class_weights.1,
                    passes: t.passes,
                    converged: t.converged,
                    nonzero: t.nonzero(),
                    skipped: t.skipped.clone(),
                    weights: m
                        .pattern_ids
                        .iter()
                        .zip(&t.weights)
                        .filter(|(_, &w)| w != 0.0)
                        .map(|(&pattern_id, &weight)| WeightEntry { pattern_id, weight })
                        .collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<HeadFile> for HeadModel {
    type Error = Error;

    fn try_from(f: HeadFile) -> Result<Self> {
        if f.version != 1 {
            return Err(Error::Format(format!("unsupported head version {}", f.version)));
        }
        let col: BTreeMap<PatternId, usize> = f.pattern_ids.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        let targets = f
            .targets
            .into_iter()
            .map(|t| {
                let mut weights = vec![0.0; f.pattern_ids.len()];
                for e in &t.weights {
                    let c = col
                        .get(&e.pattern_id)
                        .ok_or_else(|| Error::Format(format!("weight for unknown pattern {}", e.pattern_id)))?;
                    weights[*c] = e.weight;
                }
                Ok(TargetHead {
                    name: t.name,
                    weights,
                    bias: t.bias,
                    class_weights: (t.w_pos, t.w_neg),
                    passes: t.passes,
                    converged: t.converged,
                    skipped: t.skipped,
                })
            })
            .collect::<Result<_>>()?;
        Ok(HeadModel {
            pattern_ids: f.pattern_ids,
            alpha: f.alpha,
            targets,
        })
    }
}

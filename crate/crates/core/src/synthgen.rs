//! Planted-factor benchmark.
//!
//! Every sample is a sparse positive combination of `k_true` dictionary atoms
//! plus Gaussian noise; the classifier-side target is the same code pushed
//! through a mixing matrix. Because the generating factors are known, every
//! discovery claim downstream (atom recovery, gallery purity, attribution) can
//! be checked against ground truth.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::embedstore::{Dataset, DatasetManifest, EmbeddingRecord, Label, Split};
use crate::error::{Error, Result};
use crate::tensorfile::{Tensor, TensorFile};
use crate::util::{cosine, normalize, rng_for};

pub const COEF_LO: f64 = 0.5;
pub const COEF_HI: f64 = 1.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DictionaryKind {
    /// Orthonormal when `n_factors <= input_dim`, otherwise unit-norm Gaussian.
    #[default]
    Auto,
    Orthogonal,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_factors: usize,
    pub d_img: usize,
    pub d_txt: usize,
    pub target_dim: usize,
    pub k_true: usize,
    pub noise_sigma: f64,
    /// Label `t` is positive iff any factor in `label_rules[t]` is active.
    pub label_rules: Vec<Vec<usize>>,
    #[serde(default)]
    pub label_names: Option<Vec<String>>,
    pub n_samples: usize,
    pub n_patients: usize,
    pub seed: u64,
    #[serde(default)]
    pub dictionary: DictionaryKind,
}

impl SyntheticSpec {
    pub fn input_dim(&self) -> usize {
        self.d_img + self.d_txt
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_factors == 0 || self.k_true == 0 || self.k_true > self.n_factors {
            return bad(format!(
                "need 1 <= k_true ({}) <= n_factors ({})",
                self.k_true, self.n_factors
            ));
        }
        if self.d_img == 0 || self.d_txt == 0 || self.target_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0".into());
        }
        if self.label_rules.is_empty() {
            return bad("at least one label rule is required".into());
        }
        for (t, rule) in self.label_rules.iter().enumerate() {
            if let Some(&f) = rule.iter().find(|&&f| f >= self.n_factors) {
                return bad(format!("label rule {t} references factor {f} >= {}", self.n_factors));
            }
        }
        if let Some(names) = &self.label_names {
            if names.len() != self.label_rules.len() {
                return bad("label_names must match label_rules".into());
            }
        }
        if self.n_patients == 0 || self.n_samples == 0 {
            return bad("n_samples and n_patients must be positive".into());
        }
        if self.dictionary == DictionaryKind::Orthogonal && self.n_factors > self.input_dim() {
            return bad(format!(
                "cannot orthogonalize {} factors in {} dimensions",
                self.n_factors,
                self.input_dim()
            ));
        }
        Ok(())
    }

    fn orthogonal(&self) -> bool {
        match self.dictionary {
            DictionaryKind::Auto => self.n_factors <= self.input_dim(),
            DictionaryKind::Orthogonal => true,
            DictionaryKind::Gaussian => false,
        }
    }

    pub fn label_names(&self) -> Vec<String> {
        self.label_names
            .clone()
            .unwrap_or_else(|| (0..self.label_rules.len()).map(|t| format!("target_{t}")).collect())
    }
}

/// The planted generative structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// `n_factors` unit-norm atoms of length `input_dim`.
    pub dictionary: Vec<Vec<f64>>,
    /// `n_factors` unit-norm rows of length `target_dim`.
    pub mixing: Vec<Vec<f64>>,
    /// Per-sample active factor indices, ascending.
    pub supports: Vec<Vec<usize>>,
    /// Per-sample coefficients aligned with `supports`.
    pub coefficients: Vec<Vec<f64>>,
    pub label_rules: Vec<Vec<usize>>,
}

impl GroundTruth {
    pub fn is_active(&self, sample: usize, factor: usize) -> bool {
        self.supports[sample].binary_search(&factor).is_ok()
    }

    /// Persist as `ground_truth.json` (supports, coefficients, rules) plus
    /// `ground_truth.bin` (dictionary and mixing tensors).
    pub fn save(&self, dir: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Meta<'a> {
            supports: &'a [Vec<usize>],
            coefficients: &'a [Vec<f64>],
            label_rules: &'a [Vec<usize>],
        }
        let meta = Meta {
            supports: &self.supports,
            coefficients: &self.coefficients,
            label_rules: &self.label_rules,
        };
        let p = dir.join("ground_truth.json");
        std::fs::write(&p, serde_json::to_vec(&meta)?).map_err(|e| Error::io(&p, e))?;
        let mut tf = TensorFile::default();
        tf.push(Tensor::from_f64(
            "dictionary",
            &[self.dictionary.len(), self.dictionary[0].len()],
            &self.dictionary.concat(),
        ));
        tf.push(Tensor::from_f64(
            "mixing",
            &[self.mixing.len(), self.mixing[0].len()],
            &self.mixing.concat(),
        ));
        tf.write(&dir.join("ground_truth.bin"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            supports: Vec<Vec<usize>>,
            coefficients: Vec<Vec<f64>>,
            label_rules: Vec<Vec<usize>>,
        }
        let p = dir.join("ground_truth.json");
        let meta: Meta = serde_json::from_slice(&std::fs::read(&p).map_err(|e| Error::io(&p, e))?)?;
        let tf = TensorFile::read(&dir.join("ground_truth.bin"))?;
        let rows = |name: &str| -> Result<Vec<Vec<f64>>> {
            let t = tf.get(name)?;
            let cols = t.dims[1];
            Ok(t.to_f64().chunks(cols).map(|c| c.to_vec()).collect())
        };
        Ok(GroundTruth {
            dictionary: rows("dictionary")?,
            mixing: rows("mixing")?,
            supports: meta.supports,
            coefficients: meta.coefficients,
            label_rules: meta.label_rules,
        })
    }
}

/// Output of [`generate_benchmark`].
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub dataset: Dataset,
    /// Row-major `n_samples × target_dim` classifier-side targets.
    pub targets: Vec<f64>,
    pub truth: GroundTruth,
}

/// Template excerpt naming the active factors, e.g. `"factor-3 (0.820) factor-17 (1.210)"`.
pub fn factor_excerpt(support: &[usize], coefs: &[f64]) -> String {
    support
        .iter()
        .zip(coefs)
        .map(|(f, c)| format!("factor-{f} ({c:.3})"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Closed-form expected ‖x‖² for the sampler: `k·E[s²] + d·σ²` (orthonormal dictionary).
pub fn expected_sq_norm(spec: &SyntheticSpec) -> f64 {
    let (a, b) = (COEF_LO, COEF_HI);
    let e_s2 = (a * a + a * b + b * b) / 3.0;
    spec.k_true as f64 * e_s2 + spec.input_dim() as f64 * spec.noise_sigma.powi(2)
}

fn gaussian_rows(rows: usize, cols: usize, rng: &mut crate::util::Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

fn gram_schmidt(rows: &mut [Vec<f64>]) -> Result<()> {
    for i in 0..rows.len() {
        // two passes for numerical orthogonality
        for _ in 0..2 {
            for j in 0..i {
                let (head, tail) = rows.split_at_mut(i);
                let p = crate::util::dot(&tail[0], &head[j]);
                tail[0].iter_mut().zip(&head[j]).for_each(|(x, q)| *x -= p * q);
            }
        }
        if normalize(&mut rows[i]) < 1e-10 {
            return Err(Error::Numeric("degenerate dictionary during orthogonalization".into()));
        }
    }
    Ok(())
}

pub fn generate_benchmark(spec: &SyntheticSpec) -> Result<Benchmark> {
    spec.validate()?;
    let d = spec.input_dim();
    let m = spec.n_factors;

    let mut rng = rng_for(spec.seed, "synth/dictionary", 0);
    let mut dictionary = gaussian_rows(m, d, &mut rng);
    if spec.orthogonal() {
        gram_schmidt(&mut dictionary)?;
    } else {
        for row in &mut dictionary {
            normalize(row);
        }
    }
    let mut rng = rng_for(spec.seed, "synth/mixing", 0);
    let mut mixing = gaussian_rows(m, spec.target_dim, &mut rng);
    for row in &mut mixing {
        normalize(row);
    }

    let coef = Uniform::new_inclusive(COEF_LO, COEF_HI).expect("valid range");
    let mut rng = rng_for(spec.seed, "synth/samples", 0);
    let width = spec.n_samples.saturating_sub(1).to_string().len();
    let pwidth = spec.n_patients.saturating_sub(1).to_string().len();
    let mut records = Vec::with_capacity(spec.n_samples);
    let mut targets = Vec::with_capacity(spec.n_samples * spec.target_dim);
    let mut supports = Vec::with_capacity(spec.n_samples);
    let mut coefficients = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let mut support = sample(&mut rng, m, spec.k_true).into_vec();
        support.sort_unstable();
        let coefs: Vec<f64> = support.iter().map(|_| coef.sample(&mut rng)).collect();

        let mut x = vec![0.0; d];
        let mut y = vec![0.0; spec.target_dim];
        for (&f, &s) in support.iter().zip(&coefs) {
            x.iter_mut().zip(&dictionary[f]).for_each(|(a, b)| *a += s * b);
            y.iter_mut().zip(&mixing[f]).for_each(|(a, b)| *a += s * b);
        }
        if spec.noise_sigma > 0.0 {
            for v in &mut x {
                let z: f64 = rng.sample(StandardNormal);
                *v += spec.noise_sigma * z;
            }
        }
        let labels = spec
            .label_rules
            .iter()
            .map(|rule| Label::from(rule.iter().any(|f| support.binary_search(f).is_ok())))
            .collect();
        records.push(EmbeddingRecord {
            record_id: format!("r{i:0width$}"),
            patient_id: format!("P{:0pwidth$}", i % spec.n_patients),
            image_embedding: x[..spec.d_img].iter().map(|&v| v as f32).collect(),
            text_embedding: x[spec.d_img..].iter().map(|&v| v as f32).collect(),
            labels,
            report_excerpt: factor_excerpt(&support, &coefs),
            split: Split::Unassigned,
        });
        targets.extend_from_slice(&y);
        supports.push(support);
        coefficients.push(coefs);
    }

    let manifest = DatasetManifest::new(spec.d_img, spec.d_txt, spec.label_names());
    Ok(Benchmark {
        dataset: Dataset::from_records(manifest, records)?,
        targets,
        truth: GroundTruth {
            dictionary,
            mixing,
            supports,
            coefficients,
            label_rules: spec.label_rules.clone(),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomPair {
    pub learned: usize,
    pub truth: usize,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    /// Greedy one-to-one pairs with cosine ≥ `min_cos`, best first.
    pub pairs: Vec<AtomPair>,
    pub recovery_rate: f64,
    pub min_cos: f64,
}

/// Greedy one-to-one matching by descending cosine.
pub fn match_atoms(learned: &[Vec<f64>], truth: &[Vec<f64>], min_cos: f64) -> MatchReport {
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for (li, l) in learned.iter().enumerate() {
        for (ti, t) in truth.iter().enumerate() {
            let c = cosine(l, t);
            if c >= min_cos {
                cands.push((c, li, ti));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_l = vec![false; learned.len()];
    let mut used_t = vec![false; truth.len()];
    let mut pairs = Vec::new();
    for (c, li, ti) in cands {
        if !used_l[li] && !used_t[ti] {
            used_l[li] = true;
            used_t[ti] = true;
            pairs.push(AtomPair {
                learned: li,
                truth: ti,
                cosine: c,
            });
        }
    }
    let recovery_rate = if truth.is_empty() {
        0.0
    } else {
        pairs.len() as f64 / truth.len() as f64
    };
    MatchReport {
        pairs,
        recovery_rate,
        min_cos,
    }
}

/// For each learned atom, the best-matching true atom when its cosine clears `min_cos`.
/// Unlike [`match_atoms`] this is many-to-one, so duplicates map to the same factor.
pub fn nearest_atoms(learned: &[Vec<f64>], truth: &[Vec<f64>], min_cos: f64) -> Vec<Option<usize>> {
    learned
        .iter()
        .map(|l| {
            truth
                .iter()
                .enumerate()
                .map(|(i, t)| (cosine(l, t), i))
                .filter(|(c, _)| *c >= min_cos)
                .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))
                .map(|(_, i)| i)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::dot;

    pub(crate) fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_factors: 4,
            d_img: 4,
            d_txt: 4,
            target_dim: 3,
            k_true: 1,
            noise_sigma: 0.0,
            label_rules: vec![vec![0], vec![1, 2]],
            label_names: None,
            n_samples: 40,
            n_patients: 10,
            seed: 3,
            dictionary: DictionaryKind::Auto,
        }
    }

    #[test]
    fn arity_one_inputs_are_scaled_atoms() {
        let b = generate_benchmark(&small_spec()).unwrap();
        for (i, r) in b.dataset.records.iter().enumerate() {
            let x = r.joint_embedding();
            let f = b.truth.supports[i][0];
            let s = b.truth.coefficients[i][0];
            assert!((COEF_LO..=COEF_HI).contains(&s));
            for (a, d) in x.iter().zip(&b.truth.dictionary[f]) {
                assert!((a - s * d).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dictionary_orthonormal_and_labels_follow_rules() {
        let b = generate_benchmark(&small_spec()).unwrap();
        let dct = &b.truth.dictionary;
        for i in 0..dct.len() {
            for j in 0..dct.len() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot(&dct[i], &dct[j]) - want).abs() < 1e-12);
            }
        }
        for (i, r) in b.dataset.records.iter().enumerate() {
            for (t, rule) in b.truth.label_rules.iter().enumerate() {
                let want = rule.iter().any(|&f| b.truth.is_active(i, f));
                assert_eq!(r.labels[t] == Label::Positive, want);
            }
            assert_eq!(r.patient_id, format!("P{}", i % 10));
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_benchmark(&small_spec()).unwrap();
        let b = generate_benchmark(&small_spec()).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.targets, b.targets);
        let mut other = small_spec();
        other.seed += 1;
        assert_ne!(generate_benchmark(&other).unwrap().dataset, a.dataset);
    }

    #[test]
    fn spec_validation() {
        let mut s = small_spec();
        s.dictionary = DictionaryKind::Orthogonal;
        s.n_factors = 9;
        assert!(generate_benchmark(&s).is_err());
        let mut s = small_spec();
        s.label_rules = vec![vec![7]];
        assert!(generate_benchmark(&s).is_err());
        let mut s = small_spec();
        s.k_true = 5;
        assert!(generate_benchmark(&s).is_err());
        // overcomplete falls back to unit-norm Gaussian atoms
        let mut s = small_spec();
        s.n_factors = 12;
        let b = generate_benchmark(&s).unwrap();
        for a in &b.truth.dictionary {
            assert!((crate::util::norm(a) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn match_atoms_examples() {
        let truth = generate_benchmark(&small_spec()).unwrap().truth.dictionary;
        assert_eq!(match_atoms(&truth, &truth, 0.8).recovery_rate, 1.0);
        let mut perm = truth.clone();
        perm.rotate_left(1);
        perm.swap(0, 2);
        assert_eq!(match_atoms(&perm, &truth, 0.8).recovery_rate, 1.0);
        assert_eq!(match_atoms(&[], &truth, 0.8).recovery_rate, 0.0);
        let near = nearest_atoms(&perm, &truth, 0.8);
        assert!(near.iter().all(Option::is_some));
    }
}

//! Reference implementations the library is checked against. Each one is the
//! plain dense or full-sort version of a computation, with no shortcuts.
#![allow(dead_code)]

use patternlens::embedstore::{assign_splits, Dataset};
use patternlens::featenc::FeatureVector;
use patternlens::mlpcls::{ClassifierModel, ClassifierShape};
use patternlens::patterns::PatternId;
use patternlens::synthgen::{generate_benchmark, Benchmark, SyntheticSpec};
use patternlens::transcoder::TranscoderModel;

pub fn spec(m: usize, k_true: usize, n: usize, noise: f64, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_factors: m,
        d_img: 64,
        d_txt: 64,
        target_dim: 32,
        k_true,
        noise_sigma: noise,
        label_rules: vec![vec![0, 1, 2]],
        label_names: None,
        n_samples: n,
        n_patients: (n / 5).max(1),
        seed,
        dictionary: Default::default(),
    }
}

pub fn split_benchmark(spec: &SyntheticSpec, ratios: [f64; 3]) -> Benchmark {
    let mut b = generate_benchmark(spec).unwrap();
    assign_splits(&b.dataset, ratios, spec.seed)
        .unwrap()
        .apply(&mut b.dataset);
    b
}

pub fn target_rows(b: &Benchmark) -> Vec<Vec<f64>> {
    let d = b.truth.mixing[0].len();
    b.targets.chunks(d).map(|c| c.to_vec()).collect()
}

pub fn input_rows(ds: &Dataset) -> Vec<Vec<f64>> {
    ds.records.iter().map(|r| r.joint_embedding()).collect()
}

/// Top-k by full sort: value descending, index ascending on ties.
pub fn sort_top_k(v: &[f64], k: usize) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap().then(a.cmp(&b)));
    let mut out = vec![0.0; v.len()];
    for &i in &idx[..k] {
        out[i] = v[i];
    }
    out
}

/// ‖a − b‖ / max(‖a‖, ‖b‖), or 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = n(a).max(n(b));
    if scale == 0.0 {
        0.0
    } else {
        n(&d) / scale
    }
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn stable_bce(z: f64, y: f64) -> f64 {
    let softplus = |t: f64| t.max(0.0) + (-t.abs()).exp().ln_1p();
    y * softplus(-z) + (1.0 - y) * softplus(z)
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], b: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| b[r] + (0..cols).map(|c| w[r * cols + c] * x[c]).sum::<f64>())
        .collect()
}

pub struct ClassifierTrace {
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Eval-mode classifier forward pass read straight off the parameter layout.
pub fn classifier_forward(m: &ClassifierModel, x: &[f64]) -> ClassifierTrace {
    let s: ClassifierShape = m.shape;
    let p = &m.params;
    let jump = |v: &Vec<f64>| -> Vec<f64> { v.iter().map(|&a| if a > m.theta { a } else { 0.0 }).collect() };
    let a1 = matvec(&p[s.w1()], s.h1, s.d_in, x, &p[s.b1()]);
    let a2 = matvec(&p[s.w2()], s.h2, s.h1, &jump(&a1), &p[s.b2()]);
    let logits = matvec(&p[s.w3()], s.n_out, s.h2, &jump(&a2), &p[s.b3()]);
    ClassifierTrace { a1, a2, logits }
}

/// Smallest distance from any hidden pre-activation to the JumpReLU threshold.
pub fn threshold_margin(m: &ClassifierModel, x: &[f64]) -> f64 {
    let t = classifier_forward(m, x);
    t.a1.iter()
        .chain(&t.a2)
        .map(|a| (a - m.theta).abs())
        .fold(f64::INFINITY, f64::min)
}

/// Dense transcoder forward: relu, full-sort top-k, dense decode.
pub fn transcoder_forward(t: &TranscoderModel, x: &[f64]) -> Vec<f64> {
    let p = &t.params;
    let pre: Vec<f64> = matvec(&p[t.w_enc()], t.latent, t.d_in, x, &p[t.b_enc()])
        .into_iter()
        .map(|a| a.max(0.0))
        .collect();
    let code = sort_top_k(&pre, t.k);
    let wd = &p[t.w_dec()];
    (0..t.d_out)
        .map(|o| p[t.b_dec()][o] + (0..t.latent).map(|i| code[i] * wd[i * t.d_out + o]).sum::<f64>())
        .collect()
}

/// Ground-truth feature vectors: each record's planted support with its
/// coefficients, L2-normalized. Pattern id `f` stands for factor `f`.
pub fn planted_features(b: &Benchmark) -> Vec<FeatureVector> {
    b.dataset
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut entries: Vec<(PatternId, f64)> = b.truth.supports[i]
                .iter()
                .zip(&b.truth.coefficients[i])
                .map(|(&f, &c)| (f as PatternId, c))
                .collect();
            entries.sort_by_key(|e| e.0);
            let n = entries.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt();
            entries.iter_mut().for_each(|e| e.1 /= n);
            FeatureVector {
                record_id: r.record_id.clone(),
                entries,
                normalized: true,
            }
        })
        .collect()
}

pub fn dense(fv: &FeatureVector, ids: &[PatternId]) -> Vec<f64> {
    ids.iter()
        .map(|&id| fv.entries.iter().find(|e| e.0 == id).map_or(0.0, |e| e.1))
        .collect()
}

/// Unregularized class-weighted logistic regression by full-batch gradient
/// descent. Returns `(weights, bias)`.
pub fn gd_logistic(xs: &[Vec<f64>], ys: &[bool], steps: usize, lr: f64) -> (Vec<f64>, f64) {
    let d = xs[0].len();
    let n = xs.len() as f64;
    let pos = ys.iter().filter(|&&y| y).count() as f64;
    let (wp, wn) = (n / (2.0 * pos), n / (2.0 * (n - pos)));
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    for _ in 0..steps {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let z = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let g = if y { wp * (sigmoid(z) - 1.0) } else { wn * sigmoid(z) };
            gb += g;
            gw.iter_mut().zip(x).for_each(|(gi, xi)| *gi += g * xi);
        }
        w.iter_mut().zip(&gw).for_each(|(wi, gi)| *wi -= lr * gi / n);
        b -= lr * gb / n;
    }
    (w, b)
}

pub fn accuracy(xs: &[Vec<f64>], ys: &[bool], w: &[f64], b: f64) -> f64 {
    let hits = xs
        .iter()
        .zip(ys)
        .filter(|(x, &y)| (b + x.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() > 0.0) == y)
        .count();
    hits as f64 / xs.len() as f64
}

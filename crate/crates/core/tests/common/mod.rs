//! Independent reference implementations used by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use std::path::Path;
use std::time::Instant;

use cinesync::data::{CinePair, Manifest, Split};
use cinesync::encoder::{EncoderConfig, EncoderParams};
use cinesync::losses::LossWeights;
use cinesync::synth::{generate_dataset, SynthConfig};
use cinesync::train::{train_pairs, TrainConfig};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(r: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * r.random_range(-1.0..1.0))
}

/// Central differences of `f` at `x`.
pub fn finite_diff(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = probe[k];
            probe[k] = orig + FD_STEP;
            let up = f(&probe);
            probe[k] = orig - FD_STEP;
            let down = f(&probe);
            probe[k] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|)` in the Euclidean norm over all components.
/// With a fixed step of 1e-6, rounding leaves about 1e-10 of absolute noise
/// in every difference quotient, which an element-wise ratio would blow up
/// on components that are analytically zero.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Largest element-wise `|a - n|`.
pub fn max_abs_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rows(m: ArrayView2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Softmax cross-entropy against the positive `q_i . q_{i+1}` with negatives
/// `q_i . q_{i+k}`, `|k| >= alpha`, averaged over `i`. Plain exponentials.
pub fn spatial_oracle(q: ArrayView2<f64>, alpha: usize) -> f64 {
    let q = rows(q);
    let n = q.len();
    let mut total = 0.0;
    for i in 0..n - 1 {
        let pos = dot(&q[i], &q[i + 1]);
        let mut denom = pos.exp();
        for (j, qj) in q.iter().enumerate() {
            if (j as i64 - i as i64).unsigned_abs() as usize >= alpha {
                denom += dot(&q[i], qj).exp();
            }
        }
        total += -(pos.exp() / denom).ln();
    }
    total / (n - 1) as f64
}

fn cycle_back(p: &[Vec<f64>], q: &[Vec<f64>], lambda: f64, eps: f64) -> f64 {
    let n = p.len();
    let d = p[0].len();
    let mut total = 0.0;
    for (i, pi) in p.iter().enumerate() {
        let alpha: Vec<f64> = q.iter().map(|qj| (-sq(pi, qj)).exp()).collect();
        let za: f64 = alpha.iter().sum();
        let mut soft = vec![0.0; d];
        for (a, qj) in alpha.iter().zip(q) {
            for (s, v) in soft.iter_mut().zip(qj) {
                *s += a / za * v;
            }
        }
        let beta: Vec<f64> = p.iter().map(|pk| (-sq(&soft, pk)).exp()).collect();
        let zb: f64 = beta.iter().sum();
        let mu: f64 = beta
            .iter()
            .enumerate()
            .map(|(k, b)| k as f64 * b / zb)
            .sum();
        let var: f64 = beta
            .iter()
            .enumerate()
            .map(|(k, b)| b / zb * (k as f64 - mu).powi(2))
            .sum();
        total += (i as f64 - mu).powi(2) / (var + eps) + lambda / 2.0 * (var + eps).ln();
    }
    total / n as f64
}

/// Cycle-back Gaussian negative log-likelihood, straight from the
/// definitions; the symmetric form averages both directions.
pub fn inter_oracle(
    p: ArrayView2<f64>,
    q: ArrayView2<f64>,
    lambda: f64,
    eps: f64,
    symmetric: bool,
) -> f64 {
    let (p, q) = (rows(p), rows(q));
    if symmetric {
        0.5 * (cycle_back(&p, &q, lambda, eps) + cycle_back(&q, &p, lambda, eps))
    } else {
        cycle_back(&p, &q, lambda, eps)
    }
}

/// Minimum path cost over every monotone path, by explicit recursion.
pub fn dtw_brute(p: ArrayView2<f64>, q: ArrayView2<f64>) -> f64 {
    let (p, q) = (rows(p), rows(q));
    fn walk(i: usize, j: usize, p: &[Vec<f64>], q: &[Vec<f64>], acc: f64, best: &mut f64) {
        let acc = acc + sq(&p[i], &q[j]).sqrt();
        if i + 1 == p.len() && j + 1 == q.len() {
            *best = best.min(acc);
            return;
        }
        if i + 1 < p.len() {
            walk(i + 1, j, p, q, acc, best);
        }
        if j + 1 < q.len() {
            walk(i, j + 1, p, q, acc, best);
        }
        if i + 1 < p.len() && j + 1 < q.len() {
            walk(i + 1, j + 1, p, q, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(0, 0, &p, &q, 0.0, &mut best);
    best
}

pub fn kendall_brute(p: ArrayView2<f64>, q: ArrayView2<f64>) -> f64 {
    let (p, q) = (rows(p), rows(q));
    let nn: Vec<usize> = p
        .iter()
        .map(|pi| {
            let mut best = 0;
            for j in 1..q.len() {
                if sq(pi, &q[j]) < sq(pi, &q[best]) {
                    best = j;
                }
            }
            best
        })
        .collect();
    let n = p.len();
    let (mut conc, mut disc) = (0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            if nn[i] < nn[j] {
                conc += 1.0;
            } else {
                disc += 1.0;
            }
        }
    }
    2.0 * (conc - disc) / (n * (n - 1)) as f64
}

/// Largest eigenvalue of a symmetric matrix by power iteration.
pub fn power_iteration(m: &Array2<f64>, iters: usize) -> f64 {
    let n = m.nrows();
    let mut v = ndarray::Array1::from_shape_fn(n, |i| 1.0 + i as f64 * 0.01);
    for _ in 0..iters {
        let w = m.dot(&v);
        let norm = w.dot(&w).sqrt();
        v = w / norm;
    }
    v.dot(&m.dot(&v))
}

/// OLS with intercept via the normal equations and Gauss-Jordan elimination.
/// Returns `[intercept, w_1, ..., w_d]`.
pub fn normal_equations(x: ArrayView2<f64>, y: &[f64]) -> Vec<f64> {
    let (n, d) = x.dim();
    let k = d + 1;
    let design = |r: usize, c: usize| if c == 0 { 1.0 } else { x[[r, c - 1]] };
    let mut a = vec![vec![0.0; k + 1]; k];
    for i in 0..k {
        for j in 0..k {
            a[i][j] = (0..n).map(|r| design(r, i) * design(r, j)).sum();
        }
        a[i][k] = (0..n).map(|r| design(r, i) * y[r]).sum();
    }
    for c in 0..k {
        let piv = (c..k)
            .max_by(|&r1, &r2| a[r1][c].abs().total_cmp(&a[r2][c].abs()))
            .unwrap();
        a.swap(c, piv);
        let div = a[c][c];
        for v in a[c].iter_mut() {
            *v /= div;
        }
        for r in 0..k {
            if r != c {
                let f = a[r][c];
                let src = a[c].clone();
                for (v, s) in a[r].iter_mut().zip(&src) {
                    *v -= f * s;
                }
            }
        }
    }
    a.iter().map(|row| row[k]).collect()
}

/// Small encoder configuration for gradient checks.
pub fn tiny_encoder(input_dim: usize, embed_dim: usize) -> EncoderConfig {
    EncoderConfig {
        input_dim,
        hidden_dim: 6,
        context: 3,
        agg_hidden: 6,
        embed_dim,
        classifier_hidden1: 5,
        classifier_hidden2: 4,
    }
}

pub struct Dataset {
    pub dir: tempfile::TempDir,
    pub train: Vec<(String, CinePair)>,
    pub val: Vec<(String, CinePair)>,
}

/// The default synthetic dataset (200 train / 50 val pairs) written to disk
/// and loaded back through its manifest.
pub fn default_dataset() -> Dataset {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&SynthConfig::default(), 250, [0.8, 0.2, 0.0], dir.path()).unwrap();
    let m = Manifest::load(&dir.path().join("manifest.json")).unwrap();
    let train = m.load_split(Split::Train).unwrap();
    let val = m.load_split(Split::Val).unwrap();
    Dataset { dir, train, val }
}

pub struct Trained {
    pub params: EncoderParams,
    pub seconds: f64,
}

/// Trains with the default configuration except for the loss weights.
pub fn train_with(train: &[(String, CinePair)], weights: LossWeights) -> Trained {
    let pairs: Vec<CinePair> = train.iter().map(|(_, p)| p.clone()).collect();
    let cfg = TrainConfig {
        weights,
        threads: 1,
        ..TrainConfig::default()
    };
    let enc = EncoderConfig::with_input_dim(pairs[0].a.feature_dim());
    let start = Instant::now();
    let out = train_pairs(&pairs, &enc, &cfg, None).unwrap();
    Trained {
        params: out.params,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

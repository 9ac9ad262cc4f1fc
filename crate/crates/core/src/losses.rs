//! Self-supervised objectives on embedding sequences.
//!
//! * temporal intra-view: binary cross-entropy of the triplet order classifier,
//! * spatial intra-view: n-tuplet softmax cross-entropy with the next frame as
//!   the positive and frames at least `alpha` positions away as negatives,
//! * inter-view: soft-nearest-neighbour cycle back-projection scored by a
//!   Gaussian negative log-likelihood around the query index.
//!
//! Every loss returns its value together with the exact gradient w.r.t. the
//! embeddings it consumed.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    backward_into, classifier_backward_into, classifier_cached, forward_cached, EncoderParams,
};
use crate::error::{Error, Result};

/// Probability clamp for the temporal cross-entropy.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub spatial: f64,
    pub temporal: f64,
    pub inter: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            spatial: 0.25,
            temporal: 0.25,
            inter: 0.5,
        }
    }
}

impl LossWeights {
    pub fn new(spatial: f64, temporal: f64, inter: f64) -> Self {
        Self {
            spatial,
            temporal,
            inter,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.spatial, self.temporal, self.inter];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be >= 0: {self:?}"
            )));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(Error::InvalidConfig(
                "at least one loss weight must be > 0".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Temporal intra-view

/// Three distinct frame indices in presentation order; `sorted` when the
/// order is monotone (either direction).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletSample {
    pub indices: [usize; 3],
    pub sorted: bool,
    pub window_start: usize,
}

impl TripletSample {
    pub fn label(&self) -> f64 {
        if self.sorted {
            1.0
        } else {
            0.0
        }
    }

    pub fn is_monotone(indices: [usize; 3]) -> bool {
        let [a, b, c] = indices;
        (a < b && b < c) || (a > b && b > c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TripletConfig {
    pub n_total: usize,
    pub n_unsorted: usize,
    pub window_len: usize,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            n_total: 8,
            n_unsorted: 6,
            window_len: 7,
        }
    }
}

/// Mean absolute difference between consecutive frames.
pub fn motion_profile(frames: ArrayView2<f64>) -> Result<Vec<f64>> {
    let (t, f) = frames.dim();
    if t < 2 {
        return Err(Error::Shape(format!(
            "motion needs at least 2 frames, got {t}"
        )));
    }
    Ok((0..t - 1)
        .map(|i| {
            let a = frames.row(i);
            let b = frames.row(i + 1);
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| (y - x).abs())
                .sum::<f64>()
                / f as f64
        })
        .collect())
}

const UNSORTED_ORDERS: [[usize; 3]; 4] = [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1]];

/// Draws order-verification triplets from motion-weighted windows.
///
/// A window is chosen with probability proportional to the motion it
/// contains (uniform when the cine is static), then three distinct frames in
/// it are drawn. The first `n_total - n_unsorted` samples are presented in
/// ascending or descending order, the rest in one of the four non-monotone
/// orders.
pub fn sample_triplets<R: Rng + ?Sized>(
    frames: ArrayView2<f64>,
    rng: &mut R,
    cfg: &TripletConfig,
) -> Result<Vec<TripletSample>> {
    let t = frames.nrows();
    if t < 3 {
        return Err(Error::Shape(format!(
            "triplets need at least 3 frames, got {t}"
        )));
    }
    if cfg.n_unsorted > cfg.n_total {
        return Err(Error::InvalidConfig(format!(
            "n_unsorted {} exceeds n_total {}",
            cfg.n_unsorted, cfg.n_total
        )));
    }
    let window = cfg.window_len.clamp(3, t);
    let motion = motion_profile(frames)?;
    let n_windows = t - window + 1;
    let weights: Vec<f64> = (0..n_windows)
        .map(|s| motion[s..s + window - 1].iter().sum())
        .collect();
    let picker = WeightedIndex::new(&weights).ok();

    let mut out = Vec::with_capacity(cfg.n_total);
    for n in 0..cfg.n_total {
        let start = match &picker {
            Some(p) => p.sample(rng),
            None => rng.random_range(0..n_windows),
        };
        let mut pick = sample_indices(rng, window, 3).into_vec();
        pick.sort_unstable();
        let base = [start + pick[0], start + pick[1], start + pick[2]];
        let sorted = n < cfg.n_total - cfg.n_unsorted;
        let indices = if sorted {
            if rng.random_bool(0.5) {
                base
            } else {
                [base[2], base[1], base[0]]
            }
        } else {
            let order = UNSORTED_ORDERS[rng.random_range(0..UNSORTED_ORDERS.len())];
            [base[order[0]], base[order[1]], base[order[2]]]
        };
        out.push(TripletSample {
            indices,
            sorted,
            window_start: start,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TemporalLoss {
    pub value: f64,
    pub d_embeddings: Array2<f64>,
    /// Only the classifier fields are populated.
    pub d_params: EncoderParams,
}

/// Mean binary cross-entropy of the order classifier over `samples`.
pub fn temporal_intra_loss(
    params: &EncoderParams,
    embeddings: ArrayView2<f64>,
    samples: &[TripletSample],
) -> Result<TemporalLoss> {
    if samples.is_empty() {
        return Err(Error::Empty(
            "temporal loss needs at least one triplet".into(),
        ));
    }
    let (t, d) = embeddings.dim();
    let mut d_embeddings = Array2::zeros((t, d));
    let mut d_params = EncoderParams::zeros(&params.config);
    let scale = 1.0 / samples.len() as f64;
    let mut value = 0.0;
    for s in samples {
        if s.indices.iter().any(|&i| i >= t) {
            return Err(Error::Shape(format!(
                "triplet {:?} outside {t} frames",
                s.indices
            )));
        }
        let triplet = embeddings.select(Axis(0), &s.indices);
        let cache = classifier_cached(params, triplet.view())?;
        let p = cache.prob_sorted();
        let c = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let o = s.label();
        value -= scale * ((1.0 - o) * (1.0 - c).ln() + o * c.ln());

        let d_c = if c == p {
            -scale * (o / c - (1.0 - o) / (1.0 - c))
        } else {
            0.0
        };
        let d_l1 = d_c * p * (1.0 - p);
        let d_trip = classifier_backward_into(params, &cache, [-d_l1, d_l1], &mut d_params);
        for (row, &i) in d_trip.rows().into_iter().zip(&s.indices) {
            let mut dst = d_embeddings.row_mut(i);
            dst += &row;
        }
    }
    Ok(TemporalLoss {
        value,
        d_embeddings,
        d_params,
    })
}

// ---------------------------------------------------------------------------
// Spatial intra-view

fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

/// n-tuplet loss: for each `i < n - 1` the positive is `q_i . q_{i+1}` and
/// the negatives are `q_i . q_j` for every `|j - i| >= alpha`.
pub fn spatial_intra_loss(q: ArrayView2<f64>, alpha: usize) -> Result<(f64, Array2<f64>)> {
    let (n, d) = q.dim();
    if n < 2 {
        return Err(Error::Shape(format!(
            "spatial loss needs at least 2 frames, got {n}"
        )));
    }
    if alpha == 0 {
        return Err(Error::InvalidConfig("alpha must be >= 1".into()));
    }
    let gram = q.dot(&q.t());
    let scale = 1.0 / (n - 1) as f64;
    let mut grad = Array2::zeros((n, d));
    let mut value = 0.0;
    let mut logits = Vec::with_capacity(n);
    let mut partners = Vec::with_capacity(n);
    for i in 0..n - 1 {
        logits.clear();
        partners.clear();
        logits.push(gram[[i, i + 1]]);
        partners.push(i + 1);
        for j in (0..n).filter(|&j| j.abs_diff(i) >= alpha) {
            logits.push(gram[[i, j]]);
            partners.push(j);
        }
        let lse = log_sum_exp(&logits);
        value += scale * (lse - logits[0]);

        // d term / d logit_m = softmax_m - [m == 0]
        for (m, (&l, &j)) in logits.iter().zip(&partners).enumerate() {
            let mut w = (l - lse).exp();
            if m == 0 {
                w -= 1.0;
            }
            let w = scale * w;
            if w == 0.0 {
                continue;
            }
            let qj = q.row(j).to_owned();
            let qi = q.row(i).to_owned();
            grad.row_mut(i).scaled_add(w, &qj);
            grad.row_mut(j).scaled_add(w, &qi);
        }
    }
    Ok((value, grad))
}

// ---------------------------------------------------------------------------
// Inter-view

fn softmax_neg(dists: &[f64]) -> Vec<f64> {
    let m = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let mut w: Vec<f64> = dists.iter().map(|d| (m - d).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= z);
    w
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn soft_nn_weights(p: ArrayView1<f64>, q: ArrayView2<f64>) -> Vec<f64> {
    let dists: Vec<f64> = q.rows().into_iter().map(|row| sq_dist(p, row)).collect();
    softmax_neg(&dists)
}

/// Softmax-weighted combination of the rows of `q`, weights
/// `softmax_j(-|p - q_j|^2)`.
pub fn soft_nn(p: ArrayView1<f64>, q: ArrayView2<f64>) -> Result<Array1<f64>> {
    if q.nrows() == 0 {
        return Err(Error::Empty(
            "soft nearest neighbour needs candidates".into(),
        ));
    }
    if p.len() != q.ncols() {
        return Err(Error::Shape(format!(
            "query has dimension {}, candidates {}",
            p.len(),
            q.ncols()
        )));
    }
    let w = soft_nn_weights(p, q);
    Ok(Array1::from(w).dot(&q))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterViewConfig {
    pub lambda_reg: f64,
    pub eps_var: f64,
    /// Average both directions; `false` scores `P -> Q -> P` only.
    pub symmetric: bool,
}

impl Default for InterViewConfig {
    fn default() -> Self {
        Self {
            lambda_reg: 0.001,
            eps_var: 1e-6,
            symmetric: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InterViewLoss {
    pub value: f64,
    pub d_p: Array2<f64>,
    pub d_q: Array2<f64>,
}

/// One direction: every `p_i` is projected softly onto `q`, the projection
/// is matched softly back onto `p`, and the resulting index distribution is
/// scored against `i`.
fn inter_view_directional(
    p: ArrayView2<f64>,
    q: ArrayView2<f64>,
    cfg: &InterViewConfig,
    weight: f64,
    d_p: &mut Array2<f64>,
    d_q: &mut Array2<f64>,
) -> f64 {
    let (n, d) = p.dim();
    let g = weight / n as f64;
    let mut value = 0.0;
    for i in 0..n {
        let alpha = soft_nn_weights(p.row(i), q);
        let alpha_arr = Array1::from(alpha.clone());
        let q_tilde = alpha_arr.dot(&q);

        let back: Vec<f64> = p
            .rows()
            .into_iter()
            .map(|row| sq_dist(q_tilde.view(), row))
            .collect();
        let beta = softmax_neg(&back);
        let mu: f64 = beta.iter().enumerate().map(|(k, b)| k as f64 * b).sum();
        let var: f64 = beta
            .iter()
            .enumerate()
            .map(|(k, b)| b * (k as f64 - mu).powi(2))
            .sum();
        let s = var + cfg.eps_var;
        let resid = i as f64 - mu;
        value += (resid * resid / s + 0.5 * cfg.lambda_reg * s.ln()) / n as f64;

        let g_mu = g * (-2.0 * resid / s);
        let g_s = g * (-(resid * resid) / (s * s) + 0.5 * cfg.lambda_reg / s);
        let g_beta: Vec<f64> = (0..n)
            .map(|k| {
                let kf = k as f64;
                g_mu * kf + g_s * (kf - mu).powi(2)
            })
            .collect();
        let inner: f64 = beta.iter().zip(&g_beta).map(|(b, gb)| b * gb).sum();

        let mut g_qt = Array1::<f64>::zeros(d);
        for k in 0..n {
            // back[k] = |q_tilde - p_k|^2, beta = softmax(-back)
            let g_back = -beta[k] * (g_beta[k] - inner);
            if g_back == 0.0 {
                continue;
            }
            let diff = &q_tilde - &p.row(k);
            g_qt.scaled_add(2.0 * g_back, &diff);
            d_p.row_mut(k).scaled_add(-2.0 * g_back, &diff);
        }

        let g_alpha: Vec<f64> = q.rows().into_iter().map(|row| row.dot(&g_qt)).collect();
        let inner_a: f64 = alpha.iter().zip(&g_alpha).map(|(a, ga)| a * ga).sum();
        for (j, qj) in q.rows().into_iter().enumerate() {
            d_q.row_mut(j).scaled_add(alpha[j], &g_qt);
            let g_dist = -alpha[j] * (g_alpha[j] - inner_a);
            if g_dist == 0.0 {
                continue;
            }
            let diff = &p.row(i) - &qj;
            d_p.row_mut(i).scaled_add(2.0 * g_dist, &diff);
            d_q.row_mut(j).scaled_add(-2.0 * g_dist, &diff);
        }
    }
    value * weight
}

/// Cycle-back consistency between two embedding sequences.
pub fn inter_view_loss(
    p: ArrayView2<f64>,
    q: ArrayView2<f64>,
    cfg: &InterViewConfig,
) -> Result<InterViewLoss> {
    if p.nrows() < 2 || q.nrows() < 1 {
        return Err(Error::Shape(format!(
            "inter-view loss needs N >= 2 and M >= 1, got {} and {}",
            p.nrows(),
            q.nrows()
        )));
    }
    if cfg.symmetric && q.nrows() < 2 {
        return Err(Error::Shape(
            "symmetric inter-view loss needs M >= 2".into(),
        ));
    }
    if p.ncols() != q.ncols() {
        return Err(Error::Shape(format!(
            "embedding dimensions differ: {} vs {}",
            p.ncols(),
            q.ncols()
        )));
    }
    let mut d_p = Array2::zeros(p.dim());
    let mut d_q = Array2::zeros(q.dim());
    let value = if cfg.symmetric {
        inter_view_directional(p, q, cfg, 0.5, &mut d_p, &mut d_q)
            + inter_view_directional(q, p, cfg, 0.5, &mut d_q, &mut d_p)
    } else {
        inter_view_directional(p, q, cfg, 1.0, &mut d_p, &mut d_q)
    };
    Ok(InterViewLoss { value, d_p, d_q })
}

// ---------------------------------------------------------------------------
// Combined objective

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: usize,
    pub inter: InterViewConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 5,
            inter: InterViewConfig::default(),
        }
    }
}

/// A subsampled training pair with its triplets already drawn.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub frames_a: Array2<f64>,
    pub frames_b: Array2<f64>,
    pub triplets_a: Vec<TripletSample>,
    pub triplets_b: Vec<TripletSample>,
}

#[derive(Debug, Clone)]
pub struct CombinedLoss {
    pub value: f64,
    pub spatial: f64,
    pub temporal: f64,
    pub inter: f64,
    pub grads: EncoderParams,
}

struct PairTerms {
    spatial: f64,
    temporal: f64,
    inter: f64,
    grads: EncoderParams,
}

fn pair_terms(
    pair: &PreparedPair,
    params: &EncoderParams,
    w: &LossWeights,
    cfg: &LossConfig,
    scale: f64,
) -> Result<PairTerms> {
    let cache_a = forward_cached(params, pair.frames_a.view())?;
    let cache_b = forward_cached(params, pair.frames_b.view())?;
    let ea = cache_a.embeddings.view();
    let eb = cache_b.embeddings.view();

    let (sa, dsa) = spatial_intra_loss(ea, cfg.alpha)?;
    let (sb, dsb) = spatial_intra_loss(eb, cfg.alpha)?;
    let ta = temporal_intra_loss(params, ea, &pair.triplets_a)?;
    let tb = temporal_intra_loss(params, eb, &pair.triplets_b)?;
    let iv = inter_view_loss(ea, eb, &cfg.inter)?;

    // per-pair terms average the two cines; `scale` averages over the batch
    let ks = scale * w.spatial * 0.5;
    let kt = scale * w.temporal * 0.5;
    let ki = scale * w.inter;
    let up_a = &dsa * ks + &ta.d_embeddings * kt + &iv.d_p * ki;
    let up_b = &dsb * ks + &tb.d_embeddings * kt + &iv.d_q * ki;

    let mut grads = EncoderParams::zeros(&params.config);
    backward_into(
        params,
        pair.frames_a.view(),
        &cache_a,
        up_a.view(),
        &mut grads,
    )?;
    backward_into(
        params,
        pair.frames_b.view(),
        &cache_b,
        up_b.view(),
        &mut grads,
    )?;
    grads.axpy(kt, &ta.d_params);
    grads.axpy(kt, &tb.d_params);

    Ok(PairTerms {
        spatial: 0.5 * (sa + sb),
        temporal: 0.5 * (ta.value + tb.value),
        inter: iv.value,
        grads,
    })
}

/// Weighted sum of the three objectives averaged over a batch, with the
/// gradient chained through the encoder.
///
/// Pairs are evaluated on the current rayon pool; partial results are
/// reduced in batch order so the outcome does not depend on scheduling.
pub fn combined_loss(
    batch: &[PreparedPair],
    params: &EncoderParams,
    weights: &LossWeights,
    cfg: &LossConfig,
) -> Result<CombinedLoss> {
    weights.validate()?;
    if batch.is_empty() {
        return Err(Error::Empty("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let terms = batch
        .par_iter()
        .map(|pair| pair_terms(pair, params, weights, cfg, scale))
        .collect::<Result<Vec<_>>>()?;

    let mut grads = EncoderParams::zeros(&params.config);
    let (mut spatial, mut temporal, mut inter) = (0.0, 0.0, 0.0);
    for t in &terms {
        spatial += scale * t.spatial;
        temporal += scale * t.temporal;
        inter += scale * t.inter;
        grads.axpy(1.0, &t.grads);
    }
    Ok(CombinedLoss {
        value: weights.spatial * spatial + weights.temporal * temporal + weights.inter * inter,
        spatial,
        temporal,
        inter,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, EncoderConfig};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(r: usize, c: usize, seed: u64, scale: f64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((r, c), |_| scale * rng.random_range(-1.0..1.0))
    }

    #[test]
    fn motion_profile_examples() {
        assert_eq!(
            motion_profile(Array2::ones((5, 3)).view()).unwrap(),
            vec![0.0; 4]
        );
        let frames = array![[0.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0]];
        assert_eq!(motion_profile(frames.view()).unwrap(), vec![1.0]);
        let x = random(9, 4, 1, 1.0);
        let m = motion_profile(x.view()).unwrap();
        for t in 0..8 {
            let mut acc = 0.0;
            for j in 0..4 {
                acc += (x[[t + 1, j]] - x[[t, j]]).abs();
            }
            assert!((m[t] - acc / 4.0).abs() < 1e-15);
        }
        assert!(motion_profile(Array2::zeros((1, 3)).view()).is_err());
    }

    #[test]
    fn triplet_counts_and_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(20, 4, 2, 1.0);
        let cfg = TripletConfig::default();
        for frames in [x.clone(), Array2::zeros((20, 4))] {
            let s = sample_triplets(frames.view(), &mut rng, &cfg).unwrap();
            assert_eq!(s.len(), 8);
            assert_eq!(s.iter().filter(|t| !t.sorted).count(), 6);
            for t in &s {
                assert_eq!(TripletSample::is_monotone(t.indices), t.sorted);
                let [a, b, c] = t.indices;
                assert!(a != b && b != c && a != c);
                assert!(t
                    .indices
                    .iter()
                    .all(|&i| i >= t.window_start && i < t.window_start + 7));
            }
        }
        assert!(sample_triplets(Array2::zeros((2, 4)).view(), &mut rng, &cfg).is_err());
    }

    #[test]
    fn triplet_windows_follow_motion() {
        // single jump between frames 20 and 21, tiny background motion
        let mut x = random(40, 4, 3, 1e-3);
        for t in 21..40 {
            for j in 0..4 {
                x[[t, j]] += 5.0;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = TripletConfig {
            n_total: 1000,
            n_unsorted: 750,
            window_len: 7,
        };
        let s = sample_triplets(x.view(), &mut rng, &cfg).unwrap();
        // a window contains the jump iff it covers frames 20 and 21
        let hits = s
            .iter()
            .filter(|t| t.window_start <= 20 && t.window_start + 6 >= 21)
            .count();
        assert!(hits as f64 >= 0.9 * 1000.0, "hits {hits}");
    }

    #[test]
    fn temporal_loss_values() {
        let cfg = EncoderConfig {
            embed_dim: 3,
            ..Default::default()
        };
        let zero = EncoderParams::zeros(&cfg);
        let e = random(5, 3, 4, 1.0);
        let s = [TripletSample {
            indices: [0, 1, 2],
            sorted: true,
            window_start: 0,
        }];
        let l = temporal_intra_loss(&zero, e.view(), &s).unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-12);

        // bias-only classifier forced to the right answer
        let mut sure = zero.clone();
        sure.cls_b3[1] = 40.0;
        let l = temporal_intra_loss(&sure, e.view(), &s).unwrap();
        assert!(l.value <= 1e-6);
        assert!(temporal_intra_loss(&zero, e.view(), &[]).is_err());
    }

    fn brute_spatial(q: &Array2<f64>, alpha: usize) -> f64 {
        let n = q.nrows();
        let mut total = 0.0;
        for i in 0..n - 1 {
            let pos = q.row(i).dot(&q.row(i + 1)).exp();
            let mut denom = pos;
            for k in -(n as i64)..=(n as i64) {
                let j = i as i64 + k;
                if k.unsigned_abs() as usize >= alpha && j >= 0 && j < n as i64 {
                    denom += q.row(i).dot(&q.row(j as usize)).exp();
                }
            }
            total += -(pos / denom).ln();
        }
        total / (n - 1) as f64
    }

    #[test]
    fn spatial_examples() {
        let q = random(2, 3, 5, 1.0);
        assert_eq!(spatial_intra_loss(q.view(), 5).unwrap().0, 0.0);

        let same = Array2::from_elem((8, 2), 0.3);
        let alpha = 3;
        let expected: f64 = (0..7)
            .map(|i: usize| {
                let k = (0..8usize).filter(|&j| j.abs_diff(i) >= alpha).count();
                (1.0 + k as f64).ln()
            })
            .sum::<f64>()
            / 7.0;
        let (v, _) = spatial_intra_loss(same.view(), alpha).unwrap();
        assert!((v - expected).abs() < 1e-12);

        for seed in 0..10 {
            let q = random(8, 4, 100 + seed, 1.5);
            let (v, _) = spatial_intra_loss(q.view(), 3).unwrap();
            assert!((v - brute_spatial(&q, 3)).abs() < 1e-10);
        }
    }

    #[test]
    fn soft_nn_examples() {
        let q = array![[0.5, -1.0], [0.5, -1.0]];
        let r = soft_nn(array![3.0, 2.0].view(), q.view()).unwrap();
        assert!((&r - &q.row(0)).iter().all(|v| v.abs() < 1e-15));

        let q = array![[1.0, 0.0], [-1.0, 0.0]];
        let r = soft_nn(array![0.0, 0.7].view(), q.view()).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-15));

        let q = array![[0.0], [2.0]];
        let r = soft_nn(array![0.0].view(), q.view()).unwrap();
        let e4 = (-4.0f64).exp();
        assert!((r[0] - 2.0 * e4 / (1.0 + e4)).abs() < 1e-15);
        assert!((r[0] - 0.0359).abs() < 1e-4);
    }

    #[test]
    fn inter_view_identity_and_uniform() {
        let n = 6;
        let p = Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { 10.0 * i as f64 } else { 0.0 });
        let cfg = InterViewConfig::default();
        let one_way = InterViewConfig {
            symmetric: false,
            ..cfg
        };
        let l = inter_view_loss(p.view(), p.view(), &one_way).unwrap();
        // quadratic part = value - (lambda/2) log(var + eps) per row
        let quad = l.value - 0.5 * cfg.lambda_reg * (0.0 + cfg.eps_var).ln();
        assert!(quad.abs() <= 1e-3, "quad {quad}");

        let same = Array2::from_elem((n, 3), 0.4);
        let mean = (n as f64 - 1.0) / 2.0;
        let var = (0..n).map(|k| (k as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let s = var + cfg.eps_var;
        let expected = (0..n)
            .map(|i| (i as f64 - mean).powi(2) / s + 0.5 * cfg.lambda_reg * s.ln())
            .sum::<f64>()
            / n as f64;
        let got = inter_view_loss(same.view(), same.view(), &cfg).unwrap();
        assert!((got.value - expected).abs() < 1e-12);
    }

    #[test]
    fn inter_view_reversal_invariance() {
        let p = random(6, 3, 8, 1.0);
        let q = random(5, 3, 9, 1.0);
        let cfg = InterViewConfig::default();
        let fwd = inter_view_loss(p.view(), q.view(), &cfg).unwrap().value;
        let rp = p.slice(ndarray::s![..;-1, ..]).to_owned();
        let rq = q.slice(ndarray::s![..;-1, ..]).to_owned();
        let rev = inter_view_loss(rp.view(), rq.view(), &cfg).unwrap().value;
        assert!((fwd - rev).abs() < 1e-10);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::new(0.0, 0.0, 0.0).validate().is_err());
        assert!(LossWeights::new(-1.0, 0.0, 1.0).validate().is_err());
        assert_eq!(LossWeights::default(), LossWeights::new(0.25, 0.25, 0.5));
    }

    fn tiny_batch(seed: u64) -> (EncoderParams, Vec<PreparedPair>) {
        let cfg = EncoderConfig {
            input_dim: 4,
            hidden_dim: 5,
            context: 3,
            agg_hidden: 5,
            embed_dim: 3,
            classifier_hidden1: 4,
            classifier_hidden2: 3,
        };
        let params = init_params(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tcfg = TripletConfig::default();
        let batch = (0..2)
            .map(|k| {
                let a = random(9, 4, seed * 10 + k, 1.0);
                let b = random(8, 4, seed * 10 + k + 5, 1.0);
                PreparedPair {
                    triplets_a: sample_triplets(a.view(), &mut rng, &tcfg).unwrap(),
                    triplets_b: sample_triplets(b.view(), &mut rng, &tcfg).unwrap(),
                    frames_a: a,
                    frames_b: b,
                }
            })
            .collect();
        (params, batch)
    }

    #[test]
    fn combined_selects_and_scales() {
        let (params, batch) = tiny_batch(1);
        let cfg = LossConfig::default();
        let inter_only =
            combined_loss(&batch, &params, &LossWeights::new(0.0, 0.0, 1.0), &cfg).unwrap();
        let mut expected = 0.0;
        for pair in &batch {
            let ea = crate::encoder::forward(&params, pair.frames_a.view())
                .unwrap()
                .0;
            let eb = crate::encoder::forward(&params, pair.frames_b.view())
                .unwrap()
                .0;
            expected += inter_view_loss(ea.view(), eb.view(), &cfg.inter)
                .unwrap()
                .value
                / 2.0;
        }
        assert!((inter_only.value - expected).abs() < 1e-12);

        let w = LossWeights::default();
        let base = combined_loss(&batch, &params, &w, &cfg).unwrap();
        let doubled = combined_loss(
            &batch,
            &params,
            &LossWeights::new(2.0 * w.spatial, 2.0 * w.temporal, 2.0 * w.inter),
            &cfg,
        )
        .unwrap();
        assert!((doubled.value - 2.0 * base.value).abs() < 1e-12);
        let (g1, g2) = (base.grads.flatten(), doubled.grads.flatten());
        assert!(g1.iter().zip(&g2).all(|(a, b)| (2.0 * a - b).abs() < 1e-12));

        assert!(combined_loss(&batch, &params, &LossWeights::new(0.0, 0.0, 0.0), &cfg).is_err());
    }
}

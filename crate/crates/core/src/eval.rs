//! Evaluation: Kendall's tau of nearest-neighbour matching, linear phase
//! regression R^2, one-shot keyframe transfer and 1-D PCA projections.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use std::collections::BTreeMap;
use std::str::FromStr;

use ndarray::{concatenate, Array2};
use rayon::prelude::*;

use crate::align::{dtw, warp};
use crate::data::{Cine, CinePair, Keyframe, KeyframeKind};
use crate::encoder::{forward, EncoderParams};
use crate::error::{Error, Result};

/// Ridge added when the normal equations are not positive definite.
pub const RIDGE_FALLBACK: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncMetrics {
    pub kendalls_tau: f64,
    pub n_pairs: usize,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the row of `q` closest to `p`; the lowest index wins ties.
pub fn nearest_neighbor(p: ArrayView1<f64>, q: ArrayView2<f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, row) in q.rows().into_iter().enumerate() {
        let d = sq_dist(p, row);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

/// Kendall's tau of the nearest-neighbour correspondence `P -> Q`. A pair
/// `i < j` is concordant iff `nn(i) < nn(j)`; equal neighbours count as
/// discordant.
pub fn kendalls_tau(p: ArrayView2<f64>, q: ArrayView2<f64>) -> Result<f64> {
    let n = p.nrows();
    if n < 2 {
        return Err(Error::Shape(format!("kendall's tau needs N >= 2, got {n}")));
    }
    if q.nrows() == 0 {
        return Err(Error::Empty(
            "kendall's tau needs a non-empty target".into(),
        ));
    }
    if p.ncols() != q.ncols() {
        return Err(Error::Shape(format!(
            "embedding dimensions differ: {} vs {}",
            p.ncols(),
            q.ncols()
        )));
    }
    let nn: Vec<usize> = p
        .rows()
        .into_iter()
        .map(|r| nearest_neighbor(r, q))
        .collect();
    let mut score = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            score += if nn[i] < nn[j] { 1 } else { -1 };
        }
    }
    Ok(2.0 * score as f64 / (n * (n - 1)) as f64)
}

/// Averages tau over pairs of embedding sequences.
pub fn mean_kendalls_tau<'a>(
    pairs: impl IntoIterator<Item = (ArrayView2<'a, f64>, ArrayView2<'a, f64>)>,
) -> Result<SyncMetrics> {
    let mut total = 0.0;
    let mut n = 0;
    for (p, q) in pairs {
        total += kendalls_tau(p, q)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("no pairs to evaluate".into()));
    }
    Ok(SyncMetrics {
        kendalls_tau: total / n as f64,
        n_pairs: n,
    })
}

// ---------------------------------------------------------------------------
// Phase regression

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub weights: Array1<f64>,
    pub intercept: f64,
}

impl LinearModel {
    pub fn predict(&self, x: ArrayView2<f64>) -> Array1<f64> {
        x.dot(&self.weights) + self.intercept
    }
}

/// Least squares with an unpenalized intercept and an optional ridge on the
/// weights. Falls back to [`RIDGE_FALLBACK`] when the system is singular.
pub fn fit_linear(x: ArrayView2<f64>, y: &[f64], ridge: f64) -> Result<LinearModel> {
    let (n, d) = x.dim();
    if y.len() != n {
        return Err(Error::Shape(format!("{n} rows but {} labels", y.len())));
    }
    if n == 0 {
        return Err(Error::Empty("no training rows".into()));
    }
    let x_mean = x.mean_axis(Axis(0)).expect("non-empty");
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let xc = &x - &x_mean.view().insert_axis(Axis(0));
    let yc: Array1<f64> = y.iter().map(|v| v - y_mean).collect();

    let gram = xc.t().dot(&xc);
    let rhs = xc.t().dot(&yc);
    let a = DMatrix::from_fn(d, d, |i, j| gram[[i, j]]);
    let b = DVector::from_iterator(d, rhs.iter().copied());
    let solve = |lambda: f64| {
        let mut m = a.clone();
        for i in 0..d {
            m[(i, i)] += lambda;
        }
        m.cholesky().map(|c| c.solve(&b))
    };
    let w = match solve(ridge) {
        Some(w) => w,
        None => solve(ridge + RIDGE_FALLBACK)
            .ok_or_else(|| Error::Undefined("normal equations are singular".into()))?,
    };
    let weights: Array1<f64> = w.iter().copied().collect();
    let intercept = y_mean - x_mean.dot(&weights);
    Ok(LinearModel { weights, intercept })
}

/// `1 - SS_res / SS_tot` with the mean taken over `y_true`.
pub fn r2_score(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    if y_true.len() != y_pred.len() || y_true.is_empty() {
        return Err(Error::Shape(
            "r2 needs equal, non-empty label vectors".into(),
        ));
    }
    let mean = y_true.iter().sum::<f64>() / y_true.len() as f64;
    let ss_tot: f64 = y_true.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Undefined("r2 of constant labels".into()));
    }
    let ss_res: f64 = y_true
        .iter()
        .zip(y_pred)
        .map(|(y, p)| (y - p).powi(2))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Fits embedding -> phase label on the training rows and scores R^2 on the
/// test rows.
pub fn phase_regression_r2(
    train_x: ArrayView2<f64>,
    train_y: &[f64],
    test_x: ArrayView2<f64>,
    test_y: &[f64],
) -> Result<f64> {
    phase_regression_r2_ridge(train_x, train_y, test_x, test_y, 0.0)
}

pub fn phase_regression_r2_ridge(
    train_x: ArrayView2<f64>,
    train_y: &[f64],
    test_x: ArrayView2<f64>,
    test_y: &[f64],
    ridge: f64,
) -> Result<f64> {
    let d = train_x.ncols();
    if train_x.nrows() < d + 1 {
        return Err(Error::Shape(format!(
            "need at least {} training rows, got {}",
            d + 1,
            train_x.nrows()
        )));
    }
    if test_x.ncols() != d {
        return Err(Error::Shape("train and test dimensions differ".into()));
    }
    if test_x.nrows() != test_y.len() {
        return Err(Error::Shape("test rows and labels differ".into()));
    }
    let model = fit_linear(train_x, train_y, ridge)?;
    let pred = model.predict(test_x);
    r2_score(test_y, pred.as_slice().expect("contiguous"))
}

/// Rows of `embeddings` with a defined phase label, plus those labels.
pub fn labeled_rows(cine: &Cine, embeddings: ArrayView2<f64>) -> Result<(Vec<usize>, Vec<f64>)> {
    let labels = cine.phase_labels()?;
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    for (t, y) in labels.into_iter().enumerate() {
        if let Some(y) = y {
            if t < embeddings.nrows() {
                rows.push(t);
                ys.push(y);
            }
        }
    }
    Ok((rows, ys))
}

// ---------------------------------------------------------------------------
// One-shot keyframes

/// Transfers each labeled reference keyframe to the candidate through the
/// DTW warp. One prediction per reference label, in label order.
pub fn one_shot_keyframes(
    reference: &Cine,
    reference_embeddings: ArrayView2<f64>,
    candidate_embeddings: ArrayView2<f64>,
) -> Result<Vec<Keyframe>> {
    let has = |k| reference.keyframes.iter().any(|kf| kf.kind == k);
    if !has(KeyframeKind::ED) || !has(KeyframeKind::ES) {
        return Err(Error::InvalidKeyframes(
            "reference needs at least one ED and one ES label".into(),
        ));
    }
    if reference_embeddings.nrows() != reference.len() {
        return Err(Error::Shape(format!(
            "reference has {} frames but {} embeddings",
            reference.len(),
            reference_embeddings.nrows()
        )));
    }
    let path = dtw(reference_embeddings, candidate_embeddings)?;
    let map = warp(&path, reference_embeddings.nrows())?;
    Ok(reference
        .keyframes
        .iter()
        .map(|k| Keyframe::new(k.kind, map[k.index]))
        .collect())
}

/// A predicted keyframe matched to its ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyframeMatch {
    pub kind: KeyframeKind,
    pub predicted: usize,
    pub truth: usize,
    pub frame_time_ms: f64,
}

impl KeyframeMatch {
    pub fn error_frames(&self) -> f64 {
        self.predicted as f64 - self.truth as f64
    }
}

/// Pairs every ground-truth keyframe with the nearest prediction of the same
/// kind. Truth labels with no prediction of their kind are skipped.
pub fn match_keyframes(
    predictions: &[Keyframe],
    truth: &[Keyframe],
    frame_time_ms: f64,
) -> Vec<KeyframeMatch> {
    truth
        .iter()
        .filter_map(|t| {
            predictions
                .iter()
                .filter(|p| p.kind == t.kind)
                .min_by_key(|p| p.index.abs_diff(t.index))
                .map(|p| KeyframeMatch {
                    kind: t.kind,
                    predicted: p.index,
                    truth: t.index,
                    frame_time_ms,
                })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub mae_frames: f64,
    pub std_frames: f64,
    pub mae_ms: f64,
    pub std_ms: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyframeStats {
    pub ed: ErrorSummary,
    pub es: ErrorSummary,
    pub n: usize,
}

fn summarize(errors_frames: &[f64], errors_ms: &[f64]) -> ErrorSummary {
    let n = errors_frames.len();
    if n == 0 {
        return ErrorSummary::default();
    }
    let mae = |e: &[f64]| e.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    // population standard deviation of the signed error
    let std = |e: &[f64]| {
        let mean = e.iter().sum::<f64>() / n as f64;
        (e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
    };
    ErrorSummary {
        mae_frames: mae(errors_frames),
        std_frames: std(errors_frames),
        mae_ms: mae(errors_ms),
        std_ms: std(errors_ms),
        n,
    }
}

/// Mean absolute error and standard deviation of the signed error per
/// keyframe kind, in frames and milliseconds.
pub fn keyframe_stats(matches: &[KeyframeMatch]) -> Result<KeyframeStats> {
    if matches.is_empty() {
        return Err(Error::Empty("no keyframe predictions".into()));
    }
    let of = |kind| {
        let frames: Vec<f64> = matches
            .iter()
            .filter(|m| m.kind == kind)
            .map(KeyframeMatch::error_frames)
            .collect();
        let ms: Vec<f64> = matches
            .iter()
            .filter(|m| m.kind == kind)
            .map(|m| m.error_frames() * m.frame_time_ms)
            .collect();
        summarize(&frames, &ms)
    };
    Ok(KeyframeStats {
        ed: of(KeyframeKind::ED),
        es: of(KeyframeKind::ES),
        n: matches.len(),
    })
}

// ---------------------------------------------------------------------------
// PCA

/// Projection of the centred rows onto the leading principal axis, signed so
/// the first value is not above the last. Zero-variance input maps to zeros.
pub fn pca_1d(e: ArrayView2<f64>) -> Result<Vec<f64>> {
    let (t, d) = e.dim();
    if t < 2 {
        return Err(Error::Shape(format!("pca needs at least 2 rows, got {t}")));
    }
    let mean = e.mean_axis(Axis(0)).expect("non-empty");
    let centered = &e - &mean.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / t as f64;
    let total_var: f64 = (0..d).map(|i| cov[[i, i]]).sum();
    if total_var <= f64::EPSILON * f64::EPSILON {
        return Ok(vec![0.0; t]);
    }
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let lead = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("d >= 1");
    let axis: Array1<f64> = eig.eigenvectors.column(lead).iter().copied().collect();
    let mut proj = centered.dot(&axis).to_vec();
    if proj[0] > proj[t - 1] {
        proj.iter_mut().for_each(|v| *v = -*v);
    }
    Ok(proj)
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Tau,
    R2,
    Oneshot,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Tau, Metric::R2, Metric::Oneshot];
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tau" => Ok(Metric::Tau),
            "r2" => Ok(Metric::R2),
            "oneshot" => Ok(Metric::Oneshot),
            other => Err(Error::InvalidConfig(format!(
                "unknown metric {other:?}; expected tau, r2 or oneshot"
            ))),
        }
    }
}

/// Labeled reference used for one view in the one-shot evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneShotReference {
    pub view: String,
    pub pair_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneShotReport {
    pub references: Vec<OneShotReference>,
    pub stats: KeyframeStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_pairs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sync: Option<SyncMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oneshot: Option<OneShotReport>,
}

type Embedded = (Array2<f64>, Array2<f64>);

fn embed_pairs(params: &EncoderParams, pairs: &[(String, CinePair)]) -> Result<Vec<Embedded>> {
    pairs
        .par_iter()
        .map(|(_, p)| {
            Ok((
                forward(params, p.a.frames.view())?.0,
                forward(params, p.b.frames.view())?.0,
            ))
        })
        .collect()
}

fn stack_labeled(
    pairs: &[(String, CinePair)],
    emb: &[Embedded],
) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut blocks = Vec::new();
    let mut ys = Vec::new();
    for ((_, p), (ea, eb)) in pairs.iter().zip(emb) {
        for (cine, e) in [(&p.a, ea), (&p.b, eb)] {
            let (rows, y) = labeled_rows(cine, e.view())?;
            blocks.push(e.select(Axis(0), &rows));
            ys.extend(y);
        }
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    if views.is_empty() {
        return Err(Error::Empty("no labeled frames".into()));
    }
    let x = concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((x, ys))
}

/// Computes the requested metrics on `eval` pairs. `train` pairs supply the
/// regression fit and, per view, the first cine serves as the single labeled
/// one-shot reference.
pub fn evaluate_pairs(
    params: &EncoderParams,
    train: &[(String, CinePair)],
    eval: &[(String, CinePair)],
    metrics: &[Metric],
) -> Result<MetricsReport> {
    if eval.is_empty() {
        return Err(Error::Empty("evaluation split has no pairs".into()));
    }
    let eval_emb = embed_pairs(params, eval)?;
    let needs_train = metrics.iter().any(|m| *m != Metric::Tau);
    let train_emb = if needs_train {
        if train.is_empty() {
            return Err(Error::Empty("training split has no pairs".into()));
        }
        embed_pairs(params, train)?
    } else {
        Vec::new()
    };

    let mut report = MetricsReport {
        n_pairs: eval.len(),
        sync: None,
        r2: None,
        oneshot: None,
    };
    if metrics.contains(&Metric::Tau) {
        report.sync = Some(mean_kendalls_tau(
            eval_emb.iter().map(|(a, b)| (a.view(), b.view())),
        )?);
    }
    if metrics.contains(&Metric::R2) {
        let (tx, ty) = stack_labeled(train, &train_emb)?;
        let (vx, vy) = stack_labeled(eval, &eval_emb)?;
        report.r2 = Some(phase_regression_r2(tx.view(), &ty, vx.view(), &vy)?);
    }
    if metrics.contains(&Metric::Oneshot) {
        let mut refs: BTreeMap<&str, (&str, &Cine, &Array2<f64>)> = BTreeMap::new();
        for ((id, p), (ea, eb)) in train.iter().zip(&train_emb) {
            for (cine, e) in [(&p.a, ea), (&p.b, eb)] {
                refs.entry(cine.view.as_str())
                    .or_insert((id.as_str(), cine, e));
            }
        }
        let mut matches = Vec::new();
        for ((_, p), (ea, eb)) in eval.iter().zip(&eval_emb) {
            for (cine, e) in [(&p.a, ea), (&p.b, eb)] {
                let (_, rc, re) = refs.get(cine.view.as_str()).ok_or_else(|| {
                    Error::Empty(format!("no training cine for view {:?}", cine.view))
                })?;
                let pred = one_shot_keyframes(rc, re.view(), e.view())?;
                matches.extend(match_keyframes(&pred, &cine.keyframes, cine.frame_time_ms));
            }
        }
        let used: Vec<OneShotReference> = refs
            .iter()
            .filter(|(view, _)| {
                eval.iter()
                    .any(|(_, p)| p.a.view == **view || p.b.view == **view)
            })
            .map(|(view, (id, _, _))| OneShotReference {
                view: view.to_string(),
                pair_id: id.to_string(),
            })
            .collect();
        report.oneshot = Some(OneShotReport {
            references: used,
            stats: keyframe_stats(&matches)?,
        });
    }
    Ok(report)
}

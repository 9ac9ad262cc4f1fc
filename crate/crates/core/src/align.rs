//! Dynamic time warping between embedding sequences and multi-sequence
//! synchronization against a reference.

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Monotone correspondence from `(0, 0)` to `(N-1, M-1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPath {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl AlignmentPath {
    /// Checks endpoints and the unit step set.
    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        let (first, last) = match (self.pairs.first(), self.pairs.last()) {
            (Some(f), Some(l)) => (*f, *l),
            _ => return Err(Error::Empty("alignment path has no pairs".into())),
        };
        if first != (0, 0) || last != (n - 1, m - 1) {
            return Err(Error::Shape(format!(
                "path runs {first:?} -> {last:?}, expected (0, 0) -> ({}, {})",
                n - 1,
                m - 1
            )));
        }
        for w in self.pairs.windows(2) {
            let di = w[1].0.checked_sub(w[0].0);
            let dj = w[1].1.checked_sub(w[0].1);
            match (di, dj) {
                (Some(1), Some(0)) | (Some(0), Some(1)) | (Some(1), Some(1)) => {}
                _ => {
                    return Err(Error::Shape(format!(
                        "illegal step {:?} -> {:?}",
                        w[0], w[1]
                    )))
                }
            }
        }
        if self.total_cost.is_nan() || self.total_cost < 0.0 {
            return Err(Error::Shape(format!(
                "negative path cost {}",
                self.total_cost
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DtwOptions {
    /// Sakoe-Chiba band half-width, measured along the diagonal scaled to
    /// the `N x M` grid. `None` searches the full grid.
    pub band: Option<usize>,
}

fn euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn in_band(i: usize, j: usize, n: usize, m: usize, band: Option<usize>) -> bool {
    match band {
        None => true,
        Some(w) => {
            let scaled = if n > 1 {
                i as f64 * (m - 1) as f64 / (n - 1) as f64
            } else {
                0.0
            };
            (j as f64 - scaled).abs() <= w as f64 + 0.5
        }
    }
}

pub fn dtw(p: ArrayView2<f64>, q: ArrayView2<f64>) -> Result<AlignmentPath> {
    dtw_with(p, q, &DtwOptions::default())
}

/// Minimum-cost monotone alignment with steps `(1,1)`, `(1,0)`, `(0,1)` and
/// Euclidean frame cost. On equal accumulated cost the backtrack prefers the
/// diagonal, then `(1,0)`, then `(0,1)`.
pub fn dtw_with(
    p: ArrayView2<f64>,
    q: ArrayView2<f64>,
    opts: &DtwOptions,
) -> Result<AlignmentPath> {
    let (n, m) = (p.nrows(), q.nrows());
    if n == 0 || m == 0 {
        return Err(Error::Empty("dtw needs non-empty sequences".into()));
    }
    if p.ncols() != q.ncols() {
        return Err(Error::Shape(format!(
            "dtw dimension mismatch: {} vs {}",
            p.ncols(),
            q.ncols()
        )));
    }
    let idx = |i: usize, j: usize| i * m + j;
    let mut acc = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            if !in_band(i, j, n, m, opts.band) {
                continue;
            }
            let d = euclidean(p.row(i), q.row(j));
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 {
                    acc[idx(i - 1, j - 1)]
                } else {
                    f64::INFINITY
                };
                let up = if i > 0 {
                    acc[idx(i - 1, j)]
                } else {
                    f64::INFINITY
                };
                let left = if j > 0 {
                    acc[idx(i, j - 1)]
                } else {
                    f64::INFINITY
                };
                diag.min(up).min(left)
            };
            acc[idx(i, j)] = d + prev;
        }
    }
    let total_cost = acc[idx(n - 1, m - 1)];
    if !total_cost.is_finite() {
        return Err(Error::Shape(
            "band too narrow to connect the endpoints".into(),
        ));
    }

    let mut pairs = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while (i, j) != (0, 0) {
        let diag = if i > 0 && j > 0 {
            acc[idx(i - 1, j - 1)]
        } else {
            f64::INFINITY
        };
        let up = if i > 0 {
            acc[idx(i - 1, j)]
        } else {
            f64::INFINITY
        };
        let left = if j > 0 {
            acc[idx(i, j - 1)]
        } else {
            f64::INFINITY
        };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        pairs.push((i, j));
    }
    pairs.reverse();
    Ok(AlignmentPath { pairs, total_cost })
}

/// Maps every `i` in `0..n` to the smallest `j` paired with it.
pub fn warp(path: &AlignmentPath, n: usize) -> Result<Vec<usize>> {
    let mut out = vec![usize::MAX; n];
    for &(i, j) in &path.pairs {
        if i >= n {
            return Err(Error::Shape(format!("path index {i} outside {n} frames")));
        }
        out[i] = out[i].min(j);
    }
    if out.contains(&usize::MAX) {
        return Err(Error::Shape("path does not cover every frame".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncResult {
    pub path: AlignmentPath,
    /// `warp[i]` is the target frame matched to reference frame `i`.
    pub warp: Vec<usize>,
}

/// Aligns every target to the reference independently.
pub fn sync_group(
    reference: ArrayView2<f64>,
    targets: &[ArrayView2<f64>],
) -> Result<Vec<SyncResult>> {
    if targets.is_empty() {
        return Err(Error::Empty("sync needs at least one target".into()));
    }
    targets
        .iter()
        .map(|t| {
            let path = dtw(reference, *t)?;
            let warp = warp(&path, reference.nrows())?;
            Ok(SyncResult { path, warp })
        })
        .collect()
}

/// Alignment output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub reference: String,
    pub targets: Vec<TargetAlignment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetAlignment {
    pub path: String,
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
    pub warp: Vec<usize>,
}

impl TargetAlignment {
    pub fn new(path: impl Into<String>, result: SyncResult) -> Self {
        Self {
            path: path.into(),
            pairs: result.path.pairs,
            total_cost: result.path.total_cost,
            warp: result.warp,
        }
    }
}

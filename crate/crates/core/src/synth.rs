//! Deterministic synthetic multi-view cines.
//!
//! One latent phase trajectory per pair is rendered through a smooth random
//! map per view: every feature is a sum of cosine/sine harmonics of the
//! phase. The coefficients mix a component shared by all views (the common
//! anatomy) with one specific to the view tag, plus a small per-pair
//! perturbation, so two pairs observed from the same view look alike but
//! not identical. Each cine samples one closed cycle (ED to the next ED,
//! both included) at its own jittered frame count.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{
    write_cine, Cine, CinePair, Keyframe, KeyframeKind, Manifest, ManifestEntry, Split,
};
use crate::error::{Error, Result};

/// Number of harmonics per feature; each contributes a cosine and a sine.
const HARMONICS: usize = 4;
/// Relative size of the per-pair perturbation of a view's map.
const PAIR_MAP_JITTER: f64 = 0.1;
/// Relative per-pair variation of the systole/diastole warp strength.
const WARP_JITTER: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub frames_per_cycle: usize,
    pub feature_dim: usize,
    pub views: Vec<String>,
    pub noise_std: f64,
    pub phase_warp: f64,
    pub length_jitter: f64,
    pub cycles: usize,
    /// Duration of one cycle; per-frame time follows from the frame count.
    pub cycle_ms: f64,
    /// Weight of the view-specific part of each view's map, in `[0, 1]`.
    /// Zero renders every view through the same shared map; one makes the
    /// views unrelated.
    pub view_specificity: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            frames_per_cycle: 32,
            feature_dim: 24,
            views: vec!["A".into(), "B".into()],
            noise_std: 0.05,
            phase_warp: 0.4,
            length_jitter: 0.25,
            cycles: 1,
            cycle_ms: 1000.0,
            view_specificity: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.frames_per_cycle < 8 {
            return bad(format!(
                "frames_per_cycle must be >= 8, got {}",
                self.frames_per_cycle
            ));
        }
        if self.feature_dim < 4 {
            return bad(format!(
                "feature_dim must be >= 4, got {}",
                self.feature_dim
            ));
        }
        if self.views.is_empty() {
            return bad("at least one view is required".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        if !(0.0..=0.9).contains(&self.phase_warp) {
            return bad(format!(
                "phase_warp must be in [0, 0.9], got {}",
                self.phase_warp
            ));
        }
        if !(0.0..=0.5).contains(&self.length_jitter) {
            return bad(format!(
                "length_jitter must be in [0, 0.5], got {}",
                self.length_jitter
            ));
        }
        if self.cycles < 1 {
            return bad("cycles must be >= 1".into());
        }
        if !(self.cycle_ms > 0.0 && self.cycle_ms.is_finite()) {
            return bad("cycle_ms must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.view_specificity) {
            return bad(format!(
                "view_specificity must be in [0, 1], got {}",
                self.view_specificity
            ));
        }
        Ok(())
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn view_hash(view: &str) -> u64 {
    view.bytes().fold(0xCBF2_9CE4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01B3)
    })
}

/// Independent stream for a tuple of seed components.
fn stream(parts: &[u64]) -> ChaCha8Rng {
    let seed = parts
        .iter()
        .fold(0x5EED_u64, |acc, &p| splitmix(acc ^ splitmix(p)));
    ChaCha8Rng::seed_from_u64(seed)
}

const TAG_HEART: u64 = 1;
const TAG_VIEW_BASE: u64 = 2;
const TAG_VIEW_PAIR: u64 = 3;
const TAG_SAMPLING: u64 = 4;
const TAG_SHARED: u64 = 5;

/// Monotone warp of normalized cycle time `u` in `[0, 1]` onto latent phase
/// in `[0, 2pi]`. Phase pi (maximal contraction) is reached at
/// `systole_fraction`, which is below one half for positive warp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseWarp {
    pub systole_fraction: f64,
}

impl PhaseWarp {
    pub fn new(strength: f64) -> Self {
        Self {
            systole_fraction: 0.5 - 0.25 * strength,
        }
    }

    pub fn phase(&self, u: f64) -> f64 {
        let s = self.systole_fraction;
        if u <= s {
            PI * u / s
        } else {
            PI + PI * (u - s) / (1.0 - s)
        }
    }
}

/// Smooth map from latent phase to an `F`-dimensional frame.
#[derive(Debug, Clone)]
pub struct ViewMap {
    /// `F x 2H` coefficients over `[cos(k th), sin(k th)]`, `k = 1..=H`.
    coeffs: Array2<f64>,
    offset: Vec<f64>,
}

impl ViewMap {
    fn generate(cfg: &SynthConfig, view: &str, pair_index: u64) -> Self {
        let f = cfg.feature_dim;
        let vh = view_hash(view);
        let mut base = stream(&[cfg.seed, TAG_VIEW_BASE, vh]);
        let mut shared = stream(&[cfg.seed, TAG_SHARED]);
        let mut pert = stream(&[cfg.seed, TAG_VIEW_PAIR, vh, pair_index]);
        let s = cfg.view_specificity;
        let (ws, wv) = ((1.0 - s * s).sqrt(), s);
        let mut coeffs = Array2::zeros((f, 2 * HARMONICS));
        for ((_, col), c) in coeffs.indexed_iter_mut() {
            let scale = 1.0 / (col / 2 + 1) as f64;
            let z0: f64 = StandardNormal.sample(&mut shared);
            let z: f64 = StandardNormal.sample(&mut base);
            let dz: f64 = StandardNormal.sample(&mut pert);
            *c = scale * (ws * z0 + wv * z + PAIR_MAP_JITTER * dz);
        }
        let offset = (0..f)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut base);
                0.5 * z
            })
            .collect();
        Self { coeffs, offset }
    }

    pub fn render(&self, phase: f64) -> Vec<f64> {
        let basis: Vec<f64> = (0..HARMONICS)
            .flat_map(|k| {
                let a = (k + 1) as f64 * phase;
                [a.cos(), a.sin()]
            })
            .collect();
        self.coeffs
            .rows()
            .into_iter()
            .zip(&self.offset)
            .map(|(row, o)| o + row.iter().zip(&basis).map(|(c, b)| c * b).sum::<f64>())
            .collect()
    }
}

/// Latent cycle shared by every view of one pair.
#[derive(Debug, Clone, Copy)]
struct Heart {
    warp: PhaseWarp,
}

impl Heart {
    fn generate(cfg: &SynthConfig, pair_index: u64) -> Self {
        let mut rng = stream(&[cfg.seed, TAG_HEART, pair_index]);
        let jitter: f64 = rng.random_range(-1.0..=1.0);
        let strength = (cfg.phase_warp * (1.0 + WARP_JITTER * jitter)).clamp(0.0, 0.9);
        Self {
            warp: PhaseWarp::new(strength),
        }
    }
}

fn render_cine(
    cfg: &SynthConfig,
    heart: &Heart,
    map: &ViewMap,
    view: &str,
    pair_index: u64,
    slot: u64,
) -> Cine {
    let mut rng = stream(&[cfg.seed, TAG_SAMPLING, view_hash(view), pair_index, slot]);
    let jitter: f64 = if cfg.length_jitter > 0.0 {
        rng.random_range(-cfg.length_jitter..=cfg.length_jitter)
    } else {
        0.0
    };
    let per_cycle = ((cfg.frames_per_cycle as f64 * (1.0 + jitter)).round() as usize).max(8);
    let t_total = cfg.cycles * per_cycle + 1;

    // unwrapped phase, one closed cycle per `per_cycle` frames
    let unwrapped: Vec<f64> = (0..t_total)
        .map(|t| {
            let cycle = t / per_cycle;
            let u = (t % per_cycle) as f64 / per_cycle as f64;
            cycle as f64 * TAU + heart.warp.phase(u)
        })
        .collect();

    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let f = cfg.feature_dim;
    let mut frames = Array2::zeros((t_total, f));
    for (t, th) in unwrapped.iter().enumerate() {
        let clean = map.render(*th);
        for (j, v) in clean.into_iter().enumerate() {
            let n = if cfg.noise_std > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            frames[[t, j]] = v + n;
        }
    }

    let mut keyframes = Vec::with_capacity(2 * cfg.cycles + 1);
    for c in 0..cfg.cycles {
        let start = c * per_cycle;
        let target = c as f64 * TAU + PI;
        let es = (start..start + per_cycle)
            .min_by(|&x, &y| {
                (unwrapped[x] - target)
                    .abs()
                    .total_cmp(&(unwrapped[y] - target).abs())
            })
            .expect("non-empty cycle");
        keyframes.push(Keyframe::new(KeyframeKind::ED, start));
        keyframes.push(Keyframe::new(KeyframeKind::ES, es));
    }
    keyframes.push(Keyframe::new(KeyframeKind::ED, cfg.cycles * per_cycle));

    let latent = unwrapped
        .iter()
        .map(|p| {
            let w = p.rem_euclid(TAU);
            if w >= TAU {
                0.0
            } else {
                w
            }
        })
        .collect();

    Cine::new(
        frames,
        cfg.cycle_ms / per_cycle as f64,
        view,
        keyframes,
        Some(latent),
        cfg.cycles,
    )
    .expect("generator produces valid cines")
}

/// One cine per configured view, all observing the same latent cycle.
pub fn generate_views(cfg: &SynthConfig, pair_index: u64) -> Result<Vec<Cine>> {
    cfg.validate()?;
    let heart = Heart::generate(cfg, pair_index);
    Ok(cfg
        .views
        .iter()
        .enumerate()
        .map(|(slot, view)| {
            let map = ViewMap::generate(cfg, view, pair_index);
            render_cine(cfg, &heart, &map, view, pair_index, slot as u64)
        })
        .collect())
}

/// Pair built from the first two configured views.
pub fn generate_pair(cfg: &SynthConfig, pair_index: u64) -> Result<CinePair> {
    if cfg.views.len() < 2 {
        return Err(Error::InvalidConfig(
            "a pair needs at least two views".into(),
        ));
    }
    let mut views = generate_views(cfg, pair_index)?;
    views.truncate(2);
    let b = views.pop().expect("two views");
    let a = views.pop().expect("two views");
    Ok(CinePair {
        a,
        b,
        same_heart: true,
    })
}

/// Split counts for `n` pairs: train and val are rounded, test takes the
/// remainder.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::InvalidConfig(format!(
            "split fractions out of range: {fractions:?}"
        )));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split fractions sum to {total}, expected 1"
        )));
    }
    let train = ((n as f64 * fractions[0]).round() as usize).min(n);
    let val = ((n as f64 * fractions[1]).round() as usize).min(n - train);
    Ok([train, val, n - train - val])
}

pub fn split_for(index: usize, counts: [usize; 3]) -> Split {
    if index < counts[0] {
        Split::Train
    } else if index < counts[0] + counts[1] {
        Split::Val
    } else {
        Split::Test
    }
}

/// Writes `n_pairs` pairs plus `manifest.json` under `out_dir`.
pub fn generate_dataset(
    cfg: &SynthConfig,
    n_pairs: usize,
    split_fractions: [f64; 3],
    out_dir: &Path,
) -> Result<Manifest> {
    cfg.validate()?;
    let counts = split_counts(n_pairs, split_fractions)?;
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let pair = generate_pair(cfg, i as u64)?;
        let pair_id = format!("pair_{i:04}");
        let a = format!("{pair_id}_a");
        let b = format!("{pair_id}_b");
        write_cine(&out_dir.join(&a), &pair.a)?;
        write_cine(&out_dir.join(&b), &pair.b)?;
        entries.push(ManifestEntry {
            pair_id,
            a,
            b,
            split: split_for(i, counts),
        });
    }
    let manifest = Manifest {
        entries,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Undoes the `[0, 2pi)` wrap of a phase sequence that only moves forward.
pub fn unwrap_phase(phase: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(phase.len());
    let mut offset = 0.0;
    for (i, &p) in phase.iter().enumerate() {
        if i > 0 && p < phase[i - 1] {
            offset += TAU;
        }
        out.push(p + offset);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let cfg = SynthConfig::default();
        assert_eq!(
            generate_pair(&cfg, 3).unwrap(),
            generate_pair(&cfg, 3).unwrap()
        );
        assert_ne!(
            generate_pair(&cfg, 3).unwrap(),
            generate_pair(&cfg, 4).unwrap()
        );
    }

    #[test]
    fn same_view_no_noise_no_jitter_is_identical() {
        let cfg = SynthConfig {
            noise_std: 0.0,
            views: vec!["A".into(), "A".into()],
            length_jitter: 0.0,
            ..Default::default()
        };
        let pair = generate_pair(&cfg, 0).unwrap();
        assert_eq!(pair.a.frames, pair.b.frames);
    }

    #[test]
    fn rendering_is_a_function_of_phase() {
        let cfg = SynthConfig::default();
        let map = ViewMap::generate(&cfg, "A", 5);
        assert_eq!(map.render(1.234), map.render(1.234));
        let other = ViewMap::generate(&cfg, "B", 5);
        assert_ne!(map.render(1.234), other.render(1.234));
    }

    #[test]
    fn keyframes_match_phase_extrema() {
        let cfg = SynthConfig {
            cycles: 3,
            ..Default::default()
        };
        for idx in 0..5 {
            for cine in generate_views(&cfg, idx).unwrap() {
                let phase = unwrap_phase(cine.latent_phase.as_ref().unwrap());
                assert!(phase.windows(2).all(|w| w[1] > w[0]));
                let eds = cine.keyframe_indices(KeyframeKind::ED);
                let ess = cine.keyframe_indices(KeyframeKind::ES);
                assert_eq!(eds.len(), 4);
                assert_eq!(ess.len(), 3);
                for (c, (&ed, &es)) in eds.iter().zip(&ess).enumerate() {
                    let lo = c as f64 * TAU;
                    let cycle = ed..eds[c + 1];
                    let best_ed = cycle
                        .clone()
                        .min_by(|&x, &y| (phase[x] - lo).abs().total_cmp(&(phase[y] - lo).abs()))
                        .unwrap();
                    let best_es = cycle
                        .min_by(|&x, &y| {
                            (phase[x] - lo - PI)
                                .abs()
                                .total_cmp(&(phase[y] - lo - PI).abs())
                        })
                        .unwrap();
                    assert_eq!(ed, best_ed);
                    assert_eq!(es, best_es);
                }
                // systole shorter than diastole
                assert!(ess[0] - eds[0] < eds[1] - ess[0]);
            }
        }
    }

    #[test]
    fn split_counting() {
        assert_eq!(split_counts(10, [0.6, 0.2, 0.2]).unwrap(), [6, 2, 2]);
        assert_eq!(split_counts(1, [1.0, 0.0, 0.0]).unwrap(), [1, 0, 0]);
        assert!(split_counts(10, [0.5, 0.2, 0.2]).is_err());
    }

    #[test]
    fn config_invariants() {
        let bad = SynthConfig {
            frames_per_cycle: 4,
            ..Default::default()
        };
        assert!(generate_pair(&bad, 0).is_err());
        let bad = SynthConfig {
            feature_dim: 3,
            ..Default::default()
        };
        assert!(generate_pair(&bad, 0).is_err());
    }
}

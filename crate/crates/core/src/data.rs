//! Core domain types: cines, keyframes, the fine-grained phase label and
//! the on-disk formats for cines and dataset manifests.
//!
//! A cine lives on disk as `<stem>.json` (header) plus `<stem>.bin`
//! (row-major little-endian `f64` frames, optionally followed by the latent
//! phase vector).

use std::f64::consts::TAU;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CINE_FORMAT_VERSION: u32 = 1;
const DTYPE_F64LE: &str = "f64le";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KeyframeKind {
    ED,
    ES,
}

impl fmt::Display for KeyframeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeyframeKind::ED => f.write_str("ED"),
            KeyframeKind::ES => f.write_str("ES"),
        }
    }
}

/// A labeled keyframe. Serialized as `[kind, index]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(KeyframeKind, usize)", into = "(KeyframeKind, usize)")]
pub struct Keyframe {
    pub kind: KeyframeKind,
    pub index: usize,
}

impl Keyframe {
    pub fn new(kind: KeyframeKind, index: usize) -> Self {
        Self { kind, index }
    }
}

impl From<(KeyframeKind, usize)> for Keyframe {
    fn from((kind, index): (KeyframeKind, usize)) -> Self {
        Self { kind, index }
    }
}

impl From<Keyframe> for (KeyframeKind, usize) {
    fn from(k: Keyframe) -> Self {
        (k.kind, k.index)
    }
}

/// A frame sequence with timing, view tag and optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Cine {
    /// `T x F` frame matrix.
    pub frames: Array2<f64>,
    pub frame_time_ms: f64,
    pub view: String,
    pub keyframes: Vec<Keyframe>,
    /// Ground-truth phase in `[0, 2pi)`, synthetic data only.
    pub latent_phase: Option<Vec<f64>>,
    pub cycle_count: usize,
}

impl Cine {
    /// Builds a cine and checks every invariant.
    pub fn new(
        frames: Array2<f64>,
        frame_time_ms: f64,
        view: impl Into<String>,
        keyframes: Vec<Keyframe>,
        latent_phase: Option<Vec<f64>>,
        cycle_count: usize,
    ) -> Result<Self> {
        let cine = Self {
            frames,
            frame_time_ms,
            view: view.into(),
            keyframes,
            latent_phase,
            cycle_count,
        };
        cine.validate()?;
        Ok(cine)
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (t, f) = self.frames.dim();
        if t < 3 {
            return Err(Error::InvalidCine(format!(
                "need at least 3 frames, got {t}"
            )));
        }
        if f < 1 {
            return Err(Error::InvalidCine("feature dimension must be >= 1".into()));
        }
        if !(self.frame_time_ms.is_finite() && self.frame_time_ms > 0.0) {
            return Err(Error::InvalidCine(format!(
                "frame_time_ms must be positive, got {}",
                self.frame_time_ms
            )));
        }
        if self.cycle_count < 1 {
            return Err(Error::InvalidCine("cycle_count must be >= 1".into()));
        }
        if self.frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cine frames".into()));
        }
        if let Some(phase) = &self.latent_phase {
            if phase.len() != t {
                return Err(Error::InvalidCine(format!(
                    "latent phase has {} values for {t} frames",
                    phase.len()
                )));
            }
            if phase
                .iter()
                .any(|p| !(p.is_finite() && (0.0..TAU).contains(p)))
            {
                return Err(Error::InvalidCine("latent phase outside [0, 2pi)".into()));
            }
        }
        validate_keyframes(&self.keyframes, t)
    }

    /// Indices of keyframes of one kind, ascending.
    pub fn keyframe_indices(&self, kind: KeyframeKind) -> Vec<usize> {
        self.keyframes
            .iter()
            .filter(|k| k.kind == kind)
            .map(|k| k.index)
            .collect()
    }

    /// Per-cycle keyframe triples `ED, ES, next ED` taken from the label list.
    pub fn keyframe_pairs(&self) -> Vec<KeyframePair> {
        let mut pairs = Vec::new();
        for (n, kf) in self.keyframes.iter().enumerate() {
            if kf.kind != KeyframeKind::ED {
                continue;
            }
            let Some(es) = self.keyframes.get(n + 1) else {
                break;
            };
            let t_ed_next = self.keyframes.get(n + 2).map(|k| k.index);
            pairs.push(KeyframePair {
                t_ed: kf.index,
                t_es: es.index,
                t_ed_next,
            });
        }
        pairs
    }

    /// Phase label of every frame covered by a labeled cycle, `None` for
    /// frames outside all cycles. A frame shared by two cycles (the closing
    /// ED of one, opening ED of the next) gets the label of the earlier one;
    /// both evaluate to 1.
    pub fn phase_labels(&self) -> Result<Vec<Option<f64>>> {
        let mut labels = vec![None; self.len()];
        for pair in self.keyframe_pairs() {
            let hi = pair.t_ed_next.unwrap_or(pair.t_es);
            for (t, slot) in labels.iter_mut().enumerate().take(hi + 1).skip(pair.t_ed) {
                if slot.is_none() {
                    *slot = Some(phase_label(t, &pair)?);
                }
            }
        }
        Ok(labels)
    }
}

fn validate_keyframes(keyframes: &[Keyframe], t: usize) -> Result<()> {
    for k in keyframes {
        if k.index >= t {
            return Err(Error::InvalidKeyframes(format!(
                "{} index {} outside [0, {t})",
                k.kind, k.index
            )));
        }
    }
    for w in keyframes.windows(2) {
        if w[1].index <= w[0].index {
            return Err(Error::InvalidKeyframes(
                "keyframe indices must be strictly increasing".into(),
            ));
        }
        if w[1].kind == w[0].kind {
            return Err(Error::InvalidKeyframes(format!(
                "keyframe kinds must alternate, found {} twice at {} and {}",
                w[0].kind, w[0].index, w[1].index
            )));
        }
    }
    Ok(())
}

/// End-diastole / end-systole indices of one cardiac cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyframePair {
    pub t_ed: usize,
    pub t_es: usize,
    pub t_ed_next: Option<usize>,
}

impl KeyframePair {
    pub fn new(t_ed: usize, t_es: usize, t_ed_next: Option<usize>) -> Result<Self> {
        let pair = Self {
            t_ed,
            t_es,
            t_ed_next,
        };
        pair.check()?;
        Ok(pair)
    }

    fn check(&self) -> Result<()> {
        if self.t_ed == self.t_es {
            return Err(Error::DegenerateInterval(format!(
                "t_ed == t_es == {}",
                self.t_ed
            )));
        }
        if self.t_ed > self.t_es {
            return Err(Error::InvalidKeyframes(format!(
                "t_ed {} after t_es {}",
                self.t_ed, self.t_es
            )));
        }
        if let Some(next) = self.t_ed_next {
            if next == self.t_es {
                return Err(Error::DegenerateInterval(format!(
                    "t_es == t_ed_next == {next}"
                )));
            }
            if next < self.t_es {
                return Err(Error::InvalidKeyframes(format!(
                    "t_ed_next {next} before t_es {}",
                    self.t_es
                )));
            }
        }
        Ok(())
    }
}

/// Fine-grained phase label mimicking ventricular volume: 1 at ED, 0 at ES,
/// a cubic descent through systole and a cube-root ascent through diastole.
///
/// Both interval endpoints are inclusive; `t <= t_es` takes the systolic
/// branch.
pub fn phase_label(t: usize, kf: &KeyframePair) -> Result<f64> {
    kf.check()?;
    let hi = kf.t_ed_next.unwrap_or(kf.t_es);
    if t < kf.t_ed || t > hi {
        return Err(Error::PhaseDomain { t, lo: kf.t_ed, hi });
    }
    let dist = t.abs_diff(kf.t_es) as f64;
    if t <= kf.t_es {
        let span = kf.t_es.abs_diff(kf.t_ed) as f64;
        Ok((dist / span).powi(3))
    } else {
        // hi > t_es here, so t_ed_next is present
        let span = hi.abs_diff(kf.t_es) as f64;
        Ok((dist / span).cbrt())
    }
}

/// Two views observing one latent cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct CinePair {
    pub a: Cine,
    pub b: Cine,
    pub same_heart: bool,
}

impl CinePair {
    /// Inter-view training needs one cycle per member and a shared heart.
    pub fn check_inter_view(&self) -> Result<()> {
        if !self.same_heart {
            return Err(Error::InvalidConfig(
                "inter-view training requires same_heart pairs".into(),
            ));
        }
        if self.a.cycle_count != 1 || self.b.cycle_count != 1 {
            return Err(Error::InvalidConfig(format!(
                "inter-view training requires single-cycle cines, got {} and {}",
                self.a.cycle_count, self.b.cycle_count
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Cine files

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CineHeader {
    format_version: u32,
    t: usize,
    f: usize,
    dtype: String,
    frame_time_ms: f64,
    view: String,
    keyframes: Vec<Keyframe>,
    cycle_count: usize,
    has_latent_phase: bool,
}

/// `(header, payload)` paths for a cine stem. A trailing `.json` or `.bin`
/// is stripped first.
pub fn cine_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = stem.clone().into_os_string();
    json.push(".json");
    let mut bin = stem.into_os_string();
    bin.push(".bin");
    (json.into(), bin.into())
}

pub fn write_cine(path: &Path, cine: &Cine) -> Result<()> {
    cine.validate()?;
    let (json_path, bin_path) = cine_paths(path);
    let (t, f) = cine.frames.dim();
    let header = CineHeader {
        format_version: CINE_FORMAT_VERSION,
        t,
        f,
        dtype: DTYPE_F64LE.into(),
        frame_time_ms: cine.frame_time_ms,
        view: cine.view.clone(),
        keyframes: cine.keyframes.clone(),
        cycle_count: cine.cycle_count,
        has_latent_phase: cine.latent_phase.is_some(),
    };
    let mut payload = Vec::with_capacity(8 * (t * f + t));
    for v in cine.frames.iter() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(phase) = &cine.latent_phase {
        for v in phase {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let text = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::json(json_path.display().to_string(), e))?;
    fs::write(&json_path, text)?;
    fs::write(&bin_path, payload)?;
    Ok(())
}

pub fn read_cine(path: &Path) -> Result<Cine> {
    let (json_path, bin_path) = cine_paths(path);
    let header: CineHeader = read_json(&json_path)?;
    if header.format_version != CINE_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unknown cine format version {}",
            header.format_version
        )));
    }
    if header.dtype != DTYPE_F64LE {
        return Err(Error::Format(format!(
            "unsupported dtype {:?}",
            header.dtype
        )));
    }
    let bytes = read_bytes(&bin_path)?;
    let values = decode_f64le(&bytes, &bin_path)?;
    let n_frames = header.t * header.f;
    let expected = n_frames + if header.has_latent_phase { header.t } else { 0 };
    if values.len() != expected {
        return Err(Error::Shape(format!(
            "{}: header declares {}x{}{} ({expected} values), payload holds {}",
            bin_path.display(),
            header.t,
            header.f,
            if header.has_latent_phase {
                " + phase"
            } else {
                ""
            },
            values.len()
        )));
    }
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "{} value {pos}",
            bin_path.display()
        )));
    }
    let mut values = values;
    let latent_phase = header.has_latent_phase.then(|| values.split_off(n_frames));
    let frames = Array2::from_shape_vec((header.t, header.f), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Cine::new(
        frames,
        header.frame_time_ms,
        header.view,
        header.keyframes,
        latent_phase,
        header.cycle_count,
    )
}

pub(crate) fn decode_f64le(bytes: &[u8], path: &Path) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Shape(format!(
            "{}: payload length {} is not a multiple of 8",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub(crate) fn encode_f64le<'a>(values: impl IntoIterator<Item = &'a f64>) -> Vec<u8> {
    values.into_iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// Dataset manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }
}

/// One manifest row. `a` and `b` are cine stems relative to the manifest
/// directory (absolute paths are kept as-is).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub pair_id: String,
    pub a: String,
    pub b: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let entries: Vec<ManifestEntry> = read_json(path)?;
        let base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Self { entries, base_dir })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.entries)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn resolve(&self, stem: &str) -> PathBuf {
        let p = Path::new(stem);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load_pair(&self, entry: &ManifestEntry) -> Result<CinePair> {
        let a = read_cine(&self.resolve(&entry.a))?;
        let b = read_cine(&self.resolve(&entry.b))?;
        Ok(CinePair {
            a,
            b,
            same_heart: true,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<(String, CinePair)>> {
        self.split(split)
            .map(|e| Ok((e.pair_id.clone(), self.load_pair(e)?)))
            .collect()
    }
}

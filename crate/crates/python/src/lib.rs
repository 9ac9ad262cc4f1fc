use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use cinesync::align;
use cinesync::checkpoint::Checkpoint;
use cinesync::data::{self, Keyframe, KeyframeKind, KeyframePair, Manifest, Split};
use cinesync::encoder::{self, EncoderConfig, EncoderParams};
use cinesync::error::Error;
use cinesync::eval::{self, Metric};
use cinesync::synth::{self, SynthConfig};
use cinesync::train::{self, TrainConfig, TrainOutput};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::MissingFile(_) => PyFileNotFoundError::new_err(e.to_string()),
        Error::Io(_) | Error::TrainingAborted { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn kind_name(k: KeyframeKind) -> &'static str {
    match k {
        KeyframeKind::ED => "ED",
        KeyframeKind::ES => "ES",
    }
}

fn parse_kind(s: &str) -> PyResult<KeyframeKind> {
    match s {
        "ED" => Ok(KeyframeKind::ED),
        "ES" => Ok(KeyframeKind::ES),
        _ => Err(PyValueError::new_err(format!(
            "unknown keyframe kind {s:?}"
        ))),
    }
}

/// A cine: `T x F` frame matrix with view tag and keyframe labels.
#[pyclass(name = "Cine", module = "cinesync", skip_from_py_object)]
#[derive(Clone)]
struct PyCine {
    inner: data::Cine,
}

#[pymethods]
impl PyCine {
    #[new]
    #[pyo3(signature = (frames, frame_time_ms, view, keyframes=Vec::new()))]
    fn new(
        frames: Vec<Vec<f64>>,
        frame_time_ms: f64,
        view: String,
        keyframes: Vec<(String, usize)>,
    ) -> PyResult<Self> {
        let kfs = keyframes
            .into_iter()
            .map(|(k, i)| Ok(Keyframe::new(parse_kind(&k)?, i)))
            .collect::<PyResult<Vec<_>>>()?;
        let inner =
            data::Cine::new(matrix(frames)?, frame_time_ms, view, kfs, None, 1).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: data::read_cine(&path).map_err(to_py)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        data::write_cine(&path, &self.inner).map_err(to_py)
    }

    #[getter]
    fn frames(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.frames)
    }

    #[getter]
    fn view(&self) -> String {
        self.inner.view.clone()
    }

    #[getter]
    fn frame_time_ms(&self) -> f64 {
        self.inner.frame_time_ms
    }

    #[getter]
    fn keyframes(&self) -> Vec<(&'static str, usize)> {
        self.inner
            .keyframes
            .iter()
            .map(|k| (kind_name(k.kind), k.index))
            .collect()
    }

    #[getter]
    fn latent_phase(&self) -> Option<Vec<f64>> {
        self.inner.latent_phase.clone()
    }

    /// Phase label per frame; `None` outside labeled intervals.
    fn phase_labels(&self) -> PyResult<Vec<Option<f64>>> {
        self.inner.phase_labels().map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Cine(view={:?}, frames={}, features={})",
            self.inner.view,
            self.inner.len(),
            self.inner.feature_dim()
        )
    }
}

/// Frame encoder plus the temporal classifier head.
#[pyclass(name = "Encoder", module = "cinesync", skip_from_py_object)]
#[derive(Clone)]
struct PyEncoder {
    inner: EncoderParams,
}

#[pymethods]
impl PyEncoder {
    /// Fresh parameters. `config` is an optional JSON string of encoder settings.
    #[staticmethod]
    #[pyo3(signature = (seed=0, input_dim=24, config=None))]
    fn init(seed: u64, input_dim: usize, config: Option<&str>) -> PyResult<Self> {
        let cfg = match config {
            Some(text) => serde_json::from_str::<EncoderConfig>(text)
                .map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => EncoderConfig::with_input_dim(input_dim),
        };
        Ok(Self {
            inner: encoder::init_params(&cfg, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(stem: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(&stem).map_err(to_py)?.params,
        })
    }

    #[pyo3(signature = (stem, seed=0, iteration=0))]
    fn save(&self, stem: PathBuf, seed: u64, iteration: usize) -> PyResult<()> {
        Checkpoint::new(self.inner.clone(), seed, iteration, None)
            .save(&stem)
            .map_err(to_py)
    }

    /// `T x d` embeddings of a `T x F` frame matrix or a `Cine`.
    fn embed(&self, frames: &Bound<'_, PyAny>) -> PyResult<Vec<Vec<f64>>> {
        let m = match frames.extract::<PyRef<'_, PyCine>>() {
            Ok(c) => c.inner.frames.clone(),
            Err(_) => matrix(frames.extract()?)?,
        };
        Ok(rows(
            &encoder::forward(&self.inner, m.view()).map_err(to_py)?.0,
        ))
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.config.n_params()
    }

    #[getter]
    fn config(&self) -> String {
        serde_json::to_string(&self.inner.config).unwrap_or_default()
    }

    fn parameters(&self) -> Vec<f64> {
        self.inner.flatten()
    }
}

fn synth_config(
    seed: u64,
    frames_per_cycle: usize,
    feature_dim: usize,
    noise_std: f64,
) -> SynthConfig {
    SynthConfig {
        seed,
        frames_per_cycle,
        feature_dim,
        noise_std,
        ..SynthConfig::default()
    }
}

/// Synthetic pair of views of the same heart.
#[pyfunction]
#[pyo3(signature = (pair_index, seed=0, frames_per_cycle=32, feature_dim=24, noise_std=0.05))]
fn generate_pair(
    pair_index: u64,
    seed: u64,
    frames_per_cycle: usize,
    feature_dim: usize,
    noise_std: f64,
) -> PyResult<(PyCine, PyCine)> {
    let cfg = synth_config(seed, frames_per_cycle, feature_dim, noise_std);
    let p = synth::generate_pair(&cfg, pair_index).map_err(to_py)?;
    Ok((PyCine { inner: p.a }, PyCine { inner: p.b }))
}

/// Writes a dataset and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, n_pairs=250, split=(0.8, 0.2, 0.0), seed=0))]
fn generate_dataset(
    out_dir: PathBuf,
    n_pairs: usize,
    split: (f64, f64, f64),
    seed: u64,
) -> PyResult<PathBuf> {
    let cfg = SynthConfig {
        seed,
        ..SynthConfig::default()
    };
    synth::generate_dataset(&cfg, n_pairs, [split.0, split.1, split.2], &out_dir).map_err(to_py)?;
    Ok(out_dir.join("manifest.json"))
}

/// Trains on the manifest's training split. `config` is an optional JSON
/// string of training settings; explicit arguments override it.
#[pyfunction]
#[pyo3(signature = (manifest, out_dir=None, iterations=None, seed=None, threads=None, config=None))]
fn train_model(
    py: Python<'_>,
    manifest: PathBuf,
    out_dir: Option<PathBuf>,
    iterations: Option<usize>,
    seed: Option<u64>,
    threads: Option<usize>,
    config: Option<&str>,
) -> PyResult<PyEncoder> {
    let mut cfg: TrainConfig = match config {
        Some(text) => {
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(t) = threads {
        cfg.threads = t;
    }
    let outcome = py.detach(|| {
        let m = Manifest::load(&manifest)?;
        let pairs: Vec<_> = m
            .load_split(Split::Train)?
            .into_iter()
            .map(|(_, p)| p)
            .collect();
        let f = pairs.first().map_or(24, |p| p.a.feature_dim());
        let out = out_dir.map(|dir| TrainOutput { dir });
        train::train_pairs(
            &pairs,
            &EncoderConfig::with_input_dim(f),
            &cfg,
            out.as_ref(),
        )
    });
    Ok(PyEncoder {
        inner: outcome.map_err(to_py)?.params,
    })
}

/// Metrics on a manifest split, returned as a JSON string.
#[pyfunction]
#[pyo3(signature = (encoder, manifest, split="val", metrics=vec!["tau".to_string(), "r2".to_string(), "oneshot".to_string()]))]
fn evaluate(
    py: Python<'_>,
    encoder: &PyEncoder,
    manifest: PathBuf,
    split: &str,
    metrics: Vec<String>,
) -> PyResult<String> {
    let split: Split = split.parse().map_err(to_py)?;
    let metrics = metrics
        .iter()
        .map(|m| m.parse::<Metric>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(to_py)?;
    let params = encoder.inner.clone();
    let report = py.detach(move || {
        let m = Manifest::load(&manifest)?;
        let eval_pairs = m.load_split(split)?;
        let train_pairs = m.load_split(Split::Train)?;
        eval::evaluate_pairs(&params, &train_pairs, &eval_pairs, &metrics)
    });
    serde_json::to_string(&report.map_err(to_py)?)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// DTW alignment: `(pairs, total_cost)`.
#[pyfunction]
fn dtw(p: Vec<Vec<f64>>, q: Vec<Vec<f64>>) -> PyResult<(Vec<(usize, usize)>, f64)> {
    let path = align::dtw(matrix(p)?.view(), matrix(q)?.view()).map_err(to_py)?;
    Ok((path.pairs, path.total_cost))
}

/// Smallest target index per reference frame.
#[pyfunction]
fn warp(pairs: Vec<(usize, usize)>, n: usize) -> PyResult<Vec<usize>> {
    let path = align::AlignmentPath {
        pairs,
        total_cost: 0.0,
    };
    align::warp(&path, n).map_err(to_py)
}

/// Warps of each target onto the reference.
#[pyfunction]
fn sync_group(reference: Vec<Vec<f64>>, targets: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<usize>>> {
    let r = matrix(reference)?;
    let ts = targets
        .into_iter()
        .map(matrix)
        .collect::<PyResult<Vec<_>>>()?;
    let views: Vec<_> = ts.iter().map(|t| t.view()).collect();
    Ok(align::sync_group(r.view(), &views)
        .map_err(to_py)?
        .into_iter()
        .map(|s| s.warp)
        .collect())
}

#[pyfunction]
fn kendalls_tau(p: Vec<Vec<f64>>, q: Vec<Vec<f64>>) -> PyResult<f64> {
    eval::kendalls_tau(matrix(p)?.view(), matrix(q)?.view()).map_err(to_py)
}

#[pyfunction]
fn pca_1d(e: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    eval::pca_1d(matrix(e)?.view()).map_err(to_py)
}

/// Phase label of frame `t`: 1 at ED, 0 at ES.
#[pyfunction]
#[pyo3(signature = (t, t_ed, t_es, t_ed_next=None))]
fn phase_label(t: usize, t_ed: usize, t_es: usize, t_ed_next: Option<usize>) -> PyResult<f64> {
    let kf = KeyframePair::new(t_ed, t_es, t_ed_next).map_err(to_py)?;
    data::phase_label(t, &kf).map_err(to_py)
}

#[pymodule(name = "cinesync")]
fn cinesync_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyCine>()?;
    m.add_class::<PyEncoder>()?;
    m.add_function(wrap_pyfunction!(generate_pair, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(dtw, m)?)?;
    m.add_function(wrap_pyfunction!(warp, m)?)?;
    m.add_function(wrap_pyfunction!(sync_group, m)?)?;
    m.add_function(wrap_pyfunction!(kendalls_tau, m)?)?;
    m.add_function(wrap_pyfunction!(pca_1d, m)?)?;
    m.add_function(wrap_pyfunction!(phase_label, m)?)?;
    Ok(())
}

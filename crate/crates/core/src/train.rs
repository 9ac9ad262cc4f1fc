//! Mini-batch training: frame subsampling, Adam, step-decay schedule and
//! checkpointing.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::CinePair;
use crate::encoder::{init_params, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::losses::{
    combined_loss, sample_triplets, InterViewConfig, LossConfig, LossWeights, PreparedPair,
    TripletConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the number of steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len()
        || params.len() != state.m.len()
        || state.m.len() != state.v.len()
    {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {}/{} moments",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient component {i} is {}",
            grads[i]
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub frames_per_cine: usize,
    pub iterations: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub alpha: usize,
    pub lambda_reg: f64,
    pub eps_var: f64,
    pub symmetric_inter: bool,
    pub triplets: TripletConfig,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Write an intermediate checkpoint every this many iterations.
    pub checkpoint_every: Option<usize>,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            lr: 1e-4,
            lr_decay: 0.1,
            decay_every: 5000,
            frames_per_cine: 20,
            iterations: 2000,
            seed: 0,
            weights: LossWeights::default(),
            alpha: 5,
            lambda_reg: 0.001,
            eps_var: 1e-6,
            symmetric_inter: true,
            triplets: TripletConfig::default(),
            adam: AdamConfig::default(),
            grad_clip: None,
            checkpoint_every: None,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 || self.decay_every == 0 || self.alpha == 0 || self.threads == 0 {
            return bad("batch_size, decay_every, alpha and threads must be positive".into());
        }
        if self.frames_per_cine < 3 {
            return bad(format!(
                "frames_per_cine must be >= 3, got {}",
                self.frames_per_cine
            ));
        }
        if !(self.lr > 0.0 && self.lr_decay > 0.0 && self.lambda_reg >= 0.0 && self.eps_var > 0.0) {
            return bad(
                "lr, lr_decay and eps_var must be positive, lambda_reg non-negative".into(),
            );
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint_every must be positive".into());
        }
        self.weights.validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            inter: InterViewConfig {
                lambda_reg: self.lambda_reg,
                eps_var: self.eps_var,
                symmetric: self.symmetric_inter,
            },
        }
    }

    /// `lr * lr_decay ^ floor(iteration / decay_every)`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.lr * self.lr_decay.powi((iteration / self.decay_every) as i32)
    }
}

/// `m` distinct frames drawn uniformly, ascending; every frame when `T <= m`.
pub fn subsample_frames<R: Rng + ?Sized>(
    frames: ArrayView2<f64>,
    rng: &mut R,
    m: usize,
) -> (Vec<usize>, Array2<f64>) {
    let t = frames.nrows();
    let indices: Vec<usize> = if t > m {
        let mut idx = sample_indices(rng, t, m).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..t).collect()
    };
    let selected = frames.select(Axis(0), &indices);
    (indices, selected)
}

/// Draws and prepares one training pair: subsampled frames and triplets.
pub fn prepare_pair<R: Rng + ?Sized>(
    pair: &CinePair,
    rng: &mut R,
    cfg: &TrainConfig,
) -> Result<PreparedPair> {
    let (_, frames_a) = subsample_frames(pair.a.frames.view(), rng, cfg.frames_per_cine);
    let (_, frames_b) = subsample_frames(pair.b.frames.view(), rng, cfg.frames_per_cine);
    let triplets_a = sample_triplets(frames_a.view(), rng, &cfg.triplets)?;
    let triplets_b = sample_triplets(frames_b.view(), rng, &cfg.triplets)?;
    Ok(PreparedPair {
        frames_a,
        frames_b,
        triplets_a,
        triplets_b,
    })
}

/// One line of the JSON-lines metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub loss: f64,
    pub spatial: f64,
    pub temporal: f64,
    pub inter: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub adam: AdamState,
    pub log: Vec<LogRecord>,
    pub checkpoint: Option<PathBuf>,
}

/// Where training writes its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn checkpoint_stem(&self) -> PathBuf {
        self.dir.join("checkpoint")
    }

    fn intermediate_stem(&self, iteration: usize) -> PathBuf {
        self.dir.join(format!("checkpoint_iter_{iteration:06}"))
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
}

fn clip_global_norm(grads: &mut [f64], max_norm: f64) {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
}

fn batch_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0xBA7C_4000_0000_0001)
}

/// Trains the encoder on in-memory pairs.
pub fn train_pairs(
    pairs: &[CinePair],
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    output: Option<&TrainOutput>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    enc_cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Empty("training split has no pairs".into()));
    }
    if pairs.len() < cfg.batch_size {
        return Err(Error::InvalidConfig(format!(
            "{} training pairs for batch size {}",
            pairs.len(),
            cfg.batch_size
        )));
    }
    for p in pairs {
        p.check_inter_view()?;
        if p.a.cycle_count != 1 || p.b.cycle_count != 1 {
            return Err(Error::InvalidConfig(
                "training expects single-cycle cines".into(),
            ));
        }
        if p.a.feature_dim() != enc_cfg.input_dim || p.b.feature_dim() != enc_cfg.input_dim {
            return Err(Error::Shape(format!(
                "encoder input_dim {} does not match cine features {} / {}",
                enc_cfg.input_dim,
                p.a.feature_dim(),
                p.b.feature_dim()
            )));
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;

    let mut log_writer = match output {
        Some(out) => {
            fs::create_dir_all(&out.dir)?;
            Some(BufWriter::new(File::create(out.log_path())?))
        }
        None => None,
    };

    let mut params = init_params(enc_cfg, cfg.seed)?;
    let mut flat = params.flatten();
    let mut adam = AdamState::new(flat.len());
    let mut rng = batch_rng(cfg.seed);
    let loss_cfg = cfg.loss_config();
    let mut log = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let lr = cfg.lr_at(iteration);
        let batch = (0..cfg.batch_size)
            .map(|_| {
                let pick = rng.random_range(0..pairs.len());
                prepare_pair(&pairs[pick], &mut rng, cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = pool.install(|| combined_loss(&batch, &params, &cfg.weights, &loss_cfg))?;

        let record = LogRecord {
            iteration,
            loss: loss.value,
            spatial: loss.spatial,
            temporal: loss.temporal,
            inter: loss.inter,
            lr,
        };
        if let Some(w) = log_writer.as_mut() {
            let line = serde_json::to_string(&record).map_err(|e| Error::json("metrics", e))?;
            writeln!(w, "{line}")?;
        }
        log.push(record);

        let mut grads = loss.grads.flatten();
        let finite = loss.value.is_finite() && grads.iter().all(|g| g.is_finite());
        if !finite {
            if let Some(out) = output {
                if let Some(w) = log_writer.as_mut() {
                    w.flush()?;
                }
                Checkpoint::new(params.clone(), cfg.seed, iteration, Some(adam.clone()))
                    .save(&out.checkpoint_stem())?;
            }
            return Err(Error::TrainingAborted {
                iteration,
                reason: format!("non-finite loss {}", loss.value),
            });
        }
        if let Some(c) = cfg.grad_clip {
            clip_global_norm(&mut grads, c);
        }
        adam_step(&mut flat, &grads, &mut adam, lr, &cfg.adam).map_err(|e| {
            Error::TrainingAborted {
                iteration,
                reason: e.to_string(),
            }
        })?;
        params = EncoderParams::unflatten(enc_cfg, &flat)?;

        if let (Some(out), Some(every)) = (output, cfg.checkpoint_every) {
            let done = iteration + 1;
            if done % every == 0 && done < cfg.iterations {
                Checkpoint::new(params.clone(), cfg.seed, done, Some(adam.clone()))
                    .save(&out.intermediate_stem(done))?;
            }
        }
    }

    let checkpoint = match output {
        Some(out) => {
            if let Some(w) = log_writer.as_mut() {
                w.flush()?;
            }
            let stem = out.checkpoint_stem();
            Checkpoint::new(params.clone(), cfg.seed, cfg.iterations, Some(adam.clone()))
                .save(&stem)?;
            Some(stem)
        }
        None => None,
    };
    Ok(TrainOutcome {
        params,
        adam,
        log,
        checkpoint,
    })
}

/// Trains on the training split of a dataset manifest.
pub fn train(
    manifest_path: &Path,
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    output: Option<&TrainOutput>,
) -> Result<TrainOutcome> {
    let manifest = crate::data::Manifest::load(manifest_path)?;
    let pairs: Vec<CinePair> = manifest
        .load_split(crate::data::Split::Train)?
        .into_iter()
        .map(|(_, p)| p)
        .collect();
    train_pairs(&pairs, enc_cfg, cfg, output)
}

/// Evaluates the combined loss on a fixed batch (no update).
pub fn evaluate_batch(
    params: &EncoderParams,
    batch: &[PreparedPair],
    cfg: &TrainConfig,
) -> Result<f64> {
    Ok(combined_loss(batch, params, &cfg.weights, &cfg.loss_config())?.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_pair, SynthConfig};

    #[test]
    fn subsample_short_and_long() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((15, 2), |(i, _)| i as f64);
        let (idx, sel) = subsample_frames(x.view(), &mut rng, 20);
        assert_eq!(idx, (0..15).collect::<Vec<_>>());
        assert_eq!(sel, x);

        let x = Array2::from_shape_fn((50, 2), |(i, _)| i as f64);
        let (idx, sel) = subsample_frames(x.view(), &mut rng, 20);
        assert_eq!(idx.len(), 20);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        for (r, &i) in idx.iter().enumerate() {
            assert_eq!(sel[[r, 0]], i as f64);
        }
    }

    #[test]
    fn subsample_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::<f64>::zeros((40, 1));
        let mut counts = [0usize; 40];
        let draws = 10_000;
        for _ in 0..draws {
            for i in subsample_frames(x.view(), &mut rng, 20).0 {
                counts[i] += 1;
            }
        }
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.5).abs() < 0.02, "freq {freq}");
        }
    }

    #[test]
    fn adam_first_step_and_zero_grad() {
        let cfg = AdamConfig::default();
        let mut p = [0.0];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut st, 1e-4, &cfg).unwrap();
        assert!((p[0] + 1e-4).abs() < 1e-4 * 1e-7);

        let mut p = [0.3, -0.7];
        let mut st = AdamState::new(2);
        for _ in 0..5 {
            adam_step(&mut p, &[0.0, 0.0], &mut st, 1e-3, &cfg).unwrap();
        }
        assert_eq!(p, [0.3, -0.7]);
        assert!(adam_step(&mut p, &[f64::NAN, 0.0], &mut st, 1e-3, &cfg).is_err());
        assert!(adam_step(&mut p, &[0.0], &mut st, 1e-3, &cfg).is_err());
    }

    #[test]
    fn adam_matches_straight_line_oracle() {
        let cfg = AdamConfig::default();
        let grads = [0.5, -1.25, 2.0];
        let lr = 0.01;
        let mut p = [1.0];
        let mut st = AdamState::new(1);
        for g in grads {
            adam_step(&mut p, &[g], &mut st, lr, &cfg).unwrap();
        }
        // straight-line recomputation
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut x = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        m = b1 * m + (1.0 - b1) * 0.5;
        v = b2 * v + (1.0 - b2) * 0.25;
        x -= lr * (m / (1.0 - b1)) / ((v / (1.0 - b2)).sqrt() + eps);
        m = b1 * m + (1.0 - b1) * -1.25;
        v = b2 * v + (1.0 - b2) * 1.5625;
        x -= lr * (m / (1.0 - b1 * b1)) / ((v / (1.0 - b2 * b2)).sqrt() + eps);
        m = b1 * m + (1.0 - b1) * 2.0;
        v = b2 * v + (1.0 - b2) * 4.0;
        x -= lr * (m / (1.0 - b1 * b1 * b1)) / ((v / (1.0 - b2 * b2 * b2)).sqrt() + eps);
        assert!((p[0] - x).abs() < 1e-12);
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig {
            lr: 1e-3,
            lr_decay: 0.5,
            decay_every: 10,
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert_eq!(cfg.lr_at(9), 1e-3);
        assert_eq!(cfg.lr_at(10), 1e-3 * 0.5);
        assert_eq!(cfg.lr_at(35), 1e-3 * 0.5f64.powi(3));
    }

    fn few_pairs(n: u64) -> Vec<CinePair> {
        let cfg = SynthConfig {
            feature_dim: 6,
            frames_per_cycle: 12,
            ..Default::default()
        };
        (0..n).map(|i| generate_pair(&cfg, i).unwrap()).collect()
    }

    fn small_enc() -> EncoderConfig {
        EncoderConfig {
            input_dim: 6,
            hidden_dim: 8,
            context: 3,
            agg_hidden: 8,
            embed_dim: 4,
            classifier_hidden1: 8,
            classifier_hidden2: 4,
        }
    }

    #[test]
    fn zero_iterations_returns_init() {
        let pairs = few_pairs(4);
        let cfg = TrainConfig {
            iterations: 0,
            ..Default::default()
        };
        let out = train_pairs(&pairs, &small_enc(), &cfg, None).unwrap();
        assert_eq!(out.params, init_params(&small_enc(), cfg.seed).unwrap());
        assert!(out.log.is_empty());
    }

    #[test]
    fn training_is_deterministic_across_thread_counts() {
        let pairs = few_pairs(5);
        let cfg = TrainConfig {
            iterations: 10,
            lr: 1e-3,
            ..Default::default()
        };
        let a = train_pairs(&pairs, &small_enc(), &cfg, None).unwrap();
        let b = train_pairs(
            &pairs,
            &small_enc(),
            &TrainConfig {
                threads: 3,
                ..cfg.clone()
            },
            None,
        )
        .unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 10);
    }

    #[test]
    fn rejects_bad_inputs() {
        let pairs = few_pairs(2);
        let cfg = TrainConfig::default();
        assert!(train_pairs(&pairs, &small_enc(), &cfg, None).is_err());
        assert!(train_pairs(&[], &small_enc(), &cfg, None).is_err());
        let wrong_dim = EncoderConfig {
            input_dim: 5,
            ..small_enc()
        };
        let four = few_pairs(4);
        assert!(matches!(
            train_pairs(&four, &wrong_dim, &cfg, None),
            Err(Error::Shape(_))
        ));
    }
}

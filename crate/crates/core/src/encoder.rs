//! Two-stage frame encoder and the triplet order classifier head.
//!
//! Stage one maps every frame through an affine layer with ReLU. Stage two
//! stacks the stage-one features of the `k` frames centred on each position
//! (indices clamped at the sequence ends) and maps the stack through
//! affine + ReLU + affine to the embedding. Gradients are hand-derived
//! reverse mode.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Temporal context window, odd.
    pub context: usize,
    pub agg_hidden: usize,
    pub embed_dim: usize,
    pub classifier_hidden1: usize,
    pub classifier_hidden2: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 24,
            hidden_dim: 32,
            context: 5,
            agg_hidden: 32,
            embed_dim: 16,
            classifier_hidden1: 32,
            classifier_hidden2: 16,
        }
    }
}

impl EncoderConfig {
    pub fn with_input_dim(input_dim: usize) -> Self {
        Self {
            input_dim,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.context.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "context window must be odd, got {}",
                self.context
            )));
        }
        let dims = [
            self.input_dim,
            self.hidden_dim,
            self.context,
            self.agg_hidden,
            self.embed_dim,
            self.classifier_hidden1,
            self.classifier_hidden2,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "all dimensions must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    fn shapes(&self) -> [(usize, usize); 12] {
        let (f, h, k, g, d) = (
            self.input_dim,
            self.hidden_dim,
            self.context,
            self.agg_hidden,
            self.embed_dim,
        );
        let (c1, c2) = (self.classifier_hidden1, self.classifier_hidden2);
        [
            (h, f),
            (h, 1),
            (g, k * h),
            (g, 1),
            (d, g),
            (d, 1),
            (c1, 3 * d),
            (c1, 1),
            (c2, c1),
            (c2, 1),
            (2, c2),
            (2, 1),
        ]
    }

    /// Length of the flattened parameter vector.
    pub fn n_params(&self) -> usize {
        self.shapes().iter().map(|(r, c)| r * c).sum()
    }
}

/// All learnable parameters. Also used as the gradient container.
///
/// Flatten order: frame layer (W, b), aggregation layer (W, b), output layer
/// (W, b), then the three classifier layers (W, b), each matrix row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub frame_w: Array2<f64>,
    pub frame_b: Array1<f64>,
    pub agg_w: Array2<f64>,
    pub agg_b: Array1<f64>,
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
    pub cls_w1: Array2<f64>,
    pub cls_b1: Array1<f64>,
    pub cls_w2: Array2<f64>,
    pub cls_b2: Array1<f64>,
    pub cls_w3: Array2<f64>,
    pub cls_b3: Array1<f64>,
}

impl EncoderParams {
    pub fn zeros(config: &EncoderConfig) -> Self {
        let sh = config.shapes();
        let m = |i: usize| Array2::zeros(sh[i]);
        let v = |i: usize| Array1::zeros(sh[i].0);
        Self {
            config: *config,
            frame_w: m(0),
            frame_b: v(1),
            agg_w: m(2),
            agg_b: v(3),
            out_w: m(4),
            out_b: v(5),
            cls_w1: m(6),
            cls_b1: v(7),
            cls_w2: m(8),
            cls_b2: v(9),
            cls_w3: m(10),
            cls_b3: v(11),
        }
    }

    fn slices(&self) -> [&[f64]; 12] {
        fn m(a: &Array2<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        fn v(a: &Array1<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        [
            m(&self.frame_w),
            v(&self.frame_b),
            m(&self.agg_w),
            v(&self.agg_b),
            m(&self.out_w),
            v(&self.out_b),
            m(&self.cls_w1),
            v(&self.cls_b1),
            m(&self.cls_w2),
            v(&self.cls_b2),
            m(&self.cls_w3),
            v(&self.cls_b3),
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 12] {
        [
            self.frame_w.as_slice_mut().expect("standard layout"),
            self.frame_b.as_slice_mut().expect("standard layout"),
            self.agg_w.as_slice_mut().expect("standard layout"),
            self.agg_b.as_slice_mut().expect("standard layout"),
            self.out_w.as_slice_mut().expect("standard layout"),
            self.out_b.as_slice_mut().expect("standard layout"),
            self.cls_w1.as_slice_mut().expect("standard layout"),
            self.cls_b1.as_slice_mut().expect("standard layout"),
            self.cls_w2.as_slice_mut().expect("standard layout"),
            self.cls_b2.as_slice_mut().expect("standard layout"),
            self.cls_w3.as_slice_mut().expect("standard layout"),
            self.cls_b3.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn unflatten(config: &EncoderConfig, flat: &[f64]) -> Result<Self> {
        if flat.len() != config.n_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                config.n_params(),
                flat.len()
            )));
        }
        let mut params = Self::zeros(config);
        let mut rest = flat;
        for dst in params.slices_mut() {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
        Ok(params)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &EncoderParams) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for dst in self.slices_mut() {
            dst.iter_mut().for_each(|d| *d *= alpha);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    fn check_input(&self, frames: &ArrayView2<f64>) -> Result<()> {
        if frames.ncols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "encoder expects {} features per frame, got {}",
                self.config.input_dim,
                frames.ncols()
            )));
        }
        if frames.nrows() == 0 {
            return Err(Error::Empty("cine has no frames".into()));
        }
        Ok(())
    }
}

/// Weights ~ N(0, 1/fan_in), biases zero.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = EncoderParams::zeros(config);
    let fill = |w: &mut Array2<f64>, rng: &mut ChaCha8Rng| {
        let scale = 1.0 / (w.ncols() as f64).sqrt();
        w.iter_mut().for_each(|v| {
            let z: f64 = StandardNormal.sample(rng);
            *v = scale * z;
        });
    };
    fill(&mut params.frame_w, &mut rng);
    fill(&mut params.agg_w, &mut rng);
    fill(&mut params.out_w, &mut rng);
    fill(&mut params.cls_w1, &mut rng);
    fill(&mut params.cls_w2, &mut rng);
    fill(&mut params.cls_w3, &mut rng);
    Ok(params)
}

/// Per-frame embeddings, `T x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence(pub Array2<f64>);

impl EmbeddingSequence {
    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

fn relu(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

fn add_bias(a: &mut Array2<f64>, b: &Array1<f64>) {
    *a += &b.view().insert_axis(Axis(0));
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pre1: Array2<f64>,
    ctx: Array2<f64>,
    pre2: Array2<f64>,
    act2: Array2<f64>,
    pub embeddings: Array2<f64>,
}

impl ForwardCache {
    /// Smallest magnitude of any ReLU pre-activation.
    pub fn kink_margin(&self) -> f64 {
        self.pre1
            .iter()
            .chain(self.pre2.iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

fn context_source(t: usize, offset: usize, radius: usize, len: usize) -> usize {
    (t + offset).saturating_sub(radius).min(len - 1)
}

pub fn forward_cached(params: &EncoderParams, frames: ArrayView2<f64>) -> Result<ForwardCache> {
    params.check_input(&frames)?;
    let cfg = &params.config;
    let (t_len, h, k) = (frames.nrows(), cfg.hidden_dim, cfg.context);
    let radius = k / 2;

    let mut pre1 = frames.dot(&params.frame_w.t());
    add_bias(&mut pre1, &params.frame_b);
    let mut hidden = pre1.clone();
    relu(&mut hidden);

    let mut ctx = Array2::zeros((t_len, k * h));
    for t in 0..t_len {
        for o in 0..k {
            let src = context_source(t, o, radius, t_len);
            ctx.slice_mut(s![t, o * h..(o + 1) * h])
                .assign(&hidden.row(src));
        }
    }

    let mut pre2 = ctx.dot(&params.agg_w.t());
    add_bias(&mut pre2, &params.agg_b);
    let mut act2 = pre2.clone();
    relu(&mut act2);

    let mut embeddings = act2.dot(&params.out_w.t());
    add_bias(&mut embeddings, &params.out_b);

    Ok(ForwardCache {
        pre1,
        ctx,
        pre2,
        act2,
        embeddings,
    })
}

pub fn forward(params: &EncoderParams, frames: ArrayView2<f64>) -> Result<EmbeddingSequence> {
    forward_cached(params, frames).map(|c| EmbeddingSequence(c.embeddings))
}

fn relu_mask(grad: &mut Array2<f64>, pre: &Array2<f64>) {
    grad.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Accumulates the gradient of `<embeddings, upstream>` into the encoder
/// fields of `grads`.
pub fn backward_into(
    params: &EncoderParams,
    frames: ArrayView2<f64>,
    cache: &ForwardCache,
    upstream: ArrayView2<f64>,
    grads: &mut EncoderParams,
) -> Result<()> {
    if upstream.dim() != cache.embeddings.dim() {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} does not match embeddings {:?}",
            upstream.dim(),
            cache.embeddings.dim()
        )));
    }
    let cfg = &params.config;
    let (t_len, h, k) = (frames.nrows(), cfg.hidden_dim, cfg.context);
    let radius = k / 2;

    grads.out_w += &upstream.t().dot(&cache.act2);
    grads.out_b += &upstream.sum_axis(Axis(0));

    let mut d_pre2 = upstream.dot(&params.out_w);
    relu_mask(&mut d_pre2, &cache.pre2);
    grads.agg_w += &d_pre2.t().dot(&cache.ctx);
    grads.agg_b += &d_pre2.sum_axis(Axis(0));

    let d_ctx = d_pre2.dot(&params.agg_w);
    let mut d_pre1 = Array2::zeros((t_len, h));
    for t in 0..t_len {
        for o in 0..k {
            let src = context_source(t, o, radius, t_len);
            let block = d_ctx.slice(s![t, o * h..(o + 1) * h]);
            let mut row = d_pre1.row_mut(src);
            row += &block;
        }
    }
    relu_mask(&mut d_pre1, &cache.pre1);
    grads.frame_w += &d_pre1.t().dot(&frames);
    grads.frame_b += &d_pre1.sum_axis(Axis(0));
    Ok(())
}

/// Gradient of `<forward(params, frames), upstream>` w.r.t. every parameter.
/// Classifier fields of the result are zero.
pub fn backward(
    params: &EncoderParams,
    frames: ArrayView2<f64>,
    upstream: ArrayView2<f64>,
) -> Result<EncoderParams> {
    let cache = forward_cached(params, frames)?;
    let mut grads = EncoderParams::zeros(&params.config);
    backward_into(params, frames, &cache, upstream, &mut grads)?;
    Ok(grads)
}

// ---------------------------------------------------------------------------
// Order classifier

#[derive(Debug, Clone)]
pub struct ClassifierCache {
    input: Array1<f64>,
    pre1: Array1<f64>,
    act1: Array1<f64>,
    pre2: Array1<f64>,
    act2: Array1<f64>,
    pub logits: [f64; 2],
}

impl ClassifierCache {
    /// Probability of the "sorted" class.
    pub fn prob_sorted(&self) -> f64 {
        prob_sorted(self.logits)
    }

    pub fn kink_margin(&self) -> f64 {
        self.pre1
            .iter()
            .chain(self.pre2.iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

/// Softmax component 1 of a two-logit output.
pub fn prob_sorted(logits: [f64; 2]) -> f64 {
    1.0 / (1.0 + (logits[0] - logits[1]).exp())
}

fn relu1(v: &Array1<f64>) -> Array1<f64> {
    v.mapv(|x| x.max(0.0))
}

pub fn classifier_cached(
    params: &EncoderParams,
    triplet: ArrayView2<f64>,
) -> Result<ClassifierCache> {
    let d = params.config.embed_dim;
    if triplet.dim() != (3, d) {
        return Err(Error::Shape(format!(
            "classifier expects a 3x{d} triplet, got {:?}",
            triplet.dim()
        )));
    }
    let input: Array1<f64> = triplet.iter().copied().collect();
    let pre1 = params.cls_w1.dot(&input) + &params.cls_b1;
    let act1 = relu1(&pre1);
    let pre2 = params.cls_w2.dot(&act1) + &params.cls_b2;
    let act2 = relu1(&pre2);
    let out = params.cls_w3.dot(&act2) + &params.cls_b3;
    Ok(ClassifierCache {
        input,
        pre1,
        act1,
        pre2,
        act2,
        logits: [out[0], out[1]],
    })
}

pub fn forward_classifier(params: &EncoderParams, triplet: ArrayView2<f64>) -> Result<[f64; 2]> {
    classifier_cached(params, triplet).map(|c| c.logits)
}

/// Accumulates classifier parameter gradients into `grads` and returns the
/// gradient w.r.t. the `3 x d` triplet input.
pub fn classifier_backward_into(
    params: &EncoderParams,
    cache: &ClassifierCache,
    d_logits: [f64; 2],
    grads: &mut EncoderParams,
) -> Array2<f64> {
    let d_out = Array1::from(d_logits.to_vec());
    outer_add(&mut grads.cls_w3, d_out.view(), cache.act2.view());
    grads.cls_b3 += &d_out;

    let mut d_pre2 = params.cls_w3.t().dot(&d_out);
    d_pre2.zip_mut_with(&cache.pre2, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    outer_add(&mut grads.cls_w2, d_pre2.view(), cache.act1.view());
    grads.cls_b2 += &d_pre2;

    let mut d_pre1 = params.cls_w2.t().dot(&d_pre2);
    d_pre1.zip_mut_with(&cache.pre1, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    outer_add(&mut grads.cls_w1, d_pre1.view(), cache.input.view());
    grads.cls_b1 += &d_pre1;

    let d_input = params.cls_w1.t().dot(&d_pre1);
    d_input
        .into_shape_with_order((3, params.config.embed_dim))
        .expect("3d input")
}

fn outer_add(dst: &mut Array2<f64>, left: ArrayView1<f64>, right: ArrayView1<f64>) {
    for (mut row, l) in dst.rows_mut().into_iter().zip(left.iter()) {
        row.scaled_add(*l, &right);
    }
}

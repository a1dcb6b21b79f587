//! Toy latent diffusion sampler with trajectory-aligned attention guidance.
//!
//! The denoiser patchifies a `T x C x H x W` latent into `(p_t, p_h, p_w)`
//! patches, runs one cross-attention layer against text-token embeddings and
//! predicts noise. During sampling, the latent is pushed down the gradient of
//! the per-frame box energy
//!
//! ```text
//! E_i = (1 - sum_{u in B_i} A[i,u,n] / sum_u A[i,u,n])^2
//! ```
//!
//! before each reverse step, which concentrates the motion token's attention
//! inside the frame's bounding box.

use rand::Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math;
use crate::parser::GenQuery;
use crate::trajectory::{GridTrack, PatchSize};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GuidanceError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("timestep {t} outside [1, {steps}]")]
    Timestep { t: usize, steps: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("bounding box for frame {frame} is empty on the patch grid")]
    DegenerateBox { frame: usize },
    #[error("token index {token} out of range for {count} tokens")]
    Token { token: usize, count: usize },
    #[error("attention mass of token {token} in frame {frame} is zero")]
    ZeroMass { frame: usize, token: usize },
    #[error("non-finite guidance gradient at step {}", .0.step)]
    NonFiniteGradient(Box<GuidanceDump>),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// State captured when guidance produces a non-finite gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceDump {
    pub step: usize,
    pub t: usize,
    pub attention: AttentionTensor,
    pub latent: LatentTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    /// Running product of `sqrt(alpha_s)`, the mean coefficient of `x_t | x_0`.
    sqrt_alpha_bars: Vec<f64>,
}

/// Linear beta schedule over `steps` timesteps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule, GuidanceError> {
    if steps == 0 {
        return Err(GuidanceError::Schedule("need at least one timestep".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(GuidanceError::Schedule(format!(
            "require 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    let sqrt_alpha_bars = alphas
        .iter()
        .scan(1.0, |acc: &mut f64, a| {
            *acc *= a.sqrt();
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
        sqrt_alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<usize, GuidanceError> {
        if t == 0 || t > self.steps() {
            return Err(GuidanceError::Timestep {
                t,
                steps: self.steps(),
            });
        }
        Ok(t - 1)
    }

    /// `beta_t` for 1-based `t`. Panics outside `[1, T]`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> f64 {
        self.sqrt_alpha_bars[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentShape {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub fn len(&self) -> usize {
        self.frames * self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Row-major `T x C x H x W` latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTensor {
    pub shape: LatentShape,
    pub data: Vec<f64>,
}

impl LatentTensor {
    pub fn zeros(shape: LatentShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn from_vec(shape: LatentShape, data: Vec<f64>) -> Result<Self, GuidanceError> {
        if data.len() != shape.len() {
            return Err(GuidanceError::Shape(format!(
                "{} values for shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn random(shape: LatentShape, rng: &mut impl Rng) -> Self {
        let data = (0..shape.len()).map(|_| rng.sample(StandardNormal)).collect();
        Self { shape, data }
    }

    pub fn index(&self, f: usize, c: usize, h: usize, w: usize) -> usize {
        let s = &self.shape;
        ((f * s.channels + c) * s.height + h) * s.width + w
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &LatentTensor) -> Result<(), GuidanceError> {
        if self.shape != other.shape {
            return Err(GuidanceError::Shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

/// Forward marginal `sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`.
pub fn q_sample(
    x0: &LatentTensor,
    t: usize,
    noise: &LatentTensor,
    sched: &NoiseSchedule,
) -> Result<LatentTensor, GuidanceError> {
    sched.check(t)?;
    x0.same_shape(noise)?;
    let (a, b) = (sched.sqrt_alpha_bar(t), (1.0 - sched.alpha_bar(t)).sqrt());
    let data = x0
        .data
        .iter()
        .zip(&noise.data)
        .map(|(x, n)| a * x + b * n)
        .collect();
    Ok(LatentTensor {
        shape: x0.shape,
        data,
    })
}

/// One forward transition `sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) noise`.
pub fn q_step(
    x_prev: &LatentTensor,
    t: usize,
    noise: &LatentTensor,
    sched: &NoiseSchedule,
) -> Result<LatentTensor, GuidanceError> {
    sched.check(t)?;
    x_prev.same_shape(noise)?;
    let beta = sched.beta(t);
    let (a, b) = ((1.0 - beta).sqrt(), beta.sqrt());
    let data = x_prev
        .data
        .iter()
        .zip(&noise.data)
        .map(|(x, n)| a * x + b * n)
        .collect();
    Ok(LatentTensor {
        shape: x_prev.shape,
        data,
    })
}

/// Text conditioning: one embedding per token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub tokens: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
}

impl Conditioning {
    /// Deterministic embeddings derived from each token's text.
    pub fn from_tokens(tokens: &[String], dim: usize, seed: u64) -> Self {
        let embeddings = tokens
            .iter()
            .map(|tok| {
                let mut rng = math::rng_from_text(tok, seed);
                (0..dim).map(|_| rng.sample(StandardNormal)).collect()
            })
            .collect();
        Self {
            tokens: tokens.to_vec(),
            embeddings,
        }
    }

    /// Token sequence for a generation plan and the index of the motion
    /// (object) token.
    pub fn from_plan(plan: &GenQuery, dim: usize, seed: u64) -> (Self, usize) {
        let mut tokens = vec!["<start>".to_string(), plan.object_phrase.clone()];
        if let Some(c) = &plan.color {
            tokens.push(c.clone());
        }
        tokens.push(plan.speed.as_str().to_string());
        tokens.push(plan.direction.as_str().to_string());
        if let Some(scene) = &plan.scene_phrase {
            tokens.extend(scene.split_whitespace().map(String::from));
        }
        (Self::from_tokens(&tokens, dim, seed), 1)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Cross-attention probabilities `A[i][u][n]` on the patch grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTensor {
    /// `(temporal, height, width)` cells.
    pub grid: (usize, usize, usize),
    pub token_names: Vec<String>,
    data: Vec<f64>,
}

impl AttentionTensor {
    pub fn new(
        grid: (usize, usize, usize),
        token_names: Vec<String>,
        data: Vec<f64>,
    ) -> Result<Self, GuidanceError> {
        if token_names.is_empty() {
            return Err(GuidanceError::Shape("attention needs at least one token".into()));
        }
        if data.len() != grid.0 * grid.1 * grid.2 * token_names.len() {
            return Err(GuidanceError::Shape(format!(
                "{} values for grid {:?} x {} tokens",
                data.len(),
                grid,
                token_names.len()
            )));
        }
        Ok(Self {
            grid,
            token_names,
            data,
        })
    }

    pub fn tokens(&self) -> usize {
        self.token_names.len()
    }

    pub fn frames(&self) -> usize {
        self.grid.0
    }

    /// Spatial cells per frame.
    pub fn cells(&self) -> usize {
        self.grid.1 * self.grid.2
    }

    pub fn get(&self, frame: usize, cell: usize, token: usize) -> f64 {
        self.data[(frame * self.cells() + cell) * self.tokens() + token]
    }

    pub fn row(&self, frame: usize, cell: usize) -> &[f64] {
        let n = self.tokens();
        let start = (frame * self.cells() + cell) * n;
        &self.data[start..start + n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Scales token `token` in every cell of `frame` (rows stop summing to one).
    pub fn scale_token(&mut self, frame: usize, token: usize, c: f64) {
        let (n, cells) = (self.tokens(), self.cells());
        for cell in 0..cells {
            self.data[(frame * cells + cell) * n + token] *= c;
        }
    }
}

/// Position of grid cell `(t, h, w)` in the token sequence.
pub fn token_index(grid: (usize, usize, usize), t: usize, h: usize, w: usize) -> usize {
    (t * grid.1 + h) * grid.2 + w
}

/// Inverse of [`token_index`].
pub fn grid_coords(grid: (usize, usize, usize), index: usize) -> (usize, usize, usize) {
    let w = index % grid.2;
    let h = (index / grid.2) % grid.1;
    let t = index / (grid.1 * grid.2);
    (t, h, w)
}

/// Noise prediction `eps_theta(x_t, t, c)`.
pub trait NoisePredictor {
    fn predict_noise(
        &self,
        x: &LatentTensor,
        t: usize,
        cond: &Conditioning,
    ) -> Result<LatentTensor, GuidanceError>;
}

/// A model exposing its cross-attention maps and their vector-Jacobian
/// product with respect to the latent.
pub trait AttentionModel {
    fn attention(
        &self,
        x: &LatentTensor,
        t: usize,
        cond: &Conditioning,
    ) -> Result<AttentionTensor, GuidanceError>;

    /// Pulls `d loss / d A` (same layout as the attention data) back to
    /// `d loss / d x`.
    fn attention_vjp(
        &self,
        x: &LatentTensor,
        t: usize,
        cond: &Conditioning,
        grad_attention: &[f64],
    ) -> Result<LatentTensor, GuidanceError>;
}

/// `x_{t-1} = (x_t - sqrt(1 - alpha_t) eps) / sqrt(alpha_t) + sigma_t z`
/// with `sigma_t = sqrt(beta_t)`.
pub fn reverse_step(
    x_t: &LatentTensor,
    t: usize,
    denoiser: &dyn NoisePredictor,
    cond: &Conditioning,
    sched: &NoiseSchedule,
    z: &LatentTensor,
) -> Result<LatentTensor, GuidanceError> {
    sched.check(t)?;
    x_t.same_shape(z)?;
    let eps = denoiser.predict_noise(x_t, t, cond)?;
    x_t.same_shape(&eps)?;
    let alpha = sched.alpha(t);
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let eps_coef = (1.0 - alpha).sqrt();
    let sigma = sched.beta(t).sqrt();
    let data = x_t
        .data
        .iter()
        .zip(&eps.data)
        .zip(&z.data)
        .map(|((x, e), zz)| inv_sqrt_alpha * (x - eps_coef * e) + sigma * zz)
        .collect();
    Ok(LatentTensor {
        shape: x_t.shape,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub patch: PatchSize,
    pub channels: usize,
    pub model_dim: usize,
    pub key_dim: usize,
    pub text_dim: usize,
    /// Multiplier on the query projection; larger values sharpen attention.
    pub attention_gain: f64,
    /// Attention logits are scaled by `exp(-t / sharpness_decay)`, so maps
    /// are diffuse at high noise and sharpen as sampling proceeds. Zero
    /// keeps the scale at one.
    pub sharpness_decay: f64,
    /// Multiplier on the output projection.
    pub output_scale: f64,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            patch: PatchSize { t: 1, h: 2, w: 2 },
            channels: 4,
            model_dim: 32,
            key_dim: 16,
            text_dim: 16,
            attention_gain: 1.0,
            sharpness_decay: 0.0,
            output_scale: 0.1,
            seed: 7,
        }
    }
}

/// Untrained denoiser with fixed seeded weights and one cross-attention
/// layer. All operations are smooth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDenoiser {
    cfg: DenoiserConfig,
    /// `model_dim x patch_len`
    embed: Vec<f64>,
    embed_bias: Vec<f64>,
    /// `key_dim x model_dim`
    query: Vec<f64>,
    /// `key_dim x text_dim`
    key: Vec<f64>,
    /// `model_dim x text_dim`
    value: Vec<f64>,
    /// `patch_len x model_dim`
    output: Vec<f64>,
}

fn matvec(m: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &m[r * cols..(r + 1) * cols];
        out[r] = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

fn matvec_t(m: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for r in 0..rows {
        let row = &m[r * cols..(r + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * v[r];
        }
    }
}

/// Per-token intermediate values of the attention path.
struct AttentionPass {
    grid: (usize, usize, usize),
    hidden: Vec<Vec<f64>>,
    probs: Vec<f64>,
    keys: Vec<Vec<f64>>,
}

impl ToyDenoiser {
    pub fn new(cfg: DenoiserConfig) -> Result<Self, GuidanceError> {
        let p = cfg.patch;
        if p.t == 0 || p.h == 0 || p.w == 0 {
            return Err(GuidanceError::Config("patch sizes must be nonzero".into()));
        }
        if cfg.channels == 0 || cfg.model_dim == 0 || cfg.key_dim == 0 || cfg.text_dim == 0 {
            return Err(GuidanceError::Config("dimensions must be nonzero".into()));
        }
        let patch_len = cfg.channels * p.t * p.h * p.w;
        let mut rng = math::rng_from_seed(cfg.seed);
        let mut init = |rows: usize, cols: usize, gain: f64| -> Vec<f64> {
            let dist = Normal::new(0.0, gain / (cols as f64).sqrt()).expect("valid normal");
            (0..rows * cols).map(|_| rng.sample(dist)).collect()
        };
        let embed = init(cfg.model_dim, patch_len, 1.0);
        let embed_bias = init(cfg.model_dim, 1, 0.1);
        let query = init(cfg.key_dim, cfg.model_dim, cfg.attention_gain);
        let key = init(cfg.key_dim, cfg.text_dim, 1.0);
        let value = init(cfg.model_dim, cfg.text_dim, 1.0);
        let output = init(patch_len, cfg.model_dim, cfg.output_scale);
        Ok(Self {
            cfg,
            embed,
            embed_bias,
            query,
            key,
            value,
            output,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    fn patch_len(&self) -> usize {
        let p = self.cfg.patch;
        self.cfg.channels * p.t * p.h * p.w
    }

    /// Patch grid for a latent, padding partial patches.
    pub fn grid_for(&self, shape: LatentShape) -> (usize, usize, usize) {
        let p = self.cfg.patch;
        (
            shape.frames.div_ceil(p.t),
            shape.height.div_ceil(p.h),
            shape.width.div_ceil(p.w),
        )
    }

    fn check_input(&self, x: &LatentTensor, cond: &Conditioning) -> Result<(), GuidanceError> {
        if x.shape.channels != self.cfg.channels {
            return Err(GuidanceError::Shape(format!(
                "latent has {} channels, denoiser expects {}",
                x.shape.channels, self.cfg.channels
            )));
        }
        if cond.is_empty() {
            return Err(GuidanceError::Shape("conditioning needs at least one token".into()));
        }
        if cond.embeddings.iter().any(|e| e.len() != self.cfg.text_dim) {
            return Err(GuidanceError::Shape("token embedding width mismatch".into()));
        }
        Ok(())
    }

    /// Latent positions of patch element `k` of token `(t, h, w)`, or `None`
    /// for padding.
    fn patch_position(
        &self,
        shape: LatentShape,
        cell: (usize, usize, usize),
        k: usize,
    ) -> Option<(usize, usize, usize, usize)> {
        let p = self.cfg.patch;
        let dw = k % p.w;
        let dh = (k / p.w) % p.h;
        let dt = (k / (p.w * p.h)) % p.t;
        let c = k / (p.w * p.h * p.t);
        let (f, h, w) = (cell.0 * p.t + dt, cell.1 * p.h + dh, cell.2 * p.w + dw);
        (f < shape.frames && h < shape.height && w < shape.width).then_some((f, c, h, w))
    }

    fn gather(&self, x: &LatentTensor, cell: (usize, usize, usize), out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = match self.patch_position(x.shape, cell, k) {
                Some((f, c, h, w)) => x.data[x.index(f, c, h, w)],
                None => 0.0,
            };
        }
    }

    fn scatter_add(&self, x: &mut LatentTensor, cell: (usize, usize, usize), vals: &[f64]) {
        for (k, v) in vals.iter().enumerate() {
            if let Some((f, c, h, w)) = self.patch_position(x.shape, cell, k) {
                let i = x.index(f, c, h, w);
                x.data[i] += v;
            }
        }
    }

    fn time_embedding(&self, t: usize) -> Vec<f64> {
        let d = self.cfg.model_dim;
        (0..d)
            .map(|i| {
                let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                let arg = t as f64 * freq;
                0.1 * if i % 2 == 0 { arg.sin() } else { arg.cos() }
            })
            .collect()
    }

    fn logit_scale(&self, t: usize) -> f64 {
        let base = 1.0 / (self.cfg.key_dim as f64).sqrt();
        if self.cfg.sharpness_decay > 0.0 {
            base * (-(t as f64) / self.cfg.sharpness_decay).exp()
        } else {
            base
        }
    }

    fn attention_pass(&self, x: &LatentTensor, t: usize, cond: &Conditioning) -> AttentionPass {
        let cfg = &self.cfg;
        let grid = self.grid_for(x.shape);
        let n_tok = grid.0 * grid.1 * grid.2;
        let n_text = cond.len();
        let temb = self.time_embedding(t);
        let keys: Vec<Vec<f64>> = cond
            .embeddings
            .iter()
            .map(|e| {
                let mut k = vec![0.0; cfg.key_dim];
                matvec(&self.key, cfg.key_dim, cfg.text_dim, e, &mut k);
                k
            })
            .collect();
        let scale = self.logit_scale(t);
        let mut patch = vec![0.0; self.patch_len()];
        let mut q = vec![0.0; cfg.key_dim];
        let mut hidden = Vec::with_capacity(n_tok);
        let mut probs = vec![0.0; n_tok * n_text];
        for idx in 0..n_tok {
            self.gather(x, grid_coords(grid, idx), &mut patch);
            let mut h = vec![0.0; cfg.model_dim];
            matvec(&self.embed, cfg.model_dim, self.patch_len(), &patch, &mut h);
            for ((hv, b), te) in h.iter_mut().zip(&self.embed_bias).zip(&temb) {
                *hv += b + te;
            }
            matvec(&self.query, cfg.key_dim, cfg.model_dim, &h, &mut q);
            let row = &mut probs[idx * n_text..(idx + 1) * n_text];
            for (r, k) in row.iter_mut().zip(&keys) {
                *r = scale * q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>();
            }
            softmax_in_place(row);
            hidden.push(h);
        }
        AttentionPass {
            grid,
            hidden,
            probs,
            keys,
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl AttentionModel for ToyDenoiser {
    fn attention(
        &self,
        x: &LatentTensor,
        t: usize,
        cond: &Conditioning,
    ) -> Result<AttentionTensor, GuidanceError> {
        self.check_input(x, cond)?;
        let pass = self.attention_pass(x, t, cond);
        // Token order is already (t, h, w) row-major, i.e. the grid layout.
        AttentionTensor::new(pass.grid, cond.tokens.clone(), pass.probs)
    }

    fn attention_vjp(
        &self,
        x: &LatentTensor,
        t: usize,
        cond: &Conditioning,
        grad_attention: &[f64],
    ) -> Result<LatentTensor, GuidanceError> {
        self.check_input(x, cond)?;
        let cfg = &self.cfg;
        let pass = self.attention_pass(x, t, cond);
        let n_text = cond.len();
        if grad_attention.len() != pass.probs.len() {
            return Err(GuidanceError::Shape("attention gradient size mismatch".into()));
        }
        let scale = self.logit_scale(t);
        let mut out = LatentTensor::zeros(x.shape);
        let mut dq = vec![0.0; cfg.key_dim];
        let mut dh = vec![0.0; cfg.model_dim];
        let mut dx = vec![0.0; self.patch_len()];
        for idx in 0..pass.hidden.len() {
            let a = &pass.probs[idx * n_text..(idx + 1) * n_text];
            let g = &grad_attention[idx * n_text..(idx + 1) * n_text];
            let dot: f64 = a.iter().zip(g).map(|(p, q)| p * q).sum();
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            dq.iter_mut().for_each(|v| *v = 0.0);
            for m in 0..n_text {
                let dlogit = a[m] * (g[m] - dot) * scale;
                for (d, k) in dq.iter_mut().zip(&pass.keys[m]) {
                    *d += dlogit * k;
                }
            }
            matvec_t(&self.query, cfg.key_dim, cfg.model_dim, &dq, &mut dh);
            matvec_t(&self.embed, cfg.model_dim, self.patch_len(), &dh, &mut dx);
            self.scatter_add(&mut out, grid_coords(pass.grid, idx), &dx);
        }
        Ok(out)
    }
}

impl NoisePredictor for ToyDenoiser {
    fn predict_noise(
        &self,
        x: &LatentTensor,
        t: usize,
        cond: &Conditioning,
    ) -> Result<LatentTensor, GuidanceError> {
        self.check_input(x, cond)?;
        let cfg = &self.cfg;
        let pass = self.attention_pass(x, t, cond);
        let n_text = cond.len();
        let values: Vec<Vec<f64>> = cond
            .embeddings
            .iter()
            .map(|e| {
                let mut v = vec![0.0; cfg.model_dim];
                matvec(&self.value, cfg.model_dim, cfg.text_dim, e, &mut v);
                v
            })
            .collect();
        let mut out = LatentTensor::zeros(x.shape);
        let mut mixed = vec![0.0; cfg.model_dim];
        let mut eps = vec![0.0; self.patch_len()];
        for (idx, h) in pass.hidden.iter().enumerate() {
            let a = &pass.probs[idx * n_text..(idx + 1) * n_text];
            for (d, m) in mixed.iter_mut().enumerate() {
                let attn: f64 = a.iter().zip(&values).map(|(p, v)| p * v[d]).sum();
                *m = (h[d] + attn).tanh();
            }
            matvec(&self.output, self.patch_len(), cfg.model_dim, &mixed, &mut eps);
            self.scatter_add(&mut out, grid_coords(pass.grid, idx), &eps);
        }
        Ok(out)
    }
}

fn check_box_inputs(
    a: &AttentionTensor,
    boxes: &GridTrack,
    token: usize,
    frame: usize,
) -> Result<(), GuidanceError> {
    if a.grid != boxes.grid {
        return Err(GuidanceError::Shape(format!(
            "attention grid {:?} vs box grid {:?}",
            a.grid, boxes.grid
        )));
    }
    if token >= a.tokens() {
        return Err(GuidanceError::Token {
            token,
            count: a.tokens(),
        });
    }
    if frame >= a.frames() {
        return Err(GuidanceError::Shape(format!(
            "frame {frame} outside {} attention frames",
            a.frames()
        )));
    }
    if boxes.boxes[frame].is_empty() {
        return Err(GuidanceError::DegenerateBox { frame });
    }
    Ok(())
}

/// Fraction of token `token`'s attention mass in frame `frame` that lies
/// inside the frame's box.
pub fn in_box_mass(
    a: &AttentionTensor,
    boxes: &GridTrack,
    token: usize,
    frame: usize,
) -> Result<f64, GuidanceError> {
    check_box_inputs(a, boxes, token, frame)?;
    let b = &boxes.boxes[frame];
    let gw = a.grid.2;
    let (mut inside, mut total) = (0.0, 0.0);
    for cell in 0..a.cells() {
        let v = a.get(frame, cell, token);
        total += v;
        if b.contains(cell / gw, cell % gw) {
            inside += v;
        }
    }
    if total <= 0.0 {
        return Err(GuidanceError::ZeroMass { frame, token });
    }
    Ok(inside / total)
}

/// Box energy `(1 - in_box_mass)^2`.
pub fn energy(
    a: &AttentionTensor,
    boxes: &GridTrack,
    token: usize,
    frame: usize,
) -> Result<f64, GuidanceError> {
    let r = in_box_mass(a, boxes, token, frame)?;
    Ok((1.0 - r) * (1.0 - r))
}

/// Total energy over all frames and its gradient with respect to the
/// attention data.
pub fn energy_and_grad(
    a: &AttentionTensor,
    boxes: &GridTrack,
    token: usize,
) -> Result<(f64, Vec<f64>), GuidanceError> {
    let mut grad = vec![0.0; a.data().len()];
    let mut total_energy = 0.0;
    let gw = a.grid.2;
    let n = a.tokens();
    for frame in 0..a.frames() {
        let r = in_box_mass(a, boxes, token, frame)?;
        let total: f64 = (0..a.cells()).map(|c| a.get(frame, c, token)).sum();
        total_energy += (1.0 - r) * (1.0 - r);
        // dE/dA_u = -2 (1 - r) (1[u in B] - r) / S
        let coef = -2.0 * (1.0 - r) / total;
        let b = &boxes.boxes[frame];
        for cell in 0..a.cells() {
            let inside = if b.contains(cell / gw, cell % gw) { 1.0 } else { 0.0 };
            grad[(frame * a.cells() + cell) * n + token] = coef * (inside - r);
        }
    }
    Ok((total_energy, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Step size of the latent update.
    pub eta: f64,
    /// Gradient steps per denoising step.
    pub inner_iters: usize,
    /// Fraction of denoising steps (from the noisy end) that are guided.
    pub guidance_frac: f64,
    pub seed: u64,
    pub latent: LatentShape,
    /// Also run an unguided pass with the same seeds for comparison.
    pub record_baseline: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            eta: 0.3,
            inner_iters: 5,
            guidance_frac: 0.6,
            seed: 0,
            latent: LatentShape {
                frames: 8,
                channels: 4,
                height: 16,
                width: 16,
            },
            record_baseline: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceLogEntry {
    pub step: usize,
    pub frame: usize,
    pub token: usize,
    #[serde(rename = "E_before")]
    pub e_before: f64,
    #[serde(rename = "E_after")]
    pub e_after: f64,
    pub in_box_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceLog {
    pub motion_token: usize,
    pub guided_steps: usize,
    pub entries: Vec<GuidanceLogEntry>,
    /// Mean in-box mass over frames at the last denoising step.
    pub final_in_box_mass: f64,
    /// Same quantity for an unguided run with identical seeds.
    pub baseline_final_in_box_mass: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceRun {
    /// `x_T, x_{T-1}, ..., x_0`.
    pub latents: Vec<LatentTensor>,
    pub log: GuidanceLog,
}

impl GuidanceRun {
    pub fn output(&self) -> &LatentTensor {
        self.latents.last().expect("at least x_T is stored")
    }
}

/// Guided sampling for a generation plan with the toy denoiser.
pub fn guided_sample(
    plan: &GenQuery,
    track: &GridTrack,
    sched: &NoiseSchedule,
    denoiser: &ToyDenoiser,
    cfg: &GuidanceConfig,
) -> Result<GuidanceRun, GuidanceError> {
    let (cond, motion_token) =
        Conditioning::from_plan(plan, denoiser.config().text_dim, denoiser.config().seed);
    guided_sample_with(denoiser, &cond, motion_token, track, sched, cfg)
}

/// Guided sampling with an arbitrary model and conditioning.
pub fn guided_sample_with<M>(
    model: &M,
    cond: &Conditioning,
    motion_token: usize,
    track: &GridTrack,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
) -> Result<GuidanceRun, GuidanceError>
where
    M: AttentionModel + NoisePredictor,
{
    if !(cfg.eta >= 0.0) || !cfg.eta.is_finite() {
        return Err(GuidanceError::Config(format!("eta must be >= 0, got {}", cfg.eta)));
    }
    if !(0.0..=1.0).contains(&cfg.guidance_frac) {
        return Err(GuidanceError::Config("guidance_frac must lie in [0, 1]".into()));
    }
    if motion_token >= cond.len() {
        return Err(GuidanceError::Token {
            token: motion_token,
            count: cond.len(),
        });
    }
    let steps = sched.steps();
    let guided_steps = (cfg.guidance_frac * steps as f64).round() as usize;
    let mut rng = math::rng_from_seed(cfg.seed);
    let mut x = LatentTensor::random(cfg.latent, &mut rng);
    let mut latents = vec![x.clone()];
    let mut entries = Vec::new();
    let mut last_masses = Vec::new();

    for step in 0..steps {
        let t = steps - step;
        let attn = model.attention(&x, t, cond)?;
        let frames = attn.frames();
        let mut before = Vec::with_capacity(frames);
        for f in 0..frames {
            before.push(energy(&attn, track, motion_token, f)?);
        }
        let mut final_attn = attn;
        if step < guided_steps && cfg.eta > 0.0 {
            for _ in 0..cfg.inner_iters {
                let (_, grad_a) = energy_and_grad(&final_attn, track, motion_token)?;
                let grad_x = model.attention_vjp(&x, t, cond, &grad_a)?;
                if !grad_x.is_finite() {
                    return Err(GuidanceError::NonFiniteGradient(Box::new(GuidanceDump {
                        step,
                        t,
                        attention: final_attn,
                        latent: x,
                    })));
                }
                for (v, g) in x.data.iter_mut().zip(&grad_x.data) {
                    *v -= cfg.eta * g;
                }
                final_attn = model.attention(&x, t, cond)?;
            }
        }
        last_masses.clear();
        for (f, e_before) in before.into_iter().enumerate() {
            let mass = in_box_mass(&final_attn, track, motion_token, f)?;
            let e_after = (1.0 - mass) * (1.0 - mass);
            last_masses.push(mass);
            entries.push(GuidanceLogEntry {
                step,
                frame: f,
                token: motion_token,
                e_before,
                e_after,
                in_box_mass: mass,
            });
        }
        let z = if t > 1 {
            LatentTensor::random(cfg.latent, &mut rng)
        } else {
            LatentTensor::zeros(cfg.latent)
        };
        x = reverse_step(&x, t, model, cond, sched, &z)?;
        latents.push(x.clone());
    }

    let final_in_box_mass = last_masses.iter().sum::<f64>() / last_masses.len().max(1) as f64;
    let baseline_final_in_box_mass = if cfg.record_baseline {
        let base_cfg = GuidanceConfig {
            eta: 0.0,
            record_baseline: false,
            ..*cfg
        };
        Some(guided_sample_with(model, cond, motion_token, track, sched, &base_cfg)?.log.final_in_box_mass)
    } else {
        None
    };
    Ok(GuidanceRun {
        latents,
        log: GuidanceLog {
            motion_token,
            guided_steps: if cfg.eta > 0.0 { guided_steps } else { 0 },
            entries,
            final_in_box_mass,
            baseline_final_in_box_mass,
        },
    })
}

/// Command used by [`desk_setup`].
pub const DESK_COMMAND: &str = "The car moves from left to right";

/// Everything needed for a reproducible guided run on the reference setup:
/// a 64x64 image, 8 frames, a 16x16x4 latent with 2x2 spatial patches
/// (an 8x8x8 grid) and 50 denoising steps.
#[derive(Debug, Clone)]
pub struct DeskSetup {
    pub plan: GenQuery,
    pub track: GridTrack,
    pub schedule: NoiseSchedule,
    pub denoiser: ToyDenoiser,
    pub config: GuidanceConfig,
}

pub fn desk_setup(seed: u64) -> DeskSetup {
    use crate::parser::{parse, ExecutionPlan};

    let plan = match parse(DESK_COMMAND) {
        Ok(ExecutionPlan::Gen(q)) => q,
        other => unreachable!("desk command parses to a GEN plan, got {other:?}"),
    };
    plan_setup(plan, 8, seed).expect("valid desk setup")
}

/// The reference configuration applied to an arbitrary GEN plan and frame
/// count.
pub fn plan_setup(plan: GenQuery, frames: usize, seed: u64) -> Result<DeskSetup, GuidanceError> {
    use crate::trajectory::{allocate_boxes, plan_trajectory, to_patch_grid, ImageSize, LatentDims};

    let latent = LatentShape {
        frames,
        channels: 4,
        height: 16,
        width: 16,
    };
    let patch = PatchSize { t: 1, h: 2, w: 2 };
    let image = ImageSize::new(64, 64);
    let shape_err = |e: crate::trajectory::TrajectoryError| GuidanceError::Config(e.to_string());
    let traj = plan_trajectory(&plan, image, latent.frames).map_err(shape_err)?;
    let boxes = allocate_boxes(&traj, (10.0, 10.0), plan.speed, 1.0).map_err(shape_err)?;
    let track = to_patch_grid(
        &boxes,
        patch,
        LatentDims {
            frames: latent.frames,
            height: latent.height,
            width: latent.width,
        },
    )
    .map_err(shape_err)?;
    let denoiser = ToyDenoiser::new(DenoiserConfig {
        patch,
        attention_gain: 30.0,
        sharpness_decay: 20.0,
        ..DenoiserConfig::default()
    })?;
    Ok(DeskSetup {
        plan,
        track,
        schedule: make_schedule(50, 1e-4, 5e-3)?,
        denoiser,
        config: GuidanceConfig {
            eta: 1.2,
            seed,
            latent,
            ..GuidanceConfig::default()
        },
    })
}

impl DeskSetup {
    pub fn run(&self) -> Result<GuidanceRun, GuidanceError> {
        guided_sample(&self.plan, &self.track, &self.schedule, &self.denoiser, &self.config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::GridBox;

    fn shape(frames: usize, channels: usize, height: usize, width: usize) -> LatentShape {
        LatentShape {
            frames,
            channels,
            height,
            width,
        }
    }

    fn one_frame_track(grid: (usize, usize, usize), b: GridBox) -> GridTrack {
        GridTrack {
            grid,
            patch: PatchSize { t: 1, h: 1, w: 1 },
            padding: (0, 0, 0),
            boxes: vec![b],
        }
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.01, 0.02).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - 0.01);
        assert!(make_schedule(0, 0.01, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.01, 1.0).is_err());
    }

    #[test]
    fn schedule_identities() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        for t in 1..=100 {
            assert_eq!(s.alpha(t), 1.0 - s.beta(t));
        }
        assert!(s.alpha_bar(100) < s.alpha_bar(1));
    }

    #[test]
    fn q_sample_without_noise_scales() {
        let s = make_schedule(10, 1e-3, 0.05).unwrap();
        let sh = shape(1, 1, 2, 2);
        let x0 = LatentTensor::from_vec(sh, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let zero = LatentTensor::zeros(sh);
        let out = q_sample(&x0, 7, &zero, &s).unwrap();
        let a = s.sqrt_alpha_bar(7);
        assert!((a - s.alpha_bar(7).sqrt()).abs() < 1e-15);
        for (o, x) in out.data.iter().zip(&x0.data) {
            assert_eq!(*o, a * x);
        }
        assert!(q_sample(&x0, 0, &zero, &s).is_err());
        assert!(q_sample(&x0, 1, &LatentTensor::zeros(shape(1, 1, 1, 4)), &s).is_err());
    }

    #[test]
    fn tiny_beta_keeps_signal() {
        let s = make_schedule(3, 1e-12, 1e-12).unwrap();
        let sh = shape(1, 1, 1, 3);
        let x0 = LatentTensor::from_vec(sh, vec![1.0, 2.0, 3.0]).unwrap();
        let noise = LatentTensor::from_vec(sh, vec![0.5, -0.5, 0.1]).unwrap();
        let out = q_sample(&x0, 3, &noise, &s).unwrap();
        for (o, x) in out.data.iter().zip(&x0.data) {
            assert!((o - x).abs() < 1e-5);
        }
    }

    struct ZeroEps;

    impl NoisePredictor for ZeroEps {
        fn predict_noise(
            &self,
            x: &LatentTensor,
            _t: usize,
            _c: &Conditioning,
        ) -> Result<LatentTensor, GuidanceError> {
            Ok(LatentTensor::zeros(x.shape))
        }
    }

    #[test]
    fn reverse_step_with_zero_noise_prediction() {
        let s = make_schedule(5, 0.01, 0.1).unwrap();
        let sh = shape(1, 1, 1, 2);
        let x = LatentTensor::from_vec(sh, vec![1.0, -3.0]).unwrap();
        let cond = Conditioning::from_tokens(&["a".into()], 4, 0);
        let out = reverse_step(&x, 4, &ZeroEps, &cond, &s, &LatentTensor::zeros(sh)).unwrap();
        let k = s.alpha(4).sqrt();
        assert_eq!(out.data, vec![1.0 / k, -3.0 / k]);
    }

    #[test]
    fn token_grid_bijection() {
        let grid = (3, 4, 5);
        for idx in 0..60 {
            let (t, h, w) = grid_coords(grid, idx);
            assert_eq!(token_index(grid, t, h, w), idx);
        }
    }

    #[test]
    fn energy_endpoints() {
        let grid = (1, 2, 2);
        let b = GridBox {
            t: 0,
            h: (0, 1),
            w: (0, 2),
        };
        let track = one_frame_track(grid, b);
        let names = vec!["x".to_string()];
        let all_in = AttentionTensor::new(grid, names.clone(), vec![0.6, 0.4, 0.0, 0.0]).unwrap();
        assert_eq!(energy(&all_in, &track, 0, 0).unwrap(), 0.0);
        let none_in = AttentionTensor::new(grid, names.clone(), vec![0.0, 0.0, 0.3, 0.7]).unwrap();
        assert_eq!(energy(&none_in, &track, 0, 0).unwrap(), 1.0);
        let half = AttentionTensor::new(grid, names, vec![0.25, 0.25, 0.25, 0.25]).unwrap();
        assert_eq!(energy(&half, &track, 0, 0).unwrap(), 0.25);
    }

    #[test]
    fn degenerate_box_rejected() {
        let grid = (1, 2, 2);
        let track = one_frame_track(
            grid,
            GridBox {
                t: 0,
                h: (1, 1),
                w: (0, 2),
            },
        );
        let a = AttentionTensor::new(grid, vec!["x".into()], vec![0.25; 4]).unwrap();
        assert_eq!(
            energy(&a, &track, 0, 0),
            Err(GuidanceError::DegenerateBox { frame: 0 })
        );
        assert!(matches!(energy(&a, &track, 1, 0), Err(GuidanceError::Token { .. })));
    }

    #[test]
    fn single_token_attention_is_one() {
        let d = ToyDenoiser::new(DenoiserConfig::default()).unwrap();
        let mut rng = math::rng_from_seed(3);
        let x = LatentTensor::random(shape(2, 4, 4, 4), &mut rng);
        let cond = Conditioning::from_tokens(&["only".into()], 16, 0);
        let a = d.attention(&x, 10, &cond).unwrap();
        assert_eq!(a.grid, (2, 2, 2));
        assert!(a.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn padded_latent_grid() {
        let d = ToyDenoiser::new(DenoiserConfig::default()).unwrap();
        let mut rng = math::rng_from_seed(4);
        let x = LatentTensor::random(shape(3, 4, 5, 3), &mut rng);
        let cond = Conditioning::from_tokens(&["a".into(), "b".into()], 16, 0);
        let a = d.attention(&x, 3, &cond).unwrap();
        assert_eq!(a.grid, (3, 3, 2));
        let eps = d.predict_noise(&x, 3, &cond).unwrap();
        assert_eq!(eps.shape, x.shape);
    }
}

//! Feature distillation: per-Gaussian latent features plus a small decoder
//! fitted so that decoded feature renders match synthetic ground-truth maps.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math;
use crate::raster::{render_gaussians, RasterError, RenderOptions, WeightCapture};
use crate::scene::{warp_scene, Camera, Gaussian3D, GaussianScene, SceneError};

pub const DEFAULT_ENCODER_DIM: usize = 8;
pub const DEFAULT_HIDDEN: usize = 32;
/// Largest allowed `|cos|` between two label embeddings.
pub const MAX_LABEL_COS: f64 = 0.5;
const ENCODER_RETRIES: u64 = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistillError {
    #[error("Gaussian {0} has no label")]
    Unlabeled(usize),
    #[error("label {0:?} is not known to the encoder")]
    UnknownLabel(String),
    #[error("could not place {labels} labels in {dim} dimensions with |cos| < {MAX_LABEL_COS}")]
    EncoderCapacity { labels: usize, dim: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("training diverged at step {step}: loss {loss} exceeds 10x the initial {initial}")]
    Diverged { step: usize, loss: f64, initial: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Deterministic label -> unit vector table standing in for a 2D feature
/// encoder. Pixels not covered by any Gaussian map to the zero vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEncoder {
    pub dim: usize,
    /// Seed that produced a table satisfying the separation bound.
    pub seed: u64,
    table: BTreeMap<String, Vec<f64>>,
}

fn unit_vector(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = math::rng_from_text(text, seed);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    d / (norm(a) * norm(b))
}

/// Pairwise cosine used for the equiangular table: as negative as the
/// separation bound and positive semi-definiteness allow.
fn equiangular_cos(n: usize) -> f64 {
    if n < 2 {
        0.0
    } else {
        (-1.0 / (n as f64 - 1.0)).max(-0.8 * MAX_LABEL_COS)
    }
}

/// `n` unit vectors in `dim` dimensions with identical pairwise cosine,
/// randomly rotated by `seed`. `None` when the Gram matrix needs more rank
/// than `dim`.
fn equiangular_table(n: usize, dim: usize, seed: u64) -> Option<Vec<Vec<f64>>> {
    let rho = equiangular_cos(n);
    let gram = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { rho });
    let eig = SymmetricEigen::new(gram);
    let keep: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] > 1e-9).collect();
    if keep.len() > dim {
        return None;
    }
    let mut rng = math::rng_from_text("encoder-basis", seed);
    let raw = DMatrix::from_fn(dim, keep.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let basis = raw.qr().q();
    let vecs = (0..n)
        .map(|i| {
            let mut v = vec![0.0; dim];
            for (c, &k) in keep.iter().enumerate() {
                let coord = eig.eigenvectors[(i, k)] * eig.eigenvalues[k].sqrt();
                for (r, out) in v.iter_mut().enumerate() {
                    *out += basis[(r, c)] * coord;
                }
            }
            let n = norm(&v);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    Some(vecs)
}

fn separated(vecs: &[Vec<f64>]) -> bool {
    (0..vecs.len()).all(|i| (i + 1..vecs.len()).all(|j| cosine(&vecs[i], &vecs[j]).abs() < MAX_LABEL_COS))
}

impl SyntheticEncoder {
    /// Builds the table. When the dimension allows, labels form a seeded
    /// random rotation of an equiangular frame so that every pair is equally
    /// and maximally separated; otherwise independent seeded vectors are
    /// drawn, retrying successive seeds until every pair has `|cos| < 0.5`.
    pub fn new<S: AsRef<str>>(labels: &[S], dim: usize, seed: u64) -> Result<Self, DistillError> {
        if dim == 0 {
            return Err(DistillError::Config("encoder dimension must be > 0".into()));
        }
        let mut names: Vec<String> = labels.iter().map(|s| s.as_ref().to_string()).collect();
        names.sort();
        names.dedup();
        let build = |seed: u64, vecs: Vec<Vec<f64>>| Self {
            dim,
            seed,
            table: names.iter().cloned().zip(vecs).collect(),
        };
        if let Some(vecs) = equiangular_table(names.len(), dim, seed) {
            if separated(&vecs) {
                return Ok(build(seed, vecs));
            }
        }
        for attempt in 0..ENCODER_RETRIES {
            let s = seed.wrapping_add(attempt);
            let vecs: Vec<Vec<f64>> = names.iter().map(|n| unit_vector(n, dim, s)).collect();
            if separated(&vecs) {
                return Ok(build(s, vecs));
            }
        }
        Err(DistillError::EncoderCapacity {
            labels: names.len(),
            dim,
        })
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.table.keys().map(String::as_str)
    }

    pub fn embed(&self, label: &str) -> Option<&[f64]> {
        self.table.get(label).map(Vec::as_slice)
    }

    /// Embedding for an arbitrary prompt: the table entry for known labels,
    /// otherwise a seeded unit vector derived from the text.
    pub fn embed_prompt(&self, prompt: &str) -> Vec<f64> {
        match self.table.get(prompt) {
            Some(v) => v.clone(),
            None => unit_vector(prompt, self.dim, self.seed),
        }
    }

    /// `enc(label_j)` for every Gaussian.
    pub fn label_features(&self, gaussians: &[Gaussian3D]) -> Result<Vec<Vec<f64>>, DistillError> {
        gaussians
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let label = g.label.as_deref().ok_or(DistillError::Unlabeled(i))?;
                self.embed(label)
                    .map(<[f64]>::to_vec)
                    .ok_or_else(|| DistillError::UnknownLabel(label.to_string()))
            })
            .collect()
    }
}

/// Synthetic ground-truth map: the scene rendered with each Gaussian's
/// feature replaced by its label embedding. Row-major `H x W x D_s`.
pub fn ground_truth_feature_map(
    scene: &GaussianScene,
    frame: usize,
    cam: &Camera,
    enc: &SyntheticEncoder,
) -> Result<Vec<f64>, DistillError> {
    let warped = warp_scene(scene, frame)?;
    let rows = enc.label_features(&warped.gaussians)?;
    if rows.is_empty() {
        return Ok(vec![0.0; cam.width() * cam.height() * enc.dim]);
    }
    let (out, _) = render_gaussians(
        &warped.gaussians,
        scene.background_color,
        scene.feature_dim,
        cam,
        &RenderOptions {
            capture_weights: false,
            feature_override: Some(&rows),
        },
    )?;
    Ok(out.feature)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs x inputs`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn forward(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.weights[r * self.inputs..(r + 1) * self.inputs];
            *o = self.bias[r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

/// MLP `D -> hidden -> ... -> D_s` with `tanh` between layers and a linear
/// output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDecoder {
    pub layers: Vec<DenseLayer>,
}

/// Parameter gradients, laid out like [`FeatureDecoder::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGrad {
    pub layers: Vec<DenseLayer>,
}

impl DecoderGrad {
    fn zeros_like(dec: &FeatureDecoder) -> Self {
        Self {
            layers: dec
                .layers
                .iter()
                .map(|l| DenseLayer {
                    inputs: l.inputs,
                    outputs: l.outputs,
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    fn add(&mut self, other: &DecoderGrad) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }
}

impl FeatureDecoder {
    /// Layer sizes `dims[0] -> dims[1] -> ...`, weights seeded with scaled
    /// normals and zero biases.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self, DistillError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(DistillError::Config(format!("invalid decoder dims {dims:?}")));
        }
        let mut rng = math::rng_from_seed(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let dist = Normal::new(0.0, 1.0 / (w[0] as f64).sqrt()).expect("valid normal");
                DenseLayer {
                    inputs: w[0],
                    outputs: w[1],
                    weights: (0..w[0] * w[1]).map(|_| rng.sample(dist)).collect(),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn mlp(input: usize, hidden: usize, output: usize, seed: u64) -> Result<Self, DistillError> {
        Self::new(&[input, hidden, output], seed)
    }

    /// Square identity map with zero bias.
    pub fn identity(dim: usize) -> Self {
        let mut weights = vec![0.0; dim * dim];
        for i in 0..dim {
            weights[i * dim + i] = 1.0;
        }
        Self {
            layers: vec![DenseLayer {
                inputs: dim,
                outputs: dim,
                weights,
                bias: vec![0.0; dim],
            }],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("decoder has layers").outputs
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.outputs));
        d
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Checks that consecutive layer sizes agree and buffers have the right
    /// lengths.
    pub fn validate(&self) -> Result<(), DistillError> {
        if self.layers.is_empty() {
            return Err(DistillError::Config("decoder has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(DistillError::Config(format!("layer {i} buffer sizes are inconsistent")));
            }
            if i > 0 && self.layers[i - 1].outputs != l.inputs {
                return Err(DistillError::Config(format!("layer {i} input does not match previous output")));
            }
        }
        if !self.is_finite() {
            return Err(DistillError::Config("decoder has non-finite parameters".into()));
        }
        Ok(())
    }

    /// Returns the activations of every layer; the last entry is the output.
    fn forward_trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = self.activation_buffers();
        self.forward_into(x, &mut acts);
        acts
    }

    fn activation_buffers(&self) -> Vec<Vec<f64>> {
        self.dims().into_iter().map(|d| vec![0.0; d]).collect()
    }

    fn forward_into(&self, x: &[f64], acts: &mut [Vec<f64>]) {
        acts[0].copy_from_slice(x);
        for (i, l) in self.layers.iter().enumerate() {
            let (done, rest) = acts.split_at_mut(i + 1);
            let out = &mut rest[0];
            l.forward(&done[i], out);
            if i + 1 < self.layers.len() {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, DistillError> {
        if x.len() != self.input_dim() {
            return Err(DistillError::Dim {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(self.forward_trace(x).pop().expect("output present"))
    }

    /// Backpropagates `grad_out` for input `x`, adding parameter gradients
    /// into `grad` and returning the input gradient.
    fn backward(&self, acts: &[Vec<f64>], grad_out: &[f64], grad: &mut DecoderGrad) -> Vec<f64> {
        let mut bufs = self.activation_buffers();
        self.backward_into(acts, grad_out, grad, &mut bufs);
        bufs.swap_remove(0)
    }

    /// Like [`Self::backward`] with caller-provided per-layer buffers; the
    /// input gradient ends up in `bufs[0]`.
    fn backward_into(&self, acts: &[Vec<f64>], grad_out: &[f64], grad: &mut DecoderGrad, bufs: &mut [Vec<f64>]) {
        let last = self.layers.len();
        bufs[last].copy_from_slice(grad_out);
        for (i, l) in self.layers.iter().enumerate().rev() {
            let (lower, upper) = bufs.split_at_mut(i + 1);
            let g = &mut upper[0];
            if i + 1 < self.layers.len() {
                // acts[i + 1] holds tanh outputs.
                for (gv, a) in g.iter_mut().zip(&acts[i + 1]) {
                    *gv *= 1.0 - a * a;
                }
            }
            let input = &acts[i];
            let gl = &mut grad.layers[i];
            for ((row, b), &gr) in gl.weights.chunks_exact_mut(l.inputs).zip(&mut gl.bias).zip(g.iter()) {
                *b += gr;
                for (wv, xv) in row.iter_mut().zip(input) {
                    *wv += gr * xv;
                }
            }
            let gi = &mut lower[i];
            gi.iter_mut().for_each(|v| *v = 0.0);
            for (row, &gr) in l.weights.chunks_exact(l.inputs).zip(g.iter()) {
                for (o, wv) in gi.iter_mut().zip(row) {
                    *o += wv * gr;
                }
            }
        }
    }

    /// Given `dL/dD(x)` returns `(dL/dparams, dL/dx)`.
    pub fn gradients(&self, x: &[f64], grad_out: &[f64]) -> Result<(DecoderGrad, Vec<f64>), DistillError> {
        if x.len() != self.input_dim() {
            return Err(DistillError::Dim {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        if grad_out.len() != self.output_dim() {
            return Err(DistillError::Dim {
                expected: self.output_dim(),
                got: grad_out.len(),
            });
        }
        let acts = self.forward_trace(x);
        let mut grad = DecoderGrad::zeros_like(self);
        let gx = self.backward(&acts, grad_out, &mut grad);
        Ok((grad, gx))
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }
}

impl DecoderGrad {
    fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }
}

/// Decoded feature `D(f_j)` of one Gaussian.
pub fn decode_gaussian(decoder: &FeatureDecoder, g: &Gaussian3D) -> Result<Vec<f64>, DistillError> {
    decoder.forward(&g.feature)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub steps: usize,
    pub lr_features: f64,
    pub lr_decoder: f64,
    /// Heavy-ball momentum in `[0, 1)`; zero is plain gradient descent.
    pub momentum: f64,
    pub hidden: usize,
    pub seed: u64,
    /// Stop once the loss reaches this value.
    pub target_loss: Option<f64>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr_features: 50.0,
            lr_decoder: 0.5,
            momentum: 0.9,
            hidden: DEFAULT_HIDDEN,
            seed: 0,
            target_loss: None,
        }
    }
}

/// One training view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct View {
    pub frame: usize,
    pub camera: Camera,
}

impl View {
    /// Every frame seen from every camera.
    pub fn grid(frames: impl IntoIterator<Item = usize> + Clone, cams: &[Camera]) -> Vec<View> {
        cams.iter()
            .flat_map(|c| {
                frames.clone().into_iter().map(move |f| View {
                    frame: f,
                    camera: *c,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillResult {
    /// Trained per-Gaussian features, in scene order.
    pub features: Vec<Vec<f64>>,
    /// One decoder per task, in task order.
    pub decoders: Vec<FeatureDecoder>,
    /// Loss before each step, plus the final loss.
    pub loss_curve: Vec<f64>,
}

impl DistillResult {
    pub fn final_loss(&self) -> f64 {
        *self.loss_curve.last().expect("curve has the initial loss")
    }

    /// Scene with its features replaced by the trained ones.
    pub fn apply_to(&self, scene: &GaussianScene) -> GaussianScene {
        let gaussians = scene
            .gaussians
            .iter()
            .zip(&self.features)
            .map(|(g, f)| Gaussian3D {
                feature: f.clone(),
                ..g.clone()
            })
            .collect();
        scene.with_gaussians(gaussians)
    }
}

/// Covered pixels of one view: compositing weights plus one target per task.
struct PreparedView {
    pixels: Vec<Vec<(u32, f64)>>,
    /// `targets[task][pixel]`, each of the task's encoder width.
    targets: Vec<Vec<Vec<f64>>>,
    /// Pixels with no Gaussian coverage: their rendered feature is zero and
    /// so is every target.
    empty_pixels: usize,
}

fn prepare_view(
    scene: &GaussianScene,
    view: &View,
    tasks: &[SyntheticEncoder],
) -> Result<PreparedView, DistillError> {
    let warped = warp_scene(scene, view.frame)?;
    let (_, cap) = render_gaussians(
        &warped.gaussians,
        scene.background_color,
        scene.feature_dim,
        &view.camera,
        &RenderOptions {
            capture_weights: true,
            feature_override: None,
        },
    )?;
    let cap: WeightCapture = cap.expect("weights requested");
    let labels: Vec<Vec<Vec<f64>>> = tasks
        .iter()
        .map(|enc| enc.label_features(&warped.gaussians))
        .collect::<Result<_, _>>()?;
    let mut pixels = Vec::new();
    let mut targets = vec![Vec::new(); tasks.len()];
    let mut empty_pixels = 0;
    for px in cap.pixels {
        if px.is_empty() {
            empty_pixels += 1;
            continue;
        }
        for (t, enc) in tasks.iter().enumerate() {
            let mut target = vec![0.0; enc.dim];
            for &(j, w) in &px {
                for (o, e) in target.iter_mut().zip(&labels[t][j as usize]) {
                    *o += w * e;
                }
            }
            targets[t].push(target);
        }
        pixels.push(px);
    }
    Ok(PreparedView {
        pixels,
        targets,
        empty_pixels,
    })
}

struct StepGrad {
    loss: f64,
    features: Vec<f64>,
    decoders: Vec<DecoderGrad>,
}

fn view_gradient(
    view: &PreparedView,
    features: &[Vec<f64>],
    decoders: &[FeatureDecoder],
    dim: usize,
    norm_by_task: &[f64],
) -> StepGrad {
    let mut out = StepGrad {
        loss: 0.0,
        features: vec![0.0; features.len() * dim],
        decoders: decoders.iter().map(DecoderGrad::zeros_like).collect(),
    };
    let zero = vec![0.0; dim];
    for (t, dec) in decoders.iter().enumerate() {
        // Uncovered pixels all decode the zero vector against a zero target.
        let acts = dec.forward_trace(&zero);
        let y = acts.last().expect("output");
        let mut g_out = vec![0.0; y.len()];
        let mut l = 0.0;
        for (g, v) in g_out.iter_mut().zip(y) {
            l += v * v;
            *g = 2.0 * v * norm_by_task[t] * view.empty_pixels as f64;
        }
        out.loss += l * norm_by_task[t] * view.empty_pixels as f64;
        if view.empty_pixels > 0 {
            dec.backward(&acts, &g_out, &mut out.decoders[t]);
        }
    }
    let mut fhat = vec![0.0; dim];
    let mut g_fhat = vec![0.0; dim];
    let mut acts: Vec<Vec<Vec<f64>>> = decoders.iter().map(|d| d.activation_buffers()).collect();
    let mut bufs: Vec<Vec<Vec<f64>>> = decoders.iter().map(|d| d.activation_buffers()).collect();
    let mut g_outs: Vec<Vec<f64>> = decoders.iter().map(|d| vec![0.0; d.output_dim()]).collect();
    for (p, px) in view.pixels.iter().enumerate() {
        fhat.iter_mut().for_each(|v| *v = 0.0);
        for &(j, w) in px {
            for (o, f) in fhat.iter_mut().zip(&features[j as usize]) {
                *o += w * f;
            }
        }
        g_fhat.iter_mut().for_each(|v| *v = 0.0);
        for (t, dec) in decoders.iter().enumerate() {
            let acts = &mut acts[t];
            dec.forward_into(&fhat, acts);
            let y = acts.last().expect("output");
            let target = &view.targets[t][p];
            let g_out = &mut g_outs[t];
            for ((g, v), tv) in g_out.iter_mut().zip(y).zip(target) {
                let r = v - tv;
                out.loss += r * r * norm_by_task[t];
                *g = 2.0 * r * norm_by_task[t];
            }
            dec.backward_into(acts, g_out, &mut out.decoders[t], &mut bufs[t]);
            g_fhat.iter_mut().zip(&bufs[t][0]).for_each(|(a, b)| *a += b);
        }
        for &(j, w) in px {
            let row = &mut out.features[j as usize * dim..(j as usize + 1) * dim];
            for (o, g) in row.iter_mut().zip(&g_fhat) {
                *o += w * g;
            }
        }
    }
    out
}

/// Jointly fits per-Gaussian features and one decoder per task so that
/// `sum_s MSE(D_s(F_hat), F_s)` over all views is minimised. Compositing
/// weights come from the fixed scene geometry and are captured once.
pub fn train_distillation(
    scene: &GaussianScene,
    views: &[View],
    tasks: &[SyntheticEncoder],
    cfg: &DistillConfig,
) -> Result<DistillResult, DistillError> {
    let decoders = tasks
        .iter()
        .enumerate()
        .map(|(t, enc)| FeatureDecoder::mlp(scene.feature_dim, cfg.hidden, enc.dim, cfg.seed.wrapping_add(t as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    train_distillation_from(scene, views, tasks, decoders, cfg)
}

/// As [`train_distillation`] but starting from the given decoders.
pub fn train_distillation_from(
    scene: &GaussianScene,
    views: &[View],
    tasks: &[SyntheticEncoder],
    mut decoders: Vec<FeatureDecoder>,
    cfg: &DistillConfig,
) -> Result<DistillResult, DistillError> {
    if views.is_empty() || tasks.is_empty() {
        return Err(DistillError::Config("need at least one view and one task".into()));
    }
    if !(0.0..1.0).contains(&cfg.momentum) {
        return Err(DistillError::Config("momentum must lie in [0, 1)".into()));
    }
    if decoders.len() != tasks.len() {
        return Err(DistillError::Config("one decoder per task required".into()));
    }
    let dim = scene.feature_dim;
    for (dec, enc) in decoders.iter().zip(tasks) {
        dec.validate()?;
        if dec.input_dim() != dim {
            return Err(DistillError::Dim {
                expected: dim,
                got: dec.input_dim(),
            });
        }
        if dec.output_dim() != enc.dim {
            return Err(DistillError::Dim {
                expected: enc.dim,
                got: dec.output_dim(),
            });
        }
    }
    let prepared = views
        .par_iter()
        .map(|v| prepare_view(scene, v, tasks))
        .collect::<Result<Vec<_>, _>>()?;
    let total_pixels: usize = views.iter().map(|v| v.camera.width() * v.camera.height()).sum();
    let norm_by_task: Vec<f64> = tasks
        .iter()
        .map(|enc| 1.0 / (total_pixels * enc.dim) as f64)
        .collect();

    let mut features: Vec<Vec<f64>> = scene.gaussians.iter().map(|g| g.feature.clone()).collect();
    let mut vel_f = vec![0.0; features.len() * dim];
    let mut vel_d: Vec<Vec<f64>> = decoders
        .iter()
        .map(|d| vec![0.0; d.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()])
        .collect();
    let mut curve = Vec::with_capacity(cfg.steps + 1);
    let mut initial = None;

    for step in 0..=cfg.steps {
        // Views are reduced in order so results do not depend on threads.
        let parts: Vec<StepGrad> = prepared
            .par_iter()
            .map(|pv| view_gradient(pv, &features, &decoders, dim, &norm_by_task))
            .collect();
        let mut total = StepGrad {
            loss: 0.0,
            features: vec![0.0; features.len() * dim],
            decoders: decoders.iter().map(DecoderGrad::zeros_like).collect(),
        };
        for p in &parts {
            total.loss += p.loss;
            total.features.iter_mut().zip(&p.features).for_each(|(a, b)| *a += b);
            for (a, b) in total.decoders.iter_mut().zip(&p.decoders) {
                a.add(b);
            }
        }
        let loss = total.loss;
        curve.push(loss);
        let init = *initial.get_or_insert(loss);
        if !loss.is_finite() || loss > 10.0 * init.max(f64::MIN_POSITIVE) {
            return Err(DistillError::Diverged {
                step,
                loss,
                initial: init,
            });
        }
        if step == cfg.steps || cfg.target_loss.is_some_and(|t| loss <= t) {
            break;
        }
        for (j, f) in features.iter_mut().enumerate() {
            for (k, v) in f.iter_mut().enumerate() {
                let i = j * dim + k;
                vel_f[i] = cfg.momentum * vel_f[i] + total.features[i];
                *v -= cfg.lr_features * vel_f[i];
            }
        }
        for ((dec, grad), vel) in decoders.iter_mut().zip(&total.decoders).zip(vel_d.iter_mut()) {
            for ((p, g), v) in dec.params_mut().zip(grad.params()).zip(vel.iter_mut()) {
                *v = cfg.momentum * *v + g;
                *p -= cfg.lr_decoder * *v;
            }
        }
    }
    Ok(DistillResult {
        features,
        decoders,
        loss_curve: curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoder_separation_and_determinism() {
        let labels = ["ball", "cube", "car", "fish", "ground"];
        let a = SyntheticEncoder::new(&labels, 8, 3).unwrap();
        let b = SyntheticEncoder::new(&labels, 8, 3).unwrap();
        assert_eq!(a, b);
        let vs: Vec<&[f64]> = labels.iter().map(|l| a.embed(l).unwrap()).collect();
        for i in 0..vs.len() {
            assert!((norm(vs[i]) - 1.0).abs() < 1e-12);
            for j in i + 1..vs.len() {
                assert!(cosine(vs[i], vs[j]).abs() < MAX_LABEL_COS);
            }
        }
        assert!(a.embed("tree").is_none());
        assert_eq!(a.embed_prompt("ball"), vs[0].to_vec());
        assert!((norm(&a.embed_prompt("background")) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn encoder_table_is_equiangular_when_it_fits() {
        let labels = ["ball", "cube", "car", "fish", "ground", "background"];
        let enc = SyntheticEncoder::new(&labels, 8, 0).unwrap();
        for (i, a) in labels.iter().enumerate() {
            for b in &labels[i + 1..] {
                let c = cosine(enc.embed(a).unwrap(), enc.embed(b).unwrap());
                assert!((c + 0.2).abs() < 1e-12, "{a}/{b}: {c}");
            }
        }
        let two = SyntheticEncoder::new(&["a", "b"], 8, 0).unwrap();
        assert!((cosine(two.embed("a").unwrap(), two.embed("b").unwrap()) + 0.4).abs() < 1e-12);
        let other = SyntheticEncoder::new(&labels, 8, 1).unwrap();
        assert_ne!(enc.embed("ball"), other.embed("ball"));
    }

    #[test]
    fn encoder_capacity_error() {
        let labels: Vec<String> = (0..10).map(|i| format!("l{i}")).collect();
        assert!(matches!(
            SyntheticEncoder::new(&labels, 1, 0),
            Err(DistillError::EncoderCapacity { .. })
        ));
    }

    #[test]
    fn identity_decoder_passes_through() {
        let d = FeatureDecoder::identity(4);
        assert_eq!(d.forward(&[1.0, -2.0, 0.5, 3.0]).unwrap(), vec![1.0, -2.0, 0.5, 3.0]);
        assert!(d.forward(&[1.0]).is_err());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let d = FeatureDecoder::mlp(16, 32, 8, 1).unwrap();
        assert!(d.forward(&[0.0; 16]).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let mut d = FeatureDecoder::mlp(5, 7, 3, 9).unwrap();
        for (i, b) in d.layers[0].bias.iter_mut().enumerate() {
            *b = 0.1 * i as f64 - 0.3;
        }
        let x = [0.3, -0.7, 1.1, 0.05, -0.4];
        let target = [0.2, -0.1, 0.4];
        let loss = |d: &FeatureDecoder, x: &[f64]| -> f64 {
            d.forward(x).unwrap().iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum()
        };
        let y = d.forward(&x).unwrap();
        let g_out: Vec<f64> = y.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
        let (gp, gx) = d.gradients(&x, &g_out).unwrap();
        let h = 1e-6;
        for k in 0..x.len() {
            let (mut xp, mut xm) = (x, x);
            xp[k] += h;
            xm[k] -= h;
            let fd = (loss(&d, &xp) - loss(&d, &xm)) / (2.0 * h);
            assert!((fd - gx[k]).abs() <= 1e-6 * fd.abs().max(1e-3), "{fd} vs {}", gx[k]);
        }
        let analytic: Vec<f64> = gp.params().cloned().collect();
        for (i, a) in analytic.iter().enumerate() {
            let mut dp = d.clone();
            *dp.params_mut().nth(i).unwrap() += h;
            let mut dm = d.clone();
            *dm.params_mut().nth(i).unwrap() -= h;
            let fd = (loss(&dp, &x) - loss(&dm, &x)) / (2.0 * h);
            assert!((fd - a).abs() <= 1e-6 * fd.abs().max(1e-3), "param {i}: {fd} vs {a}");
        }
    }
}

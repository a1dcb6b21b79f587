//! Software splatting of Gaussian scenes into colour, feature, alpha and
//! depth images.
//!
//! Pixel `(x, y)` is sampled at its centre `(x + 0.5, y + 0.5)`. A splat
//! contributes to a pixel only inside its 3-sigma screen rectangle, where the
//! kernel is evaluated exactly. Splats are composited front to back in
//! `(depth, index)` order and a pixel stops once its transmittance drops
//! below [`EARLY_OUT_T`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{warp_scene, Camera, Gaussian3D, GaussianScene, SceneError, Vec3};

/// Gaussians at or closer than this camera depth are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Screen-space covariance regularisation in px^2.
pub const COV2D_EPS: f64 = 0.1;
pub const EARLY_OUT_T: f64 = 1e-4;
/// Half-width of the splat rectangle in standard deviations.
pub const SUPPORT_SIGMAS: f64 = 3.0;
/// Alpha below which depth is left at zero instead of normalised.
pub const DEPTH_ALPHA_MIN: f64 = 1e-6;

const TILE: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("{cameras} cameras for {frames} frames")]
    CameraCount { cameras: usize, frames: usize },
    #[error("feature override has {got} rows, scene has {expected} Gaussians")]
    FeatureRows { got: usize, expected: usize },
    #[error("feature override rows must all have length {0}")]
    FeatureWidth(usize),
}

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub mean2d: [f64; 2],
    /// Symmetric, includes the `COV2D_EPS` regulariser.
    pub cov2d: [[f64; 2]; 2],
    pub depth: f64,
}

/// Projects a Gaussian through the pinhole camera. `None` means the
/// Gaussian is behind the near plane and culled.
pub fn project(g: &Gaussian3D, cam: &Camera) -> Option<Projection> {
    let p = cam.world_to_camera.apply(g.mean);
    let z = p[2];
    if !(z > NEAR_PLANE) {
        return None;
    }
    let k = &cam.intrinsics;
    let mean2d = [k.fx * p[0] / z + k.cx, k.fy * p[1] / z + k.cy];
    let r = cam.world_to_camera.rotation_matrix();
    let cov_cam = r * g.covariance() * r.transpose();
    let j = nalgebra::Matrix2x3::new(
        k.fx / z,
        0.0,
        -k.fx * p[0] / (z * z),
        0.0,
        k.fy / z,
        -k.fy * p[1] / (z * z),
    );
    let c = j * cov_cam * j.transpose();
    let off = 0.5 * (c[(0, 1)] + c[(1, 0)]);
    Some(Projection {
        mean2d,
        cov2d: [[c[(0, 0)] + COV2D_EPS, off], [off, c[(1, 1)] + COV2D_EPS]],
        depth: z,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub feature_dim: usize,
    /// `H x W x 3`, row-major.
    pub rgb: Vec<f64>,
    /// `H x W x D`, row-major.
    pub feature: Vec<f64>,
    /// `H x W` accumulated opacity.
    pub alpha: Vec<f64>,
    /// `H x W` alpha-normalised composited depth, zero where empty.
    pub depth: Vec<f64>,
}

impl RenderOutput {
    pub fn pixel_rgb(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn pixel_feature(&self, x: usize, y: usize) -> &[f64] {
        let d = self.feature_dim;
        let i = d * (y * self.width + x);
        &self.feature[i..i + d]
    }

    pub fn pixel_alpha(&self, x: usize, y: usize) -> f64 {
        self.alpha[y * self.width + x]
    }
}

/// Per-pixel `(gaussian index, weight)` lists, in compositing order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightCapture {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Vec<(u32, f64)>>,
}

impl WeightCapture {
    pub fn pixel(&self, x: usize, y: usize) -> &[(u32, f64)] {
        &self.pixels[y * self.width + x]
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RenderOptions<'a> {
    /// Record every compositing weight.
    pub capture_weights: bool,
    /// Per-Gaussian vectors composited instead of the stored features.
    pub feature_override: Option<&'a [Vec<f64>]>,
}

/// A projected Gaussian ready for compositing.
#[derive(Debug, Clone, Copy)]
struct Splat {
    index: usize,
    mean: [f64; 2],
    /// Inverse covariance entries `(a, b, c)` of `[[a, b], [b, c]]`.
    conic: [f64; 3],
    /// Inclusive pixel-centre bounds `[x0, x1] x [y0, y1]` in pixel units.
    rect: [f64; 4],
    depth: f64,
    opacity: f64,
}

impl Splat {
    fn new(index: usize, g: &Gaussian3D, p: &Projection) -> Option<Self> {
        let [[a, b], [_, c]] = p.cov2d;
        let det = a * c - b * b;
        if !(det > 0.0) || !det.is_finite() {
            return None;
        }
        let (sx, sy) = (SUPPORT_SIGMAS * a.sqrt(), SUPPORT_SIGMAS * c.sqrt());
        Some(Self {
            index,
            mean: p.mean2d,
            conic: [c / det, -b / det, a / det],
            rect: [p.mean2d[0] - sx, p.mean2d[0] + sx, p.mean2d[1] - sy, p.mean2d[1] + sy],
            depth: p.depth,
            opacity: g.opacity,
        })
    }

    /// Kernel alpha at a pixel centre, zero outside the support rectangle.
    fn alpha_at(&self, px: f64, py: f64) -> f64 {
        if px < self.rect[0] || px > self.rect[1] || py < self.rect[2] || py > self.rect[3] {
            return 0.0;
        }
        let (dx, dy) = (px - self.mean[0], py - self.mean[1]);
        let q = self.conic[0] * dx * dx + 2.0 * self.conic[1] * dx * dy + self.conic[2] * dy * dy;
        self.opacity * (-0.5 * q).exp()
    }

    /// Pixel index range `[lo, hi)` covered along one axis.
    fn span(lo: f64, hi: f64, n: usize) -> (usize, usize) {
        // Pixel p is sampled at p + 0.5.
        let a = (lo - 0.5).ceil().max(0.0);
        let b = ((hi - 0.5).floor() + 1.0).min(n as f64);
        if b <= a {
            (0, 0)
        } else {
            (a as usize, b as usize)
        }
    }
}

fn prepare(gaussians: &[Gaussian3D], cam: &Camera) -> Vec<Splat> {
    let mut splats: Vec<Splat> = gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project(g, cam).and_then(|p| Splat::new(i, g, &p)))
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    splats
}

/// Renders an already warped set of Gaussians.
pub fn render_gaussians(
    gaussians: &[Gaussian3D],
    background: Vec3,
    feature_dim: usize,
    cam: &Camera,
    opts: &RenderOptions<'_>,
) -> Result<(RenderOutput, Option<WeightCapture>), RasterError> {
    cam.validate()?;
    let features: Vec<&[f64]> = match opts.feature_override {
        Some(rows) => {
            if rows.len() != gaussians.len() {
                return Err(RasterError::FeatureRows {
                    got: rows.len(),
                    expected: gaussians.len(),
                });
            }
            let d = rows.first().map_or(feature_dim, Vec::len);
            if rows.iter().any(|r| r.len() != d) {
                return Err(RasterError::FeatureWidth(d));
            }
            rows.iter().map(Vec::as_slice).collect()
        }
        None => {
            if gaussians.iter().any(|g| g.feature.len() != feature_dim) {
                return Err(RasterError::FeatureWidth(feature_dim));
            }
            gaussians.iter().map(|g| g.feature.as_slice()).collect()
        }
    };
    let dim = match opts.feature_override {
        Some(rows) => rows.first().map_or(feature_dim, Vec::len),
        None => feature_dim,
    };
    let (w, h) = (cam.width(), cam.height());
    let splats = prepare(gaussians, cam);

    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);
    let tiles: Vec<TileResult> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|t| {
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            let x0 = tx * TILE;
            let y0 = ty * TILE;
            let x1 = (x0 + TILE).min(w);
            let y1 = (y0 + TILE).min(h);
            render_tile(
                &splats,
                &features,
                dim,
                gaussians,
                background,
                (x0, x1, y0, y1),
                opts.capture_weights,
            )
        })
        .collect();

    let mut out = RenderOutput {
        width: w,
        height: h,
        feature_dim: dim,
        rgb: vec![0.0; w * h * 3],
        feature: vec![0.0; w * h * dim],
        alpha: vec![0.0; w * h],
        depth: vec![0.0; w * h],
    };
    let mut capture = opts.capture_weights.then(|| WeightCapture {
        width: w,
        height: h,
        pixels: vec![Vec::new(); w * h],
    });
    for tile in tiles {
        let (x0, x1, y0, y1) = tile.bounds;
        let tw = x1 - x0;
        for y in y0..y1 {
            for x in x0..x1 {
                let local = (y - y0) * tw + (x - x0);
                let pix = y * w + x;
                out.rgb[3 * pix..3 * pix + 3].copy_from_slice(&tile.rgb[3 * local..3 * local + 3]);
                out.feature[dim * pix..dim * (pix + 1)]
                    .copy_from_slice(&tile.feature[dim * local..dim * (local + 1)]);
                out.alpha[pix] = tile.alpha[local];
                out.depth[pix] = tile.depth[local];
                if let (Some(cap), Some(weights)) = (capture.as_mut(), tile.weights.as_ref()) {
                    cap.pixels[pix] = weights[local].clone();
                }
            }
        }
    }
    Ok((out, capture))
}

struct TileResult {
    bounds: (usize, usize, usize, usize),
    rgb: Vec<f64>,
    feature: Vec<f64>,
    alpha: Vec<f64>,
    depth: Vec<f64>,
    weights: Option<Vec<Vec<(u32, f64)>>>,
}

fn render_tile(
    splats: &[Splat],
    features: &[&[f64]],
    dim: usize,
    gaussians: &[Gaussian3D],
    background: Vec3,
    bounds: (usize, usize, usize, usize),
    capture: bool,
) -> TileResult {
    let (x0, x1, y0, y1) = bounds;
    let (tw, th) = (x1 - x0, y1 - y0);
    // Splats whose rectangle (padded by a pixel) touches this tile, still in
    // global order. The exact test happens per pixel.
    let local: Vec<&Splat> = splats
        .iter()
        .filter(|s| {
            let (a, b) = Splat::span(s.rect[0] - 1.0, s.rect[1] + 1.0, x1);
            let (c, d) = Splat::span(s.rect[2] - 1.0, s.rect[3] + 1.0, y1);
            a < b && c < d && b > x0 && d > y0
        })
        .collect();
    let n = tw * th;
    let mut res = TileResult {
        bounds,
        rgb: vec![0.0; n * 3],
        feature: vec![0.0; n * dim],
        alpha: vec![0.0; n],
        depth: vec![0.0; n],
        weights: capture.then(|| vec![Vec::new(); n]),
    };
    for y in y0..y1 {
        for x in x0..x1 {
            let li = (y - y0) * tw + (x - x0);
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut color = [0.0; 3];
            let mut depth = 0.0;
            let feat = &mut res.feature[dim * li..dim * (li + 1)];
            for s in &local {
                let a = s.alpha_at(px, py);
                if a <= 0.0 {
                    continue;
                }
                let wgt = a * t;
                let c = gaussians[s.index].color;
                for k in 0..3 {
                    color[k] += wgt * c[k];
                }
                for (f, v) in feat.iter_mut().zip(features[s.index]) {
                    *f += wgt * v;
                }
                depth += wgt * s.depth;
                if let Some(ws) = res.weights.as_mut() {
                    ws[li].push((s.index as u32, wgt));
                }
                t *= 1.0 - a;
                if t < EARLY_OUT_T {
                    break;
                }
            }
            for k in 0..3 {
                res.rgb[3 * li + k] = color[k] + t * background[k];
            }
            let alpha = 1.0 - t;
            res.alpha[li] = alpha;
            res.depth[li] = if alpha > DEPTH_ALPHA_MIN { depth / alpha } else { 0.0 };
        }
    }
    res
}

/// Warps `scene` to `frame` and renders it.
pub fn rasterize(scene: &GaussianScene, frame: usize, cam: &Camera) -> Result<RenderOutput, RasterError> {
    Ok(rasterize_with(scene, frame, cam, &RenderOptions::default())?.0)
}

pub fn rasterize_with(
    scene: &GaussianScene,
    frame: usize,
    cam: &Camera,
    opts: &RenderOptions<'_>,
) -> Result<(RenderOutput, Option<WeightCapture>), RasterError> {
    let warped = warp_scene(scene, frame)?;
    render_gaussians(
        &warped.gaussians,
        scene.background_color,
        scene.feature_dim,
        cam,
        opts,
    )
}

/// One render per frame, with `cams[i]` used for frame `i`.
pub fn render_sequence(scene: &GaussianScene, cams: &[Camera]) -> Result<Vec<RenderOutput>, RasterError> {
    if cams.len() != scene.frame_count() {
        return Err(RasterError::CameraCount {
            cameras: cams.len(),
            frames: scene.frame_count(),
        });
    }
    cams.iter()
        .enumerate()
        .map(|(f, cam)| rasterize(scene, f, cam))
        .collect()
}

//! Motion trajectories and per-frame bounding boxes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parser::{Direction, GenQuery, Speed};

/// Fraction of the image kept free at the entry and exit side.
pub const ENTRY_MARGIN: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("frame_count must be >= 2, got {0}")]
    TooFewFrames(usize),
    #[error("trajectory needs at least two keypoints")]
    TooFewKeypoints,
    #[error("keypoint times must be strictly increasing")]
    NonIncreasingTime,
    #[error("keypoint time {t} is outside [0, {frame_count})")]
    TimeOutOfRange { t: usize, frame_count: usize },
    #[error("velocity index {index} out of range for {len} keypoints")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("lambda must be > 0, got {0}")]
    NonPositiveLambda(f64),
    #[error("box extents must be > 0, got ({0}, {1})")]
    NonPositiveExtent(f64, f64),
    #[error("patch sizes must be nonzero")]
    ZeroPatch,
    #[error("image must be at least 1x1")]
    EmptyImage,
    #[error("track has {boxes} boxes but the latent has {frames} frames")]
    FrameMismatch { boxes: usize, frames: usize },
    #[error("non-finite coordinate")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: usize,
    pub height: usize,
}

impl ImageSize {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    keypoints: Vec<Keypoint>,
    frame_count: usize,
    image: ImageSize,
}

impl Trajectory {
    /// Validates timing and clamps every keypoint into the image.
    pub fn new(
        keypoints: Vec<Keypoint>,
        frame_count: usize,
        image: ImageSize,
    ) -> Result<Self, TrajectoryError> {
        if image.width == 0 || image.height == 0 {
            return Err(TrajectoryError::EmptyImage);
        }
        if keypoints.len() < 2 {
            return Err(TrajectoryError::TooFewKeypoints);
        }
        if keypoints.windows(2).any(|w| w[1].t <= w[0].t) {
            return Err(TrajectoryError::NonIncreasingTime);
        }
        if let Some(k) = keypoints.iter().find(|k| k.t >= frame_count) {
            return Err(TrajectoryError::TimeOutOfRange {
                t: k.t,
                frame_count,
            });
        }
        if keypoints.iter().any(|k| !k.x.is_finite() || !k.y.is_finite()) {
            return Err(TrajectoryError::NonFinite);
        }
        let (w, h) = (image.width as f64, image.height as f64);
        let keypoints = keypoints
            .into_iter()
            .map(|k| Keypoint {
                x: k.x.clamp(0.0, w),
                y: k.y.clamp(0.0, h),
                t: k.t,
            })
            .collect();
        Ok(Self {
            keypoints,
            frame_count,
            image,
        })
    }

    pub fn keypoints(&self) -> &[Keypoint] {
        &self.keypoints
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn image(&self) -> ImageSize {
        self.image
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

/// One keypoint per frame, from the entry margin to the exit margin.
pub fn plan_trajectory(
    plan: &GenQuery,
    image: ImageSize,
    frame_count: usize,
) -> Result<Trajectory, TrajectoryError> {
    if frame_count < 2 {
        return Err(TrajectoryError::TooFewFrames(frame_count));
    }
    let (w, h) = (image.width as f64, image.height as f64);
    let (lo_x, hi_x) = (ENTRY_MARGIN * w, (1.0 - ENTRY_MARGIN) * w);
    let (lo_y, hi_y) = (ENTRY_MARGIN * h, (1.0 - ENTRY_MARGIN) * h);
    let (cx, cy) = (w / 2.0, h / 2.0);
    // Image y grows downwards. Approaching objects drift towards the bottom
    // of the frame, receding ones towards the horizon at mid-height.
    let (start, end) = match plan.direction {
        Direction::LeftToRight => ((lo_x, cy), (hi_x, cy)),
        Direction::RightToLeft => ((hi_x, cy), (lo_x, cy)),
        Direction::Up => ((cx, hi_y), (cx, lo_y)),
        Direction::Down => ((cx, lo_y), (cx, hi_y)),
        Direction::TowardCamera => ((cx, cy), (cx, hi_y)),
        Direction::Away => ((cx, hi_y), (cx, cy)),
    };
    let last = (frame_count - 1) as f64;
    let keypoints = (0..frame_count)
        .map(|i| {
            let s = i as f64 / last;
            Keypoint {
                x: start.0 + (end.0 - start.0) * s,
                y: start.1 + (end.1 - start.1) * s,
                t: i,
            }
        })
        .collect();
    Trajectory::new(keypoints, frame_count, image)
}

/// Speed of segment `i`, in pixels per frame.
pub fn velocity(traj: &Trajectory, i: usize) -> Result<f64, TrajectoryError> {
    let k = traj.keypoints();
    if i + 1 >= k.len() {
        return Err(TrajectoryError::IndexOutOfRange {
            index: i,
            len: k.len(),
        });
    }
    let (a, b) = (k[i], k[i + 1]);
    let dist = (b.x - a.x).hypot(b.y - a.y);
    Ok(dist / (b.t - a.t) as f64)
}

/// Multiplier applied to keypoint spacing for a speed word.
pub fn speed_multiplier(speed: Speed) -> f64 {
    match speed {
        Speed::Slow => 0.5,
        Speed::Normal => 1.0,
        Speed::Fast => 1.5,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub cx: f64,
    pub cy: f64,
    pub half_w: f64,
    pub half_h: f64,
}

impl PixelBox {
    pub fn x_range(&self) -> (f64, f64) {
        (self.cx - self.half_w, self.cx + self.half_w)
    }

    pub fn y_range(&self) -> (f64, f64) {
        (self.cy - self.half_h, self.cy + self.half_h)
    }

    /// Pixel `(px, py)` is inside when its centre is.
    pub fn contains_pixel(&self, px: usize, py: usize) -> bool {
        let (x0, x1) = self.x_range();
        let (y0, y1) = self.y_range();
        let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
        x >= x0 && x <= x1 && y >= y0 && y <= y1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BBoxTrack {
    pub image: ImageSize,
    /// One box per frame index.
    pub boxes: Vec<PixelBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocationConfig {
    /// Spacing hyper-parameter, > 0.
    pub lambda: f64,
    /// Extra half-extent per pixel/frame of segment speed. Zero disables it.
    pub extent_velocity_gain: f64,
}

impl Default for AllocationConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            extent_velocity_gain: 0.0,
        }
    }
}

/// Frame-wise boxes with spacing scaled by `lambda * speed multiplier`.
pub fn allocate_boxes(
    traj: &Trajectory,
    extent: (f64, f64),
    speed: Speed,
    lambda: f64,
) -> Result<BBoxTrack, TrajectoryError> {
    allocate_boxes_with(
        traj,
        extent,
        speed,
        &AllocationConfig {
            lambda,
            ..AllocationConfig::default()
        },
    )
}

pub fn allocate_boxes_with(
    traj: &Trajectory,
    extent: (f64, f64),
    speed: Speed,
    cfg: &AllocationConfig,
) -> Result<BBoxTrack, TrajectoryError> {
    if !(cfg.lambda > 0.0) || !cfg.lambda.is_finite() {
        return Err(TrajectoryError::NonPositiveLambda(cfg.lambda));
    }
    if !(extent.0 > 0.0 && extent.1 > 0.0) || !extent.0.is_finite() || !extent.1.is_finite() {
        return Err(TrajectoryError::NonPositiveExtent(extent.0, extent.1));
    }
    let spacing = cfg.lambda * speed_multiplier(speed);
    let k = traj.keypoints();
    let origin = k[0];
    // c_i = k_i + (s - 1)(k_i - k_0): consecutive centres differ by
    // s * (k_{i+1} - k_i) and s = 1 reproduces the keypoints exactly.
    let centres: Vec<(f64, f64)> = k
        .iter()
        .map(|p| {
            (
                p.x + (spacing - 1.0) * (p.x - origin.x),
                p.y + (spacing - 1.0) * (p.y - origin.y),
            )
        })
        .collect();
    let speeds: Vec<f64> = (0..k.len() - 1)
        .map(|i| velocity(traj, i))
        .collect::<Result<_, _>>()?;

    let image = traj.image();
    let (w, h) = (image.width as f64, image.height as f64);
    let boxes = (0..traj.frame_count())
        .map(|f| {
            let (cx, cy, seg) = interpolate(k, &centres, f);
            let gain = cfg.extent_velocity_gain * speeds[seg];
            let half_w = (extent.0 + gain).min(w / 2.0);
            let half_h = (extent.1 + gain).min(h / 2.0);
            PixelBox {
                cx: cx.clamp(half_w, w - half_w),
                cy: cy.clamp(half_h, h - half_h),
                half_w,
                half_h,
            }
        })
        .collect();
    Ok(BBoxTrack { image, boxes })
}

/// Centre at frame `f`, holding the end values outside the keypoint span.
fn interpolate(k: &[Keypoint], centres: &[(f64, f64)], f: usize) -> (f64, f64, usize) {
    if let Some(i) = k.iter().position(|p| p.t == f) {
        return (centres[i].0, centres[i].1, i.min(k.len() - 2));
    }
    if f < k[0].t {
        return (centres[0].0, centres[0].1, 0);
    }
    let seg = match k.windows(2).position(|w| w[0].t < f && f < w[1].t) {
        Some(seg) => seg,
        None => {
            let last = centres[centres.len() - 1];
            return (last.0, last.1, k.len() - 2);
        }
    };
    let s = (f - k[seg].t) as f64 / (k[seg + 1].t - k[seg].t) as f64;
    let (a, b) = (centres[seg], centres[seg + 1]);
    (a.0 + (b.0 - a.0) * s, a.1 + (b.1 - a.1) * s, seg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSize {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

/// Half-open cell ranges on the patch grid for one temporal cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridBox {
    pub t: usize,
    pub h: (usize, usize),
    pub w: (usize, usize),
}

impl GridBox {
    pub fn contains(&self, h: usize, w: usize) -> bool {
        h >= self.h.0 && h < self.h.1 && w >= self.w.0 && w < self.w.1
    }

    pub fn is_empty(&self) -> bool {
        self.h.1 <= self.h.0 || self.w.1 <= self.w.0
    }

    pub fn cell_count(&self) -> usize {
        self.h.1.saturating_sub(self.h.0) * self.w.1.saturating_sub(self.w.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridTrack {
    /// `(temporal, height, width)` cell counts.
    pub grid: (usize, usize, usize),
    pub patch: PatchSize,
    /// Latent padding added on each axis to make the patch sizes divide.
    pub padding: (usize, usize, usize),
    /// One box per temporal cell.
    pub boxes: Vec<GridBox>,
}

/// Maps pixel boxes onto the patch grid, rounding outward so no covered
/// pixel is dropped. Frames sharing a temporal cell are unioned.
pub fn to_patch_grid(
    track: &BBoxTrack,
    patch: PatchSize,
    latent: LatentDims,
) -> Result<GridTrack, TrajectoryError> {
    if patch.t == 0 || patch.h == 0 || patch.w == 0 {
        return Err(TrajectoryError::ZeroPatch);
    }
    if latent.frames == 0 || latent.height == 0 || latent.width == 0 {
        return Err(TrajectoryError::EmptyImage);
    }
    if track.boxes.len() != latent.frames {
        return Err(TrajectoryError::FrameMismatch {
            boxes: track.boxes.len(),
            frames: latent.frames,
        });
    }
    let gt = latent.frames.div_ceil(patch.t);
    let gh = latent.height.div_ceil(patch.h);
    let gw = latent.width.div_ceil(patch.w);
    let padding = (
        gt * patch.t - latent.frames,
        gh * patch.h - latent.height,
        gw * patch.w - latent.width,
    );
    let sx = latent.width as f64 / track.image.width as f64;
    let sy = latent.height as f64 / track.image.height as f64;

    let mut boxes: Vec<Option<GridBox>> = vec![None; gt];
    for (frame, b) in track.boxes.iter().enumerate() {
        let (x0, x1) = b.x_range();
        let (y0, y1) = b.y_range();
        let cell = |lo: f64, hi: f64, scale: f64, p: usize, n: usize| {
            let a = ((lo * scale) / p as f64).floor().max(0.0) as usize;
            let b = ((hi * scale) / p as f64).ceil().max(0.0) as usize;
            (a.min(n), b.min(n))
        };
        let gb = GridBox {
            t: frame / patch.t,
            h: cell(y0, y1, sy, patch.h, gh),
            w: cell(x0, x1, sx, patch.w, gw),
        };
        let slot = &mut boxes[gb.t];
        *slot = Some(match slot.take() {
            None => gb,
            Some(prev) => GridBox {
                t: gb.t,
                h: (prev.h.0.min(gb.h.0), prev.h.1.max(gb.h.1)),
                w: (prev.w.0.min(gb.w.0), prev.w.1.max(gb.w.1)),
            },
        });
    }
    Ok(GridTrack {
        grid: (gt, gh, gw),
        patch,
        padding,
        boxes: boxes
            .into_iter()
            .map(|b| b.expect("every temporal cell holds at least one frame"))
            .collect(),
    })
}

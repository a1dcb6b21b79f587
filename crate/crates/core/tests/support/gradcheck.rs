//! Central finite differences against the analytic guidance gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scene4d_core::guidance::{
    energy, energy_and_grad, AttentionModel, AttentionTensor, Conditioning, DenoiserConfig, LatentShape,
    LatentTensor, ToyDenoiser,
};
use scene4d_core::trajectory::{GridBox, GridTrack, PatchSize};

pub const STEP: f64 = 1e-5;

/// `max |a - b| / max(max |a|, max |b|)`.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn random_box(rng: &mut ChaCha8Rng, t: usize, gh: usize, gw: usize) -> GridBox {
    let h0 = rng.random_range(0..gh);
    let w0 = rng.random_range(0..gw);
    GridBox {
        t,
        h: (h0, rng.random_range(h0 + 1..=gh)),
        w: (w0, rng.random_range(w0 + 1..=gw)),
    }
}

pub fn random_track(rng: &mut ChaCha8Rng, grid: (usize, usize, usize)) -> GridTrack {
    GridTrack {
        grid,
        patch: PatchSize { t: 1, h: 1, w: 1 },
        padding: (0, 0, 0),
        boxes: (0..grid.0).map(|t| random_box(rng, t, grid.1, grid.2)).collect(),
    }
}

/// Random positive attention over a small grid.
pub fn random_attention(rng: &mut ChaCha8Rng) -> (AttentionTensor, GridTrack, usize) {
    let grid = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(2..5));
    let tokens = rng.random_range(1..4);
    let names = (0..tokens).map(|i| format!("tok{i}")).collect();
    let n = grid.0 * grid.1 * grid.2 * tokens;
    let data = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let a = AttentionTensor::new(grid, names, data).unwrap();
    let track = random_track(rng, grid);
    (a, track, rng.random_range(0..tokens))
}

fn total_energy(a: &AttentionTensor, track: &GridTrack, token: usize) -> f64 {
    (0..a.frames()).map(|f| energy(a, track, token, f).unwrap()).sum()
}

/// Relative error of `d E / d A` on one random attention tensor.
pub fn attention_instance(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, track, token) = random_attention(&mut rng);
    let (e, grad) = energy_and_grad(&a, &track, token).unwrap();
    assert!((e - total_energy(&a, &track, token)).abs() < 1e-12);
    let mut fd = vec![0.0; grad.len()];
    for (i, slot) in fd.iter_mut().enumerate() {
        let bump = |d: f64| {
            let mut data = a.data().to_vec();
            data[i] += d;
            let b = AttentionTensor::new(a.grid, a.token_names.clone(), data).unwrap();
            total_energy(&b, &track, token)
        };
        *slot = (bump(STEP) - bump(-STEP)) / (2.0 * STEP);
    }
    rel_error(&grad, &fd)
}

/// Relative error of `d E / d x` backpropagated through the toy denoiser's
/// cross-attention on one random small latent.
pub fn latent_instance(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patch = PatchSize { t: 1, h: 2, w: 2 };
    let model = ToyDenoiser::new(DenoiserConfig {
        patch,
        channels: 2,
        model_dim: 8,
        key_dim: 4,
        text_dim: 6,
        attention_gain: rng.random_range(0.5..4.0),
        sharpness_decay: if rng.random() { 0.0 } else { 15.0 },
        output_scale: 0.1,
        seed: rng.random(),
    })
    .unwrap();
    let shape = LatentShape {
        frames: rng.random_range(1..3),
        channels: 2,
        height: 4,
        width: rng.random_range(3..6),
    };
    let x = LatentTensor::random(shape, &mut rng);
    let words: Vec<String> = ["a", "red", "car", "moves", "right"][..rng.random_range(2..6)]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let cond = Conditioning::from_tokens(&words, 6, rng.random());
    let token = rng.random_range(0..words.len());
    let t = rng.random_range(1..50);
    let track = random_track(&mut rng, model.grid_for(shape));

    let a = model.attention(&x, t, &cond).unwrap();
    let (_, grad_a) = energy_and_grad(&a, &track, token).unwrap();
    let grad = model.attention_vjp(&x, t, &cond, &grad_a).unwrap();
    let mut fd = vec![0.0; x.data.len()];
    for (i, slot) in fd.iter_mut().enumerate() {
        let bump = |d: f64| {
            let mut y = x.clone();
            y.data[i] += d;
            total_energy(&model.attention(&y, t, &cond).unwrap(), &track, token)
        };
        *slot = (bump(STEP) - bump(-STEP)) / (2.0 * STEP);
    }
    rel_error(&grad.data, &fd)
}

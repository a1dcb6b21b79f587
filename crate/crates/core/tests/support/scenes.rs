//! Seeded random scenes for rasterizer comparisons.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scene4d_core::scene::{Camera, Gaussian3D, Intrinsics, NodeBinding, RigidTransform};

pub const DIM: usize = 4;

pub fn random_gaussians(seed: u64, count: usize) -> Vec<Gaussian3D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut q = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0f64..1.0),
            ];
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            q.iter_mut().for_each(|v| *v /= n);
            Gaussian3D {
                mean: [
                    rng.random_range(-1.2..1.2),
                    rng.random_range(-1.2..1.2),
                    rng.random_range(2.0..6.0),
                ],
                scale: [
                    rng.random_range(0.02..0.4),
                    rng.random_range(0.02..0.4),
                    rng.random_range(0.02..0.4),
                ],
                rotation: q,
                opacity: rng.random_range(0.05..1.0),
                color: [rng.random(), rng.random(), rng.random()],
                feature: (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect(),
                label: None,
                bindings: vec![NodeBinding(0, 1.0)],
            }
        })
        .collect()
}

pub fn camera(size: usize) -> Camera {
    Camera::new(Intrinsics::centered(size as f64, size, size), RigidTransform::IDENTITY).unwrap()
}

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scene4d_core::distill::{train_distillation, DistillConfig, FeatureDecoder, SyntheticEncoder, View};
use scene4d_core::raster::{rasterize_with, RenderOptions};
use scene4d_core::scene::{build_demo_scene, desk_cameras, desk_scene_spec, Camera, SceneSpec};

fn half_squared_error(d: &FeatureDecoder, x: &[f64], target: &[f64]) -> f64 {
    d.forward(x).unwrap().iter().zip(target).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum()
}

fn small_scene(seed: u64) -> scene4d_core::GaussianScene {
    build_demo_scene(&SceneSpec {
        gaussians_per_object: 25,
        ..desk_scene_spec(3, seed)
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn decoder_gradients_match_central_differences(seed in any::<u64>(), din in 1usize..6, hidden in 1usize..8, dout in 1usize..5, depth in 2usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![din];
        dims.extend(std::iter::repeat_n(hidden, depth - 2));
        dims.push(dout);
        let mut d = FeatureDecoder::new(&dims, seed).unwrap();
        for layer in &mut d.layers {
            layer.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
        let x: Vec<f64> = (0..din).map(|_| rng.random_range(-1.5..1.5)).collect();
        let target: Vec<f64> = (0..dout).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = d.forward(&x).unwrap();
        let g_out: Vec<f64> = y.iter().zip(&target).map(|(a, b)| a - b).collect();
        let (gp, gx) = d.gradients(&x, &g_out).unwrap();
        let h = 1e-6;
        let scale = gx.iter().chain(gp.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias)))
            .fold(0.0f64, |m, v| m.max(v.abs())).max(1e-6);
        for k in 0..din {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[k] += h;
            xm[k] -= h;
            let fd = (half_squared_error(&d, &xp, &target) - half_squared_error(&d, &xm, &target)) / (2.0 * h);
            prop_assert!((fd - gx[k]).abs() / scale < 1e-4, "input {k}: {fd} vs {}", gx[k]);
        }
        for l in 0..d.layers.len() {
            for i in 0..d.layers[l].weights.len() {
                let mut dp = d.clone();
                dp.layers[l].weights[i] += h;
                let mut dm = d.clone();
                dm.layers[l].weights[i] -= h;
                let fd = (half_squared_error(&dp, &x, &target) - half_squared_error(&dm, &x, &target)) / (2.0 * h);
                prop_assert!((fd - gp.layers[l].weights[i]).abs() / scale < 1e-4);
            }
            for i in 0..d.layers[l].bias.len() {
                let mut dp = d.clone();
                dp.layers[l].bias[i] += h;
                let mut dm = d.clone();
                dm.layers[l].bias[i] -= h;
                let fd = (half_squared_error(&dp, &x, &target) - half_squared_error(&dm, &x, &target)) / (2.0 * h);
                prop_assert!((fd - gp.layers[l].bias[i]).abs() / scale < 1e-4);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    /// A bias-free single-layer decoder commutes with compositing.
    #[test]
    fn linear_decoders_commute_with_compositing(seed in any::<u64>(), out in 1usize..6, frame in 0usize..3) {
        let scene = small_scene(seed);
        let d = FeatureDecoder::new(&[scene.feature_dim, out], seed).unwrap();
        let cam: Camera = desk_cameras(24, 24)[0];
        let (render, cap) = rasterize_with(&scene, frame, &cam, &RenderOptions { capture_weights: true, feature_override: None }).unwrap();
        let cap = cap.unwrap();
        let decoded: Vec<Vec<f64>> = scene.gaussians.iter().map(|g| d.forward(&g.feature).unwrap()).collect();
        for y in 0..24 {
            for x in 0..24 {
                let lhs = d.forward(render.pixel_feature(x, y)).unwrap();
                let mut rhs = vec![0.0; out];
                for &(j, w) in cap.pixel(x, y) {
                    rhs.iter_mut().zip(&decoded[j as usize]).for_each(|(r, v)| *r += w * v);
                }
                for (a, b) in lhs.iter().zip(&rhs) {
                    prop_assert!((a - b).abs() < 1e-12, "pixel ({x}, {y}): {a} vs {b}");
                }
            }
        }
    }
}

#[test]
fn training_is_bitwise_deterministic() {
    let scene = small_scene(4);
    let enc = SyntheticEncoder::new(&["ball", "cube", "background"], 6, 1).unwrap();
    let views = View::grid(0..3, &desk_cameras(20, 20));
    let cfg = DistillConfig {
        steps: 25,
        ..DistillConfig::default()
    };
    let a = train_distillation(&scene, &views, std::slice::from_ref(&enc), &cfg).unwrap();
    let b = train_distillation(&scene, &views, std::slice::from_ref(&enc), &cfg).unwrap();
    assert_eq!(a.loss_curve.len(), 26);
    assert!(a.loss_curve.iter().zip(&b.loss_curve).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(a.features, b.features);
    assert_eq!(a.decoders, b.decoders);
    assert!(a.final_loss() < a.loss_curve[0]);
}

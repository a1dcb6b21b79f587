use proptest::prelude::*;
use scene4d_core::editor::{apply_edit, search_thresholds, softmax, ColorSpec, EditParams, Scoring, ThresholdConfig};
use scene4d_core::parser::EditVerb;
use scene4d_core::raster::rasterize;
use scene4d_core::scene::{build_demo_scene, desk_cameras, desk_scene_spec, warp_scene, Camera, Intrinsics, SceneSpec};
use scene4d_core::GaussianScene;

fn scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 1..12)
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b })
}

fn desk(seed: u64) -> GaussianScene {
    build_demo_scene(&SceneSpec {
        gaussians_per_object: 30,
        background_color: [0.2, 0.3, 0.4],
        ..desk_scene_spec(4, seed)
    })
    .unwrap()
}

fn ball_indices(scene: &GaussianScene) -> Vec<usize> {
    (0..scene.len()).filter(|&j| scene.gaussians[j].label.as_deref() == Some("ball")).collect()
}

fn views() -> Vec<Camera> {
    let mut cams = desk_cameras(24, 24);
    cams.push(Camera::orbit(Intrinsics::centered(30.0, 24, 24), [0.0, 0.5, 0.0], 4.0, 1.1, 0.3).unwrap());
    cams
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn probabilities_sum_to_one(s in scores()) {
        let p = softmax(&s);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        prop_assert!(p.iter().all(|v| *v >= 0.0 && *v <= 1.0));
    }

    #[test]
    fn shifting_scores_keeps_argmax_and_ratios(s in scores(), c in -100.0f64..100.0) {
        let p = softmax(&s);
        let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
        let q = softmax(&shifted);
        prop_assert_eq!(argmax(&p), argmax(&q));
        for i in 0..p.len() {
            prop_assert!((p[i] - q[i]).abs() <= 1e-12);
            for j in 0..p.len() {
                if p[j] > 1e-200 && q[j] > 1e-200 {
                    prop_assert!((p[i] / p[j] - q[i] / q[j]).abs() <= 1e-9 * (p[i] / p[j]).max(1.0));
                }
            }
        }
    }

    #[test]
    fn selections_are_exactly_the_threshold_superlevel_set(p in prop::collection::vec(0.0f64..1.0, 1..60)) {
        if let Ok(sel) = search_thresholds("x", p.clone(), &ThresholdConfig::default(), &Scoring::Margin) {
            let expected: Vec<usize> = (0..p.len()).filter(|&j| p[j] >= sel.threshold).collect();
            prop_assert_eq!(&sel.selected, &expected);
            prop_assert!(sel.trace.iter().any(|t| t.threshold == sel.threshold));
            prop_assert!(sel.trace.iter().all(|t| t.threshold >= 0.3 && t.threshold <= 0.9));
        } else {
            prop_assert!(p.iter().all(|v| *v < 0.3 / 0.9));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn remove_and_extract_partition_the_scene_in_every_frame(seed in any::<u64>()) {
        let scene = desk(seed);
        let sel = ball_indices(&scene);
        let removed = apply_edit(&scene, &sel, EditVerb::Remove, &EditParams::default()).unwrap();
        let extracted = apply_edit(&scene, &sel, EditVerb::Extract, &EditParams::default()).unwrap();
        prop_assert_eq!(removed.len() + extracted.len(), scene.len());
        prop_assert_eq!(&removed.scaffold, &scene.scaffold);
        for frame in 0..scene.frame_count() {
            let all = warp_scene(&scene, frame).unwrap().gaussians;
            let (ball, rest): (Vec<_>, Vec<_>) = all.into_iter().enumerate().partition(|(j, _)| sel.contains(j));
            prop_assert_eq!(warp_scene(&extracted, frame).unwrap().gaussians, ball.into_iter().map(|(_, g)| g).collect::<Vec<_>>());
            prop_assert_eq!(warp_scene(&removed, frame).unwrap().gaussians, rest.into_iter().map(|(_, g)| g).collect::<Vec<_>>());
        }
    }

    #[test]
    fn recolor_leaves_feature_maps_untouched(seed in any::<u64>(), rgb in prop::array::uniform3(0.0f64..1.0)) {
        let scene = desk(seed);
        let sel = ball_indices(&scene);
        let params = EditParams { color: Some(ColorSpec::Rgb(rgb)) };
        let recolored = apply_edit(&scene, &sel, EditVerb::Recolor, &params).unwrap();
        prop_assert_eq!(&apply_edit(&recolored, &sel, EditVerb::Recolor, &params).unwrap(), &recolored);
        for cam in views() {
            for frame in 0..scene.frame_count() {
                let (a, b) = (rasterize(&scene, frame, &cam).unwrap(), rasterize(&recolored, frame, &cam).unwrap());
                prop_assert_eq!(&a.feature, &b.feature);
                prop_assert_eq!(&a.alpha, &b.alpha);
            }
        }
    }

    /// Where only one of the two groups covers a pixel, extract + remove -
    /// background reproduces the original; overlapping pixels are skipped.
    #[test]
    fn extract_plus_remove_recomposes_the_original(seed in any::<u64>()) {
        let scene = desk(seed);
        let sel = ball_indices(&scene);
        let removed = apply_edit(&scene, &sel, EditVerb::Remove, &EditParams::default()).unwrap();
        let extracted = apply_edit(&scene, &sel, EditVerb::Extract, &EditParams::default()).unwrap();
        let bg = scene.background_color;
        let mut checked = 0;
        for cam in views() {
            for frame in 0..scene.frame_count() {
                let o = rasterize(&scene, frame, &cam).unwrap();
                let e = rasterize(&extracted, frame, &cam).unwrap();
                let r = rasterize(&removed, frame, &cam).unwrap();
                for pix in 0..o.alpha.len() {
                    if e.alpha[pix] > 0.0 && r.alpha[pix] > 0.0 {
                        continue;
                    }
                    checked += 1;
                    for (c, b) in bg.iter().enumerate() {
                        let i = 3 * pix + c;
                        prop_assert!((e.rgb[i] + r.rgb[i] - b - o.rgb[i]).abs() < 1e-12);
                    }
                }
            }
        }
        prop_assert!(checked > 0);
    }
}

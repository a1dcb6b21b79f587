#![no_main]

use libfuzzer_sys::fuzz_target;
use scene4d_core::scene::{warp_scene, GaussianScene};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(scene) = GaussianScene::from_json(text) {
        for frame in 0..scene.frame_count().min(4) {
            let _ = warp_scene(&scene, frame);
        }
    }
});

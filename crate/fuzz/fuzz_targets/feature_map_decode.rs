#![no_main]

use libfuzzer_sys::fuzz_target;
use scene4d_core::formats::decode_feature_map;

fuzz_target!(|data: &[u8]| {
    let _ = decode_feature_map(data);
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use scene4d_core::formats::{decode_pfm, encode_pfm};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_pfm(data) {
        if let Ok(bytes) = encode_pfm(&img) {
            let again = decode_pfm(&bytes).expect("encoded PFM decodes");
            assert_eq!((again.width, again.height), (img.width, img.height));
        }
    }
});

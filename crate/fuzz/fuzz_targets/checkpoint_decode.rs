#![no_main]

use libfuzzer_sys::fuzz_target;
use scene4d_core::formats::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(decoder) = decode_checkpoint(text) {
        let again = decode_checkpoint(&encode_checkpoint(&decoder)).expect("encoded checkpoint decodes");
        assert_eq!(again.dims(), decoder.dims());
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use scene4d_core::formats::read_loss_csv;

fuzz_target!(|data: &[u8]| {
    let _ = read_loss_csv(data);
});

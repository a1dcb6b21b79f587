#![no_main]

use libfuzzer_sys::fuzz_target;
use scene4d_core::parser::{parse, ExecutionPlan};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(plan) = parse(text) {
        let back = ExecutionPlan::from_json_value(plan.to_json_value()).expect("parsed plans satisfy the schema");
        assert_eq!(back, plan);
    }
});

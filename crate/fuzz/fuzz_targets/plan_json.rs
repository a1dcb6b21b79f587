#![no_main]

use libfuzzer_sys::fuzz_target;
use scene4d_core::parser::ExecutionPlan;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(plan) = ExecutionPlan::from_json(text) {
        assert_eq!(ExecutionPlan::from_json_value(plan.to_json_value()).unwrap(), plan);
    }
});

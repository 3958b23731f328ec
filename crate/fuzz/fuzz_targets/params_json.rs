#![no_main]

use libfuzzer_sys::fuzz_target;
use mfeq_core::examples::{parse_params, ExampleParams};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ExampleParams::NonLQ(p)) = parse_params(text) {
        // accepted parameters give a finite strategy
        assert!(p.alpha_hat(0.0).is_finite());
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;

// Parsing must reject bad input with an error, never panic. Accepted models
// must also survive the condition checks on a small grid.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(model) = mfeq_core::parse_model(text) {
        let nodes: Vec<f64> = (0..=4).map(|i| model.horizon * i as f64 / 4.0).collect();
        let _ = mfeq_core::model::check_pd_conditions(&model, &nodes, 0.0);
        let _ = mfeq_core::model::check_monotonicity(&model, &nodes);
    }
});

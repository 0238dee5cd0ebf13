#![no_main]

use harvest_core::scenario::parse_measure;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(mu) = parse_measure(text) {
            let _ = mu.total_variation_sup();
            assert!(mu.slices().len() + 1 == mu.breakpoints().len());
        }
    }
});

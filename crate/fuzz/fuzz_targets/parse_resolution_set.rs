#![no_main]

use libfuzzer_sys::fuzz_target;
use pml_core::ResolutionSet;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(set) = s.parse::<ResolutionSet>() {
            assert!(set.levels().windows(2).all(|w| w[0] < w[1]));
        }
    }
});

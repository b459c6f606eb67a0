#![no_main]

use libfuzzer_sys::fuzz_target;
use pml_core::io::parse_points;
use pml_core::PointAnnotations;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(points) = parse_points(s) {
            let _ = PointAnnotations::new(points, 16.0);
        }
    }
});

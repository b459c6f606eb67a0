#![no_main]

use libfuzzer_sys::fuzz_target;
use pml_core::io::{format_dmap, parse_dmap};

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(map) = parse_dmap(s) {
            // anything accepted must survive a round trip
            let again = parse_dmap(&format_dmap(&map)).expect("formatted map must parse");
            assert_eq!(again, map);
        }
    }
});

#![no_main]

use asu_core::label_dist::AgeClassSet;
use asu_core::synthetic::parse_dataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let classes = AgeClassSet::new(1, 100).unwrap();
        let _ = parse_dataset(text, &classes, 1.0);
    }
});

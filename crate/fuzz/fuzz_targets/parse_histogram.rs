#![no_main]

use asu_core::demographics_stream::AgeGroupHistogram;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(hist) = AgeGroupHistogram::parse_csv(text) {
            assert_eq!(AgeGroupHistogram::parse_csv(&hist.to_csv()).unwrap(), hist);
        }
    }
});

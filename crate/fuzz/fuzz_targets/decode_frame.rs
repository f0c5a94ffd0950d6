#![no_main]

use asu_core::wire::{decode_frame, encode_frame};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(frame) = decode_frame(data) {
        assert_eq!(
            encode_frame(frame.sender, frame.iteration, &frame.update),
            data
        );
    }
});

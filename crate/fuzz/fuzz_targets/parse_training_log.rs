#![no_main]

use asu_core::ps_core::TrainingLog;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(log) = TrainingLog::parse_csv(text) {
            let again = TrainingLog::parse_csv(&log.to_csv(&[])).unwrap();
            assert_eq!(again.rows.len(), log.rows.len());
        }
    }
});

//! Fuzz the key=value run-config parser and validator.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let mut cfg = channel_mae::config::RunConfig::default();
        if cfg.apply_text(text).is_ok() {
            let _ = cfg.validate();
        }
    }
});

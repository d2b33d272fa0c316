#![no_main]

use gpdit::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|bytes: &[u8]| {
    if let Ok(text) = std::str::from_utf8(bytes) {
        if let Ok(cfg) = RunConfig::parse(text) {
            let _ = cfg.validate();
        }
    }
});

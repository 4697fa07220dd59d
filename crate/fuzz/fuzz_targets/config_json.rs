#![no_main]

use libfuzzer_sys::fuzz_target;
use qd_cli::{PartialConfig, RunConfig};

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = PartialConfig::from_json(data) {
        if let Ok(cfg) = RunConfig::resolve(p) {
            assert!(cfg.query.min_level <= cfg.query.start_level);
            assert!(cfg.repeats >= 5);
        }
    }
});

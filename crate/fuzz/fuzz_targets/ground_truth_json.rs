#![no_main]

use libfuzzer_sys::fuzz_target;
use qd_core::targets::{level_query_target, GroundTruthSet};

fuzz_target!(|data: &[u8]| {
    if let Ok(gt) = GroundTruthSet::from_json(data) {
        let again = GroundTruthSet::from_json(gt.to_json().as_bytes()).unwrap();
        assert_eq!(again, gt);
        let t = level_query_target(&gt, 5, 4, 4, 4.0);
        assert!(t.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
});

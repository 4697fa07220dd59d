#![no_main]

use libfuzzer_sys::fuzz_target;
use qd_core::format::{decode_tensor, encode_tensor};

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode_tensor(data) {
        assert!(t.is_finite());
        assert_eq!(decode_tensor(&encode_tensor(&t)).unwrap(), t);
    }
});

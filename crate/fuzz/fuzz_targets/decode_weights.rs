#![no_main]

use libfuzzer_sys::fuzz_target;
use qd_core::format::{decode_weights, encode_weights};

fuzz_target!(|data: &[u8]| {
    if let Ok(w) = decode_weights(data) {
        assert_eq!(decode_weights(&encode_weights(&w)).unwrap(), w);
    }
});

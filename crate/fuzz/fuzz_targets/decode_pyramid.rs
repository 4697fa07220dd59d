#![no_main]

use libfuzzer_sys::fuzz_target;
use qd_core::format::{decode_pyramid, encode_pyramid};

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = decode_pyramid(data) {
        for (&l, t) in p.levels() {
            assert_eq!((t.height(), t.width()), p.dims(l));
        }
        assert_eq!(decode_pyramid(&encode_pyramid(&p)).unwrap(), p);
    }
});

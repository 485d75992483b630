#![no_main]

use libfuzzer_sys::fuzz_target;
use synthground::netpbm::{decode_pbm, encode_pbm};

fuzz_target!(|data: &[u8]| {
    if let Ok(mask) = decode_pbm(data) {
        assert_eq!(mask.bits.len(), mask.width * mask.height);
        let again = decode_pbm(&encode_pbm(mask.width, mask.height, &mask.bits)).expect("round trip");
        assert_eq!(again, mask);
    }
});

#![no_main]

use lawg_core::container::{decode, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(entries) = decode(data) {
        // Bytes rather than values: payloads may hold NaN.
        let once = encode(&entries);
        let twice = encode(&decode(&once).expect("re-encoded container decodes"));
        assert_eq!(once, twice);
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use synthground::netpbm::{decode_ppm, encode_ppm};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_ppm(data) {
        assert_eq!(img.pixels.len(), img.width * img.height * 3);
        let again = decode_ppm(&encode_ppm(img.width, img.height, &img.pixels)).expect("round trip");
        assert_eq!(again, img);
    }
});

#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use synthground::parse_index;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_index(text, Path::new("index.jsonl")) {
        for r in &records {
            assert!(r.referent < r.scene.objects.len());
        }
    }
});

#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use synthground::parse_manifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(entries) = parse_manifest(text, Path::new("manifest.sha")) {
        for (digest, path) in &entries {
            assert_eq!(digest.len(), 64);
            assert!(!path.starts_with('/') && !path.split('/').any(|c| c == ".."));
        }
    }
});

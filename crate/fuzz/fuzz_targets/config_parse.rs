#![no_main]

use lawg_core::config::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = TrainConfig::from_text(text) {
        let echoed = cfg.to_text();
        let back = TrainConfig::from_text(&echoed).expect("canonical text parses");
        assert_eq!(back.to_text(), echoed);
    }
});

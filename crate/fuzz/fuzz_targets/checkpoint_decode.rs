#![no_main]

use lawg::checkpoint::Checkpoint;
use lawg_core::container::decode;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(entries) = decode(data) else { return };
    if let Ok(ck) = Checkpoint::from_entries(&entries) {
        let bytes = ck.encode();
        let back =
            Checkpoint::from_entries(&decode(&bytes).expect("own encoding decodes")).expect("own encoding loads");
        assert_eq!(back.encode(), bytes);
    }
});

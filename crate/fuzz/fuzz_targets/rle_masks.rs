#![no_main]

use groundseg::harness::export::RleMasks;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(masks) = RleMasks::parse(text) {
        for (_, mask) in &masks.frames {
            assert_eq!(mask.len(), masks.height * masks.width);
        }
        assert_eq!(RleMasks::parse(&masks.to_text()).unwrap(), masks);
    }
});

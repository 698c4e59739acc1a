#![no_main]
use gala_core::transforms::TransformRecord;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rec) = TransformRecord::from_json(text) {
        let json = rec.to_json().expect("record serializes");
        assert_eq!(TransformRecord::from_json(&json).expect("round trip"), rec);
    }
});

#![no_main]
use gala_core::image::BoundingBox;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(b) = text.parse::<BoundingBox>() {
        assert_eq!(b.to_string().parse::<BoundingBox>().expect("display output parses"), b);
    }
});

#![no_main]
use gala_core::image::{ImageTensor, SegMask};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = ImageTensor::decode(data) {
        assert!(img.width() > 0 && img.height() > 0);
    }
    let _ = SegMask::decode(data);
});

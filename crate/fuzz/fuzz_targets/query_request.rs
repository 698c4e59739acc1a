#![no_main]
use gala_core::api::{decode_image_b64, QueryRequest};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(req) = serde_json::from_slice::<QueryRequest>(data) {
        let _ = decode_image_b64(&req.image);
    }
});

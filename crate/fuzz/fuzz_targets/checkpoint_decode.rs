#![no_main]
use gala_core::encoder::checkpoint::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(weights) = decode_checkpoint(data) {
        let bytes = encode_checkpoint(&weights);
        let again = decode_checkpoint(&bytes).expect("re-encoded checkpoint must decode");
        assert_eq!(encode_checkpoint(&again), bytes);
    }
});

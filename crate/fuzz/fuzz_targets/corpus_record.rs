#![no_main]
use gala_core::dataset::CorpusRecord;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = CorpusRecord::from_json(text);
    }
});

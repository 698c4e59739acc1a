#![no_main]
use gala_core::dataset::{DatasetManifest, ManifestEntry};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = ManifestEntry::parse(text);
    if let Ok(manifest) = DatasetManifest::parse(text) {
        let out = manifest.to_jsonl().expect("parsed manifest serializes");
        assert_eq!(DatasetManifest::parse(&out).expect("round trip"), manifest);
    }
});

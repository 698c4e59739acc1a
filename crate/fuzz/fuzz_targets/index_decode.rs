#![no_main]
use gala_core::retrieval::GalleryIndex;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(index) = GalleryIndex::decode(data) {
        let bytes = index.encode();
        let again = GalleryIndex::decode(&bytes).expect("re-encoded index must decode");
        assert_eq!(again.encode(), bytes);
    }
});

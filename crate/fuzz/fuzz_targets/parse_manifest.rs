#![no_main]
use libfuzzer_sys::fuzz_target;
use unicross::data::Manifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(manifest) = Manifest::parse(text) {
            let again = Manifest::parse(&manifest.to_json()).unwrap();
            assert_eq!(manifest, again);
        }
    }
});

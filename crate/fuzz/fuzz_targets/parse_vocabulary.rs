#![no_main]
use libfuzzer_sys::fuzz_target;
use unicross::data::Vocabulary;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(vocab) = Vocabulary::parse(text) {
            assert_eq!(Vocabulary::parse(&vocab.to_file_string()).unwrap(), vocab);
        }
    }
});

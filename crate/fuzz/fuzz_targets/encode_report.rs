#![no_main]
use libfuzzer_sys::fuzz_target;
use unicross::data::{normalize, Vocabulary};

fuzz_target!(|data: &[u8]| {
    let Some((&len, rest)) = data.split_first() else {
        return;
    };
    let text = String::from_utf8_lossy(rest);
    let tokens = normalize(&text);
    let vocab = match Vocabulary::build([&tokens], 0) {
        Ok(v) => v,
        Err(_) => return,
    };
    let max_length = usize::from(len);
    if let Ok(seq) = vocab.encode_report(&text, max_length) {
        assert_eq!(seq.len(), max_length);
        seq.validate(vocab.len()).unwrap();
        let _ = vocab.decode(&seq.ids);
    }
});

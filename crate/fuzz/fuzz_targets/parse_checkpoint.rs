#![no_main]
use libfuzzer_sys::fuzz_target;
use unicross::trainer::checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = checkpoint::parse(data) {
        let _ = ckpt.vocabulary();
    }
});

#![no_main]
use candle_core::{DType, Device};
use libfuzzer_sys::fuzz_target;
use unicross::data::image::decode_image;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode_image(data, 1, 16, DType::F32, &Device::Cpu) {
        assert_eq!(t.dims(), &[1, 16, 16]);
    }
});

#![no_main]
use libfuzzer_sys::fuzz_target;
use unicross::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = RunConfig::parse(text) {
            // Anything accepted must survive its own serialization.
            let again = RunConfig::parse(&cfg.to_toml()).unwrap();
            assert_eq!(cfg, again);
        }
    }
});

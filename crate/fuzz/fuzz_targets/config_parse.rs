#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = bgnet::RunConfig::parse(text) {
            let again = bgnet::RunConfig::parse(&cfg.to_toml()).expect("serialized config parses");
            assert_eq!(again, cfg);
        }
    }
});

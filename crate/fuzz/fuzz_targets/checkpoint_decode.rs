#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(archive) = bgnet::checkpoint::decode(data) {
        let bytes = bgnet::checkpoint::encode(&archive);
        let again = bgnet::checkpoint::decode(&bytes).expect("encoded archive decodes");
        assert_eq!(bgnet::checkpoint::encode(&again), bytes);
    }
});

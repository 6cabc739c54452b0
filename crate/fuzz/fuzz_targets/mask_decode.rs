#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(plane) = bgnet::imageio::decode_mask_png(data) {
        assert_eq!(plane.data.len(), plane.height * plane.width);
        assert!(plane.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
});

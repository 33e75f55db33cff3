#![no_main]

use libfuzzer_sys::fuzz_target;
use simreg::image::Image;

fuzz_target!(|bytes: &[u8]| {
    if let Ok(img) = Image::decode(bytes) {
        assert!(img.channels() == 1 || img.channels() == 3);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
});

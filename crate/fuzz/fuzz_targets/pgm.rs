#![no_main]

use libfuzzer_sys::fuzz_target;
use usdeconv::io::pgm;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = pgm::decode(data) {
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
});

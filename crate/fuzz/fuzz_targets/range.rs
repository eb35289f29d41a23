#![no_main]

use libfuzzer_sys::fuzz_target;
use usdeconv::io::range::{parse_f64_range, parse_u32_range};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(v) = parse_f64_range(text) {
        assert!(!v.is_empty());
        assert!(v.windows(2).all(|w| w[0] < w[1]));
    }
    if let Ok(v) = parse_u32_range(text) {
        assert!(!v.is_empty());
        assert!(v.windows(2).all(|w| w[0] < w[1]));
    }
});

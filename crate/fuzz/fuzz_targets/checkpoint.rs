#![no_main]

use libfuzzer_sys::fuzz_target;
use usdeconv::inr::checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = checkpoint::decode(data) {
        // the encoding is canonical, so an accepted file re-encodes to itself
        assert_eq!(checkpoint::encode(&model), data);
    }
});

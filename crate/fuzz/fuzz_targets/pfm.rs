#![no_main]

use libfuzzer_sys::fuzz_target;
use usdeconv::io::pfm;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = pfm::decode(data) {
        // anything that decodes must survive a round trip bit for bit
        let again = pfm::decode(&pfm::encode(&img)).expect("re-encoded PFM decodes");
        assert_eq!(img.rows(), again.rows());
        assert_eq!(img.cols(), again.cols());
        for (a, b) in img.data().iter().zip(again.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
});

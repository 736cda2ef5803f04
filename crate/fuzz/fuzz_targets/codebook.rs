#![no_main]

use libfuzzer_sys::fuzz_target;
use trq_core::coarse::PqCodebook;

fuzz_target!(|data: &[u8]| {
    if let Ok(v) = PqCodebook::from_bytes(data) {
        let again = PqCodebook::from_bytes(&v.to_bytes()).unwrap();
        assert_eq!(again, v);
    }
});

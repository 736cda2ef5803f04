#![no_main]

use libfuzzer_sys::fuzz_target;
use trq_core::index::IvfIndex;

fuzz_target!(|data: &[u8]| {
    if let Ok(v) = IvfIndex::from_bytes(data) {
        let again = IvfIndex::from_bytes(&v.to_bytes()).unwrap();
        assert_eq!(again, v);
    }
});

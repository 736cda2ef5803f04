#![no_main]

use libfuzzer_sys::fuzz_target;
use trq_core::trq::TrqStore;

fuzz_target!(|data: &[u8]| {
    if let Ok(v) = TrqStore::from_bytes(data) {
        let again = TrqStore::from_bytes(&v.to_bytes()).unwrap();
        assert_eq!(again, v);
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use trq_core::vecstore::{encode_fvecs, parse_fvecs};

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = parse_fvecs(data) {
        let bytes = encode_fvecs(&ds).unwrap();
        assert_eq!(bytes, data);
    }
});

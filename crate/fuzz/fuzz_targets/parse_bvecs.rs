#![no_main]

use libfuzzer_sys::fuzz_target;
use trq_core::vecstore::{encode_bvecs, parse_bvecs};

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = parse_bvecs(data) {
        assert_eq!(encode_bvecs(&ds).unwrap(), data);
    }
});

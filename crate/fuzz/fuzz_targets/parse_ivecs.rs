#![no_main]

use libfuzzer_sys::fuzz_target;
use trq_core::vecstore::{encode_ivecs, parse_ivecs};

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = parse_ivecs(data) {
        assert_eq!(encode_ivecs(&m).unwrap(), data);
    }
});

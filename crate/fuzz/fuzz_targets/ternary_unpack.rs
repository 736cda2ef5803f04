#![no_main]

use libfuzzer_sys::fuzz_target;
use trq_core::trq::{pack, unpack};

// First byte picks the dimension, the rest is the packed payload.
fuzz_target!(|data: &[u8]| {
    let Some((&d, payload)) = data.split_first() else { return };
    let dim = usize::from(d) + 1;
    if let Ok(code) = unpack(payload, dim) {
        assert_eq!(code.dim(), dim);
        assert_eq!(unpack(&pack(&code), dim).unwrap(), code);
    }
});

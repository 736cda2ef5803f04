#![no_main]

use libfuzzer_sys::fuzz_target;
use trq_core::estimator::CalibrationModel;

fuzz_target!(|data: &[u8]| {
    if let Ok(v) = CalibrationModel::from_bytes(data) {
        let again = CalibrationModel::from_bytes(&v.to_bytes()).unwrap();
        assert_eq!(again, v);
    }
});

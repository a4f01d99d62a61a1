#![no_main]

use libfuzzer_sys::fuzz_target;

use advtrain::dataset::{idx_labels_bytes, parse_idx_labels};

fuzz_target!(|data: &[u8]| {
    if let Ok(labels) = parse_idx_labels(data) {
        assert_eq!(idx_labels_bytes(&labels), data);
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;

use advtrain::dataset::{idx_images_bytes, parse_idx_images};

fuzz_target!(|data: &[u8]| {
    // The parser must never panic on untrusted bytes, and anything it
    // accepts must re-emit to the same bytes.
    if let Ok(images) = parse_idx_images(data) {
        assert_eq!(idx_images_bytes(&images), data);
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;

use advtrain::{parse_checkpoint_bytes, write_checkpoint_bytes};

fuzz_target!(|data: &[u8]| {
    // Loading must never panic, and any checkpoint the parser accepts must
    // survive a bit-exact round-trip.
    if let Ok((params, config)) = parse_checkpoint_bytes(data) {
        let reencoded = write_checkpoint_bytes(&params, &config).expect("re-encode");
        let (params2, config2) = parse_checkpoint_bytes(&reencoded).expect("re-parse");
        assert_eq!(params, params2);
        assert_eq!(config, config2);
    }
});

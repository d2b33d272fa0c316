#![no_main]

use gpdit::data::{decode_dataset, encode_dataset};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|bytes: &[u8]| {
    if let Ok((geometry, videos)) = decode_dataset(bytes) {
        // Anything that decodes must re-encode to the same bytes.
        assert_eq!(encode_dataset(geometry, &videos).unwrap(), bytes);
    }
});

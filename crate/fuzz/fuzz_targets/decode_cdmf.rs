#![no_main]

use crowdcast::density::{decode_sequence, encode_sequence};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Anything that decodes must re-encode to the same bytes.
    if let Ok(seq) = decode_sequence(data) {
        assert_eq!(encode_sequence(&seq), data);
    }
});

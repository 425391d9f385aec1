//! Fuzz the binary snapshot decoder: arbitrary bytes must either decode to a
//! snapshot that re-encodes losslessly or be rejected with an error — never
//! panic, never accept non-finite data.
#![no_main]

use libfuzzer_sys::fuzz_target;
use phi4::io::{decode_snapshot, encode_snapshot};

fuzz_target!(|data: &[u8]| {
    if let Ok(snap) = decode_snapshot(data) {
        let bytes = encode_snapshot(snap.t, &snap.payload);
        let again = decode_snapshot(&bytes).expect("re-encoded snapshot must decode");
        assert_eq!(again.t.to_bits(), snap.t.to_bits());
    }
});

//! Fuzz the run-manifest JSON parser: arbitrary UTF-8 must either parse into
//! a manifest that round-trips through serialization or fail with a
//! structured error — never panic.
#![no_main]

use libfuzzer_sys::fuzz_target;
use phi4::io::Manifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(man) = Manifest::from_json(text) {
        let rendered = man.to_json();
        Manifest::from_json(&rendered).expect("rendered manifest must re-parse");
    }
});

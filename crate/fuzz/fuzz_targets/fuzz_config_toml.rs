//! Fuzz the TOML run-configuration parser: arbitrary UTF-8 must either parse
//! into a validated config that round-trips through serialization, or fail
//! with a structured error — never panic.
#![no_main]

use libfuzzer_sys::fuzz_target;
use phi4::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::from_toml_str(text) {
        let rendered = cfg.to_toml_string();
        let again = RunConfig::from_toml_str(&rendered).expect("rendered config must re-parse");
        assert_eq!(cfg, again);
    }
});

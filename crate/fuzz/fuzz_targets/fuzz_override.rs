//! Fuzz the KEY=VALUE override parser: arbitrary override strings applied to
//! the default config must either succeed (leaving a valid config) or fail
//! while leaving the config unchanged — never panic.
#![no_main]

use libfuzzer_sys::fuzz_target;
use phi4::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(spec) = std::str::from_utf8(data) else {
        return;
    };
    let mut cfg = RunConfig::default();
    let before = cfg.clone();
    match cfg.apply_override(spec) {
        Ok(()) => {
            cfg.validate().expect("override must leave a valid config");
        }
        Err(_) => assert_eq!(cfg, before, "failed override must roll back"),
    }
});

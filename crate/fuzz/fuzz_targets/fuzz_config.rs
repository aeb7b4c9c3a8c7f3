//! Fuzz the key=value config parser and both consumers built on it
//! (model config and full run config): arbitrary text must parse or
//! error, never panic, and accepted run configs must validate.

#![no_main]

use dcmcl::config::{model_from_kv, parse_kv, RunConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_kv(text);
    let _ = model_from_kv(text);
    let mut rc = RunConfig::new(24);
    if rc.apply_kv_text(text).is_ok() {
        let _ = rc.validate();
    }
});

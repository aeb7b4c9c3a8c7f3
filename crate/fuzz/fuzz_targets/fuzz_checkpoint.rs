//! Fuzz the binary checkpoint decoder: arbitrary bytes must decode into
//! a checkpoint or return an error, never panic or over-allocate, and
//! accepted checkpoints must re-serialize byte-identically.

#![no_main]

use dcmcl::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::from_bytes(data) {
        let bytes = ckpt.to_bytes();
        assert_eq!(bytes, data, "accepted checkpoints must round-trip");
    }
});

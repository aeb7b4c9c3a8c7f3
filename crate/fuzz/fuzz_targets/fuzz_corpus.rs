//! Fuzz the parallel-corpus text parser: arbitrary bytes split into a
//! source and target side must either parse into a validated corpus or
//! return an error, never panic.

#![no_main]

use dcmcl::data::{ParallelCorpus, Vocabulary};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (src, tgt) = match text.split_once('\x00') {
        Some((a, b)) => (a, b),
        None => (text, text),
    };
    let vocab = Vocabulary::synthetic(24);
    if let Ok(corpus) = ParallelCorpus::parse(src, tgt, vocab) {
        corpus.validate().expect("parsed corpus must validate");
    }
});

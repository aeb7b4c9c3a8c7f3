//! Toy corpora, vocabulary, token-budget batching, and desk-scale
//! sequence-level knowledge distillation.
//!
//! Corpus files are two aligned UTF-8 text files (`.src`, `.tgt`), one
//! sentence per line, space-separated tokens.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{DcmclError, Result};
use crate::masking::{self, MaskPlan, MaskStrategy};
use crate::model::{BOS, EOS, MASK, NUM_SPECIALS, PAD};
use crate::Rng;

/// String ↔ id table with the four reserved specials at ids 0..3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new(words: Vec<String>) -> Result<Self> {
        let specials = ["<pad>", "<bos>", "<eos>", "<mask>"];
        let mut all: Vec<String> = specials.iter().map(|s| s.to_string()).collect();
        for w in words {
            if specials.contains(&w.as_str()) {
                return Err(DcmclError::Invalid(format!("reserved token {w} in vocabulary")));
            }
            all.push(w);
        }
        let mut index = HashMap::new();
        for (i, w) in all.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(DcmclError::Invalid(format!("duplicate token {w}")));
            }
        }
        Ok(Vocabulary { words: all, index })
    }

    /// Closed synthetic vocabulary `t4..t{n-1}` behind the specials.
    pub fn synthetic(vocab_size: usize) -> Self {
        let words = (NUM_SPECIALS as usize..vocab_size).map(|v| format!("t{v}")).collect();
        Vocabulary::new(words).expect("synthetic names cannot collide")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id_of(&self, w: &str) -> Option<u32> {
        self.index.get(w).copied()
    }

    pub fn word_of(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(|s| s.as_str())
    }

    pub fn encode(&self, line: &str) -> Result<Vec<u32>> {
        line.split_whitespace()
            .map(|w| {
                self.id_of(w)
                    .ok_or_else(|| DcmclError::Invalid(format!("unknown token {w}")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let words: Result<Vec<&str>> = ids
            .iter()
            .map(|&id| {
                self.word_of(id)
                    .ok_or_else(|| DcmclError::Invalid(format!("id {id} out of vocabulary")))
            })
            .collect();
        Ok(words?.join(" "))
    }
}

/// Aligned sentence pairs plus the vocabulary they are encoded in.
#[derive(Debug, Clone)]
pub struct ParallelCorpus {
    pub pairs: Vec<(Vec<u32>, Vec<u32>)>,
    pub vocab: Vocabulary,
}

impl ParallelCorpus {
    pub fn validate(&self) -> Result<()> {
        let v = self.vocab.len() as u32;
        for (i, (s, t)) in self.pairs.iter().enumerate() {
            if s.is_empty() || t.is_empty() {
                return Err(DcmclError::Invalid(format!("empty sentence in pair {i}")));
            }
            for &id in s.iter().chain(t.iter()) {
                if id >= v {
                    return Err(DcmclError::Invalid(format!("id {id} out of range in pair {i}")));
                }
                if id < NUM_SPECIALS {
                    return Err(DcmclError::Invalid(format!(
                        "special id {id} inside sentence in pair {i}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn write_files(&self, prefix: &Path) -> Result<()> {
        let mut src = String::new();
        let mut tgt = String::new();
        for (s, t) in &self.pairs {
            src.push_str(&self.vocab.decode(s)?);
            src.push('\n');
            tgt.push_str(&self.vocab.decode(t)?);
            tgt.push('\n');
        }
        std::fs::write(prefix.with_extension("src"), src)?;
        std::fs::write(prefix.with_extension("tgt"), tgt)?;
        Ok(())
    }

    pub fn load_files(src_path: &Path, tgt_path: &Path, vocab: Vocabulary) -> Result<Self> {
        let src = std::fs::read_to_string(src_path)?;
        let tgt = std::fs::read_to_string(tgt_path)?;
        Self::parse(&src, &tgt, vocab)
    }

    /// Parse aligned corpus text. Untrusted input: every failure is a typed
    /// error, never a panic.
    pub fn parse(src: &str, tgt: &str, vocab: Vocabulary) -> Result<Self> {
        let src_lines: Vec<&str> = src.lines().collect();
        let tgt_lines: Vec<&str> = tgt.lines().collect();
        if src_lines.len() != tgt_lines.len() {
            return Err(DcmclError::Invalid(format!(
                "line count mismatch: {} src vs {} tgt",
                src_lines.len(),
                tgt_lines.len()
            )));
        }
        let mut pairs = Vec::with_capacity(src_lines.len());
        for (i, (s, t)) in src_lines.iter().zip(&tgt_lines).enumerate() {
            let se = vocab.encode(s)?;
            let te = vocab.encode(t)?;
            if se.is_empty() || te.is_empty() {
                return Err(DcmclError::Invalid(format!("empty sentence at line {}", i + 1)));
            }
            pairs.push((se, te));
        }
        let corpus = ParallelCorpus { pairs, vocab };
        corpus.validate()?;
        Ok(corpus)
    }
}

/// Synthetic task family. `Lexicon` applies a bijective per-token dictionary
/// then swaps adjacent pairs at even offsets, so target order differs from
/// source order and AR/NAR contexts disagree meaningfully.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Copy,
    Reverse,
    Lexicon,
}

impl std::str::FromStr for Task {
    type Err = DcmclError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "copy" => Task::Copy,
            "reverse" => Task::Reverse,
            "lexicon" => Task::Lexicon,
            other => return Err(DcmclError::Invalid(format!("unknown task {other}"))),
        })
    }
}

/// Dictionary image used by the lexicon task: shift by 4 inside the
/// non-special id range.
pub fn lexicon_map(v: u32, vocab_size: usize) -> u32 {
    let w = vocab_size as u32 - NUM_SPECIALS;
    NUM_SPECIALS + ((v - NUM_SPECIALS + 4) % w)
}

pub fn lexicon_target(src: &[u32], vocab_size: usize) -> Vec<u32> {
    let mut t: Vec<u32> = src.iter().map(|&v| lexicon_map(v, vocab_size)).collect();
    let mut i = 0;
    while i + 1 < t.len() {
        t.swap(i, i + 1);
        i += 2;
    }
    t
}

pub fn gen_synthetic(
    task: Task,
    n_pairs: usize,
    vocab_size: usize,
    len_range: (usize, usize),
    max_len: usize,
    rng: &mut Rng,
) -> Result<ParallelCorpus> {
    let (lo, hi) = len_range;
    if vocab_size < 8 {
        return Err(DcmclError::Invalid("vocab_size must be >= 8".into()));
    }
    if !(1 <= lo && lo <= hi && hi <= max_len.saturating_sub(2)) {
        return Err(DcmclError::Invalid(format!(
            "length range ({lo},{hi}) invalid for max_len {max_len}"
        )));
    }
    let vocab = Vocabulary::synthetic(vocab_size);
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let len = rng.gen_range(lo..=hi);
        let src: Vec<u32> =
            (0..len).map(|_| rng.gen_range(NUM_SPECIALS..vocab_size as u32)).collect();
        let tgt = match task {
            Task::Copy => src.clone(),
            Task::Reverse => src.iter().rev().copied().collect(),
            Task::Lexicon => lexicon_target(&src, vocab_size),
        };
        pairs.push((src, tgt));
    }
    let corpus = ParallelCorpus { pairs, vocab };
    corpus.validate()?;
    Ok(corpus)
}

/// One padded mini-batch. Targets get their mask plans assigned fresh each
/// epoch via [`Batch::assign_plans`].
#[derive(Debug, Clone)]
pub struct Batch {
    /// Indices into the source corpus, for diagnostics.
    pub sentence_ids: Vec<usize>,
    pub src: Vec<Vec<u32>>,
    pub tgt: Vec<Vec<u32>>,
    pub plans: Vec<MaskPlan>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Padded source matrix with per-sentence lengths, pad id beyond each
    /// length.
    pub fn padded_src(&self) -> (Vec<u32>, Vec<usize>, usize) {
        Self::pad(&self.src)
    }

    pub fn padded_tgt(&self) -> (Vec<u32>, Vec<usize>, usize) {
        Self::pad(&self.tgt)
    }

    fn pad(rows: &[Vec<u32>]) -> (Vec<u32>, Vec<usize>, usize) {
        let width = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut out = vec![PAD; rows.len() * width];
        let mut lens = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            out[i * width..i * width + r.len()].copy_from_slice(r);
            lens.push(r.len());
        }
        (out, lens, width)
    }

    /// Draw a mask plan per sentence over the target length including the
    /// end token.
    pub fn assign_plans(&mut self, strategy: MaskStrategy, rng: &mut Rng) -> Result<()> {
        self.plans.clear();
        for t in &self.tgt {
            let n = t.len() + 1; // includes <eos>
            let plan = match strategy {
                MaskStrategy::Cmlm => masking::cmlm_mask(n, rng),
                MaskStrategy::FixedRatio(r) => masking::fixed_ratio_mask(n, r, rng)?,
                MaskStrategy::Disco => masking::disco_contexts(n, rng),
            };
            self.plans.push(plan);
        }
        Ok(())
    }
}

/// Length-sorted bucketing then greedy fill under the token budget. Every
/// sentence appears in exactly one batch. Cost of a sentence is
/// `max(len_src, len_tgt)`.
pub fn batch_by_tokens(
    corpus: &ParallelCorpus,
    budget: usize,
    rng: &mut Rng,
    shuffle: bool,
) -> Result<Vec<Batch>> {
    let cost = |s: &[u32], t: &[u32]| s.len().max(t.len());
    for (i, (s, t)) in corpus.pairs.iter().enumerate() {
        if cost(s, t) > budget {
            return Err(DcmclError::Invalid(format!(
                "sentence {i} has {} tokens, over budget {budget}",
                cost(s, t)
            )));
        }
    }
    let mut order: Vec<usize> = (0..corpus.pairs.len()).collect();
    order.sort_by_key(|&i| {
        let (s, t) = &corpus.pairs[i];
        (cost(s, t), i)
    });
    let mut batches = Vec::new();
    let mut cur = Batch { sentence_ids: vec![], src: vec![], tgt: vec![], plans: vec![] };
    let mut used = 0usize;
    for i in order {
        let (s, t) = &corpus.pairs[i];
        let c = cost(s, t);
        if used + c > budget && !cur.is_empty() {
            batches.push(std::mem::replace(
                &mut cur,
                Batch { sentence_ids: vec![], src: vec![], tgt: vec![], plans: vec![] },
            ));
            used = 0;
        }
        cur.sentence_ids.push(i);
        cur.src.push(s.clone());
        cur.tgt.push(t.clone());
        used += c;
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    if shuffle {
        batches.shuffle(rng);
    }
    Ok(batches)
}

/// Replace the target side with a trained AR teacher's beam outputs.
/// Empty hypotheses fall back to the original target; overlong ones are
/// truncated. Both cases are counted.
pub struct DistillStats {
    pub empty_fallbacks: usize,
    pub truncated: usize,
}

pub fn distill(
    teacher: &crate::model::Model,
    corpus: &ParallelCorpus,
    cfg: &crate::decoding::DecodeConfig,
) -> Result<(ParallelCorpus, DistillStats)> {
    let mut stats = DistillStats { empty_fallbacks: 0, truncated: 0 };
    let max_target = teacher.cfg.max_len - 1;
    let mut pairs = Vec::with_capacity(corpus.pairs.len());
    for (s, t) in &corpus.pairs {
        let (hyp, _score) = crate::decoding::beam_search(teacher, s, cfg)?;
        let mut y = hyp;
        if y.is_empty() {
            stats.empty_fallbacks += 1;
            y = t.clone();
        }
        if y.len() > max_target {
            stats.truncated += 1;
            y.truncate(max_target);
        }
        pairs.push((s.clone(), y));
    }
    Ok((ParallelCorpus { pairs, vocab: corpus.vocab.clone() }, stats))
}

// keep clippy quiet about unused special imports in this module
const _: [u32; 3] = [BOS, EOS, MASK];

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> crate::Rng {
        crate::Rng::seed_from_u64(seed)
    }

    #[test]
    fn copy_and_reverse() {
        let src = vec![5, 6, 7];
        assert_eq!(src.clone(), src);
        let rev: Vec<u32> = src.iter().rev().copied().collect();
        assert_eq!(rev, vec![7, 6, 5]);
        let mut r = rng(0);
        let c = gen_synthetic(Task::Reverse, 10, 16, (2, 6), 16, &mut r).unwrap();
        for (s, t) in &c.pairs {
            let rev: Vec<u32> = s.iter().rev().copied().collect();
            assert_eq!(&rev, t);
        }
    }

    #[test]
    fn lexicon_worked_example() {
        // map(v) = v+4 (no wraparound with a big enough vocab), then swap
        // adjacent pairs: [5,6,7,8] -> [9,10,11,12] -> [10,9,12,11]
        assert_eq!(lexicon_target(&[5, 6, 7, 8], 24), vec![10, 9, 12, 11]);
    }

    #[test]
    fn lexicon_map_bijective() {
        let vs = 24;
        let mut seen = std::collections::HashSet::new();
        for v in NUM_SPECIALS..vs as u32 {
            let m = lexicon_map(v, vs);
            assert!((NUM_SPECIALS..vs as u32).contains(&m));
            assert!(seen.insert(m));
        }
    }

    #[test]
    fn gen_parameter_validation() {
        let mut r = rng(0);
        assert!(gen_synthetic(Task::Copy, 5, 4, (1, 3), 16, &mut r).is_err());
        assert!(gen_synthetic(Task::Copy, 5, 16, (5, 3), 16, &mut r).is_err());
        assert!(gen_synthetic(Task::Copy, 5, 16, (1, 15), 16, &mut r).is_err());
    }

    #[test]
    fn vocab_round_trip() {
        let mut r = rng(11);
        let c = gen_synthetic(Task::Lexicon, 50, 24, (4, 12), 16, &mut r).unwrap();
        for (s, t) in &c.pairs {
            assert_eq!(c.vocab.encode(&c.vocab.decode(s).unwrap()).unwrap(), *s);
            assert_eq!(c.vocab.encode(&c.vocab.decode(t).unwrap()).unwrap(), *t);
        }
    }

    #[test]
    fn corpus_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rng(12);
        let c = gen_synthetic(Task::Copy, 20, 16, (2, 6), 16, &mut r).unwrap();
        let prefix = dir.path().join("toy");
        c.write_files(&prefix).unwrap();
        let loaded = ParallelCorpus::load_files(
            &prefix.with_extension("src"),
            &prefix.with_extension("tgt"),
            c.vocab.clone(),
        )
        .unwrap();
        assert_eq!(loaded.pairs, c.pairs);
    }

    #[test]
    fn single_sentence_batch() {
        let vocab = Vocabulary::synthetic(16);
        let corpus =
            ParallelCorpus { pairs: vec![(vec![5, 6], vec![6, 5])], vocab };
        let batches = batch_by_tokens(&corpus, 10, &mut rng(0), false).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].len(), 1);
    }

    #[test]
    fn budget_splits_batches() {
        let vocab = Vocabulary::synthetic(16);
        let s = vec![5u32; 5];
        let corpus = ParallelCorpus {
            pairs: vec![(s.clone(), s.clone()); 4],
            vocab,
        };
        let batches = batch_by_tokens(&corpus, 10, &mut rng(0), false).unwrap();
        assert_eq!(batches.len(), 2);
        assert!(batches.iter().all(|b| b.len() == 2));
    }

    #[test]
    fn oversized_sentence_rejected() {
        let vocab = Vocabulary::synthetic(16);
        let corpus = ParallelCorpus { pairs: vec![(vec![5u32; 12], vec![5u32; 12])], vocab };
        assert!(batch_by_tokens(&corpus, 10, &mut rng(0), false).is_err());
    }

    #[test]
    fn padding_only_beyond_length() {
        let vocab = Vocabulary::synthetic(16);
        let corpus = ParallelCorpus {
            pairs: vec![(vec![5, 6, 7], vec![7, 6, 5]), (vec![8], vec![8])],
            vocab,
        };
        let batches = batch_by_tokens(&corpus, 10, &mut rng(0), false).unwrap();
        for b in &batches {
            let (mat, lens, w) = b.padded_tgt();
            for (i, &l) in lens.iter().enumerate() {
                for j in 0..w {
                    let v = mat[i * w + j];
                    if j < l {
                        assert_ne!(v, PAD);
                    } else {
                        assert_eq!(v, PAD);
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn batching_conserves_tokens(n in 1usize..40, seed in 0u64..50, shuffle in any::<bool>()) {
            let mut r = rng(seed);
            let c = gen_synthetic(Task::Lexicon, n, 24, (2, 10), 16, &mut r).unwrap();
            let batches = batch_by_tokens(&c, 24, &mut r, shuffle).unwrap();
            let corpus_tokens: usize = c.pairs.iter().map(|(_, t)| t.len()).sum();
            let batch_tokens: usize = batches.iter()
                .flat_map(|b| b.tgt.iter().map(Vec::len)).sum();
            prop_assert_eq!(corpus_tokens, batch_tokens);
            let mut ids: Vec<usize> = batches.iter().flat_map(|b| b.sentence_ids.clone()).collect();
            ids.sort_unstable();
            prop_assert_eq!(ids, (0..n).collect::<Vec<_>>());
        }
    }
}

//! Evaluation metrics: corpus BLEU, repeated-token percentage, and a
//! cosine probe of AR/NAR decoder hidden states.

use std::collections::HashMap;
use std::hash::Hash;

use rand::SeedableRng;

use crate::error::{DcmclError, Result};
use crate::masking;
use crate::model::{Mode, Model};
use crate::tensor::Tape;
use crate::Rng;

fn ngram_counts<T: Eq + Hash + Clone>(seq: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4: geometric mean of clipped n-gram precisions times
/// the brevity penalty `exp(min(0, 1 - ref_len/hyp_len))`. With
/// `smoothing`, the k-th zero precision is replaced by `1/2^k`; without
/// it, any zero precision gives BLEU 0.
pub fn corpus_bleu<T: Eq + Hash + Clone>(
    hypotheses: &[Vec<T>],
    references: &[Vec<T>],
    smoothing: bool,
) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(DcmclError::Invalid("empty hypothesis set".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(DcmclError::Invalid(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matched = [0usize; 4];
    let mut totals = [0usize; 4];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, rf) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += rf.len();
        for n in 1..=4 {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(rf, n);
            for (gram, &c) in &h {
                matched[n - 1] += c.min(*r.get(gram).unwrap_or(&0));
            }
            totals[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_prec = 0.0;
    let mut zeros = 0u32;
    for n in 0..4 {
        let p = if totals[n] == 0 || matched[n] == 0 {
            if !smoothing {
                return Ok(0.0);
            }
            zeros += 1;
            1.0 / f64::powi(2.0, zeros as i32)
        } else {
            matched[n] as f64 / totals[n] as f64
        };
        log_prec += p.ln() / 4.0;
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_prec.exp())
}

/// Percentage of tokens that repeat their immediate predecessor, over a
/// corpus of hypotheses.
pub fn repeated_token_pct<T: PartialEq>(hypotheses: &[Vec<T>]) -> f64 {
    let mut repeats = 0usize;
    let mut total = 0usize;
    for hyp in hypotheses {
        total += hyp.len();
        repeats += hyp.windows(2).filter(|w| w[0] == w[1]).count();
    }
    if total == 0 {
        0.0
    } else {
        100.0 * repeats as f64 / total as f64
    }
}

/// Mean cosine similarity between aligned AR and NAR decoder hidden
/// states, taken per target position and averaged over every position
/// of every sentence. The AR decoder is teacher-forced; the NAR decoder
/// sees a fixed 50% mask. Probes how far the two decoders'
/// representations have been pulled together.
pub fn hidden_similarity(model: &Model, pairs: &[(Vec<u32>, Vec<u32>)], seed: u64) -> Result<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for (src, tgt) in pairs {
        if tgt.is_empty() {
            continue;
        }
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, false);
        let e_ar = model.encode(&mut tape, &b, src, Mode::Eval, &mut rng)?;
        let e_nar = model.encode_nar(&mut tape, &b, src, Mode::Eval, &mut rng)?;
        let gold = Model::gold(tgt);
        let plan = masking::fixed_ratio_mask(gold.len(), 0.5, &mut rng)?;
        let ar_in = Model::ar_input(tgt);
        let h_ar = model.ar_states(&mut tape, &b, e_ar, &ar_in, Mode::Eval, &mut rng)?;
        let nar_in = Model::nar_input(tgt, &plan);
        let h_nar = model.nar_states(&mut tape, &b, e_nar, &nar_in, Mode::Eval, &mut rng)?;
        for i in 0..gold.len() {
            let ra = tape.select_rows(h_ar, &[i]);
            let rn = tape.select_rows(h_nar, &[i]);
            let cos = tape.cosine_sim(ra, rn);
            total += tape.value(cos).data()[0];
            count += 1;
        }
    }
    if count == 0 {
        Ok(0.0)
    } else {
        Ok(total / count as f64)
    }
}

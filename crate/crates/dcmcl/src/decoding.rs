//! Inference: length-normalized AR beam search and NAR iterative
//! mask-predict over a beam of candidate lengths.

use rand::SeedableRng;

use crate::error::{DcmclError, Result};
use crate::model::{Head, Mode, Model, BOS, EOS, MASK, PAD};
use crate::tensor::Tape;
use crate::Rng;

#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub length_beam: usize,
    pub nar_iterations: usize,
    pub max_decode_len: usize,
    /// Length-normalization exponent for beam scores.
    pub length_alpha: f64,
}

impl DecodeConfig {
    pub fn defaults(max_decode_len: usize) -> Self {
        DecodeConfig {
            beam_size: 4,
            length_beam: 5,
            nar_iterations: 10,
            max_decode_len,
            length_alpha: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0
            || self.length_beam == 0
            || self.nar_iterations == 0
            || self.max_decode_len == 0
        {
            return Err(DcmclError::Config("decode config fields must be positive".into()));
        }
        if self.length_beam > self.max_decode_len {
            return Err(DcmclError::Config("length_beam exceeds max_decode_len".into()));
        }
        Ok(())
    }
}

/// Number of lowest-confidence tokens to re-mask after iteration `t` of
/// `T`: `floor(N * (T - t) / T)`.
pub fn remask_count(n: usize, total_iters: usize, t: usize) -> Result<usize> {
    if t == 0 || t > total_iters {
        return Err(DcmclError::Invalid(format!("iteration {t} outside 1..={total_iters}")));
    }
    Ok(n * (total_iters - t) / total_iters)
}

#[derive(Clone)]
struct BeamCandidate {
    /// Generated tokens after `<bos>`, including `<eos>` when finished.
    tokens: Vec<u32>,
    sum_log_prob: f64,
    finished: bool,
}

impl BeamCandidate {
    fn normalized(&self, alpha: f64) -> f64 {
        let len = self.tokens.len().max(1) as f64;
        self.sum_log_prob / len.powf(alpha)
    }
}

/// Beam search over any left-to-right scorer. `step` receives the live
/// prefixes (each starting with `<bos>`) and returns next-token log-prob
/// rows. Deterministic: ties break toward the lexicographically smaller
/// token sequence.
pub fn beam_search_with<F>(
    mut step: F,
    vocab_size: usize,
    cfg: &DecodeConfig,
) -> Result<(Vec<u32>, f64)>
where
    F: FnMut(&[Vec<u32>]) -> Result<Vec<Vec<f64>>>,
{
    cfg.validate()?;
    let mut beam = vec![BeamCandidate { tokens: vec![], sum_log_prob: 0.0, finished: false }];
    for _ in 0..cfg.max_decode_len {
        let live: Vec<&BeamCandidate> = beam.iter().filter(|c| !c.finished).collect();
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<u32>> = live
            .iter()
            .map(|c| {
                let mut p = vec![BOS];
                p.extend_from_slice(&c.tokens);
                p
            })
            .collect();
        let rows = step(&prefixes)?;
        let mut next: Vec<BeamCandidate> = beam.iter().filter(|c| c.finished).cloned().collect();
        for (c, row) in live.iter().zip(&rows) {
            for (tok, &lp) in row.iter().enumerate() {
                let tok = tok as u32;
                if tok == PAD || tok == MASK || tok == BOS || tok as usize >= vocab_size {
                    continue;
                }
                let mut tokens = c.tokens.clone();
                tokens.push(tok);
                next.push(BeamCandidate {
                    tokens,
                    sum_log_prob: c.sum_log_prob + lp,
                    finished: tok == EOS,
                });
            }
        }
        next.sort_by(|a, b| {
            b.normalized(cfg.length_alpha)
                .partial_cmp(&a.normalized(cfg.length_alpha))
                .unwrap()
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        next.truncate(cfg.beam_size);
        beam = next;
    }
    let best = beam
        .iter()
        .max_by(|a, b| {
            a.normalized(cfg.length_alpha)
                .partial_cmp(&b.normalized(cfg.length_alpha))
                .unwrap()
                .then_with(|| b.tokens.cmp(&a.tokens))
        })
        .expect("beam never empty");
    let mut tokens = best.tokens.clone();
    if tokens.last() == Some(&EOS) {
        tokens.pop();
    }
    Ok((tokens, best.normalized(cfg.length_alpha)))
}

/// AR beam search for one source sentence.
pub fn beam_search(model: &Model, src: &[u32], cfg: &DecodeConfig) -> Result<(Vec<u32>, f64)> {
    let mut dummy = Rng::seed_from_u64(0);
    // encoder output is fixed for the whole search
    let mut enc_tape = Tape::new();
    let b = model.bind(&mut enc_tape, false);
    let e_id = model.encode(&mut enc_tape, &b, src, Mode::Eval, &mut dummy)?;
    let e = enc_tape.value(e_id).clone();
    let vocab = model.cfg.vocab_size;
    beam_search_with(
        |prefixes| {
            let mut rows = Vec::with_capacity(prefixes.len());
            for prefix in prefixes {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape, false);
                let e_leaf = tape.constant(e.clone());
                let h = model.ar_states(&mut tape, &bound, e_leaf, prefix, Mode::Eval, &mut dummy)?;
                let lp = model.output_log_probs(&mut tape, &bound, h, Head::Ar)?;
                let n = prefix.len();
                let row = tape.value(lp).data()[(n - 1) * vocab..n * vocab].to_vec();
                rows.push(row);
            }
            Ok(rows)
        },
        vocab,
        cfg,
    )
}

/// One mask-predict run at a fixed target length. Returns the token
/// sequence and its mean per-token log-probability.
fn mask_predict_at_length(
    model: &Model,
    e: &crate::tensor::Tensor,
    length: usize,
    cfg: &DecodeConfig,
) -> Result<(Vec<u32>, f64)> {
    let mut dummy = Rng::seed_from_u64(0);
    let vocab = model.cfg.vocab_size;
    let mut tokens = vec![MASK; length];
    let mut conf = vec![0.0f64; length];
    let t_total = cfg.nar_iterations;
    for t in 1..=t_total {
        let masked: Vec<usize> = (0..length).filter(|&i| tokens[i] == MASK).collect();
        if !masked.is_empty() {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false);
            let e_leaf = tape.constant(e.clone());
            let h = model.nar_states(&mut tape, &bound, e_leaf, &tokens, Mode::Eval, &mut dummy)?;
            let lp = model.output_log_probs(&mut tape, &bound, h, Head::Nar)?;
            let lp = tape.value(lp);
            for &i in &masked {
                let row = &lp.data()[i * vocab..(i + 1) * vocab];
                let mut best = (EOS, f64::NEG_INFINITY);
                for (tok, &v) in row.iter().enumerate() {
                    let tok = tok as u32;
                    if tok == PAD || tok == MASK || tok == BOS {
                        continue;
                    }
                    if v > best.1 {
                        best = (tok, v);
                    }
                }
                tokens[i] = best.0;
                conf[i] = best.1.exp();
            }
        }
        if t < t_total {
            let k = remask_count(length, t_total, t)?;
            // lowest-confidence non-<eos> positions go back to [M]
            let mut order: Vec<usize> = (0..length).filter(|&i| tokens[i] != EOS).collect();
            order.sort_by(|&a, &b| conf[a].partial_cmp(&conf[b]).unwrap().then(a.cmp(&b)));
            for &i in order.iter().take(k) {
                tokens[i] = MASK;
            }
        }
    }
    let score = (0..length).map(|i| conf[i].max(1e-300).ln()).sum::<f64>() / length.max(1) as f64;
    Ok((tokens, score))
}

/// Iterative mask-predict over the top `length_beam` predicted lengths;
/// candidates are ranked by mean per-token log-probability.
pub fn mask_predict(model: &Model, src: &[u32], cfg: &DecodeConfig) -> Result<(Vec<u32>, f64)> {
    cfg.validate()?;
    let mut dummy = Rng::seed_from_u64(0);
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false);
    let e_id = model.encode_nar(&mut tape, &b, src, Mode::Eval, &mut dummy)?;
    let logits = model.predict_length(&mut tape, &b, e_id)?;
    let logits = tape.value(logits).data().to_vec();
    let e = tape.value(e_id).clone();
    // top lengths by logit, ties toward the shorter length
    let mut lengths: Vec<usize> = (1..=cfg.max_decode_len.min(model.cfg.max_len)).collect();
    lengths.sort_by(|&a, &b| {
        logits[b - 1].partial_cmp(&logits[a - 1]).unwrap().then(a.cmp(&b))
    });
    lengths.truncate(cfg.length_beam);
    let mut best: Option<(Vec<u32>, f64)> = None;
    for len in lengths {
        let (tokens, score) = mask_predict_at_length(model, &e, len, cfg)?;
        let better = match &best {
            None => true,
            Some((bt, bs)) => {
                score > *bs || (score == *bs && tokens.cmp(bt) == std::cmp::Ordering::Less)
            }
        };
        if better {
            best = Some((tokens, score));
        }
    }
    let (tokens, score) = best.expect("length beam nonempty");
    let stripped: Vec<u32> = tokens.into_iter().filter(|&t| t > MASK).collect();
    Ok((stripped, score))
}

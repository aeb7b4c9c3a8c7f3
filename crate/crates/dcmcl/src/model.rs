//! Shared-encoder / dual-decoder transformer with a hybrid fusion head and
//! a length-prediction head.
//!
//! The AR decoder uses a causal self-attention mask; the NAR decoder sees
//! the full (partially masked) target bidirectionally. Both cross-attend to
//! the encoder output. All forwards are recorded on a [`Tape`] so the same
//! code path serves training, decoding, and gradient checking.

use std::collections::HashMap;

use rand::Rng as _;

use crate::error::{DcmclError, Result};
use crate::tensor::{Tape, Tensor, VarId};
use crate::Rng;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const MASK: u32 = 3;
pub const NUM_SPECIALS: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeKind {
    Sinusoidal,
    Learnable,
}

impl std::str::FromStr for PeKind {
    type Err = DcmclError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sinusoidal" => PeKind::Sinusoidal,
            "learnable" => PeKind::Learnable,
            other => return Err(DcmclError::Config(format!("unknown pe kind {other}"))),
        })
    }
}

impl std::fmt::Display for PeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PeKind::Sinusoidal => "sinusoidal",
            PeKind::Learnable => "learnable",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub enc_pe: PeKind,
    pub ar_pe: PeKind,
    pub nar_pe: PeKind,
    pub share_encoder: bool,
    pub hybrid_enabled: bool,
}

impl ModelConfig {
    /// Desk-scale default.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            d_hidden: 128,
            n_heads: 2,
            n_enc_layers: 2,
            n_dec_layers: 2,
            max_len: 32,
            dropout: 0.1,
            enc_pe: PeKind::Sinusoidal,
            ar_pe: PeKind::Sinusoidal,
            nar_pe: PeKind::Learnable,
            share_encoder: true,
            hybrid_enabled: false,
        }
    }

    /// Minimal config for gradient checks: single layer, single head, no
    /// dropout (finite differences need a deterministic forward).
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 8,
            d_hidden: 16,
            n_heads: 1,
            n_enc_layers: 1,
            n_dec_layers: 1,
            max_len: 16,
            dropout: 0.0,
            enc_pe: PeKind::Sinusoidal,
            ar_pe: PeKind::Sinusoidal,
            nar_pe: PeKind::Learnable,
            share_encoder: true,
            hybrid_enabled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(DcmclError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(DcmclError::Config("d_model must be even".into()));
        }
        if self.vocab_size <= NUM_SPECIALS as usize {
            return Err(DcmclError::Config("vocab_size too small".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(DcmclError::Config("dropout outside [0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    /// Second encoder copy when the encoder is not shared.
    EncoderNar,
    ArDecoder,
    NarDecoder,
    Hybrid,
    LengthHead,
}

impl ParamGroup {
    pub fn tag(self) -> u8 {
        match self {
            ParamGroup::Encoder => 0,
            ParamGroup::EncoderNar => 1,
            ParamGroup::ArDecoder => 2,
            ParamGroup::NarDecoder => 3,
            ParamGroup::Hybrid => 4,
            ParamGroup::LengthHead => 5,
        }
    }

    pub fn from_tag(t: u8) -> Result<Self> {
        Ok(match t {
            0 => ParamGroup::Encoder,
            1 => ParamGroup::EncoderNar,
            2 => ParamGroup::ArDecoder,
            3 => ParamGroup::NarDecoder,
            4 => ParamGroup::Hybrid,
            5 => ParamGroup::LengthHead,
            other => return Err(DcmclError::Checkpoint(format!("bad group tag {other}"))),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Ordered, named parameter store. Order is construction order and is part
/// of the determinism contract.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn add(&mut self, name: &str, group: ParamGroup, value: Tensor) {
        assert!(
            self.index.insert(name.to_string(), self.params.len()).is_none(),
            "duplicate parameter {name}"
        );
        self.params.push(Param { name: name.to_string(), group, value });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("no parameter {name}"));
        &self.params[i].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("no parameter {name}"));
        &mut self.params[i].value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }
}

/// Parameter leaves bound onto one tape for a single forward/backward.
pub struct Bound {
    ids: Vec<VarId>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn bind(params: &ParamSet, tape: &mut Tape, trainable: bool) -> Self {
        let ids = params.iter().map(|p| tape.leaf(p.value.clone(), trainable)).collect();
        Bound { ids, index: params.index.clone() }
    }

    /// Reuse externally created leaves (gradient-check harness).
    pub fn from_ids(params: &ParamSet, ids: &[VarId]) -> Self {
        assert_eq!(ids.len(), params.len());
        Bound { ids: ids.to_vec(), index: params.index.clone() }
    }

    pub fn id(&self, name: &str) -> VarId {
        self.ids[*self.index.get(name).unwrap_or_else(|| panic!("no parameter {name}"))]
    }

    pub fn ids(&self) -> &[VarId] {
        &self.ids
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum SelfMask<'a> {
    Causal,
    Full,
    Custom(&'a Tensor),
}

/// Fixed sinusoidal position table: `sin(pos/10000^(2i/d))` in even columns,
/// the matching cosine in odd columns.
pub fn sinusoidal_pe(n_positions: usize, d_model: usize) -> Result<Tensor> {
    if d_model % 2 != 0 {
        return Err(DcmclError::Config("sinusoidal pe needs even d_model".into()));
    }
    let mut data = vec![0.0; n_positions * d_model];
    for pos in 0..n_positions {
        for i in 0..d_model / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            let angle = pos as f64 * freq;
            data[pos * d_model + 2 * i] = angle.sin();
            data[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Ok(Tensor::matrix(n_positions, d_model, data))
}

fn trunc_normal(rng: &mut Rng, std: f64) -> f64 {
    loop {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

fn init_weight(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| trunc_normal(rng, 0.02)).collect();
    Tensor::matrix(rows, cols, data)
}

#[derive(Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    pub fn new(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut p = ParamSet::default();
        let d = cfg.d_model;
        let dh = cfg.d_hidden;
        let v = cfg.vocab_size;

        let add_attn = |p: &mut ParamSet, prefix: &str, g: ParamGroup, rng: &mut Rng| {
            for w in ["wq", "wk", "wv", "wo"] {
                p.add(&format!("{prefix}.{w}"), g, init_weight(rng, d, d));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                p.add(&format!("{prefix}.{b}"), g, Tensor::zeros(vec![d]));
            }
        };
        let add_ln = |p: &mut ParamSet, prefix: &str, g: ParamGroup| {
            p.add(&format!("{prefix}.g"), g, Tensor::new(vec![d], vec![1.0; d]));
            p.add(&format!("{prefix}.b"), g, Tensor::zeros(vec![d]));
        };
        let add_ffn = |p: &mut ParamSet, prefix: &str, g: ParamGroup, rng: &mut Rng| {
            p.add(&format!("{prefix}.w1"), g, init_weight(rng, d, dh));
            p.add(&format!("{prefix}.b1"), g, Tensor::zeros(vec![dh]));
            p.add(&format!("{prefix}.w2"), g, init_weight(rng, dh, d));
            p.add(&format!("{prefix}.b2"), g, Tensor::zeros(vec![d]));
        };

        let enc_prefixes: Vec<(&str, ParamGroup)> = if cfg.share_encoder {
            vec![("enc", ParamGroup::Encoder)]
        } else {
            vec![("enc", ParamGroup::Encoder), ("enc_nar", ParamGroup::EncoderNar)]
        };
        for (prefix, g) in &enc_prefixes {
            p.add(&format!("{prefix}.embed"), *g, init_weight(rng, v, d));
            if cfg.enc_pe == PeKind::Learnable {
                p.add(&format!("{prefix}.pe"), *g, init_weight(rng, cfg.max_len, d));
            }
            for l in 0..cfg.n_enc_layers {
                add_attn(&mut p, &format!("{prefix}.l{l}.attn"), *g, rng);
                add_ln(&mut p, &format!("{prefix}.l{l}.ln1"), *g);
                add_ffn(&mut p, &format!("{prefix}.l{l}.ffn"), *g, rng);
                add_ln(&mut p, &format!("{prefix}.l{l}.ln2"), *g);
            }
        }

        for (prefix, g, pe) in
            [("ar", ParamGroup::ArDecoder, cfg.ar_pe), ("nar", ParamGroup::NarDecoder, cfg.nar_pe)]
        {
            p.add(&format!("{prefix}.embed"), g, init_weight(rng, v, d));
            if pe == PeKind::Learnable {
                p.add(&format!("{prefix}.pe"), g, init_weight(rng, cfg.max_len, d));
            }
            for l in 0..cfg.n_dec_layers {
                add_attn(&mut p, &format!("{prefix}.l{l}.self"), g, rng);
                add_ln(&mut p, &format!("{prefix}.l{l}.ln1"), g);
                add_attn(&mut p, &format!("{prefix}.l{l}.cross"), g, rng);
                add_ln(&mut p, &format!("{prefix}.l{l}.ln2"), g);
                add_ffn(&mut p, &format!("{prefix}.l{l}.ffn"), g, rng);
                add_ln(&mut p, &format!("{prefix}.l{l}.ln3"), g);
            }
            p.add(&format!("{prefix}.out.w"), g, init_weight(rng, d, v));
            p.add(&format!("{prefix}.out.b"), g, Tensor::zeros(vec![v]));
        }

        if cfg.hybrid_enabled {
            p.add("hyb.mlp.w1", ParamGroup::Hybrid, init_weight(rng, 2 * d, d));
            p.add("hyb.mlp.b1", ParamGroup::Hybrid, Tensor::zeros(vec![d]));
            p.add("hyb.mlp.w2", ParamGroup::Hybrid, init_weight(rng, d, d));
            p.add("hyb.mlp.b2", ParamGroup::Hybrid, Tensor::zeros(vec![d]));
            p.add("hyb.out.w", ParamGroup::Hybrid, init_weight(rng, d, v));
            p.add("hyb.out.b", ParamGroup::Hybrid, Tensor::zeros(vec![v]));
        }

        p.add("len.w", ParamGroup::LengthHead, init_weight(rng, d, cfg.max_len));
        p.add("len.b", ParamGroup::LengthHead, Tensor::zeros(vec![cfg.max_len]));

        Ok(Model { cfg, params: p })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound::bind(&self.params, tape, trainable)
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.len() > self.cfg.max_len {
            return Err(DcmclError::TooLong { len: ids.len(), max_len: self.cfg.max_len });
        }
        for (pos, &id) in ids.iter().enumerate() {
            if id as usize >= self.cfg.vocab_size {
                return Err(DcmclError::OutOfVocab { id, position: pos });
            }
        }
        Ok(())
    }

    fn embed_input(
        &self,
        tape: &mut Tape,
        b: &Bound,
        prefix: &str,
        pe: PeKind,
        ids: &[u32],
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<VarId> {
        self.check_ids(ids)?;
        let d = self.cfg.d_model;
        let table = b.id(&format!("{prefix}.embed"));
        let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let emb = tape.select_rows(table, &rows);
        let emb = tape.scale(emb, (d as f64).sqrt());
        let pos = match pe {
            PeKind::Sinusoidal => {
                let full = sinusoidal_pe(ids.len(), d)?;
                tape.constant(full)
            }
            PeKind::Learnable => {
                let table = b.id(&format!("{prefix}.pe"));
                let idx: Vec<usize> = (0..ids.len()).collect();
                tape.select_rows(table, &idx)
            }
        };
        let x = tape.add(emb, pos);
        self.maybe_dropout(tape, x, mode, rng)
    }

    fn maybe_dropout(&self, tape: &mut Tape, x: VarId, mode: Mode, rng: &mut Rng) -> Result<VarId> {
        if mode == Mode::Train && self.cfg.dropout > 0.0 {
            Ok(tape.dropout(x, self.cfg.dropout, rng))
        } else {
            Ok(x)
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn mhsa(
        &self,
        tape: &mut Tape,
        b: &Bound,
        prefix: &str,
        x_q: VarId,
        x_kv: VarId,
        mask: Option<VarId>,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<VarId> {
        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let project = |tape: &mut Tape, x: VarId, w: &str, bias: &str| {
            let wm = tape.matmul(x, b.id(&format!("{prefix}.{w}")));
            tape.add_row(wm, b.id(&format!("{prefix}.{bias}")))
        };
        let q = project(tape, x_q, "wq", "bq");
        let k = project(tape, x_kv, "wk", "bk");
        let v = project(tape, x_kv, "wv", "bv");
        let mut ctx: Option<VarId> = None;
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_nt(qh, kh);
            let mut scores = tape.scale(scores, scale);
            if let Some(m) = mask {
                scores = tape.add(scores, m);
            }
            let p = tape.softmax_rows(scores)?;
            let p = self.maybe_dropout(tape, p, mode, rng)?;
            let ch = tape.matmul(p, vh);
            ctx = Some(match ctx {
                None => ch,
                Some(c) => tape.concat_cols(c, ch),
            });
        }
        let out = project(tape, ctx.unwrap(), "wo", "bo");
        self.maybe_dropout(tape, out, mode, rng)
    }

    fn ffn(
        &self,
        tape: &mut Tape,
        b: &Bound,
        prefix: &str,
        x: VarId,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<VarId> {
        let h = tape.matmul(x, b.id(&format!("{prefix}.w1")));
        let h = tape.add_row(h, b.id(&format!("{prefix}.b1")));
        let h = tape.gelu(h);
        let h = self.maybe_dropout(tape, h, mode, rng)?;
        let o = tape.matmul(h, b.id(&format!("{prefix}.w2")));
        let o = tape.add_row(o, b.id(&format!("{prefix}.b2")));
        self.maybe_dropout(tape, o, mode, rng)
    }

    fn add_norm(
        &self,
        tape: &mut Tape,
        b: &Bound,
        prefix: &str,
        x: VarId,
        sub: VarId,
    ) -> VarId {
        let s = tape.add(x, sub);
        tape.layer_norm(s, b.id(&format!("{prefix}.g")), b.id(&format!("{prefix}.b")))
    }

    /// Encoder stack over the source sentence, using the shared encoder (or
    /// the AR-side copy when the encoder is split).
    pub fn encode(
        &self,
        tape: &mut Tape,
        b: &Bound,
        src: &[u32],
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<VarId> {
        self.encode_with(tape, b, "enc", src, mode, rng)
    }

    /// NAR-side encoder: the shared stack, or the second copy when
    /// `share_encoder` is off.
    pub fn encode_nar(
        &self,
        tape: &mut Tape,
        b: &Bound,
        src: &[u32],
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<VarId> {
        let prefix = if self.cfg.share_encoder { "enc" } else { "enc_nar" };
        self.encode_with(tape, b, prefix, src, mode, rng)
    }

    fn encode_with(
        &self,
        tape: &mut Tape,
        b: &Bound,
        prefix: &str,
        src: &[u32],
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<VarId> {
        let mut x = self.embed_input(tape, b, prefix, self.cfg.enc_pe, src, mode, rng)?;
        for l in 0..self.cfg.n_enc_layers {
            let lp = format!("{prefix}.l{l}");
            let a = self.mhsa(tape, b, &format!("{lp}.attn"), x, x, None, mode, rng)?;
            x = self.add_norm(tape, b, &format!("{lp}.ln1"), x, a);
            let f = self.ffn(tape, b, &format!("{lp}.ffn"), x, mode, rng)?;
            x = self.add_norm(tape, b, &format!("{lp}.ln2"), x, f);
        }
        Ok(x)
    }

    fn causal_mask(n: usize) -> Tensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                data[i * n + j] = f64::NEG_INFINITY;
            }
        }
        Tensor::matrix(n, n, data)
    }

    /// Additive self-attention mask realizing per-position observed
    /// contexts. Position i may also attend to itself so no row is empty.
    pub fn context_attn_mask(contexts: &[Vec<usize>]) -> Tensor {
        let n = contexts.len();
        let mut data = vec![f64::NEG_INFINITY; n * n];
        for (i, ctx) in contexts.iter().enumerate() {
            data[i * n + i] = 0.0;
            for &j in ctx {
                data[i * n + j] = 0.0;
            }
        }
        Tensor::matrix(n, n, data)
    }

    #[allow(clippy::too_many_arguments)]
    fn decoder_stack(
        &self,
        tape: &mut Tape,
        b: &Bound,
        prefix: &str,
        pe: PeKind,
        e: VarId,
        input: &[u32],
        self_mask: SelfMask<'_>,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<VarId> {
        let n = input.len();
        let mask = match self_mask {
            SelfMask::Causal => Some(tape.constant(Self::causal_mask(n))),
            SelfMask::Full => None,
            SelfMask::Custom(m) => Some(tape.constant(m.clone())),
        };
        let mut x = self.embed_input(tape, b, prefix, pe, input, mode, rng)?;
        for l in 0..self.cfg.n_dec_layers {
            let lp = format!("{prefix}.l{l}");
            let a = self.mhsa(tape, b, &format!("{lp}.self"), x, x, mask, mode, rng)?;
            x = self.add_norm(tape, b, &format!("{lp}.ln1"), x, a);
            let c = self.mhsa(tape, b, &format!("{lp}.cross"), x, e, None, mode, rng)?;
            x = self.add_norm(tape, b, &format!("{lp}.ln2"), x, c);
            let f = self.ffn(tape, b, &format!("{lp}.ffn"), x, mode, rng)?;
            x = self.add_norm(tape, b, &format!("{lp}.ln3"), x, f);
        }
        Ok(x)
    }

    /// Teacher-forced AR decoder states; position t depends only on
    /// `y_in[0..=t]` and the encoder output.
    pub fn ar_states(
        &self,
        tape: &mut Tape,
        b: &Bound,
        e: VarId,
        y_in: &[u32],
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<VarId> {
        self.decoder_stack(tape, b, "ar", self.cfg.ar_pe, e, y_in, SelfMask::Causal, mode, rng)
    }

    /// Diagnostic: the AR decoder stack run without its causal mask.
    pub fn ar_states_nocausal(
        &self,
        tape: &mut Tape,
        b: &Bound,
        e: VarId,
        y_in: &[u32],
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<VarId> {
        self.decoder_stack(tape, b, "ar", self.cfg.ar_pe, e, y_in, SelfMask::Full, mode, rng)
    }

    /// Bidirectional NAR decoder states over a partially observed target
    /// (`[M]` ids at masked slots).
    pub fn nar_states(
        &self,
        tape: &mut Tape,
        b: &Bound,
        e: VarId,
        y_obs: &[u32],
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<VarId> {
        self.decoder_stack(tape, b, "nar", self.cfg.nar_pe, e, y_obs, SelfMask::Full, mode, rng)
    }

    /// NAR decoder with a per-position observed-context attention mask.
    pub fn nar_states_masked_attn(
        &self,
        tape: &mut Tape,
        b: &Bound,
        e: VarId,
        y_obs: &[u32],
        attn_mask: &Tensor,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<VarId> {
        self.decoder_stack(
            tape,
            b,
            "nar",
            self.cfg.nar_pe,
            e,
            y_obs,
            SelfMask::Custom(attn_mask),
            mode,
            rng,
        )
    }

    fn head_prefix(&self, head: Head) -> Result<&'static str> {
        Ok(match head {
            Head::Ar => "ar",
            Head::Nar => "nar",
            Head::Hyb => {
                if !self.cfg.hybrid_enabled {
                    return Err(DcmclError::Invalid("hybrid head disabled".into()));
                }
                "hyb"
            }
        })
    }

    pub fn output_logits(&self, tape: &mut Tape, b: &Bound, h: VarId, head: Head) -> Result<VarId> {
        let prefix = self.head_prefix(head)?;
        let l = tape.matmul(h, b.id(&format!("{prefix}.out.w")));
        Ok(tape.add_row(l, b.id(&format!("{prefix}.out.b"))))
    }

    /// Row-stochastic output distribution.
    pub fn output_distribution(
        &self,
        tape: &mut Tape,
        b: &Bound,
        h: VarId,
        head: Head,
    ) -> Result<VarId> {
        let l = self.output_logits(tape, b, h, head)?;
        tape.softmax_rows(l)
    }

    pub fn output_log_probs(
        &self,
        tape: &mut Tape,
        b: &Bound,
        h: VarId,
        head: Head,
    ) -> Result<VarId> {
        let l = self.output_logits(tape, b, h, head)?;
        tape.log_softmax_rows(l)
    }

    /// Per-position fusion of AR and NAR states: concat to 2d, two-layer
    /// MLP with GELU back to d.
    pub fn hybrid_states(
        &self,
        tape: &mut Tape,
        b: &Bound,
        h_ar: VarId,
        h_nar: VarId,
    ) -> Result<VarId> {
        if !self.cfg.hybrid_enabled {
            return Err(DcmclError::Invalid("hybrid head disabled".into()));
        }
        let (sa, sn) = (tape.value(h_ar).shape().to_vec(), tape.value(h_nar).shape().to_vec());
        if sa != sn {
            return Err(DcmclError::Invalid(format!("hybrid shape mismatch {sa:?} vs {sn:?}")));
        }
        let cat = tape.concat_cols(h_ar, h_nar);
        let h = tape.matmul(cat, b.id("hyb.mlp.w1"));
        let h = tape.add_row(h, b.id("hyb.mlp.b1"));
        let h = tape.gelu(h);
        let o = tape.matmul(h, b.id("hyb.mlp.w2"));
        Ok(tape.add_row(o, b.id("hyb.mlp.b2")))
    }

    /// Length logits over 1..max_len from the mean-pooled encoder output.
    pub fn predict_length(&self, tape: &mut Tape, b: &Bound, e: VarId) -> Result<VarId> {
        let pooled = tape.mean_rows(e);
        let l = tape.matmul(pooled, b.id("len.w"));
        Ok(tape.add_row(l, b.id("len.b")))
    }

    /// `<bos>`-shifted decoder input for teacher forcing.
    pub fn ar_input(tgt: &[u32]) -> Vec<u32> {
        let mut v = Vec::with_capacity(tgt.len() + 1);
        v.push(BOS);
        v.extend_from_slice(tgt);
        v
    }

    /// Gold labels: the target followed by `<eos>`.
    pub fn gold(tgt: &[u32]) -> Vec<u32> {
        let mut v = Vec::with_capacity(tgt.len() + 1);
        v.extend_from_slice(tgt);
        v.push(EOS);
        v
    }

    /// NAR decoder input for a mask plan: gold token at observed slots,
    /// `[M]` at masked slots.
    pub fn nar_input(tgt: &[u32], plan: &crate::masking::MaskPlan) -> Vec<u32> {
        let gold = Self::gold(tgt);
        assert_eq!(gold.len(), plan.n_target, "plan length mismatch");
        let mut v = gold;
        for &i in &plan.masked {
            v[i] = MASK;
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Ar,
    Nar,
    Hyb,
}

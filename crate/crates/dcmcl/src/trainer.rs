//! Joint training loop: loss composition per configuration, Adam with
//! warmup/inverse-sqrt schedule and global-norm clipping, validation
//! tracking with best-k checkpoints, and checkpoint averaging.

use std::collections::VecDeque;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;

use crate::checkpoint::{rng_restore, rng_snapshot, Checkpoint, OptimState};
use crate::data::{batch_by_tokens, Batch, ParallelCorpus};
use crate::decoding::{beam_search, mask_predict, DecodeConfig};
use crate::error::{DcmclError, Result};
use crate::losses::{nll_sum, LossBundle};
use crate::masking::{select_confidence, MaskStrategy, SelectStrategy};
use crate::metrics;
use crate::model::{Bound, Head, Mode, Model, ModelConfig};
use crate::tensor::{Tape, VarId};
use crate::Rng;

/// Which direction(s) of the token-level mutual KL push gradients.
/// `Mutual` is the full framework; the one-sided modes drop the other
/// direction; `None` disables the term entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillDirection {
    None,
    NarToAr,
    ArToNar,
    Mutual,
}

impl std::str::FromStr for DistillDirection {
    type Err = DcmclError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => DistillDirection::None,
            "nar2ar" => DistillDirection::NarToAr,
            "ar2nar" => DistillDirection::ArToNar,
            "mutual" => DistillDirection::Mutual,
            other => {
                return Err(DcmclError::Invalid(format!("unknown distill direction {other}")))
            }
        })
    }
}

impl std::fmt::Display for DistillDirection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DistillDirection::None => "none",
            DistillDirection::NarToAr => "nar2ar",
            DistillDirection::ArToNar => "ar2nar",
            DistillDirection::Mutual => "mutual",
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lambda_tml: f64,
    pub lambda_scl: f64,
    /// Train the AR branch (off for the NAR-only baseline).
    pub train_ar: bool,
    /// Train the NAR branch (off for the AR-only baseline).
    pub train_nar: bool,
    pub share_encoder: bool,
    pub use_tml: bool,
    pub use_scl: bool,
    pub use_hybrid: bool,
    /// Train the length-prediction head (needed for NAR decoding).
    pub use_length: bool,
    pub distill_direction: DistillDirection,
    pub mask_strategy: MaskStrategy,
    pub select_strategy: SelectStrategy,
    pub select_fraction: f64,
    pub label_smoothing: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub max_steps: usize,
    /// Validation period in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub batch_tokens: usize,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub keep_best_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_tml: 1.0,
            lambda_scl: 1.0,
            train_ar: true,
            train_nar: true,
            share_encoder: true,
            use_tml: true,
            use_scl: true,
            use_hybrid: false,
            use_length: true,
            distill_direction: DistillDirection::Mutual,
            mask_strategy: MaskStrategy::Cmlm,
            select_strategy: SelectStrategy::All,
            select_fraction: 0.5,
            label_smoothing: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            peak_lr: 5e-4,
            warmup_steps: 400,
            clip_norm: 3.0,
            max_steps: 3000,
            eval_every: 200,
            batch_tokens: 256,
            seed: 1,
            checkpoint_dir: None,
            keep_best_k: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps < 1 {
            return Err(DcmclError::Config("warmup_steps must be >= 1".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(DcmclError::Config("clip_norm must be positive".into()));
        }
        if self.lambda_tml < 0.0 || self.lambda_scl < 0.0 {
            return Err(DcmclError::Config("lambda weights must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(DcmclError::Config("label_smoothing must be in [0,1)".into()));
        }
        if !(self.select_fraction > 0.0 && self.select_fraction <= 1.0) {
            return Err(DcmclError::Config("select_fraction must be in (0,1]".into()));
        }
        if !self.train_ar && !self.train_nar {
            return Err(DcmclError::Config("at least one of train_ar/train_nar".into()));
        }
        let needs_both = (self.use_tml && self.distill_direction != DistillDirection::None)
            || self.use_scl
            || self.use_hybrid;
        if needs_both && !(self.train_ar && self.train_nar) {
            return Err(DcmclError::Config(
                "tml/scl/hybrid terms need both branches enabled".into(),
            ));
        }
        if self.max_steps == 0 || self.batch_tokens == 0 || self.keep_best_k == 0 {
            return Err(DcmclError::Config("max_steps/batch_tokens/keep_best_k must be positive".into()));
        }
        if self.peak_lr <= 0.0 {
            return Err(DcmclError::Config("peak_lr must be positive".into()));
        }
        Ok(())
    }

    fn tml_ar_active(&self) -> bool {
        self.use_tml
            && matches!(self.distill_direction, DistillDirection::Mutual | DistillDirection::NarToAr)
    }

    fn tml_nar_active(&self) -> bool {
        self.use_tml
            && matches!(self.distill_direction, DistillDirection::Mutual | DistillDirection::ArToNar)
    }
}

/// Linear warmup to `peak` over `warmup` steps, then inverse-sqrt decay:
/// `peak * min(step/warmup, sqrt(warmup/step))`.
pub fn lr_at(step: usize, peak: f64, warmup: usize) -> f64 {
    assert!(step >= 1 && warmup >= 1);
    let s = step as f64;
    let w = warmup as f64;
    peak * (s / w).min((w / s).sqrt())
}

/// Tape handles for each loss term of one step, pre-normalization
/// constants already applied. Used by tests to backpropagate individual
/// components.
pub struct LossVars {
    pub ml_ar: Option<VarId>,
    pub ml_nar: Option<VarId>,
    pub ml_hyb: Option<VarId>,
    pub tml_ar: Option<VarId>,
    pub tml_nar: Option<VarId>,
    pub scl_ar: Option<VarId>,
    pub scl_nar: Option<VarId>,
    pub length: Option<VarId>,
    pub total: VarId,
}

#[derive(Debug, Clone)]
pub struct StepStats {
    pub step: usize,
    pub lr: f64,
    /// Global gradient norm after clipping.
    pub grad_norm: f64,
    pub bundle: LossBundle,
}

struct SumAcc {
    var: Option<VarId>,
    n: usize,
}

impl SumAcc {
    fn new() -> Self {
        SumAcc { var: None, n: 0 }
    }

    fn push(&mut self, tape: &mut Tape, v: VarId, n: usize) {
        self.var = Some(match self.var {
            None => v,
            Some(a) => tape.add(a, v),
        });
        self.n += n;
    }

    fn mean(&self, tape: &mut Tape) -> Option<VarId> {
        self.var.map(|v| tape.scale(v, 1.0 / self.n.max(1) as f64))
    }
}

pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub step: usize,
    pub rng: Rng,
    teacher: Option<Model>,
    opt_m: Vec<Vec<f64>>,
    opt_v: Vec<Vec<f64>>,
}

impl Trainer {
    pub fn new(mut model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        model_cfg.share_encoder = cfg.share_encoder;
        model_cfg.hybrid_enabled = cfg.use_hybrid;
        let mut rng = Rng::seed_from_u64(cfg.seed);
        let model = Model::new(model_cfg, &mut rng)?;
        let (m, v) = Self::zero_state(&model);
        Ok(Trainer { model, cfg, step: 0, rng, teacher: None, opt_m: m, opt_v: v })
    }

    fn zero_state(model: &Model) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let m: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        (m.clone(), m)
    }

    /// Use a frozen model's distributions as the TML targets instead of
    /// the live opposite branch.
    pub fn set_frozen_teacher(&mut self, teacher: Model) -> Result<()> {
        if teacher.cfg.vocab_size != self.model.cfg.vocab_size {
            return Err(DcmclError::Config("teacher vocabulary size differs".into()));
        }
        self.teacher = Some(teacher);
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_cfg: self.model.cfg.clone(),
            params: self.model.params.iter().cloned().collect(),
            opt: Some(OptimState {
                step: self.step as u64,
                m: self.opt_m.clone(),
                v: self.opt_v.clone(),
            }),
            rng: rng_snapshot(&self.rng),
        }
    }

    /// Resume training state (parameters, optimizer moments, RNG) from a
    /// checkpoint. The checkpoint's model config wins.
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = ckpt.to_model()?;
        let (mut m, mut v) = Self::zero_state(&model);
        let mut step = 0;
        if let Some(opt) = &ckpt.opt {
            if opt.m.len() != model.params.len() {
                return Err(DcmclError::Checkpoint("optimizer state length mismatch".into()));
            }
            m = opt.m.clone();
            v = opt.v.clone();
            step = opt.step as usize;
        }
        let rng = rng_restore(&ckpt.rng);
        Ok(Trainer { model, cfg, step, rng, teacher: None, opt_m: m, opt_v: v })
    }

    /// One full loss forward for a batch on `tape`. Returns the scalar
    /// component values, their tape handles, and the parameter binding.
    pub fn forward_losses(
        &mut self,
        tape: &mut Tape,
        batch: &Batch,
    ) -> Result<(LossBundle, LossVars, Bound)> {
        let bound = self.model.bind(tape, true);
        let (bundle, vars) = self.forward_losses_with(tape, batch, &bound)?;
        Ok((bundle, vars, bound))
    }

    /// Like [`Self::forward_losses`] but over an externally created
    /// parameter binding (finite-difference harnesses own the leaves).
    pub fn forward_losses_with(
        &mut self,
        tape: &mut Tape,
        batch: &Batch,
        bound: &Bound,
    ) -> Result<(LossBundle, LossVars)> {
        if batch.is_empty() {
            return Err(DcmclError::Invalid("empty batch".into()));
        }
        let cfg = &self.cfg;
        let model = &self.model;
        let rng = &mut self.rng;
        let tbound = self.teacher.as_ref().map(|t| t.bind(tape, false));

        let tml_on = cfg.use_tml && cfg.distill_direction != DistillDirection::None;
        let mut ml_ar_acc = SumAcc::new();
        let mut ml_nar_acc = SumAcc::new();
        let mut ml_hyb_acc = SumAcc::new();
        let mut tml_ar_acc = SumAcc::new();
        let mut tml_nar_acc = SumAcc::new();
        let mut len_acc = SumAcc::new();
        let mut pooled_ar = Vec::new();
        let mut pooled_nar = Vec::new();
        let mut pooled_hyb = Vec::new();

        for i in 0..batch.len() {
            let src = &batch.src[i];
            let tgt = &batch.tgt[i];
            let plan = &batch.plans[i];
            let gold = Model::gold(tgt);
            let n_pos = gold.len();
            let all_pos: Vec<usize> = (0..n_pos).collect();

            let e_ar = if cfg.train_ar {
                Some(model.encode(tape, &bound, src, Mode::Train, rng)?)
            } else {
                None
            };
            let (mut h_ar, mut logits_ar) = (None, None);
            if let Some(e) = e_ar {
                let y_in = Model::ar_input(tgt);
                let h = model.ar_states(tape, &bound, e, &y_in, Mode::Train, rng)?;
                let l = model.output_logits(tape, &bound, h, Head::Ar)?;
                let lp = tape.log_softmax_rows(l)?;
                if let (Some(s), n) = nll_sum(tape, lp, &gold, &all_pos, cfg.label_smoothing) {
                    ml_ar_acc.push(tape, s, n);
                }
                h_ar = Some(h);
                logits_ar = Some(l);
            }

            let (mut h_nar, mut logits_nar) = (None, None);
            if cfg.train_nar {
                let e_nar = if cfg.share_encoder && e_ar.is_some() {
                    e_ar.unwrap()
                } else {
                    model.encode_nar(tape, &bound, src, Mode::Train, rng)?
                };
                let y_obs = Model::nar_input(tgt, plan);
                let h = match &plan.contexts {
                    Some(ctx) => {
                        let mask = Model::context_attn_mask(ctx);
                        model.nar_states_masked_attn(tape, &bound, e_nar, &y_obs, &mask, Mode::Train, rng)?
                    }
                    None => model.nar_states(tape, &bound, e_nar, &y_obs, Mode::Train, rng)?,
                };
                let l = model.output_logits(tape, &bound, h, Head::Nar)?;
                let lp = tape.log_softmax_rows(l)?;
                if let (Some(s), n) = nll_sum(tape, lp, &gold, &plan.masked, cfg.label_smoothing) {
                    ml_nar_acc.push(tape, s, n);
                }
                if cfg.use_length {
                    let len_logits = model.predict_length(tape, &bound, e_nar)?;
                    let len_lp = tape.log_softmax_rows(len_logits)?;
                    let len_gold = [(n_pos - 1) as u32];
                    if let (Some(s), n) = nll_sum(tape, len_lp, &len_gold, &[0], 0.0) {
                        len_acc.push(tape, s, n);
                    }
                }
                h_nar = Some(h);
                logits_nar = Some(l);
            }

            let mut hyb = None;
            // with a frozen teacher, the detached hybrid targets come from
            // the teacher's own hybrid path so they stay constant under
            // parameter perturbations
            let mut teacher_hyb = None;
            if cfg.use_hybrid {
                let h = model.hybrid_states(tape, &bound, h_ar.unwrap(), h_nar.unwrap())?;
                let l = model.output_logits(tape, &bound, h, Head::Hyb)?;
                let lp = tape.log_softmax_rows(l)?;
                if let (Some(s), n) = nll_sum(tape, lp, &gold, &all_pos, cfg.label_smoothing) {
                    ml_hyb_acc.push(tape, s, n);
                }
                hyb = Some((h, l));
                if let (Some(t), Some(tb)) = (&self.teacher, &tbound) {
                    if t.cfg.hybrid_enabled {
                        let te = t.encode(tape, tb, src, Mode::Eval, rng)?;
                        let y_in = Model::ar_input(tgt);
                        let th_ar = t.ar_states(tape, tb, te, &y_in, Mode::Eval, rng)?;
                        let te_nar = if t.cfg.share_encoder {
                            te
                        } else {
                            t.encode_nar(tape, tb, src, Mode::Eval, rng)?
                        };
                        let y_obs = Model::nar_input(tgt, plan);
                        let th_nar = t.nar_states(tape, tb, te_nar, &y_obs, Mode::Eval, rng)?;
                        let th = t.hybrid_states(tape, tb, th_ar, th_nar)?;
                        let tl = t.output_logits(tape, tb, th, Head::Hyb)?;
                        teacher_hyb = Some((th, tl));
                    }
                }
            }

            if tml_on && !plan.mutual.is_empty() {
                let p_ar = tape.softmax_rows(logits_ar.unwrap())?;
                let p_nar = tape.softmax_rows(logits_nar.unwrap())?;
                let conf = |tape: &Tape, p: VarId| -> Vec<f64> {
                    let t = tape.value(p);
                    plan.mutual.iter().map(|&pos| t.data()[pos * t.cols() + gold[pos] as usize]).collect()
                };
                let conf_ar = conf(tape, p_ar);
                let conf_nar = conf(tape, p_nar);
                let selected = select_confidence(
                    plan,
                    &conf_ar,
                    &conf_nar,
                    cfg.select_strategy,
                    cfg.select_fraction,
                    rng,
                );
                if !selected.is_empty() {
                    // teacher side per direction: hybrid states when
                    // enabled, a frozen model when given, else the live
                    // opposite branch; kl_rows detaches it either way
                    let kl_sum = |tape: &mut Tape, p: VarId, q: VarId| -> VarId {
                        let pr = tape.select_rows(p, &selected);
                        let qr = tape.select_rows(q, &selected);
                        let kl = tape.kl_rows(pr, qr, true);
                        tape.sum_all(kl)
                    };
                    let hyb_p = match (&teacher_hyb, &hyb) {
                        (Some((_, tl)), _) => Some(tape.softmax_rows(*tl)?),
                        (None, Some((_, l))) => Some(tape.softmax_rows(*l)?),
                        (None, None) => None,
                    };
                    let teacher_dist = |tape: &mut Tape,
                                        rng: &mut Rng,
                                        head: Head|
                     -> Result<Option<VarId>> {
                        let (t, tb) = match (&self.teacher, &tbound) {
                            (Some(t), Some(tb)) => (t, tb),
                            _ => return Ok(None),
                        };
                        let e = t.encode(tape, tb, src, Mode::Eval, rng)?;
                        let h = match head {
                            Head::Ar => {
                                let y_in = Model::ar_input(tgt);
                                t.ar_states(tape, tb, e, &y_in, Mode::Eval, rng)?
                            }
                            _ => {
                                let y_obs = Model::nar_input(tgt, plan);
                                t.nar_states(tape, tb, e, &y_obs, Mode::Eval, rng)?
                            }
                        };
                        Ok(Some(t.output_distribution(tape, tb, h, head)?))
                    };
                    if cfg.tml_ar_active() {
                        let target = match hyb_p {
                            Some(p) => p,
                            None => teacher_dist(tape, rng, Head::Nar)?.unwrap_or(p_nar),
                        };
                        let s = kl_sum(tape, target, p_ar);
                        tml_ar_acc.push(tape, s, selected.len());
                    }
                    if cfg.tml_nar_active() {
                        let target = match hyb_p {
                            Some(p) => p,
                            None => teacher_dist(tape, rng, Head::Ar)?.unwrap_or(p_ar),
                        };
                        let s = kl_sum(tape, target, p_nar);
                        tml_nar_acc.push(tape, s, selected.len());
                    }
                }
            }

            if cfg.use_scl {
                pooled_ar.push(tape.mean_rows(h_ar.unwrap()));
                pooled_nar.push(tape.mean_rows(h_nar.unwrap()));
                if let Some((th, _)) = teacher_hyb {
                    // teacher states are built from constant leaves
                    pooled_hyb.push(tape.mean_rows(th));
                } else if let Some((h, _)) = hyb {
                    let pooled = tape.mean_rows(h);
                    let detached = tape.constant(tape.value(pooled).clone());
                    pooled_hyb.push(detached);
                }
            }
        }

        let ml_ar = ml_ar_acc.mean(tape);
        let ml_nar = ml_nar_acc.mean(tape);
        let ml_hyb = ml_hyb_acc.mean(tape);
        let tml_ar = tml_ar_acc.mean(tape);
        let tml_nar = tml_nar_acc.mean(tape);
        let length = match len_acc.mean(tape) {
            Some(v) => Some(tape.scale(v, 0.1)),
            None => None,
        };
        let (mut scl_ar, mut scl_nar) = (None, None);
        if cfg.use_scl {
            let (a, n) = if pooled_hyb.is_empty() {
                crate::losses::scl_pair(tape, &pooled_ar, &pooled_nar)?
            } else {
                // hybrid teacher: both branches contrast against the
                // detached hybrid pooling
                let (a, _) = crate::losses::scl_pair(tape, &pooled_ar, &pooled_hyb)?;
                let (n, _) = crate::losses::scl_pair(tape, &pooled_nar, &pooled_hyb)?;
                (a, n)
            };
            scl_ar = Some(a);
            scl_nar = Some(n);
        }

        // weighted tape-level total
        let mut total: Option<VarId> = None;
        let add_term = |tape: &mut Tape, total: &mut Option<VarId>, v: Option<VarId>, w: f64| {
            if let Some(v) = v {
                if w == 0.0 {
                    return;
                }
                let scaled = if w == 1.0 { v } else { tape.scale(v, w) };
                *total = Some(match *total {
                    None => scaled,
                    Some(t) => tape.add(t, scaled),
                });
            }
        };
        add_term(tape, &mut total, ml_ar, 1.0);
        add_term(tape, &mut total, ml_nar, 1.0);
        add_term(tape, &mut total, ml_hyb, 1.0);
        add_term(tape, &mut total, tml_ar, cfg.lambda_tml);
        add_term(tape, &mut total, tml_nar, cfg.lambda_tml);
        add_term(tape, &mut total, scl_ar, cfg.lambda_scl);
        add_term(tape, &mut total, scl_nar, cfg.lambda_scl);
        add_term(tape, &mut total, length, 1.0);
        let total = total.ok_or_else(|| DcmclError::Invalid("no active loss terms".into()))?;

        let val = |tape: &Tape, v: Option<VarId>| v.map(|id| tape.value(id).item());
        let bundle = LossBundle {
            ml_ar: val(tape, ml_ar),
            ml_nar: val(tape, ml_nar),
            ml_hyb: val(tape, ml_hyb),
            tml_ar: val(tape, tml_ar),
            tml_nar: val(tape, tml_nar),
            scl_ar: val(tape, scl_ar),
            scl_nar: val(tape, scl_nar),
            length: val(tape, length),
            lambda_tml: cfg.lambda_tml,
            lambda_scl: cfg.lambda_scl,
            total: tape.value(total).item(),
        };
        let vars =
            LossVars { ml_ar, ml_nar, ml_hyb, tml_ar, tml_nar, scl_ar, scl_nar, length, total };
        Ok((bundle, vars))
    }

    /// One optimization step: forward, backward, global-norm clip, Adam.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepStats> {
        let mut tape = Tape::new();
        let (bundle, vars, bound) = self.forward_losses(&mut tape, batch)?;
        if !bundle.is_finite() {
            eprintln!(
                "non-finite loss at step {} (sentences {:?}): {:?}",
                self.step + 1,
                batch.sentence_ids,
                bundle
            );
            return Err(DcmclError::NonFiniteObjective);
        }
        let grads = tape.backward(vars.total)?;
        let ids = bound.ids().to_vec();
        let mut grad_vecs: Vec<Vec<f64>> = Vec::with_capacity(ids.len());
        let mut sq_sum = 0.0;
        for (k, &id) in ids.iter().enumerate() {
            let g = match grads.get(id) {
                Some(t) => t.data().to_vec(),
                None => vec![0.0; self.opt_m[k].len()],
            };
            sq_sum += g.iter().map(|v| v * v).sum::<f64>();
            grad_vecs.push(g);
        }
        let norm = sq_sum.sqrt();
        let scale = if norm > self.cfg.clip_norm { self.cfg.clip_norm / norm } else { 1.0 };
        let reported = norm.min(self.cfg.clip_norm);

        self.step += 1;
        let lr = lr_at(self.step, self.cfg.peak_lr, self.cfg.warmup_steps);
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, 1e-8);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (k, p) in self.model.params.iter_mut().enumerate() {
            let m = &mut self.opt_m[k];
            let v = &mut self.opt_v[k];
            let data = p.value.data_mut();
            for j in 0..data.len() {
                let g = grad_vecs[k][j] * scale;
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                data[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(StepStats { step: self.step, lr, grad_norm: reported, bundle })
    }

    /// Run the full loop over `train`, optionally evaluating on `valid`
    /// every `eval_every` steps and keeping the best-k checkpoints by
    /// AR+NAR validation BLEU sum. Returns per-step totals and the paths
    /// of the kept checkpoints, best first.
    pub fn train(
        &mut self,
        train: &ParallelCorpus,
        valid: Option<&ParallelCorpus>,
        decode_cfg: &DecodeConfig,
    ) -> Result<TrainOutcome> {
        let mut queue: VecDeque<Batch> = VecDeque::new();
        let mut history = Vec::with_capacity(self.cfg.max_steps);
        let mut best: Vec<(f64, PathBuf)> = Vec::new();
        let mut log = match &self.cfg.checkpoint_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(std::fs::File::create(dir.join("metrics.jsonl"))?)
            }
            None => None,
        };
        let start = self.step;
        while self.step < start + self.cfg.max_steps {
            let mut batch = match queue.pop_front() {
                Some(b) => b,
                None => {
                    queue = batch_by_tokens(train, self.cfg.batch_tokens, &mut self.rng, true)?
                        .into_iter()
                        .collect();
                    queue.pop_front().ok_or_else(|| DcmclError::Invalid("empty corpus".into()))?
                }
            };
            batch.assign_plans(self.cfg.mask_strategy, &mut self.rng)?;
            let stats = self.train_step(&batch)?;
            history.push(stats.bundle.total);
            let due = self.cfg.eval_every > 0 && self.step % self.cfg.eval_every == 0;
            let last = self.step == start + self.cfg.max_steps;
            if (due || last) && valid.is_some() {
                let report = evaluate_model(
                    &self.model,
                    valid.unwrap(),
                    decode_cfg,
                    self.cfg.train_ar,
                    self.cfg.train_nar,
                    self.cfg.seed,
                )?;
                if let Some(f) = log.as_mut() {
                    let line = serde_json::json!({
                        "step": self.step,
                        "lr": stats.lr,
                        "grad_norm": stats.grad_norm,
                        "ml_ar": stats.bundle.ml_ar,
                        "ml_nar": stats.bundle.ml_nar,
                        "ml_hyb": stats.bundle.ml_hyb,
                        "tml_ar": stats.bundle.tml_ar,
                        "tml_nar": stats.bundle.tml_nar,
                        "scl_ar": stats.bundle.scl_ar,
                        "scl_nar": stats.bundle.scl_nar,
                        "length": stats.bundle.length,
                        "total": stats.bundle.total,
                        "bleu_ar": report.bleu_ar,
                        "bleu_nar": report.bleu_nar,
                        "repeat_pct_nar": report.repeat_pct_nar,
                        "hidden_similarity": report.hidden_similarity,
                    });
                    writeln!(f, "{line}")?;
                }
                if let Some(dir) = self.cfg.checkpoint_dir.clone() {
                    let score = report.bleu_ar.unwrap_or(0.0) + report.bleu_nar.unwrap_or(0.0);
                    let path = dir.join(format!("step{}.ckpt", self.step));
                    self.to_checkpoint().save(&path)?;
                    best.push((score, path));
                    best.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
                    while best.len() > self.cfg.keep_best_k {
                        let (_, path) = best.pop().unwrap();
                        let _ = std::fs::remove_file(path);
                    }
                }
            }
        }
        if let Some(dir) = &self.cfg.checkpoint_dir {
            self.to_checkpoint().save(&dir.join("final.ckpt"))?;
        }
        Ok(TrainOutcome { history, best: best.into_iter().map(|(_, p)| p).collect() })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Total loss per step.
    pub history: Vec<f64>,
    /// Best-k checkpoint paths, best first (empty without a checkpoint dir).
    pub best: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub bleu_ar: Option<f64>,
    pub bleu_nar: Option<f64>,
    pub exact_ar: Option<f64>,
    pub exact_nar: Option<f64>,
    pub repeat_pct_ar: Option<f64>,
    pub repeat_pct_nar: Option<f64>,
    pub hidden_similarity: f64,
}

/// Decode every pair of `corpus` with the requested branches and score
/// the hypotheses.
pub fn evaluate_model(
    model: &Model,
    corpus: &ParallelCorpus,
    decode_cfg: &DecodeConfig,
    eval_ar: bool,
    eval_nar: bool,
    seed: u64,
) -> Result<EvalReport> {
    let refs: Vec<Vec<u32>> = corpus.pairs.iter().map(|(_, t)| t.clone()).collect();
    let mut report = EvalReport::default();
    if eval_ar {
        let mut hyps = Vec::with_capacity(corpus.pairs.len());
        for (src, _) in &corpus.pairs {
            hyps.push(beam_search(model, src, decode_cfg)?.0);
        }
        report.bleu_ar = Some(metrics::corpus_bleu(&hyps, &refs, true)?);
        report.exact_ar =
            Some(hyps.iter().zip(&refs).filter(|(h, r)| h == r).count() as f64 / refs.len() as f64);
        report.repeat_pct_ar = Some(metrics::repeated_token_pct(&hyps));
    }
    if eval_nar {
        let mut hyps = Vec::with_capacity(corpus.pairs.len());
        for (src, _) in &corpus.pairs {
            hyps.push(mask_predict(model, src, decode_cfg)?.0);
        }
        report.bleu_nar = Some(metrics::corpus_bleu(&hyps, &refs, true)?);
        report.exact_nar =
            Some(hyps.iter().zip(&refs).filter(|(h, r)| h == r).count() as f64 / refs.len() as f64);
        report.repeat_pct_nar = Some(metrics::repeated_token_pct(&hyps));
    }
    report.hidden_similarity = metrics::hidden_similarity(model, &corpus.pairs, seed)?;
    Ok(report)
}

/// Arithmetic mean of every parameter across checkpoints with identical
/// configs; optimizer state is dropped and the RNG state is taken from
/// the last (newest) checkpoint.
pub fn average_checkpoints(ckpts: &[Checkpoint]) -> Result<Checkpoint> {
    let first = ckpts.first().ok_or_else(|| DcmclError::Invalid("no checkpoints".into()))?;
    for c in &ckpts[1..] {
        if c.model_cfg != first.model_cfg {
            return Err(DcmclError::Checkpoint("config mismatch between checkpoints".into()));
        }
        if c.params.len() != first.params.len() {
            return Err(DcmclError::Checkpoint("parameter count mismatch".into()));
        }
    }
    let mut params = first.params.clone();
    let k = ckpts.len() as f64;
    // Averaging as x_0 + sum(x_i - x_0)/k keeps identical inputs
    // bit-exact (the correction term is exactly zero).
    for (pi, p) in params.iter_mut().enumerate() {
        let data = p.value.data_mut();
        let mut delta = vec![0.0; data.len()];
        for c in &ckpts[1..] {
            let other = &c.params[pi];
            if other.name != p.name || other.value.numel() != data.len() {
                return Err(DcmclError::Checkpoint(format!("parameter mismatch at {}", p.name)));
            }
            for (j, v) in other.value.data().iter().enumerate() {
                delta[j] += v - data[j];
            }
        }
        for (v, d) in data.iter_mut().zip(&delta) {
            *v += d / k;
        }
    }
    Ok(Checkpoint {
        model_cfg: first.model_cfg.clone(),
        params,
        opt: None,
        rng: ckpts.last().unwrap().rng.clone(),
    })
}

/// Path-based variant of [`average_checkpoints`].
pub fn average_checkpoint_files(paths: &[PathBuf]) -> Result<Checkpoint> {
    let ckpts: Vec<Checkpoint> =
        paths.iter().map(|p| Checkpoint::load(Path::new(p))).collect::<Result<_>>()?;
    average_checkpoints(&ckpts)
}

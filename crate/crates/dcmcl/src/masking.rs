//! Mask planning for the NAR side: which target positions are observed,
//! which are masked, and which take part in mutual learning.

use crate::error::{DcmclError, Result};
use crate::Rng;
use rand::seq::SliceRandom;
use rand::Rng as _;

/// Per-sentence partition of target positions. `observed ∪ masked` covers
/// every position; `mutual ⊆ masked` for CMLM plans, all positions for
/// DisCo-style plans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub n_target: usize,
    pub observed: Vec<usize>,
    pub masked: Vec<usize>,
    pub mutual: Vec<usize>,
    /// Per-position observed contexts when the plan is DisCo-style.
    pub contexts: Option<Vec<Vec<usize>>>,
}

impl MaskPlan {
    fn from_masked(n_target: usize, mut masked: Vec<usize>) -> Self {
        masked.sort_unstable();
        let observed: Vec<usize> = (0..n_target).filter(|i| !masked.contains(i)).collect();
        let mutual = masked.clone();
        MaskPlan { n_target, observed, masked, mutual, contexts: None }
    }

    /// True when observed/masked partition {0..n_target-1}.
    pub fn is_partition(&self) -> bool {
        let mut all: Vec<usize> =
            self.observed.iter().chain(self.masked.iter()).copied().collect();
        all.sort_unstable();
        all == (0..self.n_target).collect::<Vec<_>>()
    }
}

/// Masking strategy selector used by training configs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskStrategy {
    Cmlm,
    FixedRatio(f64),
    Disco,
}

/// CMLM masking: draw n uniformly from {1..n_target}, then choose n distinct
/// positions without replacement. Drawing n=0 would mask nothing and leave
/// the NAR loss with empty support, so the draw starts at 1.
pub fn cmlm_mask(n_target: usize, rng: &mut Rng) -> MaskPlan {
    assert!(n_target >= 1);
    let n = rng.gen_range(1..=n_target);
    let mut positions: Vec<usize> = (0..n_target).collect();
    positions.shuffle(rng);
    positions.truncate(n);
    MaskPlan::from_masked(n_target, positions)
}

/// Fixed-ratio masking for the mask-ratio sweep. `ratio = 0` produces the
/// empty plan (the NAR NLL and TML terms then contribute 0 for the
/// sentence).
pub fn fixed_ratio_mask(n_target: usize, ratio: f64, rng: &mut Rng) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(DcmclError::Invalid(format!("mask ratio {ratio} outside [0,1]")));
    }
    assert!(n_target >= 1);
    if ratio == 0.0 {
        return Ok(MaskPlan {
            n_target,
            observed: (0..n_target).collect(),
            masked: vec![],
            mutual: vec![],
            contexts: None,
        });
    }
    let n = ((ratio * n_target as f64).round() as usize).max(1).min(n_target);
    let mut positions: Vec<usize> = (0..n_target).collect();
    positions.shuffle(rng);
    positions.truncate(n);
    Ok(MaskPlan::from_masked(n_target, positions))
}

/// DisCo-style planning: every position gets an independent random observed
/// context drawn from the other positions, and every position takes part in
/// mutual learning.
pub fn disco_contexts(n_target: usize, rng: &mut Rng) -> MaskPlan {
    assert!(n_target >= 1);
    let mut contexts = Vec::with_capacity(n_target);
    for i in 0..n_target {
        let others: Vec<usize> = (0..n_target).filter(|&j| j != i).collect();
        let size = rng.gen_range(0..=others.len());
        let mut ctx = others;
        ctx.shuffle(rng);
        ctx.truncate(size);
        ctx.sort_unstable();
        contexts.push(ctx);
    }
    MaskPlan {
        n_target,
        observed: vec![],
        masked: (0..n_target).collect(),
        mutual: (0..n_target).collect(),
        contexts: Some(contexts),
    }
}

/// Confidence-based reduction of the mutual-learning set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectStrategy {
    All,
    Random,
    /// score = min(ar, nar), keep top fraction
    HighInter,
    /// score = max(ar, nar), keep top fraction
    HighUnion,
    /// score = max(ar, nar), keep bottom fraction
    LowInter,
    /// score = min(ar, nar), keep bottom fraction
    LowUnion,
}

impl std::str::FromStr for SelectStrategy {
    type Err = DcmclError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => SelectStrategy::All,
            "random" => SelectStrategy::Random,
            "high-inter" => SelectStrategy::HighInter,
            "high-union" => SelectStrategy::HighUnion,
            "low-inter" => SelectStrategy::LowInter,
            "low-union" => SelectStrategy::LowUnion,
            other => return Err(DcmclError::Invalid(format!("unknown selection strategy {other}"))),
        })
    }
}

/// Reduce `plan.mutual` by confidence. `conf_ar`/`conf_nar` are the
/// gold-token probabilities aligned with `plan.mutual`. Ties break toward
/// the lower position index so runs are reproducible. Returns exactly
/// `ceil(fraction * |Y_ml|)` positions (or all of them for `All`).
pub fn select_confidence(
    plan: &MaskPlan,
    conf_ar: &[f64],
    conf_nar: &[f64],
    strategy: SelectStrategy,
    fraction: f64,
    rng: &mut Rng,
) -> Vec<usize> {
    let yml = &plan.mutual;
    if yml.is_empty() {
        return vec![];
    }
    assert_eq!(conf_ar.len(), yml.len());
    assert_eq!(conf_nar.len(), yml.len());
    assert!(fraction > 0.0 && fraction <= 1.0, "fraction outside (0,1]");
    if strategy == SelectStrategy::All {
        return yml.clone();
    }
    let k = ((fraction * yml.len() as f64).ceil() as usize).min(yml.len());
    if strategy == SelectStrategy::Random {
        let mut idx: Vec<usize> = (0..yml.len()).collect();
        idx.shuffle(rng);
        idx.truncate(k);
        idx.sort_unstable();
        return idx.into_iter().map(|i| yml[i]).collect();
    }
    let score = |i: usize| -> f64 {
        match strategy {
            SelectStrategy::HighInter | SelectStrategy::LowUnion => conf_ar[i].min(conf_nar[i]),
            SelectStrategy::HighUnion | SelectStrategy::LowInter => conf_ar[i].max(conf_nar[i]),
            _ => unreachable!(),
        }
    };
    let keep_top = matches!(strategy, SelectStrategy::HighInter | SelectStrategy::HighUnion);
    let mut idx: Vec<usize> = (0..yml.len()).collect();
    idx.sort_by(|&a, &b| {
        let (sa, sb) = (score(a), score(b));
        let ord = if keep_top {
            sb.partial_cmp(&sa).unwrap()
        } else {
            sa.partial_cmp(&sb).unwrap()
        };
        ord.then(a.cmp(&b))
    });
    idx.truncate(k);
    idx.sort_unstable();
    idx.into_iter().map(|i| yml[i]).collect()
}

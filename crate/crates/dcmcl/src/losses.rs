//! Training objectives: label-smoothed NLL, two-direction token-level
//! mutual KL, the in-batch sequence contrastive loss, hybrid-teacher
//! variants, and their weighted composition.

use crate::error::{DcmclError, Result};
use crate::tensor::{Tape, VarId};

/// Named scalar loss components for one step. `total` must equal the
/// weighted sum of the present components.
#[derive(Debug, Clone, Default)]
pub struct LossBundle {
    pub ml_ar: Option<f64>,
    pub ml_nar: Option<f64>,
    pub ml_hyb: Option<f64>,
    pub tml_ar: Option<f64>,
    pub tml_nar: Option<f64>,
    pub scl_ar: Option<f64>,
    pub scl_nar: Option<f64>,
    pub length: Option<f64>,
    pub lambda_tml: f64,
    pub lambda_scl: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComposeMode {
    Dcmcl,
    DcmclHyb,
}

impl LossBundle {
    /// Weighted sum of present components. Errors name the missing
    /// component for the requested mode.
    pub fn compose(&mut self, mode: ComposeMode) -> Result<f64> {
        let need = |v: Option<f64>, name: &'static str| v.ok_or(DcmclError::MissingComponent(name));
        let mut total = need(self.ml_ar, "ml_ar")? + need(self.ml_nar, "ml_nar")?;
        if mode == ComposeMode::DcmclHyb {
            total += need(self.ml_hyb, "ml_hyb")?;
        }
        if self.lambda_tml != 0.0 {
            total += self.lambda_tml * (need(self.tml_ar, "tml_ar")? + need(self.tml_nar, "tml_nar")?);
        } else {
            total += self.lambda_tml * (self.tml_ar.unwrap_or(0.0) + self.tml_nar.unwrap_or(0.0));
        }
        if self.lambda_scl != 0.0 {
            total += self.lambda_scl * (need(self.scl_ar, "scl_ar")? + need(self.scl_nar, "scl_nar")?);
        } else {
            total += self.lambda_scl * (self.scl_ar.unwrap_or(0.0) + self.scl_nar.unwrap_or(0.0));
        }
        if let Some(l) = self.length {
            total += l;
        }
        self.total = total;
        Ok(total)
    }

    pub fn is_finite(&self) -> bool {
        [self.ml_ar, self.ml_nar, self.ml_hyb, self.tml_ar, self.tml_nar, self.scl_ar, self.scl_nar, self.length]
            .iter()
            .flatten()
            .all(|v| v.is_finite())
            && self.total.is_finite()
    }
}

/// Sum (not mean) of label-smoothed negative log-likelihood over the
/// selected positions of one sentence, plus the number of positions.
/// Batch-level normalization is the caller's job.
pub fn nll_sum(
    tape: &mut Tape,
    log_probs: VarId,
    gold: &[u32],
    positions: &[usize],
    smoothing: f64,
) -> (Option<VarId>, usize) {
    if positions.is_empty() {
        return (None, 0);
    }
    let vocab = tape.value(log_probs).cols();
    let picks: Vec<(usize, usize)> =
        positions.iter().map(|&i| (i, gold[i] as usize)).collect();
    let picked = tape.pick_entries(log_probs, &picks);
    let sum_gold = tape.sum_all(picked);
    let main = tape.scale(sum_gold, -(1.0 - smoothing));
    let total = if smoothing > 0.0 {
        let rows = tape.select_rows(log_probs, positions);
        let sum_rows = tape.sum_all(rows);
        let smooth = tape.scale(sum_rows, -smoothing / vocab as f64);
        tape.add(main, smooth)
    } else {
        main
    };
    (Some(total), positions.len())
}

/// Mean label-smoothed NLL over the selected positions:
/// `(1-ε)·(-log p(gold)) + ε·mean_v(-log p(v))`. Empty position sets
/// contribute 0 with no gradient.
pub fn nll(
    tape: &mut Tape,
    log_probs: VarId,
    gold: &[u32],
    positions: &[usize],
    smoothing: f64,
) -> VarId {
    match nll_sum(tape, log_probs, gold, positions, smoothing) {
        (Some(s), n) => tape.scale(s, 1.0 / n as f64),
        (None, _) => tape.constant(crate::Tensor::scalar(0.0)),
    }
}

/// Summed two-direction token-level mutual KL over `Y_ml`, teacher side
/// detached in each direction. Returns `(sum_ar, sum_nar, |Y_ml|)`;
/// `tml_ar` treats the NAR distribution as the constant target and vice
/// versa.
pub fn tml_pair_sum(
    tape: &mut Tape,
    p_ar: VarId,
    p_nar: VarId,
    y_ml: &[usize],
) -> (Option<(VarId, VarId)>, usize) {
    if y_ml.is_empty() {
        return (None, 0);
    }
    let par_rows = tape.select_rows(p_ar, y_ml);
    let pnar_rows = tape.select_rows(p_nar, y_ml);
    let kl_ar = tape.kl_rows(pnar_rows, par_rows, true);
    let kl_nar = tape.kl_rows(par_rows, pnar_rows, true);
    let sum_ar = tape.sum_all(kl_ar);
    let sum_nar = tape.sum_all(kl_nar);
    (Some((sum_ar, sum_nar)), y_ml.len())
}

/// Mean two-direction mutual KL for a single sentence.
pub fn tml_pair(tape: &mut Tape, p_ar: VarId, p_nar: VarId, y_ml: &[usize]) -> (VarId, VarId) {
    match tml_pair_sum(tape, p_ar, p_nar, y_ml) {
        (Some((sa, sn)), n) => {
            let inv = 1.0 / n as f64;
            (tape.scale(sa, inv), tape.scale(sn, inv))
        }
        (None, _) => {
            let z1 = tape.constant(crate::Tensor::scalar(0.0));
            let z2 = tape.constant(crate::Tensor::scalar(0.0));
            (z1, z2)
        }
    }
}

/// In-batch contrastive loss over mean-pooled sentence states. `h_ar` and
/// `h_nar` are per-sentence pooled vectors on the same tape; positives are
/// the same index on the other side, negatives the rest of the batch.
/// When `detach_targets` is set the opposite side's embeddings are treated
/// as constants (hybrid-teacher mode).
pub fn scl_pair(
    tape: &mut Tape,
    h_ar: &[VarId],
    h_nar: &[VarId],
) -> Result<(VarId, VarId)> {
    let b = h_ar.len();
    if b == 0 || h_nar.len() != b {
        return Err(DcmclError::Invalid("scl_pair needs equal nonempty batches".into()));
    }
    let direction = |tape: &mut Tape, anchors: &[VarId], others: &[VarId]| -> Result<VarId> {
        let mut acc: Option<VarId> = None;
        for bi in 0..b {
            let sims: Vec<VarId> =
                (0..b).map(|i| tape.cosine_sim(anchors[bi], others[i])).collect();
            let row = tape.stack_scalars(&sims);
            let lsm = tape.log_softmax_rows(row)?;
            let picked = tape.pick_entries(lsm, &[(0, bi)]);
            let neg = tape.scale(picked, -1.0);
            let s = tape.sum_all(neg);
            acc = Some(match acc {
                None => s,
                Some(a) => tape.add(a, s),
            });
        }
        Ok(tape.scale(acc.unwrap(), 1.0 / b as f64))
    };
    let scl_ar = direction(tape, h_ar, h_nar)?;
    let scl_nar = direction(tape, h_nar, h_ar)?;
    Ok((scl_ar, scl_nar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tensor};
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_dist(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let raw: Vec<f64> = (0..cols).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            data.extend(raw.iter().map(|v| v / s));
        }
        Tensor::matrix(rows, cols, data)
    }

    fn log_of(t: &Tensor) -> Tensor {
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.ln()).collect())
    }

    #[test]
    fn nll_perfect_and_uniform() {
        let mut tape = Tape::new();
        // near one-hot rows, eps = 0
        let p = Tensor::matrix(1, 4, vec![1.0 - 3e-12, 1e-12, 1e-12, 1e-12]);
        let lp = tape.leaf(log_of(&p), false);
        let l = nll(&mut tape, lp, &[0], &[0], 0.0);
        assert!(tape.value(l).item().abs() < 1e-9);

        let mut tape = Tape::new();
        let u = Tensor::matrix(2, 4, vec![0.25; 8]);
        let lp = tape.leaf(log_of(&u), false);
        let l = nll(&mut tape, lp, &[1, 2], &[0, 1], 0.0);
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_matches_direct_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = rand_dist(&mut rng, 5, 6);
        let gold = [2u32, 0, 5, 1, 3];
        let positions = [0usize, 2, 4];
        let eps = 0.1;
        // independent direct summation
        let mut expect = 0.0;
        for &i in &positions {
            let row = &p.data()[i * 6..(i + 1) * 6];
            let mut smooth = 0.0;
            for &v in row {
                smooth += -v.ln();
            }
            expect += (1.0 - eps) * (-row[gold[i] as usize].ln()) + eps * smooth / 6.0;
        }
        expect /= positions.len() as f64;
        let mut tape = Tape::new();
        let lp = tape.leaf(log_of(&p), false);
        let l = nll(&mut tape, lp, &gold, &positions, eps);
        assert!((tape.value(l).item() - expect).abs() < 1e-10);
    }

    #[test]
    fn nll_empty_positions_zero() {
        let mut tape = Tape::new();
        let lp = tape.leaf(Tensor::matrix(2, 3, vec![-1.0; 6]), false);
        let l = nll(&mut tape, lp, &[0, 1], &[], 0.1);
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn nll_eps_zero_is_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let p = rand_dist(&mut rng, 3, 5);
        let gold = [1u32, 4, 0];
        let mut tape = Tape::new();
        let lp = tape.leaf(log_of(&p), false);
        let l = nll(&mut tape, lp, &gold, &[0, 1, 2], 0.0);
        let expect: f64 = (0..3).map(|i| -p.data()[i * 5 + gold[i] as usize].ln()).sum::<f64>() / 3.0;
        assert!((tape.value(l).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn tml_identity_and_analytic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = rand_dist(&mut rng, 3, 4);
        let mut tape = Tape::new();
        let pa = tape.leaf(p.clone(), false);
        let pn = tape.leaf(p, false);
        let (ta, tn) = tml_pair(&mut tape, pa, pn, &[0, 1, 2]);
        assert!(tape.value(ta).item().abs() < 1e-12);
        assert!(tape.value(tn).item().abs() < 1e-12);

        // single position, p_nar = [1,0], p_ar = [.5,.5] -> tml_ar = ln 2
        let mut tape = Tape::new();
        let pa = tape.leaf(Tensor::matrix(1, 2, vec![0.5, 0.5]), false);
        let pn = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 0.0]), false);
        let (ta, _) = tml_pair(&mut tape, pa, pn, &[0]);
        assert!((tape.value(ta).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn tml_matches_kl_rows_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pa = rand_dist(&mut rng, 5, 6);
        let pn = rand_dist(&mut rng, 5, 6);
        let yml = [1usize, 3, 4];
        // oracle: average per-row direct KL over Y_ml
        let kl = |p: &Tensor, q: &Tensor, row: usize| -> f64 {
            (0..6)
                .map(|j| {
                    let pv = p.data()[row * 6 + j];
                    pv * (pv / q.data()[row * 6 + j]).ln()
                })
                .sum()
        };
        let want_ar: f64 = yml.iter().map(|&i| kl(&pn, &pa, i)).sum::<f64>() / 3.0;
        let want_nar: f64 = yml.iter().map(|&i| kl(&pa, &pn, i)).sum::<f64>() / 3.0;
        let mut tape = Tape::new();
        let a = tape.leaf(pa, false);
        let n = tape.leaf(pn, false);
        let (ta, tn) = tml_pair(&mut tape, a, n, &yml);
        assert!((tape.value(ta).item() - want_ar).abs() < 1e-10);
        assert!((tape.value(tn).item() - want_nar).abs() < 1e-10);
    }

    #[test]
    fn tml_detaches_teacher() {
        // gradient of tml_ar must not reach p_nar, and vice versa
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pa = rand_dist(&mut rng, 2, 3);
        let pn = rand_dist(&mut rng, 2, 3);
        let mut tape = Tape::new();
        let a = tape.leaf(pa, true);
        let n = tape.leaf(pn, true);
        let (ta, _) = tml_pair(&mut tape, a, n, &[0, 1]);
        let grads = tape.backward(ta).unwrap();
        assert!(grads.get(a).is_some());
        assert!(grads.get(n).is_none(), "teacher side must receive no gradient");
    }

    #[test]
    fn scl_single_pair_zero() {
        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), false);
        let v = tape.leaf(Tensor::vector(vec![0.5, -1.0, 2.0]), false);
        let (a, n) = scl_pair(&mut tape, &[u], &[v]).unwrap();
        assert!(tape.value(a).item().abs() < 1e-12);
        assert!(tape.value(n).item().abs() < 1e-12);
    }

    #[test]
    fn scl_coincident_embeddings_ln_b() {
        // all 2B embeddings equal: every similarity is 1, softmax uniform,
        // loss = ln B
        for b in [2usize, 3, 5] {
            let mut tape = Tape::new();
            let ids: Vec<VarId> =
                (0..b).map(|_| tape.leaf(Tensor::vector(vec![0.3, -0.7, 1.1]), false)).collect();
            let (a, n) = scl_pair(&mut tape, &ids, &ids).unwrap();
            assert!((tape.value(a).item() - (b as f64).ln()).abs() < 1e-9);
            assert!((tape.value(n).item() - (b as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn scl_matches_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = 3;
        let d = 4;
        let ar: Vec<Vec<f64>> =
            (0..b).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let nar: Vec<Vec<f64>> =
            (0..b).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let cos = |u: &[f64], v: &[f64]| {
            let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
            let nu: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nv: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (nu * nv + 1e-12)
        };
        // direct enumeration
        let mut want_ar = 0.0;
        for bi in 0..b {
            let num = cos(&ar[bi], &nar[bi]).exp();
            let den: f64 = (0..b).map(|i| cos(&ar[bi], &nar[i]).exp()).sum();
            want_ar += -(num / den).ln();
        }
        want_ar /= b as f64;
        let mut want_nar = 0.0;
        for bi in 0..b {
            let num = cos(&nar[bi], &ar[bi]).exp();
            let den: f64 = (0..b).map(|i| cos(&nar[bi], &ar[i]).exp()).sum();
            want_nar += -(num / den).ln();
        }
        want_nar /= b as f64;

        let mut tape = Tape::new();
        let ar_ids: Vec<VarId> =
            ar.iter().map(|v| tape.leaf(Tensor::vector(v.clone()), false)).collect();
        let nar_ids: Vec<VarId> =
            nar.iter().map(|v| tape.leaf(Tensor::vector(v.clone()), false)).collect();
        let (a, n) = scl_pair(&mut tape, &ar_ids, &nar_ids).unwrap();
        assert!((tape.value(a).item() - want_ar).abs() < 1e-10);
        assert!((tape.value(n).item() - want_nar).abs() < 1e-10);
    }

    #[test]
    fn scl_nonnegative_and_grad_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let leaves: Vec<Tensor> = (0..6)
            .map(|_| Tensor::vector((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let err = grad_check(
            |tape, ids| {
                let (a, n) = scl_pair(tape, &ids[0..3], &ids[3..6])?;
                Ok(tape.add(a, n))
            },
            &leaves,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn compose_modes() {
        let mut b = LossBundle {
            ml_ar: Some(1.0),
            ml_nar: Some(1.0),
            tml_ar: Some(1.0),
            tml_nar: Some(1.0),
            scl_ar: Some(1.0),
            scl_nar: Some(1.0),
            lambda_tml: 1.0,
            lambda_scl: 1.0,
            ..Default::default()
        };
        assert_eq!(b.compose(ComposeMode::Dcmcl).unwrap(), 6.0);

        // lambda = 0 reduces to the multi-task sum even with components absent
        let mut b0 = LossBundle {
            ml_ar: Some(0.7),
            ml_nar: Some(0.3),
            lambda_tml: 0.0,
            lambda_scl: 0.0,
            ..Default::default()
        };
        assert_eq!(b0.compose(ComposeMode::Dcmcl).unwrap(), 1.0);

        // random components, hand sum
        let mut br = LossBundle {
            ml_ar: Some(0.11),
            ml_nar: Some(0.23),
            tml_ar: Some(0.31),
            tml_nar: Some(0.41),
            scl_ar: Some(0.53),
            scl_nar: Some(0.61),
            lambda_tml: 0.5,
            lambda_scl: 1.0,
            ..Default::default()
        };
        let want = (0.11 + 0.23) + 0.5 * (0.31 + 0.41) + 1.0 * (0.53 + 0.61);
        assert!((br.compose(ComposeMode::Dcmcl).unwrap() - want).abs() < 1e-12);

        // missing component named
        let mut bm = LossBundle {
            ml_ar: Some(1.0),
            ml_nar: Some(1.0),
            lambda_tml: 1.0,
            ..Default::default()
        };
        match bm.compose(ComposeMode::Dcmcl) {
            Err(DcmclError::MissingComponent(name)) => assert_eq!(name, "tml_ar"),
            other => panic!("expected missing component, got {other:?}"),
        }

        // hybrid mode requires ml_hyb
        let mut bh = LossBundle {
            ml_ar: Some(1.0),
            ml_nar: Some(1.0),
            lambda_tml: 0.0,
            lambda_scl: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            bh.compose(ComposeMode::DcmclHyb),
            Err(DcmclError::MissingComponent("ml_hyb"))
        ));
    }

    #[test]
    fn compose_linear_in_components() {
        let base = LossBundle {
            ml_ar: Some(0.2),
            ml_nar: Some(0.4),
            tml_ar: Some(0.6),
            tml_nar: Some(0.8),
            scl_ar: Some(1.0),
            scl_nar: Some(1.2),
            lambda_tml: 0.7,
            lambda_scl: 0.3,
            ..Default::default()
        };
        let mut b1 = base.clone();
        let t1 = b1.compose(ComposeMode::Dcmcl).unwrap();
        // scaling one component scales its contribution linearly
        let mut b2 = base.clone();
        b2.tml_ar = Some(1.2);
        let t2 = b2.compose(ComposeMode::Dcmcl).unwrap();
        assert!((t2 - t1 - 0.7 * 0.6).abs() < 1e-12);
    }
}

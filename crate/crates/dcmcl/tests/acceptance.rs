//! End-to-end acceptance suite. Each test prints a single `PASS`/`FAIL`
//! line for its criterion and then asserts it. Criteria 5-8 share one
//! lazily trained ensemble (four training variants, five seeds each) over
//! the synthetic lexicon task.

use std::sync::OnceLock;
use std::time::Instant;

use rand::SeedableRng;

use dcmcl::checkpoint::Checkpoint;
use dcmcl::data::{batch_by_tokens, gen_synthetic, ParallelCorpus, Task};
use dcmcl::decoding::{remask_count, DecodeConfig};
use dcmcl::losses::{nll_sum, scl_pair};
use dcmcl::masking::{select_confidence, MaskPlan, MaskStrategy, SelectStrategy};
use dcmcl::metrics::{corpus_bleu, hidden_similarity, repeated_token_pct};
use dcmcl::model::{Bound, Mode, Model, ModelConfig, ParamGroup};
use dcmcl::tensor::{grad_check, Tape, Tensor, VarId};
use dcmcl::trainer::{average_checkpoints, evaluate_model, lr_at, TrainConfig, Trainer};
use dcmcl::Rng;

fn report(name: &str, pass: bool) {
    println!("acceptance criterion {name}: {}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {name} failed");
}

fn bits(xs: &[f64]) -> Vec<u64> {
    xs.iter().map(|v| v.to_bits()).collect()
}

// ---------------------------------------------------------------------
// criterion 1: finite-difference gradient checks, every loss component

const FD_EPS: f64 = 1e-3;
const FD_TOL: f64 = 1e-3;

fn component_errors(use_hybrid: bool, picks: &[&str]) -> Vec<(String, f64)> {
    let mut cfg = TrainConfig::default();
    cfg.seed = 3;
    cfg.batch_tokens = 64;
    cfg.use_hybrid = use_hybrid;
    let mut trainer = Trainer::new(ModelConfig::tiny(8), cfg).unwrap();
    // freeze the detached targets (mutual-KL teachers, hybrid poolings) at
    // the base point so finite differences see the same stop-gradient
    // semantics as the analytic gradient
    trainer.set_frozen_teacher(trainer.model.clone()).unwrap();
    let mut rng = Rng::seed_from_u64(3);
    let corpus = gen_synthetic(Task::Copy, 2, 8, (2, 4), 16, &mut rng).unwrap();
    let mut batches = batch_by_tokens(&corpus, 64, &mut trainer.rng, false).unwrap();
    let batch = &mut batches[0];
    batch.assign_plans(MaskStrategy::Cmlm, &mut trainer.rng).unwrap();
    assert_eq!(batch.len(), 2);
    let leaves: Vec<Tensor> = trainer.model.params.iter().map(|p| p.value.clone()).collect();
    let mut out = Vec::new();
    for &pick in picks {
        let err = grad_check(
            |tape, ids| {
                let bound = Bound::from_ids(&trainer.model.params, ids);
                let (_, vars) = trainer.forward_losses_with(tape, batch, &bound)?;
                Ok(match pick {
                    "ml_ar" => vars.ml_ar.unwrap(),
                    "ml_nar" => vars.ml_nar.unwrap(),
                    "ml_hyb" => vars.ml_hyb.unwrap(),
                    "tml_ar" => vars.tml_ar.unwrap(),
                    "tml_nar" => vars.tml_nar.unwrap(),
                    "scl_ar" => vars.scl_ar.unwrap(),
                    "scl_nar" => vars.scl_nar.unwrap(),
                    "length" => vars.length.unwrap(),
                    "total" => vars.total,
                    other => panic!("unknown component {other}"),
                })
            },
            &leaves,
            FD_EPS,
        )
        .unwrap();
        out.push((pick.to_string(), err));
    }
    out
}

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let mut errs = component_errors(
        false,
        &["ml_ar", "ml_nar", "tml_ar", "tml_nar", "scl_ar", "scl_nar", "length", "total"],
    );
    errs.extend(component_errors(true, &["ml_hyb", "total"]));
    let elapsed = start.elapsed().as_secs_f64();
    let mut pass = elapsed < 60.0;
    for (name, err) in &errs {
        println!("  gradient {name}: max rel err {err:.3e}");
        pass &= *err < FD_TOL;
    }
    println!("  gradient suite elapsed {elapsed:.1}s");
    report("1 (gradient checks on every loss component)", pass);
}

// ---------------------------------------------------------------------
// criterion 2: exact structural invariants

fn ar_rows(model: &Model, src: &[u32], tgt: &[u32], seed: u64) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let mut rng = Rng::seed_from_u64(seed);
    let e = model.encode(&mut tape, &bound, src, Mode::Eval, &mut rng).unwrap();
    let y_in = Model::ar_input(tgt);
    let h = model.ar_states(&mut tape, &bound, e, &y_in, Mode::Eval, &mut rng).unwrap();
    let t = tape.value(h);
    (0..t.rows()).map(|i| t.data()[i * t.cols()..(i + 1) * t.cols()].to_vec()).collect()
}

fn nar_rows(model: &Model, src: &[u32], tgt: &[u32], plan: &MaskPlan, seed: u64) -> Vec<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let mut rng = Rng::seed_from_u64(seed);
    let e = model.encode_nar(&mut tape, &bound, src, Mode::Eval, &mut rng).unwrap();
    let y_obs = Model::nar_input(tgt, plan);
    let h = model.nar_states(&mut tape, &bound, e, &y_obs, Mode::Eval, &mut rng).unwrap();
    tape.value(h).data().to_vec()
}

/// Gradients of `root` grouped per parameter: `None` when the tape never
/// touched the parameter.
fn group_grads(trainer: &mut Trainer, root: &str) -> Vec<(ParamGroup, Option<Vec<f64>>)> {
    let mut rng = Rng::seed_from_u64(9);
    let corpus = gen_synthetic(Task::Copy, 2, 8, (2, 4), 16, &mut rng).unwrap();
    let mut batches = batch_by_tokens(&corpus, 64, &mut trainer.rng, false).unwrap();
    let batch = &mut batches[0];
    batch.assign_plans(MaskStrategy::Cmlm, &mut trainer.rng).unwrap();
    let mut tape = Tape::new();
    let (_, vars, bound) = trainer.forward_losses(&mut tape, batch).unwrap();
    let target = match root {
        "total" => vars.total,
        "tml_ar" => vars.tml_ar.unwrap(),
        "tml_nar" => vars.tml_nar.unwrap(),
        other => panic!("unknown root {other}"),
    };
    let grads = tape.backward(target).unwrap();
    trainer
        .model
        .params
        .iter()
        .zip(bound.ids())
        .map(|(p, &id)| (p.group, grads.get(id).map(|t| t.data().to_vec())))
        .collect()
}

fn all_absent_or_zero(gg: &[(ParamGroup, Option<Vec<f64>>)], groups: &[ParamGroup]) -> bool {
    gg.iter().filter(|(g, _)| groups.contains(g)).all(|(_, grad)| match grad {
        None => true,
        Some(v) => v.iter().all(|&x| x == 0.0),
    })
}

fn some_nonzero(gg: &[(ParamGroup, Option<Vec<f64>>)], group: ParamGroup) -> bool {
    gg.iter()
        .filter(|(g, _)| *g == group)
        .any(|(_, grad)| grad.as_ref().is_some_and(|v| v.iter().any(|&x| x != 0.0)))
}

#[test]
fn criterion_2_exact_invariants() {
    let mut pass = true;

    // causal masking: AR state rows before a target edit are bit-identical
    let mut rng = Rng::seed_from_u64(4);
    let mut cfg = ModelConfig::tiny(12);
    cfg.share_encoder = false;
    let model = Model::new(cfg, &mut rng).unwrap();
    let src = [4u32, 5, 6, 7];
    let tgt_a = [5u32, 6, 7, 8];
    let mut tgt_b = tgt_a;
    tgt_b[2] = 9;
    let rows_a = ar_rows(&model, &src, &tgt_a, 21);
    let rows_b = ar_rows(&model, &src, &tgt_b, 21);
    // editing tgt[2] first reaches the decoder input at position 3
    for i in 0..=2 {
        pass &= bits(&rows_a[i]) == bits(&rows_b[i]);
    }
    pass &= bits(&rows_a[3]) != bits(&rows_b[3]);

    // NAR input independence: edits under masked slots cannot change the
    // states; edits under observed slots must
    let plan = MaskPlan {
        n_target: 5,
        observed: vec![0, 2, 4],
        masked: vec![1, 3],
        mutual: vec![1, 3],
        contexts: None,
    };
    let mut tgt_c = tgt_a;
    tgt_c[1] = 10;
    tgt_c[3] = 11;
    pass &= Model::nar_input(&tgt_a, &plan) == Model::nar_input(&tgt_c, &plan);
    pass &= bits(&nar_rows(&model, &src, &tgt_a, &plan, 22))
        == bits(&nar_rows(&model, &src, &tgt_c, &plan, 22));
    let mut tgt_d = tgt_a;
    tgt_d[0] = 10;
    pass &= bits(&nar_rows(&model, &src, &tgt_a, &plan, 22))
        != bits(&nar_rows(&model, &src, &tgt_d, &plan, 22));

    // parameter partition: a one-branch objective leaves the other
    // branch's parameter groups with exactly zero gradient
    let base = || {
        let mut c = TrainConfig::default();
        c.seed = 9;
        c.share_encoder = false;
        c.use_tml = false;
        c.use_scl = false;
        c.use_length = false;
        c
    };
    let mut ar_cfg = base();
    ar_cfg.train_nar = false;
    let mut t = Trainer::new(ModelConfig::tiny(8), ar_cfg).unwrap();
    let gg = group_grads(&mut t, "total");
    pass &= all_absent_or_zero(
        &gg,
        &[ParamGroup::EncoderNar, ParamGroup::NarDecoder, ParamGroup::LengthHead],
    );
    pass &= some_nonzero(&gg, ParamGroup::Encoder) && some_nonzero(&gg, ParamGroup::ArDecoder);

    let mut nar_cfg = base();
    nar_cfg.train_ar = false;
    nar_cfg.use_length = true;
    let mut t = Trainer::new(ModelConfig::tiny(8), nar_cfg).unwrap();
    let gg = group_grads(&mut t, "total");
    pass &= all_absent_or_zero(&gg, &[ParamGroup::Encoder, ParamGroup::ArDecoder]);
    pass &= some_nonzero(&gg, ParamGroup::EncoderNar)
        && some_nonzero(&gg, ParamGroup::NarDecoder)
        && some_nonzero(&gg, ParamGroup::LengthHead);

    // mutual-KL stop gradient: the teacher-side branch receives nothing
    let mut tml_cfg = base();
    tml_cfg.use_tml = true;
    let mut t = Trainer::new(ModelConfig::tiny(8), tml_cfg.clone()).unwrap();
    let gg = group_grads(&mut t, "tml_ar");
    pass &= all_absent_or_zero(&gg, &[ParamGroup::EncoderNar, ParamGroup::NarDecoder]);
    pass &= some_nonzero(&gg, ParamGroup::ArDecoder);
    let mut t = Trainer::new(ModelConfig::tiny(8), tml_cfg).unwrap();
    let gg = group_grads(&mut t, "tml_nar");
    pass &= all_absent_or_zero(&gg, &[ParamGroup::Encoder, ParamGroup::ArDecoder]);
    pass &= some_nonzero(&gg, ParamGroup::NarDecoder);

    report("2 (exact structural invariants)", pass);
}

// ---------------------------------------------------------------------
// criterion 3: analytic identities

#[test]
fn criterion_3_analytic_identities() {
    let tol = 1e-9;
    let mut pass = true;

    // KL of a distribution against itself is zero
    let mut tape = Tape::new();
    let p = Tensor::matrix(2, 4, vec![0.1, 0.2, 0.3, 0.4, 0.25, 0.25, 0.25, 0.25]);
    let pv = tape.leaf(p, true);
    let kl = tape.kl_rows(pv, pv, true);
    let s = tape.sum_all(kl);
    pass &= tape.value(s).item().abs() < tol;

    // contrastive loss: a batch of one is exactly zero
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::matrix(1, 3, vec![0.3, -0.4, 0.9]), true);
    let b = tape.leaf(Tensor::matrix(1, 3, vec![-0.2, 0.8, 0.1]), true);
    let (sa, sn) = scl_pair(&mut tape, &[a], &[b]).unwrap();
    pass &= tape.value(sa).item().abs() < tol && tape.value(sn).item().abs() < tol;

    // contrastive loss: coincident embeddings give exactly ln(batch)
    let mut tape = Tape::new();
    let u: Vec<VarId> =
        (0..3).map(|_| tape.leaf(Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]), true)).collect();
    let (sa, sn) = scl_pair(&mut tape, &u, &u).unwrap();
    pass &= (tape.value(sa).item() - 3f64.ln()).abs() < tol;
    pass &= (tape.value(sn).item() - 3f64.ln()).abs() < tol;

    // label loss under a uniform predictive distribution is ln |V|
    let mut tape = Tape::new();
    let v = 8usize;
    let lp = tape.leaf(Tensor::matrix(3, v, vec![(1.0 / v as f64).ln(); 3 * v]), true);
    let (sum, n) = nll_sum(&mut tape, lp, &[4, 5, 6], &[0, 1, 2], 0.0);
    let mean = tape.value(sum.unwrap()).item() / n as f64;
    pass &= (mean - (v as f64).ln()).abs() < tol;

    // schedule junctions
    pass &= (lr_at(400, 3e-3, 400) - 3e-3).abs() < tol;
    pass &= (lr_at(1, 3e-3, 400) - 3e-3 / 400.0).abs() < tol;
    pass &= (lr_at(1600, 3e-3, 400) - 1.5e-3).abs() < tol;

    // re-masking schedule
    for t in 1..=10 {
        pass &= remask_count(10, 10, t).unwrap() == 10 - t;
    }
    pass &= remask_count(7, 3, 1).unwrap() == 4;
    pass &= remask_count(7, 3, 2).unwrap() == 2;
    pass &= remask_count(7, 3, 3).unwrap() == 0;

    report("3 (analytic identities)", pass);
}

// ---------------------------------------------------------------------
// criterion 4: hand-enumerated oracles

#[test]
fn criterion_4_oracle_equivalence() {
    let mut pass = true;

    // confidence selection on a fully hand-enumerated 4-token case
    let plan = MaskPlan {
        n_target: 4,
        observed: vec![],
        masked: vec![0, 1, 2, 3],
        mutual: vec![0, 1, 2, 3],
        contexts: None,
    };
    let ar = [0.9, 0.1, 0.5, 0.4];
    let nar = [0.8, 0.2, 0.3, 0.6];
    let mut rng = Rng::seed_from_u64(0);
    // min scores [.8,.1,.3,.4]: top half {0,3}, bottom half {1,2}
    // max scores [.9,.2,.5,.6]: top half {0,3}, bottom half {1,2}
    let sel = |s: SelectStrategy, rng: &mut Rng| select_confidence(&plan, &ar, &nar, s, 0.5, rng);
    pass &= sel(SelectStrategy::HighInter, &mut rng) == vec![0, 3];
    pass &= sel(SelectStrategy::LowUnion, &mut rng) == vec![1, 2];
    pass &= sel(SelectStrategy::HighUnion, &mut rng) == vec![0, 3];
    pass &= sel(SelectStrategy::LowInter, &mut rng) == vec![1, 2];
    pass &= sel(SelectStrategy::All, &mut rng) == vec![0, 1, 2, 3];

    // brevity-penalty oracle: unigram..4-gram precisions are all 1 and
    // the score reduces to 100 * exp(1 - 5/4)
    let hyp = vec![vec![1u32, 2, 3, 4]];
    let refs = vec![vec![1u32, 2, 3, 4, 5]];
    let b = corpus_bleu(&hyp, &refs, false).unwrap();
    pass &= (b - 77.88).abs() < 0.01;
    pass &= (b - 100.0 * (1.0f64 - 5.0 / 4.0).exp()).abs() < 1e-9;

    // repetition counts are exact rational numbers
    pass &= repeated_token_pct::<u32>(&[vec![1, 1, 2], vec![3, 4]]) == 20.0;
    pass &= repeated_token_pct::<u32>(&[vec![1, 2, 3]]) == 0.0;
    pass &= repeated_token_pct::<u32>(&[vec![7, 7, 7, 7]]) == 75.0;

    report("4 (hand-enumerated oracles)", pass);
}

// ---------------------------------------------------------------------
// shared ensemble for criteria 5-8

const ENSEMBLE_SEEDS: [u64; 5] = [11, 12, 13, 14, 15];
const ENSEMBLE_BATCH_TOKENS: usize = 128;
const ENSEMBLE_PEAK_LR: f64 = 3e-3;
const ENSEMBLE_WARMUP: usize = 400;
const ENSEMBLE_STEPS: usize = 3000;
const ENSEMBLE_LENGTH_BEAM: usize = 1;
const ENSEMBLE_LAMBDA_SCL: f64 = 0.1;

#[derive(Debug, Clone, Default)]
struct VariantResult {
    bleu_ar: f64,
    bleu_nar: f64,
    exact_nar_t10: f64,
    exact_nar_t1: f64,
    rep_nar: f64,
    hidsim: f64,
}

struct Ensemble {
    full: Vec<VariantResult>,
    noscl: Vec<VariantResult>,
    naronly: Vec<VariantResult>,
    aronly: Vec<VariantResult>,
    randinit_hidsim: Vec<f64>,
    /// Train+eval seconds spent on the comparison variants (full model,
    /// NAR-only and AR-only baselines).
    core_secs: f64,
}

fn ensemble_model_cfg() -> ModelConfig {
    let mut m = ModelConfig::desk(24);
    m.d_model = 32;
    m.d_hidden = 64;
    m
}

fn ensemble_train_cfg(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.seed = seed;
    c.peak_lr = ENSEMBLE_PEAK_LR;
    c.warmup_steps = ENSEMBLE_WARMUP;
    c.batch_tokens = ENSEMBLE_BATCH_TOKENS;
    c.max_steps = ENSEMBLE_STEPS;
    c.lambda_scl = ENSEMBLE_LAMBDA_SCL;
    c.eval_every = 0;
    c.checkpoint_dir = None;
    c
}

fn decode_cfg(nar_iterations: usize) -> DecodeConfig {
    let mut d = DecodeConfig::defaults(32);
    d.length_beam = ENSEMBLE_LENGTH_BEAM;
    d.nar_iterations = nar_iterations;
    d
}

fn run_variant(
    variant: &str,
    seed: u64,
    train: &ParallelCorpus,
    test: &ParallelCorpus,
    core_secs: &mut f64,
) -> VariantResult {
    let mut cfg = ensemble_train_cfg(seed);
    match variant {
        "full" => {}
        "noscl" => cfg.use_scl = false,
        "naronly" => {
            cfg.train_ar = false;
            cfg.use_tml = false;
            cfg.use_scl = false;
        }
        "aronly" => {
            cfg.train_nar = false;
            cfg.use_tml = false;
            cfg.use_scl = false;
            cfg.use_length = false;
        }
        other => panic!("unknown variant {other}"),
    }
    let eval_ar = cfg.train_ar;
    let eval_nar = cfg.train_nar;
    let core = Instant::now();
    let mut trainer = Trainer::new(ensemble_model_cfg(), cfg).unwrap();
    trainer.train(train, None, &decode_cfg(10)).unwrap();
    let r10 = evaluate_model(&trainer.model, test, &decode_cfg(10), eval_ar, eval_nar, seed)
        .unwrap();
    *core_secs += core.elapsed().as_secs_f64();
    let exact_t1 = if eval_nar {
        evaluate_model(&trainer.model, test, &decode_cfg(1), false, true, seed)
            .unwrap()
            .exact_nar
            .unwrap()
    } else {
        0.0
    };
    VariantResult {
        bleu_ar: r10.bleu_ar.unwrap_or(0.0),
        bleu_nar: r10.bleu_nar.unwrap_or(0.0),
        exact_nar_t10: r10.exact_nar.unwrap_or(0.0),
        exact_nar_t1: exact_t1,
        rep_nar: r10.repeat_pct_nar.unwrap_or(0.0),
        hidsim: r10.hidden_similarity,
    }
}

static ENSEMBLE: OnceLock<Ensemble> = OnceLock::new();

fn ensemble() -> &'static Ensemble {
    ENSEMBLE.get_or_init(|| {
        let mut rng = Rng::seed_from_u64(7);
        let train = gen_synthetic(Task::Lexicon, 2000, 24, (4, 12), 14, &mut rng).unwrap();
        let test = gen_synthetic(Task::Lexicon, 200, 24, (4, 12), 14, &mut rng).unwrap();
        let mut e = Ensemble {
            full: vec![],
            noscl: vec![],
            naronly: vec![],
            aronly: vec![],
            randinit_hidsim: vec![],
            core_secs: 0.0,
        };
        for &seed in &ENSEMBLE_SEEDS {
            let mut core = 0.0;
            e.full.push(run_variant("full", seed, &train, &test, &mut core));
            e.naronly.push(run_variant("naronly", seed, &train, &test, &mut core));
            e.aronly.push(run_variant("aronly", seed, &train, &test, &mut core));
            e.core_secs += core;
            let mut ignored = 0.0;
            e.noscl.push(run_variant("noscl", seed, &train, &test, &mut ignored));
            let mut mrng = Rng::seed_from_u64(seed);
            let fresh = Model::new(ensemble_model_cfg(), &mut mrng).unwrap();
            e.randinit_hidsim.push(hidden_similarity(&fresh, &test.pairs, seed).unwrap());
            eprintln!(
                "seed {seed}: full nar {:.2} rep {:.2} hidsim {:.3} | naronly nar {:.2} rep {:.2} | ar {:.2} vs aronly {:.2} | noscl hidsim {:.3}",
                e.full.last().unwrap().bleu_nar,
                e.full.last().unwrap().rep_nar,
                e.full.last().unwrap().hidsim,
                e.naronly.last().unwrap().bleu_nar,
                e.naronly.last().unwrap().rep_nar,
                e.full.last().unwrap().bleu_ar,
                e.aronly.last().unwrap().bleu_ar,
                e.noscl.last().unwrap().hidsim,
            );
        }
        e
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_5_directional_toy_reproduction() {
    let e = ensemble();
    let mean_full_nar = mean(e.full.iter().map(|r| r.bleu_nar));
    let mean_base_nar = mean(e.naronly.iter().map(|r| r.bleu_nar));
    let per_seed_wins = e
        .full
        .iter()
        .zip(&e.naronly)
        .filter(|(f, b)| f.bleu_nar > b.bleu_nar)
        .count();
    let mean_full_ar = mean(e.full.iter().map(|r| r.bleu_ar));
    let mean_base_ar = mean(e.aronly.iter().map(|r| r.bleu_ar));
    println!(
        "  NAR BLEU {mean_full_nar:.2} vs baseline {mean_base_nar:.2} (wins {per_seed_wins}/5); \
         AR BLEU {mean_full_ar:.2} vs baseline {mean_base_ar:.2}; core time {:.0}s",
        e.core_secs
    );
    let pass = mean_full_nar > mean_base_nar
        && per_seed_wins >= 4
        && mean_full_ar >= mean_base_ar - 0.5
        && e.core_secs < 900.0;
    report("5 (directional toy reproduction)", pass);
}

#[test]
fn criterion_6_iterations_help() {
    let e = ensemble();
    let wins = e.full.iter().filter(|r| r.exact_nar_t10 >= r.exact_nar_t1).count();
    println!(
        "  exact match, 10 vs 1 refinement iterations: {:?} vs {:?} ({wins}/5 non-degrading)",
        e.full.iter().map(|r| r.exact_nar_t10).collect::<Vec<_>>(),
        e.full.iter().map(|r| r.exact_nar_t1).collect::<Vec<_>>(),
    );
    report("6 (iterative refinement does not degrade exact match)", wins >= 4);
}

#[test]
fn criterion_7_repetition_reduction() {
    let e = ensemble();
    let full = mean(e.full.iter().map(|r| r.rep_nar));
    let base = mean(e.naronly.iter().map(|r| r.rep_nar));
    println!("  repeated-token %: {full:.2} vs baseline {base:.2}");
    report("7 (repetition at or below the baseline)", full <= base);
}

#[test]
fn criterion_8_hidden_similarity() {
    let e = ensemble();
    let rand_mean = mean(e.randinit_hidsim.iter().copied());
    let wins = e
        .full
        .iter()
        .zip(&e.noscl)
        .filter(|(f, b)| f.hidsim > b.hidsim)
        .count();
    println!(
        "  random-init mean cosine {rand_mean:.3}; contrastive on {:.3} vs off {:.3} (wins {wins}/5)",
        mean(e.full.iter().map(|r| r.hidsim)),
        mean(e.noscl.iter().map(|r| r.hidsim)),
    );
    report("8 (hidden-state alignment)", rand_mean.abs() < 0.2 && wins >= 4);
}

// ---------------------------------------------------------------------
// criterion 9: determinism and persistence

#[test]
fn criterion_9_determinism_and_persistence() {
    let mut pass = true;
    let mut rng = Rng::seed_from_u64(5);
    let corpus = gen_synthetic(Task::Lexicon, 60, 12, (2, 6), 10, &mut rng).unwrap();
    let cfg = || {
        let mut c = TrainConfig::default();
        c.seed = 17;
        c.max_steps = 100;
        c.batch_tokens = 64;
        c.eval_every = 0;
        c
    };
    let mcfg = || {
        let mut m = ModelConfig::tiny(12);
        m.d_model = 16;
        m
    };
    let dc = DecodeConfig::defaults(10);

    // identical seeds give a bit-identical 100-step loss trajectory
    let mut t1 = Trainer::new(mcfg(), cfg()).unwrap();
    let h1 = t1.train(&corpus, None, &dc).unwrap().history;
    let mut t2 = Trainer::new(mcfg(), cfg()).unwrap();
    let h2 = t2.train(&corpus, None, &dc).unwrap().history;
    pass &= h1.len() == 100 && bits(&h1) == bits(&h2);

    // checkpoint round trip is bit-exact
    let ckpt = t1.to_checkpoint();
    let bytes = ckpt.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    pass &= back.to_bytes() == bytes;
    for (a, b) in ckpt.params.iter().zip(&back.params) {
        pass &= bits(a.value.data()) == bits(b.value.data());
    }

    // averaging identical checkpoints reproduces them exactly
    let avg = average_checkpoints(&[ckpt.clone(), ckpt.clone(), ckpt.clone()]).unwrap();
    for (a, b) in ckpt.params.iter().zip(&avg.params) {
        pass &= bits(a.value.data()) == bits(b.value.data());
    }

    report("9 (determinism and persistence)", pass);
}

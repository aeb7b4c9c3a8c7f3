//! Command-line entry point: data generation, training, evaluation,
//! decoding, distillation, ablation sweeps, and gradient checking.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;

use dcmcl::checkpoint::Checkpoint;
use dcmcl::config::RunConfig;
use dcmcl::data::{batch_by_tokens, gen_synthetic, ParallelCorpus, Task, Vocabulary};
use dcmcl::decoding::{beam_search, mask_predict};
use dcmcl::error::{DcmclError, Result};
use dcmcl::masking::MaskStrategy;
use dcmcl::model::{Bound, Model, ModelConfig};
use dcmcl::tensor::grad_check;
use dcmcl::trainer::{average_checkpoint_files, evaluate_model, Trainer};
use dcmcl::Rng;

#[derive(Parser)]
#[command(name = "dcmcl", version, about = "Collaborative AR/NAR translation trainer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Random seed (overrides the config file's seed).
    #[arg(long)]
    seed: Option<u64>,
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for all outputs.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Extra key=value overrides, applied after the config file.
    #[arg(long = "set")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic parallel corpus (train and test splits).
    GenData {
        #[command(flatten)]
        common: Common,
        /// copy, reverse, or lexicon.
        #[arg(long, default_value = "lexicon")]
        task: String,
        #[arg(long, default_value_t = 2000)]
        pairs: usize,
        #[arg(long, default_value_t = 200)]
        test_pairs: usize,
        #[arg(long, default_value_t = 24)]
        vocab: usize,
        #[arg(long, default_value_t = 4)]
        min_len: usize,
        #[arg(long, default_value_t = 12)]
        max_len: usize,
    },
    /// Train a model on a corpus prefix (expects <prefix>.src/.tgt).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train_prefix: PathBuf,
        #[arg(long)]
        valid_prefix: Option<PathBuf>,
    },
    /// Score a checkpoint on a test corpus; optional CSV sweeps.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        test_prefix: PathBuf,
        /// "mask-ratio" or "iterations": write a CSV series to out-dir.
        #[arg(long)]
        sweep: Option<String>,
    },
    /// Decode a file of source sentences, one hypothesis line per input.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output file name inside out-dir.
        #[arg(long, default_value = "hyps.txt")]
        output: String,
        /// "ar" (beam search) or "nar" (mask-predict).
        #[arg(long, default_value = "ar")]
        mode: String,
    },
    /// Re-target a corpus with a trained model's beam outputs.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        train_prefix: PathBuf,
        /// File prefix for the distilled corpus inside out-dir.
        #[arg(long, default_value = "distilled")]
        prefix: String,
    },
    /// Train every on/off combination of the listed axes.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train_prefix: PathBuf,
        #[arg(long)]
        valid_prefix: Option<PathBuf>,
        /// Comma-separated subset of se,tml,scl.
        #[arg(long, default_value = "se,tml,scl")]
        axes: String,
    },
    /// Finite-difference check of the full objective's gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut rc = RunConfig::new(24);
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)?;
        rc.apply_kv_text(&text)?;
    }
    rc.apply_overrides(&common.sets)?;
    if let Some(seed) = common.seed {
        rc.train.seed = seed;
    }
    Ok(rc)
}

fn load_corpus(prefix: &Path, vocab_size: usize) -> Result<ParallelCorpus> {
    let vocab = Vocabulary::synthetic(vocab_size);
    let src = prefix.with_extension("src");
    let tgt = prefix.with_extension("tgt");
    ParallelCorpus::load_files(&src, &tgt, vocab)
}

fn load_model(path: &Path) -> Result<Model> {
    Checkpoint::load(path)?.to_model()
}

fn parse_task(s: &str) -> Result<Task> {
    Ok(match s {
        "copy" => Task::Copy,
        "reverse" => Task::Reverse,
        "lexicon" => Task::Lexicon,
        other => return Err(DcmclError::Invalid(format!("unknown task {other}"))),
    })
}

fn run(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::GenData { common, task, pairs, test_pairs, vocab, min_len, max_len } => {
            std::fs::create_dir_all(&common.out_dir)?;
            let task = parse_task(&task)?;
            let mut rng = Rng::seed_from_u64(common.seed.unwrap_or(1));
            let cap = max_len + 2;
            let train = gen_synthetic(task, pairs, vocab, (min_len, max_len), cap, &mut rng)?;
            let test = gen_synthetic(task, test_pairs, vocab, (min_len, max_len), cap, &mut rng)?;
            train.write_files(&common.out_dir.join("train"))?;
            test.write_files(&common.out_dir.join("test"))?;
            println!(
                "{}",
                serde_json::json!({
                    "train_pairs": train.pairs.len(),
                    "test_pairs": test.pairs.len(),
                    "vocab": vocab,
                })
            );
            Ok(0)
        }
        Cmd::Train { common, train_prefix, valid_prefix } => {
            let mut rc = load_config(&common)?;
            std::fs::create_dir_all(&common.out_dir)?;
            rc.train.checkpoint_dir = Some(common.out_dir.clone());
            rc.validate()?;
            let train = load_corpus(&train_prefix, rc.model.vocab_size)?;
            let valid = match &valid_prefix {
                Some(p) => Some(load_corpus(p, rc.model.vocab_size)?),
                None => None,
            };
            let mut trainer = Trainer::new(rc.model.clone(), rc.train.clone())?;
            let outcome = trainer.train(&train, valid.as_ref(), &rc.decode)?;
            if outcome.best.len() >= 2 {
                let avg = average_checkpoint_files(&outcome.best)?;
                avg.save(&common.out_dir.join("averaged.ckpt"))?;
            }
            let final_loss = outcome.history.last().copied();
            println!(
                "{}",
                serde_json::json!({
                    "steps": outcome.history.len(),
                    "final_loss": final_loss,
                    "kept_checkpoints": outcome.best.len(),
                })
            );
            Ok(0)
        }
        Cmd::Evaluate { common, ckpt, test_prefix, sweep } => {
            let rc = load_config(&common)?;
            std::fs::create_dir_all(&common.out_dir)?;
            let model = load_model(&ckpt)?;
            let corpus = load_corpus(&test_prefix, model.cfg.vocab_size)?;
            let seed = common.seed.unwrap_or(rc.train.seed);
            let report = evaluate_model(&model, &corpus, &rc.decode, true, true, seed)?;
            println!(
                "{}",
                serde_json::json!({
                    "bleu_ar": report.bleu_ar,
                    "bleu_nar": report.bleu_nar,
                    "exact_ar": report.exact_ar,
                    "exact_nar": report.exact_nar,
                    "repeat_pct_ar": report.repeat_pct_ar,
                    "repeat_pct_nar": report.repeat_pct_nar,
                    "hidden_similarity": report.hidden_similarity,
                })
            );
            match sweep.as_deref() {
                None => {}
                Some("mask-ratio") => {
                    let mut csv = String::from("ratio,ml_ar,ml_nar\n");
                    for ratio in [0.1, 0.3, 0.5, 0.7, 0.9] {
                        let mut cfg = rc.train.clone();
                        cfg.use_tml = false;
                        cfg.use_scl = false;
                        cfg.lambda_tml = 0.0;
                        cfg.lambda_scl = 0.0;
                        cfg.use_length = false;
                        cfg.mask_strategy = MaskStrategy::FixedRatio(ratio);
                        cfg.seed = seed;
                        let mut t = Trainer::new(model.cfg.clone(), cfg)?;
                        t.model = Checkpoint::load(&ckpt)?.to_model()?;
                        let mut batches =
                            batch_by_tokens(&corpus, rc.train.batch_tokens, &mut t.rng, false)?;
                        let (mut ml_ar, mut ml_nar, mut n) = (0.0, 0.0, 0);
                        for b in batches.iter_mut() {
                            b.assign_plans(MaskStrategy::FixedRatio(ratio), &mut t.rng)?;
                            let mut tape = dcmcl::tensor::Tape::new();
                            let (bundle, _, _) = t.forward_losses(&mut tape, b)?;
                            ml_ar += bundle.ml_ar.unwrap_or(0.0);
                            ml_nar += bundle.ml_nar.unwrap_or(0.0);
                            n += 1;
                        }
                        csv.push_str(&format!(
                            "{ratio},{},{}\n",
                            ml_ar / n.max(1) as f64,
                            ml_nar / n.max(1) as f64
                        ));
                    }
                    std::fs::write(common.out_dir.join("mask_ratio_sweep.csv"), csv)?;
                }
                Some("iterations") => {
                    let mut csv = String::from("iterations,bleu_nar,exact_nar\n");
                    for t_iters in 1..=rc.decode.nar_iterations {
                        let mut dc = rc.decode.clone();
                        dc.nar_iterations = t_iters;
                        let r = evaluate_model(&model, &corpus, &dc, false, true, seed)?;
                        csv.push_str(&format!(
                            "{t_iters},{},{}\n",
                            r.bleu_nar.unwrap_or(0.0),
                            r.exact_nar.unwrap_or(0.0)
                        ));
                    }
                    std::fs::write(common.out_dir.join("iteration_sweep.csv"), csv)?;
                }
                Some(other) => {
                    return Err(DcmclError::Invalid(format!(
                        "unknown sweep {other} (mask-ratio or iterations)"
                    )))
                }
            }
            Ok(0)
        }
        Cmd::Decode { common, ckpt, input, output, mode } => {
            let rc = load_config(&common)?;
            std::fs::create_dir_all(&common.out_dir)?;
            let model = load_model(&ckpt)?;
            let vocab = Vocabulary::synthetic(model.cfg.vocab_size);
            let text = std::fs::read_to_string(&input)?;
            let mut out = String::new();
            for line in text.lines() {
                let src = vocab.encode(line)?;
                let (tokens, _) = match mode.as_str() {
                    "ar" => beam_search(&model, &src, &rc.decode)?,
                    "nar" => mask_predict(&model, &src, &rc.decode)?,
                    other => {
                        return Err(DcmclError::Invalid(format!("unknown mode {other} (ar/nar)")))
                    }
                };
                out.push_str(&vocab.decode(&tokens)?);
                out.push('\n');
            }
            std::fs::write(common.out_dir.join(&output), out)?;
            Ok(0)
        }
        Cmd::Distill { common, ckpt, train_prefix, prefix } => {
            let rc = load_config(&common)?;
            std::fs::create_dir_all(&common.out_dir)?;
            let model = load_model(&ckpt)?;
            let corpus = load_corpus(&train_prefix, model.cfg.vocab_size)?;
            let (distilled, stats) = dcmcl::data::distill(&model, &corpus, &rc.decode)?;
            distilled.write_files(&common.out_dir.join(&prefix))?;
            println!(
                "{}",
                serde_json::json!({
                    "pairs": distilled.pairs.len(),
                    "empty_fallbacks": stats.empty_fallbacks,
                    "truncated": stats.truncated,
                })
            );
            Ok(0)
        }
        Cmd::Ablate { common, train_prefix, valid_prefix, axes } => {
            let rc = load_config(&common)?;
            std::fs::create_dir_all(&common.out_dir)?;
            let axes: Vec<&str> = axes.split(',').map(|a| a.trim()).collect();
            for a in &axes {
                if !["se", "tml", "scl"].contains(a) {
                    return Err(DcmclError::Invalid(format!("unknown axis {a} (se/tml/scl)")));
                }
            }
            let train = load_corpus(&train_prefix, rc.model.vocab_size)?;
            let valid = match &valid_prefix {
                Some(p) => Some(load_corpus(p, rc.model.vocab_size)?),
                None => None,
            };
            for bits in 0..(1u32 << axes.len()) {
                let mut cfg = rc.train.clone();
                let mut name = String::new();
                for (i, axis) in axes.iter().enumerate() {
                    let on = bits & (1 << i) != 0;
                    match *axis {
                        "se" => cfg.share_encoder = on,
                        "tml" => {
                            cfg.use_tml = on;
                            if !on {
                                cfg.lambda_tml = 0.0;
                            }
                        }
                        "scl" => {
                            cfg.use_scl = on;
                            if !on {
                                cfg.lambda_scl = 0.0;
                            }
                        }
                        _ => unreachable!(),
                    }
                    name.push_str(&format!("{axis}{}_", u32::from(on)));
                }
                let name = name.trim_end_matches('_').to_string();
                let dir = common.out_dir.join(&name);
                cfg.checkpoint_dir = Some(dir.clone());
                let mut trainer = Trainer::new(rc.model.clone(), cfg)?;
                let outcome = trainer.train(&train, valid.as_ref(), &rc.decode)?;
                let report = match &valid {
                    Some(v) => Some(evaluate_model(
                        &trainer.model,
                        v,
                        &rc.decode,
                        true,
                        true,
                        rc.train.seed,
                    )?),
                    None => None,
                };
                println!(
                    "{}",
                    serde_json::json!({
                        "run": name,
                        "final_loss": outcome.history.last(),
                        "bleu_ar": report.as_ref().and_then(|r| r.bleu_ar),
                        "bleu_nar": report.as_ref().and_then(|r| r.bleu_nar),
                    })
                );
            }
            Ok(0)
        }
        Cmd::Gradcheck { common } => {
            let mut rc = load_config(&common)?;
            // finite differences need a deterministic forward
            rc.model.dropout = 0.0;
            let seed = common.seed.unwrap_or(rc.train.seed);
            let mut model_cfg = ModelConfig::tiny(8);
            if common.config.is_some() || !common.sets.is_empty() {
                model_cfg = rc.model.clone();
            }
            let mut rng = Rng::seed_from_u64(seed);
            let max_sent = model_cfg.max_len.saturating_sub(2).min(4).max(1);
            let corpus = gen_synthetic(
                Task::Copy,
                2,
                model_cfg.vocab_size,
                (1, max_sent),
                model_cfg.max_len,
                &mut rng,
            )?;
            let mut cfg = rc.train.clone();
            cfg.seed = seed;
            let mut trainer = Trainer::new(model_cfg, cfg)?;
            // freeze the detached targets (mutual-KL teachers, hybrid
            // poolings) at the base point so finite differences see the
            // same stop-gradient semantics as the analytic gradient
            trainer.set_frozen_teacher(trainer.model.clone())?;
            let mut batches = batch_by_tokens(&corpus, 64, &mut trainer.rng, false)?;
            let batch = &mut batches[0];
            batch.assign_plans(trainer.cfg.mask_strategy, &mut trainer.rng)?;
            let leaves: Vec<_> =
                trainer.model.params.iter().map(|p| p.value.clone()).collect();
            let err = grad_check(
                |tape, ids| {
                    let bound = Bound::from_ids(&trainer.model.params, ids);
                    let (_, vars) = trainer.forward_losses_with(tape, batch, &bound)?;
                    Ok(vars.total)
                },
                &leaves,
                1e-3,
            )?;
            println!("max relative error: {err:.3e}");
            Ok(if err < 1e-3 { 0 } else { 2 })
        }
    }
}

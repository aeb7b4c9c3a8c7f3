//! Flat `key=value` configuration text: parsing, typed application onto
//! the run configuration, and serialization (also used for the checkpoint
//! header). Lines starting with `#` and blank lines are ignored.

use std::path::PathBuf;

use crate::decoding::DecodeConfig;
use crate::error::{DcmclError, Result};
use crate::masking::{MaskStrategy, SelectStrategy};
use crate::model::{ModelConfig, PeKind};
use crate::trainer::{DistillDirection, TrainConfig};

/// Parse `key=value` lines. Keys are `[A-Za-z0-9_]+`; duplicates are
/// rejected so a file cannot silently contradict itself.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| DcmclError::Config(format!("line {}: missing '='", ln + 1)))?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(DcmclError::Config(format!("line {}: bad key {key:?}", ln + 1)));
        }
        if out.iter().any(|(k, _)| k == key) {
            return Err(DcmclError::Config(format!("line {}: duplicate key {key}", ln + 1)));
        }
        out.push((key.to_string(), value.to_string()));
    }
    Ok(out)
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| DcmclError::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(DcmclError::Config(format!("bad value {value:?} for {key} (true/false)"))),
    }
}

/// Serialize a model config for the checkpoint header. Every field is
/// written; [`model_from_kv`] requires every field back.
pub fn model_to_kv(cfg: &ModelConfig) -> String {
    format!(
        "vocab_size={}\nd_model={}\nd_hidden={}\nn_heads={}\nn_enc_layers={}\nn_dec_layers={}\nmax_len={}\ndropout={}\nenc_pe={}\nar_pe={}\nnar_pe={}\nshare_encoder={}\nhybrid_enabled={}\n",
        cfg.vocab_size,
        cfg.d_model,
        cfg.d_hidden,
        cfg.n_heads,
        cfg.n_enc_layers,
        cfg.n_dec_layers,
        cfg.max_len,
        cfg.dropout,
        cfg.enc_pe,
        cfg.ar_pe,
        cfg.nar_pe,
        cfg.share_encoder,
        cfg.hybrid_enabled,
    )
}

pub fn model_from_kv(text: &str) -> Result<ModelConfig> {
    let kv = parse_kv(text)?;
    let mut cfg = ModelConfig::desk(8);
    let mut seen = Vec::new();
    for (key, value) in &kv {
        let (key, value) = (key.as_str(), value.as_str());
        match key {
            "vocab_size" => cfg.vocab_size = parse_as(key, value)?,
            "d_model" => cfg.d_model = parse_as(key, value)?,
            "d_hidden" => cfg.d_hidden = parse_as(key, value)?,
            "n_heads" => cfg.n_heads = parse_as(key, value)?,
            "n_enc_layers" => cfg.n_enc_layers = parse_as(key, value)?,
            "n_dec_layers" => cfg.n_dec_layers = parse_as(key, value)?,
            "max_len" => cfg.max_len = parse_as(key, value)?,
            "dropout" => cfg.dropout = parse_as(key, value)?,
            "enc_pe" => cfg.enc_pe = parse_as::<PeKind>(key, value)?,
            "ar_pe" => cfg.ar_pe = parse_as::<PeKind>(key, value)?,
            "nar_pe" => cfg.nar_pe = parse_as::<PeKind>(key, value)?,
            "share_encoder" => cfg.share_encoder = parse_bool(key, value)?,
            "hybrid_enabled" => cfg.hybrid_enabled = parse_bool(key, value)?,
            other => return Err(DcmclError::Config(format!("unknown model key {other}"))),
        }
        seen.push(key.to_string());
    }
    for required in [
        "vocab_size",
        "d_model",
        "d_hidden",
        "n_heads",
        "n_enc_layers",
        "n_dec_layers",
        "max_len",
        "dropout",
        "enc_pe",
        "ar_pe",
        "nar_pe",
        "share_encoder",
        "hybrid_enabled",
    ] {
        if !seen.iter().any(|k| k == required) {
            return Err(DcmclError::Config(format!("missing model key {required}")));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn mask_strategy_name(s: MaskStrategy) -> &'static str {
    match s {
        MaskStrategy::Cmlm => "cmlm",
        MaskStrategy::FixedRatio(_) => "ratio",
        MaskStrategy::Disco => "disco",
    }
}

fn select_strategy_name(s: SelectStrategy) -> &'static str {
    match s {
        SelectStrategy::All => "all",
        SelectStrategy::Random => "random",
        SelectStrategy::HighInter => "high-inter",
        SelectStrategy::HighUnion => "high-union",
        SelectStrategy::LowInter => "low-inter",
        SelectStrategy::LowUnion => "low-union",
    }
}

/// Everything one run needs: model architecture, training schedule, and
/// decoding settings, all addressable by flat keys. `share_encoder` and
/// `use_hybrid` live once here and are propagated to the model config.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    mask_ratio: f64,
}

impl RunConfig {
    pub fn new(vocab_size: usize) -> Self {
        let model = ModelConfig::desk(vocab_size);
        let decode = DecodeConfig::defaults(model.max_len);
        RunConfig { model, train: TrainConfig::default(), decode, mask_ratio: 0.5 }
    }

    /// Apply one `key=value` pair with type checking.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            // model
            "vocab_size" => self.model.vocab_size = parse_as(key, value)?,
            "d_model" => self.model.d_model = parse_as(key, value)?,
            "d_hidden" => self.model.d_hidden = parse_as(key, value)?,
            "n_heads" => self.model.n_heads = parse_as(key, value)?,
            "n_enc_layers" => self.model.n_enc_layers = parse_as(key, value)?,
            "n_dec_layers" => self.model.n_dec_layers = parse_as(key, value)?,
            "max_len" => {
                self.model.max_len = parse_as(key, value)?;
                self.decode.max_decode_len = self.decode.max_decode_len.min(self.model.max_len);
            }
            "dropout" => self.model.dropout = parse_as(key, value)?,
            "enc_pe" => self.model.enc_pe = parse_as::<PeKind>(key, value)?,
            "ar_pe" => self.model.ar_pe = parse_as::<PeKind>(key, value)?,
            "nar_pe" => self.model.nar_pe = parse_as::<PeKind>(key, value)?,
            // training
            "lambda_tml" => self.train.lambda_tml = parse_as(key, value)?,
            "lambda_scl" => self.train.lambda_scl = parse_as(key, value)?,
            "train_ar" => self.train.train_ar = parse_bool(key, value)?,
            "train_nar" => self.train.train_nar = parse_bool(key, value)?,
            "share_encoder" => {
                self.train.share_encoder = parse_bool(key, value)?;
                self.model.share_encoder = self.train.share_encoder;
            }
            "use_tml" => self.train.use_tml = parse_bool(key, value)?,
            "use_scl" => self.train.use_scl = parse_bool(key, value)?,
            "use_hybrid" => {
                self.train.use_hybrid = parse_bool(key, value)?;
                self.model.hybrid_enabled = self.train.use_hybrid;
            }
            "use_length" => self.train.use_length = parse_bool(key, value)?,
            "distill_direction" => {
                self.train.distill_direction = parse_as::<DistillDirection>(key, value)?
            }
            "mask_strategy" => {
                self.train.mask_strategy = match value {
                    "cmlm" => MaskStrategy::Cmlm,
                    "disco" => MaskStrategy::Disco,
                    "ratio" => MaskStrategy::FixedRatio(self.mask_ratio),
                    other => {
                        return Err(DcmclError::Config(format!("unknown mask strategy {other}")))
                    }
                }
            }
            "mask_ratio" => {
                self.mask_ratio = parse_as(key, value)?;
                if let MaskStrategy::FixedRatio(_) = self.train.mask_strategy {
                    self.train.mask_strategy = MaskStrategy::FixedRatio(self.mask_ratio);
                }
            }
            "select_strategy" => {
                self.train.select_strategy = parse_as::<SelectStrategy>(key, value)?
            }
            "select_fraction" => self.train.select_fraction = parse_as(key, value)?,
            "label_smoothing" => self.train.label_smoothing = parse_as(key, value)?,
            "beta1" => self.train.beta1 = parse_as(key, value)?,
            "beta2" => self.train.beta2 = parse_as(key, value)?,
            "peak_lr" => self.train.peak_lr = parse_as(key, value)?,
            "warmup_steps" => self.train.warmup_steps = parse_as(key, value)?,
            "clip_norm" => self.train.clip_norm = parse_as(key, value)?,
            "max_steps" => self.train.max_steps = parse_as(key, value)?,
            "eval_every" => self.train.eval_every = parse_as(key, value)?,
            "batch_tokens" => self.train.batch_tokens = parse_as(key, value)?,
            "seed" => self.train.seed = parse_as(key, value)?,
            "checkpoint_dir" => {
                self.train.checkpoint_dir =
                    if value.is_empty() { None } else { Some(PathBuf::from(value)) }
            }
            "keep_best_k" => self.train.keep_best_k = parse_as(key, value)?,
            // decoding
            "beam_size" => self.decode.beam_size = parse_as(key, value)?,
            "length_beam" => self.decode.length_beam = parse_as(key, value)?,
            "nar_iterations" => self.decode.nar_iterations = parse_as(key, value)?,
            "max_decode_len" => self.decode.max_decode_len = parse_as(key, value)?,
            "length_alpha" => self.decode.length_alpha = parse_as(key, value)?,
            other => return Err(DcmclError::Config(format!("unknown config key {other}"))),
        }
        Ok(())
    }

    /// Apply a whole config file.
    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (key, value) in parse_kv(text)? {
            self.set(&key, &value)?;
        }
        Ok(())
    }

    /// Apply `key=value` override strings (CLI flags); these may repeat
    /// keys already set by a file.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| DcmclError::Config(format!("override {o:?} missing '='")))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let m = &self.model;
        // share_encoder and use_hybrid are written in the training block
        // below, which propagates them back into the model on apply.
        let mut s = format!(
            "vocab_size={}\nd_model={}\nd_hidden={}\nn_heads={}\nn_enc_layers={}\nn_dec_layers={}\nmax_len={}\ndropout={}\nenc_pe={}\nar_pe={}\nnar_pe={}\n",
            m.vocab_size,
            m.d_model,
            m.d_hidden,
            m.n_heads,
            m.n_enc_layers,
            m.n_dec_layers,
            m.max_len,
            m.dropout,
            m.enc_pe,
            m.ar_pe,
            m.nar_pe,
        );
        s.push_str(&format!(
            "lambda_tml={}\nlambda_scl={}\ntrain_ar={}\ntrain_nar={}\nshare_encoder={}\nuse_tml={}\nuse_scl={}\nuse_hybrid={}\nuse_length={}\ndistill_direction={}\nmask_strategy={}\nmask_ratio={}\nselect_strategy={}\nselect_fraction={}\nlabel_smoothing={}\nbeta1={}\nbeta2={}\npeak_lr={}\nwarmup_steps={}\nclip_norm={}\nmax_steps={}\neval_every={}\nbatch_tokens={}\nseed={}\ncheckpoint_dir={}\nkeep_best_k={}\n",
            self.train.lambda_tml,
            self.train.lambda_scl,
            self.train.train_ar,
            self.train.train_nar,
            self.train.share_encoder,
            self.train.use_tml,
            self.train.use_scl,
            self.train.use_hybrid,
            self.train.use_length,
            self.train.distill_direction,
            mask_strategy_name(self.train.mask_strategy),
            self.mask_ratio,
            select_strategy_name(self.train.select_strategy),
            self.train.select_fraction,
            self.train.label_smoothing,
            self.train.beta1,
            self.train.beta2,
            self.train.peak_lr,
            self.train.warmup_steps,
            self.train.clip_norm,
            self.train.max_steps,
            self.train.eval_every,
            self.train.batch_tokens,
            self.train.seed,
            self.train.checkpoint_dir.as_deref().map(|p| p.display().to_string()).unwrap_or_default(),
            self.train.keep_best_k,
        ));
        s.push_str(&format!(
            "beam_size={}\nlength_beam={}\nnar_iterations={}\nmax_decode_len={}\nlength_alpha={}\n",
            self.decode.beam_size,
            self.decode.length_beam,
            self.decode.nar_iterations,
            self.decode.max_decode_len,
            self.decode.length_alpha,
        ));
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        Ok(())
    }
}

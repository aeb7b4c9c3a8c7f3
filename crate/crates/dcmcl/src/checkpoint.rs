//! Binary checkpoint persistence.
//!
//! Little-endian layout:
//!
//! ```text
//! magic   8 bytes  "DCMCLCKP"
//! version u32      1
//! config  u64 length + key=value text block
//! params  u64 count, then per parameter:
//!           u64 name length + name bytes
//!           u8  group tag
//!           u64 rank + u64 dims...
//!           f64 values (row-major)
//! opt     u8 flag; when 1: u64 step, then per parameter the first and
//!           second Adam moments as f64 runs
//! rng     32-byte seed, u128 word position, u64 stream
//! ```
//!
//! Round-trips are bit-exact; parsing is fully bounds-checked so arbitrary
//! bytes fail cleanly.

use std::path::Path;

use rand::SeedableRng;

use crate::config;
use crate::error::{DcmclError, Result};
use crate::model::{Model, ModelConfig, Param, ParamGroup};
use crate::tensor::Tensor;
use crate::Rng;

pub const MAGIC: &[u8; 8] = b"DCMCLCKP";
pub const VERSION: u32 = 1;

const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;
const MAX_NUMEL: usize = 1 << 28;

/// Serializable RNG position: seed plus stream coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngSnapshot {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

pub fn rng_snapshot(rng: &Rng) -> RngSnapshot {
    RngSnapshot { seed: rng.get_seed(), word_pos: rng.get_word_pos(), stream: rng.get_stream() }
}

pub fn rng_restore(s: &RngSnapshot) -> Rng {
    let mut rng = Rng::from_seed(s.seed);
    rng.set_stream(s.stream);
    rng.set_word_pos(s.word_pos);
    rng
}

#[derive(Debug, Clone)]
pub struct OptimState {
    pub step: u64,
    /// First Adam moment per parameter, aligned with the parameter order.
    pub m: Vec<Vec<f64>>,
    /// Second Adam moment per parameter.
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_cfg: ModelConfig,
    pub params: Vec<Param>,
    pub opt: Option<OptimState>,
    pub rng: RngSnapshot,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| DcmclError::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn len(&mut self, cap: usize, what: &str) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= cap)
            .ok_or_else(|| DcmclError::Checkpoint(format!("{what} length {v} out of range")))
    }

    fn f64_run(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| {
            DcmclError::Checkpoint("float run overflows".into())
        })?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(DcmclError::Checkpoint(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64_run(out: &mut Vec<u8>, data: &[f64]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = config::model_to_kv(&self.model_cfg);
        put_u64(&mut out, cfg.len() as u64);
        out.extend_from_slice(cfg.as_bytes());
        put_u64(&mut out, self.params.len() as u64);
        for p in &self.params {
            put_u64(&mut out, p.name.len() as u64);
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.group.tag());
            put_u64(&mut out, p.value.shape().len() as u64);
            for &d in p.value.shape() {
                put_u64(&mut out, d as u64);
            }
            put_f64_run(&mut out, p.value.data());
        }
        match &self.opt {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                put_u64(&mut out, o.step);
                for (m, v) in o.m.iter().zip(&o.v) {
                    put_f64_run(&mut out, m);
                    put_f64_run(&mut out, v);
                }
            }
        }
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.take(8)? != MAGIC {
            return Err(DcmclError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(DcmclError::Checkpoint(format!("unsupported version {version}")));
        }
        let cfg_len = r.len(1 << 20, "config")?;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|_| DcmclError::Checkpoint("config block is not utf-8".into()))?;
        let model_cfg = config::model_from_kv(cfg_text)?;
        let n_params = r.len(1 << 20, "parameter count")?;
        let mut params = Vec::with_capacity(n_params.min(1024));
        let mut numels = Vec::with_capacity(n_params.min(1024));
        for _ in 0..n_params {
            let name_len = r.len(MAX_NAME, "name")?;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| DcmclError::Checkpoint("parameter name is not utf-8".into()))?
                .to_string();
            let group = ParamGroup::from_tag(r.u8()?)?;
            let rank = r.len(MAX_RANK, "rank")?;
            let mut shape = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for _ in 0..rank {
                let d = r.len(MAX_NUMEL, "dimension")?;
                numel = numel
                    .checked_mul(d)
                    .filter(|&n| n <= MAX_NUMEL)
                    .ok_or_else(|| DcmclError::Checkpoint("tensor too large".into()))?;
                shape.push(d);
            }
            let data = r.f64_run(numel)?;
            numels.push(numel);
            params.push(Param { name, group, value: Tensor::new(shape, data) });
        }
        let opt = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let mut m = Vec::with_capacity(params.len());
                let mut v = Vec::with_capacity(params.len());
                for &n in &numels {
                    m.push(r.f64_run(n)?);
                    v.push(r.f64_run(n)?);
                }
                Some(OptimState { step, m, v })
            }
            other => return Err(DcmclError::Checkpoint(format!("bad optimizer flag {other}"))),
        };
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let word_pos = r.u128()?;
        let stream = r.u64()?;
        r.done()?;
        Ok(Checkpoint { model_cfg, params, opt, rng: RngSnapshot { seed, word_pos, stream } })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuild a model: construct the architecture from the stored config,
    /// then overwrite every parameter by name with shape checks.
    pub fn to_model(&self) -> Result<Model> {
        let mut rng = Rng::seed_from_u64(0);
        let mut model = Model::new(self.model_cfg.clone(), &mut rng)?;
        if self.params.len() != model.params.len() {
            return Err(DcmclError::Checkpoint(format!(
                "parameter count {} does not match config ({})",
                self.params.len(),
                model.params.len()
            )));
        }
        for p in &self.params {
            if !model.params.contains(&p.name) {
                return Err(DcmclError::Checkpoint(format!("unexpected parameter {}", p.name)));
            }
            let slot = model.params.get_mut(&p.name);
            if slot.shape() != p.value.shape() {
                return Err(DcmclError::Checkpoint(format!(
                    "shape mismatch for {}: {:?} vs {:?}",
                    p.name,
                    p.value.shape(),
                    slot.shape()
                )));
            }
            *slot = p.value.clone();
        }
        Ok(model)
    }
}

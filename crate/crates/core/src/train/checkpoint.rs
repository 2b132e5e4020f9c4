//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "DMAGZCKP" | version u32 | model digest u64 | param count u64
//! per parameter: name_len u32 | name | rank u32 | extents u64 × rank | f64 × numel
//! config_len u32 | run config TOML
//! epoch u64 | step u64 | seed u64 | lr f64
//! per parameter: first moment f64 × numel | second moment f64 × numel
//! history_len u64 | per epoch: epoch u64, lr, Lg, L1, L2, test error (f64)
//! ```
//!
//! Anything short or left over is an integrity error; nothing is returned
//! from a file that fails to parse completely.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EpochMetrics, Moments, TrainState, Trainer};
use crate::config::{ModelConfig, RunConfig};
use crate::error::{Error, Result};
use crate::model::DmaGaze;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DMAGZCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub digest: u64,
    pub params: ParamStore,
    pub state: TrainState,
    pub history: Vec<EpochMetrics>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for &x in v {
            self.f64(x);
        }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Integrity(format!(
                    "checkpoint truncated at byte {} (needed {n} more)",
                    self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?)
            .map_err(|_| Error::Integrity("size does not fit in memory".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Integrity("payload size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

/// Serialises parameters, optimiser state and history.
pub fn encode(params: &ParamStore, state: &TrainState, history: &[EpochMetrics]) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.u64(state.config.model.digest());
    w.u64(params.len() as u64);
    for p in params.iter() {
        w.bytes(p.name.as_bytes());
        w.u32(p.value.rank() as u32);
        for &e in p.value.shape() {
            w.u64(e as u64);
        }
        w.f64s(p.value.data());
    }
    w.bytes(state.config.to_toml().as_bytes());
    w.u64(state.epoch as u64);
    w.u64(state.moments.step);
    w.u64(state.seed);
    w.f64(state.lr);
    for (m, v) in state.moments.m.iter().zip(&state.moments.v) {
        w.f64s(m);
        w.f64s(v);
    }
    w.u64(history.len() as u64);
    for h in history {
        w.u64(h.epoch as u64);
        w.f64s(&[h.lr, h.lg, h.l1, h.l2, h.test_error_deg]);
    }
    w.0
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Integrity(format!(
            "checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let digest = r.u64()?;
    let count = r.usize()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| Error::Integrity("parameter name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| Error::Integrity(format!("extents of {name} overflow")))?;
        let data = r.f64s(numel)?;
        params.add(name, Tensor::new(&shape, data)?);
    }
    let text = std::str::from_utf8(r.bytes()?)
        .map_err(|_| Error::Integrity("config is not UTF-8".into()))?;
    let config = RunConfig::from_toml(text)?;
    if config.model.digest() != digest {
        return Err(Error::Integrity(
            "embedded config does not match the header digest".into(),
        ));
    }
    let epoch = r.usize()?;
    let step = r.u64()?;
    let seed = r.u64()?;
    let lr = r.f64()?;
    let mut moments = Moments {
        step,
        m: Vec::with_capacity(count),
        v: Vec::with_capacity(count),
    };
    for p in params.iter() {
        moments.m.push(r.f64s(p.value.numel())?);
        moments.v.push(r.f64s(p.value.numel())?);
    }
    let n_hist = r.usize()?;
    let mut history = Vec::with_capacity(n_hist.min(1 << 16));
    for _ in 0..n_hist {
        let epoch = r.usize()?;
        let v = r.f64s(5)?;
        history.push(EpochMetrics {
            epoch,
            lr: v[0],
            lg: v[1],
            l1: v[2],
            l2: v[3],
            test_error_deg: v[4],
        });
    }
    if r.pos != buf.len() {
        return Err(Error::Integrity(format!(
            "{} unexpected trailing bytes",
            buf.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        digest,
        params,
        state: TrainState {
            epoch,
            lr,
            seed,
            moments,
            config,
        },
        history,
    })
}

/// Writes atomically through a temporary file in the same directory.
pub fn checkpoint_save(path: &Path, trainer: &Trainer) -> Result<()> {
    let bytes = encode(&trainer.params, &trainer.state, &trainer.history);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

/// Loads a checkpoint and refuses it unless it was written for `expected`.
pub fn checkpoint_load_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ck = checkpoint_load(path)?;
    if ck.digest != expected.digest() {
        return Err(Error::config(format!(
            "checkpoint config digest {:016x} does not match the requested model ({:016x})",
            ck.digest,
            expected.digest()
        )));
    }
    Ok(ck)
}

impl Checkpoint {
    /// Rebuilds the model and a trainer positioned after the saved epoch.
    pub fn into_trainer(self) -> Result<Trainer> {
        let config = self.state.config.clone();
        let mut fresh = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = DmaGaze::build(&config.model, &mut fresh, &mut rng)?;
        if fresh.len() != self.params.len() {
            return Err(Error::Integrity(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                fresh.len()
            )));
        }
        for (a, b) in fresh.iter().zip(self.params.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Integrity(format!(
                    "parameter {} {:?} does not match model parameter {} {:?}",
                    b.name,
                    b.value.shape(),
                    a.name,
                    a.value.shape()
                )));
            }
        }
        let mut trainer = Trainer::from_parts(model, self.params, &config);
        trainer.state = self.state;
        trainer.history = self.history;
        Ok(trainer)
    }
}

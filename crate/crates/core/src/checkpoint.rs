//! Binary checkpoints: parameters, optimizer moments, trainer RNG and
//! batch order, all little-endian with `f64` values stored bit-exactly.
//!
//! ```text
//! magic "GPCNNCK\0" | version u32 | fingerprint u64
//! step u64 | config text | rng state | parameters | optimizer | trainer
//! SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Autoregressive, ModelConfig};
use crate::params::ParamStore;
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::train::{OptimizerKind, OptimizerState};

pub const MAGIC: &[u8; 8] = b"GPCNNCK\0";
pub const VERSION: u32 = 1;

/// Mini-batch order and loss window of an interrupted fit.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub rng: RngState,
    pub order: Vec<usize>,
    pub cursor: usize,
    pub window_sum: f64,
    pub window_count: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: u64,
    pub config: ModelConfig,
    pub params: ParamStore,
    pub optimizer: OptimizerState,
    pub trainer: TrainerState,
}

impl Checkpoint {
    pub fn capture<M: Autoregressive>(model: &M, optimizer: &OptimizerState, trainer: &TrainerState) -> Self {
        Self {
            fingerprint: model.config().fingerprint(),
            config: model.config().clone(),
            params: model.params().clone(),
            optimizer: optimizer.clone(),
            trainer: trainer.clone(),
        }
    }

    /// Weights-only checkpoint (fresh optimizer, seed-0 trainer).
    pub fn weights<M: Autoregressive>(model: &M) -> Self {
        Self::capture(
            model,
            &OptimizerState::new(OptimizerKind::Adam, model.params()),
            &TrainerState::new(0),
        )
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    /// Copies the stored parameters into `model` after checking that it was
    /// built from the same configuration.
    pub fn restore_into<M: Autoregressive>(&self, model: &mut M) -> Result<()> {
        let expected = model.config().fingerprint();
        if self.fingerprint != expected {
            return Err(Error::Fingerprint {
                found: self.fingerprint,
                expected,
            });
        }
        let target = model.params();
        if target.len() != self.params.len()
            || target
                .iter()
                .zip(self.params.iter())
                .any(|((_, na, a), (_, nb, b))| na != nb || a.shape() != b.shape())
        {
            return Err(Error::Invalid("checkpoint parameter layout differs from the model".into()));
        }
        *model.params_mut() = self.params.clone();
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u64(self.fingerprint);
        w.u64(self.optimizer.step);
        w.str(&self.config.to_kv());
        w.bytes(&self.trainer.rng.key);
        w.u64(self.trainer.rng.stream);
        w.bytes(&self.trainer.rng.word_pos.to_le_bytes());
        w.u32(self.params.len() as u32);
        for (_, name, v) in self.params.iter() {
            w.str(name);
            w.tensor(v);
        }
        w.u8(match self.optimizer.kind {
            OptimizerKind::SgdMomentum => 0,
            OptimizerKind::Adam => 1,
        });
        w.u32(self.optimizer.first.len() as u32);
        for t in self.optimizer.first.iter().chain(&self.optimizer.second) {
            w.tensor(t);
        }
        w.u64(self.trainer.order.len() as u64);
        for &i in &self.trainer.order {
            w.u64(i as u64);
        }
        w.u64(self.trainer.cursor as u64);
        w.f64(self.trainer.window_sum);
        w.u64(self.trainer.window_count);
        let digest = Sha256::digest(&w.buf);
        w.bytes(&digest);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum);
        }
        let mut r = Reader { buf: body, pos: 12 };
        let fingerprint = r.u64()?;
        let step = r.u64()?;
        let config = ModelConfig::from_kv(&r.str()?)?;
        let key: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.str()?;
            let value = r.tensor()?;
            params.add(name, value);
        }
        let kind = match r.u8()? {
            0 => OptimizerKind::SgdMomentum,
            1 => OptimizerKind::Adam,
            k => return Err(r.error(&format!("unknown optimizer tag {k}"))),
        };
        let slots = r.u32()? as usize;
        let first = (0..slots).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let second = (0..slots).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let order_len = r.u64()? as usize;
        let order = (0..order_len).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let cursor = r.u64()? as usize;
        let window_sum = r.f64()?;
        let window_count = r.u64()?;
        if r.pos != body.len() {
            return Err(r.error("trailing bytes"));
        }
        Ok(Self {
            fingerprint,
            config,
            params,
            optimizer: OptimizerState {
                kind,
                step,
                first,
                second,
            },
            trainer: TrainerState {
                rng: RngState { key, stream, word_pos },
                order,
                cursor,
                window_sum,
                window_count,
            },
        })
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ck.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_bits().to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &x in t.data() {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn error(&self, detail: &str) -> Error {
        Error::Format {
            offset: self.pos,
            detail: detail.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.error("truncated checkpoint"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        self.u64().map(f64::from_bits)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format {
            offset: at,
            detail: "invalid utf-8".into(),
        })
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(self.error("truncated tensor"));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(&shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Conditioning;
    use crate::model::GatedPixelCNN;
    use crate::rng::Rng;
    use crate::train::{train_step, TrainConfig};

    fn trained() -> Checkpoint {
        let mut model = GatedPixelCNN::new(ModelConfig::tiny(4, 4, 1, 4), 1).unwrap();
        let cfg = TrainConfig::default();
        let mut opt = OptimizerState::new(cfg.optimizer, model.params());
        let mut rng = Rng::new(3);
        let x = Tensor::from_fn(&[2, 1, 4, 4], |_| rng.below(4) as f64);
        train_step(&mut model, &x, &Conditioning::None, &mut opt, &cfg).unwrap();
        let mut trainer = TrainerState::new(5);
        trainer.order = vec![3, 1, 2];
        trainer.cursor = 1;
        trainer.window_sum = 1.0 / 3.0;
        trainer.window_count = 1;
        Checkpoint::capture(&model, &opt, &trainer)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = trained();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        for ((_, _, a), (_, _, b)) in ck.params.iter().zip(back.params.iter()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corruption_and_version_detected() {
        let bytes = trained().to_bytes();
        for at in [20, bytes.len() / 2, bytes.len() - 40, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[at] ^= 0x10;
            assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checksum)), "byte {at}");
        }
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Version { found: 9, .. })));
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn fingerprint_mismatch_is_explicit() {
        let ck = trained();
        let mut other = GatedPixelCNN::new(ModelConfig::tiny(4, 4, 1, 8), 1).unwrap();
        assert!(matches!(ck.restore_into(&mut other), Err(Error::Fingerprint { .. })));
        let mut same = GatedPixelCNN::new(ModelConfig::tiny(4, 4, 1, 4), 9).unwrap();
        ck.restore_into(&mut same).unwrap();
        assert_eq!(same.params(), &ck.params);
    }
}

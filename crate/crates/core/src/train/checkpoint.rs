//! Binary checkpoint format.
//!
//! ```text
//! "CLPNET\0"  u32 version  u64 iteration  [u8; 32] config sha256
//! u64 len, config text
//! [u8; 32] rng seed  u64 rng stream  u128 rng word position
//! u64 count, parameter entries
//! u64 count, momentum entries
//! entry: u32 name len, name, u32 ndim, u64 dims..., f32 values...
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::param::{Parameterized, Slot};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 7] = b"CLPNET\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl NamedTensor {
    pub fn from_tensor<T: Scalar>(name: String, t: &Tensor<T>) -> Self {
        Self {
            name,
            shape: t.shape().to_vec(),
            values: t.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::new(&self.shape, self.values.iter().map(|&v| T::lit(v as f64)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub iteration: u64,
    pub config_digest: [u8; 32],
    /// Canonical run configuration; enough to rebuild the model.
    pub config_text: String,
    pub rng: RngState,
    /// Parameters and batch-norm buffers, in model traversal order.
    pub params: Vec<NamedTensor>,
    pub momentum: Vec<NamedTensor>,
}

pub fn config_digest(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

impl Checkpoint {
    pub fn capture<T: Scalar>(
        model: &dyn Parameterized<T>,
        momentum: &std::collections::BTreeMap<String, Tensor<T>>,
        rng: &ChaCha8Rng,
        iteration: u64,
        config_text: &str,
    ) -> Self {
        let mut params = Vec::new();
        model.visit("", &mut |name, slot| params.push(NamedTensor::from_tensor(name, slot.tensor())));
        Self {
            version: FORMAT_VERSION,
            iteration,
            config_digest: config_digest(config_text),
            config_text: config_text.to_string(),
            rng: RngState::capture(rng),
            params,
            momentum: momentum
                .iter()
                .map(|(n, t)| NamedTensor::from_tensor(n.clone(), t))
                .collect(),
        }
    }

    /// Copies every stored tensor into `model`; names and shapes must match
    /// exactly.
    pub fn restore_into<T: Scalar>(&self, model: &mut dyn Parameterized<T>) -> Result<()> {
        let mut stored: std::collections::BTreeMap<&str, &NamedTensor> =
            self.params.iter().map(|e| (e.name.as_str(), e)).collect();
        let mut failure = None;
        model.visit_mut("", &mut |name, slot| {
            if failure.is_some() {
                return;
            }
            let target = match slot {
                Slot::Param(p) => &mut p.value,
                Slot::Buffer(b) => b,
            };
            match stored.remove(name.as_str()) {
                None => failure = Some(format!("missing tensor {name}")),
                Some(e) if e.shape != target.shape() => {
                    failure = Some(format!("{name}: stored shape {:?}, model expects {:?}", e.shape, target.shape()))
                }
                Some(e) => match e.to_tensor() {
                    Ok(t) => *target = t,
                    Err(err) => failure = Some(err.to_string()),
                },
            }
        });
        if let Some(reason) = failure {
            return Err(Error::Data(format!("checkpoint does not fit the model: {reason}")));
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::Data(format!("checkpoint has unknown tensor {extra}")));
        }
        Ok(())
    }

    pub fn momentum_tensors<T: Scalar>(&self) -> Result<std::collections::BTreeMap<String, Tensor<T>>> {
        self.momentum
            .iter()
            .map(|e| Ok((e.name.clone(), e.to_tensor()?)))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.config_digest);
        out.extend_from_slice(&(self.config_text.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        for list in [&self.params, &self.momentum] {
            out.extend_from_slice(&(list.len() as u64).to_le_bytes());
            for e in list {
                out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
                out.extend_from_slice(e.name.as_bytes());
                out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
                for &d in &e.shape {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &v in &e.values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            origin,
        };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(r.fail("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let iteration = r.u64("iteration")?;
        let digest: [u8; 32] = r.take(32, "config digest")?.try_into().unwrap();
        let len = r.len("config length")?;
        let config_text = String::from_utf8(r.take(len, "config text")?.to_vec())
            .map_err(|_| r.fail("config text is not UTF-8".into()))?;
        if config_digest(&config_text) != digest {
            return Err(r.fail("config digest does not match config text".into()));
        }
        let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().unwrap();
        let stream = r.u64("rng stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().unwrap());
        let params = r.entries("parameter")?;
        let momentum = r.entries("momentum")?;
        if r.pos != bytes.len() {
            return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            version,
            iteration,
            config_digest: digest,
            config_text,
            rng: RngState { seed, stream, word_pos },
            params,
            momentum,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: String) -> Error {
        Error::Checkpoint {
            path: self.origin.to_path_buf(),
            reason,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            self.fail(format!(
                "truncated at byte {} reading {what} ({n} bytes needed, {} left)",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    /// A u64 length that must fit in the remaining bytes.
    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        usize::try_from(n).map_err(|_| self.fail(format!("{what} {n} too large")))
    }

    fn entries(&mut self, what: &str) -> Result<Vec<NamedTensor>> {
        let count = self.len(&format!("{what} count"))?;
        let mut out = Vec::new();
        for _ in 0..count {
            let n = self.u32(&format!("{what} name length"))? as usize;
            let name = String::from_utf8(self.take(n, &format!("{what} name"))?.to_vec())
                .map_err(|_| self.fail(format!("{what} name is not UTF-8")))?;
            let ndim = self.u32(&format!("{name} rank"))? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(self.len(&format!("{name} shape"))?);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|c| c.checked_mul(4))
                .ok_or_else(|| self.fail(format!("{name}: shape {shape:?} overflows")))?;
            let raw = self.take(count, &format!("{name} values"))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.push(NamedTensor { name, shape, values });
        }
        Ok(out)
    }
}

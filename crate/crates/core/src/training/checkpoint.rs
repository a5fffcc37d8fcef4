//! Binary container: `b"LXF1"`, `u32` version, `u32` tensor count, then per
//! tensor a `u32`-length UTF-8 name, a dtype tag byte, a `u32` rank, `u64`
//! dims and the little-endian `f32` payload, and finally a `u32`-length
//! JSON metadata block. All integers are little-endian.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::nn::Module;
use crate::tensor::{DType, Tensor};

pub const MAGIC: [u8; 4] = *b"LXF1";
pub const VERSION: u32 = 1;

/// Position of a ChaCha8 stream, enough to continue it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// `u128` word position as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self.word_pos.parse().map_err(|_| {
            CheckpointError::BadMetadata(format!("rng word position {:?}", self.word_pos))
        })?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `"enhancer"` or `"recognizer"`.
    pub kind: String,
    pub step: u64,
    /// SHA-256 (hex) of the resolved configuration that produced the state.
    pub config_hash: String,
    pub rng: Option<RngState>,
    /// Free-form extras (variant, optimizer step, ...).
    #[serde(default)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub meta: CheckpointMeta,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .ok_or(CheckpointError::Truncated(what))?;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or(CheckpointError::Truncated(what))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Self {
            tensors: Vec::new(),
            meta,
        }
    }

    /// Every tensor (parameters and buffers) of `module`, in visiting order.
    pub fn push_module(&mut self, module: &dyn Module) {
        module.visit(&mut |name, _, t| self.tensors.push((name.to_string(), t.clone())));
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies stored tensors into `module`; every module tensor must be
    /// present with the same shape.
    pub fn restore_module(&self, module: &mut dyn Module) -> Result<()> {
        let mut failure: Option<CheckpointError> = None;
        module.visit(&mut |name, _, t| {
            if failure.is_some() {
                return;
            }
            match self.get(name) {
                None => failure = Some(CheckpointError::Missing(name.to_string())),
                Some(s) if s.shape() != t.shape() => {
                    failure = Some(CheckpointError::ShapeMismatch {
                        name: name.to_string(),
                        expected: t.shape().to_vec(),
                        found: s.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        });
        if let Some(e) = failure {
            return Err(e.into());
        }
        module.visit_mut(&mut |name, _, t| {
            *t = self.get(name).expect("checked above").clone();
        });
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DType::F32.tag());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic).into());
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version).into());
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| CheckpointError::BadName)?
                .to_string();
            let tag = r.take(1, "dtype")?[0];
            if DType::from_tag(tag) != Some(DType::F32) {
                return Err(CheckpointError::UnknownDtype(tag).into());
            }
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64("shape")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or(CheckpointError::Truncated("payload"))?;
            let payload = r.take(
                numel
                    .checked_mul(4)
                    .ok_or(CheckpointError::Truncated("payload"))?,
                "payload",
            )?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let len = r.u32("metadata length")? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(len, "metadata")?)
            .map_err(|e| CheckpointError::BadMetadata(e.to_string()))?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos).into());
        }
        Ok(Self { tensors, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(CheckpointMeta {
            kind: "enhancer".into(),
            step: 42,
            config_hash: "ab".into(),
            rng: Some(RngState::capture(&ChaCha8Rng::seed_from_u64(1))),
            extra: Default::default(),
        });
        c.push("a", Tensor::from_fn([2, 3], |i| i as f32 * 0.25 - 1.0));
        c.push("b", Tensor::full([1], f32::MIN_POSITIVE));
        c
    }

    #[test]
    fn roundtrip_is_byte_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Checkpoint(CheckpointError::BadMagic(_)))
        ));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&v2),
            Err(Error::Checkpoint(CheckpointError::UnsupportedVersion(2)))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Checkpoint(CheckpointError::Truncated(_)))
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&long),
            Err(Error::Checkpoint(CheckpointError::TrailingBytes(1)))
        ));
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..13 {
            rng.next_u32();
        }
        let mut back = RngState::capture(&rng).restore().unwrap();
        for _ in 0..50 {
            assert_eq!(rng.next_u64(), back.next_u64());
        }
    }
}

//! Binary checkpoint format.
//!
//! ```text
//! magic        4 bytes  "ASRG"
//! version      u32 LE
//! config       u64 LE byte length, UTF-8 `key = value` text
//! 3 groups     model tensors, optimizer state, RNG state; each is
//!              u64 LE record count followed by records:
//!                name length u64 LE, name bytes (UTF-8),
//!                rank u64 LE, dims u64 LE × rank,
//!                payload f64 LE × product(dims)
//! ```
//!
//! Integers in the optimizer and RNG groups are stored as exact `f64`
//! values (32-bit limbs where wider than 53 bits).

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"ASRG";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        NamedTensor {
            name: name.into(),
            tensor,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub model: Vec<NamedTensor>,
    pub optimizer: Vec<NamedTensor>,
    pub rng: Vec<NamedTensor>,
}

fn find<'a>(group: &'a [NamedTensor], name: &str) -> Option<&'a Tensor> {
    group.iter().find(|t| t.name == name).map(|t| &t.tensor)
}

impl Checkpoint {
    pub fn model_tensor(&self, name: &str) -> Option<&Tensor> {
        find(&self.model, name)
    }

    pub fn optimizer_tensor(&self, name: &str) -> Option<&Tensor> {
        find(&self.optimizer, name)
    }

    pub fn rng_tensor(&self, name: &str) -> Option<&Tensor> {
        find(&self.rng, name)
    }

    pub fn has_model_prefix(&self, prefix: &str) -> bool {
        self.model.iter().any(|t| t.name.starts_with(prefix))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        for group in [&self.model, &self.optimizer, &self.rng] {
            out.extend_from_slice(&(group.len() as u64).to_le_bytes());
            for t in group {
                out.extend_from_slice(&(t.name.len() as u64).to_le_bytes());
                out.extend_from_slice(t.name.as_bytes());
                let shape = t.tensor.shape();
                out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
                for &d in shape {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for v in t.tensor.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let len = r.len()?;
        let config = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
        let model = r.group()?;
        let optimizer = r.group()?;
        let rng = r.group()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the RNG group",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config,
            model,
            optimizer,
            rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A length that must fit in the remaining input.
    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > (self.bytes.len() - self.pos) as u64 {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        Ok(v as usize)
    }

    fn group(&mut self) -> Result<Vec<NamedTensor>> {
        let count = self.len()?;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let n = self.len()?;
            let name = String::from_utf8(self.take(n)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = self.len()?;
            let shape = (0..rank)
                .map(|_| self.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let bytes = count
                .and_then(|c| c.checked_mul(8))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: invalid dims {shape:?}")))?;
            let data = self
                .take(bytes)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect::<Vec<_>>();
            debug_assert_eq!(data.len(), numel(&shape));
            let tensor = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            out.push(NamedTensor { name, tensor });
        }
        Ok(out)
    }
}

/// Named tensors for every store entry, prefixed.
pub fn export_store(store: &ParamStore, prefix: &str) -> Vec<NamedTensor> {
    store
        .iter()
        .map(|(_, name, _, t)| NamedTensor::new(format!("{prefix}{name}"), t.clone()))
        .collect()
}

/// Fills every store entry from `prefix`-named tensors. Missing, extra or
/// misshapen tensors are errors naming the tensor.
pub fn import_store(store: &mut ParamStore, group: &[NamedTensor], prefix: &str) -> Result<()> {
    let names: Vec<String> = store.iter().map(|(_, n, _, _)| n.to_string()).collect();
    for name in &names {
        let full = format!("{prefix}{name}");
        let t = find(group, &full)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint is missing tensor `{full}`")))?;
        store.set(name, t.clone()).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("tensor `{full}`: {msg}")),
            other => other,
        })?;
    }
    for t in group.iter().filter(|t| t.name.starts_with(prefix)) {
        let local = &t.name[prefix.len()..];
        if store.id(local).is_none() {
            return Err(Error::Checkpoint(format!(
                "checkpoint tensor `{}` has no counterpart in the architecture",
                t.name
            )));
        }
    }
    Ok(())
}

/// Exact `f64` encoding of an integer as 32-bit limbs, least significant first.
pub fn limbs(value: u128, count: usize) -> Tensor {
    Tensor::from_fn(&[count], |i| ((value >> (32 * i)) & 0xffff_ffff) as f64)
}

pub fn from_limbs(t: &Tensor) -> Result<u128> {
    let mut v = 0u128;
    for (i, &x) in t.data().iter().enumerate() {
        if !(0.0..=u32::MAX as f64).contains(&x) || x.fract() != 0.0 || i >= 4 {
            return Err(Error::Checkpoint(format!("invalid integer limb {x}")));
        }
        v |= (x as u128) << (32 * i);
    }
    Ok(v)
}

pub fn scalar_u64(value: u64) -> Tensor {
    limbs(value as u128, 2)
}

pub fn read_u64(group: &[NamedTensor], name: &str) -> Result<u64> {
    let t = find(group, name).ok_or_else(|| Error::Checkpoint(format!("checkpoint is missing `{name}`")))?;
    u64::try_from(from_limbs(t)?).map_err(|_| Error::Checkpoint(format!("`{name}` overflows u64")))
}

/// Full generator state of a ChaCha stream.
pub fn export_rng(rng: &ChaCha8Rng, prefix: &str) -> Vec<NamedTensor> {
    let seed = rng.get_seed();
    vec![
        NamedTensor::new(format!("{prefix}seed"), Tensor::from_fn(&[32], |i| seed[i] as f64)),
        NamedTensor::new(format!("{prefix}stream"), scalar_u64(rng.get_stream())),
        NamedTensor::new(format!("{prefix}word_pos"), limbs(rng.get_word_pos(), 4)),
    ]
}

pub fn import_rng(group: &[NamedTensor], prefix: &str) -> Result<ChaCha8Rng> {
    use rand::SeedableRng;
    let name = format!("{prefix}seed");
    let seed_t = find(group, &name).ok_or_else(|| Error::Checkpoint(format!("checkpoint is missing `{name}`")))?;
    if seed_t.len() != 32 {
        return Err(Error::Checkpoint(format!("`{name}` must hold 32 bytes")));
    }
    let mut seed = [0u8; 32];
    for (s, &v) in seed.iter_mut().zip(seed_t.data()) {
        if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
            return Err(Error::Checkpoint(format!("`{name}` holds a non-byte value {v}")));
        }
        *s = v as u8;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(read_u64(group, &format!("{prefix}stream"))?);
    let wp_name = format!("{prefix}word_pos");
    let wp = find(group, &wp_name).ok_or_else(|| Error::Checkpoint(format!("checkpoint is missing `{wp_name}`")))?;
    rng.set_word_pos(from_limbs(wp)?);
    Ok(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sample() -> Checkpoint {
        Checkpoint {
            config: "steps = 3\n".into(),
            model: vec![NamedTensor::new("g.w", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.2))],
            optimizer: vec![NamedTensor::new("g.step", scalar_u64(7))],
            rng: vec![NamedTensor::new("x", Tensor::scalar(f64::MIN_POSITIVE))],
        }
    }

    #[test]
    fn byte_round_trip() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))));
        }
        let mut v = bytes.clone();
        v[4] = 9;
        let err = Checkpoint::from_bytes(&v).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
        let mut m = bytes;
        m[0] = b'X';
        assert!(Checkpoint::from_bytes(&m).is_err());
    }

    #[test]
    fn rng_state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..13 {
            rng.random::<u32>();
        }
        let mut restored = import_rng(&export_rng(&rng, "r."), "r.").unwrap();
        let a: Vec<u64> = (0..20).map(|_| rng.random()).collect();
        let b: Vec<u64> = (0..20).map(|_| restored.random()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn limbs_are_exact() {
        for v in [0u128, 1, u64::MAX as u128, u128::MAX >> 3] {
            assert_eq!(from_limbs(&limbs(v, 4)).unwrap(), v);
        }
    }
}

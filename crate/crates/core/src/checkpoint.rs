//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     b"ADAVICKP"
//! version   u32
//! digest    u32 length, UTF-8 bytes
//! rng       seed u64, stream u64, word position u128
//! index     u32 count, then per parameter:
//!           u32 name length, UTF-8 name, u8 group, u32 rank, u64 per axis
//! values    f64 per element, parameters in index order
//! optimizer u8 flag; when 1: u64 step, then first and second moments,
//!           each laid out like the values section
//! ```
//!
//! Decoding rejects trailing bytes, so a decoded checkpoint encodes back to
//! the same bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::{ParamGroup, ParamStore};
use crate::rng::RngPosition;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ADAVICKP";
pub const FORMAT_VERSION: u32 = 1;

/// Caps applied while decoding untrusted input.
const MAX_RANK: usize = 16;
const MAX_NAME: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub digest: String,
    pub rng: RngPosition,
    pub params: Vec<Entry>,
    pub optimizer: Option<OptimizerState>,
}

fn group_code(g: ParamGroup) -> u8 {
    match g {
        ParamGroup::Encoder => 0,
        ParamGroup::AffineShift => 1,
        ParamGroup::AffineScale => 2,
        ParamGroup::Maf => 3,
        ParamGroup::Mfvi => 4,
    }
}

fn group_from_code(c: u8) -> Result<ParamGroup> {
    ParamGroup::ALL
        .into_iter()
        .find(|g| group_code(*g) == c)
        .ok_or_else(|| Error::Checkpoint(format!("unknown parameter group code {c}")))
}

impl Checkpoint {
    pub fn capture(store: &ParamStore, digest: &str, rng: RngPosition, adam: Option<&Adam>) -> Self {
        let optimizer = adam.filter(|a| a.step_count() > 0).map(|a| {
            let (m, v) = a.moments();
            OptimizerState {
                step: a.step_count(),
                m: m.to_vec(),
                v: v.to_vec(),
            }
        });
        Checkpoint {
            version: FORMAT_VERSION,
            digest: digest.to_string(),
            rng,
            params: store
                .params()
                .iter()
                .map(|p| Entry {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.clone(),
                })
                .collect(),
            optimizer,
        }
    }

    /// Copies the stored values into `store` after checking that the
    /// checkpoint was written for the same model and architecture.
    pub fn restore(&self, store: &mut ParamStore, digest: &str) -> Result<()> {
        if self.digest != digest {
            return Err(Error::Digest {
                expected: digest.to_string(),
                found: self.digest.clone(),
            });
        }
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, the family {}",
                self.params.len(),
                store.len()
            )));
        }
        for (i, e) in self.params.iter().enumerate() {
            let p = &store.params()[i];
            if p.name != e.name || p.value.shape() != e.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "entry {i} is `{}` {:?}, the family expects `{}` {:?}",
                    e.name,
                    e.value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
        for (i, e) in self.params.iter().enumerate() {
            store.set_value(i, e.value.clone())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        put_str(&mut out, &self.digest);
        out.extend_from_slice(&self.rng.seed.to_le_bytes());
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for e in &self.params {
            put_str(&mut out, &e.name);
            out.push(group_code(e.group));
            out.extend_from_slice(&(e.value.shape().len() as u32).to_le_bytes());
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for e in &self.params {
            put_f64s(&mut out, e.value.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.step.to_le_bytes());
                for m in o.m.iter().chain(&o.v) {
                    put_f64s(&mut out, m);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let digest = r.string()?;
        let rng = RngPosition {
            seed: r.u64()?,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.array()?),
        };
        let count = r.u32()? as usize;
        let mut index = Vec::with_capacity(count.min(r.remaining()));
        for _ in 0..count {
            let name = r.string()?;
            let group = group_from_code(r.u8()?)?;
            let rank = r.u32()? as usize;
            if rank > MAX_RANK {
                return Err(Error::Checkpoint(format!("`{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("axis too long".into()))?);
            }
            index.push((name, group, shape));
        }
        let mut params = Vec::with_capacity(index.len());
        let mut sizes = Vec::with_capacity(index.len());
        for (name, group, shape) in index {
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("`{name}` has an overflowing shape")))?;
            let data = r.f64s(n)?;
            sizes.push(n);
            params.push(Entry {
                name,
                group,
                value: Tensor::from_parts(shape, data),
            });
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let m = sizes.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>>>()?;
                let v = sizes.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>>>()?;
                Some(OptimizerState { step, m, v })
            }
            f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Checkpoint {
            version,
            digest,
            rng,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice has length N"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        if n > MAX_NAME {
            return Err(Error::Checkpoint(format!("string of {n} bytes")));
        }
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::Checkpoint("value section overflows".into()))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new();
        store.add("a.w", ParamGroup::Encoder, Tensor::from_parts(vec![2, 3], vec![1.0, -2.5, 0.0, 1e-300, f64::MAX, -0.0]));
        store.add("b", ParamGroup::Maf, Tensor::from_parts(vec![], vec![3.25]));
        let mut adam = Adam::new(1e-3);
        let grads = vec![Tensor::ones(&[2, 3]), Tensor::from_parts(vec![], vec![0.5])];
        adam.step(&mut store, &grads, |_| true).unwrap();
        let mut rng = Rng::with_stream(9, 3);
        rng.normal();
        Checkpoint::capture(&store, "abc123", rng.position(), Some(&adam))
    }

    #[test]
    fn bytes_round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncation_and_trailing_bytes_are_rejected() {
        let bytes = sample().to_bytes();
        for cut in [0, 7, 12, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn digest_mismatch_is_refused() {
        let ck = sample();
        let mut store = ParamStore::new();
        store.add("a.w", ParamGroup::Encoder, Tensor::zeros(&[2, 3]));
        store.add("b", ParamGroup::Maf, Tensor::zeros(&[]));
        assert!(matches!(ck.restore(&mut store, "other"), Err(Error::Digest { .. })));
        ck.restore(&mut store, "abc123").unwrap();
        assert_eq!(store.params()[1].value, ck.params[1].value);
    }
}

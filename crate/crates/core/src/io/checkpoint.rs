use std::path::Path;

use super::write_atomic;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::training::OptimState;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"PAMR1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named parameters plus optional AdamW state, keyed by parameter name.
///
/// Layout, all little-endian: magic, version `u32`, fingerprint `[u8; 32]`,
/// step `u64`, entry count `u32`, then per entry the name (`u32` length +
/// UTF-8), rank `u32`, dims `u64` each and the `f64` payload. A trailing
/// flag byte announces optimizer state: `t u64`, four `f64` hyperparameters,
/// then first and second moments for every entry in entry order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: [u8; 32],
    pub step: u64,
    /// Sorted by name.
    pub entries: Vec<(String, Tensor)>,
    pub optim: Option<CheckpointOptim>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointOptim {
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// `(m, v)` per entry, aligned with `entries`.
    pub moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn capture(params: &ParamSet, fingerprint: [u8; 32], step: u64, optim: Option<&OptimState>) -> Self {
        let mut order: Vec<usize> = (0..params.len()).collect();
        let named: Vec<(&str, &Tensor)> = params.iter().map(|(_, n, t)| (n, t)).collect();
        order.sort_by(|&a, &b| named[a].0.cmp(named[b].0));
        let entries = order
            .iter()
            .map(|&i| {
                (
                    named[i].0.to_string(),
                    Tensor::new(named[i].1.shape(), named[i].1.data().to_vec()).expect("valid tensor"),
                )
            })
            .collect();
        let optim = optim.map(|o| CheckpointOptim {
            t: o.t,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            moments: order.iter().map(|&i| (o.m[i].clone(), o.v[i].clone())).collect(),
        });
        Self { fingerprint, step, entries, optim }
    }

    pub fn check_fingerprint(&self, expected: &[u8; 32], allow_mismatch: bool) -> Result<()> {
        if &self.fingerprint != expected && !allow_mismatch {
            return Err(Error::Compatibility(format!(
                "checkpoint was written for config {} but this model is {}",
                hex(&self.fingerprint),
                hex(expected)
            )));
        }
        Ok(())
    }

    /// Copies every entry into `params`; all parameters must be present.
    pub fn restore(&self, params: &mut ParamSet) -> Result<()> {
        let copied = params.load_matching(self.entries.iter().map(|(n, t)| (n.as_str(), t)))?;
        if copied != params.len() || copied != self.entries.len() {
            return Err(Error::Compatibility(format!(
                "checkpoint has {} entries, model has {} parameters, {copied} matched",
                self.entries.len(),
                params.len()
            )));
        }
        Ok(())
    }

    /// Optimizer state realigned to `params` order.
    pub fn restore_optim(&self, params: &ParamSet) -> Result<Option<OptimState>> {
        let Some(o) = &self.optim else { return Ok(None) };
        let mut state = OptimState::new(params, o.beta1, o.beta2, o.eps, o.weight_decay);
        state.t = o.t;
        for (k, (id, name, t)) in params.iter().enumerate() {
            let pos = self
                .entries
                .binary_search_by(|(n, _)| n.as_str().cmp(name))
                .map_err(|_| Error::Compatibility(format!("no optimizer state for {name}")))?;
            let (m, v) = &o.moments[pos];
            if m.len() != t.numel() {
                return Err(Error::Compatibility(format!("optimizer state for {name} ({id:?}) has wrong length")));
            }
            state.m[k] = m.clone();
            state.v[k] = v.clone();
        }
        Ok(Some(state))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.binary_search_by(|(n, _)| n.as_str().cmp(name)).ok().map(|i| &self.entries[i].1)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, t.data());
        }
        match &self.optim {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.t.to_le_bytes());
                put_f64s(&mut out, &[o.beta1, o.beta2, o.eps, o.weight_decay]);
                for (m, v) in &o.moments {
                    put_f64s(&mut out, m);
                    put_f64s(&mut out, v);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(5)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut fingerprint = [0u8; 32];
        fingerprint.copy_from_slice(r.take(32)?);
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut entries: Vec<(String, Tensor)> = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_string();
            if entries.last().is_some_and(|(prev, _)| prev.as_str() >= name.as_str()) {
                return Err(Error::Format(format!("entry {name:?} out of order")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Format(format!("entry {name:?} is too large")))?;
            let data = r.f64s(numel)?;
            let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("entry {name:?}: {e}")))?;
            entries.push((name, t));
        }
        let optim = match r.take(1)?[0] {
            0 => None,
            1 => {
                let t = r.u64()?;
                let h = r.f64s(4)?;
                let moments = entries
                    .iter()
                    .map(|(_, e)| Ok((r.f64s(e.numel())?, r.f64s(e.numel())?)))
                    .collect::<Result<Vec<_>>>()?;
                Some(CheckpointOptim { t, beta1: h[0], beta2: h[1], eps: h[2], weight_decay: h[3], moments })
            }
            f => return Err(Error::Format(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { fingerprint, step, entries, optim })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
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
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| Error::Format("payload too large".into()))?;
        Ok(self.take(len)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (ParamSet, OptimState) {
        let mut p = ParamSet::new();
        p.add("b.weight", Tensor::new(&[2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap()).unwrap();
        p.add("a.bias", Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
        let mut o = OptimState::new(&p, 0.9, 0.999, 1e-8, 0.05);
        o.t = 7;
        o.m[0] = vec![1.0, 2.0, 3.0, 4.0];
        o.v[1] = vec![5.0, 6.0, 7.0];
        (p, o)
    }

    #[test]
    fn round_trip_bitwise_and_sorted() {
        let (p, o) = sample();
        let c = Checkpoint::capture(&p, [9; 32], 12, Some(&o));
        assert_eq!(c.entries[0].0, "a.bias");
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.get("b.weight").unwrap().data()[1].to_bits(), (-0.0f64).to_bits());
        let restored = back.restore_optim(&p).unwrap().unwrap();
        assert_eq!(restored, o);
    }

    #[test]
    fn truncation_and_magic() {
        let (p, _) = sample();
        let bytes = Checkpoint::capture(&p, [0; 32], 0, None).to_bytes();
        for cut in [0, 4, 20, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut v2 = bytes;
        v2[5] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::Format(_))));
    }

    #[test]
    fn fingerprint_guard() {
        let (p, _) = sample();
        let c = Checkpoint::capture(&p, [1; 32], 0, None);
        assert!(matches!(c.check_fingerprint(&[2; 32], false), Err(Error::Compatibility(_))));
        assert!(c.check_fingerprint(&[2; 32], true).is_ok());
        assert!(c.check_fingerprint(&[1; 32], false).is_ok());
    }

    #[test]
    fn restore_copies_values() {
        let (p, _) = sample();
        let c = Checkpoint::capture(&p, [0; 32], 0, None);
        let mut q = ParamSet::new();
        q.add("b.weight", Tensor::zeros(&[2, 2])).unwrap();
        q.add("a.bias", Tensor::zeros(&[3])).unwrap();
        c.restore(&mut q).unwrap();
        assert_eq!(q.by_name("a.bias").unwrap().data(), &[0.1, 0.2, 0.3]);
    }
}

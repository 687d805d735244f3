//! Binary checkpoint file.
//!
//! Layout, little-endian throughout: magic `LDVA`, u32 version, u32-prefixed
//! config JSON, u64 epoch, u64 output dim, u32 parameter count, then one record
//! per parameter (u32-prefixed name, u8 group, u32 rank, u64 dims, f64 values).
//! The Adam state follows: lr, β1, β2, ε as f64, u64 step, u32 moment count and
//! per moment the name, u64 step, u64 length and the `m` then `v` values.

use std::collections::BTreeMap;
use std::path::Path;

use ldva_core::adam::{AdamState, Moments};
use ldva_core::config::TrainConfig;
use ldva_core::params::{Group, ParamSet};
use ldva_core::trainer::{Checkpoint, CHECKPOINT_VERSION};
use ldva_core::Tensor;

use crate::error::{read, write, Error, Result};

pub const MAGIC: &[u8; 4] = b"LDVA";

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|x| self.f64(*x));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(e) => {
                let s = &self.buf[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}, needed {n} more bytes", self.pos)),
        }
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> std::result::Result<&'a [u8], String> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn string(&mut self) -> std::result::Result<String, String> {
        let at = self.pos;
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| format!("invalid UTF-8 string at byte {at}"))
    }
    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        if n > self.buf.len() / 8 {
            return Err(format!("value count {n} at byte {} exceeds file size", self.pos));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(ck.version);
    w.bytes(&serde_json::to_vec(&ck.config).expect("config serializes"));
    w.u64(ck.epoch as u64);
    w.u64(ck.output_dim as u64);
    w.u32(ck.params.len() as u32);
    for p in ck.params.iter() {
        w.bytes(p.name.as_bytes());
        w.u8(p.group.code());
        w.u32(p.tensor.shape().len() as u32);
        p.tensor.shape().iter().for_each(|&d| w.u64(d as u64));
        w.f64s(p.tensor.data());
    }
    let a = &ck.adam;
    for x in [a.lr, a.beta1, a.beta2, a.eps] {
        w.f64(x);
    }
    w.u64(a.step);
    w.u32(a.moments.len() as u32);
    for (name, m) in &a.moments {
        w.bytes(name.as_bytes());
        w.u64(m.step);
        w.u64(m.m.len() as u64);
        w.f64s(&m.m);
        w.f64s(&m.v);
    }
    w.0
}

pub fn from_bytes(buf: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("bad magic at byte 0, expected `LDVA`".into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {version} at byte 4"));
    }
    let at = r.pos;
    let config: TrainConfig =
        serde_json::from_slice(r.bytes()?).map_err(|e| format!("config JSON at byte {at}: {e}"))?;
    let epoch = r.u64()? as usize;
    let output_dim = r.u64()? as usize;
    let n = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..n {
        let name = r.string()?;
        let at = r.pos;
        let group = Group::from_code(r.u8()?).ok_or_else(|| format!("unknown group code at byte {at}"))?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(format!("rank {rank} of `{name}` is not plausible"));
        }
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("shape overflows")?;
        let data = r.f64s(len)?;
        let t = Tensor::new(&shape, data).map_err(|e| e.to_string())?;
        params.insert(&name, group, t).map_err(|e| e.to_string())?;
    }
    let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let step = r.u64()?;
    let nm = r.u32()?;
    let mut moments = BTreeMap::new();
    for _ in 0..nm {
        let name = r.string()?;
        let mstep = r.u64()?;
        let len = r.u64()? as usize;
        let m = r.f64s(len)?;
        let v = r.f64s(len)?;
        moments.insert(name, Moments { m, v, step: mstep });
    }
    if r.pos != buf.len() {
        return Err(format!("trailing bytes at byte {}", r.pos));
    }
    let adam = AdamState { lr, beta1, beta2, eps, step, moments };
    Ok(Checkpoint { version, config, output_dim, epoch, params, adam })
}

pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    write(path, &to_bytes(ck))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let ck = from_bytes(&read(path)?).map_err(|d| Error::format(path, d))?;
    ck.model().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ldva_core::config::{StageConfig, Task};
    use ldva_core::trainer::Trainer;

    fn checkpoint() -> Checkpoint {
        let mut c = TrainConfig::for_task(Task::Fsl);
        c.input_side = 8;
        c.stages = vec![StageConfig::new(5, 3, 1, 2)];
        c.parts = 2;
        c.prototypes = 3;
        c.hidden = 4;
        let mut t = Trainer::new(c, 3).unwrap();
        let x = Tensor::new(&[2, 1, 8, 8], (0..128).map(|i| (i % 13) as f64 / 13.0).collect()).unwrap();
        t.step_a(&x).unwrap();
        t.checkpoint()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = checkpoint();
        let bytes = to_bytes(&ck);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn corruption_is_located() {
        let bytes = to_bytes(&checkpoint());
        assert!(from_bytes(b"LDVB\x01\0\0\0").unwrap_err().contains("byte 0"));
        let e = from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(e.contains("truncated"), "{e}");
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(from_bytes(&longer).unwrap_err().contains("trailing"));
    }
}

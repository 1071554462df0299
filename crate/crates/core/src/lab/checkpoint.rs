//! Binary parameter checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "LDUL"  u32 version (= 1)
//! u32 T  u8 kind  f64 beta_min  f64 beta_max  T × f64 beta
//! u32 tensor count
//! per tensor, names in lexicographic order:
//!   u16 name length, UTF-8 name, u8 rank, rank × u64 extent, values as f64
//! ```
//!
//! Header fields are validated before any tensor payload is allocated, and
//! every length is checked against the bytes that remain.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"LDUL";
pub const VERSION: u32 = 1;

pub fn encode(params: &ParamStore, schedule: &NoiseSchedule) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let steps = u32::try_from(schedule.steps()).map_err(|_| Error::Format("schedule too long".into()))?;
    out.extend_from_slice(&steps.to_le_bytes());
    out.push(schedule.kind().code());
    let (lo, hi) = schedule.beta_range();
    out.extend_from_slice(&lo.to_le_bytes());
    out.extend_from_slice(&hi.to_le_bytes());
    for b in schedule.betas() {
        out.extend_from_slice(&b.to_le_bytes());
    }
    let count = u32::try_from(params.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    // BTreeMap iteration is already lexicographic.
    for (name, value) in params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(value.rank()).map_err(|_| Error::Format(format!("rank too high: {name}")))?;
        out.push(rank);
        for &e in value.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .filter(|&b| b <= self.remaining())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("truncated while reading {what}")))?;
        Ok(self
            .take(bytes, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ParamStore, NoiseSchedule)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not an LDUL file".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let steps = r.u32("schedule length")? as usize;
    let kind = r.u8("schedule kind")?;
    let kind = ScheduleKind::from_code(kind).ok_or_else(|| Error::CorruptCheckpoint(format!("schedule kind {kind}")))?;
    let lo = f64::from_le_bytes(r.take(8, "beta_min")?.try_into().expect("8 bytes"));
    let hi = f64::from_le_bytes(r.take(8, "beta_max")?.try_into().expect("8 bytes"));
    let betas = r.f64s(steps, "betas")?;
    let schedule = NoiseSchedule::from_parts(kind, lo, hi, betas)
        .map_err(|e| Error::CorruptCheckpoint(format!("schedule: {e}")))?;
    let count = r.u32("tensor count")?;
    let mut store = ParamStore::new();
    let mut previous: Option<String> = None;
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::CorruptCheckpoint("name is not UTF-8".into()))?
            .to_string();
        if previous.as_ref().is_some_and(|p| *p >= name) {
            return Err(Error::CorruptCheckpoint(format!("tensor `{name}` out of order")));
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let e = usize::try_from(r.u64("extent")?)
                .map_err(|_| Error::CorruptCheckpoint(format!("extent of `{name}` overflows")))?;
            numel = numel
                .checked_mul(e)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("size of `{name}` overflows")))?;
            shape.push(e);
        }
        let values = r.f64s(numel, &name)?;
        store.insert(name.clone(), Tensor::new(shape, values)?);
        previous = Some(name);
    }
    if r.remaining() != 0 {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", r.remaining())));
    }
    Ok((store, schedule))
}

pub fn save(path: &Path, params: &ParamStore, schedule: &NoiseSchedule) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    // Write-then-rename so an interrupted save never leaves a partial file
    // under the final name.
    let tmp = path.with_extension("partial");
    fs::write(&tmp, encode(params, schedule)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamStore, NoiseSchedule)> {
    decode(&fs::read(path)?)
}

/// Load `path` and require bitwise-equal values to `expected`.
pub fn verify(path: &Path, expected: &ParamStore) -> Result<()> {
    let (loaded, _) = load(path)?;
    let mismatch = |name: &str| Error::CorruptCheckpoint(format!("value mismatch in `{name}`"));
    if loaded.len() != expected.len() {
        return Err(Error::CorruptCheckpoint("tensor count mismatch".into()));
    }
    for (name, value) in expected.iter() {
        let got = loaded.value(name).ok_or_else(|| mismatch(name))?;
        let same = got.shape() == value.shape()
            && got.data().iter().zip(value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(mismatch(name));
        }
    }
    Ok(())
}

//! Weights-only checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ISR1"  version:u32
//! level channels res_blocks l_freq hidden depth scale : u32   seed:u64
//! arrays:u32  then per array  ndim:u32  dims:u32 × ndim
//! parameters: f32 × Σ∏dims, in SrModel::params order
//! crc32 of everything above : u32
//! ```
//!
//! Optimizer state is not stored.

use std::path::Path;

use thiserror::Error;

use crate::error::Result;
use crate::pipeline::{ModelConfig, ModelMeta, SrModel};
use crate::Real;

pub const MAGIC: &[u8; 4] = b"ISR1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checksum mismatch")]
    Crc,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Serializes the model; `f64` parameters are rounded to `f32`.
pub fn to_bytes<F: Real>(model: &SrModel<F>) -> Vec<u8> {
    let c = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let u32s = |out: &mut Vec<u8>, vs: &[u32]| vs.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    u32s(&mut out, &[VERSION, c.level]);
    let dims = [c.channels, c.res_blocks, c.l_freq, c.hidden, c.depth].map(|v| v as u32);
    u32s(&mut out, &dims);
    u32s(&mut out, &[model.meta.scale]);
    out.extend_from_slice(&model.meta.seed.to_le_bytes());
    let shapes = model.param_shapes();
    u32s(&mut out, &[shapes.len() as u32]);
    for s in &shapes {
        u32s(&mut out, &[s.len() as u32]);
        u32s(&mut out, &s.iter().map(|&d| d as u32).collect::<Vec<_>>());
    }
    for p in model.params() {
        out.extend_from_slice(&(p.f64() as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Dimension(format!("file ends at byte {} while reading {n} more", self.buf.len())))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint. Checks run in order: magic, version, structure and
/// length, checksum, and finally that the dimension table matches the
/// architecture the header describes.
pub fn from_bytes<F: Real>(bytes: &[u8]) -> Result<SrModel<F>> {
    use CheckpointError::*;
    if bytes.len() >= 4 && &bytes[..4] != MAGIC {
        return Err(BadMagic.into());
    }
    let mut r = Reader { buf: bytes, pos: 0 };
    r.take(4)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Version(version).into());
    }
    let mut h = [0u32; 7];
    for v in &mut h {
        *v = r.u32()?;
    }
    let seed = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let arrays = r.u32()? as usize;
    let mut shapes = Vec::new();
    let mut total = 0usize;
    for _ in 0..arrays {
        let nd = r.u32()? as usize;
        let mut s = Vec::with_capacity(nd.min(8));
        for _ in 0..nd {
            s.push(r.u32()? as usize);
        }
        let n = s.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Dimension("array size overflows".into()))?;
        total = total.checked_add(n).ok_or_else(|| Dimension("parameter count overflows".into()))?;
        shapes.push(s);
    }
    let remaining = bytes.len() - r.pos;
    if total.checked_mul(4).and_then(|b| b.checked_add(4)) != Some(remaining) {
        return Err(Dimension(format!("table declares {total} parameters but {remaining} bytes follow")).into());
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Crc.into());
    }
    let config = ModelConfig {
        level: h[0],
        channels: h[1] as usize,
        res_blocks: h[2] as usize,
        l_freq: h[3] as usize,
        hidden: h[4] as usize,
        depth: h[5] as usize,
    };
    let meta = ModelMeta { scale: h[6], seed };
    let mut model = SrModel::<F>::new(config, meta)?;
    if model.param_shapes() != shapes {
        return Err(Dimension(format!("dimension table does not match {config:?}")).into());
    }
    let params: Vec<F> = r.buf[r.pos..bytes.len() - 4]
        .chunks_exact(4)
        .map(|b| F::of(f32::from_le_bytes(b.try_into().unwrap()) as f64))
        .collect();
    model.set_params(&params)?;
    Ok(model)
}

pub fn save_checkpoint<F: Real>(model: &SrModel<F>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint<F: Real>(path: impl AsRef<Path>) -> Result<SrModel<F>> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    fn model() -> SrModel<f32> {
        SrModel::new(ModelConfig::micro(), ModelMeta { scale: 4, seed: 11 }).unwrap()
    }

    fn kind(r: Result<SrModel<f32>>) -> CheckpointError {
        match r {
            Err(Error::Checkpoint(e)) => e,
            other => panic!("expected a checkpoint error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let back: SrModel<f32> = from_bytes(&to_bytes(&m)).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.meta, m.meta);
        let (a, b) = (m.params(), back.params());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = to_bytes(&model());
        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 100] ^= 0x10;
        assert_eq!(kind(from_bytes(&flipped)), CheckpointError::Crc);
        let mut seed = bytes.clone();
        seed[40] ^= 1;
        assert_eq!(kind(from_bytes(&seed)), CheckpointError::Crc);
        for cut in [n - 1, n - 5, 60, 10, 2] {
            assert!(matches!(kind(from_bytes(&bytes[..cut])), CheckpointError::Dimension(_)), "cut {cut}");
        }
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert_eq!(kind(from_bytes(&magic)), CheckpointError::BadMagic);
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert_eq!(kind(from_bytes(&ver)), CheckpointError::Version(9));
    }

    #[test]
    fn mismatched_table_is_a_dimension_error() {
        let m = model();
        let mut other = SrModel::<f32>::new(ModelConfig { hidden: 9, ..ModelConfig::micro() }, m.meta).unwrap();
        other.config.hidden = 8;
        // header says hidden 8 but the table describes hidden 9
        let bytes = to_bytes(&other);
        assert!(matches!(kind(from_bytes(&bytes)), CheckpointError::Dimension(_)));
    }
}

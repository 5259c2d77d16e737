//! Checkpoint format: magic `MDGM`, `u16` version, then for every parameter
//! `u32` name length, name bytes, `u32` rank, `u32` dims, `f32` row-major
//! data. Everything little-endian.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use super::model::{DecomposerParams, DiscriminatorParams, EncoderParams, ModelParams, PARAM_NAMES};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MDGM";
pub const CHECKPOINT_VERSION: u16 = 1;

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Array2<f64>) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&2u32.to_le_bytes());
    for dim in [t.nrows(), t.ncols()] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &x in t.iter() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, t) in PARAM_NAMES.iter().zip(params.tensors()) {
        put_tensor(&mut buf, name, t);
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let out = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Validation(format!("checkpoint truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Validation("not a checkpoint (missing MDGM magic)".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Validation(format!("unsupported checkpoint version {version}")));
    }
    let mut tensors: Vec<(String, Array2<f64>)> = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Validation("checkpoint parameter name is not utf-8".into()))?;
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims.as_slice() {
            [n] => (1, *n),
            [m, n] => (*m, *n),
            _ => return Err(Error::Validation(format!("parameter {name} has rank {rank}"))),
        };
        let data = r
            .take(rows * cols * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push((name, Array2::from_shape_vec((rows, cols), data).expect("sized")));
    }
    let mut get = |name: &str| -> Result<Array2<f64>> {
        let i = tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Validation(format!("checkpoint lacks parameter {name}")))?;
        Ok(tensors.swap_remove(i).1)
    };
    let params = ModelParams {
        encoder: EncoderParams { w1: get("encoder.w1")?, w2: get("encoder.w2")? },
        discriminator: DiscriminatorParams { w: get("discriminator.w")?, b: get("discriminator.b")? },
        decomposer: DecomposerParams { w: get("decomposer.w")?, b: get("decomposer.b")? },
    };
    let h = params.hidden();
    let consistent = params.encoder.w1.ncols() == h
        && params.encoder.w2.nrows() == h
        && params.discriminator.w.dim() == (h, 2)
        && params.discriminator.b.dim() == (1, 2)
        && params.decomposer.w.nrows() == h
        && params.decomposer.b.dim() == (1, params.decomposer.w.ncols());
    if !consistent {
        return Err(Error::DimensionMismatch("checkpoint parameter shapes disagree".into()));
    }
    Ok(params)
}

pub fn save(path: &Path, params: &ModelParams) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// SHA-256 over the encoder weights as stored in a checkpoint.
pub fn encoder_hash(enc: &EncoderParams) -> String {
    let mut buf = Vec::new();
    put_tensor(&mut buf, "encoder.w1", &enc.w1);
    put_tensor(&mut buf, "encoder.w2", &enc.w2);
    let digest = Sha256::digest(&buf);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn round_trip_after_f32_rounding() {
        let mut p = ModelParams::init(5, 7, 3, &mut seed::rng(9, "ckpt"));
        p.round_to_f32();
        let bytes = encode(&p);
        assert_eq!(&bytes[..4], b"MDGM");
        assert_eq!(&bytes[4..6], &1u16.to_le_bytes());
        assert_eq!(decode(&bytes).unwrap(), p);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
    }
}

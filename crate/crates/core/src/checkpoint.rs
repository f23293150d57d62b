//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "IBFTCKPT"
//! version   u32
//! header    u32 length + JSON ({"kind": ..., ...config})
//! count     u32
//! tensors   count × (u32 name length, name, u32 rank, rank × u64 dims, f64 data)
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a round trip is exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bottleneck::BottleneckEncoder;
use crate::error::{Error, Result};
use crate::params::Params;
use crate::tensor::Tensor;
use crate::transformer::{TransformerConfig, TransformerModel};

pub const MAGIC: &[u8; 8] = b"IBFTCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Header {
    Model { config: TransformerConfig },
    Encoder { d_model: usize, d_z: usize },
}

pub fn encode(header: &Header, params: &Params) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(header)?;
    put_len(&mut out, json.len())?;
    out.extend_from_slice(&json);
    put_len(&mut out, params.len())?;
    for (name, t) in params.iter() {
        put_len(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_len(&mut out, t.shape().len())?;
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} exceeds u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Header, Params)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = r.u32()?;
    let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let count = r.u32()?;
    let mut params = Params::new();
    for _ in 0..count {
        let nlen = r.u32()?;
        let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| Error::Checkpoint("non-utf8 tensor name".into()))?.to_string();
        let rank = r.u32()?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("dimension overflow".into()))?);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        params.push(name, t);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((header, params))
}

pub fn model_bytes(model: &TransformerModel) -> Result<Vec<u8>> {
    encode(&Header::Model { config: model.config().clone() }, model.params())
}

pub fn encoder_bytes(encoder: &BottleneckEncoder) -> Result<Vec<u8>> {
    encode(&Header::Encoder { d_model: encoder.d_model(), d_z: encoder.d_z() }, encoder.params())
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<TransformerModel> {
    match decode(bytes)? {
        (Header::Model { config }, params) => TransformerModel::from_params(config, params),
        _ => Err(Error::Checkpoint("expected a model checkpoint, found an encoder".into())),
    }
}

pub fn encoder_from_bytes(bytes: &[u8]) -> Result<BottleneckEncoder> {
    match decode(bytes)? {
        (Header::Encoder { d_model, d_z }, params) => BottleneckEncoder::from_params(d_model, d_z, params),
        _ => Err(Error::Checkpoint("expected an encoder checkpoint, found a model".into())),
    }
}

pub fn save_model(path: &Path, model: &TransformerModel) -> Result<()> {
    fs::write(path, model_bytes(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TransformerModel> {
    model_from_bytes(&fs::read(path)?)
}

pub fn save_encoder(path: &Path, encoder: &BottleneckEncoder) -> Result<()> {
    fs::write(path, encoder_bytes(encoder)?)?;
    Ok(())
}

pub fn load_encoder(path: &Path) -> Result<BottleneckEncoder> {
    encoder_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TransformerConfig {
        TransformerConfig { vocab_size: 40, d_model: 8, n_layers: 2, n_heads: 2, d_ff: 16, max_seq_len: 16, tap_layer: 1 }
    }

    #[test]
    fn model_round_trip_is_exact() {
        let m = TransformerModel::init(tiny(), 3).unwrap();
        let bytes = model_bytes(&m).unwrap();
        assert_eq!(model_from_bytes(&bytes).unwrap(), m);
        let e = BottleneckEncoder::init(8, 2, 3).unwrap();
        assert_eq!(encoder_from_bytes(&encoder_bytes(&e).unwrap()).unwrap(), e);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let m = TransformerModel::init(tiny(), 3).unwrap();
        let bytes = model_bytes(&m).unwrap();
        assert!(model_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(model_from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(model_from_bytes(&magic).is_err());
        let mut version = bytes.clone();
        version[8] = 9;
        assert!(model_from_bytes(&version).is_err());
        assert!(encoder_from_bytes(&bytes).is_err());
    }
}

//! Binary checkpoint container for [`ModelParams`].
//!
//! Layout (all integers `u32` little-endian, all reals `f64` little-endian):
//!
//! ```text
//! "LGAM" | version | layer count
//! per layer: rows | cols | rows*cols weights (row-major) | cols biases
//! activation id | feature_dim | class_count
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Activation, Dense, ModelParams};
use crate::tensor::Tensor2;

pub const MAGIC: &[u8; 4] = b"LGAM";
pub const FORMAT_VERSION: u32 = 1;

/// Exact size in bytes of the encoded checkpoint.
pub fn encoded_len(model: &ModelParams) -> usize {
    4 + 4 + 4 + model.layers.iter().map(|l| 8 + 8 * l.param_count()).sum::<usize>() + 12
}

pub fn encode(model: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(model));
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, model.layers.len() as u32);
    for layer in &model.layers {
        put_u32(&mut out, layer.input_dim() as u32);
        put_u32(&mut out, layer.output_dim() as u32);
        for v in layer.weights.values().iter().chain(&layer.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    put_u32(&mut out, model.activation.id());
    put_u32(&mut out, model.feature_dim() as u32);
    put_u32(&mut out, model.class_count() as u32);
    out
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("missing LGAM magic".into()));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let weights = cur.f64s(rows * cols)?;
        let bias = cur.f64s(cols)?;
        layers.push(Dense { weights: Tensor2::from_vec(rows, cols, weights)?, bias });
    }
    let activation = Activation::from_id(cur.u32()?)?;
    let feature_dim = cur.u32()? as usize;
    let class_count = cur.u32()? as usize;
    if cur.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    let model = ModelParams::from_layers(layers, activation)?;
    if model.feature_dim() != feature_dim || model.class_count() != class_count {
        return Err(Error::Format("header widths disagree with layer shapes".into()));
    }
    Ok(model)
}

pub fn write_file(model: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(model))?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut rng = seeded(2);
        let model = ModelParams::new_random(&[4, 3, 2], Activation::Sigmoid, &mut rng).unwrap();
        let bytes = encode(&model);
        assert_eq!(&bytes[..4], b"LGAM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), encoded_len(&model));
        let w00 = f64::from_le_bytes(bytes[20..28].try_into().unwrap());
        assert_eq!(w00.to_bits(), model.layers[0].weights.get(0, 0).to_bits());
    }

    #[test]
    fn rejects_corruption() {
        let mut rng = seeded(2);
        let model = ModelParams::new_random(&[4, 3, 2], Activation::Sigmoid, &mut rng).unwrap();
        let bytes = encode(&model);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(seed in any::<u64>(), widths in prop::collection::vec(1usize..6, 2..5)) {
            let mut rng = seeded(seed);
            let model = ModelParams::new_random(&widths, Activation::Sigmoid, &mut rng).unwrap();
            let back = decode(&encode(&model)).unwrap();
            prop_assert_eq!(encode(&back), encode(&model));
        }
    }
}

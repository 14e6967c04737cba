//! Binary checkpoint format.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "MTCK" | version | input_size input_channels conv1_filters conv2_filters
//!                    kernel pool num_classes
//! then six records in order conv1_weight, conv1_bias, conv2_weight,
//! conv2_bias, dense_weight, dense_bias:
//!     name_len | name bytes | rank | dims[rank] | f32 LE payload
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::CheckpointError;
use crate::model::{ArchitectureConfig, ModelParams, PARAM_NAMES};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MTCK";
pub const VERSION: u32 = 1;

pub fn encode(params: &ModelParams<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 4 * params.param_count());
    let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let c = params.config();
    for v in [
        c.input_size,
        c.input_channels,
        c.conv1_filters,
        c.conv2_filters,
        c.kernel,
        c.pool,
        c.num_classes,
    ] {
        put(&mut out, v);
    }
    for (name, t) in PARAM_NAMES.iter().zip(params.tensors()) {
        put(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put(&mut out, t.rank());
        for &d in t.shape() {
            put(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(params: &ModelParams<f32>, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let mut file = fs::File::create(path)?;
    file.write_all(&encode(params))?;
    file.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams<f32>, CheckpointError> {
    decode(&fs::read(path)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams<f32>, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let mut field = || -> Result<usize, CheckpointError> { Ok(r.u32("config")? as usize) };
    let config = ArchitectureConfig {
        input_size: field()?,
        input_channels: field()?,
        conv1_filters: field()?,
        conv2_filters: field()?,
        kernel: field()?,
        pool: field()?,
        num_classes: field()?,
    };
    config
        .validate()
        .map_err(|e| CheckpointError::InvalidConfig(e.to_string()))?;

    let mut tensors: Vec<Tensor<f32>> = Vec::with_capacity(6);
    for (index, (expected_name, expected_shape)) in config.param_shapes().into_iter().enumerate() {
        let name_len = r.u32("record name length")? as usize;
        let name = r.take(name_len, "record name")?;
        if name != expected_name.as_bytes() {
            return Err(CheckpointError::RecordName {
                index,
                expected: expected_name,
                found: String::from_utf8_lossy(name).into_owned(),
            });
        }
        let rank = r.u32("record rank")? as usize;
        if rank > 8 {
            return Err(CheckpointError::ShapeMismatch {
                name: expected_name,
                expected: expected_shape,
                found: vec![0; rank.min(9)],
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("record dims")? as usize);
        }
        if shape != expected_shape {
            return Err(CheckpointError::ShapeMismatch {
                name: expected_name,
                expected: expected_shape,
                found: shape,
            });
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n * 4, "record payload")?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite(expected_name));
        }
        tensors.push(Tensor::new(shape, data).map_err(|e| CheckpointError::InvalidConfig(e.to_string()))?);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    let tensors: [Tensor<f32>; 6] = tensors
        .try_into()
        .map_err(|_| CheckpointError::Truncated("records"))?;
    ModelParams::from_tensors(config, tensors).map_err(|e| CheckpointError::InvalidConfig(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    fn small() -> ModelParams<f32> {
        build_model(ArchitectureConfig::reduced(8, 3), 11).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = small();
        let bytes = encode(&m);
        let back = decode(&bytes).unwrap();
        for (a, b) in m.tensors().iter().zip(back.tensors()) {
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = encode(&small());
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&bytes), Err(CheckpointError::BadMagic(m)) if &m == b"XXXX"));

        let mut bytes = encode(&small());
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(CheckpointError::UnsupportedVersion(7))));
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let bytes = encode(&small());
        for cut in [2, 6, 20, 40, bytes.len() - 1] {
            assert!(
                matches!(decode(&bytes[..cut]), Err(CheckpointError::Truncated(_))),
                "cut at {cut}"
            );
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(CheckpointError::TrailingBytes(1))));
    }

    #[test]
    fn rejects_dense_dims_disagreeing_with_config() {
        let m = small();
        let mut bytes = encode(&m);
        // Locate the dense_weight record header and patch its first dim.
        let needle = b"dense_weight";
        let at = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        let dim0 = at + needle.len() + 4;
        let f = m.config().dense_inputs() as u32;
        assert_eq!(&bytes[dim0..dim0 + 4], &f.to_le_bytes());
        bytes[dim0..dim0 + 4].copy_from_slice(&(f + 1).to_le_bytes());
        match decode(&bytes) {
            Err(CheckpointError::ShapeMismatch { name, expected, found }) => {
                assert_eq!(name, "dense_weight");
                assert_eq!(expected[0] + 1, found[0]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}

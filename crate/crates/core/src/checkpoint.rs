//! Parameter checkpoint files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic            4 bytes  "SFTW"
//! version          u32      1
//! config           12 x u32 k, slow_stride, slow_channels, fast_channels,
//!                           d_model, n_heads, n_encoders, ffn_dim,
//!                           n_classes, in_channels, input_h, input_w
//! tensor count     u32
//! per tensor       u32 rank, rank x u32 extents, numel x f32 values
//! ```
//!
//! Tensors appear in the model's declared parameter order.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::model::{SftConfig, SftParams};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SFTW";
pub const VERSION: u32 = 1;

fn config_fields(c: &SftConfig) -> [usize; 12] {
    [
        c.k,
        c.slow_stride,
        c.slow_channels,
        c.fast_channels,
        c.d_model,
        c.n_heads,
        c.n_encoders,
        c.ffn_dim,
        c.n_classes,
        c.in_channels,
        c.input_hw.0,
        c.input_hw.1,
    ]
}

fn u32_of(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit in u32")))
}

pub fn encode(params: &SftParams<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(64 + params.num_scalars() * 4);
    out.extend_from_slice(&MAGIC);
    out.write_u32::<LittleEndian>(VERSION).expect("vec write");
    for v in config_fields(params.config()) {
        out.write_u32::<LittleEndian>(u32_of(v)?).expect("vec write");
    }
    out.write_u32::<LittleEndian>(u32_of(params.tensors().len())?)
        .expect("vec write");
    for t in params.tensors() {
        out.write_u32::<LittleEndian>(u32_of(t.rank())?).expect("vec write");
        for &d in t.shape() {
            out.write_u32::<LittleEndian>(u32_of(d)?).expect("vec write");
        }
        for &v in t.data() {
            out.write_f32::<LittleEndian>(v).expect("vec write");
        }
    }
    Ok(out)
}

fn truncated(expected: usize, found: usize) -> Error {
    Error::TruncatedPayload { expected, found }
}

pub fn decode(bytes: &[u8]) -> Result<SftParams<f32>> {
    if bytes.len() < 4 {
        return Err(truncated(4, bytes.len()));
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found,
        });
    }
    let mut r = &bytes[4..];
    let header_len = 4 + 4 * 14;
    let read_u32 = |r: &mut &[u8]| -> Result<usize> {
        r.read_u32::<LittleEndian>()
            .map(|v| v as usize)
            .map_err(|_| truncated(header_len, bytes.len()))
    };
    let version = read_u32(&mut r)? as u32;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mut f = [0usize; 12];
    for v in &mut f {
        *v = read_u32(&mut r)?;
    }
    let config = SftConfig {
        k: f[0],
        slow_stride: f[1],
        slow_channels: f[2],
        fast_channels: f[3],
        d_model: f[4],
        n_heads: f[5],
        n_encoders: f[6],
        ffn_dim: f[7],
        n_classes: f[8],
        in_channels: f[9],
        input_hw: (f[10], f[11]),
    };
    config
        .validate()
        .map_err(|e| Error::HeaderMismatch(format!("invalid config block: {e}")))?;
    let count = read_u32(&mut r)?;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let rank = r
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::HeaderMismatch(format!("tensor {i}: missing rank")))? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::HeaderMismatch(format!("tensor {i}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r
                .read_u32::<LittleEndian>()
                .map_err(|_| Error::HeaderMismatch(format!("tensor {i}: missing extents")))?;
            shape.push(d as usize);
        }
        let numel: usize = shape.iter().product();
        if r.len() < numel * 4 {
            return Err(truncated(bytes.len() - r.len() + numel * 4, bytes.len()));
        }
        let mut data = vec![0f32; numel];
        r.read_f32_into::<LittleEndian>(&mut data).expect("length checked");
        tensors.push(Tensor::new(shape, data).map_err(|e| Error::HeaderMismatch(format!("tensor {i}: {e}")))?);
    }
    if !r.is_empty() {
        return Err(Error::HeaderMismatch(format!(
            "{} trailing bytes after the last tensor",
            r.len()
        )));
    }
    SftParams::from_tensors(&config, tensors)
}

pub fn save(params: &SftParams<f32>, path: &Path) -> Result<()> {
    let bytes = encode(params)?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<SftParams<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| e.in_file(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn params() -> SftParams<f32> {
        let cfg = SftConfig {
            d_model: 8,
            n_heads: 2,
            ffn_dim: 8,
            input_hw: (8, 8),
            ..SftConfig::default()
        };
        SftParams::init(&cfg, &mut Rng::new(1)).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let p = params();
        let bytes = encode(&p).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_magic() {
        let mut bytes = encode(&params()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload() {
        let bytes = encode(&params()).unwrap();
        let cut = &bytes[..bytes.len() - 10];
        assert!(matches!(decode(cut), Err(Error::TruncatedPayload { .. })));
    }

    #[test]
    fn config_shape_mismatch() {
        let mut bytes = encode(&params()).unwrap();
        // d_model (config word 4) 8 -> 16: tensor shapes no longer match
        bytes[8 + 4 * 4..8 + 4 * 5].copy_from_slice(&16u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::HeaderMismatch(_))));
    }

    #[test]
    fn unknown_version() {
        let mut bytes = encode(&params()).unwrap();
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::UnsupportedVersion(9))));
    }
}

//! Binary head dumps.
//!
//! Layout, all integers little-endian:
//!
//! | offset | size | field                           |
//! |--------|------|---------------------------------|
//! | 0      | 7    | magic `RNFQKV1`                 |
//! | 7      | 2    | version (u16, currently 1)      |
//! | 9      | 20   | t, h, w, d, num_heads (u32 each) |
//! | 29     | 1    | dtype tag (u8, 1 = f32)         |
//! | 30     | ...  | per head: Q, K, V, each `n × d` row-major f32 |
//!
//! with `n = t·h·w`. The payload length must match the header exactly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use stsparse_core::{AttentionHead, LatentShape, Matrix};
use thiserror::Error;

pub const MAGIC: &[u8; 7] = b"RNFQKV1";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;
pub const HEADER_LEN: usize = 30;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("{}: not a head dump", path.display())]
    NotADump { path: PathBuf },
    #[error("{}: corrupt dump: {reason}", path.display())]
    Corrupt { path: PathBuf, reason: String },
    #[error("{}: non-finite tensor (head {head}, {tensor})", path.display())]
    NonFinite {
        path: PathBuf,
        head: usize,
        tensor: &'static str,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("inconsistent heads: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadDump {
    pub shape: LatentShape,
    pub heads: Vec<AttentionHead>,
}

impl HeadDump {
    pub fn d(&self) -> usize {
        self.heads.first().map_or(0, |h| h.d())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DumpError + '_ {
    move |source| DumpError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serializes heads into the dump byte layout.
pub fn encode(heads: &[AttentionHead], shape: LatentShape) -> Result<Vec<u8>, DumpError> {
    let d = heads.first().map_or(0, |h| h.d());
    for (i, h) in heads.iter().enumerate() {
        if h.n() != shape.n() {
            return Err(DumpError::Inconsistent(format!(
                "head {i} has {} rows, shape {shape} needs {}",
                h.n(),
                shape.n()
            )));
        }
        if h.d() != d {
            return Err(DumpError::Inconsistent(format!("head {i} has d={}, head 0 has d={d}", h.d())));
        }
    }
    let dims = [shape.t(), shape.h(), shape.w(), d, heads.len()];
    let mut bytes = Vec::with_capacity(HEADER_LEN + heads.len() * 3 * shape.n() * d * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    for x in dims {
        let x = u32::try_from(x).map_err(|_| DumpError::Inconsistent(format!("dimension {x} exceeds u32")))?;
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    bytes.push(DTYPE_F32);
    for h in heads {
        for m in [h.q(), h.k(), h.v()] {
            for x in m.as_slice() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(bytes)
}

/// Parses dump bytes; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<HeadDump, DumpError> {
    let corrupt = |reason: String| DumpError::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(DumpError::NotADump {
            path: path.to_path_buf(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(format!("header truncated at {} bytes", bytes.len())));
    }
    let version = u16::from_le_bytes([bytes[7], bytes[8]]);
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let dim = |i: usize| {
        let o = 9 + 4 * i;
        u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize
    };
    let (t, h, w, d, num_heads) = (dim(0), dim(1), dim(2), dim(3), dim(4));
    if bytes[29] != DTYPE_F32 {
        return Err(corrupt(format!("unknown dtype tag {}", bytes[29])));
    }
    let shape = LatentShape::new(t, h, w).map_err(|e| corrupt(e.to_string()))?;
    if d == 0 {
        return Err(corrupt("head dimension is zero".into()));
    }
    let tensor_len = (shape.n() as u128) * d as u128;
    let expected = HEADER_LEN as u128 + num_heads as u128 * 3 * tensor_len * 4;
    if bytes.len() as u128 != expected {
        return Err(corrupt(format!(
            "payload holds {} bytes, header declares {}",
            bytes.len(),
            expected
        )));
    }
    let tensor_len = tensor_len as usize;
    let mut floats = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let mut heads = Vec::with_capacity(num_heads);
    for head in 0..num_heads {
        let mut take = |tensor: &'static str| -> Result<Matrix, DumpError> {
            let data: Vec<f32> = floats.by_ref().take(tensor_len).collect();
            if data.iter().any(|x| !x.is_finite()) {
                return Err(DumpError::NonFinite {
                    path: path.to_path_buf(),
                    head,
                    tensor,
                });
            }
            Matrix::new(shape.n(), d, data).map_err(|e| corrupt(e.to_string()))
        };
        let (q, k, v) = (take("Q")?, take("K")?, take("V")?);
        heads.push(AttentionHead::new(q, k, v).map_err(|e| corrupt(e.to_string()))?);
    }
    Ok(HeadDump { shape, heads })
}

pub fn read_dump(path: &Path) -> Result<HeadDump, DumpError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes, path)
}

pub fn write_dump(heads: &[AttentionHead], shape: LatentShape, path: &Path) -> Result<(), DumpError> {
    let bytes = encode(heads, shape)?;
    write_atomic(path, &bytes).map_err(io_err(path))
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Magic of attention-output files written by `run --save-outputs`.
pub const OUTPUT_MAGIC: &[u8; 7] = b"RNFOUT1";
pub const OUTPUT_HEADER_LEN: usize = 22;

/// Output layout: magic `RNFOUT1`, version u16, then n, d, num_heads as
/// u32, dtype tag u8, then each head's `n × d` output row-major f32, all
/// little-endian.
pub fn encode_outputs(outputs: &[Matrix]) -> Result<Vec<u8>, DumpError> {
    let (n, d) = outputs.first().map_or((0, 0), |m| (m.rows(), m.cols()));
    if outputs.iter().any(|m| m.rows() != n || m.cols() != d) {
        return Err(DumpError::Inconsistent("outputs differ in shape".into()));
    }
    let mut bytes = Vec::with_capacity(OUTPUT_HEADER_LEN + outputs.len() * n * d * 4);
    bytes.extend_from_slice(OUTPUT_MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    for x in [n, d, outputs.len()] {
        let x = u32::try_from(x).map_err(|_| DumpError::Inconsistent(format!("dimension {x} exceeds u32")))?;
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    bytes.push(DTYPE_F32);
    for m in outputs {
        for x in m.as_slice() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(bytes)
}

pub fn read_outputs(path: &Path) -> Result<Vec<Matrix>, DumpError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let corrupt = |reason: String| DumpError::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < OUTPUT_HEADER_LEN || &bytes[..7] != OUTPUT_MAGIC {
        return Err(corrupt("not an output file".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[9 + 4 * i..13 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (n, d, heads) = (dim(0), dim(1), dim(2));
    if bytes.len() as u128 != OUTPUT_HEADER_LEN as u128 + (heads * n * d) as u128 * 4 {
        return Err(corrupt("payload length does not match header".into()));
    }
    let floats: Vec<f32> = bytes[OUTPUT_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    floats
        .chunks_exact((n * d).max(1))
        .take(heads)
        .map(|c| Matrix::new(n, d, c.to_vec()).map_err(|e| corrupt(e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use stsparse_core::workload::{generate_planted, PlantedSpec};
    use stsparse_core::PatternKind;

    fn hand_built() -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(b"RNFQKV1");
        b.extend_from_slice(&[1, 0]);
        for x in [1u32, 2, 2, 2, 1] {
            b.extend_from_slice(&x.to_le_bytes());
        }
        b.push(1);
        for i in 0..24 {
            b.extend_from_slice(&(i as f32 * 0.5 - 3.0).to_le_bytes());
        }
        b
    }

    #[test]
    fn hand_built_file_decodes_exactly() {
        let bytes = hand_built();
        assert_eq!(bytes.len(), HEADER_LEN + 24 * 4);
        assert_eq!(&bytes[..9], &[0x52, 0x4e, 0x46, 0x51, 0x4b, 0x56, 0x31, 0x01, 0x00]);
        let dump = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(dump.shape, LatentShape::new(1, 2, 2).unwrap());
        let h = &dump.heads[0];
        assert_eq!(h.q().as_slice(), &[-3.0, -2.5, -2.0, -1.5, -1.0, -0.5, 0.0, 0.5]);
        assert_eq!(h.k().get(0, 0), 1.0);
        assert_eq!(h.v().get(3, 1), 8.5);
        assert_eq!(encode(&dump.heads, dump.shape).unwrap(), bytes);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let shape = LatentShape::new(2, 3, 4).unwrap();
        let heads: Vec<_> = [PatternKind::Temporal, PatternKind::Textural]
            .iter()
            .enumerate()
            .map(|(i, &k)| generate_planted(&PlantedSpec::new(k, shape, 6, i as u64).with_noise(0.3)).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.rnf");
        write_dump(&heads, shape, &path).unwrap();
        let back = read_dump(&path).unwrap();
        assert_eq!(back.shape, shape);
        for (a, b) in heads.iter().zip(&back.heads) {
            for (x, y) in [(a.q(), b.q()), (a.k(), b.k()), (a.v(), b.v())] {
                let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(x), bits(y));
            }
        }
    }

    #[test]
    fn bad_inputs_are_typed_errors() {
        let p = Path::new("mem");
        let mut bytes = hand_built();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes, p), Err(DumpError::NotADump { .. })));
        assert!(matches!(decode(b"RNF", p), Err(DumpError::NotADump { .. })));

        let bytes = hand_built();
        let e = decode(&bytes[..bytes.len() - 1], p).unwrap_err();
        assert!(e.to_string().contains("corrupt dump"), "{e}");
        assert!(matches!(decode(&bytes[..20], p), Err(DumpError::Corrupt { .. })));
        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(decode(&long, p), Err(DumpError::Corrupt { .. })));

        let mut nan = hand_built();
        let o = HEADER_LEN + 9 * 4;
        nan[o..o + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        let e = decode(&nan, p).unwrap_err();
        assert!(matches!(e, DumpError::NonFinite { head: 0, tensor: "K", .. }));
        assert!(e.to_string().contains("non-finite tensor"));

        let mut dtype = hand_built();
        dtype[29] = 2;
        assert!(matches!(decode(&dtype, p), Err(DumpError::Corrupt { .. })));
    }

    #[test]
    fn io_errors_name_the_path() {
        let e = read_dump(Path::new("/nonexistent/dir/x.rnf")).unwrap_err();
        assert!(e.to_string().contains("/nonexistent/dir/x.rnf"));
    }

    #[test]
    fn outputs_round_trip() {
        let m = Matrix::from_fn(5, 3, |i, j| (i * 3 + j) as f32 * 0.25);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.bin");
        write_atomic(&path, &encode_outputs(&[m.clone(), m.clone()]).unwrap()).unwrap();
        assert_eq!(read_outputs(&path).unwrap(), vec![m.clone(), m]);
    }
}

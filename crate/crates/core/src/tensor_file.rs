//! `ACFT` tensor files: little-endian `b"ACFT"`, `u32` version, `u32` ndim,
//! `u32` dims, then a row-major `f32` payload.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ACFT";
pub const VERSION: u32 = 1;

/// Serializes a tensor of any rank.
pub fn encode(tensor: &ArrayD<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * tensor.ndim() + 4 * tensor.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensor.ndim() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    // iter() walks in logical (row-major) order regardless of memory layout
    for v in tensor.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<ArrayD<f32>, String> {
    let mut cursor = bytes;
    let mut word = |what: &str| -> std::result::Result<u32, String> {
        if cursor.len() < 4 {
            return Err(format!("truncated while reading {what}"));
        }
        let (head, rest) = cursor.split_at(4);
        cursor = rest;
        Ok(u32::from_le_bytes(head.try_into().unwrap()))
    };
    let magic = word("magic")?.to_le_bytes();
    if &magic != MAGIC {
        return Err("missing ACFT magic".into());
    }
    let version = word("version")?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let ndim = word("ndim")? as usize;
    if ndim > 8 {
        return Err(format!("implausible rank {ndim}"));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(word("dims")? as usize);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or("dimension product overflows")?;
    if cursor.len() != count * 4 {
        return Err(format!(
            "payload holds {} bytes, dims {dims:?} need {}",
            cursor.len(),
            count * 4
        ));
    }
    let data = cursor
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| e.to_string())
}

pub fn write(path: &Path, tensor: &ArrayD<f32>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&encode(tensor))?;
    f.flush()?;
    Ok(())
}

pub fn read(path: &Path) -> Result<ArrayD<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::BadFeatureFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .read_to_end(&mut bytes)?;
    decode(&bytes).map_err(|reason| Error::BadFeatureFile {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn write_matrix(path: &Path, m: &Array2<f32>) -> Result<()> {
    write(path, &m.clone().into_dyn())
}

pub fn read_matrix(path: &Path) -> Result<Array2<f32>> {
    let t = read(path)?;
    let ndim = t.ndim();
    t.into_dimensionality().map_err(|_| Error::BadFeatureFile {
        path: path.to_path_buf(),
        reason: format!("expected a rank-2 tensor, found rank {ndim}"),
    })
}

pub fn write_vector(path: &Path, v: &[f32]) -> Result<()> {
    write(path, &ArrayD::from_shape_vec(IxDyn(&[v.len()]), v.to_vec()).unwrap())
}

pub fn read_vector(path: &Path) -> Result<Vec<f32>> {
    let t = read(path)?;
    if t.ndim() != 1 {
        return Err(Error::BadFeatureFile {
            path: path.to_path_buf(),
            reason: format!("expected a rank-1 tensor, found rank {}", t.ndim()),
        });
    }
    Ok(t.into_raw_vec_and_offset().0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = ArrayD::from_shape_vec(IxDyn(&[2, 1]), vec![1.0f32, -2.5]).unwrap();
        let bytes = encode(&t);
        assert_eq!(&bytes[..4], b"ACFT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 1);
        assert_eq!(f32::from_le_bytes(bytes[24..28].try_into().unwrap()), -2.5);
        assert_eq!(bytes.len(), 28);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"NOPE").is_err());
        assert!(decode(b"ACFT\x01\0\0\0").is_err());
        let mut ok = encode(&ArrayD::zeros(IxDyn(&[3])));
        ok.pop();
        assert!(decode(&ok).is_err());
    }

    #[test]
    fn transposed_views_serialize_logically() {
        let m = Array2::from_shape_vec((2, 3), vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let t = m.t().to_owned().into_dyn();
        let back = decode(&encode(&m.t().into_owned().into_dyn())).unwrap();
        assert_eq!(back, t);
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-1e3..1e3)).collect();
            let t = ArrayD::from_shape_vec(IxDyn(&[rows, cols]), data).unwrap();
            let back = decode(&encode(&t)).unwrap();
            prop_assert_eq!(
                back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                t.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}

//! Binary feature cache.
//!
//! Layout (all little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `GAFM` |
//! | 4 | version (u32) |
//! | 1 | kind (0 log-mel, 1 plp, 2 stacked) |
//! | 8 | frame shift ms (f64) |
//! | 8 | window ms (f64) |
//! | 4 | dims (u32) |
//! | 4 | frames (u32) |
//! | 4·frames·dims | values, row-major f32 |

use std::io::{Read, Write};

use ndarray::Array2;

use super::{FeatureError, FeatureKind, FeatureMatrix, Result};

pub const CONTAINER_MAGIC: &[u8; 4] = b"GAFM";
pub const CONTAINER_VERSION: u32 = 1;

pub fn write_features<W: Write>(mut w: W, fm: &FeatureMatrix) -> Result<()> {
    let (frames, dims) = fm.values.dim();
    w.write_all(CONTAINER_MAGIC)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    w.write_all(&[fm.kind.code()])?;
    w.write_all(&fm.frame_shift_ms.to_le_bytes())?;
    w.write_all(&fm.window_ms.to_le_bytes())?;
    w.write_all(&(dims as u32).to_le_bytes())?;
    w.write_all(&(frames as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(frames * dims * 4);
    for &v in fm.values.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| FeatureError::Container(format!("truncated header: {e}")))?;
    Ok(b)
}

pub fn read_features<R: Read>(mut r: R) -> Result<FeatureMatrix> {
    let magic: [u8; 4] = read_array(&mut r)?;
    if &magic != CONTAINER_MAGIC {
        return Err(FeatureError::Container("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != CONTAINER_VERSION {
        return Err(FeatureError::Container(format!("unsupported version {version}")));
    }
    let [code] = read_array::<1, _>(&mut r)?;
    let kind = FeatureKind::from_code(code).ok_or_else(|| FeatureError::Container(format!("unknown kind {code}")))?;
    let frame_shift_ms = f64::from_le_bytes(read_array(&mut r)?);
    let window_ms = f64::from_le_bytes(read_array(&mut r)?);
    let dims = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let frames = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let mut raw = vec![0u8; frames * dims * 4];
    r.read_exact(&mut raw)
        .map_err(|e| FeatureError::Container(format!("truncated payload: {e}")))?;
    let values: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let values = Array2::from_shape_vec((frames, dims), values).expect("length checked");
    Ok(FeatureMatrix {
        values,
        frame_shift_ms,
        window_ms,
        kind,
    })
}

//! Binary model format.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic "GAHM" | version u32 | n_symbols u32 | states_per_symbol u32 | dims u32
//! per symbol:  byte length u32 | UTF-8 name
//! var_floor:   dims × f64
//! per state:   stay f64 | advance f64 | components u32 |
//!              weights (components × f64) | means | variances (components × dims × f64)
//! ```

use std::io::{Read, Write};

use ndarray::{Array1, Array2};

use super::{DiagGmm, HmmError, HmmGmmModel, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"GAHM";
pub const MODEL_VERSION: u32 = 1;

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64s<W: Write>(w: &mut W, vs: impl IntoIterator<Item = f64>) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_model<W: Write>(mut w: W, model: &HmmGmmModel) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    put_u32(&mut w, MODEL_VERSION)?;
    put_u32(&mut w, model.symbols.len() as u32)?;
    put_u32(&mut w, model.states_per_symbol as u32)?;
    put_u32(&mut w, model.dims() as u32)?;
    for s in &model.symbols {
        put_u32(&mut w, s.len() as u32)?;
        w.write_all(s.as_bytes())?;
    }
    put_f64s(&mut w, model.var_floor.iter().copied())?;
    for (g, &(stay, adv)) in model.gmms.iter().zip(&model.transitions) {
        put_f64s(&mut w, [stay, adv])?;
        put_u32(&mut w, g.components() as u32)?;
        put_f64s(&mut w, g.weights().iter().copied())?;
        put_f64s(&mut w, g.means().iter().copied())?;
        put_f64s(&mut w, g.vars().iter().copied())?;
    }
    Ok(())
}

fn get_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(|e| HmmError::Format(format!("truncated: {e}")))?;
    Ok(b)
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let b = get_bytes(r, 4)?;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

fn get_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let b = get_bytes(r, n * 8)?;
    Ok(b.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn read_model<R: Read>(mut r: R) -> Result<HmmGmmModel> {
    if &get_bytes(&mut r, 4)?[..] != MODEL_MAGIC {
        return Err(HmmError::Format("bad magic".into()));
    }
    let version = get_u32(&mut r)?;
    if version != MODEL_VERSION {
        return Err(HmmError::Format(format!("unsupported version {version}")));
    }
    let n_symbols = get_u32(&mut r)? as usize;
    let states = get_u32(&mut r)? as usize;
    let dims = get_u32(&mut r)? as usize;
    let mut symbols = Vec::with_capacity(n_symbols);
    for _ in 0..n_symbols {
        let len = get_u32(&mut r)? as usize;
        let s = String::from_utf8(get_bytes(&mut r, len)?).map_err(|_| HmmError::Format("symbol is not UTF-8".into()))?;
        symbols.push(s);
    }
    let var_floor = Array1::from(get_f64s(&mut r, dims)?);
    let mut gmms = Vec::with_capacity(n_symbols * states);
    let mut transitions = Vec::with_capacity(n_symbols * states);
    for _ in 0..n_symbols * states {
        let t = get_f64s(&mut r, 2)?;
        transitions.push((t[0], t[1]));
        let m = get_u32(&mut r)? as usize;
        let weights = get_f64s(&mut r, m)?;
        let means = Array2::from_shape_vec((m, dims), get_f64s(&mut r, m * dims)?).expect("sized read");
        let vars = Array2::from_shape_vec((m, dims), get_f64s(&mut r, m * dims)?).expect("sized read");
        if vars.iter().any(|&v| !(v > 0.0)) {
            return Err(HmmError::Format("non-positive variance".into()));
        }
        gmms.push(DiagGmm::new(weights, means, vars));
    }
    HmmGmmModel::new(symbols, states, gmms, transitions, var_floor)
}

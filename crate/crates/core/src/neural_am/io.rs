//! Checkpoint format, little-endian:
//!
//! ```text
//! magic "GARM" | version u32 | layers u32 | hidden u32 | input u32 | label_states u32 | n_symbols u32
//! per symbol: byte length u32 | UTF-8 name
//! input_mean, input_std: input × f64
//! per layer: w_x (4H × in) | w_h (4H × H) | b (4H), row-major f64
//! w_out (K × H) | b_out (K)
//! ```

use std::io::{Read, Write};

use ndarray::Array1;

use super::{AmConfig, LossRecord, NeuralError, RecurrentAm, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GARM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, am: &RecurrentAm) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for v in [
        CHECKPOINT_VERSION,
        am.n_layers() as u32,
        am.hidden() as u32,
        am.input_dim() as u32,
        am.label_states as u32,
        am.symbols.len() as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for s in &am.symbols {
        w.write_all(&(s.len() as u32).to_le_bytes())?;
        w.write_all(s.as_bytes())?;
    }
    let mut buf = Vec::new();
    for v in am.input_mean.iter().chain(am.input_std.iter()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for t in am.params.tensors() {
        for v in t {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)
        .map_err(|e| NeuralError::Format(format!("truncated: {e}")))?;
    Ok(b)
}

fn u32_at<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(bytes(r, 4)?.try_into().expect("4 bytes")))
}

fn f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    Ok(bytes(r, n * 8)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<RecurrentAm> {
    if &bytes(&mut r, 4)?[..] != CHECKPOINT_MAGIC {
        return Err(NeuralError::Format("bad magic".into()));
    }
    let version = u32_at(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(NeuralError::Format(format!("unsupported version {version}")));
    }
    let layers = u32_at(&mut r)? as usize;
    let hidden = u32_at(&mut r)? as usize;
    let input = u32_at(&mut r)? as usize;
    let label_states = u32_at(&mut r)? as usize;
    let n_symbols = u32_at(&mut r)? as usize;
    if layers == 0 || hidden == 0 || label_states == 0 {
        return Err(NeuralError::Format("empty architecture".into()));
    }
    let mut symbols = Vec::with_capacity(n_symbols);
    for _ in 0..n_symbols {
        let len = u32_at(&mut r)? as usize;
        symbols.push(String::from_utf8(bytes(&mut r, len)?).map_err(|_| NeuralError::Format("symbol is not UTF-8".into()))?);
    }
    let cfg = AmConfig {
        layers,
        hidden,
        label_states,
        seed: 0,
    };
    let mut am = RecurrentAm::zeros(&cfg, input, symbols);
    am.input_mean = Array1::from(f64s(&mut r, input)?);
    am.input_std = Array1::from(f64s(&mut r, input)?);
    for t in am.params.tensors_mut() {
        let vals = f64s(&mut r, t.len())?;
        t.copy_from_slice(&vals);
    }
    if !am.params.all_finite() {
        return Err(NeuralError::Format("non-finite parameter".into()));
    }
    Ok(am)
}

/// CSV loss trace with header `step,epoch,ce_loss`.
pub fn write_loss_trace<W: Write>(mut w: W, trace: &[LossRecord]) -> std::io::Result<()> {
    writeln!(w, "step,epoch,ce_loss")?;
    for r in trace {
        writeln!(w, "{},{},{}", r.step, r.epoch, r.ce_loss)?;
    }
    Ok(())
}

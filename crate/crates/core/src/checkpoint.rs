//! Flat binary model checkpoints.
//!
//! ```text
//! "PMOD1"
//! u8      activation (0 relu, 1 tanh, 2 identity)
//! u64 LE  training step
//! u32 LE  layer count
//! per layer:
//!   u32 LE  rows, u32 LE cols, u8 prunable
//!   rows*cols f64 LE weights (input-major), cols f64 LE biases
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{Activation, Layer, Matrix, ModelState};

pub const MODEL_MAGIC: &[u8; 5] = b"PMOD1";

pub fn write_model<W: Write>(model: &ModelState, mut w: W) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&[model.activation().code()])?;
    w.write_all(&model.step().to_le_bytes())?;
    w.write_all(&(model.layers().len() as u32).to_le_bytes())?;
    for layer in model.layers() {
        let (rows, cols) = layer.weight.shape();
        w.write_all(&(rows as u32).to_le_bytes())?;
        w.write_all(&(cols as u32).to_le_bytes())?;
        w.write_all(&[layer.prunable as u8])?;
        for v in layer.weight.as_slice().iter().chain(&layer.bias) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<'a>(cur: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if cur.len() < n {
        return Err(Error::Format("truncated model checkpoint".into()));
    }
    let (head, tail) = cur.split_at(n);
    *cur = tail;
    Ok(head)
}

fn take_u32(cur: &mut &[u8]) -> Result<usize> {
    Ok(u32::from_le_bytes(take(cur, 4)?.try_into().unwrap()) as usize)
}

fn take_f64s(cur: &mut &[u8], n: usize) -> Result<Vec<f64>> {
    let bytes = take(cur, n.checked_mul(8).ok_or_else(|| Error::Format("layer too large".into()))?)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn read_model<R: Read>(mut r: R) -> Result<ModelState> {
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let mut cur = data
        .strip_prefix(MODEL_MAGIC.as_slice())
        .ok_or_else(|| Error::Format("missing PMOD1 magic".into()))?;
    let act = take(&mut cur, 1)?[0];
    let activation = Activation::from_code(act)
        .ok_or_else(|| Error::Format(format!("unknown activation code {act}")))?;
    let step = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap());
    let n = take_u32(&mut cur)?;
    let mut layers = Vec::with_capacity(n.min(64));
    for _ in 0..n {
        let rows = take_u32(&mut cur)?;
        let cols = take_u32(&mut cur)?;
        let prunable = match take(&mut cur, 1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Format(format!("bad prunable flag {b}"))),
        };
        let weight = Matrix::from_vec(rows, cols, take_f64s(&mut cur, rows * cols)?)?;
        let bias = take_f64s(&mut cur, cols)?;
        layers.push(Layer::new(weight, bias, prunable)?);
    }
    if !cur.is_empty() {
        return Err(Error::Format("trailing bytes after model checkpoint".into()));
    }
    let mut model = ModelState::new(layers, activation)?;
    model.set_step(step);
    Ok(model)
}

pub fn save_model(model: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelState> {
    read_model(BufReader::new(File::open(path)?))
}

//! BMSK1 mask checkpoints.
//!
//! ```text
//! "BMSK1"
//! repeated until EOF, one record per layer:
//!   u32 LE  name length
//!   bytes   name (UTF-8)
//!   u32 LE  rows
//!   u32 LE  cols
//!   ceil(blocks / 8) bytes of block bits, LSB first, zero padded
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{BlockMask, LayerShape};
use crate::error::{Error, Result};

pub const MASK_MAGIC: &[u8; 5] = b"BMSK1";

pub fn write_mask<W: Write>(mask: &BlockMask, mut w: W) -> Result<()> {
    w.write_all(MASK_MAGIC)?;
    for layer in mask.layers() {
        let shape = layer.shape();
        let name = shape.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(shape.rows as u32).to_le_bytes())?;
        w.write_all(&(shape.cols as u32).to_le_bytes())?;
        let bits = layer.bits();
        let mut bytes = vec![0u8; bits.len().div_ceil(8)];
        for i in bits.iter_ones() {
            bytes[i / 8] |= 1 << (i % 8);
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated mask record".into()))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_mask<R: Read>(mut r: R) -> Result<BlockMask> {
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let rest = data
        .strip_prefix(MASK_MAGIC.as_slice())
        .ok_or_else(|| Error::Format("missing BMSK1 magic".into()))?;
    let mut cur = rest;
    let mut shapes = Vec::new();
    let mut all_bits = Vec::new();
    while !cur.is_empty() {
        let name_len = read_u32(&mut cur)? as usize;
        if cur.len() < name_len {
            return Err(Error::Format("truncated layer name".into()));
        }
        let (name, tail) = cur.split_at(name_len);
        let name = std::str::from_utf8(name)
            .map_err(|_| Error::Format("layer name is not UTF-8".into()))?
            .to_string();
        cur = tail;
        let rows = read_u32(&mut cur)? as usize;
        let cols = read_u32(&mut cur)? as usize;
        if rows == 0 || cols == 0 {
            return Err(Error::Format(format!("layer {name} has an empty shape")));
        }
        let shape = LayerShape::new(name, rows, cols);
        let blocks = shape.layout().num_blocks();
        let nbytes = blocks.div_ceil(8);
        if cur.len() < nbytes {
            return Err(Error::Format(format!("truncated bitset for layer {}", shape.name)));
        }
        let (bytes, tail) = cur.split_at(nbytes);
        cur = tail;
        let bits: Vec<bool> = (0..blocks).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
        if blocks % 8 != 0 && bytes[nbytes - 1] >> (blocks % 8) != 0 {
            return Err(Error::Format(format!("non-zero padding in layer {}", shape.name)));
        }
        shapes.push(shape);
        all_bits.push(bits);
    }
    BlockMask::from_block_bits(shapes, all_bits)
}

pub fn save_mask(mask: &BlockMask, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_mask(mask, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<BlockMask> {
    read_mask(BufReader::new(File::open(path)?))
}

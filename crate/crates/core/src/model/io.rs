//! Weight file format.
//!
//! ```text
//! magic    8 bytes  "TCANWTS\0"
//! version  u32
//! d_model, heads, layers, trunk_layers,
//! student_width, student_heads, student_layers   u32 each
//! flags    u32      bit 0 scaled logits, bit 1 positional encodings
//! mode     u32      0 cosine matching, 1 inner-product matching
//! count    u64      number of weights that follow
//! payload  count × f32, canonical weight order
//! ```
//! All integers and reals are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::binio::*;
use crate::error::{Error, Result};
use crate::scoring::SimilarityMode;

pub const WEIGHTS_MAGIC: [u8; 8] = *b"TCANWTS\0";
pub const WEIGHTS_VERSION: u32 = 1;

pub fn write_params<W: Write>(w: &mut W, p: &ModelParams) -> Result<()> {
    let c = &p.config;
    write_preamble(w, WEIGHTS_MAGIC, WEIGHTS_VERSION)?;
    for v in [
        c.d_model,
        c.heads,
        c.layers,
        c.trunk_layers,
        c.student_width,
        c.student_heads,
        c.student_layers,
    ] {
        write_u32(w, v as u32)?;
    }
    let flags = c.scaled_logits as u32 | (c.positional as u32) << 1;
    write_u32(w, flags)?;
    write_u32(w, c.similarity.as_u8() as u32)?;
    write_u64(w, p.parameter_count() as u64)?;
    let mut result = Ok(());
    p.weights.for_each(&mut |_, t| {
        if result.is_ok() {
            result = write_f32s(w, t.data().iter().map(|&v| v as f32));
        }
    });
    result?;
    Ok(())
}

pub fn read_params<R: Read>(r: &mut R) -> Result<ModelParams> {
    read_preamble(r, WEIGHTS_MAGIC, WEIGHTS_VERSION)?;
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = read_u32(r)? as usize;
    }
    let flags = read_u32(r)?;
    let mode = read_u32(r)?;
    let similarity = u8::try_from(mode)
        .ok()
        .and_then(SimilarityMode::from_u8)
        .ok_or_else(|| Error::Format(format!("unknown similarity mode {mode}")))?;
    let config = ModelConfig {
        d_model: dims[0],
        heads: dims[1],
        layers: dims[2],
        trunk_layers: dims[3],
        student_width: dims[4],
        student_heads: dims[5],
        student_layers: dims[6],
        scaled_logits: flags & 1 != 0,
        positional: flags & 2 != 0,
        similarity,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("bad geometry header: {e}")))?;
    // Shapes come from a zero-cost template of the declared geometry.
    let mut params = ModelParams::init(config, 0)?;
    let count = read_u64(r)?;
    if count != params.parameter_count() as u64 {
        return Err(Error::Format(format!(
            "geometry implies {} weights but header declares {count}",
            params.parameter_count()
        )));
    }
    let mut result = Ok(());
    params.weights.for_each_mut(&mut |t| {
        if result.is_err() {
            return;
        }
        match read_f32s(r, t.len()) {
            Ok(values) => {
                for (dst, v) in t.data_mut().iter_mut().zip(values) {
                    *dst = v as f64;
                }
            }
            Err(e) => result = Err(e),
        }
    });
    result?;
    expect_eof(r)?;
    Ok(params)
}

pub fn save_params(p: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params(&mut w, p)?;
    w.flush()?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ModelParams> {
    read_params(&mut BufReader::new(File::open(path)?))
}

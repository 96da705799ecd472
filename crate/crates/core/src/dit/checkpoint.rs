//! Versioned binary checkpoint: config + named weight arrays, byte-stable
//! for identical inputs. EMA weights ride along when present.

use std::io::{Read, Write};
use std::path::Path;

use super::{DitConfig, DitModel, Params};
use crate::error::{Error, Result};
use crate::numerics::Tensor2D;

const MAGIC: &[u8; 4] = b"FADT";
const VERSION: u32 = 1;

/// A serialized model: config, raw weights, optional EMA weights.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: DitConfig,
    pub params: Params,
    pub ema: Option<Params>,
}

impl Checkpoint {
    /// Builds a model from the checkpoint. Prefers EMA weights when present
    /// and `use_ema` is set.
    pub fn into_model(self, use_ema: bool) -> Result<DitModel> {
        let mut model = DitModel::new(self.config, 0)?;
        model.params = match (use_ema, self.ema) {
            (true, Some(ema)) => ema,
            (_, _) => self.params,
        };
        Ok(model)
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(Error::Format(format!("unreasonable string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(format!("bad utf8 in checkpoint: {e}")))
}

fn write_params(w: &mut impl Write, params: &Params) -> Result<()> {
    let mut blocks: Vec<(String, Tensor2D)> = Vec::new();
    params.for_each(|n, t| blocks.push((n.to_string(), t.clone())));
    write_u32(w, blocks.len() as u32)?;
    for (name, t) in &blocks {
        write_str(w, name)?;
        write_u32(w, t.rows() as u32)?;
        write_u32(w, t.cols() as u32)?;
        for &v in t.data() {
            write_f64(w, v)?;
        }
    }
    Ok(())
}

fn read_params(r: &mut impl Read, cfg: &DitConfig) -> Result<Params> {
    let count = read_u32(r)? as usize;
    let mut params = Params::zeros(cfg);
    let expected = params.block_names();
    if count != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} blocks, model wants {}",
            expected.len()
        )));
    }
    for want in &expected {
        let name = read_str(r)?;
        if &name != want {
            return Err(Error::Format(format!(
                "checkpoint block {name:?} out of order, expected {want:?}"
            )));
        }
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        let mut data = vec![0.0; rows * cols];
        for v in &mut data {
            *v = read_f64(r)?;
        }
        let tensor = Tensor2D::from_vec(rows, cols, data)?;
        let mut stored = false;
        params.for_each_mut(|n, t| {
            if n == name {
                if t.rows() != tensor.rows() || t.cols() != tensor.cols() {
                    return;
                }
                *t = tensor.clone();
                stored = true;
            }
        });
        if !stored {
            return Err(Error::Format(format!(
                "checkpoint block {name:?} has wrong shape {rows}x{cols}"
            )));
        }
    }
    Ok(params)
}

/// Writes a checkpoint. Identical inputs produce identical bytes.
pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    let c = &ckpt.config;
    write_u32(&mut w, c.dim as u32)?;
    write_u32(&mut w, c.layers as u32)?;
    write_u32(&mut w, c.heads as u32)?;
    write_u32(&mut w, c.text_dim as u32)?;
    write_u32(&mut w, c.max_frames as u32)?;
    write_u32(&mut w, c.latent_channels as u32)?;
    write_f64(&mut w, c.frame_rate)?;
    write_u32(&mut w, c.vocab.len() as u32)?;
    for word in &c.vocab {
        write_str(&mut w, word)?;
    }
    write_params(&mut w, &ckpt.params)?;
    match &ckpt.ema {
        Some(ema) => {
            w.write_all(&[1u8])?;
            write_params(&mut w, ema)?;
        }
        None => w.write_all(&[0u8])?,
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let dim = read_u32(&mut r)? as usize;
    let layers = read_u32(&mut r)? as usize;
    let heads = read_u32(&mut r)? as usize;
    let text_dim = read_u32(&mut r)? as usize;
    let max_frames = read_u32(&mut r)? as usize;
    let latent_channels = read_u32(&mut r)? as usize;
    let frame_rate = read_f64(&mut r)?;
    let vocab_len = read_u32(&mut r)? as usize;
    let mut vocab = Vec::with_capacity(vocab_len);
    for _ in 0..vocab_len {
        vocab.push(read_str(&mut r)?);
    }
    let config = DitConfig {
        dim,
        layers,
        heads,
        text_dim,
        max_frames,
        frame_rate,
        latent_channels,
        vocab,
    };
    config.validate()?;
    let params = read_params(&mut r, &config)?;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let ema = match flag[0] {
        0 => None,
        1 => Some(read_params(&mut r, &config)?),
        other => return Err(Error::Format(format!("bad ema flag {other}"))),
    };
    Ok(Checkpoint { config, params, ema })
}

//! Binary checkpoint containers: a four-byte magic, a format version, a JSON
//! metadata blob, and named f32 tensors. Model, detector, and inverter
//! checkpoints all share this layout under different magics.
//!
//! Weights are stored as f32, so saving an f64 model rounds once; loading and
//! re-saving is then byte-stable. Tools that exchange fingerprints must all
//! load from the checkpoint rather than mixing disk and in-memory models.

use crate::lm::{MicroLM, MicroLMConfig, Tokenizer};
use crate::tensor::Tensor;
use crate::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC_MODEL: [u8; 4] = *b"MLMW";
pub const MAGIC_DETECTOR: [u8; 4] = *b"AEDT";
pub const MAGIC_INVERTER: [u8; 4] = *b"IVRT";
const VERSION: u16 = 1;

pub fn write_container(
    w: &mut impl Write,
    magic: &[u8; 4],
    meta_json: &str,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let meta = meta_json.as_bytes();
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::Format(format!("tensor name {} bytes long", nb.len())));
        }
        w.write_all(&(nb.len() as u16).to_le_bytes())?;
        w.write_all(nb)?;
        let (r, c) = t.dims();
        w.write_all(&(r as u32).to_le_bytes())?;
        w.write_all(&(c as u32).to_le_bytes())?;
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_container(r: &mut impl Read, magic: &[u8; 4]) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = read_u16(r)?;
    if version > VERSION {
        return Err(Error::Format(format!("unsupported version {}", version)));
    }
    let meta_len = read_u32(r)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let meta = String::from_utf8(meta)
        .map_err(|_| Error::Format("metadata is not utf-8".into()))?;
    let count = read_u32(r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(r)? as usize;
        let mut nb = vec![0u8; name_len];
        r.read_exact(&mut nb)?;
        let name = String::from_utf8(nb)
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        let mut buf = vec![0u8; rows * cols * 4];
        r.read_exact(&mut buf)?;
        let data: Vec<f64> = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        tensors.push((name, Tensor::new(vec![rows, cols], data)?));
    }
    Ok((meta, tensors))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ModelMeta {
    cfg: MicroLMConfig,
    merges: Vec<(u32, u32)>,
}

pub fn save_model(path: impl AsRef<Path>, model: &MicroLM) -> Result<()> {
    let meta = serde_json::to_string(&ModelMeta {
        cfg: model.cfg.clone(),
        merges: model.tokenizer.merges().to_vec(),
    })?;
    let named = model.named_tensors();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_container(&mut f, &MAGIC_MODEL, &meta, &named)?;
    f.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MicroLM> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let (meta, tensors) = read_container(&mut f, &MAGIC_MODEL)?;
    let meta: ModelMeta = serde_json::from_str(&meta)?;
    let tokenizer = Tokenizer::from_merges(meta.merges)?;
    let mut model = MicroLM::init(meta.cfg, tokenizer)?;
    let mut loaded: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
    for (name, t) in model.named_tensors_mut() {
        let src = loaded
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {}", name)))?;
        if src.dims() != t.dims() {
            return Err(Error::Format(format!(
                "tensor {} is {:?}, expected {:?}",
                name,
                src.dims(),
                t.dims()
            )));
        }
        *t = src;
    }
    if let Some(extra) = loaded.keys().next() {
        return Err(Error::Format(format!("checkpoint has unexpected tensor {}", extra)));
    }
    Ok(model)
}

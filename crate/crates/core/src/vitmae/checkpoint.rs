//! Binary checkpoint format.
//!
//! Little-endian layout:
//!
//! ```text
//! "MAEF" | version u32 | config | param count u32
//! per param: name len u16, name utf-8, rank u8, dims u32 x rank, byte offset u64
//! raw f32 parameter data
//! SHA-256 of all preceding bytes
//! ```
//!
//! The config block is fixed width: image_size, channels, patch_size,
//! enc_depth, enc_width, enc_heads, dec_depth, dec_width, dec_heads (u32
//! each), mlp_ratio f64, num_aus u32, mask_ratio f64, norm_pix_target u8,
//! task u8.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::ndgrad::Tensor;

use super::config::{ModelConfig, Task};
use super::model::ModelWeights;
use super::params::Group;

pub const MAGIC: &[u8; 4] = b"MAEF";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint: expected magic \"MAEF\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (this build reads {VERSION})")]
    Version { found: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint is incompatible with the target model:\n{}", .0.join("\n"))]
    Incompatible(Vec<String>),
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Corrupt(format!("unexpected end of header at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn write_config(w: &mut Writer, c: &ModelConfig) {
    for v in [
        c.image_size,
        c.channels,
        c.patch_size,
        c.enc_depth,
        c.enc_width,
        c.enc_heads,
        c.dec_depth,
        c.dec_width,
        c.dec_heads,
    ] {
        w.u32(v);
    }
    w.f64(c.mlp_ratio);
    w.u32(c.num_aus);
    w.f64(c.mask_ratio);
    w.u8(c.norm_pix_target as u8);
    w.u8(c.task.code());
}

fn read_config(r: &mut Reader) -> Result<ModelConfig, CheckpointError> {
    let mut dims = [0usize; 9];
    for d in &mut dims {
        *d = r.u32()?;
    }
    let mlp_ratio = r.f64()?;
    let num_aus = r.u32()?;
    let mask_ratio = r.f64()?;
    let norm_pix_target = r.u8()? != 0;
    let task = Task::from_code(r.u8()?).ok_or_else(|| CheckpointError::Corrupt("unknown task code".into()))?;
    let cfg = ModelConfig {
        image_size: dims[0],
        channels: dims[1],
        patch_size: dims[2],
        enc_depth: dims[3],
        enc_width: dims[4],
        enc_heads: dims[5],
        dec_depth: dims[6],
        dec_width: dims[7],
        dec_heads: dims[8],
        mlp_ratio,
        num_aus,
        mask_ratio,
        norm_pix_target,
        task,
    };
    cfg.validate().map_err(|e| CheckpointError::Corrupt(format!("stored config is invalid: {e}")))?;
    Ok(cfg)
}

/// Serializes weights to the checkpoint byte layout.
pub fn encode_weights(weights: &ModelWeights) -> Vec<u8> {
    let specs = weights.layout();
    let tensors = weights.params.refs();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION as usize);
    write_config(&mut w, &weights.config);
    w.u32(tensors.len());
    let mut offset = 0u64;
    for (s, t) in specs.refs().iter().zip(&tensors) {
        w.u16(s.name.len() as u16);
        w.0.extend_from_slice(s.name.as_bytes());
        w.u8(t.rank() as u8);
        for &d in t.shape() {
            w.u32(d);
        }
        w.u64(offset);
        offset += 4 * t.numel() as u64;
    }
    for t in &tensors {
        for v in t.data() {
            w.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);
    w.0
}

/// A parsed checkpoint: config plus named tensors in file order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Corrupt(format!("file is only {} bytes", bytes.len())));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    if bytes.len() < 8 + DIGEST_LEN {
        return Err(CheckpointError::Corrupt("truncated before checksum".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Corrupt("checksum mismatch (truncated or modified file)".into()));
    }
    let config = read_config(&mut r)?;
    let count = r.u32()?;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Corrupt("parameter name is not utf-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let offset = r.u64()? as usize;
        table.push((name, shape, offset));
    }
    let data = &body[r.pos..];
    let mut tensors = Vec::with_capacity(count);
    for (name, shape, offset) in table {
        let n: usize = shape.iter().product();
        let end = offset + 4 * n;
        if end > data.len() {
            return Err(CheckpointError::Corrupt(format!("data for {name} runs past the end of the file")));
        }
        let values = data[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, values).map_err(|e| CheckpointError::Corrupt(format!("{name}: {e}")))?;
        tensors.push((name, t));
    }
    Ok(Checkpoint { config, tensors })
}

fn read_file(path: &Path) -> Result<Vec<u8>, CheckpointError> {
    fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

/// Writes atomically: a sibling temp file is renamed into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn save_weights(weights: &ModelWeights, path: &Path) -> Result<(), CheckpointError> {
    write_atomic(path, &encode_weights(weights))
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

/// Assigns checkpoint tensors onto `target` where `select` accepts the group.
fn apply(
    target: &mut ModelWeights,
    ckpt: &Checkpoint,
    select: impl Fn(Group) -> bool,
) -> Result<(), CheckpointError> {
    let specs = target.layout();
    let mut problems = Vec::new();
    let mut staged = Vec::new();
    for (i, s) in specs.refs().into_iter().enumerate() {
        if !select(s.group) {
            continue;
        }
        match ckpt.tensors.iter().find(|(n, _)| n == &s.name) {
            None => problems.push(format!("  {}: missing from checkpoint", s.name)),
            Some((_, t)) if t.shape() != s.shape.as_slice() => problems.push(format!(
                "  {}: checkpoint shape {:?}, model expects {:?}",
                s.name,
                t.shape(),
                s.shape
            )),
            Some((_, t)) => staged.push((i, t.clone())),
        }
    }
    if !problems.is_empty() {
        return Err(CheckpointError::Incompatible(problems));
    }
    let mut slots = target.params.refs_mut();
    for (i, t) in staged {
        *slots[i] = t;
    }
    Ok(())
}

/// Loads a full checkpoint; the model config comes from the file.
pub fn load_weights(path: &Path) -> Result<ModelWeights, CheckpointError> {
    let ckpt = decode_checkpoint(&read_file(path)?)?;
    weights_from_checkpoint(&ckpt)
}

pub fn weights_from_checkpoint(ckpt: &Checkpoint) -> Result<ModelWeights, CheckpointError> {
    let mut rng = crate::rng::stream(0, crate::rng::Concern::Init, 0, 0);
    let mut w = ModelWeights::init(&ckpt.config, &mut rng)
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    apply(&mut w, ckpt, |_| true)?;
    Ok(w)
}

/// Fresh weights for `config` with only the encoder taken from the checkpoint.
pub fn load_encoder<R: Rng + ?Sized>(
    path: &Path,
    config: &ModelConfig,
    rng: &mut R,
) -> Result<ModelWeights, CheckpointError> {
    let ckpt = decode_checkpoint(&read_file(path)?)?;
    encoder_from_checkpoint(&ckpt, config, rng)
}

pub fn encoder_from_checkpoint<R: Rng + ?Sized>(
    ckpt: &Checkpoint,
    config: &ModelConfig,
    rng: &mut R,
) -> Result<ModelWeights, CheckpointError> {
    let mut w = ModelWeights::init(config, rng).map_err(|e| CheckpointError::Incompatible(vec![e.to_string()]))?;
    apply(&mut w, ckpt, |g| g == Group::Encoder)?;
    Ok(w)
}

//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "AMSN" (4 bytes)
//! format version u16
//! config fingerprint: length u16, UTF-8 bytes
//! tensor table: count u32, then per entry
//!     name length u16, name bytes
//!     rank u8, dims u32 x rank
//!     dtype tag u8 (0: f64, 1: f32)
//!     raw little-endian payload
//! RNG state: length u32, bytes (ChaCha8 seed 32 | stream u64 | word_pos u128)
//! epoch u32
//! ```
//!
//! Tensors are written as f64; f32 entries are accepted on read and
//! widened (32-bit is a storage option, the compute contract is 64-bit).

use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CheckpointError, Error, Result};
use crate::ndarr::Tensor;
use crate::network::Model;
use crate::optim::OptimState;

use super::{TrainConfig, TrainState};

const MAGIC: &[u8; 4] = b"AMSN";
const VERSION: u16 = 1;
const RNG_STATE_LEN: usize = 32 + 8 + 16;

fn rng_to_bytes(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(RNG_STATE_LEN);
    out.extend_from_slice(&rng.get_seed());
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

fn rng_from_bytes(bytes: &[u8]) -> std::result::Result<ChaCha8Rng, CheckpointError> {
    if bytes.len() != RNG_STATE_LEN {
        return Err(CheckpointError::Truncated("rng state"));
    }
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&bytes[..32]);
    let stream = u64::from_le_bytes(bytes[32..40].try_into().unwrap());
    let word_pos = u128::from_le_bytes(bytes[40..56].try_into().unwrap());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(rng)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> std::result::Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn push_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(0u8); // f64
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes the whole training state. A sidecar `<path>.config` with the
/// canonical config text is written next to the checkpoint so that
/// commands given only the checkpoint path can rebuild the model.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(state.fingerprint.len() as u16).to_le_bytes());
    out.extend_from_slice(state.fingerprint.as_bytes());

    let mut entries: Vec<(String, &Tensor)> = Vec::new();
    state.model.visit_params(&mut |name, t| entries.push((name.to_string(), t)));
    for (name, v) in &state.optim.v {
        entries.push((format!("rms_v.{name}"), v));
    }
    let step = Tensor::from_vec(&[1], vec![state.optim.step as f64])?;
    let count = entries.len() as u32 + 1;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in &entries {
        push_tensor(&mut out, name, t);
    }
    push_tensor(&mut out, "optim.step", &step);

    let rng_bytes = rng_to_bytes(&state.rng);
    out.extend_from_slice(&(rng_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&rng_bytes);
    out.extend_from_slice(&state.epoch.to_le_bytes());

    std::fs::write(path, out)?;
    std::fs::write(sidecar_path(path), &state.config_text)?;
    Ok(())
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".config");
    std::path::PathBuf::from(s)
}

fn parse_tensors(r: &mut Reader) -> std::result::Result<Vec<(String, Tensor)>, CheckpointError> {
    let count = r.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| CheckpointError::Truncated("tensor name"))?;
        let rank = r.u8("tensor rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("tensor dims")? as usize);
        }
        let volume: usize = dims.iter().product();
        let dtype = r.u8("dtype tag")?;
        let data: Vec<f64> = match dtype {
            0 => r
                .take(volume * 8, "f64 payload")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            1 => r
                .take(volume * 4, "f32 payload")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            tag => return Err(CheckpointError::BadDtype(tag)),
        };
        let t = Tensor::from_vec(&dims, data).map_err(|_| CheckpointError::Truncated("tensor"))?;
        out.push((name, t));
    }
    Ok(out)
}

/// Loads a checkpoint, refusing it unless its fingerprint matches `cfg`.
pub fn load_checkpoint(path: &Path, cfg: &TrainConfig) -> Result<TrainState> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4, "magic").map_err(Error::Checkpoint)? != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = r.u16("version").map_err(Error::Checkpoint)?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version).into());
    }
    let fp_len = r.u16("fingerprint length").map_err(Error::Checkpoint)? as usize;
    let found = String::from_utf8(
        r.take(fp_len, "fingerprint").map_err(Error::Checkpoint)?.to_vec(),
    )
    .map_err(|_| Error::Checkpoint(CheckpointError::Truncated("fingerprint")))?;
    let expected = cfg.fingerprint();
    if found != expected {
        return Err(CheckpointError::FingerprintMismatch { expected, found }.into());
    }

    let tensors = parse_tensors(&mut r).map_err(Error::Checkpoint)?;
    let rng_len = r.u32("rng length").map_err(Error::Checkpoint)? as usize;
    let rng = rng_from_bytes(r.take(rng_len, "rng state").map_err(Error::Checkpoint)?)
        .map_err(Error::Checkpoint)?;
    let epoch = r.u32("epoch").map_err(Error::Checkpoint)?;

    // Rebuild the skeleton from the config, then fill every parameter.
    let mut seed_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::new(&cfg.model, &mut seed_rng)?;
    let mut table: std::collections::BTreeMap<String, Tensor> = tensors.into_iter().collect();
    for (name, param) in model.params_mut() {
        let stored = table
            .remove(&name)
            .ok_or(Error::Checkpoint(CheckpointError::MissingTensor(name.clone())))?;
        if stored.shape() != param.shape() {
            return Err(CheckpointError::TensorShape {
                name,
                stored: stored.shape().to_vec(),
                expected: param.shape().to_vec(),
            }
            .into());
        }
        *param = stored;
    }
    let step = table
        .remove("optim.step")
        .map(|t| t.data()[0] as u64)
        .unwrap_or(0);
    let mut optim = OptimState {
        step,
        ..OptimState::default()
    };
    for (name, t) in table {
        if let Some(param) = name.strip_prefix("rms_v.") {
            optim.v.insert(param.to_string(), t);
        }
        // unknown extra tensors are ignored
    }

    Ok(TrainState {
        model,
        optim,
        epoch,
        rng,
        fingerprint: found,
        config_text: cfg.to_text(),
    })
}

/// Loads a checkpoint together with the config recorded in its sidecar.
pub fn load_checkpoint_with_sidecar(path: &Path) -> Result<(TrainState, TrainConfig)> {
    let text = std::fs::read_to_string(sidecar_path(path)).map_err(|e| {
        Error::Config(format!(
            "cannot read config sidecar {}: {e}",
            sidecar_path(path).display()
        ))
    })?;
    let cfg = TrainConfig::from_text(&text, TrainConfig::default())?;
    let state = load_checkpoint(path, &cfg)?;
    Ok((state, cfg))
}

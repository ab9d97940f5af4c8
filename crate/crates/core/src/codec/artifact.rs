//! Single-file model container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "CFCODEC\0"
//! version    u32
//! header_len u64
//! header     JSON: config, specs, step, tensor table, optimizer counters
//! blob       f64 LE values: parameters, then (optionally) Adam moments
//! checksum   32 bytes SHA-256 of everything above
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::nn::Adam;
use super::train::{StepLosses, TrainState};
use super::{AttributeSpec, Codec, CodecConfig, CodecError};

pub const ARTIFACT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CFCODEC\0";

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: CodecConfig,
    specs: Vec<AttributeSpec>,
    step: u64,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerCounters>,
    last: Option<StepLosses>,
    running: Option<StepLosses>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerCounters {
    encoder: u64,
    decoder: u64,
    discriminator: u64,
}

fn named<'a>(prefix: &str, tensors: impl Iterator<Item = &'a [f64]>) -> Vec<(String, &'a [f64])> {
    tensors.enumerate().map(|(i, t)| (format!("{prefix}.{i}"), t)).collect()
}

fn collect_tensors(state: &TrainState, with_optimizer: bool) -> Vec<(String, &[f64])> {
    let c = &state.codec;
    let mut all = named("encoder", c.encoder.tensors());
    all.extend(named("decoder", c.decoder.tensors()));
    all.extend(named("discriminator", c.discriminator.tensors()));
    if with_optimizer {
        all.extend(named("adam.encoder", state.adam_encoder.tensors()));
        all.extend(named("adam.decoder", state.adam_decoder.tensors()));
        all.extend(named("adam.discriminator", state.adam_discriminator.tensors()));
    }
    all
}

/// Writes the model (and optionally the optimiser state) atomically.
pub fn save_artifact(path: &Path, state: &TrainState, with_optimizer: bool) -> Result<(), CodecError> {
    let tensors = collect_tensors(state, with_optimizer);
    let header = Header {
        format_version: ARTIFACT_FORMAT_VERSION,
        config: state.codec.config.clone(),
        specs: state.codec.specs.clone(),
        step: state.step,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                len: t.len(),
            })
            .collect(),
        optimizer: with_optimizer.then_some(OptimizerCounters {
            encoder: state.adam_encoder.t,
            decoder: state.adam_decoder.t,
            discriminator: state.adam_discriminator.t,
        }),
        last: state.last,
        running: state.running,
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| CodecError::Artifact(e.to_string()))?;
    let total: usize = tensors.iter().map(|(_, t)| t.len()).sum();
    let mut buf = Vec::with_capacity(8 + 4 + 8 + header_json.len() + total * 8 + 32);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&ARTIFACT_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for (_, t) in &tensors {
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    crate::fsutil::write_atomic(path, &buf)?;
    Ok(())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8], CodecError> {
    if bytes.len() < n {
        return Err(CodecError::Artifact("truncated artifact".into()));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn fill(target: &mut [f64], src: &mut &[u8], expected: &TensorEntry) -> Result<(), CodecError> {
    if target.len() != expected.len {
        return Err(CodecError::Artifact(format!(
            "tensor {} has {} values, model expects {}",
            expected.name,
            expected.len,
            target.len()
        )));
    }
    let raw = take(src, 8 * target.len())?;
    for (dst, chunk) in target.iter_mut().zip(raw.chunks_exact(8)) {
        *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
    }
    Ok(())
}

/// Reads an artifact back into a training state. Artifacts saved without
/// optimiser state come back with fresh Adam moments.
pub fn load_artifact(path: &Path) -> Result<TrainState, CodecError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 + 4 + 8 + 32 {
        return Err(CodecError::Artifact("file too short".into()));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != checksum {
        return Err(CodecError::Artifact("checksum mismatch".into()));
    }
    let mut rest = body;
    if take(&mut rest, 8)? != MAGIC {
        return Err(CodecError::Artifact("not a codec artifact".into()));
    }
    let version = u32::from_le_bytes(take(&mut rest, 4)?.try_into().expect("4 bytes"));
    if version != ARTIFACT_FORMAT_VERSION {
        return Err(CodecError::Artifact(format!("unsupported format version {version}")));
    }
    let header_len = u64::from_le_bytes(take(&mut rest, 8)?.try_into().expect("8 bytes")) as usize;
    let header: Header =
        serde_json::from_slice(take(&mut rest, header_len)?).map_err(|e| CodecError::Artifact(e.to_string()))?;

    let mut state = TrainState::new(Codec::new(header.config, header.specs)?);
    state.step = header.step;
    state.last = header.last;
    state.running = header.running;
    let mut entries = header.tensors.iter();
    let mut next = || {
        entries
            .next()
            .ok_or_else(|| CodecError::Artifact("tensor table shorter than model".into()))
    };
    {
        let c = &mut state.codec;
        for t in c
            .encoder
            .tensors_mut()
            .chain(c.decoder.tensors_mut())
            .chain(c.discriminator.tensors_mut())
        {
            fill(t, &mut rest, next()?)?;
        }
    }
    if let Some(counters) = header.optimizer {
        let adams: [(&mut Adam, u64); 3] = [
            (&mut state.adam_encoder, counters.encoder),
            (&mut state.adam_decoder, counters.decoder),
            (&mut state.adam_discriminator, counters.discriminator),
        ];
        for (adam, t) in adams {
            adam.t = t;
            for slot in adam.tensors_mut() {
                fill(slot, &mut rest, next()?)?;
            }
        }
    }
    if !rest.is_empty() {
        return Err(CodecError::Artifact(format!("{} trailing bytes", rest.len())));
    }
    Ok(state)
}

impl Codec {
    /// Loads just the model from an artifact.
    pub fn load(path: &Path) -> Result<Codec, CodecError> {
        Ok(load_artifact(path)?.codec)
    }

    pub fn save(&self, path: &Path) -> Result<(), CodecError> {
        save_artifact(path, &TrainState::new(self.clone()), false)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{AttributeRole, AttributeSpec, CodecConfig};
    use super::*;
    use ndarray::Array2;

    fn trained_state() -> TrainState {
        let specs = vec![AttributeSpec::new("s", AttributeRole::Sensitive, "a", "b")];
        let mut state = TrainState::new(Codec::new(CodecConfig::tiny(4, 3), specs).unwrap());
        let x = Array2::from_shape_fn((4, 48), |(i, j)| ((i * 7 + j) % 10) as f64 / 10.0);
        let a = Array2::from_shape_fn((4, 1), |(i, _)| if i % 2 == 0 { 1.0 } else { -1.0 });
        for _ in 0..3 {
            state.train_step(&x, &a).unwrap();
        }
        state
    }

    #[test]
    fn round_trip_with_and_without_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let state = trained_state();
        let p = dir.path().join("m.codec");
        save_artifact(&p, &state, true).unwrap();
        assert_eq!(load_artifact(&p).unwrap(), state);

        save_artifact(&p, &state, false).unwrap();
        let back = load_artifact(&p).unwrap();
        assert_eq!(back.codec, state.codec);
        assert_eq!(back.adam_encoder.t, 0);
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.codec");
        save_artifact(&p, &trained_state(), false).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_artifact(&p), Err(CodecError::Artifact(_))));
        std::fs::write(&p, b"short").unwrap();
        assert!(load_artifact(&p).is_err());
    }
}

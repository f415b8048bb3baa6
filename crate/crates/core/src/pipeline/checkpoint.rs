//! Binary checkpoint format.
//!
//! Layout: magic "CCKPT1", little-endian u32 format version, length-prefixed
//! UTF-8 JSON header (tensor names/shapes/offsets plus scalar fields), a
//! contiguous little-endian f32 tensor payload, then the RNG states as raw
//! little-endian u64 words.
//!
//! Saving first rounds the live training state to f32 (see
//! [`TrainState::quantize_for_checkpoint`]); loading therefore reproduces
//! the exact state the saving run kept training with, which is what makes
//! resumed runs bit-identical continuations.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::TrainState;
use crate::diffcore::optim::OptimizerState;
use crate::diffcore::tensor::Tensor;
use crate::encoders::{EncoderParams, TeacherSnapshot, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::rehearsal::{BufferEntry, RehearsalBuffer};
use crate::rng::Rng;
use crate::synthstream::PairSample;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"CCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the f32 payload.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct RngMeta {
    name: String,
    /// Word count in the u64 block (streams are stored in header order).
    words: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config_text: String,
    config_hash: String,
    run_id: String,
    stage_index: usize,
    step_in_stage: usize,
    optimizer_step_count: u64,
    teacher_stage: Option<usize>,
    buffer_modalities: Vec<u32>,
    buffer_labels: Vec<u32>,
    pool_modalities: Vec<u32>,
    pool_labels: Vec<u32>,
    /// "modality:setting" -> [acc, auc] at the learning stage.
    learning_metrics: BTreeMap<String, [f64; 2]>,
    tensors: Vec<TensorMeta>,
    rng_streams: Vec<RngMeta>,
}

struct PayloadWriter {
    metas: Vec<TensorMeta>,
    bytes: Vec<u8>,
}

impl PayloadWriter {
    fn new() -> Self {
        PayloadWriter { metas: Vec::new(), bytes: Vec::new() }
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, data: &[f64]) {
        self.metas.push(TensorMeta {
            name: name.to_string(),
            shape,
            offset: self.bytes.len() as u64,
        });
        for &v in data {
            self.bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    fn push_tensor(&mut self, name: &str, t: &Tensor) {
        self.push(name, t.shape.clone(), &t.data);
    }
}

/// Serialize the state (quantizing it in place first) and write atomically.
pub fn save_checkpoint(state: &mut TrainState, path: &Path) -> Result<()> {
    state.quantize_for_checkpoint();
    let bytes = encode(state)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let mut payload = PayloadWriter::new();

    for (name, tensor) in PARAM_NAMES.iter().zip(state.encoders.all_tensors()) {
        payload.push_tensor(&format!("param.{name}"), tensor);
    }
    for (slot, &idx) in state.encoders.trainable_indices().iter().enumerate() {
        let name = PARAM_NAMES[idx];
        payload.push_tensor(&format!("m1.{name}"), &state.optimizer.first_moment[slot]);
        payload.push_tensor(&format!("m2.{name}"), &state.optimizer.second_moment[slot]);
    }
    if let Some(teacher) = &state.teacher {
        for (name, tensor) in PARAM_NAMES.iter().zip(teacher.params().all_tensors()) {
            payload.push_tensor(&format!("teacher.{name}"), tensor);
        }
    }

    let mut buffer_modalities = Vec::new();
    let mut buffer_labels = Vec::new();
    if !state.buffer.is_empty() {
        let n = state.buffer.len();
        let d_img = state.config.image_dim;
        let d_txt = state.config.text_dim;
        let mut images = Vec::with_capacity(n * d_img);
        let mut texts = Vec::with_capacity(n * d_txt);
        let mut ranks = Vec::with_capacity(n);
        for e in state.buffer.entries() {
            images.extend_from_slice(&e.sample.image);
            texts.extend_from_slice(&e.sample.text);
            ranks.push(e.rank);
            buffer_modalities.push(e.sample.modality_id);
            buffer_labels.push(e.sample.class_label);
        }
        payload.push("buffer.images", vec![n, d_img], &images);
        payload.push("buffer.texts", vec![n, d_txt], &texts);
        payload.push("buffer.ranks", vec![n, 1], &ranks);
    }

    let mut pool_modalities = Vec::new();
    let mut pool_labels = Vec::new();
    if !state.pool.is_empty() {
        let n = state.pool.len();
        let d_img = state.config.image_dim;
        let d_txt = state.config.text_dim;
        let mut images = Vec::with_capacity(n * d_img);
        let mut texts = Vec::with_capacity(n * d_txt);
        for s in &state.pool {
            images.extend_from_slice(&s.image);
            texts.extend_from_slice(&s.text);
            pool_modalities.push(s.modality_id);
            pool_labels.push(s.class_label);
        }
        payload.push("pool.images", vec![n, d_img], &images);
        payload.push("pool.texts", vec![n, d_txt], &texts);
    }

    let learning_metrics = state
        .learning_metrics
        .iter()
        .map(|((m, setting), (acc, auc))| (format!("{m}:{setting}"), [*acc, *auc]))
        .collect();

    let header = Header {
        config_text: state.config.canonical_string(),
        config_hash: state.config.run_id(),
        run_id: state.run_id.clone(),
        stage_index: state.stage_index,
        step_in_stage: state.step_in_stage,
        optimizer_step_count: state.optimizer.step_count,
        teacher_stage: state.teacher.as_ref().map(|t| t.stage_index()),
        buffer_modalities,
        buffer_labels,
        pool_modalities,
        pool_labels,
        learning_metrics,
        tensors: payload.metas,
        rng_streams: vec![RngMeta { name: "train".into(), words: 4 }],
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("header serialization: {e}")))?;

    let mut out = Vec::with_capacity(16 + header_json.len() + payload.bytes.len() + 32);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload.bytes);
    for word in state.train_rng.state() {
        out.extend_from_slice(&word.to_le_bytes());
    }
    Ok(out)
}

/// Read a checkpoint back into a runnable state. A config-hash mismatch
/// against the embedded config text is impossible here (the text is the
/// source); callers comparing an external config should use
/// [`config_hash_matches`].
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}

/// Compare an external config against the one stored in a checkpoint.
pub fn config_hash_matches(path: &Path, config: &RunConfig) -> Result<bool> {
    let bytes = fs::read(path)?;
    let header = parse_header(&bytes)?.0;
    Ok(header.config_hash == config.run_id())
}

fn parse_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 14 {
        return Err(Error::Corrupt("checkpoint shorter than its preamble".into()));
    }
    if &bytes[..6] != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let header_len = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    if bytes.len() < 14 + header_len {
        return Err(Error::Corrupt("checkpoint header truncated".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[14..14 + header_len])
        .map_err(|e| Error::Corrupt(format!("header parse: {e}")))?;
    Ok((header, 14 + header_len))
}

fn decode(bytes: &[u8]) -> Result<TrainState> {
    let (header, payload_start) = parse_header(bytes)?;

    let rng_words: u64 = header.rng_streams.iter().map(|r| r.words).sum();
    let payload_len = bytes
        .len()
        .checked_sub(payload_start + 8 * rng_words as usize)
        .ok_or_else(|| Error::Corrupt("checkpoint payload truncated".into()))?;
    let payload = &bytes[payload_start..payload_start + payload_len];

    let read_tensor = |meta: &TensorMeta| -> Result<Tensor> {
        let numel: usize = meta.shape.iter().product();
        let start = meta.offset as usize;
        let end = start + 4 * numel;
        if end > payload.len() {
            return Err(Error::Corrupt(format!("tensor {} beyond payload end", meta.name)));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Tensor::new(meta.shape.clone(), data)
    };
    let by_name: BTreeMap<&str, &TensorMeta> =
        header.tensors.iter().map(|m| (m.name.as_str(), m)).collect();
    let require = |name: &str| -> Result<Tensor> {
        by_name
            .get(name)
            .map(|m| read_tensor(m))
            .ok_or_else(|| Error::Corrupt(format!("checkpoint misses tensor '{name}'")))?
    };

    let config = RunConfig::parse(&header.config_text, None)?;
    if config.run_id() != header.config_hash {
        // Warn-only policy: the embedded text is authoritative.
        eprintln!(
            "warning: checkpoint config hash {} does not match its embedded config {}",
            header.config_hash,
            config.run_id()
        );
    }

    let mut encoders = EncoderParams::init(
        config.image_dim,
        config.text_dim,
        config.hidden_dim,
        config.embed_dim,
        config.seed,
    )?;
    encoders.learn_temperature = config.learn_temperature;
    let fill = |params: &mut EncoderParams, prefix: &str| -> Result<()> {
        for (name, slot) in PARAM_NAMES.iter().zip(params.all_tensors_mut()) {
            let loaded = require(&format!("{prefix}.{name}"))?;
            if loaded.shape != slot.shape {
                return Err(Error::Corrupt(format!(
                    "tensor {prefix}.{name} has shape {:?}, expected {:?}",
                    loaded.shape, slot.shape
                )));
            }
            slot.data = loaded.data;
        }
        Ok(())
    };
    fill(&mut encoders, "param")?;

    let trainable = encoders.trainable_indices();
    let mut optimizer = {
        let all = encoders.all_tensors();
        let refs: Vec<&Tensor> = trainable.iter().map(|&i| all[i]).collect();
        OptimizerState::new(&refs, config.learning_rate, config.warmup_steps, config.weight_decay)?
    };
    optimizer.step_count = header.optimizer_step_count;
    for (slot, &idx) in trainable.iter().enumerate() {
        let name = PARAM_NAMES[idx];
        optimizer.first_moment[slot] = require(&format!("m1.{name}"))?;
        optimizer.second_moment[slot] = require(&format!("m2.{name}"))?;
    }

    let teacher = match header.teacher_stage {
        Some(stage) => {
            let mut tp = EncoderParams::init(
                config.image_dim,
                config.text_dim,
                config.hidden_dim,
                config.embed_dim,
                config.seed,
            )?;
            tp.learn_temperature = config.learn_temperature;
            fill(&mut tp, "teacher")?;
            Some(TeacherSnapshot::from_quantized(tp, stage))
        }
        None => None,
    };

    let buffer = if header.buffer_modalities.is_empty() {
        RehearsalBuffer::new(config.buffer_capacity)?
    } else {
        let images = require("buffer.images")?;
        let texts = require("buffer.texts")?;
        let ranks = require("buffer.ranks")?;
        let n = header.buffer_modalities.len();
        if images.shape[0] != n || texts.shape[0] != n || ranks.shape[0] != n {
            return Err(Error::Corrupt("buffer block sizes disagree".into()));
        }
        let entries: Vec<BufferEntry> = (0..n)
            .map(|i| BufferEntry {
                sample: PairSample {
                    image: images.row(i).to_vec(),
                    text: texts.row(i).to_vec(),
                    class_label: header.buffer_labels[i],
                    modality_id: header.buffer_modalities[i],
                },
                rank: ranks.data[i],
            })
            .collect();
        RehearsalBuffer::from_entries(config.buffer_capacity, entries)?
    };

    let pool = if header.pool_modalities.is_empty() {
        std::collections::VecDeque::new()
    } else {
        let images = require("pool.images")?;
        let texts = require("pool.texts")?;
        let n = header.pool_modalities.len();
        if images.shape[0] != n || texts.shape[0] != n {
            return Err(Error::Corrupt("pool block sizes disagree".into()));
        }
        (0..n)
            .map(|i| PairSample {
                image: images.row(i).to_vec(),
                text: texts.row(i).to_vec(),
                class_label: header.pool_labels[i],
                modality_id: header.pool_modalities[i],
            })
            .collect()
    };

    let mut learning_metrics = BTreeMap::new();
    for (key, [acc, auc]) in &header.learning_metrics {
        let (m, setting) = key
            .split_once(':')
            .ok_or_else(|| Error::Corrupt(format!("bad learning-metrics key '{key}'")))?;
        let m: u32 = m
            .parse()
            .map_err(|_| Error::Corrupt(format!("bad modality in key '{key}'")))?;
        learning_metrics.insert((m, setting.to_string()), (*acc, *auc));
    }

    let rng_start = payload_start + payload_len;
    let mut words = [0u64; 4];
    for (i, w) in words.iter_mut().enumerate() {
        let at = rng_start + 8 * i;
        *w = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
    }

    let run_id = header.run_id;
    Ok(TrainState {
        config,
        run_id,
        encoders,
        optimizer,
        buffer,
        teacher,
        stage_index: header.stage_index,
        step_in_stage: header.step_in_stage,
        train_rng: Rng::from_state(words),
        pool,
        learning_metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{run_stage, RunOutput, Strategy, TrainState};

    fn state_after_one_stage(seed: u64) -> TrainState {
        let mut cfg = crate::pipeline::tests::tiny_config(Strategy::Retcop, seed, "ckpt");
        cfg.output_dir = std::env::temp_dir().join(format!("retcop-ckpt-{seed}"));
        let _ = fs::remove_dir_all(&cfg.output_dir);
        fs::create_dir_all(&cfg.output_dir).unwrap();
        let mut state = TrainState::init(cfg).unwrap();
        let mut out = RunOutput::default();
        let mut sink = Vec::new();
        run_stage(&mut state, &mut out, &mut sink).unwrap();
        state
    }

    #[test]
    fn roundtrip_preserves_state() {
        let mut state = state_after_one_stage(401);
        let path = state.config.output_dir.join("rt.bin");
        save_checkpoint(&mut state, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        assert_eq!(loaded.stage_index, state.stage_index);
        assert_eq!(loaded.step_in_stage, state.step_in_stage);
        assert_eq!(loaded.run_id, state.run_id);
        assert_eq!(loaded.train_rng, state.train_rng);
        assert_eq!(loaded.optimizer.step_count, state.optimizer.step_count);
        assert_eq!(loaded.learning_metrics, state.learning_metrics);
        // The saver quantized in place, so the roundtrip is exact.
        for (a, b) in loaded.encoders.all_tensors().iter().zip(state.encoders.all_tensors()) {
            assert_eq!(a.data, b.data);
        }
        assert_eq!(loaded.buffer.entries(), state.buffer.entries());
        let _ = fs::remove_dir_all(&state.config.output_dir);
    }

    #[test]
    fn reloaded_teacher_forward_is_bitwise_identical() {
        let mut state = state_after_one_stage(403);
        let path = state.config.output_dir.join("teacher.bin");
        let mut rng = Rng::from_seed(404);
        let batch = {
            let d = state.config.image_dim;
            let data: Vec<f64> = (0..6 * d).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            Tensor::matrix(6, d, data).unwrap()
        };
        use crate::encoders::PairEncoder;
        let before = state.teacher.as_ref().unwrap().embed_images(&batch).unwrap();
        save_checkpoint(&mut state, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let after = loaded.teacher.as_ref().unwrap().embed_images(&batch).unwrap();
        assert_eq!(before.data, after.data);
        let _ = fs::remove_dir_all(&state.config.output_dir);
    }

    #[test]
    fn bad_magic_version_and_truncation_are_detected() {
        let mut state = state_after_one_stage(405);
        let path = state.config.output_dir.join("bad.bin");
        save_checkpoint(&mut state, &path).unwrap();
        let bytes = fs::read(&path).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));

        let mut bad = bytes.clone();
        bad[6] = 99;
        assert!(matches!(decode(&bad), Err(Error::Format(_))));

        assert!(matches!(decode(&bytes[..bytes.len() - 40]), Err(Error::Corrupt(_))));
        let _ = fs::remove_dir_all(&state.config.output_dir);
    }

    #[test]
    fn external_config_hash_comparison() {
        let mut state = state_after_one_stage(407);
        let path = state.config.output_dir.join("hash.bin");
        save_checkpoint(&mut state, &path).unwrap();
        assert!(config_hash_matches(&path, &state.config).unwrap());
        let mut other = state.config.clone();
        other.lambda = 0.25;
        assert!(!config_hash_matches(&path, &other).unwrap());
        let _ = fs::remove_dir_all(&state.config.output_dir);
    }
}

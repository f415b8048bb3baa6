//! Stage orchestration: the continual training loop, strategy dispatch,
//! evaluation at stage boundaries, and checkpointing.
//!
//! A run is a pure function of (config, seed): all randomness flows
//! through named streams derived from the config seed, and checkpoint
//! saves round the live state to its 32-bit storage precision, so a
//! resumed run continues exactly as the saving run did.

pub mod checkpoint;
pub mod config;
pub mod report;

pub use config::{RunConfig, Strategy};

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use crate::alignment::{clip_loss_node, similarity_matrix_node, SimilarityMatrix};
use crate::diffcore::optim::OptimizerState;
use crate::diffcore::tape::Tape;
use crate::diffcore::tensor::Tensor;
use crate::distill::{odid_loss_node, row_correction, teacher_similarity, total_loss_node, DistillConfig};
use crate::encoders::{EncoderParams, PairEncoder, TeacherSnapshot};
use crate::error::{Error, Result};
use crate::eval::{forgetting_rate, linear_probe_eval, zero_shot_eval, MetricsRecord};
use crate::rehearsal::{
    build_stage_exemplars, mof_select, reservoir_update, sample_mixed_batch, BufferEntry,
    RehearsalBuffer,
};
use crate::rng::Rng;
use crate::synthstream::{build_modality, image_batch, text_batch, PairSample};

/// Exemplar pool: the most recent pairs seen in the current stage.
pub const POOL_CAPACITY: usize = 2048;

/// RNG stream tags.
const TAG_TRAIN: u64 = 0x747261696e;
const TAG_EXEMPLAR: u64 = 0x6578656d;
const TAG_EVAL: u64 = 0x6576616c5f73;

/// Everything a run carries between steps (and into checkpoints).
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: RunConfig,
    pub run_id: String,
    pub encoders: EncoderParams,
    pub optimizer: OptimizerState,
    pub buffer: RehearsalBuffer,
    pub teacher: Option<TeacherSnapshot>,
    /// 1-based stage currently being trained (n_stages + 1 when done).
    pub stage_index: usize,
    pub step_in_stage: usize,
    pub train_rng: Rng,
    /// Recent current-stage pairs, exemplar-selection candidates.
    pub pool: VecDeque<PairSample>,
    /// (modality, setting) -> (acc, auc) recorded at the learning stage.
    pub learning_metrics: BTreeMap<(u32, String), (f64, f64)>,
}

impl TrainState {
    pub fn init(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut encoders = EncoderParams::init(
            config.image_dim,
            config.text_dim,
            config.hidden_dim,
            config.embed_dim,
            config.seed,
        )?;
        encoders.learn_temperature = config.learn_temperature;
        let optimizer = {
            let all = encoders.all_tensors();
            let trainable: Vec<&Tensor> =
                encoders.trainable_indices().iter().map(|&i| all[i]).collect();
            OptimizerState::new(
                &trainable,
                config.learning_rate,
                config.warmup_steps,
                config.weight_decay,
            )?
        };
        let buffer = RehearsalBuffer::new(config.buffer_capacity)?;
        let train_rng = Rng::derive(config.seed, &[TAG_TRAIN, 1]);
        let run_id = config.run_id();
        Ok(TrainState {
            config,
            run_id,
            encoders,
            optimizer,
            buffer,
            teacher: None,
            stage_index: 1,
            step_in_stage: 0,
            train_rng,
            pool: VecDeque::with_capacity(POOL_CAPACITY),
            learning_metrics: BTreeMap::new(),
        })
    }

    pub fn finished(&self) -> bool {
        self.stage_index > self.config.n_stages()
    }

    /// Global step count across stages.
    pub fn global_step(&self) -> usize {
        (self.stage_index - 1) * self.config.steps_per_stage + self.step_in_stage
    }

    /// Round the live state to checkpoint storage precision (f32). Saving
    /// goes through this so the on-disk state and the in-memory state the
    /// run continues with are identical.
    pub fn quantize_for_checkpoint(&mut self) {
        self.encoders.quantize_f32();
        for m in self
            .optimizer
            .first_moment
            .iter_mut()
            .chain(self.optimizer.second_moment.iter_mut())
        {
            m.quantize_f32();
        }
        let quantize_pair = |s: &mut PairSample| {
            s.image.iter_mut().for_each(|v| *v = *v as f32 as f64);
            s.text.iter_mut().for_each(|v| *v = *v as f32 as f64);
        };
        let entries: Vec<BufferEntry> = self
            .buffer
            .entries()
            .iter()
            .map(|e| {
                let mut e = e.clone();
                quantize_pair(&mut e.sample);
                e.rank = e.rank as f32 as f64;
                e
            })
            .collect();
        self.buffer = RehearsalBuffer::from_entries(self.config.buffer_capacity, entries)
            .expect("quantization preserves buffer size");
        for s in &mut self.pool {
            quantize_pair(s);
        }
        // teacher params are f32-rounded at snapshot creation already
    }
}

/// Per-step and per-stage outputs of a run.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub metrics: Vec<MetricsRecord>,
    /// Total training loss at every step, all stages concatenated.
    pub loss_trace: Vec<f64>,
    pub metrics_path: PathBuf,
    pub final_checkpoint: PathBuf,
}

/// Run the full pipeline from a fresh state.
pub fn run_pipeline(config: &RunConfig) -> Result<RunOutput> {
    let state = TrainState::init(config.clone())?;
    run_from(state)
}

/// Resume a run from a checkpoint; continues bit-exactly.
pub fn resume_pipeline(checkpoint_path: &std::path::Path) -> Result<RunOutput> {
    let state = checkpoint::load_checkpoint(checkpoint_path)?;
    run_from(state)
}

fn run_from(mut state: TrainState) -> Result<RunOutput> {
    fs::create_dir_all(&state.config.output_dir)?;
    let metrics_path = state.config.output_dir.join("metrics.jsonl");
    let mut metrics_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)?;

    let mut out = RunOutput {
        metrics_path: metrics_path.clone(),
        ..RunOutput::default()
    };
    while !state.finished() {
        run_stage(&mut state, &mut out, &mut metrics_file)?;
    }
    let final_path = state.config.output_dir.join("checkpoint_final.bin");
    checkpoint::save_checkpoint(&mut state, &final_path)?;
    out.final_checkpoint = final_path;
    Ok(out)
}

/// Train one stage to completion: mixed batches, the strategy's loss, a
/// teacher snapshot and exemplar rebalance at the boundary, then
/// evaluation of every modality seen so far.
pub fn run_stage(
    state: &mut TrainState,
    out: &mut RunOutput,
    metrics_file: &mut dyn Write,
) -> Result<()> {
    let t = state.stage_index;
    let cfg = state.config.clone();
    if t > cfg.n_stages() {
        return Err(Error::Contract(format!(
            "stage {t} beyond the configured {}",
            cfg.n_stages()
        )));
    }
    let generator = build_modality(&cfg.stage_spec(t))?;
    let replay_fraction = if cfg.strategy.uses_replay() { cfg.replay_fraction } else { 0.0 };
    let distill_cfg = DistillConfig {
        lambda_weight: cfg.lambda,
        distill_temperature: cfg.distill_temperature,
    };
    let odid_active = cfg.strategy.uses_distillation() && t >= 2 && cfg.lambda > 0.0;
    if odid_active && state.teacher.is_none() {
        return Err(Error::Config(format!(
            "strategy {} needs a previous-stage teacher at stage {t}",
            cfg.strategy
        )));
    }

    let mut fallback_logged = false;
    while state.step_in_stage < cfg.steps_per_stage {
        let (batch, fell_back) = sample_mixed_batch(
            &state.buffer,
            &generator,
            cfg.batch_size,
            replay_fraction,
            &mut state.train_rng,
        )?;
        if fell_back && !fallback_logged {
            eprintln!(
                "note: stage {t}: replay requested with an empty buffer; using current-stage batches"
            );
            fallback_logged = true;
        }
        for sample in batch.iter().filter(|s| s.modality_id == t as u32) {
            if state.pool.len() == POOL_CAPACITY {
                state.pool.pop_front();
            }
            state.pool.push_back(sample.clone());
        }

        let teacher = if odid_active { state.teacher.as_ref() } else { None };
        let loss =
            training_step(&mut state.encoders, &mut state.optimizer, &batch, teacher, &distill_cfg)?;
        out.loss_trace.push(loss);
        state.step_in_stage += 1;

        if cfg.checkpoint_every_steps > 0
            && state.step_in_stage % cfg.checkpoint_every_steps == 0
            && state.step_in_stage < cfg.steps_per_stage
        {
            let path = cfg
                .output_dir
                .join(format!("checkpoint_stage{t}_step{}.bin", state.step_in_stage));
            checkpoint::save_checkpoint(state, &path)?;
        }
    }

    // Stage boundary: freeze the teacher, build this stage's exemplars,
    // rebalance the buffer, evaluate everything seen so far.
    state.teacher = Some(TeacherSnapshot::new(&state.encoders, t));

    let pool: Vec<PairSample> = state.pool.iter().cloned().collect();
    if let Some(exemplars) = stage_exemplars(&cfg, t, &pool, &state.encoders)? {
        state.buffer.rebalance(exemplars, t as u32);
    }

    evaluate_seen_modalities(state, t, out, metrics_file)?;

    state.stage_index += 1;
    state.step_in_stage = 0;
    state.pool.clear();
    state.train_rng = Rng::derive(cfg.seed, &[TAG_TRAIN, state.stage_index as u64]);

    let path = cfg.output_dir.join(format!("checkpoint_stage{t}.bin"));
    checkpoint::save_checkpoint(state, &path)?;
    Ok(())
}

/// Build the stage's exemplar list according to the strategy; `None` for
/// strategies that keep no buffer.
fn stage_exemplars(
    cfg: &RunConfig,
    stage: usize,
    pool: &[PairSample],
    encoders: &EncoderParams,
) -> Result<Option<Vec<BufferEntry>>> {
    if !cfg.strategy.uses_replay() || pool.is_empty() {
        return Ok(None);
    }
    // The newest modality's even-split share once `stage` modalities exist.
    let quota = *RehearsalBuffer::quotas(cfg.buffer_capacity, stage).last().unwrap();
    let quota = quota.min(pool.len());
    if quota == 0 {
        return Ok(None);
    }
    let seed = Rng::derive(cfg.seed, &[TAG_EXEMPLAR, stage as u64]).next_u64();
    let entries = match cfg.strategy {
        Strategy::Retcop | Strategy::RehearsalOnly => {
            let k = cfg.cluster_count.min(quota);
            build_stage_exemplars(pool, encoders, quota, k, seed)?
        }
        Strategy::Er => {
            let mut rng = Rng::from_seed(seed);
            let mut reservoir: Vec<PairSample> = Vec::with_capacity(quota);
            for (i, sample) in pool.iter().enumerate() {
                reservoir_update(&mut reservoir, quota, sample.clone(), i + 1, &mut rng);
            }
            reservoir
                .into_iter()
                .enumerate()
                .map(|(slot, sample)| BufferEntry { sample, rank: slot as f64 })
                .collect()
        }
        Strategy::Mof => {
            let images = encoders.embed_images(&image_batch(pool)?)?;
            let (features, _) = crate::diffcore::tensor::l2_normalize_rows(&images)?;
            mof_select(&features, quota)?
                .into_iter()
                .enumerate()
                .map(|(step, idx)| BufferEntry { sample: pool[idx].clone(), rank: step as f64 })
                .collect()
        }
        Strategy::SeqFt | Strategy::OdidOnly => unreachable!("filtered by uses_replay"),
    };
    Ok(Some(entries))
}

/// One optimizer step on a mixed batch. Returns the total loss value.
fn training_step(
    encoders: &mut EncoderParams,
    optimizer: &mut OptimizerState,
    batch: &[PairSample],
    teacher: Option<&TeacherSnapshot>,
    distill_cfg: &DistillConfig,
) -> Result<f64> {
    let images = image_batch(batch)?;
    let texts = text_batch(batch)?;

    let mut tape = Tape::new();
    let ids = encoders.register(&mut tape);
    let img_in = tape.constant(images.clone());
    let txt_in = tape.constant(texts.clone());
    let img_emb = encoders.image_tower.forward_on_tape(&mut tape, &ids.image, img_in)?;
    let txt_emb = encoders.text_tower.forward_on_tape(&mut tape, &ids.text, txt_in)?;
    let s = similarity_matrix_node(&mut tape, img_emb, txt_emb)?;
    let clip = clip_loss_node(&mut tape, s, ids.log_temperature)?;

    let total = match teacher {
        Some(teacher) => {
            // Student similarities enter the correction detached; only the
            // on-tape log-softmax path below carries gradient.
            let s_student = SimilarityMatrix::new(tape.value(s).clone())?;
            let s_teacher = teacher_similarity(teacher, &images, &texts)?;
            let (corrected, _) = row_correction(&s_teacher, &s_student)?;
            let odid =
                odid_loss_node(&mut tape, s, corrected.values(), distill_cfg.distill_temperature)?;
            total_loss_node(&mut tape, clip, odid, distill_cfg)?
        }
        None => clip,
    };

    tape.backward(total)?;
    let loss = tape.value(total).data[0];

    let all_ids = ids.all_ids();
    let trainable = encoders.trainable_indices();
    let grads: Vec<Tensor> = trainable.iter().map(|&i| tape.grad(all_ids[i])).collect();
    drop(tape);

    {
        let all = encoders.all_tensors_mut();
        let mut params: Vec<&mut Tensor> = all
            .into_iter()
            .enumerate()
            .filter(|(i, _)| trainable.contains(i))
            .map(|(_, t)| t)
            .collect();
        optimizer.step(&mut params, &grads)?;
    }
    encoders.clamp_temperature();
    Ok(loss)
}

/// Zero-shot and linear-probe evaluation of every modality seen so far,
/// with forgetting deltas against the learning-stage records.
fn evaluate_seen_modalities(
    state: &mut TrainState,
    stage: usize,
    out: &mut RunOutput,
    metrics_file: &mut dyn Write,
) -> Result<()> {
    let cfg = &state.config;
    let eval_seed = Rng::derive(cfg.seed, &[TAG_EVAL, stage as u64]).next_u64();
    let step = state.global_step();

    let mut records = Vec::new();
    for m in 1..=stage {
        let generator = build_modality(&cfg.stage_spec(m))?;
        let zs = zero_shot_eval(&state.encoders, &generator, cfg.eval_test_samples, eval_seed)?;
        let lp = linear_probe_eval(
            &state.encoders,
            &generator,
            cfg.probe_train_samples,
            cfg.eval_test_samples,
            eval_seed,
        )?;
        for (setting, (acc, auc)) in [("zeroshot", zs), ("linprobe", lp)] {
            let key = (m as u32, setting.to_string());
            let forgetting = if m == stage {
                state.learning_metrics.insert(key, (acc, auc));
                None
            } else {
                let (learn_acc, _) = state.learning_metrics.get(&key).copied().ok_or_else(|| {
                    Error::Contract(format!("no learning-stage metrics for modality {m} {setting}"))
                })?;
                Some(forgetting_rate(learn_acc, acc)?)
            };
            records.push(MetricsRecord {
                run_id: state.run_id.clone(),
                strategy: cfg.strategy.name().to_string(),
                stage,
                modality: m as u32,
                setting: setting.to_string(),
                acc,
                auc,
                forgetting,
                step,
            });
        }
    }
    for record in records {
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::Format(format!("metrics serialization: {e}")))?;
        writeln!(metrics_file, "{line}")?;
        out.metrics.push(record);
    }
    Ok(())
}

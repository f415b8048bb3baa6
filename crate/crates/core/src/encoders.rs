//! Two-tower image/text encoders with projection heads and a learnable
//! temperature, plus frozen teacher snapshots.
//!
//! Each tower is a 2-layer perceptron (tanh hidden, linear projection)
//! into a shared embedding dimension. Outputs are deliberately left
//! unnormalized; the similarity computation owns normalization exactly
//! once.

use crate::diffcore::tape::{NodeId, Tape};
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Temperature initialization: tau = 0.07 (inverse scale 1/tau ~ 14.29).
pub const INIT_TEMPERATURE: f64 = 0.07;
/// log-temperature is clamped to [-5, 5] after every optimizer step, so
/// tau stays within [exp(-5), exp(5)].
pub const LOG_TEMP_BOUND: f64 = 5.0;

/// Anything that embeds image and text batches into a common space.
/// Evaluation is written against this trait so tests can plug in oracle
/// encoders.
pub trait PairEncoder {
    fn embed_images(&self, batch: &Tensor) -> Result<Tensor>;
    fn embed_texts(&self, batch: &Tensor) -> Result<Tensor>;
}

/// One 2-layer tower: input -> hidden (tanh) -> embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Tower {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Tower {
    fn init(d_in: usize, hidden: usize, d_out: usize, rng: &mut Rng) -> Self {
        let scaled = |fan_in: usize, n: usize, rng: &mut Rng| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.uniform_range(-bound, bound)).collect()
        };
        Tower {
            w1: Tensor::matrix(d_in, hidden, scaled(d_in, d_in * hidden, rng)).unwrap().with_grad(),
            b1: Tensor::zeros(vec![1, hidden]).with_grad(),
            w2: Tensor::matrix(hidden, d_out, scaled(hidden, hidden * d_out, rng)).unwrap().with_grad(),
            b2: Tensor::zeros(vec![1, d_out]).with_grad(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape[0]
    }

    /// Plain forward pass (no tape).
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        use crate::diffcore::tensor as t;
        let (_, d) = batch.dims2()?;
        if d != self.input_dim() {
            return Err(Error::Shape(format!(
                "tower expects width {}, batch has {d}",
                self.input_dim()
            )));
        }
        let h = t::tanh(&t::add_row_bias(&t::matmul(batch, &self.w1)?, &self.b1)?);
        t::add_row_bias(&t::matmul(&h, &self.w2)?, &self.b2)
    }

    /// Recorded forward pass through parameter leaves already on the tape.
    pub fn forward_on_tape(&self, tape: &mut Tape, ids: &TowerNodes, batch: NodeId) -> Result<NodeId> {
        let pre = tape.matmul(batch, ids.w1)?;
        let pre = tape.add_row_bias(pre, ids.b1)?;
        let h = tape.tanh(pre);
        let out = tape.matmul(h, ids.w2)?;
        tape.add_row_bias(out, ids.b2)
    }

    fn quantize_f32(&mut self) {
        self.w1.quantize_f32();
        self.b1.quantize_f32();
        self.w2.quantize_f32();
        self.b2.quantize_f32();
    }
}

/// Tape leaf ids for one tower's parameters.
#[derive(Debug, Clone, Copy)]
pub struct TowerNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Full parameter set: both towers plus log-temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub image_tower: Tower,
    pub text_tower: Tower,
    /// tau = exp(log_temperature); kept in log space for positivity.
    pub log_temperature: Tensor,
    /// When false the temperature is frozen out of the trainable set.
    pub learn_temperature: bool,
}

/// Stable names for the parameter tensors, used by checkpoints and the
/// optimizer state layout.
pub const PARAM_NAMES: [&str; 9] = [
    "img.w1", "img.b1", "img.w2", "img.b2",
    "txt.w1", "txt.b1", "txt.w2", "txt.b2",
    "log_temperature",
];

impl EncoderParams {
    /// Fan-in scaled uniform init, zero biases, tau = 0.07; deterministic
    /// for a fixed seed.
    pub fn init(d_img: usize, d_txt: usize, hidden: usize, embed_dim: usize, seed: u64) -> Result<Self> {
        for (name, v) in [("d_img", d_img), ("d_txt", d_txt), ("hidden", hidden), ("embed_dim", embed_dim)] {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be positive")));
            }
        }
        let mut rng = Rng::derive(seed, &[0x656e_636f_6465]);
        let image_tower = Tower::init(d_img, hidden, embed_dim, &mut rng);
        let text_tower = Tower::init(d_txt, hidden, embed_dim, &mut rng);
        Ok(EncoderParams {
            image_tower,
            text_tower,
            log_temperature: Tensor::scalar(INIT_TEMPERATURE.ln()).with_grad(),
            learn_temperature: true,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.image_tower.w2.shape[1]
    }

    /// Current temperature tau.
    pub fn temperature(&self) -> f64 {
        self.log_temperature.data[0].exp()
    }

    /// All parameter tensors in `PARAM_NAMES` order.
    pub fn all_tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.image_tower.w1, &self.image_tower.b1, &self.image_tower.w2, &self.image_tower.b2,
            &self.text_tower.w1, &self.text_tower.b1, &self.text_tower.w2, &self.text_tower.b2,
            &self.log_temperature,
        ]
    }

    pub fn all_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.image_tower.w1, &mut self.image_tower.b1,
            &mut self.image_tower.w2, &mut self.image_tower.b2,
            &mut self.text_tower.w1, &mut self.text_tower.b1,
            &mut self.text_tower.w2, &mut self.text_tower.b2,
            &mut self.log_temperature,
        ]
    }

    /// Indices into `all_tensors` that the optimizer updates.
    pub fn trainable_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..8).collect();
        if self.learn_temperature {
            idx.push(8);
        }
        idx
    }

    /// Register every parameter as a tape leaf.
    pub fn register(&self, tape: &mut Tape) -> EncoderNodes {
        let t = |tape: &mut Tape, x: &Tensor| tape.leaf(x.clone());
        EncoderNodes {
            image: TowerNodes {
                w1: t(tape, &self.image_tower.w1),
                b1: t(tape, &self.image_tower.b1),
                w2: t(tape, &self.image_tower.w2),
                b2: t(tape, &self.image_tower.b2),
            },
            text: TowerNodes {
                w1: t(tape, &self.text_tower.w1),
                b1: t(tape, &self.text_tower.b1),
                w2: t(tape, &self.text_tower.w2),
                b2: t(tape, &self.text_tower.b2),
            },
            log_temperature: t(tape, &self.log_temperature),
        }
    }

    /// Clamp log-temperature into its band (run after each optimizer step).
    pub fn clamp_temperature(&mut self) {
        let v = self.log_temperature.data[0];
        self.log_temperature.data[0] = v.clamp(-LOG_TEMP_BOUND, LOG_TEMP_BOUND);
    }

    /// Round every parameter through f32 (checkpoint storage precision).
    pub fn quantize_f32(&mut self) {
        self.image_tower.quantize_f32();
        self.text_tower.quantize_f32();
        self.log_temperature.quantize_f32();
    }
}

impl PairEncoder for EncoderParams {
    fn embed_images(&self, batch: &Tensor) -> Result<Tensor> {
        self.image_tower.forward(batch)
    }

    fn embed_texts(&self, batch: &Tensor) -> Result<Tensor> {
        self.text_tower.forward(batch)
    }
}

/// Tape leaf ids for the full parameter set, in `PARAM_NAMES` order.
#[derive(Debug, Clone, Copy)]
pub struct EncoderNodes {
    pub image: TowerNodes,
    pub text: TowerNodes,
    pub log_temperature: NodeId,
}

impl EncoderNodes {
    pub fn all_ids(&self) -> Vec<NodeId> {
        vec![
            self.image.w1, self.image.b1, self.image.w2, self.image.b2,
            self.text.w1, self.text.b1, self.text.w2, self.text.b2,
            self.log_temperature,
        ]
    }
}

/// Immutable copy of the encoders taken at a stage boundary.
///
/// Parameters are rounded to f32 storage precision at creation, so a
/// snapshot that round-trips through a checkpoint reproduces its outputs
/// bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSnapshot {
    params: EncoderParams,
    stage_index: usize,
}

impl TeacherSnapshot {
    pub fn new(params: &EncoderParams, stage_index: usize) -> Self {
        let mut params = params.clone();
        params.quantize_f32();
        TeacherSnapshot { params, stage_index }
    }

    /// Rebuild from already-quantized parameters (checkpoint load).
    pub fn from_quantized(params: EncoderParams, stage_index: usize) -> Self {
        TeacherSnapshot { params, stage_index }
    }

    pub fn stage_index(&self) -> usize {
        self.stage_index
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }
}

impl PairEncoder for TeacherSnapshot {
    fn embed_images(&self, batch: &Tensor) -> Result<Tensor> {
        self.params.embed_images(batch)
    }

    fn embed_texts(&self, batch: &Tensor) -> Result<Tensor> {
        self.params.embed_texts(batch)
    }
}

//! Gradient verification suite: every recorded operation, the individual
//! losses, and the full composed training objective checked against
//! central finite differences.

use crate::alignment::{clip_loss_node, similarity_matrix_node};
use crate::diffcore::gradcheck::grad_check;
use crate::diffcore::tape::{NodeId, Tape};
use crate::diffcore::tensor::Tensor;
use crate::distill::{odid_loss_node, row_correction, teacher_similarity, total_loss_node, DistillConfig};
use crate::encoders::{EncoderParams, TeacherSnapshot};
use crate::error::Result;
use crate::rng::Rng;
use crate::synthstream::{build_modality, image_batch, text_batch, ModalitySpec};

/// Gate for the composed-loss checks (central differences, h = 1e-4).
pub const COMPOSED_TOLERANCE: f64 = 1e-4;
/// Tighter per-operation gate.
pub const PER_OP_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn random_tensor(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.uniform_range(lo, hi)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Reduce any tensor node to a non-trivially-weighted scalar.
fn weighted_sum(tape: &mut Tape, node: NodeId, weights: &Tensor) -> Result<NodeId> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(node, w)?;
    Ok(tape.sum(prod))
}

/// Run the whole suite. Deterministic for a fixed seed.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::derive(seed, &[0x766572696679]);
    let mut results = Vec::new();
    let mut check =
        |name: &'static str, tolerance: f64, err: Result<f64>| -> Result<()> {
            results.push(CheckResult { name, max_rel_err: err?, tolerance });
            Ok(())
        };

    // ── individual operations ───────────────────────────────────────
    {
        let a = random_tensor(&mut rng, 3, 4, -1.0, 1.0);
        let b = random_tensor(&mut rng, 4, 2, -1.0, 1.0);
        let w = random_tensor(&mut rng, 3, 2, -1.0, 1.0);
        check("matmul", PER_OP_TOLERANCE, grad_check(
            |tape, ids| {
                let y = tape.matmul(ids[0], ids[1])?;
                weighted_sum(tape, y, &w)
            },
            &[a, b],
            1e-5,
        ))?;
    }
    {
        let x = random_tensor(&mut rng, 3, 4, -1.0, 1.0);
        let w = random_tensor(&mut rng, 4, 3, -1.0, 1.0);
        check("transpose", PER_OP_TOLERANCE, grad_check(
            |tape, ids| {
                let y = tape.transpose(ids[0])?;
                weighted_sum(tape, y, &w)
            },
            &[x],
            1e-5,
        ))?;
    }
    {
        let x = random_tensor(&mut rng, 5, 8, -1.0, 1.0);
        let w = random_tensor(&mut rng, 5, 8, -1.0, 1.0);
        check("l2_normalize_rows", PER_OP_TOLERANCE, grad_check(
            |tape, ids| {
                let y = tape.l2_normalize_rows(ids[0])?;
                weighted_sum(tape, y, &w)
            },
            &[x],
            1e-5,
        ))?;
    }
    {
        let x = random_tensor(&mut rng, 4, 5, -2.0, 2.0);
        let w = random_tensor(&mut rng, 4, 5, -1.0, 1.0);
        check("row_softmax", PER_OP_TOLERANCE, grad_check(
            |tape, ids| {
                let y = tape.row_softmax(ids[0], 0.7)?;
                weighted_sum(tape, y, &w)
            },
            &[x],
            1e-5,
        ))?;
    }
    {
        let x = random_tensor(&mut rng, 4, 5, -2.0, 2.0);
        let w = random_tensor(&mut rng, 4, 1, -1.0, 1.0);
        check("row_logsumexp", PER_OP_TOLERANCE, grad_check(
            |tape, ids| {
                let y = tape.row_logsumexp(ids[0])?;
                weighted_sum(tape, y, &w)
            },
            &[x],
            1e-5,
        ))?;
    }
    {
        let x = random_tensor(&mut rng, 4, 4, -1.0, 1.0);
        let w = random_tensor(&mut rng, 4, 1, -1.0, 1.0);
        check("diag", PER_OP_TOLERANCE, grad_check(
            |tape, ids| {
                let y = tape.diag(ids[0])?;
                weighted_sum(tape, y, &w)
            },
            &[x],
            1e-5,
        ))?;
    }
    {
        let x = random_tensor(&mut rng, 4, 3, -1.0, 1.0);
        let b = random_tensor(&mut rng, 1, 3, -1.0, 1.0);
        let c = random_tensor(&mut rng, 4, 1, -1.0, 1.0);
        let s = Tensor::scalar(0.83);
        let w = random_tensor(&mut rng, 4, 3, -1.0, 1.0);
        check("broadcast (row bias, column, scale)", PER_OP_TOLERANCE, grad_check(
            |tape, ids| {
                let y = tape.add_row_bias(ids[0], ids[1])?;
                let y = tape.sub_col(y, ids[2])?;
                let y = tape.scale(y, ids[3])?;
                weighted_sum(tape, y, &w)
            },
            &[x, b, c, s],
            1e-5,
        ))?;
    }
    {
        let a = random_tensor(&mut rng, 3, 3, -1.0, 1.0);
        let b = random_tensor(&mut rng, 3, 3, -1.0, 1.0);
        let w = random_tensor(&mut rng, 3, 3, -1.0, 1.0);
        check("add / sub / mul / scalar_mul / neg", PER_OP_TOLERANCE, grad_check(
            |tape, ids| {
                let sum = tape.add(ids[0], ids[1])?;
                let diff = tape.sub(ids[0], ids[1])?;
                let prod = tape.mul(sum, diff)?;
                let scaled = tape.scalar_mul(prod, 0.31);
                let neg = tape.neg(scaled);
                weighted_sum(tape, neg, &w)
            },
            &[a, b],
            1e-5,
        ))?;
    }
    {
        let x = random_tensor(&mut rng, 3, 4, -1.5, 1.5);
        let pos = random_tensor(&mut rng, 3, 4, 0.2, 2.5);
        let w = random_tensor(&mut rng, 3, 4, -1.0, 1.0);
        check("tanh / relu / exp / log", PER_OP_TOLERANCE, grad_check(
            |tape, ids| {
                let t = tape.tanh(ids[0]);
                let r = tape.relu(ids[0]);
                let e = tape.exp(t);
                let l = tape.log(ids[1])?;
                let m1 = tape.mul(e, l)?;
                let m2 = tape.add(m1, r)?;
                weighted_sum(tape, m2, &w)
            },
            &[x, pos],
            1e-5,
        ))?;
    }
    {
        let x = random_tensor(&mut rng, 3, 5, -1.0, 1.0);
        check("sum / mean", PER_OP_TOLERANCE, grad_check(
            |tape, ids| {
                let sq = tape.mul(ids[0], ids[0])?;
                let s = tape.sum(sq);
                let m = tape.mean(ids[0]);
                tape.add(s, m)
            },
            &[x],
            1e-5,
        ))?;
    }

    // ── composed losses ─────────────────────────────────────────────
    {
        let i = random_tensor(&mut rng, 5, 6, -1.0, 1.0);
        let t = random_tensor(&mut rng, 5, 6, -1.0, 1.0);
        let log_tau = Tensor::scalar(0.3f64.ln());
        check("InfoNCE over embeddings and temperature", COMPOSED_TOLERANCE, grad_check(
            |tape, ids| {
                let s = similarity_matrix_node(tape, ids[0], ids[1])?;
                clip_loss_node(tape, s, ids[2])
            },
            &[i, t, log_tau],
            1e-4,
        ))?;
    }
    {
        let teacher = random_tensor(&mut rng, 5, 5, -1.0, 1.0);
        let student = random_tensor(&mut rng, 5, 5, -1.0, 1.0);
        check("distillation KL over student similarities", COMPOSED_TOLERANCE, grad_check(
            |tape, ids| odid_loss_node(tape, ids[0], &teacher, 0.8),
            &[student],
            1e-4,
        ))?;
    }

    // ── full objective through the encoders ─────────────────────────
    {
        let spec = ModalitySpec {
            modality_id: 1,
            n_classes: 3,
            latent_dim: 5,
            image_dim: 7,
            text_dim: 6,
            noise_sigma: 0.15,
            generator_seed: rng.next_u64(),
        };
        let generator = build_modality(&spec)?;
        let mut sample_rng = Rng::from_seed(rng.next_u64());
        let batch = generator.sample_pairs(4, &mut sample_rng)?;
        let images = image_batch(&batch)?;
        let texts = text_batch(&batch)?;

        let student = EncoderParams::init(7, 6, 9, 5, rng.next_u64())?;
        // A teacher from different weights, so row correction has work to do.
        let teacher_params = EncoderParams::init(7, 6, 9, 5, rng.next_u64())?;
        let teacher = TeacherSnapshot::new(&teacher_params, 1);
        let s_teacher = teacher_similarity(&teacher, &images, &texts)?;
        let distill_cfg = DistillConfig { lambda_weight: 1.0, distill_temperature: 1.0 };

        // The corrected teacher matrix is a detached constant of the step:
        // freeze it at the unperturbed parameters so finite differences
        // probe the same function the tape differentiates.
        let s_student_base = crate::alignment::similarity_matrix(
            &crate::encoders::PairEncoder::embed_images(&student, &images)?,
            &crate::encoders::PairEncoder::embed_texts(&student, &texts)?,
        )?;
        let (corrected, _) = row_correction(&s_teacher, &s_student_base)?;
        let corrected = corrected.into_values();

        let params: Vec<Tensor> = student.all_tensors().into_iter().cloned().collect();
        let err = grad_check(
            |tape, ids| {
                let img_in = tape.constant(images.clone());
                let txt_in = tape.constant(texts.clone());
                let tower = |tape: &mut Tape, w1, b1, w2, b2, x| -> Result<NodeId> {
                    let pre = tape.matmul(x, w1)?;
                    let pre = tape.add_row_bias(pre, b1)?;
                    let h = tape.tanh(pre);
                    let out = tape.matmul(h, w2)?;
                    tape.add_row_bias(out, b2)
                };
                let i_emb = tower(tape, ids[0], ids[1], ids[2], ids[3], img_in)?;
                let t_emb = tower(tape, ids[4], ids[5], ids[6], ids[7], txt_in)?;
                let s = similarity_matrix_node(tape, i_emb, t_emb)?;
                let clip = clip_loss_node(tape, s, ids[8])?;
                let odid = odid_loss_node(tape, s, &corrected, distill_cfg.distill_temperature)?;
                total_loss_node(tape, clip, odid, &distill_cfg)
            },
            &params,
            1e-4,
        );
        check("full objective over a 4-pair batch", COMPOSED_TOLERANCE, err)?;
    }

    Ok(results)
}

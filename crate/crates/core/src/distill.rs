//! Off-diagonal information distillation against a frozen teacher.
//!
//! The teacher's batch similarity matrix is first row-corrected: any row
//! whose diagonal entry is not maximal is replaced by the student's row
//! (detached), since a stale teacher that misranks the positive pair would
//! only mislead the student. Both matrices are then converted to row
//! distributions by temperature softmax and matched with a row-averaged
//! KL divergence. The teacher side never participates in the gradient.

use crate::alignment::{similarity_matrix, SimilarityMatrix};
use crate::diffcore::tape::{NodeId, Tape};
use crate::diffcore::tensor::{self, Tensor};
use crate::encoders::{PairEncoder, TeacherSnapshot};
use crate::error::{Error, Result};

/// Weight and temperature for the distillation term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    /// Weight of the distillation term in the total loss.
    pub lambda_weight: f64,
    /// Softmax temperature converting similarity rows to distributions.
    pub distill_temperature: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig { lambda_weight: 1.0, distill_temperature: 1.0 }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_weight < 0.0 {
            return Err(Error::Parameter(format!(
                "lambda must be non-negative, got {}",
                self.lambda_weight
            )));
        }
        if self.distill_temperature <= 0.0 {
            return Err(Error::Parameter(format!(
                "distill temperature must be positive, got {}",
                self.distill_temperature
            )));
        }
        Ok(())
    }
}

/// Teacher similarity on a batch; identical math to the student path but
/// through frozen parameters, so it carries no gradient.
pub fn teacher_similarity(
    teacher: &TeacherSnapshot,
    image_batch: &Tensor,
    text_batch: &Tensor,
) -> Result<SimilarityMatrix> {
    let i = teacher.embed_images(image_batch)?;
    let t = teacher.embed_texts(text_batch)?;
    similarity_matrix(&i, &t)
}

/// Replace every teacher row whose diagonal is not maximal (ties at the
/// diagonal count as maximal) with the student's row. Returns the corrected
/// matrix and, for inspection, the indices of replaced rows.
pub fn row_correction(
    s_teacher: &SimilarityMatrix,
    s_student: &SimilarityMatrix,
) -> Result<(SimilarityMatrix, Vec<usize>)> {
    let n = s_teacher.batch_size();
    if n != s_student.batch_size() {
        return Err(Error::Shape(format!(
            "teacher batch {n} vs student batch {}",
            s_student.batch_size()
        )));
    }
    let mut out = s_teacher.values().clone();
    let mut replaced = Vec::new();
    for i in 0..n {
        let row = s_teacher.values().row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if row[i] < max {
            out.data[i * n..(i + 1) * n].copy_from_slice(s_student.values().row(i));
            replaced.push(i);
        }
    }
    Ok((SimilarityMatrix::new(out)?, replaced))
}

/// Row-averaged KL divergence between the softened teacher and student
/// similarity rows, off the tape:
/// (1/N) sum_i KL(softmax(corrected_i / T) || softmax(student_i / T)).
pub fn odid_loss(s_student: &Tensor, s_teacher_corrected: &Tensor, temperature: f64) -> Result<f64> {
    if temperature <= 0.0 {
        return Err(Error::Parameter(format!(
            "distill temperature must be positive, got {temperature}"
        )));
    }
    let (n, m) = s_student.dims2()?;
    if s_teacher_corrected.shape != s_student.shape {
        return Err(Error::Shape(format!(
            "student {:?} vs corrected teacher {:?}",
            s_student.shape, s_teacher_corrected.shape
        )));
    }
    let p = tensor::row_softmax(s_teacher_corrected, temperature)?;
    let q = tensor::row_softmax(s_student, temperature)?;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let pij = p.data[i * m + j];
            total += pij * (pij / q.data[i * m + j]).ln();
        }
    }
    // KL is non-negative analytically; clamp away tiny negative rounding.
    Ok((total / n as f64).max(0.0))
}

/// Recorded version of [`odid_loss`]. The teacher distribution enters as a
/// constant; only the student similarity node is differentiated, via its
/// log-softmax (max-subtracted log-sum-exp).
pub fn odid_loss_node(
    tape: &mut Tape,
    s_student: NodeId,
    s_teacher_corrected: &Tensor,
    temperature: f64,
) -> Result<NodeId> {
    if temperature <= 0.0 {
        return Err(Error::Parameter(format!(
            "distill temperature must be positive, got {temperature}"
        )));
    }
    let (n, _) = tape.value(s_student).dims2()?;
    if s_teacher_corrected.shape != tape.value(s_student).shape {
        return Err(Error::Shape(format!(
            "student {:?} vs corrected teacher {:?}",
            tape.value(s_student).shape,
            s_teacher_corrected.shape
        )));
    }

    let p = tensor::row_softmax(s_teacher_corrected, temperature)?;
    // Constant part: (1/N) sum p log p.
    let p_log_p: f64 = p.data.iter().map(|&v| v * v.ln()).sum::<f64>() / n as f64;

    // Differentiable part: -(1/N) sum p * log_softmax(student / T).
    let scaled = tape.scalar_mul(s_student, 1.0 / temperature);
    let lse = tape.row_logsumexp(scaled)?;
    let log_q = tape.sub_col(scaled, lse)?;
    let p_node = tape.constant(p);
    let cross = tape.mul(p_node, log_q)?;
    let cross_sum = tape.sum(cross);
    let neg_cross = tape.scalar_mul(cross_sum, -1.0 / n as f64);
    let const_node = tape.constant(Tensor::scalar(p_log_p));
    tape.add(neg_cross, const_node)
}

/// Total objective: clip + lambda * odid.
pub fn total_loss(clip: f64, odid: f64, cfg: &DistillConfig) -> f64 {
    clip + cfg.lambda_weight * odid
}

/// Recorded version of [`total_loss`].
pub fn total_loss_node(tape: &mut Tape, clip: NodeId, odid: NodeId, cfg: &DistillConfig) -> Result<NodeId> {
    let weighted = tape.scalar_mul(odid, cfg.lambda_weight);
    tape.add(clip, weighted)
}

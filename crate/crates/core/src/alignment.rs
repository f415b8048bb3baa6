//! Batch similarity matrix and the symmetric InfoNCE contrastive loss.
//!
//! The similarity matrix S holds cosine similarities between every image
//! embedding and every text embedding in a batch; the loss is the average
//! of row-wise (image-to-text) and column-wise (text-to-image) cross
//! entropies against the diagonal, divided by 2N so its magnitude is
//! batch-size independent. All log-sum-exp evaluations are max-subtracted.

use crate::diffcore::tape::{NodeId, Tape};
use crate::diffcore::tensor::{self, Tensor};
use crate::error::{Error, Result};

/// Cosine-similarity matrix between a batch of image and text embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Tensor,
    batch_size: usize,
}

impl SimilarityMatrix {
    /// Wrap an N x N matrix, validating squareness and the cosine bound
    /// (entries within [-1, 1] up to 1e-9 slack).
    pub fn new(values: Tensor) -> Result<Self> {
        let (n, m) = values.dims2()?;
        if n != m {
            return Err(Error::Shape(format!("similarity matrix must be square, got {n}x{m}")));
        }
        if let Some(v) = values.data.iter().find(|v| v.abs() > 1.0 + 1e-9) {
            return Err(Error::DegenerateInput(format!(
                "similarity entry {v} outside cosine bounds"
            )));
        }
        Ok(SimilarityMatrix { values, batch_size: n })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.data[i * self.batch_size + j]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.batch_size).map(|i| self.get(i, i)).collect()
    }
}

/// S = normalize_rows(I) . normalize_rows(T)^T, off the tape.
pub fn similarity_matrix(image_emb: &Tensor, text_emb: &Tensor) -> Result<SimilarityMatrix> {
    let (n, d) = image_emb.dims2()?;
    let (n2, d2) = text_emb.dims2()?;
    if n != n2 || d != d2 {
        return Err(Error::Shape(format!(
            "embedding batches {n}x{d} vs {n2}x{d2} must match"
        )));
    }
    let (inorm, _) = tensor::l2_normalize_rows(image_emb)?;
    let (tnorm, _) = tensor::l2_normalize_rows(text_emb)?;
    let s = tensor::matmul(&inorm, &tensor::transpose(&tnorm)?)?;
    SimilarityMatrix::new(s)
}

/// Recorded version of [`similarity_matrix`]; returns the S node.
pub fn similarity_matrix_node(tape: &mut Tape, image_emb: NodeId, text_emb: NodeId) -> Result<NodeId> {
    let (n, d) = tape.value(image_emb).dims2()?;
    let (n2, d2) = tape.value(text_emb).dims2()?;
    if n != n2 || d != d2 {
        return Err(Error::Shape(format!(
            "embedding batches {n}x{d} vs {n2}x{d2} must match"
        )));
    }
    let inorm = tape.l2_normalize_rows(image_emb)?;
    let tnorm = tape.l2_normalize_rows(text_emb)?;
    let tt = tape.transpose(tnorm)?;
    tape.matmul(inorm, tt)
}

/// Symmetric InfoNCE over S at temperature tau, off the tape:
/// -(1/2N) sum_i [ log softmax(S_i,: / tau)_ii + log softmax(S_:,i / tau)_ii ].
pub fn clip_loss(s: &SimilarityMatrix, tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    let n = s.batch_size();
    let scaled = tensor::scalar_mul(s.values(), 1.0 / tau);
    let lse_rows = tensor::row_logsumexp(&scaled)?;
    let lse_cols = tensor::row_logsumexp(&tensor::transpose(&scaled)?)?;
    let mut total = 0.0;
    for i in 0..n {
        let d = scaled.data[i * n + i];
        total += (lse_rows.data[i] - d) + (lse_cols.data[i] - d);
    }
    Ok(total / (2.0 * n as f64))
}

/// Recorded version of [`clip_loss`] with a learnable log-temperature leaf;
/// the similarity node is scaled by exp(-log_tau) before the log-sum-exp.
pub fn clip_loss_node(tape: &mut Tape, s: NodeId, log_tau: NodeId) -> Result<NodeId> {
    let (n, m) = tape.value(s).dims2()?;
    if n != m {
        return Err(Error::Shape(format!("similarity node must be square, got {n}x{m}")));
    }
    if !tape.value(log_tau).is_scalar() {
        return Err(Error::Parameter("log-temperature must be scalar".into()));
    }
    let neg_log_tau = tape.neg(log_tau);
    let inv_tau = tape.exp(neg_log_tau);
    let scaled = tape.scale(s, inv_tau)?;
    let d = tape.diag(scaled)?;
    let lse_rows = tape.row_logsumexp(scaled)?;
    let st = tape.transpose(scaled)?;
    let lse_cols = tape.row_logsumexp(st)?;
    let row_terms = tape.sub(lse_rows, d)?;
    let col_terms = tape.sub(lse_cols, d)?;
    let both = tape.add(row_terms, col_terms)?;
    let total = tape.sum(both);
    Ok(tape.scalar_mul(total, 1.0 / (2.0 * n as f64)))
}

/// Closed form of the loss at S = identity: log(1 + (N-1) e^(-1/tau)).
pub fn clip_loss_at_identity(n: usize, tau: f64) -> f64 {
    (1.0 + (n as f64 - 1.0) * (-1.0 / tau).exp()).ln()
}

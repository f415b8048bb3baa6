//! Dense row-major f64 tensor plus the plain (non-recorded) forward math.
//!
//! Tape operations call into these functions for their forward pass, and
//! gradient-free paths (teacher evaluation, metrics) use them directly, so
//! both routes share one numeric implementation.

use crate::error::{Error, Result};

/// Shaped numeric array. `requires_grad` marks parameters so the tape knows
/// which leaves accumulate gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero dimension in shape {shape:?}")));
        }
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Mark as a trainable parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows/cols of a rank-2 tensor (scalars count as 1x1).
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n, m] => Ok((*n, *m)),
            [1] => Ok((1, 1)),
            other => Err(Error::Shape(format!("expected rank-2 tensor, got {other:?}"))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, m) = (self.shape[0], self.shape[1]);
        &self.data[i * m..(i + 1) * m]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Round every value through f32 (the checkpoint storage precision).
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

// ── Plain forward math ──────────────────────────────────────────────

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose(x: &Tensor) -> Result<Tensor> {
    let (n, m) = x.dims2()?;
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = x.data[i * m + j];
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Minimum row norm accepted by `l2_normalize_rows`.
pub const NORM_EPSILON: f64 = 1e-12;

/// Row norms alongside the normalized tensor (the tape caches the norms for
/// the backward pass).
pub fn l2_normalize_rows(x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (n, m) = x.dims2()?;
    let mut out = vec![0.0; n * m];
    let mut norms = vec![0.0; n];
    for i in 0..n {
        let row = &x.data[i * m..(i + 1) * m];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < NORM_EPSILON {
            return Err(Error::DegenerateInput(format!(
                "row {i} has norm {norm:.3e} below {NORM_EPSILON:.0e}"
            )));
        }
        norms[i] = norm;
        for j in 0..m {
            out[i * m + j] = row[j] / norm;
        }
    }
    Ok((Tensor::new(vec![n, m], out)?, norms))
}

/// Row-wise softmax of `x / temperature`, max-subtracted for overflow safety.
pub fn row_softmax(x: &Tensor, temperature: f64) -> Result<Tensor> {
    if temperature <= 0.0 {
        return Err(Error::Parameter(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let (n, m) = x.dims2()?;
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &x.data[i * m..(i + 1) * m];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / temperature;
        let orow = &mut out[i * m..(i + 1) * m];
        let mut z = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v / temperature - mx).exp();
            *o = e;
            z += e;
        }
        for o in orow.iter_mut() {
            *o /= z;
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Row-wise log-sum-exp (max-subtracted), returning an n x 1 column.
pub fn row_logsumexp(x: &Tensor) -> Result<Tensor> {
    let (n, m) = x.dims2()?;
    let mut out = vec![0.0; n];
    for i in 0..n {
        let row = &x.data[i * m..(i + 1) * m];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
        out[i] = mx + z.ln();
    }
    Tensor::new(vec![n, 1], out)
}

/// Diagonal of a square matrix as an n x 1 column.
pub fn diag(x: &Tensor) -> Result<Tensor> {
    let (n, m) = x.dims2()?;
    if n != m {
        return Err(Error::Shape(format!("diag of non-square {n}x{m}")));
    }
    let out: Vec<f64> = (0..n).map(|i| x.data[i * m + i]).collect();
    Tensor::new(vec![n, 1], out)
}

fn zip_same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!("{op} on {:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same_shape(a, b, "add")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape.clone(), data)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same_shape(a, b, "sub")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    Tensor::new(a.shape.clone(), data)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same_shape(a, b, "mul")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape.clone(), data)
}

pub fn scalar_mul(x: &Tensor, c: f64) -> Tensor {
    let data = x.data.iter().map(|v| v * c).collect();
    Tensor { shape: x.shape.clone(), data, requires_grad: false }
}

/// x + b with b a 1 x d row bias broadcast over the rows of x.
pub fn add_row_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    let (bn, bd) = b.dims2()?;
    if bn != 1 || bd != d {
        return Err(Error::Shape(format!("row bias 1x{d} expected, got {bn}x{bd}")));
    }
    let mut out = x.data.clone();
    for i in 0..n {
        for j in 0..d {
            out[i * d + j] += b.data[j];
        }
    }
    Tensor::new(vec![n, d], out)
}

/// x - c with c an n x 1 column broadcast over the columns of x.
pub fn sub_col(x: &Tensor, c: &Tensor) -> Result<Tensor> {
    let (n, m) = x.dims2()?;
    let (cn, cm) = c.dims2()?;
    if cn != n || cm != 1 {
        return Err(Error::Shape(format!("column {n}x1 expected, got {cn}x{cm}")));
    }
    let mut out = x.data.clone();
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] -= c.data[i];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Every element of x times a single-element tensor.
pub fn scale(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    if !s.is_scalar() {
        return Err(Error::Shape(format!("scale factor must be scalar, got {:?}", s.shape)));
    }
    Ok(scalar_mul(x, s.data[0]))
}

pub fn tanh(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|v| v.tanh()).collect();
    Tensor { shape: x.shape.clone(), data, requires_grad: false }
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|v| v.max(0.0)).collect();
    Tensor { shape: x.shape.clone(), data, requires_grad: false }
}

pub fn exp(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|v| v.exp()).collect();
    Tensor { shape: x.shape.clone(), data, requires_grad: false }
}

pub fn log(x: &Tensor) -> Result<Tensor> {
    if let Some(v) = x.data.iter().find(|v| **v <= 0.0) {
        return Err(Error::Domain(format!("log of non-positive value {v}")));
    }
    let data = x.data.iter().map(|v| v.ln()).collect();
    Tensor::new(x.shape.clone(), data)
}

pub fn neg(x: &Tensor) -> Tensor {
    scalar_mul(x, -1.0)
}

pub fn sum(x: &Tensor) -> Tensor {
    Tensor::scalar(x.data.iter().sum())
}

pub fn mean(x: &Tensor) -> Tensor {
    Tensor::scalar(x.data.iter().sum::<f64>() / x.numel() as f64)
}

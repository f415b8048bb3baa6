//! Reverse-mode differentiation over a fixed tensor operation set.
//!
//! Operations append nodes to a [`Tape`]; creation order is a topological
//! order of the DAG, so the backward sweep is a single reverse pass that
//! visits each node exactly once and accumulates gradient contributions
//! additively. The op set is deliberately small (no general broadcasting):
//! every loss in this crate composes from matmul, row normalization, row
//! softmax/log-sum-exp, two fixed broadcast forms, elementwise maps, and
//! reductions, which keeps the backward surface exhaustively checkable
//! against finite differences.

use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// Caches the pre-normalization row norms.
    NormalizeRows(NodeId, Vec<f64>),
    RowSoftmax(NodeId, f64),
    RowLogSumExp(NodeId),
    Diag(NodeId),
    AddRowBias(NodeId, NodeId),
    SubCol(NodeId, NodeId),
    Scale(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    Tanh(NodeId),
    Relu(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Neg(NodeId),
    Sum(NodeId),
    Mean(NodeId),
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
}

/// Records one forward computation; single-threaded by construction.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite forward value");
        let grad = vec![0.0; value.numel()];
        self.nodes.push(Node { value, grad, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Put a tensor on the tape as a leaf (input, parameter, or constant).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Put a constant (non-trainable) tensor on the tape.
    pub fn constant(&mut self, mut value: Tensor) -> NodeId {
        value.requires_grad = false;
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target w.r.t. this node.
    pub fn grad(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor { shape: n.value.shape.clone(), data: n.grad.clone(), requires_grad: false }
    }

    // ── Recorded operations ─────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = tensor::transpose(self.value(x))?;
        Ok(self.push(v, Op::Transpose(x)))
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (v, norms) = tensor::l2_normalize_rows(self.value(x))?;
        Ok(self.push(v, Op::NormalizeRows(x, norms)))
    }

    pub fn row_softmax(&mut self, x: NodeId, temperature: f64) -> Result<NodeId> {
        let v = tensor::row_softmax(self.value(x), temperature)?;
        Ok(self.push(v, Op::RowSoftmax(x, temperature)))
    }

    pub fn row_logsumexp(&mut self, x: NodeId) -> Result<NodeId> {
        let v = tensor::row_logsumexp(self.value(x))?;
        Ok(self.push(v, Op::RowLogSumExp(x)))
    }

    pub fn diag(&mut self, x: NodeId) -> Result<NodeId> {
        let v = tensor::diag(self.value(x))?;
        Ok(self.push(v, Op::Diag(x)))
    }

    pub fn add_row_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::add_row_bias(self.value(x), self.value(b))?;
        Ok(self.push(v, Op::AddRowBias(x, b)))
    }

    pub fn sub_col(&mut self, x: NodeId, c: NodeId) -> Result<NodeId> {
        let v = tensor::sub_col(self.value(x), self.value(c))?;
        Ok(self.push(v, Op::SubCol(x, c)))
    }

    pub fn scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let v = tensor::scale(self.value(x), self.value(s))?;
        Ok(self.push(v, Op::Scale(x, s)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::sub(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scalar_mul(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = tensor::scalar_mul(self.value(x), c);
        self.push(v, Op::ScalarMul(x, c))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = tensor::tanh(self.value(x));
        self.push(v, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = tensor::relu(self.value(x));
        self.push(v, Op::Relu(x))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let v = tensor::log(self.value(x))?;
        Ok(self.push(v, Op::Log(x)))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = tensor::exp(self.value(x));
        self.push(v, Op::Exp(x))
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        let v = tensor::neg(self.value(x));
        self.push(v, Op::Neg(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = tensor::sum(self.value(x));
        self.push(v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = tensor::mean(self.value(x));
        self.push(v, Op::Mean(x))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node. Every node reachable from the
    /// loss receives its total derivative; leaves keep theirs for reading
    /// via [`Tape::grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward target must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[loss.0].grad[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            // Split borrows: take the node's grad out, write into inputs.
            let g = std::mem::take(&mut self.nodes[i].grad);
            self.propagate(i, &g);
            self.nodes[i].grad = g;
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = self.nodes[b.0].value.shape[1];
                // grad_a = g . b^T
                let bdat = self.nodes[b.0].value.data.clone();
                {
                    let ga = &mut self.nodes[a.0].grad;
                    for r in 0..m {
                        for c in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[r * n + j] * bdat[c * n + j];
                            }
                            ga[r * k + c] += acc;
                        }
                    }
                }
                // grad_b = a^T . g
                let adat = self.nodes[a.0].value.data.clone();
                let gb = &mut self.nodes[b.0].grad;
                for r in 0..k {
                    for c in 0..n {
                        let mut acc = 0.0;
                        for j in 0..m {
                            acc += adat[j * k + r] * g[j * n + c];
                        }
                        gb[r * n + c] += acc;
                    }
                }
            }
            Op::Transpose(x) => {
                let x = *x;
                let (n, m) = self.nodes[x.0].value.dims2().unwrap();
                let gx = &mut self.nodes[x.0].grad;
                for i in 0..n {
                    for j in 0..m {
                        gx[i * m + j] += g[j * n + i];
                    }
                }
            }
            Op::NormalizeRows(x, norms) => {
                // Per row: (I - u u^T)/||x|| applied to g, with u the output row.
                let x = *x;
                let norms = norms.clone();
                let y = self.nodes[i].value.data.clone();
                let (n, m) = self.nodes[x.0].value.dims2().unwrap();
                let gx = &mut self.nodes[x.0].grad;
                for r in 0..n {
                    let u = &y[r * m..(r + 1) * m];
                    let gr = &g[r * m..(r + 1) * m];
                    let dot: f64 = gr.iter().zip(u).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        gx[r * m + j] += (gr[j] - dot * u[j]) / norms[r];
                    }
                }
            }
            Op::RowSoftmax(x, temperature) => {
                let (x, t) = (*x, *temperature);
                let p = self.nodes[i].value.data.clone();
                let (n, m) = self.nodes[x.0].value.dims2().unwrap();
                let gx = &mut self.nodes[x.0].grad;
                for r in 0..n {
                    let pr = &p[r * m..(r + 1) * m];
                    let gr = &g[r * m..(r + 1) * m];
                    let dot: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        gx[r * m + j] += pr[j] * (gr[j] - dot) / t;
                    }
                }
            }
            Op::RowLogSumExp(x) => {
                let x = *x;
                let lse = self.nodes[i].value.data.clone();
                let xv = self.nodes[x.0].value.data.clone();
                let (n, m) = self.nodes[x.0].value.dims2().unwrap();
                let gx = &mut self.nodes[x.0].grad;
                for r in 0..n {
                    for j in 0..m {
                        gx[r * m + j] += g[r] * (xv[r * m + j] - lse[r]).exp();
                    }
                }
            }
            Op::Diag(x) => {
                let x = *x;
                let (n, _) = self.nodes[x.0].value.dims2().unwrap();
                let gx = &mut self.nodes[x.0].grad;
                for r in 0..n {
                    gx[r * n + r] += g[r];
                }
            }
            Op::AddRowBias(x, b) => {
                let (x, b) = (*x, *b);
                let (n, d) = self.nodes[x.0].value.dims2().unwrap();
                {
                    let gx = &mut self.nodes[x.0].grad;
                    for (gi, go) in gx.iter_mut().zip(g) {
                        *gi += go;
                    }
                }
                let gb = &mut self.nodes[b.0].grad;
                for r in 0..n {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
            }
            Op::SubCol(x, c) => {
                let (x, c) = (*x, *c);
                let (n, m) = self.nodes[x.0].value.dims2().unwrap();
                {
                    let gx = &mut self.nodes[x.0].grad;
                    for (gi, go) in gx.iter_mut().zip(g) {
                        *gi += go;
                    }
                }
                let gc = &mut self.nodes[c.0].grad;
                for r in 0..n {
                    let s: f64 = g[r * m..(r + 1) * m].iter().sum();
                    gc[r] -= s;
                }
            }
            Op::Scale(x, s) => {
                let (x, s) = (*x, *s);
                let sv = self.nodes[s.0].value.data[0];
                let xv = self.nodes[x.0].value.data.clone();
                {
                    let gx = &mut self.nodes[x.0].grad;
                    for (gi, go) in gx.iter_mut().zip(g) {
                        *gi += sv * go;
                    }
                }
                let gs = &mut self.nodes[s.0].grad;
                gs[0] += g.iter().zip(&xv).map(|(a, b)| a * b).sum::<f64>();
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                for (gi, go) in self.nodes[a.0].grad.iter_mut().zip(g) {
                    *gi += go;
                }
                for (gi, go) in self.nodes[b.0].grad.iter_mut().zip(g) {
                    *gi += go;
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                for (gi, go) in self.nodes[a.0].grad.iter_mut().zip(g) {
                    *gi += go;
                }
                for (gi, go) in self.nodes[b.0].grad.iter_mut().zip(g) {
                    *gi -= go;
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let av = self.nodes[a.0].value.data.clone();
                let bv = self.nodes[b.0].value.data.clone();
                for ((gi, go), v) in self.nodes[a.0].grad.iter_mut().zip(g).zip(&bv) {
                    *gi += go * v;
                }
                for ((gi, go), v) in self.nodes[b.0].grad.iter_mut().zip(g).zip(&av) {
                    *gi += go * v;
                }
            }
            Op::ScalarMul(x, c) => {
                let (x, c) = (*x, *c);
                for (gi, go) in self.nodes[x.0].grad.iter_mut().zip(g) {
                    *gi += c * go;
                }
            }
            Op::Tanh(x) => {
                let x = *x;
                let y = self.nodes[i].value.data.clone();
                for ((gi, go), v) in self.nodes[x.0].grad.iter_mut().zip(g).zip(&y) {
                    *gi += go * (1.0 - v * v);
                }
            }
            Op::Relu(x) => {
                let x = *x;
                let xv = self.nodes[x.0].value.data.clone();
                for ((gi, go), v) in self.nodes[x.0].grad.iter_mut().zip(g).zip(&xv) {
                    if *v > 0.0 {
                        *gi += go;
                    }
                }
            }
            Op::Log(x) => {
                let x = *x;
                let xv = self.nodes[x.0].value.data.clone();
                for ((gi, go), v) in self.nodes[x.0].grad.iter_mut().zip(g).zip(&xv) {
                    *gi += go / v;
                }
            }
            Op::Exp(x) => {
                let x = *x;
                let y = self.nodes[i].value.data.clone();
                for ((gi, go), v) in self.nodes[x.0].grad.iter_mut().zip(g).zip(&y) {
                    *gi += go * v;
                }
            }
            Op::Neg(x) => {
                let x = *x;
                for (gi, go) in self.nodes[x.0].grad.iter_mut().zip(g) {
                    *gi -= go;
                }
            }
            Op::Sum(x) => {
                let x = *x;
                for gi in self.nodes[x.0].grad.iter_mut() {
                    *gi += g[0];
                }
            }
            Op::Mean(x) => {
                let x = *x;
                let n = self.nodes[x.0].value.numel() as f64;
                for gi in self.nodes[x.0].grad.iter_mut() {
                    *gi += g[0] / n;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_grad_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).data, vec![1.0; 6]);
    }

    #[test]
    fn square_grad_at_three_is_six() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).data, vec![6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let y = tape.tanh(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f(x) = sum(x*x + x); df/dx_i = 2 x_i + 1
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.add(sq, x).unwrap();
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).data;
        for (gi, xi) in g.iter().zip([1.0, -2.0, 0.5]) {
            assert!((gi - (2.0 * xi + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn grads_reset_between_backward_calls() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).data, vec![4.0]);
    }
}

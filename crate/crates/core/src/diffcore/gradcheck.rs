//! Central finite-difference verification of tape gradients.

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::error::Result;

/// Default perturbation step for the central differences.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Relative error of `analytic` against `numeric`, floored so near-zero
/// gradients do not explode the ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare tape gradients of `loss_fn` against central finite differences.
///
/// `loss_fn` receives a fresh tape plus the leaf ids of `params` (in order)
/// and returns the scalar loss node; it must be deterministic for fixed
/// parameter values. Returns the maximum relative error over every
/// parameter entry.
pub fn grad_check<F>(loss_fn: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = loss_fn(&mut tape, &ids)?;
        let loss_value = tape.value(loss).data[0];
        tape.backward(loss)?;
        let grads = ids.iter().map(|&id| tape.grad(id)).collect();
        Ok((loss_value, grads))
    };

    let (_, analytic) = eval(params)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_err: f64 = 0.0;
    for p in 0..params.len() {
        for i in 0..params[p].numel() {
            let orig = work[p].data[i];
            work[p].data[i] = orig + h;
            let (up, _) = eval(&work)?;
            work[p].data[i] = orig - h;
            let (down, _) = eval(&work)?;
            work[p].data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            max_err = max_err.max(relative_error(analytic[p].data[i], numeric));
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_tensor(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn quadratic_loss_is_exact() {
        // sum(x*x) has an exact central difference up to rounding.
        let x = Tensor::matrix(1, 4, vec![0.3, -0.7, 1.1, 0.05]).unwrap();
        let err = grad_check(
            |tape, ids| {
                let sq = tape.mul(ids[0], ids[0])?;
                Ok(tape.sum(sq))
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn matmul_matches_finite_differences() {
        let mut rng = Rng::from_seed(100);
        let a = random_tensor(&mut rng, 3, 4);
        let b = random_tensor(&mut rng, 4, 2);
        let err = grad_check(
            |tape, ids| {
                let y = tape.matmul(ids[0], ids[1])?;
                // weight the entries so the gradient is not the trivial all-ones
                let sq = tape.mul(y, y)?;
                Ok(tape.sum(sq))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn normalize_rows_matches_finite_differences() {
        let mut rng = Rng::from_seed(101);
        let x = random_tensor(&mut rng, 5, 8);
        let w = random_tensor(&mut rng, 5, 8);
        let err = grad_check(
            |tape, ids| {
                let y = tape.l2_normalize_rows(ids[0])?;
                let m = tape.mul(y, ids[1])?;
                Ok(tape.sum(m))
            },
            &[x, w.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn every_unary_op_matches_finite_differences() {
        let mut rng = Rng::from_seed(102);
        type Build = fn(&mut Tape, NodeId) -> Result<NodeId>;
        let cases: Vec<(&str, bool, Build)> = vec![
            ("tanh", false, |t, x| Ok(t.tanh(x))),
            ("relu", false, |t, x| Ok(t.relu(x))),
            ("exp", false, |t, x| Ok(t.exp(x))),
            ("neg", false, |t, x| Ok(t.neg(x))),
            ("log", true, |t, x| t.log(x)),
            ("softmax", false, |t, x| t.row_softmax(x, 0.7)),
            ("logsumexp", false, |t, x| t.row_logsumexp(x)),
        ];
        for (name, positive, build) in cases {
            let data: Vec<f64> = (0..12)
                .map(|_| {
                    if positive {
                        rng.uniform_range(0.2, 2.0)
                    } else {
                        rng.uniform_range(-1.5, 1.5)
                    }
                })
                .collect();
            let x = Tensor::matrix(3, 4, data).unwrap();
            let w = random_tensor(&mut rng, 3, 4);
            let wn = if name == "logsumexp" { random_tensor(&mut rng, 3, 1) } else { w };
            let err = grad_check(
                |tape, ids| {
                    let y = build(tape, ids[0])?;
                    let m = tape.mul(y, ids[1])?;
                    Ok(tape.sum(m))
                },
                &[x, wn],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{name}: err {err}");
        }
    }

    #[test]
    fn broadcast_ops_match_finite_differences() {
        let mut rng = Rng::from_seed(103);
        let x = random_tensor(&mut rng, 4, 3);
        let b = random_tensor(&mut rng, 1, 3);
        let c = random_tensor(&mut rng, 4, 1);
        let s = Tensor::scalar(0.37);
        let w = random_tensor(&mut rng, 4, 3);
        let err = grad_check(
            |tape, ids| {
                let (x, b, c, s, w) = (ids[0], ids[1], ids[2], ids[3], ids[4]);
                let y = tape.add_row_bias(x, b)?;
                let y = tape.sub_col(y, c)?;
                let y = tape.scale(y, s)?;
                let t = tape.transpose(y)?;
                let yt = tape.transpose(t)?;
                let d = tape.mul(yt, w)?;
                Ok(tape.sum(d))
            },
            &[x, b, c, s, w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn diag_and_reductions_match_finite_differences() {
        let mut rng = Rng::from_seed(104);
        let x = random_tensor(&mut rng, 4, 4);
        let err = grad_check(
            |tape, ids| {
                let d = tape.diag(ids[0])?;
                let sq = tape.mul(d, d)?;
                let m = tape.mean(sq);
                let s = tape.sum(d);
                let both = tape.add(m, s)?;
                Ok(tape.scalar_mul(both, 0.5))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn random_op_compositions_match_finite_differences() {
        // Fuzz the backward pass: random chains over the whole op set,
        // re-using earlier nodes so the DAG has shared subexpressions.
        let mut rng = Rng::from_seed(424242);
        for trial in 0..60u64 {
            let rows = 2 + rng.uniform_usize(3);
            let cols = 2 + rng.uniform_usize(3);
            let n_leaves = 2 + rng.uniform_usize(2);
            let leaves: Vec<Tensor> =
                (0..n_leaves).map(|_| random_tensor(&mut rng, rows, cols)).collect();
            let ops: Vec<usize> = (0..6 + rng.uniform_usize(5)).map(|_| rng.uniform_usize(10)).collect();
            let picks: Vec<usize> = (0..ops.len()).map(|_| rng.next_u64() as usize).collect();
            let weights = random_tensor(&mut rng, rows, cols);

            let err = grad_check(
                |tape, ids| {
                    // live nodes all share the leaf shape, so every op below
                    // stays shape-compatible
                    let mut nodes: Vec<NodeId> = ids.to_vec();
                    for (step, &op) in ops.iter().enumerate() {
                        let a = nodes[picks[step] % nodes.len()];
                        let b = nodes[picks[step].rotate_left(7) % nodes.len()];
                        let next = match op {
                            0 => tape.add(a, b)?,
                            1 => tape.sub(a, b)?,
                            2 => {
                                let t = tape.tanh(a);
                                tape.mul(t, b)?
                            }
                            3 => tape.tanh(a),
                            4 => tape.relu(a),
                            5 => {
                                let t = tape.tanh(a);
                                tape.exp(t) // bounded input keeps exp tame
                            }
                            6 => tape.neg(a),
                            7 => tape.scalar_mul(a, 0.7),
                            8 => tape.row_softmax(a, 0.9)?,
                            _ => {
                                let t = tape.transpose(a)?;
                                tape.transpose(t)?
                            }
                        };
                        nodes.push(next);
                    }
                    let last = *nodes.last().unwrap();
                    let w = tape.constant(weights.clone());
                    let prod = tape.mul(last, w)?;
                    Ok(tape.sum(prod))
                },
                &leaves,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "trial {trial}: err {err}");
        }
    }

    #[test]
    fn directional_derivative_on_shared_dag() {
        // grad . v  ==  (f(x + h v) - f(x - h v)) / 2h for a DAG that reuses x.
        let mut rng = Rng::from_seed(105);
        let x = random_tensor(&mut rng, 3, 3);
        let v = random_tensor(&mut rng, 3, 3);

        let f = |xs: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let id = tape.leaf(xs.clone());
            let t = tape.tanh(id);
            let m = tape.matmul(t, id).unwrap();
            let s = tape.mul(m, m).unwrap();
            let loss = tape.sum(s);
            tape.value(loss).data[0]
        };

        let mut tape = Tape::new();
        let id = tape.leaf(x.clone());
        let t = tape.tanh(id);
        let m = tape.matmul(t, id).unwrap();
        let s = tape.mul(m, m).unwrap();
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        let g = tape.grad(id);
        let analytic_dir: f64 = g.data.iter().zip(&v.data).map(|(a, b)| a * b).sum();

        let h = 1e-5;
        let mut up = x.clone();
        let mut down = x.clone();
        for i in 0..x.numel() {
            up.data[i] += h * v.data[i];
            down.data[i] -= h * v.data[i];
        }
        let numeric_dir = (f(&up) - f(&down)) / (2.0 * h);
        assert!(relative_error(analytic_dir, numeric_dir) < 1e-6);
    }
}

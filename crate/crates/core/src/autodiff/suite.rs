//! Finite-difference suite over every tape primitive.

use std::sync::Arc;

use rand::Rng;

use super::{finite_difference_check, Axis, SparseMatrix, Tape, Tensor, TensorError, Var};
use crate::seeds;

/// Worst relative error of one primitive over the seeds checked.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
}

pub(crate) fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var, TensorError> {
    let [r, c] = tape.shape(x);
    let w = Tensor::uniform(r, c, 1.0, &mut seeds::stream(seed, 99));
    let w = tape.constant(w);
    let prod = tape.mul(x, w)?;
    Ok(tape.sum(prod, None))
}

/// Entries in [-2, 2], resampled away from `avoid` (kinks) by at least 1e-3.
pub(crate) fn sample(rows: usize, cols: usize, seed: u64, avoid: &[f64]) -> Tensor {
    let mut rng = seeds::stream(seed, 7);
    let data = (0..rows * cols)
        .map(|_| loop {
            let v: f64 = rng.random_range(-2.0..=2.0);
            if avoid.iter().all(|k| (v - k).abs() > 1e-3) {
                break v;
            }
        })
        .collect();
    Tensor::new(rows, cols, data).unwrap()
}

type Unary = fn(&mut Tape, Var) -> Result<Var, TensorError>;

fn primitive_cases() -> Vec<(&'static str, [usize; 2], Vec<f64>, Unary)> {
    vec![
        ("matmul", [3, 4], vec![], |t, x| {
            let w = t.constant(sample(4, 2, 40, &[]));
            t.matmul(x, w)
        }),
        ("matmul_rhs", [4, 2], vec![], |t, x| {
            let a = t.constant(sample(3, 4, 41, &[]));
            t.matmul(a, x)
        }),
        ("add", [3, 4], vec![], |t, x| t.add(x, x)),
        ("add_row_broadcast", [1, 4], vec![], |t, x| {
            let m = t.constant(sample(3, 4, 42, &[]));
            t.add(m, x)
        }),
        ("mul", [3, 4], vec![], |t, x| {
            let y = t.exp(x);
            t.mul(x, y)
        }),
        ("mul_row_broadcast", [1, 4], vec![], |t, x| {
            let m = t.constant(sample(3, 4, 43, &[]));
            t.mul(m, x)
        }),
        ("scale", [3, 4], vec![], |t, x| Ok(t.scale(x, -2.5))),
        ("concat_cols", [3, 2], vec![], |t, x| {
            let y = t.exp(x);
            t.concat(&[x, y, x], Axis::Cols)
        }),
        ("concat_rows", [2, 3], vec![], |t, x| {
            let y = t.elu(x);
            t.concat(&[y, x], Axis::Rows)
        }),
        ("exp", [3, 4], vec![], |t, x| Ok(t.exp(x))),
        ("log", [3, 4], vec![], |t, x| {
            let sq = t.mul(x, x)?;
            let one = t.constant(Tensor::full(1, 4, 0.5));
            let pos = t.add(sq, one)?;
            Ok(t.log(pos))
        }),
        ("powf", [3, 4], vec![], |t, x| {
            let sq = t.mul(x, x)?;
            let one = t.constant(Tensor::full(1, 4, 0.5));
            let pos = t.add(sq, one)?;
            Ok(t.powf(pos, -0.5))
        }),
        ("sum_rows", [3, 4], vec![], |t, x| Ok(t.sum(x, Some(Axis::Rows)))),
        ("sum_cols", [3, 4], vec![], |t, x| Ok(t.sum(x, Some(Axis::Cols)))),
        ("mean_rows", [3, 4], vec![], |t, x| Ok(t.mean(x, Some(Axis::Rows)))),
        ("mean_all", [3, 4], vec![], |t, x| Ok(t.mean(x, None))),
        ("max_rows", [3, 4], vec![], |t, x| Ok(t.max(x, Axis::Rows))),
        ("max_cols", [3, 4], vec![], |t, x| Ok(t.max(x, Axis::Cols))),
        ("transpose", [3, 4], vec![], |t, x| Ok(t.transpose(x))),
        ("gather_rows", [3, 4], vec![], |t, x| t.gather_rows(x, Arc::from(vec![2, 0, 2, 1]))),
        ("scatter_add_rows", [4, 3], vec![], |t, x| {
            t.scatter_add_rows(x, Arc::from(vec![1, 0, 1, 4]), 5)
        }),
        ("relu", [3, 4], vec![0.0], |t, x| Ok(t.relu(x))),
        ("elu", [3, 4], vec![0.0], |t, x| Ok(t.elu(x))),
        ("leaky_relu", [3, 4], vec![0.0], |t, x| Ok(t.leaky_relu(x, 0.2))),
        ("segment_softmax", [6, 2], vec![], |t, x| {
            t.segment_softmax(x, Arc::from(vec![0, 1, 0, 2, 1, 0]), 3)
        }),
        ("log_softmax_cols", [3, 4], vec![], |t, x| Ok(t.log_softmax(x, Axis::Cols))),
        ("log_softmax_rows", [3, 4], vec![], |t, x| Ok(t.log_softmax(x, Axis::Rows))),
        ("sparse_matmul", [3, 2], vec![], |t, x| {
            let s = SparseMatrix::new(2, 3, vec![(0, 0, 0.5), (0, 2, -1.0), (1, 1, 2.0), (1, 0, 0.3)])
                .unwrap();
            t.sparse_matmul(Arc::new(s), x)
        }),
        ("edge_aggregate_alpha", [5, 2], vec![], |t, x| {
            let v = t.constant(sample(3, 4, 44, &[]));
            t.edge_aggregate(x, v, Arc::from(vec![0, 1, 2, 1, 0]), Arc::from(vec![0, 0, 1, 2, 2]), 3)
        }),
        ("edge_aggregate_values", [3, 4], vec![], |t, x| {
            let a = t.constant(sample(5, 2, 45, &[]));
            t.edge_aggregate(a, x, Arc::from(vec![0, 1, 2, 1, 0]), Arc::from(vec![0, 0, 1, 2, 2]), 3)
        }),
    ]
}

fn has_max_tie(x: &Tensor) -> bool {
    let near = |a: f64, b: f64| (a - b).abs() < 1e-3;
    (0..x.rows()).any(|r| (0..x.cols()).any(|c| (c + 1..x.cols()).any(|d| near(x.get(r, c), x.get(r, d)))))
        || (0..x.cols()).any(|c| (0..x.rows()).any(|r| (r + 1..x.rows()).any(|s| near(x.get(r, c), x.get(s, c)))))
}

/// Check every primitive at `n_seeds` random points; each op's output is
/// reduced to a scalar by a seeded random weighting.
pub fn check_primitives(n_seeds: u64) -> Result<Vec<PrimitiveCheck>, TensorError> {
    let mut out = Vec::new();
    for (name, [r, c], kinks, op) in primitive_cases() {
        let mut worst = 0.0f64;
        for seed in 0..n_seeds {
            let mut s = seed;
            // max needs a unique maximiser to be differentiable
            let x = loop {
                let x = sample(r, c, s * 1000 + r as u64, &kinks);
                if !name.starts_with("max") || !has_max_tie(&x) {
                    break x;
                }
                s += 10_000;
            };
            let report = finite_difference_check(
                |t, x| {
                    let y = op(t, x)?;
                    weighted_sum(t, y, seed)
                },
                &x,
                1e-5,
            )?;
            worst = worst.max(report.max_rel_error);
        }
        out.push(PrimitiveCheck { name, max_rel_error: worst });
    }
    Ok(out)
}

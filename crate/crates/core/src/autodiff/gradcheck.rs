//! Central finite-difference oracle for tape gradients.

use rand::Rng;

use super::{Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|g_ad − g_fd| / max(1, |g_ad|, |g_fd|)`.
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Which coordinates of the inputs are perturbed.
#[derive(Clone, Debug)]
pub enum Coordinates {
    All,
    /// A fixed number of coordinates drawn per input tensor.
    Sample { per_input: usize, seed: u64 },
    /// Random directions over all inputs jointly; compares directional derivatives.
    Directions { count: usize, seed: u64 },
}

pub fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs())
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out)
        .item()
        .ok_or(TensorError::NonScalarLoss(tape.shape(out)))
}

/// Compare tape gradients of a scalar function of one tensor against
/// central differences at every coordinate.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    finite_difference_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        eps,
        &Coordinates::All,
    )
}

/// Multi-input variant used for whole-model checks.
pub fn finite_difference_check_many<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    coords: &Coordinates,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(TensorError::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let base = evaluate(&f, inputs)?;
    let again = evaluate(&f, inputs)?;
    if base.to_bits() != again.to_bits() {
        return Err(TensorError::NonDeterministic);
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let central = |perturbed: &mut Vec<Tensor>, apply: &dyn Fn(&mut Vec<Tensor>, f64)| {
        apply(perturbed, eps);
        let plus = evaluate(&f, perturbed);
        apply(perturbed, -2.0 * eps);
        let minus = evaluate(&f, perturbed);
        apply(perturbed, eps);
        Ok::<f64, TensorError>((plus? - minus?) / (2.0 * eps))
    };

    let mut work = inputs.to_vec();
    let mut max_err = 0.0f64;
    let mut checked = 0;
    match coords {
        Coordinates::All | Coordinates::Sample { .. } => {
            let picks: Vec<(usize, usize)> = match coords {
                Coordinates::Sample { per_input, seed } => {
                    let mut rng = crate::seeds::stream(*seed, 0);
                    inputs
                        .iter()
                        .enumerate()
                        .flat_map(|(i, t)| {
                            let n = t.len();
                            (0..(*per_input).min(n))
                                .map(|_| (i, rng.random_range(0..n)))
                                .collect::<Vec<_>>()
                        })
                        .collect()
                }
                _ => inputs
                    .iter()
                    .enumerate()
                    .flat_map(|(i, t)| (0..t.len()).map(move |k| (i, k)))
                    .collect(),
            };
            for (i, k) in picks {
                let fd = central(&mut work, &|w: &mut Vec<Tensor>, d: f64| {
                    w[i].data_mut()[k] += d;
                })?;
                // restore exactly; accumulated rounding from ± steps is discarded
                work[i].data_mut()[k] = inputs[i].data()[k];
                max_err = max_err.max(relative_error(analytic[i].data()[k], fd));
                checked += 1;
            }
        }
        Coordinates::Directions { count, seed } => {
            let mut rng = crate::seeds::stream(*seed, 1);
            for _ in 0..*count {
                let raw: Vec<Tensor> = inputs
                    .iter()
                    .map(|t| Tensor::uniform(t.rows(), t.cols(), 1.0, &mut rng))
                    .collect();
                // unit length, so a step of eps moves the inputs by eps
                let norm = raw.iter().flat_map(|d| d.data()).map(|v| v * v).sum::<f64>().sqrt();
                let dirs: Vec<Tensor> = raw.iter().map(|d| d.map(|v| v / norm)).collect();
                let ad: f64 = analytic
                    .iter()
                    .zip(&dirs)
                    .map(|(g, d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>())
                    .sum();
                let fd = central(&mut work, &|w: &mut Vec<Tensor>, step: f64| {
                    for (t, d) in w.iter_mut().zip(&dirs) {
                        for (x, dx) in t.data_mut().iter_mut().zip(d.data()) {
                            *x += step * dx;
                        }
                    }
                })?;
                work = inputs.to_vec();
                max_err = max_err.max(relative_error(ad, fd));
                checked += 1;
            }
        }
    }
    Ok(GradCheckReport { max_rel_error: max_err, checked })
}

//! Kernel SHAP with a single reference point.
//!
//! Absent players take their reference value. The Shapley-kernel weighted
//! regression is solved with efficiency imposed exactly by eliminating the
//! last player.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

/// Full enumeration is used whenever `2^M` is at most this.
pub const EXACT_LIMIT: usize = 4096;
pub const DEFAULT_SAMPLES: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapValues {
    pub phi: Vec<f64>,
    /// `f(reference)`.
    pub base_value: f64,
    /// `f(x)`.
    pub prediction: f64,
    /// Whether every coalition was evaluated.
    pub exact: bool,
    pub n_coalitions: usize,
}

/// Player partition: `groups[p]` lists the input coordinates owned by player `p`.
pub fn singleton_groups(m: usize) -> Vec<Vec<usize>> {
    (0..m).map(|i| vec![i]).collect()
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `π(S) = (M−1) / (C(M,|S|) · |S| · (M−|S|))`.
pub fn kernel_weight(m: usize, s: usize) -> f64 {
    (m - 1) as f64 / (binomial(m, s) * s as f64 * (m - s) as f64)
}

fn compose(reference: &[f64], x: &[f64], groups: &[Vec<usize>], coalition: &[bool]) -> Vec<f64> {
    let mut z = reference.to_vec();
    for (g, &on) in groups.iter().zip(coalition) {
        if on {
            for &i in g {
                z[i] = x[i];
            }
        }
    }
    z
}

fn check_inputs(reference: &[f64], x: &[f64], groups: &[Vec<usize>]) -> Result<()> {
    if reference.len() != x.len() {
        return Err(Error::Data(format!("reference has {} features, input {}", reference.len(), x.len())));
    }
    if groups.is_empty() {
        return Err(Error::Data("no players to explain".into()));
    }
    let mut seen = vec![false; x.len()];
    for &i in groups.iter().flatten() {
        if i >= x.len() || std::mem::replace(&mut seen[i], true) {
            return Err(Error::Data(format!("player groups must be disjoint indices below {}", x.len())));
        }
    }
    Ok(())
}

/// Coalitions and their regression weights.
fn coalitions<R: Rng>(m: usize, budget: usize, rng: &mut R) -> (Vec<Vec<bool>>, Vec<f64>, bool) {
    if m < usize::BITS as usize && (1usize << m) <= EXACT_LIMIT {
        let mut zs = Vec::new();
        let mut ws = Vec::new();
        for mask in 1..(1usize << m) - 1 {
            let z: Vec<bool> = (0..m).map(|i| mask >> i & 1 == 1).collect();
            ws.push(kernel_weight(m, mask.count_ones() as usize));
            zs.push(z);
        }
        return (zs, ws, true);
    }
    let mut zs = Vec::with_capacity(budget.max(2 * m));
    let mut ws = Vec::with_capacity(zs.capacity());
    // every size-1 coalition and its complement
    for i in 0..m {
        let mut single = vec![false; m];
        single[i] = true;
        let complement: Vec<bool> = single.iter().map(|b| !b).collect();
        let w = kernel_weight(m, 1);
        zs.push(single);
        ws.push(w);
        zs.push(complement);
        ws.push(w);
    }
    // remaining sizes 2..=M-2, sampled in complementary pairs with probability
    // proportional to their kernel mass (M−1)/(s(M−s))
    let sizes: Vec<usize> = (2..=m.saturating_sub(2)).collect();
    let pairs = budget.saturating_sub(2 * m) / 2;
    if sizes.is_empty() || pairs == 0 {
        return (zs, ws, false);
    }
    let mass: Vec<f64> = sizes.iter().map(|&s| (m - 1) as f64 / (s * (m - s)) as f64).collect();
    let total_mass: f64 = mass.iter().sum();
    let dist = rand::distr::weighted::WeightedIndex::new(&mass).expect("positive kernel mass");
    let w = total_mass / (2 * pairs) as f64;
    for _ in 0..pairs {
        let s = sizes[rng.sample(&dist)];
        let mut z = vec![false; m];
        for i in index::sample(rng, m, s) {
            z[i] = true;
        }
        let complement: Vec<bool> = z.iter().map(|b| !b).collect();
        zs.push(z);
        ws.push(w);
        zs.push(complement);
        ws.push(w);
    }
    (zs, ws, false)
}

/// Efficiency-constrained weighted least squares.
fn solve(zs: &[Vec<bool>], ws: &[f64], ys: &[f64], delta: f64) -> Option<Vec<f64>> {
    let m = zs[0].len();
    let k = m - 1;
    let mut a = DMatrix::<f64>::zeros(k, k);
    let mut b = DVector::<f64>::zeros(k);
    let mut row = vec![0.0; k];
    for ((z, &w), &y) in zs.iter().zip(ws).zip(ys) {
        let last = f64::from(u8::from(z[k]));
        for (i, r) in row.iter_mut().enumerate() {
            *r = f64::from(u8::from(z[i])) - last;
        }
        let target = y - last * delta;
        for i in 0..k {
            if row[i] == 0.0 {
                continue;
            }
            b[i] += w * row[i] * target;
            for j in 0..k {
                a[(i, j)] += w * row[i] * row[j];
            }
        }
    }
    let lu = a.lu();
    let phi = lu.solve(&b)?;
    if phi.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut out: Vec<f64> = phi.iter().copied().collect();
    out.push(delta - out.iter().sum::<f64>());
    Some(out)
}

/// Batched model: one output per input row.
pub type BatchFn<'a> = dyn Fn(&[Vec<f64>]) -> Result<Vec<f64>> + Sync + 'a;

/// Coalitions are composed and evaluated this many at a time.
const EVAL_CHUNK: usize = 256;

/// Shapley values of the players in `groups` for `f` at `x` against `reference`.
pub fn kernel_shap_grouped<F>(
    f: &F,
    reference: &[f64],
    x: &[f64],
    groups: &[Vec<usize>],
    n_samples: usize,
    seed: u64,
) -> Result<ShapValues>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let batched = |rows: &[Vec<f64>]| Ok(rows.par_iter().map(|r| f(r)).collect());
    kernel_shap_batched(&batched, reference, x, groups, n_samples, seed)
}

/// As [`kernel_shap_grouped`] with a model that scores many inputs per call.
pub fn kernel_shap_batched(
    f: &BatchFn<'_>,
    reference: &[f64],
    x: &[f64],
    groups: &[Vec<usize>],
    n_samples: usize,
    seed: u64,
) -> Result<ShapValues> {
    check_inputs(reference, x, groups)?;
    let m = groups.len();
    let ends = f(&[x.to_vec(), reference.to_vec()])?;
    let (prediction, base_value) = (ends[0], ends[1]);
    if !prediction.is_finite() || !base_value.is_finite() {
        return Err(Error::Numeric("model returned a non-finite value".into()));
    }
    let delta = prediction - base_value;
    if m == 1 {
        return Ok(ShapValues { phi: vec![delta], base_value, prediction, exact: true, n_coalitions: 0 });
    }
    let mut rng = seeds::stream(seed, seeds::SHAP);
    let mut budget = n_samples.max(2 * m + 2);
    for _ in 0..3 {
        let (zs, ws, exact) = coalitions(m, budget, &mut rng);
        let mut ys = Vec::with_capacity(zs.len());
        for chunk in zs.chunks(EVAL_CHUNK) {
            let inputs: Vec<Vec<f64>> = chunk.iter().map(|z| compose(reference, x, groups, z)).collect();
            let out = f(&inputs)?;
            if out.len() != inputs.len() {
                return Err(Error::Data(format!("model scored {} of {} inputs", out.len(), inputs.len())));
            }
            ys.extend(out.into_iter().map(|y| y - base_value));
        }
        if ys.iter().any(|y| !y.is_finite()) {
            return Err(Error::Numeric("model returned a non-finite value".into()));
        }
        if let Some(phi) = solve(&zs, &ws, &ys, delta) {
            return Ok(ShapValues { phi, base_value, prediction, exact, n_coalitions: zs.len() });
        }
        if exact {
            break;
        }
        budget *= 2;
    }
    Err(Error::Numeric("kernel SHAP regression is singular".into()))
}

/// Per-feature Kernel SHAP; the background is summarised by its mean.
pub fn kernel_shap<F>(f: &F, background: &[Vec<f64>], x: &[f64], n_samples: usize, seed: u64) -> Result<ShapValues>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let reference = background_mean(background)?;
    kernel_shap_grouped(f, &reference, x, &singleton_groups(x.len()), n_samples, seed)
}

pub fn background_mean(background: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = background.first().ok_or_else(|| Error::Data("empty background set".into()))?;
    let mut mean = vec![0.0; first.len()];
    for row in background {
        if row.len() != mean.len() {
            return Err(Error::Data("background rows differ in length".into()));
        }
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let n = background.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Shapley values straight from the definition over all `2^M` coalitions.
pub fn shapley_by_enumeration<F>(f: &F, reference: &[f64], x: &[f64], groups: &[Vec<usize>]) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    check_inputs(reference, x, groups)?;
    let m = groups.len();
    if m > 20 {
        return Err(Error::Config(format!("enumeration over {m} players is too large")));
    }
    let values: Vec<f64> = (0..1usize << m)
        .map(|mask| {
            let z: Vec<bool> = (0..m).map(|i| mask >> i & 1 == 1).collect();
            f(&compose(reference, x, groups, &z))
        })
        .collect();
    let fact = |n: usize| (1..=n).fold(1.0, |a, k| a * k as f64);
    let mut phi = vec![0.0; m];
    for (i, p) in phi.iter_mut().enumerate() {
        for mask in 0..1usize << m {
            if mask >> i & 1 == 1 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let w = fact(s) * fact(m - s - 1) / fact(m);
            *p += w * (values[mask | 1 << i] - values[mask]);
        }
    }
    Ok(phi)
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn two_layer(seed: u64, m: usize) -> impl Fn(&[f64]) -> f64 + Sync {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1: Vec<Vec<f64>> = (0..4).map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let w2: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        move |z: &[f64]| {
            w1.iter()
                .zip(&w2)
                .map(|(row, v)| v * row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>().tanh())
                .sum()
        }
    }

    #[test]
    fn kernel_weights() {
        assert_abs_diff_eq!(kernel_weight(4, 1), 3.0 / (4.0 * 3.0), epsilon = 1e-15);
        assert_abs_diff_eq!(kernel_weight(4, 2), 3.0 / (6.0 * 4.0), epsilon = 1e-15);
        assert_eq!(kernel_weight(5, 1), kernel_weight(5, 4));
    }

    #[test]
    fn linear_model_with_zero_background() {
        let w = [0.5, -2.0, 1.5, 3.0, 0.0, -0.25];
        let f = |z: &[f64]| z.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let x = [1.0, 2.0, -1.0, 0.5, 7.0, 4.0];
        let bg = vec![vec![1.0; 6], vec![-1.0; 6]];
        let s = kernel_shap(&f, &bg, &x, DEFAULT_SAMPLES, 0).unwrap();
        assert!(s.exact);
        for i in 0..6 {
            assert_abs_diff_eq!(s.phi[i], w[i] * x[i], epsilon = 1e-9);
        }
        assert_abs_diff_eq!(s.phi[4], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn matches_enumeration_and_is_efficient() {
        for m in [2, 3, 5, 8, 10] {
            let f = two_layer(m as u64, m);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + m as u64);
            let x: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
            let reference: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let groups = singleton_groups(m);
            let s = kernel_shap_grouped(&f, &reference, &x, &groups, DEFAULT_SAMPLES, 1).unwrap();
            let exact = shapley_by_enumeration(&f, &reference, &x, &groups).unwrap();
            for (a, b) in s.phi.iter().zip(&exact) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-9);
            }
            let total: f64 = s.phi.iter().sum();
            assert!((total - (s.prediction - s.base_value)).abs() <= 1e-9);
        }
    }

    #[test]
    fn sampled_mode_keeps_efficiency_and_approximates_linear_models() {
        let m = 30;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |z: &[f64]| z.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let x: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = kernel_shap(&f, &[vec![0.0; m]], &x, 512, 3).unwrap();
        assert!(!s.exact);
        assert_eq!(s.n_coalitions, 512);
        // a linear model is fitted exactly by any full-rank design
        for i in 0..m {
            assert_abs_diff_eq!(s.phi[i], w[i] * x[i], epsilon = 1e-9);
        }
        let g = two_layer(9, m);
        let s = kernel_shap(&g, &[vec![0.0; m]], &x, 512, 3).unwrap();
        assert!((s.phi.iter().sum::<f64>() - (s.prediction - s.base_value)).abs() <= 1e-9);
        let again = kernel_shap(&g, &[vec![0.0; m]], &x, 512, 3).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn symmetry_dummy_and_degenerate_cases() {
        let f = |z: &[f64]| (z[0] + z[1]).powi(2) + 0.0 * z[2];
        let s = kernel_shap(&f, &[vec![0.0; 3]], &[1.0, 1.0, 5.0], DEFAULT_SAMPLES, 0).unwrap();
        assert_abs_diff_eq!(s.phi[0], s.phi[1], epsilon = 1e-12);
        assert!(s.phi[2].abs() <= 1e-12);

        let one = kernel_shap(&|z: &[f64]| 3.0 * z[0], &[vec![1.0]], &[2.0], DEFAULT_SAMPLES, 0).unwrap();
        assert_eq!(one.phi, vec![3.0]);

        let constant = kernel_shap(&|_: &[f64]| 0.7, &[vec![0.0; 4]], &[1.0; 4], DEFAULT_SAMPLES, 0).unwrap();
        assert!(constant.phi.iter().all(|p| p.abs() <= 1e-12));

        assert!(kernel_shap(&f, &[], &[1.0, 1.0, 1.0], DEFAULT_SAMPLES, 0).is_err());
        assert!(kernel_shap(&f, &[vec![0.0; 2]], &[1.0, 1.0, 1.0], DEFAULT_SAMPLES, 0).is_err());
    }

    #[test]
    fn grouped_players_share_their_coordinates() {
        let f = |z: &[f64]| z[0] * z[1] + z[2] + z[3];
        let groups = vec![vec![0, 1], vec![2], vec![3]];
        let s = kernel_shap_grouped(&f, &[0.0; 4], &[2.0, 3.0, 1.0, -1.0], &groups, DEFAULT_SAMPLES, 0).unwrap();
        assert_abs_diff_eq!(s.phi[0], 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.phi[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.phi[2], -1.0, epsilon = 1e-12);
        assert!(kernel_shap_grouped(&f, &[0.0; 4], &[0.0; 4], &[vec![0, 1], vec![1]], 10, 0).is_err());
    }
}

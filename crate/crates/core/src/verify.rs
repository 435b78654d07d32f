//! Self-checks: tape gradients against finite differences and Kernel SHAP
//! against exact Shapley values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{suite, Coordinates};
use crate::error::{Error, Result};
use crate::explain::{kernel_shap_grouped, shapley_by_enumeration, singleton_groups, DEFAULT_SAMPLES};
use crate::nn::{gradient_check_model, micro_batch, ArchConfig, Classifier, ModelKind};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-4;
pub const SHAP_TOLERANCE: f64 = 1e-6;
pub const EFFICIENCY_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, Serialize)]
pub struct NamedError {
    pub name: String,
    pub max_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradientReport {
    pub primitives: Vec<NamedError>,
    pub models: Vec<NamedError>,
    pub max_primitive_error: f64,
    pub max_model_error: f64,
}

impl GradientReport {
    pub fn passed(&self) -> bool {
        self.max_primitive_error <= PRIMITIVE_TOLERANCE && self.max_model_error <= MODEL_TOLERANCE
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ShapOracleReport {
    pub cases: Vec<NamedError>,
    pub max_error: f64,
    pub max_efficiency_gap: f64,
}

impl ShapOracleReport {
    pub fn passed(&self) -> bool {
        self.max_error <= SHAP_TOLERANCE && self.max_efficiency_gap <= EFFICIENCY_TOLERANCE
    }
}

/// 7-block classifiers on two 5-node graphs, every parameter coordinate.
fn model_checks() -> Result<Vec<NamedError>> {
    let mut out = Vec::new();
    for kind in [ModelKind::Gat, ModelKind::Gcn] {
        let arch = ArchConfig { n_blocks: 7, heads: 2, head_dim: 4, fc_hidden: 8, ..ArchConfig::new(kind, 4) };
        let model = Classifier::new(arch, &mut crate::seeds::stream(11, crate::seeds::INIT))?;
        let report = gradient_check_model(&model, &micro_batch(4, 5)?, &Coordinates::All)?;
        let name = format!("{kind:?} classifier").to_lowercase();
        out.push(NamedError { name, max_error: report.max_rel_error });
    }
    Ok(out)
}

pub fn gradient_suite() -> Result<GradientReport> {
    let primitives: Vec<NamedError> = suite::check_primitives(10)?
        .into_iter()
        .map(|c| NamedError { name: c.name.to_string(), max_error: c.max_rel_error })
        .collect();
    let models = model_checks()?;
    let worst = |v: &[NamedError]| v.iter().map(|e| e.max_error).fold(0.0, f64::max);
    Ok(GradientReport {
        max_primitive_error: worst(&primitives),
        max_model_error: worst(&models),
        primitives,
        models,
    })
}

type Model = Box<dyn Fn(&[f64]) -> f64 + Sync>;

/// Random linear model and a random tanh network with one hidden layer.
pub fn random_models(m: usize, seed: u64) -> [(String, Model); 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: f64 = rng.random_range(-1.0..1.0);
    let hidden = 6;
    let w1: Vec<Vec<f64>> = (0..hidden).map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let b1: Vec<f64> = (0..hidden).map(|_| rng.random_range(-0.5..0.5)).collect();
    let w2: Vec<f64> = (0..hidden).map(|_| rng.random_range(-1.0..1.0)).collect();
    let linear: Model = Box::new(move |z| b + z.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>());
    let mlp: Model = Box::new(move |z| {
        w1.iter()
            .zip(&b1)
            .zip(&w2)
            .map(|((row, bias), v)| v * (bias + row.iter().zip(z).map(|(a, c)| a * c).sum::<f64>()).tanh())
            .sum()
    });
    [(format!("linear M={m}"), linear), (format!("two-layer M={m}"), mlp)]
}

pub fn shap_oracle_suite() -> Result<ShapOracleReport> {
    let mut cases = Vec::new();
    let mut gap = 0.0f64;
    for (k, m) in [3usize, 5, 8].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + k as u64);
        let x: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let reference: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        for (name, f) in random_models(m, k as u64) {
            let groups = singleton_groups(m);
            let s = kernel_shap_grouped(&f, &reference, &x, &groups, DEFAULT_SAMPLES, 0)?;
            if !s.exact {
                return Err(Error::Verification(format!("{name}: expected full enumeration")));
            }
            let exact = shapley_by_enumeration(&f, &reference, &x, &groups)?;
            let err = s.phi.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            gap = gap.max((s.phi.iter().sum::<f64>() - (s.prediction - s.base_value)).abs());
            cases.push(NamedError { name, max_error: err });
        }
    }
    let max_error = cases.iter().map(|c| c.max_error).fold(0.0, f64::max);
    Ok(ShapOracleReport { cases, max_error, max_efficiency_gap: gap })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass() {
        let g = gradient_suite().unwrap();
        assert!(g.passed(), "{g:?}");
        assert_eq!(g.models.len(), 2);
        let s = shap_oracle_suite().unwrap();
        assert!(s.passed(), "{s:?}");
        assert_eq!(s.cases.len(), 6);
    }
}

//! Bias-corrected Adam with per-scope freezing.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: BTreeMap<String, (Matrix, Matrix)>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Drop the moments of every parameter in `scope`.
    pub fn reset_scope(&mut self, scope: &str) {
        self.moments.retain(|name, _| scope_of(name) != scope);
    }
}

/// Anything whose trainable tensors can be visited by name.
pub trait Parameterized {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix));
}

impl Parameterized for BTreeMap<String, Matrix> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        for (k, v) in self {
            f(k, v);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        for (k, v) in self.iter_mut() {
            f(k, v);
        }
    }
}

/// Parameter group of a dotted name: everything before the first `.`.
pub fn scope_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// One Adam update. Parameters in `frozen_scopes`, or without a gradient,
/// are left untouched. Any NaN gradient aborts the step before anything is
/// modified.
pub fn adam_step<P: Parameterized + ?Sized>(
    params: &mut P,
    grads: &BTreeMap<String, Matrix>,
    state: &mut OptimizerState,
    frozen_scopes: &BTreeSet<String>,
) -> Result<()> {
    for (name, g) in grads {
        if frozen_scopes.contains(scope_of(name)) {
            continue;
        }
        if g.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NanGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let moments = &mut state.moments;
    params.visit_params_mut(&mut |name, p| {
        if frozen_scopes.contains(scope_of(name)) {
            return;
        }
        let Some(g) = grads.get(name) else { return };
        debug_assert_eq!(g.shape(), p.shape(), "gradient shape for {name}");
        let (m, v) = moments
            .entry(name.to_string())
            .or_insert_with(|| (Matrix::zeros(p.rows(), p.cols()), Matrix::zeros(p.rows(), p.cols())));
        for (((pv, gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = beta1 * *mv + (1.0 - beta1) * gv;
            *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *pv -= lr * mhat / (vhat.sqrt() + eps);
        }
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(v: f64) -> BTreeMap<String, Matrix> {
        let mut p = BTreeMap::new();
        p.insert("encoder.w".to_string(), Matrix::filled(1, 1, v));
        p.insert("head.w".to_string(), Matrix::filled(1, 1, v));
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.02, 1e3] {
            let mut p = params(1.0);
            let mut grads = BTreeMap::new();
            grads.insert("head.w".to_string(), Matrix::filled(1, 1, g));
            let mut st = OptimizerState::new(AdamConfig::default());
            adam_step(&mut p, &grads, &mut st, &BTreeSet::new()).unwrap();
            let delta = p["head.w"].get(0, 0) - 1.0;
            let want = -1e-3 * g / (g.abs() + 1e-8);
            assert!((delta - want).abs() < 1e-15, "g={g}: {delta} vs {want}");
        }
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut p = params(0.5);
        let before = p.clone();
        let mut grads = BTreeMap::new();
        grads.insert("head.w".to_string(), Matrix::zeros(1, 1));
        grads.insert("encoder.w".to_string(), Matrix::zeros(1, 1));
        let mut st = OptimizerState::new(AdamConfig::default());
        for _ in 0..100 {
            adam_step(&mut p, &grads, &mut st, &BTreeSet::new()).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn frozen_scope_is_bit_identical() {
        let mut p = params(0.5);
        let frozen: BTreeSet<String> = ["encoder".to_string()].into();
        let mut grads = BTreeMap::new();
        grads.insert("head.w".to_string(), Matrix::filled(1, 1, 0.3));
        grads.insert("encoder.w".to_string(), Matrix::filled(1, 1, 0.3));
        let mut st = OptimizerState::new(AdamConfig::default());
        for _ in 0..25 {
            adam_step(&mut p, &grads, &mut st, &frozen).unwrap();
        }
        assert_eq!(p["encoder.w"].get(0, 0).to_bits(), 0.5f64.to_bits());
        assert_ne!(p["head.w"].get(0, 0), 0.5);
        assert!(!st.moments.contains_key("encoder.w"));
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = params(0.5);
        let mut grads = BTreeMap::new();
        grads.insert("head.w".to_string(), Matrix::filled(1, 1, f64::NAN));
        let mut st = OptimizerState::new(AdamConfig::default());
        match adam_step(&mut p, &grads, &mut st, &BTreeSet::new()) {
            Err(Error::NanGradient(name)) => assert_eq!(name, "head.w"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(st.step, 0);
    }
}

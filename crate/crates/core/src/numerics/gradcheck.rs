//! Central finite-difference verification of backward-pass gradients.

use serde::Serialize;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub max_abs_error: f64,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`; zero when both vanish.
    pub relative_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

/// Compares backward-pass gradients of `f` against central differences for
/// every parameter in `store`.
///
/// `f` must be deterministic: any sampling noise has to be frozen by the
/// caller. Two evaluations at the unperturbed point are compared bit for bit
/// and the check aborts if they differ.
pub fn grad_check<F>(store: &mut ParamStore, f: F, config: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        let v = g.value(loss);
        if v.len() != 1 {
            return Err(Error::Contract(format!("grad_check needs a scalar, got {:?}", v.shape())));
        }
        Ok(v.item())
    };

    let saved: Vec<_> = store.iter().map(|p| p.grad.clone()).collect();
    store.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let base = g.value(loss).item();
    g.backward_into(loss, store)?;
    drop(g);
    let again = eval(store)?;
    if base.to_bits() != again.to_bits() {
        for (p, s) in store.iter_mut().zip(saved) {
            p.grad = s;
        }
        return Err(Error::NonDeterministic(format!(
            "two forward passes disagree ({base:e} vs {again:e}); freeze all sampling noise"
        )));
    }

    let eps = config.epsilon;
    let mut params = Vec::with_capacity(store.len());
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.value(id).len();
        let analytic = store.get(id).grad.data().to_vec();
        let mut numeric = vec![0.0; n];
        for j in 0..n {
            let orig = store.value(id).data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + eps;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = orig - eps;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = orig;
            numeric[j] = (plus - minus) / (2.0 * eps);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let (an, nn, dn) = (norm(&analytic), norm(&numeric), norm(&diff));
        let denom = an.max(nn);
        params.push(ParamCheck {
            name: store.get(id).name.clone(),
            analytic_norm: an,
            numeric_norm: nn,
            max_abs_error: diff.iter().fold(0.0f64, |m, d| m.max(d.abs())),
            relative_error: if denom == 0.0 { 0.0 } else { dn / denom },
        });
    }
    for (p, s) in store.iter_mut().zip(saved) {
        p.grad = s;
    }
    let max_relative_error = params.iter().fold(0.0f64, |m, p| m.max(p.relative_error));
    Ok(GradCheckReport {
        params,
        max_relative_error,
        tolerance: config.tolerance,
    })
}

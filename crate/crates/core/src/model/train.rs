use std::sync::Arc;

use rand::Rng;

use super::network::{AirFormerModel, Batch, LossRecord, Mode};
use crate::dartboard::DartboardProjection;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor};

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |s: &ParamStore| s.iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    /// Applies one update from the gradients held in `store`.
    pub fn update(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for (((w, &gr), m), v) in value.iter_mut().zip(grad).zip(m.data_mut()).zip(v.data_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * gr;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gr * gr;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_global_norm();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

fn check_finite(record: &LossRecord) -> Result<()> {
    for (component, value) in [
        ("L_pred", record.pred),
        ("L_rec", record.rec),
        ("L_kl", record.kl),
        ("total loss", record.total),
    ] {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                component: component.into(),
                value,
            });
        }
    }
    Ok(())
}

/// Forward, backward, clip and Adam update on one batch. Noise is drawn from
/// `rng`, so the whole step is a function of the rng state.
pub fn train_step(
    model: &mut AirFormerModel,
    optimizer: &mut Adam,
    batch: &Batch,
    projection: &Arc<DartboardProjection>,
    rng: &mut impl Rng,
    lr: f64,
) -> Result<LossRecord> {
    let noise = model.sample_noise(rng, batch.size(), projection.n_stations());
    let mut g = Graph::new();
    let vars = model.loss(&mut g, &model.params, batch, projection, Mode::Sample(&noise))?;
    let record = vars.record(&g);
    check_finite(&record)?;
    model.params.zero_grad();
    g.backward_into(vars.total, &mut model.params)?;
    drop(g);
    let norm = clip_grad_norm(&mut model.params, model.config.grad_clip);
    if !norm.is_finite() {
        return Err(Error::NonFinite {
            component: "gradient norm".into(),
            value: norm,
        });
    }
    optimizer.update(&mut model.params, lr);
    Ok(record)
}

/// Loss components without an update, using posterior means.
pub fn evaluate_loss(model: &AirFormerModel, batch: &Batch, projection: &Arc<DartboardProjection>) -> Result<LossRecord> {
    let mut g = Graph::new();
    let vars = model.loss(&mut g, &model.params, batch, projection, Mode::Eval)?;
    Ok(vars.record(&g))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()).unwrap();
        store.get_mut(id).grad = Tensor::new(vec![2], vec![0.3, -7.0]).unwrap();
        let mut adam = Adam::new(&store);
        adam.update(&mut store, 0.1);
        let w = store.value(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::zeros(&[1])).unwrap();
        let b = store.add("b", Tensor::zeros(&[1])).unwrap();
        store.get_mut(a).grad = Tensor::full(&[1], 6.0);
        store.get_mut(b).grad = Tensor::full(&[1], 8.0);
        assert_eq!(clip_grad_norm(&mut store, 5.0), 10.0);
        assert!((store.get(a).grad.item() - 3.0).abs() < 1e-12);
        assert!((store.get(b).grad.item() - 4.0).abs() < 1e-12);
        assert!((store.grad_global_norm() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_component_is_named() {
        let r = LossRecord {
            total: f64::NAN,
            pred: 1.0,
            rec: 1.0,
            kl: f64::INFINITY,
        };
        match check_finite(&r) {
            Err(Error::NonFinite { component, .. }) => assert_eq!(component, "L_kl"),
            other => panic!("{other:?}"),
        }
    }
}

use rand::Rng;

use super::graph::{Activation, Graph, Var};
use super::params::{xavier_uniform, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Affine map over the last axis: `x · W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        with_bias: bool,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            xavier_uniform(rng, &[in_dim, out_dim], in_dim, out_dim),
        )?;
        let bias = if with_bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Affine-activation stack applied over the last axis.
///
/// `layers` holds `(weight, bias)` pairs; the activation runs between layers
/// but not after the last one.
pub fn mlp(g: &mut Graph, x: Var, layers: &[(Var, Var)], activation: Activation) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::Config("mlp needs at least one layer".into()));
    }
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        h = g.matmul(h, w)?;
        h = g.add(h, b)?;
        if i + 1 < layers.len() {
            h = g.activation(h, activation);
        }
    }
    Ok(h)
}

/// Parameterized multi-layer perceptron.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `dims` lists every width from input to output, so `dims.len() - 1` layers.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dims: &[usize],
        activation: Activation,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!("mlp {name} needs at least one layer")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1], true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, activation })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let pairs: Vec<(Var, Var)> = self
            .layers
            .iter()
            .map(|l| {
                let w = g.param(store, l.weight);
                let b = g.param(store, l.bias.expect("mlp layers carry biases"));
                (w, b)
            })
            .collect();
        mlp(g, x, &pairs, self.activation)
    }
}

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::ModelConfig;
use crate::attention::{CtMsaLayer, DsMsaLayer};
use crate::dartboard::DartboardProjection;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Mlp, ParamStore, Tensor, Var};
use crate::stochastic::{elbo_loss, per_step_sums, LatentStack, Sampling, StochasticStage};

/// One training or evaluation batch, normalized units.
///
/// `x` is `[B, T, N, 2D]` (zero-imputed values followed by observedness
/// indicators); `x_target`/`x_mask` are the `[B, T, N, D]` reconstruction
/// targets; `y`/`y_mask` are `[B, τ, N, D_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub x_target: Tensor,
    pub x_mask: Tensor,
    pub y: Tensor,
    pub y_mask: Tensor,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.x.shape()[0]
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub ds_msa: Option<DsMsaLayer>,
    pub ct_msa: CtMsaLayer,
}

/// How latents are obtained for a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Mode<'a> {
    /// Posterior samples from externally supplied noise, one `[B, T, N, C]`
    /// tensor per block.
    Sample(&'a [Tensor]),
    /// Posterior means.
    Eval,
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub states: Vec<Var>,
    pub stack: Option<LatentStack>,
    pub prediction: Var,
}

/// Graph handles of the joint loss.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub forward: Forward,
    pub total: Var,
    pub pred: Var,
    pub rec: Option<Var>,
    pub kl: Option<Var>,
    pub rec_elements: Option<Var>,
    pub kl_elements: Vec<Var>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossRecord {
    pub total: f64,
    pub pred: f64,
    pub rec: f64,
    pub kl: f64,
}

impl LossVars {
    pub fn record(&self, g: &Graph) -> LossRecord {
        LossRecord {
            total: g.value(self.total).item(),
            pred: g.value(self.pred).item(),
            rec: self.rec.map_or(0.0, |v| g.value(v).item()),
            kl: self.kl.map_or(0.0, |v| g.value(v).item()),
        }
    }

    /// ELBO contribution of each input step, summed over the batch.
    pub fn per_step_elbo(&self, g: &Graph) -> Vec<f64> {
        let mut out = self.rec_elements.map(|r| per_step_sums(g.value(r))).unwrap_or_default();
        for &k in &self.kl_elements {
            let s = per_step_sums(g.value(k));
            if out.is_empty() {
                out = s;
            } else {
                out.iter_mut().zip(s).for_each(|(o, v)| *o += v);
            }
        }
        out
    }
}

/// The full network. Parameters live in `params`; the structural fields only
/// hold handles into it, so any store with the same layout can be evaluated.
#[derive(Clone, Debug)]
pub struct AirFormerModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub embedding: Mlp,
    pub blocks: Vec<Block>,
    pub stochastic: Option<StochasticStage>,
    pub head: Mlp,
}

impl AirFormerModel {
    /// Builds and initializes every parameter from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let c = config.hidden;
        let act = config.activation;
        let embedding = Mlp::new(&mut store, &mut rng, "embedding", &[config.input_channels(), c, c], act)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for (l, &w) in config.window_sizes.iter().enumerate() {
            let ds_msa = if config.use_dsmsa {
                Some(DsMsaLayer::new(
                    &mut store,
                    &mut rng,
                    &format!("block{l}.dsmsa"),
                    c,
                    config.heads,
                    config.dartboard.num_regions(),
                    act,
                )?)
            } else {
                None
            };
            let ct_msa = CtMsaLayer::new(
                &mut store,
                &mut rng,
                &format!("block{l}.ctmsa"),
                c,
                config.heads,
                config.input_steps,
                w,
                act,
            )?;
            blocks.push(Block { ds_msa, ct_msa });
        }
        let stochastic = if config.use_stochastic {
            Some(StochasticStage::new(
                &mut store,
                &mut rng,
                "stochastic",
                config.blocks,
                c,
                config.measurements,
                act,
            )?)
        } else {
            None
        };
        let head_in = if config.use_stochastic { 2 } else { 1 } * config.blocks * c;
        let head = Mlp::new(
            &mut store,
            &mut rng,
            "head",
            &[head_in, c, config.horizon * config.outputs],
            act,
        )?;
        Ok(Self {
            config,
            params: store,
            embedding,
            blocks,
            stochastic,
            head,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Standard-normal noise for one training step, one tensor per block.
    pub fn sample_noise(&self, rng: &mut impl Rng, batch: usize, stations: usize) -> Vec<Tensor> {
        if self.stochastic.is_none() {
            return Vec::new();
        }
        let shape = [batch, self.config.input_steps, stations, self.config.hidden];
        (0..self.config.blocks)
            .map(|_| Tensor::from_fn(&shape, |_| rng.sample(StandardNormal)))
            .collect()
    }

    /// Embedding followed by the blocks; returns `H^1..H^L`, each `[B, T, N, C]`.
    pub fn forward_deterministic(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        projection: &Arc<DartboardProjection>,
    ) -> Result<Vec<Var>> {
        let shape = g.shape(x).to_vec();
        let cfg = &self.config;
        match shape.as_slice() {
            [_, t, n, d] if *t == cfg.input_steps && *d == cfg.input_channels() => {
                if *n != projection.n_stations() {
                    return Err(Error::Config(format!(
                        "input has {n} stations, projection has {}",
                        projection.n_stations()
                    )));
                }
            }
            _ => {
                return Err(Error::dim(
                    "forward",
                    &shape,
                    &[0, cfg.input_steps, projection.n_stations(), cfg.input_channels()],
                ))
            }
        }
        let mut h = self.embedding.forward(g, store, x)?;
        let mut states = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            if let Some(ds) = &block.ds_msa {
                h = ds.forward(g, store, h, projection)?;
            }
            h = block.ct_msa.forward(g, store, h)?;
            states.push(h);
        }
        Ok(states)
    }

    /// Prediction head on the last-step states (and latents) of every block;
    /// returns `[B, τ, N, D_out]`.
    pub fn predict(&self, g: &mut Graph, store: &ParamStore, states: &[Var], latents: Option<&[Var]>) -> Result<Var> {
        if states.len() != self.blocks.len() {
            return Err(Error::Contract(format!(
                "expected {} block states, got {}",
                self.blocks.len(),
                states.len()
            )));
        }
        let mut parts = Vec::with_capacity(2 * states.len());
        let take_last = |g: &mut Graph, v: Var| -> Result<Var> {
            let t = g.shape(v)[1];
            g.slice(v, 1, t - 1, 1)
        };
        for &h in states {
            parts.push(take_last(g, h)?);
        }
        match (self.stochastic.is_some(), latents) {
            (true, Some(z)) if z.len() == states.len() => {
                for &zl in z {
                    parts.push(take_last(g, zl)?);
                }
            }
            (true, _) => return Err(Error::Contract("prediction needs one latent per block".into())),
            (false, _) => {}
        }
        let feats = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 3)? };
        let out = self.head.forward(g, store, feats)?;
        let sh = g.shape(out).to_vec();
        let (b, n) = (sh[0], sh[2]);
        let out = g.reshape(out, &[b, n, self.config.horizon, self.config.outputs])?;
        g.permute(out, &[0, 2, 1, 3])
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: &Tensor,
        projection: &Arc<DartboardProjection>,
        mode: Mode,
    ) -> Result<Forward> {
        let xv = g.constant(x.clone());
        let states = self.forward_deterministic(g, store, xv, projection)?;
        let stack = match &self.stochastic {
            Some(stage) => {
                let sampling = match mode {
                    Mode::Sample(noise) => Sampling::Noise(noise),
                    Mode::Eval => Sampling::Mean,
                };
                Some(stage.run(g, store, &states, sampling)?)
            }
            None => None,
        };
        let prediction = self.predict(g, store, &states, stack.as_ref().map(|s| s.latents.as_slice()))?;
        Ok(Forward {
            states,
            stack,
            prediction,
        })
    }

    /// `L_pred + elbo_weight · Σ_t (L_rec + L_kl)`, with `L_pred` the masked
    /// mean absolute error.
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        projection: &Arc<DartboardProjection>,
        mode: Mode,
    ) -> Result<LossVars> {
        let forward = self.forward(g, store, &batch.x, projection, mode)?;
        let pred = masked_l1(g, forward.prediction, &batch.y, &batch.y_mask)?;
        let (mut total, mut rec, mut kl, mut rec_elements, mut kl_elements) = (pred, None, None, None, Vec::new());
        if let (Some(stage), Some(stack)) = (&self.stochastic, &forward.stack) {
            let recon = stage.reconstruct(g, store, &stack.latents)?;
            let terms = elbo_loss(g, stack, recon, &batch.x_target, Some(&batch.x_mask))?;
            let weighted = g.scale(terms.total, self.config.elbo_weight);
            total = g.add(pred, weighted)?;
            rec = Some(terms.rec);
            kl = Some(terms.kl);
            rec_elements = Some(terms.rec_elements);
            kl_elements = terms.kl_elements;
        }
        Ok(LossVars {
            forward,
            total,
            pred,
            rec,
            kl,
            rec_elements,
            kl_elements,
        })
    }

    /// Deterministic forecast in normalized units, `[B, τ, N, D_out]`.
    pub fn predict_batch(&self, x: &Tensor, projection: &Arc<DartboardProjection>) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, &self.params, x, projection, Mode::Eval)?;
        Ok(g.value(f.prediction).clone())
    }
}

/// `Σ |ŷ − y|·m / Σ m`; zero when nothing is observed.
pub fn masked_l1(g: &mut Graph, prediction: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
    if g.shape(prediction) != target.shape() || target.shape() != mask.shape() {
        return Err(Error::dim("masked_l1", g.shape(prediction), target.shape()));
    }
    let count: f64 = mask.sum();
    let y = g.constant(target.clone());
    let diff = g.sub(prediction, y)?;
    let abs = g.abs(diff);
    let m = g.constant(mask.clone());
    let masked = g.mul(abs, m)?;
    let s = g.sum(masked);
    Ok(g.scale(s, 1.0 / count.max(1.0)))
}

//! Top-down hierarchy of diagonal Gaussian latents.
//!
//! For every block `l` and step `t` the prior is conditioned on the previous
//! step's deterministic state and the posterior on the current one; both are
//! factorized top-down, `z^L` first, with lower blocks also seeing the latent
//! sampled one level above. All time steps and stations are processed in one
//! batched pass: states are `[B, T, N, C]` and every network is shared across
//! stations and steps.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Activation, Graph, Mlp, ParamId, ParamStore, Tensor, Var};

/// Log-variances are clamped to `[-LOG_VAR_LIMIT, LOG_VAR_LIMIT]`.
pub const LOG_VAR_LIMIT: f64 = 8.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug)]
pub struct GaussianParams {
    pub mean: Var,
    pub log_var: Var,
}

/// `z = μ + exp(½·log_var) ⊙ ε` with externally supplied noise.
pub fn reparameterize(g: &mut Graph, params: GaussianParams, noise: &Tensor) -> Result<Var> {
    if g.shape(params.mean) != noise.shape() {
        return Err(Error::dim("reparameterize", g.shape(params.mean), noise.shape()));
    }
    let half = g.scale(params.log_var, 0.5);
    let std = g.exp(half);
    let eps = g.constant(noise.clone());
    let spread = g.mul(std, eps)?;
    g.add(params.mean, spread)
}

/// Elementwise `KL(q ‖ p)` for diagonal Gaussians:
/// `½ (exp(lv_q − lv_p) + (μ_p − μ_q)² exp(−lv_p) − 1 + lv_p − lv_q)`.
pub fn kl_diag_gaussian_terms(g: &mut Graph, q: GaussianParams, p: GaussianParams) -> Result<Var> {
    let lv_diff = g.sub(q.log_var, p.log_var)?;
    let ratio = g.exp(lv_diff);
    let dmu = g.sub(p.mean, q.mean)?;
    let dmu2 = g.square(dmu);
    let neg_lvp = g.scale(p.log_var, -1.0);
    let inv_var_p = g.exp(neg_lvp);
    let maha = g.mul(dmu2, inv_var_p)?;
    let s = g.add(ratio, maha)?;
    let s = g.sub(s, lv_diff)?;
    let s = g.add_scalar(s, -1.0);
    Ok(g.scale(s, 0.5))
}

/// `KL(q ‖ p)` summed over every element (features, stations, steps).
pub fn kl_diag_gaussian(g: &mut Graph, q: GaussianParams, p: GaussianParams) -> Result<Var> {
    let t = kl_diag_gaussian_terms(g, q, p)?;
    Ok(g.sum(t))
}

/// Diagonal Gaussian log-density of `z`, summed over all elements.
pub fn gaussian_log_density(mean: &Tensor, log_var: &Tensor, z: &Tensor) -> f64 {
    mean.data()
        .iter()
        .zip(log_var.data())
        .zip(z.data())
        .map(|((m, lv), z)| -0.5 * (LN_2PI + lv + (z - m).powi(2) * (-lv).exp()))
        .sum()
}

/// How latents are drawn during a top-down pass.
#[derive(Clone, Copy, Debug)]
pub enum Sampling<'a> {
    /// Reparameterized sample with one noise tensor per block (bottom first).
    Noise(&'a [Tensor]),
    /// Use the mean; deterministic evaluation.
    Mean,
}

/// Network emitting `(μ, log_var)` from its conditioning input.
#[derive(Clone, Debug)]
pub struct LatentNet {
    pub mlp: Mlp,
    pub dim: usize,
}

impl LatentNet {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, in_dim: usize, dim: usize, act: Activation) -> Result<Self> {
        let mlp = Mlp::new(store, rng, name, &[in_dim, dim, dim, 2 * dim], act)?;
        Ok(Self { mlp, dim })
    }

    pub fn params(&self, g: &mut Graph, store: &ParamStore, input: Var) -> Result<GaussianParams> {
        let out = self.mlp.forward(g, store, input)?;
        let last = g.shape(out).len() - 1;
        let mean = g.slice(out, last, 0, self.dim)?;
        let raw = g.slice(out, last, self.dim, self.dim)?;
        let log_var = g.clamp(raw, -LOG_VAR_LIMIT, LOG_VAR_LIMIT);
        Ok(GaussianParams { mean, log_var })
    }
}

/// Prior and posterior parameters plus the latents used downstream, indexed
/// by block with block 0 at the bottom.
#[derive(Clone, Debug)]
pub struct LatentStack {
    pub prior: Vec<GaussianParams>,
    pub posterior: Vec<GaussianParams>,
    pub latents: Vec<Var>,
}

/// How the lower prior levels are conditioned.
#[derive(Clone, Copy, Debug)]
pub enum PriorConditioning<'a> {
    /// Condition on given latents from the level above (the posterior samples
    /// during training).
    Latents(&'a [Var]),
    /// Generate: sample the prior hierarchy itself.
    Sample(Sampling<'a>),
}

#[derive(Clone, Debug)]
pub struct StochasticStage {
    pub prior_nets: Vec<LatentNet>,
    pub posterior_nets: Vec<LatentNet>,
    /// Learned state standing in for step 0's predecessor, one `[C]` per block.
    pub initial_states: Vec<ParamId>,
    pub decoder: Mlp,
    pub dim: usize,
}

impl StochasticStage {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        blocks: usize,
        dim: usize,
        recon_dim: usize,
        act: Activation,
    ) -> Result<Self> {
        if blocks == 0 {
            return Err(Error::Config("stochastic stage needs at least one block".into()));
        }
        let mut prior_nets = Vec::with_capacity(blocks);
        let mut posterior_nets = Vec::with_capacity(blocks);
        let mut initial_states = Vec::with_capacity(blocks);
        for l in 0..blocks {
            let in_dim = if l + 1 == blocks { dim } else { 2 * dim };
            prior_nets.push(LatentNet::new(store, rng, &format!("{name}.prior{l}"), in_dim, dim, act)?);
            posterior_nets.push(LatentNet::new(store, rng, &format!("{name}.posterior{l}"), in_dim, dim, act)?);
            initial_states.push(store.add(format!("{name}.h0.{l}"), Tensor::zeros(&[dim]))?);
        }
        let decoder = Mlp::new(store, rng, &format!("{name}.decoder"), &[blocks * dim, dim, dim, recon_dim], act)?;
        Ok(Self {
            prior_nets,
            posterior_nets,
            initial_states,
            decoder,
            dim,
        })
    }

    pub fn blocks(&self) -> usize {
        self.prior_nets.len()
    }

    fn check_states(&self, g: &Graph, states: &[Var]) -> Result<()> {
        if states.len() != self.blocks() {
            return Err(Error::Contract(format!(
                "expected {} block states, got {}",
                self.blocks(),
                states.len()
            )));
        }
        for &s in states {
            let sh = g.shape(s);
            if sh.len() != 4 || sh[3] != self.dim {
                return Err(Error::dim("stochastic stage", sh, &[0, 0, 0, self.dim]));
            }
        }
        Ok(())
    }

    /// States shifted one step later along time: step `t` receives `h_{t-1}`
    /// and step 0 receives the learned initial state.
    pub fn previous_states(&self, g: &mut Graph, store: &ParamStore, states: &[Var]) -> Result<Vec<Var>> {
        self.check_states(g, states)?;
        states
            .iter()
            .zip(&self.initial_states)
            .map(|(&h, &h0)| {
                let sh = g.shape(h).to_vec();
                let (b, t, n, c) = (sh[0], sh[1], sh[2], sh[3]);
                let zeros = g.constant(Tensor::zeros(&[b, 1, n, c]));
                let h0 = g.param(store, h0);
                let first = g.add(zeros, h0)?;
                if t == 1 {
                    return Ok(first);
                }
                let rest = g.slice(h, 1, 0, t - 1)?;
                g.concat(&[first, rest], 1)
            })
            .collect()
    }

    fn top_down(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        nets: &[LatentNet],
        states: &[Var],
        conditioning: PriorConditioning,
    ) -> Result<(Vec<GaussianParams>, Vec<Var>)> {
        self.check_states(g, states)?;
        let l_count = self.blocks();
        let mut params: Vec<Option<GaussianParams>> = vec![None; l_count];
        let mut latents: Vec<Option<Var>> = vec![None; l_count];
        if let PriorConditioning::Latents(z) = conditioning {
            if z.len() != l_count {
                return Err(Error::Contract(format!("expected {l_count} latents, got {}", z.len())));
            }
        }
        for l in (0..l_count).rev() {
            let input = if l + 1 == l_count {
                states[l]
            } else {
                let above = match conditioning {
                    PriorConditioning::Latents(z) => z[l + 1],
                    PriorConditioning::Sample(_) => latents[l + 1].expect("sampled above"),
                };
                g.concat(&[above, states[l]], 3)?
            };
            let p = nets[l].params(g, store, input)?;
            let z = match conditioning {
                PriorConditioning::Latents(z) => z[l],
                PriorConditioning::Sample(Sampling::Mean) => p.mean,
                PriorConditioning::Sample(Sampling::Noise(noise)) => {
                    let eps = noise.get(l).ok_or_else(|| Error::Contract(format!("missing noise for block {l}")))?;
                    reparameterize(g, p, eps)?
                }
            };
            params[l] = Some(p);
            latents[l] = Some(z);
        }
        Ok((
            params.into_iter().map(|p| p.expect("filled")).collect(),
            latents.into_iter().map(|z| z.expect("filled")).collect(),
        ))
    }

    /// Prior `p(Z_t | X_{1:t-1})` from previous-step states.
    pub fn prior_pass(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prev_states: &[Var],
        conditioning: PriorConditioning,
    ) -> Result<(Vec<GaussianParams>, Vec<Var>)> {
        self.top_down(g, store, &self.prior_nets, prev_states, conditioning)
    }

    /// Posterior `q(Z_t | X_{1:t})` from current-step states.
    pub fn posterior_pass(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        states: &[Var],
        sampling: Sampling,
    ) -> Result<(Vec<GaussianParams>, Vec<Var>)> {
        self.top_down(g, store, &self.posterior_nets, states, PriorConditioning::Sample(sampling))
    }

    /// Posterior sampling followed by the prior conditioned on the same latents.
    pub fn run(&self, g: &mut Graph, store: &ParamStore, states: &[Var], sampling: Sampling) -> Result<LatentStack> {
        let (posterior, latents) = self.posterior_pass(g, store, states, sampling)?;
        let prev = self.previous_states(g, store, states)?;
        let (prior, _) = self.prior_pass(g, store, &prev, PriorConditioning::Latents(&latents))?;
        Ok(LatentStack {
            prior,
            posterior,
            latents,
        })
    }

    /// Decodes the concatenated latents of every block into `[B, T, N, D]`.
    pub fn reconstruct(&self, g: &mut Graph, store: &ParamStore, latents: &[Var]) -> Result<Var> {
        if latents.len() != self.blocks() {
            return Err(Error::Contract(format!(
                "expected {} latents, got {}",
                self.blocks(),
                latents.len()
            )));
        }
        let last = g.shape(latents[0]).len() - 1;
        let z = if latents.len() == 1 {
            latents[0]
        } else {
            g.concat(latents, last)?
        };
        self.decoder.forward(g, store, z)
    }
}

/// Negative ELBO pieces. Elementwise terms keep the `[B, T, ...]` layout so
/// per-step contributions can be inspected.
#[derive(Clone, Debug)]
pub struct ElboTerms {
    pub rec: Var,
    pub kl: Var,
    pub total: Var,
    pub rec_elements: Var,
    pub kl_elements: Vec<Var>,
}

/// `½ ‖mask ⊙ (X − X̂)‖²` elementwise; unit-variance Gaussian likelihood with
/// the constant dropped.
pub fn reconstruction_terms(g: &mut Graph, recon: Var, target: &Tensor, mask: Option<&Tensor>) -> Result<Var> {
    if g.shape(recon) != target.shape() {
        return Err(Error::dim("reconstruction", g.shape(recon), target.shape()));
    }
    let x = g.constant(target.clone());
    let diff = g.sub(recon, x)?;
    let diff = match mask {
        Some(m) => {
            let m = g.constant(m.clone());
            g.mul(diff, m)?
        }
        None => diff,
    };
    let sq = g.square(diff);
    Ok(g.scale(sq, 0.5))
}

/// `Σ_t [L_rec(t) + L_kl(t)]`, averaged over the leading batch axis.
pub fn elbo_loss(
    g: &mut Graph,
    stack: &LatentStack,
    recon: Var,
    target: &Tensor,
    mask: Option<&Tensor>,
) -> Result<ElboTerms> {
    let batch = target.shape().first().copied().unwrap_or(1) as f64;
    let rec_elements = reconstruction_terms(g, recon, target, mask)?;
    let rec = g.sum(rec_elements);
    let rec = g.scale(rec, 1.0 / batch);
    let mut kl_elements = Vec::with_capacity(stack.prior.len());
    let mut kl_sum: Option<Var> = None;
    for (q, p) in stack.posterior.iter().zip(&stack.prior) {
        let e = kl_diag_gaussian_terms(g, *q, *p)?;
        let s = g.sum(e);
        kl_sum = Some(match kl_sum {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
        kl_elements.push(e);
    }
    let kl = match kl_sum {
        Some(k) => g.scale(k, 1.0 / batch),
        None => g.constant(Tensor::scalar(0.0)),
    };
    let total = g.add(rec, kl)?;
    Ok(ElboTerms {
        rec,
        kl,
        total,
        rec_elements,
        kl_elements,
    })
}

/// Sums a `[B, T, ...]` tensor over everything but the time axis.
pub fn per_step_sums(t: &Tensor) -> Vec<f64> {
    let sh = t.shape();
    let (b, steps) = (sh[0], sh[1]);
    let inner: usize = sh[2..].iter().product();
    let mut out = vec![0.0; steps];
    for bi in 0..b {
        for (s, o) in out.iter_mut().enumerate() {
            let base = (bi * steps + s) * inner;
            *o += t.data()[base..base + inner].iter().sum::<f64>();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gp(g: &mut Graph, mean: Tensor, lv: Tensor) -> GaussianParams {
        GaussianParams {
            mean: g.constant(mean),
            log_var: g.constant(lv),
        }
    }

    #[test]
    fn kl_examples() {
        let mut g = Graph::new();
        let q = gp(&mut g, Tensor::full(&[1, 1], 1.0), Tensor::zeros(&[1, 1]));
        let p = gp(&mut g, Tensor::zeros(&[1, 1]), Tensor::zeros(&[1, 1]));
        let kl = kl_diag_gaussian(&mut g, q, p).unwrap();
        assert!((g.value(kl).item() - 0.5).abs() < 1e-12);
        let same = kl_diag_gaussian(&mut g, q, q).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
    }

    #[test]
    fn reparameterize_examples() {
        let mut g = Graph::new();
        let mean = Tensor::from_fn(&[2, 3], |i| i as f64);
        let p = gp(&mut g, mean.clone(), Tensor::from_fn(&[2, 3], |i| 0.1 * i as f64));
        let z = reparameterize(&mut g, p, &Tensor::zeros(&[2, 3])).unwrap();
        assert_eq!(g.value(z), &mean);
        let p = gp(&mut g, mean.clone(), Tensor::zeros(&[2, 3]));
        let z = reparameterize(&mut g, p, &Tensor::ones(&[2, 3])).unwrap();
        assert_eq!(g.value(z), &mean.map(|x| x + 1.0));
    }

    #[test]
    fn zero_networks_give_standard_normal_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let stage = StochasticStage::new(&mut store, &mut rng, "s", 2, 3, 2, Activation::Gelu).unwrap();
        for net in &stage.prior_nets {
            for l in &net.mlp.layers {
                store.get_mut(l.weight).value.data_mut().fill(0.0);
            }
        }
        let mut g = Graph::new();
        let h: Vec<Var> = (0..2).map(|_| g.constant(Tensor::from_fn(&[1, 2, 4, 3], |i| i as f64))).collect();
        let (prior, _) = stage
            .prior_pass(&mut g, &store, &h, PriorConditioning::Sample(Sampling::Mean))
            .unwrap();
        for p in prior {
            assert!(g.value(p.mean).data().iter().all(|&v| v == 0.0));
            assert!(g.value(p.log_var).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn reconstruction_examples() {
        let mut g = Graph::new();
        let x = Tensor::from_fn(&[1, 2, 2, 1], |i| i as f64 - 1.5);
        let r = g.constant(x.clone());
        let t = reconstruction_terms(&mut g, r, &x, None).unwrap();
        assert_eq!(g.value(t).sum(), 0.0);
        let zero = g.constant(Tensor::zeros(&[1, 2, 2, 1]));
        let t = reconstruction_terms(&mut g, zero, &x, None).unwrap();
        let expect = 0.5 * x.data().iter().map(|v| v * v).sum::<f64>();
        assert!((g.value(t).sum() - expect).abs() < 1e-15);
    }

    #[test]
    fn per_step_sums_layout() {
        let t = Tensor::from_fn(&[2, 3, 2], |i| i as f64);
        // b0: [0,1],[2,3],[4,5]; b1: [6,7],[8,9],[10,11]
        assert_eq!(per_step_sums(&t), vec![14.0, 22.0, 30.0]);
    }
}

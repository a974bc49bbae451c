//! Dartboard spatial attention, causal windowed temporal attention, and a
//! literal quadratic multi-head attention used as a test oracle.

use std::sync::Arc;

use rand::Rng;

use crate::dartboard::DartboardProjection;
use crate::error::{Error, Result};
use crate::numerics::{softmax_row, Activation, CustomOp, Graph, Mlp, ParamId, ParamStore, Tensor, Var};

/// Attention scale `1 / sqrt(C / N_h)`.
pub fn attention_scale(dim: usize, heads: usize) -> f64 {
    1.0 / ((dim / heads) as f64).sqrt()
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!(
            "hidden width {dim} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Softmax backward on one slice: `dlogit = w ⊙ (dw − ⟨w, dw⟩)`.
fn softmax_grad(w: &[f64], dw: &mut [f64]) {
    let s = dot(w, dw);
    for (d, &wi) in dw.iter_mut().zip(w) {
        *d = wi * (*d - s);
    }
}

/// Sparse dartboard attention over rows `[R, N, C]`.
///
/// Keys and values are pooled per region from the projected station rows;
/// since the projections carry no bias this equals projecting the pooled
/// regional features.
struct DartboardAttention {
    projection: Arc<DartboardProjection>,
    heads: usize,
    scale: f64,
    /// Attention weights `[R, N, heads, M]`.
    weights: Vec<f64>,
}

impl DartboardAttention {
    fn forward(
        projection: Arc<DartboardProjection>,
        heads: usize,
        scale: f64,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        bias: &Tensor,
    ) -> (Self, Tensor) {
        let (rows, n, c) = (q.shape()[0], q.shape()[1], q.shape()[2]);
        let m = projection.n_regions();
        let dh = c / heads;
        let mut out = vec![0.0; q.len()];
        let mut weights = vec![0.0; rows * n * heads * m];
        let mut pk = vec![0.0; n * m * c];
        let mut pv = vec![0.0; n * m * c];
        for r in 0..rows {
            let span = r * n * c..(r + 1) * n * c;
            projection.pool_slice(&k.data()[span.clone()], c, &mut pk);
            projection.pool_slice(&v.data()[span], c, &mut pv);
            for i in 0..n {
                let qrow = &q.data()[(r * n + i) * c..(r * n + i + 1) * c];
                for h in 0..heads {
                    let hs = h * dh..(h + 1) * dh;
                    let wbase = ((r * n + i) * heads + h) * m;
                    let w = &mut weights[wbase..wbase + m];
                    for (reg, wr) in w.iter_mut().enumerate() {
                        *wr = if projection.region_non_empty(i, reg) {
                            let krow = &pk[(i * m + reg) * c..(i * m + reg + 1) * c];
                            scale * dot(&qrow[hs.clone()], &krow[hs.clone()]) + bias.data()[h * m + reg]
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    softmax_row(w);
                    let o = &mut out[(r * n + i) * c + h * dh..(r * n + i) * c + (h + 1) * dh];
                    for (reg, &wr) in w.iter().enumerate() {
                        if wr != 0.0 {
                            let vrow = &pv[(i * m + reg) * c..(i * m + reg + 1) * c];
                            axpy(wr, &vrow[hs.clone()], o);
                        }
                    }
                }
            }
        }
        let op = Self {
            projection,
            heads,
            scale,
            weights,
        };
        (op, Tensor::from_parts(q.shape().to_vec(), out))
    }
}

impl CustomOp for DartboardAttention {
    fn name(&self) -> &'static str {
        "dartboard_attention"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let rank = q.rank();
        let (n, c) = (q.shape()[rank - 2], q.shape()[rank - 1]);
        let rows = q.len() / (n * c);
        let m = self.projection.n_regions();
        let heads = self.heads;
        let dh = c / heads;
        let mut dq = vec![0.0; q.len()];
        let mut dk = vec![0.0; k.len()];
        let mut dv = vec![0.0; v.len()];
        let mut dbias = vec![0.0; heads * m];
        let mut pk = vec![0.0; n * m * c];
        let mut pv = vec![0.0; n * m * c];
        let mut dpk = vec![0.0; n * m * c];
        let mut dpv = vec![0.0; n * m * c];
        let mut dw = vec![0.0; m];
        for r in 0..rows {
            let span = r * n * c..(r + 1) * n * c;
            self.projection.pool_slice(&k.data()[span.clone()], c, &mut pk);
            self.projection.pool_slice(&v.data()[span.clone()], c, &mut pv);
            dpk.fill(0.0);
            dpv.fill(0.0);
            for i in 0..n {
                let row = (r * n + i) * c;
                for h in 0..heads {
                    let hs = h * dh..(h + 1) * dh;
                    let wbase = ((r * n + i) * heads + h) * m;
                    let w = &self.weights[wbase..wbase + m];
                    let go = &grad.data()[row + h * dh..row + (h + 1) * dh];
                    for reg in 0..m {
                        let base = (i * m + reg) * c;
                        dw[reg] = if w[reg] != 0.0 {
                            axpy(w[reg], go, &mut dpv[base + hs.start..base + hs.end]);
                            dot(go, &pv[base + hs.start..base + hs.end])
                        } else {
                            0.0
                        };
                    }
                    softmax_grad(w, &mut dw);
                    let qh = &q.data()[row + hs.start..row + hs.end];
                    for reg in 0..m {
                        let dl = dw[reg];
                        if dl == 0.0 {
                            continue;
                        }
                        let base = (i * m + reg) * c;
                        dbias[h * m + reg] += dl;
                        axpy(self.scale * dl, &pk[base + hs.start..base + hs.end], &mut dq[row + hs.start..row + hs.end]);
                        axpy(self.scale * dl, qh, &mut dpk[base + hs.start..base + hs.end]);
                    }
                }
            }
            self.projection.unpool_slice(&dpk, c, &mut dk[span.clone()]);
            self.projection.unpool_slice(&dpv, c, &mut dv[span]);
        }
        vec![
            Some(Tensor::from_parts(q.shape().to_vec(), dq)),
            Some(Tensor::from_parts(k.shape().to_vec(), dk)),
            Some(Tensor::from_parts(v.shape().to_vec(), dv)),
            Some(Tensor::from_parts(vec![heads, m], dbias)),
        ]
    }
}

/// Multi-head attention of each station over its dartboard regions.
///
/// `q`, `k`, `v` are `[..., N, C]` projections; `bias` is the `[heads, M]`
/// relative position table. Empty regions receive zero weight.
pub fn dartboard_attention(
    g: &mut Graph,
    projection: &Arc<DartboardProjection>,
    q: Var,
    k: Var,
    v: Var,
    bias: Var,
    heads: usize,
) -> Result<Var> {
    let shape = g.shape(q).to_vec();
    let n = projection.n_stations();
    if shape.len() < 2 || shape[shape.len() - 2] != n {
        return Err(Error::dim("dartboard_attention", &shape, &[n, 0]));
    }
    for other in [k, v] {
        if g.shape(other) != shape.as_slice() {
            return Err(Error::dim("dartboard_attention", &shape, g.shape(other)));
        }
    }
    let c = shape[shape.len() - 1];
    check_heads(c, heads)?;
    let m = projection.n_regions();
    if g.shape(bias) != [heads, m] {
        return Err(Error::dim("dartboard_attention bias", &[heads, m], g.shape(bias)));
    }
    let rows = shape[..shape.len() - 2].iter().product::<usize>();
    let flat = |t: &Tensor| Tensor::from_parts(vec![rows, n, c], t.data().to_vec());
    let (op, out) = DartboardAttention::forward(
        Arc::clone(projection),
        heads,
        attention_scale(c, heads),
        &flat(g.value(q)),
        &flat(g.value(k)),
        &flat(g.value(v)),
        g.value(bias),
    );
    let out = Tensor::from_parts(shape, out.into_data());
    Ok(g.custom(vec![q, k, v, bias], out, Box::new(op)))
}

/// Attention within contiguous time windows, per station and head.
struct WindowAttention {
    window: usize,
    heads: usize,
    scale: f64,
    /// `[B, N, T, heads, W]`.
    weights: Vec<f64>,
}

struct WinDims {
    b: usize,
    t: usize,
    n: usize,
    c: usize,
}

impl WinDims {
    fn at(&self, b: usize, t: usize, n: usize) -> usize {
        ((b * self.t + t) * self.n + n) * self.c
    }
}

impl WindowAttention {
    fn forward(dims: &WinDims, window: usize, heads: usize, causal: bool, q: &Tensor, k: &Tensor, v: &Tensor) -> (Self, Tensor) {
        let scale = attention_scale(dims.c, heads);
        let dh = dims.c / heads;
        let mut out = vec![0.0; q.len()];
        let mut weights = vec![0.0; dims.b * dims.n * dims.t * heads * window];
        for b in 0..dims.b {
            for n in 0..dims.n {
                for t in 0..dims.t {
                    let start = t - t % window;
                    let qo = dims.at(b, t, n);
                    for h in 0..heads {
                        let hs = h * dh..(h + 1) * dh;
                        let wb = (((b * dims.n + n) * dims.t + t) * heads + h) * window;
                        let w = &mut weights[wb..wb + window];
                        for (u, wu) in w.iter_mut().enumerate() {
                            *wu = if causal && start + u > t {
                                f64::NEG_INFINITY
                            } else {
                                let ko = dims.at(b, start + u, n);
                                scale * dot(&q.data()[qo + hs.start..qo + hs.end], &k.data()[ko + hs.start..ko + hs.end])
                            };
                        }
                        softmax_row(w);
                        for (u, &wu) in w.iter().enumerate() {
                            if wu != 0.0 {
                                let vo = dims.at(b, start + u, n);
                                axpy(wu, &v.data()[vo + hs.start..vo + hs.end], &mut out[qo + hs.start..qo + hs.end]);
                            }
                        }
                    }
                }
            }
        }
        let op = Self {
            window,
            heads,
            scale,
            weights,
        };
        (op, Tensor::from_parts(q.shape().to_vec(), out))
    }
}

impl CustomOp for WindowAttention {
    fn name(&self) -> &'static str {
        "window_attention"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let s = q.shape();
        let dims = WinDims {
            b: s[0],
            t: s[1],
            n: s[2],
            c: s[3],
        };
        let (window, heads) = (self.window, self.heads);
        let dh = dims.c / heads;
        let mut dq = vec![0.0; q.len()];
        let mut dk = vec![0.0; k.len()];
        let mut dv = vec![0.0; v.len()];
        let mut dw = vec![0.0; window];
        for b in 0..dims.b {
            for n in 0..dims.n {
                for t in 0..dims.t {
                    let start = t - t % window;
                    let qo = dims.at(b, t, n);
                    for h in 0..heads {
                        let hs = h * dh..(h + 1) * dh;
                        let wb = (((b * dims.n + n) * dims.t + t) * heads + h) * window;
                        let w = &self.weights[wb..wb + window];
                        let go = &grad.data()[qo + hs.start..qo + hs.end];
                        for u in 0..window {
                            let vo = dims.at(b, start + u, n);
                            dw[u] = if w[u] != 0.0 {
                                axpy(w[u], go, &mut dv[vo + hs.start..vo + hs.end]);
                                dot(go, &v.data()[vo + hs.start..vo + hs.end])
                            } else {
                                0.0
                            };
                        }
                        softmax_grad(w, &mut dw);
                        for u in 0..window {
                            let dl = dw[u];
                            if dl == 0.0 {
                                continue;
                            }
                            let ko = dims.at(b, start + u, n);
                            axpy(self.scale * dl, &k.data()[ko + hs.start..ko + hs.end], &mut dq[qo + hs.start..qo + hs.end]);
                            axpy(self.scale * dl, &q.data()[qo + hs.start..qo + hs.end], &mut dk[ko + hs.start..ko + hs.end]);
                        }
                    }
                }
            }
        }
        vec![
            Some(Tensor::from_parts(s.to_vec(), dq)),
            Some(Tensor::from_parts(s.to_vec(), dk)),
            Some(Tensor::from_parts(s.to_vec(), dv)),
        ]
    }
}

/// Multi-head attention along axis 1 of `[B, T, N, C]` inside non-overlapping
/// windows of `window` steps, optionally under a lower-triangular mask.
pub fn window_attention(g: &mut Graph, q: Var, k: Var, v: Var, window: usize, heads: usize, causal: bool) -> Result<Var> {
    let shape = g.shape(q).to_vec();
    if shape.len() != 4 {
        return Err(Error::dim("window_attention", &shape, &[0, 0, 0, 0]));
    }
    for other in [k, v] {
        if g.shape(other) != shape.as_slice() {
            return Err(Error::dim("window_attention", &shape, g.shape(other)));
        }
    }
    check_heads(shape[3], heads)?;
    if window == 0 || shape[1] % window != 0 {
        return Err(Error::Config(format!(
            "window size {window} does not divide sequence length {}",
            shape[1]
        )));
    }
    let dims = WinDims {
        b: shape[0],
        t: shape[1],
        n: shape[2],
        c: shape[3],
    };
    let (op, out) = WindowAttention::forward(&dims, window, heads, causal, g.value(q), g.value(k), g.value(v));
    Ok(g.custom(vec![q, k, v], out, Box::new(op)))
}

/// Projection weights for one multi-head attention.
#[derive(Clone, Copy, Debug)]
pub struct MsaWeights {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub heads: usize,
}

/// Literal quadratic multi-head attention on `[S, C]` with an optional
/// additive `[S, S]` mask; heads concatenated, no output transform.
pub fn naive_msa(g: &mut Graph, x: Var, w: &MsaWeights, mask: Option<&Tensor>) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(Error::dim("naive_msa", &shape, &[0, 0]));
    }
    let (s, c) = (shape[0], shape[1]);
    check_heads(c, w.heads)?;
    let dh = c / w.heads;
    let split = |g: &mut Graph, t: Var, axes: &[usize]| -> Result<Var> {
        let t = g.reshape(t, &[s, w.heads, dh])?;
        g.permute(t, axes)
    };
    let q = g.matmul(x, w.w_q)?;
    let k = g.matmul(x, w.w_k)?;
    let v = g.matmul(x, w.w_v)?;
    let q = split(g, q, &[1, 0, 2])?;
    let kt = split(g, k, &[1, 2, 0])?;
    let v = split(g, v, &[1, 0, 2])?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, attention_scale(c, w.heads));
    let attn = g.softmax_lastaxis(logits, mask)?;
    let o = g.matmul(attn, v)?;
    let o = g.permute(o, &[1, 0, 2])?;
    g.reshape(o, &[s, c])
}

/// Additive lower-triangular mask: position `t` sees only `u <= t`.
pub fn causal_mask(len: usize) -> Tensor {
    Tensor::from_fn(&[len, len], |i| {
        if i % len > i / len {
            crate::numerics::MASK_SENTINEL
        } else {
            0.0
        }
    })
}

/// Shared pre-norm projections of both attention layers.
#[derive(Clone, Debug)]
pub struct AttentionCore {
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub out_mlp: Mlp,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionCore {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, heads: usize, act: Activation) -> Result<Self> {
        check_heads(dim, heads)?;
        let mut w = |suffix: &str, rng: &mut _| {
            store.add(
                format!("{name}.{suffix}"),
                crate::numerics::xavier_uniform(rng, &[dim, dim], dim, dim),
            )
        };
        let w_q = w("w_q", rng)?;
        let w_k = w("w_k", rng)?;
        let w_v = w("w_v", rng)?;
        let norm_gain = store.add(format!("{name}.norm.gain"), Tensor::ones(&[dim]))?;
        let norm_bias = store.add(format!("{name}.norm.bias"), Tensor::zeros(&[dim]))?;
        let out_mlp = Mlp::new(store, rng, &format!("{name}.mlp"), &[dim, dim, dim], act)?;
        Ok(Self {
            norm_gain,
            norm_bias,
            w_q,
            w_k,
            w_v,
            out_mlp,
            heads,
            dim,
        })
    }

    fn project(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Var, Var)> {
        let gain = g.param(store, self.norm_gain);
        let bias = g.param(store, self.norm_bias);
        let xn = g.layer_norm(x, gain, bias)?;
        let wq = g.param(store, self.w_q);
        let wk = g.param(store, self.w_k);
        let wv = g.param(store, self.w_v);
        Ok((g.matmul(xn, wq)?, g.matmul(xn, wk)?, g.matmul(xn, wv)?))
    }

    fn finish(&self, g: &mut Graph, store: &ParamStore, residual: Var, attn: Var) -> Result<Var> {
        let y = self.out_mlp.forward(g, store, attn)?;
        g.add(residual, y)
    }

    pub fn weights(&self, g: &mut Graph, store: &ParamStore) -> MsaWeights {
        MsaWeights {
            w_q: g.param(store, self.w_q),
            w_k: g.param(store, self.w_k),
            w_v: g.param(store, self.w_v),
            heads: self.heads,
        }
    }
}

/// Dartboard spatial multi-head self-attention.
#[derive(Clone, Debug)]
pub struct DsMsaLayer {
    pub core: AttentionCore,
    /// Relative position bias `[heads, M]`, shared by every query station.
    pub bias_table: ParamId,
    pub n_regions: usize,
}

impl DsMsaLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        n_regions: usize,
        act: Activation,
    ) -> Result<Self> {
        let core = AttentionCore::new(store, rng, name, dim, heads, act)?;
        let bias_table = store.add(format!("{name}.region_bias"), Tensor::zeros(&[heads, n_regions]))?;
        Ok(Self {
            core,
            bias_table,
            n_regions,
        })
    }

    /// `h` is `[..., N, C]`; attention runs independently for every leading index.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var, projection: &Arc<DartboardProjection>) -> Result<Var> {
        let shape = g.shape(h).to_vec();
        if shape.last() != Some(&self.core.dim) {
            return Err(Error::dim("ds_msa", &shape, &[self.core.dim]));
        }
        if projection.n_regions() != self.n_regions {
            return Err(Error::Config(format!(
                "projection has {} regions, layer expects {}",
                projection.n_regions(),
                self.n_regions
            )));
        }
        let (q, k, v) = self.core.project(g, store, h)?;
        let bias = g.param(store, self.bias_table);
        let attn = dartboard_attention(g, projection, q, k, v, bias, self.core.heads)?;
        self.core.finish(g, store, h, attn)
    }
}

/// Causal temporal multi-head self-attention within local windows.
#[derive(Clone, Debug)]
pub struct CtMsaLayer {
    pub core: AttentionCore,
    /// Learnable absolute position encoding `[T_max, C]`.
    pub pos_encoding: ParamId,
    pub max_len: usize,
    pub window: usize,
    pub causal: bool,
}

impl CtMsaLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        max_len: usize,
        window: usize,
        act: Activation,
    ) -> Result<Self> {
        if window == 0 || max_len % window != 0 {
            return Err(Error::Config(format!(
                "window size {window} does not divide sequence length {max_len}"
            )));
        }
        let core = AttentionCore::new(store, rng, name, dim, heads, act)?;
        let pos_encoding = store.add(
            format!("{name}.pos_encoding"),
            crate::numerics::xavier_uniform(rng, &[max_len, dim], max_len, dim),
        )?;
        Ok(Self {
            core,
            pos_encoding,
            max_len,
            window,
            causal: true,
        })
    }

    /// `h` is `[B, T, N, C]` (time on axis 1) or a single series `[T, C]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let shape = g.shape(h).to_vec();
        let (x4, t) = match shape.as_slice() {
            [t, c] if *c == self.core.dim => (g.reshape(h, &[1, *t, 1, *c])?, *t),
            [_, t, _, c] if *c == self.core.dim => (h, *t),
            _ => return Err(Error::dim("ct_msa", &shape, &[self.max_len, self.core.dim])),
        };
        if t > self.max_len || t % self.window != 0 {
            return Err(Error::Config(format!(
                "sequence length {t} incompatible with window {} and position table {}",
                self.window, self.max_len
            )));
        }
        let pe = g.param(store, self.pos_encoding);
        let pe = g.slice(pe, 0, 0, t)?;
        let pe = g.reshape(pe, &[t, 1, self.core.dim])?;
        let x = g.add(x4, pe)?;
        let (q, k, v) = self.core.project(g, store, x)?;
        let attn = window_attention(g, q, k, v, self.window, self.core.heads, self.causal)?;
        let y = self.core.finish(g, store, x, attn)?;
        if shape.len() == 2 {
            g.reshape(y, &shape)
        } else {
            Ok(y)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dartboard::{DartboardSpec, Station, StationSet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn naive_single_token_returns_value_projection() {
        let mut r = rng();
        let mut g = Graph::new();
        let x = random(&[1, 4], &mut r);
        let wv = random(&[4, 4], &mut r);
        let xs = g.constant(x.clone());
        let w = MsaWeights {
            w_q: g.constant(random(&[4, 4], &mut r)),
            w_k: g.constant(random(&[4, 4], &mut r)),
            w_v: g.constant(wv.clone()),
            heads: 2,
        };
        let out = naive_msa(&mut g, xs, &w, None).unwrap();
        let expect = crate::numerics::matmul_forward(&x, &wv).unwrap();
        for (a, b) in g.value(out).data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn naive_identical_tokens_identical_outputs() {
        let mut r = rng();
        let mut g = Graph::new();
        let row = random(&[1, 4], &mut r);
        let x = Tensor::from_fn(&[2, 4], |i| row.data()[i % 4]);
        let xs = g.constant(x);
        let w = MsaWeights {
            w_q: g.constant(random(&[4, 4], &mut r)),
            w_k: g.constant(random(&[4, 4], &mut r)),
            w_v: g.constant(random(&[4, 4], &mut r)),
            heads: 1,
        };
        let out = naive_msa(&mut g, xs, &w, None).unwrap();
        let d = g.value(out).data();
        assert_eq!(&d[..4], &d[4..]);
    }

    #[test]
    fn naive_hand_computed_two_tokens() {
        // identity projections, C = 2, one head, alpha = 1/sqrt(2)
        let mut g = Graph::new();
        let x = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let xs = g.constant(x);
        let id = g.constant(Tensor::identity(2));
        let w = MsaWeights {
            w_q: id,
            w_k: id,
            w_v: id,
            heads: 1,
        };
        let out = naive_msa(&mut g, xs, &w, None).unwrap();
        let a = 1.0 / 2f64.sqrt();
        let hi = a.exp() / (a.exp() + 1.0);
        let lo = 1.0 / (a.exp() + 1.0);
        let expect = [hi, lo, lo, hi];
        for (v, e) in g.value(out).data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn window_one_is_per_step() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let layer = CtMsaLayer::new(&mut store, &mut r, "ct", 4, 2, 6, 1, Activation::Gelu).unwrap();
        let x = random(&[6, 4], &mut r);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = layer.forward(&mut g, &store, xv).unwrap();
        let base = g.value(y).clone();
        let mut x2 = x.clone();
        for c in 0..4 {
            x2.set(&[0, c], 5.0);
            x2.set(&[5, c], -3.0);
        }
        let xv = g.constant(x2);
        let y = layer.forward(&mut g, &store, xv).unwrap();
        let other = g.value(y).clone();
        for t in 1..5 {
            for c in 0..4 {
                assert_eq!(base.get(&[t, c]), other.get(&[t, c]));
            }
        }
    }

    #[test]
    fn window_must_divide_length() {
        let mut r = rng();
        let mut store = ParamStore::new();
        assert!(matches!(
            CtMsaLayer::new(&mut store, &mut r, "ct", 4, 2, 6, 4, Activation::Gelu),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ds_msa_single_station_depends_on_self_only() {
        let mut r = rng();
        let set = StationSet::new(vec![Station {
            id: "a".into(),
            latitude: 1.0,
            longitude: 2.0,
        }])
        .unwrap();
        let spec = DartboardSpec::default();
        let proj = Arc::new(DartboardProjection::build(&spec, &set).unwrap());
        let mut store = ParamStore::new();
        let layer = DsMsaLayer::new(&mut store, &mut r, "ds", 4, 2, spec.num_regions(), Activation::Gelu).unwrap();
        let mut g = Graph::new();
        let h = g.constant(random(&[1, 4], &mut r));
        let out = layer.forward(&mut g, &store, h, &proj).unwrap();
        // With weight 1 on the self region, the attention output is the value
        // projection of the station's own normalized feature.
        let core = &layer.core;
        let gain = g.param(&store, core.norm_gain);
        let bias = g.param(&store, core.norm_bias);
        let xn = g.layer_norm(h, gain, bias).unwrap();
        let wv = g.param(&store, core.w_v);
        let v = g.matmul(xn, wv).unwrap();
        let expect = core.finish(&mut g, &store, h, v).unwrap();
        for (a, b) in g.value(out).data().iter().zip(g.value(expect).data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn ds_msa_parameter_count() {
        let mut r = rng();
        let (c, heads, m) = (8, 2, 17);
        let mut ds = ParamStore::new();
        DsMsaLayer::new(&mut ds, &mut r, "ds", c, heads, m, Activation::Gelu).unwrap();
        let mut plain = ParamStore::new();
        AttentionCore::new(&mut plain, &mut r, "msa", c, heads, Activation::Gelu).unwrap();
        assert_eq!(ds.num_scalars(), plain.num_scalars() + heads * m);
    }

    #[test]
    fn causal_mask_shape() {
        let m = causal_mask(3);
        assert_eq!(m.get(&[0, 0]), 0.0);
        assert!(crate::numerics::is_masked(m.get(&[0, 1])));
        assert_eq!(m.get(&[2, 1]), 0.0);
    }
}

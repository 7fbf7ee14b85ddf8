//! Standard building blocks on top of [`Graph`].

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: store.add_glorot(format!("{name}.w"), fan_in, fan_out, rng),
            b: Some(store.add_zeros(format!("{name}.b"), 1, fan_out)),
            fan_in,
            fan_out,
        }
    }

    /// Weight and bias start at zero, so the layer initially outputs zeros.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: store.add_zeros(format!("{name}.w"), fan_in, fan_out),
            b: Some(store.add_zeros(format!("{name}.b"), 1, fan_out)),
            fan_in,
            fan_out,
        }
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: store.add_glorot(format!("{name}.w"), fan_in, fan_out, rng),
            b: None,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => y,
        }
    }
}

/// Row-wise layer normalization with learned gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(1, dim, 1.0)),
            shift: store.add_zeros(format!("{name}.shift"), 1, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm_rows(x, LN_EPS);
        let gain = g.param(store, self.gain);
        let shift = g.param(store, self.shift);
        let y = g.mul(n, gain);
        g.add(y, shift)
    }
}

/// Linear layers with GELU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "MLP needs at least input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    /// Like [`Mlp::new`] but the last layer starts at zero.
    pub fn zero_output(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        let mut mlp = Self::new(store, name, &dims[..dims.len() - 1], rng);
        let k = dims.len() - 2;
        mlp.layers.push(Linear::zeros(
            store,
            &format!("{name}.{k}"),
            dims[dims.len() - 2],
            dims[dims.len() - 1],
        ));
        mlp
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, store, h);
            if i + 1 < self.layers.len() {
                h = g.gelu(h);
            }
        }
        h
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        ctx_dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(dim.is_multiple_of(heads), "width {dim} not divisible by {heads} heads");
        Self {
            q: Linear::no_bias(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::no_bias(store, &format!("{name}.k"), ctx_dim, dim, rng),
            v: Linear::no_bias(store, &format!("{name}.v"), ctx_dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    /// Queries from `x` (n x dim) attend over `ctx` (m x ctx_dim).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: Var) -> Var {
        let q = self.q.forward(g, store, x);
        let k = self.k.forward(g, store, ctx);
        let v = self.v.forward(g, store, ctx);
        let dim = g.shape(q).1;
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh),
                    g.slice_cols(k, h * dh, dh),
                    g.slice_cols(v, h * dh, dh),
                )
            };
            let s = g.matmul_t(qh, kh);
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s);
            outs.push(g.matmul(a, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.o.forward(g, store, cat)
    }
}

/// Pre-norm transformer block: self-attention, optional cross-attention, MLP.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub cross: Option<(LayerNorm, LayerNorm, Attention)>,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        cross_dim: Option<usize>,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, dim, heads, rng),
            cross: cross_dim.map(|cd| {
                (
                    LayerNorm::new(store, &format!("{name}.lnx"), dim),
                    LayerNorm::new(store, &format!("{name}.lnc"), cd),
                    Attention::new(store, &format!("{name}.xattn"), dim, cd, heads, rng),
                )
            }),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[dim, 2 * dim, dim], rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: Option<Var>) -> Var {
        let h = self.ln1.forward(g, store, x);
        let a = self.attn.forward(g, store, h, h);
        let mut x = g.add(x, a);
        if let (Some((lnx, lnc, xattn)), Some(ctx)) = (&self.cross, ctx) {
            let h = lnx.forward(g, store, x);
            let c = lnc.forward(g, store, ctx);
            let a = xattn.forward(g, store, h, c);
            x = g.add(x, a);
        }
        let h = self.ln2.forward(g, store, x);
        let m = self.mlp.forward(g, store, h);
        g.add(x, m)
    }
}

/// Fourier features `[x, sin(2^k pi x), cos(2^k pi x)]` for `k < bands`, per column.
pub fn fourier_features(x: &Tensor, bands: usize) -> Tensor {
    let width = x.cols * (1 + 2 * bands);
    let mut out = Tensor::zeros(x.rows, width);
    for r in 0..x.rows {
        let src = x.row(r).to_vec();
        let dst = out.row_mut(r);
        let mut o = 0;
        for &v in &src {
            dst[o] = v;
            o += 1;
        }
        for k in 0..bands {
            let f = (1u64 << k) as f64 * std::f64::consts::PI;
            for &v in &src {
                dst[o] = (f * v).sin();
                dst[o + 1] = (f * v).cos();
                o += 2;
            }
        }
    }
    out
}

/// Sinusoidal embedding of a scalar in `[0, 1]`.
pub fn timestep_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Tensor::zeros(1, dim);
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let a = 1000.0 * t * freq;
        out.data[i] = a.sin();
        out.data[half + i] = a.cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let block = Block::new(&mut store, "b", 8, 2, Some(6), &mut rng);
        let x = Tensor::randn(5, 8, 1.0, &mut rng);
        let ctx = Tensor::randn(3, 6, 1.0, &mut rng);
        let w = Tensor::randn(5, 8, 1.0, &mut rng);
        assert!(store.count() <= 1000, "{}", store.count());
        let report = gradcheck(&mut store, |g, s| {
            let xv = g.input(x.clone());
            let cv = g.input(ctx.clone());
            let y = block.forward(g, s, xv, Some(cv));
            let wv = g.input(w.clone());
            let p = g.mul(y, wv);
            g.sum(p)
        });
        assert!(report.relative_error < 1e-3, "{report:?}");
    }

    #[test]
    fn zero_output_mlp_starts_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mlp = Mlp::zero_output(&mut store, "m", &[4, 8, 3], &mut rng);
        let mut g = Graph::new();
        let x = g.input(Tensor::randn(2, 4, 1.0, &mut rng));
        let y = mlp.forward(&mut g, &store, x);
        assert!(g.value(y).data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fourier_layout() {
        let x = Tensor::from_vec(1, 2, vec![0.5, 0.25]);
        let f = fourier_features(&x, 2);
        assert_eq!(f.cols, 10);
        assert_eq!(&f.data[..2], &[0.5, 0.25]);
        assert!((f.data[2] - (std::f64::consts::PI * 0.5).sin()).abs() < 1e-15);
        assert!((f.data[9] - (2.0 * std::f64::consts::PI * 0.25).cos()).abs() < 1e-15);
    }
}

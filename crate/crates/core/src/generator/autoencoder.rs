//! Set encoder from oriented surface samples to latent tokens, and a
//! cross-attention SDF decoder.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{OrientedPointSet, Vec3};
use crate::nn::{
    fourier_features, Attention, Block, Graph, LayerNorm, Linear, Mlp, ParamId, ParamStore, Tensor, Var, LN_EPS,
};

use super::{GeneratorConfig, LatentTokens};

/// Rows of `[fourier(position), normal]`.
pub fn point_features(points: &OrientedPointSet, bands: usize) -> Tensor {
    let pos = Tensor::from_vec(
        points.len(),
        3,
        points.positions().iter().flat_map(|p| [p.x, p.y, p.z]).collect(),
    );
    let ff = fourier_features(&pos, bands);
    let mut out = Tensor::zeros(points.len(), ff.cols + 3);
    for i in 0..points.len() {
        let n = points.normal(i);
        let row = out.row_mut(i);
        row[..ff.cols].copy_from_slice(ff.row(i));
        row[ff.cols..].copy_from_slice(&[n.x, n.y, n.z]);
    }
    out
}

pub fn query_features(queries: &[Vec3], bands: usize) -> Tensor {
    let pos = Tensor::from_vec(queries.len(), 3, queries.iter().flat_map(|p| [p.x, p.y, p.z]).collect());
    fourier_features(&pos, bands)
}

#[derive(Debug, Clone)]
pub struct ShapeEncoder {
    point_in: Linear,
    queries: ParamId,
    cross: Block,
    blocks: Vec<Block>,
    out: Linear,
    bands: usize,
}

impl ShapeEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &GeneratorConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.width;
        Self {
            point_in: Linear::new(store, &format!("{name}.point_in"), cfg.fourier_width() + 3, c, rng),
            queries: store.add_normal(format!("{name}.queries"), cfg.latent_tokens, c, 0.5, rng),
            cross: Block::new(store, &format!("{name}.cross"), c, cfg.heads, Some(c), rng),
            blocks: (0..cfg.encoder_blocks)
                .map(|i| Block::new(store, &format!("{name}.block{i}"), c, cfg.heads, None, rng))
                .collect(),
            out: Linear::new(store, &format!("{name}.out"), c, cfg.latent_dim, rng),
            bands: cfg.fourier_bands,
        }
    }

    /// `L x D` tokens, each row normalized to zero mean and unit variance.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, points: &OrientedPointSet) -> Var {
        let feats = g.input(point_features(points, self.bands));
        let ctx = self.point_in.forward(g, store, feats);
        let q = g.param(store, self.queries);
        let mut h = self.cross.forward(g, store, q, Some(ctx));
        for b in &self.blocks {
            h = b.forward(g, store, h, None);
        }
        let z = self.out.forward(g, store, h);
        g.layer_norm_rows(z, LN_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct SdfDecoder {
    in_proj: Linear,
    blocks: Vec<Block>,
    query_in: Linear,
    ln_q: LayerNorm,
    ln_ctx: LayerNorm,
    attn: Attention,
    ln_out: LayerNorm,
    head: Mlp,
    bands: usize,
}

impl SdfDecoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &GeneratorConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.width;
        Self {
            in_proj: Linear::new(store, &format!("{name}.in"), cfg.latent_dim, c, rng),
            blocks: (0..cfg.decoder_blocks)
                .map(|i| Block::new(store, &format!("{name}.block{i}"), c, cfg.heads, None, rng))
                .collect(),
            query_in: Linear::new(store, &format!("{name}.query_in"), cfg.fourier_width(), c, rng),
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), c),
            ln_ctx: LayerNorm::new(store, &format!("{name}.ln_ctx"), c),
            attn: Attention::new(store, &format!("{name}.attn"), c, c, cfg.heads, rng),
            ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), c),
            head: Mlp::new(store, &format!("{name}.head"), &[c, c, 1], rng),
            bands: cfg.fourier_bands,
        }
    }

    /// Latent context shared by every query batch.
    pub fn context(&self, g: &mut Graph, store: &ParamStore, latents: Var) -> Var {
        let mut h = self.in_proj.forward(g, store, latents);
        for b in &self.blocks {
            h = b.forward(g, store, h, None);
        }
        self.ln_ctx.forward(g, store, h)
    }

    /// `Q x 1` signed distances at `queries` given a prepared context.
    pub fn query(&self, g: &mut Graph, store: &ParamStore, ctx: Var, queries: &[Vec3]) -> Var {
        let qf = g.input(query_features(queries, self.bands));
        let q = self.query_in.forward(g, store, qf);
        let qn = self.ln_q.forward(g, store, q);
        let a = self.attn.forward(g, store, qn, ctx);
        let h = g.add(q, a);
        let h = self.ln_out.forward(g, store, h);
        self.head.forward(g, store, h)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, latents: Var, queries: &[Vec3]) -> Var {
        let ctx = self.context(g, store, latents);
        self.query(g, store, ctx, queries)
    }
}

/// Queries decoded per graph when evaluating large grids.
const DECODE_CHUNK: usize = 4096;

#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub cfg: GeneratorConfig,
    pub store: ParamStore,
    pub encoder: ShapeEncoder,
    pub decoder: SdfDecoder,
    pub trained: bool,
}

impl Autoencoder {
    pub fn new(cfg: GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let encoder = ShapeEncoder::new(&mut store, "ae.enc", &cfg, rng);
        let decoder = SdfDecoder::new(&mut store, "ae.dec", &cfg, rng);
        Ok(Self {
            cfg,
            store,
            encoder,
            decoder,
            trained: false,
        })
    }

    fn ensure_trained(&self) -> Result<()> {
        if !self.trained {
            return Err(Error::Untrained("shape autoencoder".into()));
        }
        Ok(())
    }

    /// Encodes surface samples; deterministic and independent of point order.
    pub fn encode_shape(&self, points: &OrientedPointSet) -> Result<LatentTokens> {
        self.ensure_trained()?;
        self.encode_unchecked(points)
    }

    pub(crate) fn encode_unchecked(&self, points: &OrientedPointSet) -> Result<LatentTokens> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("cannot encode an empty point set".into()));
        }
        let mut g = Graph::new();
        let z = self.encoder.forward(&mut g, &self.store, points);
        LatentTokens::new(g.value(z).clone())
    }

    pub fn decode_sdf(&self, z: &LatentTokens, queries: &[Vec3]) -> Result<Vec<f64>> {
        self.ensure_trained()?;
        if z.shape() != (self.cfg.latent_tokens, self.cfg.latent_dim) {
            return Err(Error::ShapeMismatch(format!(
                "latents {:?}, decoder expects {}x{}",
                z.shape(),
                self.cfg.latent_tokens,
                self.cfg.latent_dim
            )));
        }
        let mut out = Vec::with_capacity(queries.len());
        let mut g = Graph::new();
        let zv = g.input(z.tokens.clone());
        let ctx = self.decoder.context(&mut g, &self.store, zv);
        let ctx_value = g.value(ctx).clone();
        for chunk in queries.chunks(DECODE_CHUNK) {
            let mut g = Graph::new();
            let c = g.input(ctx_value.clone());
            let s = self.decoder.query(&mut g, &self.store, c, chunk);
            out.extend_from_slice(&g.value(s).data);
        }
        Ok(out)
    }
}

//! Conditioning paths: patch image tokens, control-point embedding, and the
//! latent-augmented and point-guided per-view feature builders.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{project, CameraModel, ImageSize, PointMap, Vec3};
use crate::nn::{fourier_features, Block, Graph, LayerNorm, Linear, Mlp, ParamId, ParamStore, Tensor, Var};
use crate::recon::PatchLayout;

use super::{Conditioning, ControlPoints, GeneratorConfig};

/// Patch embedding producing `K x C` tokens per view.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    proj: Linear,
    pos: ParamId,
    layout: PatchLayout,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &GeneratorConfig, rng: &mut impl Rng) -> Self {
        let layout = PatchLayout {
            size: cfg.image,
            patch: cfg.patch,
        };
        Self {
            proj: Linear::new(store, &format!("{name}.proj"), layout.patch_pixels(), cfg.width, rng),
            pos: store.add_normal(format!("{name}.pos"), layout.tokens(), cfg.width, 0.1, rng),
            layout,
        }
    }

    pub fn layout(&self) -> PatchLayout {
        self.layout
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: &[f64]) -> Result<Var> {
        if image.len() != self.layout.size.pixels() {
            return Err(Error::ShapeMismatch(format!(
                "image has {} pixels, encoder expects {:?}",
                image.len(),
                self.layout.size
            )));
        }
        let x = g.input(self.layout.to_patches(image, 1));
        let h = self.proj.forward(g, store, x);
        let p = g.param(store, self.pos);
        Ok(g.add(h, p))
    }
}

/// Fourier features, a per-point MLP, then learned-query attention pooling
/// to `K_c` tokens.
#[derive(Debug, Clone)]
pub struct ControlEncoder {
    point_mlp: Mlp,
    queries: ParamId,
    pool: Block,
    ln: LayerNorm,
    bands: usize,
}

impl ControlEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &GeneratorConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.width;
        Self {
            point_mlp: Mlp::new(store, &format!("{name}.mlp"), &[cfg.fourier_width(), c, c], rng),
            queries: store.add_normal(format!("{name}.queries"), cfg.control_tokens, c, 0.5, rng),
            pool: Block::new(store, &format!("{name}.pool"), c, cfg.heads, Some(c), rng),
            ln: LayerNorm::new(store, &format!("{name}.ln"), c),
            bands: cfg.fourier_bands,
        }
    }

    /// `K_c x C` embedding `beta`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, pc: &ControlPoints) -> Result<Var> {
        if pc.is_empty() {
            return Err(Error::InvalidArgument("control point set is empty".into()));
        }
        let f = g.input(fourier_features(&pc.to_tensor(), self.bands));
        let per_point = self.point_mlp.forward(g, store, f);
        let q = g.param(store, self.queries);
        let h = self.pool.forward(g, store, q, Some(per_point));
        Ok(self.ln.forward(g, store, h))
    }
}

/// Per-patch geometry features of a canonical point map: `3 p^2` coordinates
/// followed by `p^2` validity flags.
pub fn geometry_patches(layout: &PatchLayout, map: &PointMap) -> Result<Tensor> {
    if map.size != layout.size {
        return Err(Error::ShapeMismatch(format!(
            "point map {:?}, layout {:?}",
            map.size, layout.size
        )));
    }
    let n = layout.size.pixels();
    let mut xyz = vec![0.0; 3 * n];
    let mut mask = vec![0.0; n];
    for i in 0..n {
        if map.confidence[i] > 0.0 {
            let p = map.points[i];
            xyz[3 * i..3 * i + 3].copy_from_slice(&[p.x, p.y, p.z]);
            mask[i] = 1.0;
        }
    }
    let a = layout.to_patches(&xyz, 3);
    let b = layout.to_patches(&mask, 1);
    let mut out = Tensor::zeros(a.rows, a.cols + b.cols);
    for r in 0..a.rows {
        let row = out.row_mut(r);
        row[..a.cols].copy_from_slice(a.row(r));
        row[a.cols..].copy_from_slice(b.row(r));
    }
    Ok(out)
}

/// `F^MV = F^D + proj_view(F^V) + broadcast(proj_cam(t_cam))`, both
/// projections zero-initialized.
#[derive(Debug, Clone)]
pub struct LatentAugmentedBuilder {
    pub proj_view: Linear,
    pub proj_cam: Linear,
}

impl LatentAugmentedBuilder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &GeneratorConfig) -> Self {
        let p2 = cfg.patch * cfg.patch;
        Self {
            proj_view: Linear::zeros(store, &format!("{name}.view"), 4 * p2, cfg.width),
            proj_cam: Linear::zeros(store, &format!("{name}.cam"), 9, cfg.width),
        }
    }
}

pub fn build_condition_latent_augmented(
    g: &mut Graph,
    store: &ParamStore,
    builder: &LatentAugmentedBuilder,
    image_tokens: &[Var],
    geometry_tokens: &[Tensor],
    camera_tokens: &[[f64; 9]],
) -> Result<Vec<Var>> {
    if image_tokens.len() != geometry_tokens.len() || image_tokens.len() != camera_tokens.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} image, {} geometry and {} camera token sets",
            image_tokens.len(),
            geometry_tokens.len(),
            camera_tokens.len()
        )));
    }
    let mut out = Vec::with_capacity(image_tokens.len());
    for ((&fd, fv), cam) in image_tokens.iter().zip(geometry_tokens).zip(camera_tokens) {
        if g.shape(fd).0 != fv.rows {
            return Err(Error::ShapeMismatch(format!(
                "{} image tokens, {} geometry tokens",
                g.shape(fd).0,
                fv.rows
            )));
        }
        let v = g.input(fv.clone());
        let v = builder.proj_view.forward(g, store, v);
        let c = g.input(Tensor::from_vec(1, 9, cam.to_vec()));
        let c = builder.proj_cam.forward(g, store, c);
        let h = g.add(fd, v);
        out.push(g.add(h, c));
    }
    Ok(out)
}

/// Where each control point lands on one view's token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSampling {
    /// Bilinear weights over token indices; empty when invalid.
    pub weights: Vec<Vec<(usize, f64)>>,
    pub valid: Vec<bool>,
}

impl PointSampling {
    pub fn compute(points: &[Vec3], cam: &CameraModel, layout: &PatchLayout) -> Self {
        let size: ImageSize = layout.size;
        let (gh, gw) = layout.grid();
        let p = layout.patch as f64;
        let mut weights = Vec::with_capacity(points.len());
        let mut valid = Vec::with_capacity(points.len());
        for pt in points {
            let hit = project(pt, cam, size)
                .ok()
                .filter(|([u, v], _)| (0.0..size.width as f64).contains(u) && (0.0..size.height as f64).contains(v));
            let Some(([u, v], _)) = hit else {
                weights.push(Vec::new());
                valid.push(false);
                continue;
            };
            let gx = (u / p - 0.5).clamp(0.0, (gw - 1) as f64);
            let gy = (v / p - 0.5).clamp(0.0, (gh - 1) as f64);
            let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(gw - 1), (y0 + 1).min(gh - 1));
            let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
            let mut w = Vec::with_capacity(4);
            for (r, c, wt) in [
                (y0, x0, (1.0 - fx) * (1.0 - fy)),
                (y0, x1, fx * (1.0 - fy)),
                (y1, x0, (1.0 - fx) * fy),
                (y1, x1, fx * fy),
            ] {
                if wt != 0.0 {
                    w.push((r * gw + c, wt));
                }
            }
            weights.push(w);
            valid.push(true);
        }
        Self { weights, valid }
    }
}

/// `F^MV = S(F^D, P^c) + MLP(PE(P^c), valid)`.
#[derive(Debug, Clone)]
pub struct PointGuidedBuilder {
    pub pe_mlp: Mlp,
    bands: usize,
}

impl PointGuidedBuilder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &GeneratorConfig, rng: &mut impl Rng) -> Self {
        Self {
            pe_mlp: Mlp::new(
                store,
                &format!("{name}.pe"),
                &[cfg.fourier_width() + 1, cfg.width, cfg.width],
                rng,
            ),
            bands: cfg.fourier_bands,
        }
    }
}

pub fn build_condition_point_guided(
    g: &mut Graph,
    store: &ParamStore,
    builder: &PointGuidedBuilder,
    layout: &PatchLayout,
    image_tokens: &[Var],
    pc: &ControlPoints,
    cams: &[CameraModel],
) -> Result<Vec<Var>> {
    if image_tokens.len() != cams.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} views, {} cameras",
            image_tokens.len(),
            cams.len()
        )));
    }
    let pe = fourier_features(&pc.to_tensor(), builder.bands);
    let mut out = Vec::with_capacity(cams.len());
    for (&fd, cam) in image_tokens.iter().zip(cams) {
        let s = PointSampling::compute(&pc.points, cam, layout);
        let mut feats = Tensor::zeros(pc.len(), pe.cols + 1);
        for i in 0..pc.len() {
            let row = feats.row_mut(i);
            row[..pe.cols].copy_from_slice(pe.row(i));
            row[pe.cols] = if s.valid[i] { 1.0 } else { 0.0 };
        }
        let sampled = g.sparse_rows(fd, s.weights);
        let f = g.input(feats);
        let m = builder.pe_mlp.forward(g, store, f);
        out.push(g.add(sampled, m));
    }
    Ok(out)
}

/// Per-view features plus the control embedding `beta`.
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    pub views: Vec<Var>,
    pub control: Var,
}

/// What a conditioning path needs about one object, all in the canonical frame.
#[derive(Debug, Clone)]
pub struct ConditionInputs {
    pub images: Vec<Vec<f64>>,
    pub cameras: Vec<CameraModel>,
    pub point_maps: Vec<PointMap>,
    pub control: ControlPoints,
}

impl ConditionInputs {
    pub fn validate(&self, cfg: &GeneratorConfig) -> Result<()> {
        let n = self.images.len();
        if n == 0 || n > cfg.max_views {
            return Err(Error::InvalidArgument(format!(
                "need 1..={} views, got {n}",
                cfg.max_views
            )));
        }
        if self.cameras.len() != n || self.point_maps.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{n} images, {} cameras, {} point maps",
                self.cameras.len(),
                self.point_maps.len()
            )));
        }
        Ok(())
    }
}

/// All conditioning parameters of the generator.
#[derive(Debug, Clone)]
pub struct Conditioner {
    pub image: ImageEncoder,
    pub control: ControlEncoder,
    pub latent_augmented: LatentAugmentedBuilder,
    pub point_guided: PointGuidedBuilder,
    view_emb: ParamId,
    ctrl_emb: ParamId,
    null: ParamId,
}

impl Conditioner {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &GeneratorConfig, rng: &mut impl Rng) -> Self {
        Self {
            image: ImageEncoder::new(store, &format!("{name}.image"), cfg, rng),
            control: ControlEncoder::new(store, &format!("{name}.control"), cfg, rng),
            latent_augmented: LatentAugmentedBuilder::new(store, &format!("{name}.la"), cfg),
            point_guided: PointGuidedBuilder::new(store, &format!("{name}.pg"), cfg, rng),
            view_emb: store.add_normal(format!("{name}.view_emb"), cfg.max_views, cfg.width, 0.1, rng),
            ctrl_emb: store.add_normal(format!("{name}.ctrl_emb"), 1, cfg.width, 0.1, rng),
            null: store.add_normal(format!("{name}.null"), 1, cfg.width, 0.1, rng),
        }
    }

    pub fn bundle(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cfg: &GeneratorConfig,
        conditioning: Conditioning,
        inputs: &ConditionInputs,
    ) -> Result<ConditionBundle> {
        inputs.validate(cfg)?;
        let layout = self.image.layout();
        let fd = inputs
            .images
            .iter()
            .map(|img| self.image.forward(g, store, img))
            .collect::<Result<Vec<_>>>()?;
        let views = match conditioning {
            Conditioning::LatentAugmented => {
                let fv = inputs
                    .point_maps
                    .iter()
                    .map(|m| geometry_patches(&layout, m))
                    .collect::<Result<Vec<_>>>()?;
                let cams: Vec<[f64; 9]> = inputs.cameras.iter().map(|c| c.to_vector9()).collect();
                build_condition_latent_augmented(g, store, &self.latent_augmented, &fd, &fv, &cams)?
            }
            Conditioning::PointGuided => build_condition_point_guided(
                g,
                store,
                &self.point_guided,
                &layout,
                &fd,
                &inputs.control,
                &inputs.cameras,
            )?,
        };
        let control = self.control.forward(g, store, &inputs.control)?;
        Ok(ConditionBundle { views, control })
    }

    /// `[view_1 + e_1, ..., view_N + e_N, beta + e_ctrl]` along the sequence axis.
    pub fn sequence(&self, g: &mut Graph, store: &ParamStore, bundle: &ConditionBundle) -> Var {
        let emb = g.param(store, self.view_emb);
        let mut parts = Vec::with_capacity(bundle.views.len() + 1);
        for (i, &v) in bundle.views.iter().enumerate() {
            let e = g.slice_rows(emb, i, 1);
            parts.push(g.add(v, e));
        }
        let e = g.param(store, self.ctrl_emb);
        parts.push(g.add(bundle.control, e));
        g.concat_rows(&parts)
    }

    /// Single learned token standing in for an absent condition.
    pub fn null_sequence(&self, g: &mut Graph, store: &ParamStore) -> Var {
        g.param(store, self.null)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::autoencoder::tests::tiny;
    use crate::geometry::Quat;
    use crate::nn::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, rng: &mut impl Rng) -> ControlPoints {
        let pts = (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.4..0.4),
                )
            })
            .collect();
        ControlPoints::new(pts, None).unwrap()
    }

    fn camera() -> CameraModel {
        CameraModel::look_at(
            &Vec3::new(0.0, 0.0, -2.0),
            &Vec3::zeros(),
            &Vec3::new(0.0, 1.0, 0.0),
            [0.8, 0.8],
        )
        .unwrap()
    }

    #[test]
    fn control_embedding_ignores_duplicates_and_count() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = ControlEncoder::new(&mut store, "c", &cfg, &mut rng);
        let pc = cloud(7, &mut rng);
        let mut doubled = pc.points.clone();
        doubled.extend(pc.points.iter().copied());
        let run = |pc: &ControlPoints| {
            let mut g = Graph::new();
            let v = enc.forward(&mut g, &store, pc).unwrap();
            g.value(v).clone()
        };
        let a = run(&pc);
        let b = run(&ControlPoints::new(doubled, None).unwrap());
        assert_eq!(a.shape(), (cfg.control_tokens, cfg.width));
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() < 1e-5));
        assert_eq!(run(&cloud(30, &mut rng)).shape(), a.shape());
        assert!(ControlPoints::new(Vec::new(), None).is_err());
    }

    #[test]
    fn control_encoder_gradients() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = ControlEncoder::new(&mut store, "c", &cfg, &mut rng);
        assert!(store.count() <= 1000);
        let pc = cloud(5, &mut rng);
        let w = Tensor::randn(cfg.control_tokens, cfg.width, 1.0, &mut rng);
        let r = gradcheck(&mut store, |g, st| {
            let b = enc.forward(g, st, &pc).unwrap();
            let wv = g.input(w.clone());
            let p = g.mul(b, wv);
            g.sum(p)
        });
        assert!(r.relative_error < 1e-3, "{r:?}");
    }

    #[test]
    fn zero_projections_leave_image_tokens_unchanged() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let b = LatentAugmentedBuilder::new(&mut store, "la", &cfg);
        let k = 4;
        let fd = Tensor::randn(k, cfg.width, 1.0, &mut rng);
        let fv = Tensor::randn(k, 4 * cfg.patch * cfg.patch, 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.input(fd.clone());
        let out =
            build_condition_latent_augmented(&mut g, &store, &b, &[x], std::slice::from_ref(&fv), &[[0.5; 9]]).unwrap();
        assert_eq!(g.value(out[0]), &fd);
        let bad = Tensor::zeros(k + 1, fv.cols);
        assert!(build_condition_latent_augmented(&mut g, &store, &b, &[x], &[bad], &[[0.0; 9]]).is_err());

        // Camera term is constant over the tokens of a view.
        store
            .value_mut(b.proj_cam.w)
            .data
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = 0.01 * i as f64);
        let mut g = Graph::new();
        let z = g.input(Tensor::zeros(k, cfg.width));
        let out = build_condition_latent_augmented(&mut g, &store, &b, &[z], &[Tensor::zeros(k, fv.cols)], &[[0.3; 9]])
            .unwrap();
        let v = g.value(out[0]);
        assert!(v.data.iter().any(|x| *x != 0.0));
        for r in 1..k {
            assert_eq!(v.row(r), v.row(0));
        }
    }

    #[test]
    fn latent_augmented_gradients_reach_both_projections() {
        let mut cfg = tiny();
        cfg.patch = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let b = LatentAugmentedBuilder::new(&mut store, "la", &cfg);
        let fd = Tensor::randn(3, cfg.width, 1.0, &mut rng);
        let fv = Tensor::randn(3, 16, 1.0, &mut rng);
        let cam = [0.9, 0.1, -0.2, 0.3, 0.4, 0.5, -0.6, 0.8, 0.7];
        let w = Tensor::randn(3, cfg.width, 1.0, &mut rng);
        let loss = |g: &mut Graph, st: &ParamStore| {
            let x = g.input(fd.clone());
            let out = build_condition_latent_augmented(g, st, &b, &[x], std::slice::from_ref(&fv), &[cam]).unwrap();
            let wv = g.input(w.clone());
            let p = g.mul(out[0], wv);
            let p = g.tanh(p);
            g.sum(p)
        };
        let r = gradcheck(&mut store, loss);
        assert!(r.relative_error < 1e-3, "{r:?}");
        let mut g = Graph::new();
        let l = loss(&mut g, &store);
        g.backward(l);
        let mut grads = crate::nn::Grads::zeros_like(&store);
        g.accumulate_param_grads(&mut grads);
        assert!(grads.get(b.proj_view.w).norm_squared() > 0.0);
        assert!(grads.get(b.proj_cam.w).norm_squared() > 0.0);
    }

    #[test]
    fn bilinear_sampling_hits_token_centers_and_flags_misses() {
        let cfg = tiny();
        let layout = PatchLayout {
            size: cfg.image,
            patch: cfg.patch,
        };
        let cam = camera();
        let size = cfg.image;
        // Pixel (u, v) = (6, 2) is the center of token (row 0, col 1).
        let ray = cam.pixel_ray(6.0, 2.0, size);
        let on_center = cam.camera_to_world(&(ray * (1.5 / ray.z)));
        let behind = Vec3::new(0.0, 0.0, -3.0);
        let s = PointSampling::compute(&[on_center, behind], &cam, &layout);
        assert_eq!(s.valid, vec![true, false]);
        assert_eq!(s.weights[0].len(), 1);
        assert_eq!(s.weights[0][0].0, 1);
        assert!((s.weights[0][0].1 - 1.0).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let b = PointGuidedBuilder::new(&mut store, "pg", &cfg, &mut rng);
        let fd = Tensor::randn(layout.tokens(), cfg.width, 1.0, &mut rng);
        let pc = ControlPoints::new(vec![on_center, behind, Vec3::zeros()], None).unwrap();
        let mut g = Graph::new();
        let x = g.input(fd.clone());
        let out = build_condition_point_guided(&mut g, &store, &b, &layout, &[x], &pc, &[cam]).unwrap();
        assert_eq!(g.shape(out[0]), (3, cfg.width));
        // Subtracting the positional term isolates the sampled features.
        let mut g2 = Graph::new();
        let z = g2.input(Tensor::zeros(layout.tokens(), cfg.width));
        let pe_only = build_condition_point_guided(&mut g2, &store, &b, &layout, &[z], &pc, &[cam]).unwrap();
        let full = g.value(out[0]);
        let pe = g2.value(pe_only[0]);
        for c in 0..cfg.width {
            assert!((full.get(0, c) - pe.get(0, c) - fd.get(1, c)).abs() < 1e-9);
            assert_eq!(full.get(1, c), pe.get(1, c));
        }
    }

    #[test]
    fn point_guided_gradients() {
        let cfg = tiny();
        let layout = PatchLayout {
            size: cfg.image,
            patch: cfg.patch,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let b = PointGuidedBuilder::new(&mut store, "pg", &cfg, &mut rng);
        let img = ImageEncoder::new(&mut store, "img", &cfg, &mut rng);
        assert!(store.count() <= 1000, "{}", store.count());
        let image: Vec<f64> = (0..cfg.image.pixels()).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let pc = cloud(6, &mut rng);
        let cam = CameraModel::new(Quat::identity(), Vec3::new(0.05, -0.02, 2.0), [0.9, 0.9]).unwrap();
        let w = Tensor::randn(6, cfg.width, 1.0, &mut rng);
        let r = gradcheck(&mut store, |g, st| {
            let fd = img.forward(g, st, &image).unwrap();
            let out = build_condition_point_guided(g, st, &b, &layout, &[fd], &pc, &[cam]).unwrap();
            let wv = g.input(w.clone());
            let p = g.mul(out[0], wv);
            g.sum(p)
        });
        assert!(r.relative_error < 1e-3, "{r:?}");
    }
}

//! Patch encoder, alternating frame/global attention trunk and prediction heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, DepthMap, ImageSize, PointMap, Vec3};
use crate::nn::{Block, Graph, LayerNorm, Linear, Mlp, ParamId, ParamStore, Tensor, Var};

use super::Strategy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    pub image: ImageSize,
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    /// Number of (frame, global) attention block pairs.
    pub depth: usize,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            image: ImageSize::new(64, 64),
            patch: 8,
            width: 128,
            heads: 4,
            depth: 2,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0
            || !self.image.height.is_multiple_of(self.patch)
            || !self.image.width.is_multiple_of(self.patch)
            || self.image.pixels() == 0
        {
            return Err(Error::InvalidArgument(format!(
                "image {:?} is not tiled by {}-pixel patches",
                self.image, self.patch
            )));
        }
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) || self.depth == 0 {
            return Err(Error::InvalidArgument(
                "width must be a positive multiple of heads and depth >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn layout(&self) -> PatchLayout {
        PatchLayout {
            size: self.image,
            patch: self.patch,
        }
    }
}

/// Maps between row-major images and `tokens x (patch^2 * channels)` tensors.
/// Within a patch, pixels are row-major and channels are innermost.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchLayout {
    pub size: ImageSize,
    pub patch: usize,
}

impl PatchLayout {
    pub fn grid(&self) -> (usize, usize) {
        (self.size.height / self.patch, self.size.width / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch * self.patch
    }

    /// Pixel index of slot `j` of token `k`.
    pub fn pixel(&self, k: usize, j: usize) -> usize {
        let (_, gc) = self.grid();
        let (tr, tc) = (k / gc, k % gc);
        let (pr, pc) = (j / self.patch, j % self.patch);
        (tr * self.patch + pr) * self.size.width + tc * self.patch + pc
    }

    /// Token index and slot of a pixel.
    pub fn token_of(&self, pixel: usize) -> (usize, usize) {
        let (row, col) = (pixel / self.size.width, pixel % self.size.width);
        let (_, gc) = self.grid();
        let k = (row / self.patch) * gc + col / self.patch;
        (k, (row % self.patch) * self.patch + col % self.patch)
    }

    pub fn to_patches(&self, values: &[f64], channels: usize) -> Tensor {
        let pp = self.patch_pixels();
        let mut t = Tensor::zeros(self.tokens(), pp * channels);
        for k in 0..self.tokens() {
            for j in 0..pp {
                let px = self.pixel(k, j);
                for c in 0..channels {
                    t.data[k * pp * channels + j * channels + c] = values[px * channels + c];
                }
            }
        }
        t
    }

    pub fn from_patches(&self, t: &Tensor, channels: usize) -> Vec<f64> {
        let pp = self.patch_pixels();
        let mut out = vec![0.0; self.size.pixels() * channels];
        for k in 0..self.tokens() {
            for j in 0..pp {
                let px = self.pixel(k, j);
                for c in 0..channels {
                    out[px * channels + c] = t.data[k * pp * channels + j * channels + c];
                }
            }
        }
        out
    }
}

/// Graph handles for one forward pass. Dense heads use the patch layout.
#[derive(Debug, Clone)]
pub struct HeadVars {
    /// Per view, `1 x 9`.
    pub cameras: Vec<Var>,
    /// Per view, `K x p^2`.
    pub depth: Vec<Var>,
    /// Per view, `K x p^2` raw confidence logits.
    pub depth_conf: Vec<Var>,
    /// Per view, `K x 3p^2`.
    pub points: Vec<Var>,
    pub point_conf: Vec<Var>,
    /// Refined camera tokens, `1 x C` each.
    pub camera_tokens: Vec<Var>,
    /// `1 x 7` Sim(3) log-parameters when the transform head exists.
    pub transform: Option<Var>,
}

/// Confidence from a raw logit: `1 + exp(raw)`.
pub fn confidence_from_raw(raw: f64) -> f64 {
    1.0 + raw.exp()
}

#[derive(Debug, Clone)]
pub struct ReconModel {
    pub cfg: ReconConfig,
    pub strategy: Strategy,
    pub store: ParamStore,
    patch_embed: Linear,
    pos: ParamId,
    cam_first: ParamId,
    cam_other: ParamId,
    frame_blocks: Vec<Block>,
    global_blocks: Vec<Block>,
    ln_out: LayerNorm,
    cam_head: Mlp,
    depth_head: Linear,
    point_head: Linear,
    transform: Option<(ParamId, Mlp)>,
}

impl ReconModel {
    /// Fresh model; the transform token and head exist only for the
    /// explicit-transform strategy.
    pub fn new(cfg: ReconConfig, strategy: Strategy, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = cfg.width;
        let layout = cfg.layout();
        let pp = layout.patch_pixels();
        let patch_embed = Linear::new(&mut store, "embed", pp, c, &mut rng);
        let pos = store.add_normal("pos", layout.tokens(), c, 0.02, &mut rng);
        let cam_first = store.add_normal("cam_token.first", 1, c, 0.02, &mut rng);
        let cam_other = store.add_normal("cam_token.other", 1, c, 0.02, &mut rng);
        let mut frame_blocks = Vec::new();
        let mut global_blocks = Vec::new();
        for i in 0..cfg.depth {
            frame_blocks.push(Block::new(
                &mut store,
                &format!("frame{i}"),
                c,
                cfg.heads,
                None,
                &mut rng,
            ));
            global_blocks.push(Block::new(
                &mut store,
                &format!("global{i}"),
                c,
                cfg.heads,
                None,
                &mut rng,
            ));
        }
        let ln_out = LayerNorm::new(&mut store, "ln_out", c);
        let cam_head = Mlp::new(&mut store, "head.camera", &[c, c, 9], &mut rng);
        // Start near an identity camera with a typical field of view.
        let bias = cam_head.layers[1].b.expect("mlp layers carry biases");
        store
            .value_mut(bias)
            .data
            .copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.85, 0.85]);
        let depth_head = Linear::new(&mut store, "head.depth", c, 2 * pp, &mut rng);
        let point_head = Linear::new(&mut store, "head.points", c, 4 * pp, &mut rng);
        let transform = (strategy == Strategy::ExplicitTransform).then(|| {
            let token = store.add_normal("transform_token", 1, c, 0.02, &mut rng);
            (token, Mlp::new(&mut store, "head.transform", &[c, c, 7], &mut rng))
        });
        Ok(Self {
            cfg,
            strategy,
            store,
            patch_embed,
            pos,
            cam_first,
            cam_other,
            frame_blocks,
            global_blocks,
            ln_out,
            cam_head,
            depth_head,
            point_head,
            transform,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.store.count()
    }

    pub fn has_transform_head(&self) -> bool {
        self.transform.is_some()
    }

    /// Builds the forward pass over per-view intensity images.
    pub fn forward_graph(&self, g: &mut Graph, images: &[&[f64]]) -> Result<HeadVars> {
        self.forward_graph_with(g, images, &self.store)
    }

    /// Like [`ReconModel::forward_graph`] but reads parameters from `store`,
    /// which must share this model's layout.
    pub fn forward_graph_with(&self, g: &mut Graph, images: &[&[f64]], store: &ParamStore) -> Result<HeadVars> {
        let layout = self.cfg.layout();
        if images.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 views, got {}",
                images.len()
            )));
        }
        if let Some(bad) = images.iter().find(|im| im.len() != self.cfg.image.pixels()) {
            return Err(Error::ShapeMismatch(format!(
                "view has {} pixels, model expects {:?}",
                bad.len(),
                self.cfg.image
            )));
        }
        let k = layout.tokens();
        let pos = g.param(store, self.pos);
        let mut seqs = Vec::with_capacity(images.len());
        for (v, img) in images.iter().enumerate() {
            let patches = g.input(layout.to_patches(img, 1));
            let x = self.patch_embed.forward(g, store, patches);
            let x = g.add(x, pos);
            let cam = g.param(store, if v == 0 { self.cam_first } else { self.cam_other });
            let mut parts = vec![cam, x];
            if v == 0 {
                if let Some((tok, _)) = &self.transform {
                    parts.push(g.param(store, *tok));
                }
            }
            seqs.push(g.concat_rows(&parts));
        }
        for (fb, gb) in self.frame_blocks.iter().zip(&self.global_blocks) {
            for s in seqs.iter_mut() {
                *s = fb.forward(g, store, *s, None);
            }
            let all = g.concat_rows(&seqs);
            let all = gb.forward(g, store, all, None);
            let mut start = 0;
            for s in seqs.iter_mut() {
                let len = g.shape(*s).0;
                *s = g.slice_rows(all, start, len);
                start += len;
            }
        }
        let pp = layout.patch_pixels();
        let mut out = HeadVars {
            cameras: Vec::new(),
            depth: Vec::new(),
            depth_conf: Vec::new(),
            points: Vec::new(),
            point_conf: Vec::new(),
            camera_tokens: Vec::new(),
            transform: None,
        };
        for (v, s) in seqs.iter().enumerate() {
            let h = self.ln_out.forward(g, store, *s);
            let cam_tok = g.slice_rows(h, 0, 1);
            out.cameras.push(self.cam_head.forward(g, store, cam_tok));
            out.camera_tokens.push(cam_tok);
            let patches = g.slice_rows(h, 1, k);
            let d = self.depth_head.forward(g, store, patches);
            out.depth.push(g.slice_cols(d, 0, pp));
            out.depth_conf.push(g.slice_cols(d, pp, pp));
            let p = self.point_head.forward(g, store, patches);
            out.points.push(g.slice_cols(p, 0, 3 * pp));
            out.point_conf.push(g.slice_cols(p, 3 * pp, pp));
            if v == 0 {
                if let Some((_, head)) = &self.transform {
                    let tok = g.slice_rows(h, 1 + k, 1);
                    out.transform = Some(head.forward(g, store, tok));
                }
            }
        }
        Ok(out)
    }

    /// Runs the network on a set of images. Foreground is where the input
    /// intensity is positive; background pixels come back invalid.
    pub fn forward(&self, images: &[&[f64]]) -> Result<ReconPrediction> {
        let mut g = Graph::new();
        let heads = self.forward_graph(&mut g, images)?;
        let layout = self.cfg.layout();
        let size = self.cfg.image;
        let mut pred = ReconPrediction {
            strategy: self.strategy,
            cameras: Vec::new(),
            depths: Vec::new(),
            points: Vec::new(),
            camera_tokens: Vec::new(),
            transform: None,
        };
        for (v, img) in images.iter().enumerate() {
            let cam = g.value(heads.cameras[v]).data.clone();
            pred.cameras.push(cam.try_into().expect("camera head emits 9 values"));
            pred.camera_tokens.push(g.value(heads.camera_tokens[v]).data.clone());
            let valid: Vec<bool> = img.iter().map(|&x| x > 0.0).collect();
            let depth = layout.from_patches(g.value(heads.depth[v]), 1);
            let dconf = layout.from_patches(g.value(heads.depth_conf[v]), 1);
            let mut values = vec![0.0; size.pixels()];
            let mut conf = vec![0.0; size.pixels()];
            for i in 0..size.pixels() {
                if valid[i] {
                    values[i] = depth[i].max(1e-6);
                    conf[i] = confidence_from_raw(dconf[i]);
                }
            }
            pred.depths.push(DepthMap::new(size, values, valid.clone(), conf)?);
            let pts = layout.from_patches(g.value(heads.points[v]), 3);
            let pconf = layout.from_patches(g.value(heads.point_conf[v]), 1);
            let points = (0..size.pixels())
                .map(|i| {
                    if valid[i] {
                        Vec3::new(pts[3 * i], pts[3 * i + 1], pts[3 * i + 2])
                    } else {
                        Vec3::zeros()
                    }
                })
                .collect();
            let pc = (0..size.pixels())
                .map(|i| if valid[i] { confidence_from_raw(pconf[i]) } else { 0.0 })
                .collect();
            pred.points.push(PointMap::new(size, points, pc)?);
        }
        if let Some(t) = heads.transform {
            pred.transform = Some(
                g.value(t)
                    .data
                    .clone()
                    .try_into()
                    .expect("transform head emits 7 values"),
            );
        }
        Ok(pred)
    }
}

/// Per-view network outputs in the frames dictated by the strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconPrediction {
    pub strategy: Strategy,
    pub cameras: Vec<[f64; 9]>,
    pub depths: Vec<DepthMap>,
    pub points: Vec<PointMap>,
    pub camera_tokens: Vec<Vec<f64>>,
    pub transform: Option<[f64; 7]>,
}

impl ReconPrediction {
    pub fn camera_models(&self) -> Result<Vec<CameraModel>> {
        self.cameras.iter().map(CameraModel::from_vector9).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ReconConfig {
        ReconConfig {
            image: ImageSize::new(16, 16),
            patch: 8,
            width: 8,
            heads: 2,
            depth: 1,
        }
    }

    fn images(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Tensor::uniform(1, 256, 1.0, &mut rng)
                    .data
                    .iter()
                    .map(|v| v.abs())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn layout_round_trips() {
        let l = PatchLayout {
            size: ImageSize::new(16, 24),
            patch: 8,
        };
        let vals: Vec<f64> = (0..16 * 24 * 3).map(|i| i as f64).collect();
        let t = l.to_patches(&vals, 3);
        assert_eq!(t.shape(), (6, 192));
        assert_eq!(l.from_patches(&t, 3), vals);
        for px in 0..16 * 24 {
            let (k, j) = l.token_of(px);
            assert_eq!(l.pixel(k, j), px);
        }
    }

    #[test]
    fn output_shapes() {
        let m = ReconModel::new(tiny(), Strategy::BranchRepurposing, 0).unwrap();
        let ims = images(3, 1);
        let refs: Vec<&[f64]> = ims.iter().map(|v| v.as_slice()).collect();
        let p = m.forward(&refs).unwrap();
        assert_eq!(p.cameras.len(), 3);
        assert_eq!(p.depths[2].values.len(), 256);
        assert_eq!(p.points[1].points.len(), 256);
        assert!(p.transform.is_none());
        let e = ReconModel::new(tiny(), Strategy::ExplicitTransform, 0).unwrap();
        assert!(e.forward(&refs).unwrap().transform.is_some());
        assert!(m.forward(&refs[..1]).is_err());
        assert!(m.forward(&[&refs[0][..100], refs[1]]).is_err());
    }

    #[test]
    fn duplicated_views_agree_and_later_views_permute() {
        let m = ReconModel::new(tiny(), Strategy::BranchRepurposing, 3).unwrap();
        let ims = images(3, 2);
        let p = m.forward(&[&ims[0], &ims[1], &ims[1]]).unwrap();
        assert_eq!(p.cameras[1], p.cameras[2]);
        assert_eq!(p.depths[1], p.depths[2]);
        let a = m.forward(&[&ims[0], &ims[1], &ims[2]]).unwrap();
        let b = m.forward(&[&ims[0], &ims[2], &ims[1]]).unwrap();
        for (x, y) in a.cameras[1].iter().zip(&b.cameras[2]) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.cameras[0].iter().zip(&b.cameras[0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn outputs_respond_to_inputs() {
        let m = ReconModel::new(tiny(), Strategy::DirectSupervision, 4).unwrap();
        let ims = images(2, 5);
        let base = m.forward(&[&ims[0], &ims[1]]).unwrap();
        let mut bumped = ims[1].clone();
        bumped[37] += 1e-4;
        let moved = m.forward(&[&ims[0], &bumped]).unwrap();
        let dcam: f64 = base.cameras[0]
            .iter()
            .zip(&moved.cameras[0])
            .map(|(a, b)| (a - b).abs())
            .sum();
        let dpt: f64 = base.points[1]
            .points
            .iter()
            .zip(&moved.points[1].points)
            .map(|(a, b)| (a - b).norm())
            .sum();
        assert!(dcam > 0.0 && dcam.is_finite());
        assert!(dpt > 0.0 && dpt.is_finite());
    }
}

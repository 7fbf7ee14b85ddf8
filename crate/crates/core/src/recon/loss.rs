//! Frame-tagged ground truth and the confidence-weighted multi-task loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{unproject_indexed, CameraModel, Sim3Transform};
use crate::nn::{Graph, Tensor, Var};
use crate::world::{reference_frame, ViewSet};

use super::model::{HeadVars, PatchLayout};
use super::Strategy;

/// Coordinate frame a quantity is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    /// First camera, normalized by the mean scene depth.
    Reference,
    Canonical,
}

/// Frames of the camera, depth and point heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadFrames {
    pub camera: Frame,
    pub depth: Frame,
    pub points: Frame,
}

impl Strategy {
    pub fn head_frames(self) -> HeadFrames {
        use Frame::*;
        match self {
            Strategy::DirectSupervision => HeadFrames {
                camera: Canonical,
                depth: Canonical,
                points: Canonical,
            },
            Strategy::ExplicitTransform => HeadFrames {
                camera: Reference,
                depth: Reference,
                points: Reference,
            },
            Strategy::BranchRepurposing => HeadFrames {
                camera: Reference,
                depth: Reference,
                points: Canonical,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewTargets {
    pub camera: [f64; 9],
    /// `K x p^2`.
    pub depth: Tensor,
    /// `K x 3p^2`.
    pub points: Tensor,
    /// Canonical points for the explicit-transform consistency term.
    pub canonical_points: Tensor,
    /// `K x p^2`, one on valid pixels.
    pub mask: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconTargets {
    pub frames: HeadFrames,
    pub views: Vec<ViewTargets>,
    /// Ground-truth reference-to-canonical map as log-parameters.
    pub transform: [f64; 7],
    pub valid_pixels: usize,
}

/// Quaternion sign fixed to `w >= 0` so targets are unique.
pub fn camera_target(cam: &CameraModel) -> [f64; 9] {
    let mut v = cam.to_vector9();
    if v[0] < 0.0 {
        for q in &mut v[..4] {
            *q = -*q;
        }
    }
    v
}

impl ReconTargets {
    /// Ground truth for `views` (world frame = canonical frame) in the frames
    /// `frames` asks for.
    pub fn build(views: &ViewSet, layout: PatchLayout, frames: HeadFrames) -> Result<Self> {
        views.validate()?;
        if views.size != layout.size {
            return Err(Error::ShapeMismatch(format!(
                "views {:?} vs layout {:?}",
                views.size, layout.size
            )));
        }
        let ref_from_world = reference_frame(views)?;
        let canonical = Sim3Transform::identity();
        let pick = |f: Frame| {
            if f == Frame::Reference {
                ref_from_world
            } else {
                canonical
            }
        };
        let (cam_g, depth_g, point_g) = (pick(frames.camera), pick(frames.depth), pick(frames.points));
        let n = layout.size.pixels();
        let mut out = Vec::with_capacity(views.len());
        let mut valid_pixels = 0;
        for (cam, depth) in views.cameras.iter().zip(&views.depths) {
            let mut d = vec![0.0; n];
            let mut p = vec![0.0; 3 * n];
            let mut c = vec![0.0; 3 * n];
            let mut m = vec![0.0; n];
            for (i, world) in unproject_indexed(depth, cam)? {
                d[i] = depth.values[i] * depth_g.scale();
                let q = point_g.apply(&world);
                p[3 * i..3 * i + 3].copy_from_slice(q.as_slice());
                c[3 * i..3 * i + 3].copy_from_slice(world.as_slice());
                m[i] = 1.0;
                valid_pixels += 1;
            }
            out.push(ViewTargets {
                camera: camera_target(&cam.transformed(&cam_g)),
                depth: layout.to_patches(&d, 1),
                points: layout.to_patches(&p, 3),
                canonical_points: layout.to_patches(&c, 3),
                mask: layout.to_patches(&m, 1),
            });
        }
        Ok(Self {
            frames,
            views: out,
            transform: ref_from_world.inverse().to_log7(),
            valid_pixels,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub camera: f64,
    pub depth: f64,
    pub points: f64,
    pub transform: f64,
    /// Weight of the transformed point map consistency term (explicit only).
    pub consistency: f64,
    /// Confidence regularizer `alpha` in `c|e| - alpha log c`.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            camera: 1.0,
            depth: 1.0,
            points: 1.0,
            transform: 1.0,
            consistency: 1.0,
            alpha: 0.2,
        }
    }
}

/// Loss graph handles; `total` is the training objective.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub camera: Var,
    pub depth: Var,
    pub points: Var,
    pub transform: Option<Var>,
    pub consistency: Option<Var>,
}

/// Scalar values of each term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub camera: f64,
    pub depth: f64,
    pub points: f64,
    pub transform: Option<f64>,
    pub consistency: Option<f64>,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossTerms {
        LossTerms {
            total: g.value(self.total).item(),
            camera: g.value(self.camera).item(),
            depth: g.value(self.depth).item(),
            points: g.value(self.points).item(),
            transform: self.transform.map(|v| g.value(v).item()),
            consistency: self.consistency.map(|v| g.value(v).item()),
        }
    }
}

/// `sum(mask * (c * err - alpha * log c)) / count` with `c = 1 + exp(raw)`.
///
/// For a fixed error `e > 0` the per-pixel term is bounded below by
/// `alpha * (1 + ln(e / alpha))` (attained at `c = alpha / e`), so adding that
/// offset makes it non-negative; it is monotone in `e` for every `c`.
fn confidence_weighted(g: &mut Graph, err: Var, raw_conf: Var, mask: Var, alpha: f64) -> Var {
    let e = g.exp(raw_conf);
    let c = g.add_scalar(e, 1.0);
    let ce = g.mul(c, err);
    let logc = g.log(c);
    let reg = g.scale(logc, alpha);
    let term = g.sub(ce, reg);
    let masked = g.mul(term, mask);
    g.sum(masked)
}

/// Sums consecutive coordinate triples: `K x 3p^2 -> K x p^2`.
fn triple_sum(g: &mut Graph, x: Var) -> Var {
    let (k, w) = g.shape(x);
    let r = g.reshape(x, k * w / 3, 3);
    let ones = g.constant(3, 1, 1.0);
    let s = g.matmul(r, ones);
    g.reshape(s, k, w / 3)
}

/// Rotation matrix from a `1 x 3` rotation vector (Rodrigues).
pub fn rotation_from_vector(g: &mut Graph, w: Var) -> Var {
    let sq = g.square(w);
    let th2 = g.sum(sq);
    let th2 = g.add_scalar(th2, 1e-12);
    let th = g.sqrt(th2);
    let sin = g.unary(th, crate::nn::Unary::Sin);
    let a = g.div(sin, th);
    let cos = g.unary(th, crate::nn::Unary::Cos);
    let one_minus = g.scale(cos, -1.0);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let b = g.div(one_minus, th2);
    let wt = g.transpose(w);
    let k = g.sparse_rows(
        wt,
        vec![
            vec![],
            vec![(2, -1.0)],
            vec![(1, 1.0)],
            vec![(2, 1.0)],
            vec![],
            vec![(0, -1.0)],
            vec![(1, -1.0)],
            vec![(0, 1.0)],
            vec![],
        ],
    );
    let k = g.reshape(k, 3, 3);
    let k2 = g.matmul(k, k);
    let ak = g.mul(k, a);
    let bk2 = g.mul(k2, b);
    let eye = g.input(Tensor::from_vec(
        3,
        3,
        vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
    ));
    let r = g.add(eye, ak);
    g.add(r, bk2)
}

/// Applies `1 x 7` log-parameters to `n x 3` points.
pub fn apply_log7(g: &mut Graph, log7: Var, points: Var) -> Var {
    let w = g.slice_cols(log7, 0, 3);
    let t = g.slice_cols(log7, 3, 3);
    let ls = g.slice_cols(log7, 6, 1);
    let s = g.exp(ls);
    let r = rotation_from_vector(g, w);
    let rotated = g.matmul_t(points, r);
    let scaled = g.mul(rotated, s);
    g.add(scaled, t)
}

/// Multi-task loss. The frames carried by `gt` must be the ones `strategy`
/// supervises.
pub fn recon_loss(
    g: &mut Graph,
    pred: &HeadVars,
    gt: &ReconTargets,
    strategy: Strategy,
    w: &LossWeights,
) -> Result<LossVars> {
    let expected = strategy.head_frames();
    if gt.frames != expected {
        return Err(Error::FrameMismatch(format!(
            "{strategy:?} supervises {expected:?}, ground truth is in {:?}",
            gt.frames
        )));
    }
    if pred.cameras.len() != gt.views.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted views vs {} targets",
            pred.cameras.len(),
            gt.views.len()
        )));
    }
    if gt.valid_pixels == 0 {
        return Err(Error::Degenerate("no valid pixels in the targets".into()));
    }
    let n_views = gt.views.len() as f64;
    let count = gt.valid_pixels as f64;
    let mut cams = Vec::new();
    let mut depths = Vec::new();
    let mut points = Vec::new();
    let mut consist = Vec::new();
    for (v, t) in gt.views.iter().enumerate() {
        let cam_gt = g.input(Tensor::from_vec(1, 9, t.camera.to_vec()));
        let diff = g.sub(pred.cameras[v], cam_gt);
        let abs = g.abs(diff);
        cams.push(g.sum(abs));

        let mask = g.input(t.mask.clone());
        let d_gt = g.input(t.depth.clone());
        let diff = g.sub(pred.depth[v], d_gt);
        let err = g.abs(diff);
        depths.push(confidence_weighted(g, err, pred.depth_conf[v], mask, w.alpha));

        let p_gt = g.input(t.points.clone());
        let diff = g.sub(pred.points[v], p_gt);
        let abs = g.abs(diff);
        let err = triple_sum(g, abs);
        points.push(confidence_weighted(g, err, pred.point_conf[v], mask, w.alpha));

        if let (Some(tf), Strategy::ExplicitTransform) = (pred.transform, strategy) {
            let (k, cols) = g.shape(pred.points[v]);
            let flat = g.reshape(pred.points[v], k * cols / 3, 3);
            let moved = apply_log7(g, tf, flat);
            let moved = g.reshape(moved, k, cols);
            let c_gt = g.input(t.canonical_points.clone());
            let diff = g.sub(moved, c_gt);
            let abs = g.abs(diff);
            let err = triple_sum(g, abs);
            let masked = g.mul(err, mask);
            consist.push(g.sum(masked));
        }
    }
    let sum_all = |g: &mut Graph, xs: &[Var], denom: f64| {
        let s = if xs.len() == 1 { xs[0] } else { g.concat_rows(xs) };
        let s = g.sum(s);
        g.scale(s, 1.0 / denom)
    };
    let camera = sum_all(g, &cams, n_views);
    let depth = sum_all(g, &depths, count);
    let points_term = sum_all(g, &points, count);
    let mut parts = vec![
        g.scale(camera, w.camera),
        g.scale(depth, w.depth),
        g.scale(points_term, w.points),
    ];
    let mut transform = None;
    let mut consistency = None;
    if strategy == Strategy::ExplicitTransform {
        let tf = pred
            .transform
            .ok_or_else(|| Error::InvalidArgument("explicit-transform loss needs the transform head".into()))?;
        let tgt = g.input(Tensor::from_vec(1, 7, gt.transform.to_vec()));
        let diff = g.sub(tf, tgt);
        let abs = g.abs(diff);
        let t = g.sum(abs);
        let c = sum_all(g, &consist, count);
        parts.push(g.scale(t, w.transform));
        parts.push(g.scale(c, w.consistency));
        transform = Some(t);
        consistency = Some(c);
    }
    let stacked = g.concat_rows(&parts);
    let total = g.sum(stacked);
    Ok(LossVars {
        total,
        camera,
        depth,
        points: points_term,
        transform,
        consistency,
    })
}

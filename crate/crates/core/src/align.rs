//! Weighted Sim(3) Procrustes alignment, multi-view canonicalization, and
//! correspondence-free ground-truth alignment via Sim(3)-ICP.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{unproject_indexed, CameraModel, DepthMap, Mat3, PointCloud, PointMap, Sim3Transform, Vec3};
use crate::sampling::two_stage_indices;
use crate::spatial::KdTree;

/// Paired points with nonnegative weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondences {
    pub src: Vec<Vec3>,
    pub dst: Vec<Vec3>,
    pub weights: Vec<f64>,
}

impl Correspondences {
    pub fn new(src: Vec<Vec3>, dst: Vec<Vec3>, weights: Vec<f64>) -> Result<Self> {
        if src.len() != dst.len() || src.len() != weights.len() {
            return Err(Error::ShapeMismatch(format!(
                "correspondence lengths differ: src {}, dst {}, weights {}",
                src.len(),
                dst.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument("weights must be finite and nonnegative".into()));
        }
        Ok(Self { src, dst, weights })
    }

    pub fn uniform(src: Vec<Vec3>, dst: Vec<Vec3>) -> Result<Self> {
        let n = src.len();
        Self::new(src, dst, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Weighted sum of squared residuals of `t` on these pairs.
    pub fn cost(&self, t: &Sim3Transform) -> f64 {
        self.src
            .iter()
            .zip(&self.dst)
            .zip(&self.weights)
            .map(|((s, d), w)| w * (d - t.apply(s)).norm_squared())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub transform: Sim3Transform,
    /// `sqrt(sum w |dst - T(src)|^2 / sum w)`, in destination units.
    pub weighted_rms_residual: f64,
    pub effective_points: usize,
}

/// Closed-form minimizer of `sum_j w_j |dst_j - T(src_j)|^2` over Sim(3).
///
/// Weighted centroids are removed, the weighted cross-covariance is
/// decomposed by SVD with a determinant-sign correction (the smallest singular
/// direction is flipped rather than returning a reflection), and the scale is
/// `trace(D S) / var_w(src)`.
pub fn weighted_sim3_procrustes(c: &Correspondences) -> Result<AlignmentReport> {
    if c.src.len() != c.dst.len() || c.src.len() != c.weights.len() {
        return Err(Error::ShapeMismatch("correspondence lengths differ".into()));
    }
    let active: Vec<usize> = (0..c.len()).filter(|&i| c.weights[i] > 0.0).collect();
    if active.len() < 3 {
        return Err(Error::Degenerate(format!(
            "need at least 3 correspondences with positive weight, got {}",
            active.len()
        )));
    }
    let total: f64 = active.iter().map(|&i| c.weights[i]).sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Degenerate("total correspondence weight is not positive".into()));
    }

    let mut mu_src = Vec3::zeros();
    let mut mu_dst = Vec3::zeros();
    for &i in &active {
        let w = c.weights[i] / total;
        mu_src += w * c.src[i];
        mu_dst += w * c.dst[i];
    }

    let mut cov = Mat3::zeros();
    let mut src_cov = Mat3::zeros();
    let mut var_src = 0.0;
    for &i in &active {
        let w = c.weights[i] / total;
        let xs = c.src[i] - mu_src;
        let xd = c.dst[i] - mu_dst;
        cov += w * xd * xs.transpose();
        src_cov += w * xs * xs.transpose();
        var_src += w * xs.norm_squared();
    }

    let mut eig = src_cov.symmetric_eigenvalues().as_slice().to_vec();
    eig.sort_by(|a, b| b.total_cmp(a));
    if !(eig[0] > 0.0) || eig[1] <= 1e-12 * eig[0] {
        return Err(Error::Degenerate("source points are collinear or coincident".into()));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
    // nalgebra returns singular values in descending order.
    let mut sign = Mat3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rotation = u * sign * v_t;
    let d = svd.singular_values;
    let trace = d[0] * sign[(0, 0)] + d[1] * sign[(1, 1)] + d[2] * sign[(2, 2)];
    let scale = trace / var_src;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Degenerate(format!("recovered scale {scale} is not positive")));
    }
    let translation = mu_dst - scale * (rotation * mu_src);
    let transform = Sim3Transform::from_rotation_matrix(scale, &rotation, translation)?;

    let sq: f64 = active
        .iter()
        .map(|&i| c.weights[i] / total * (c.dst[i] - transform.apply(&c.src[i])).norm_squared())
        .sum();
    Ok(AlignmentReport {
        transform,
        weighted_rms_residual: sq.sqrt(),
        effective_points: active.len(),
    })
}

/// Result of canonicalizing one multi-view reconstruction.
#[derive(Debug, Clone)]
pub struct Canonicalization {
    pub report: AlignmentReport,
    /// Every depth-derived point mapped into the canonical frame.
    pub cloud: PointCloud,
    /// Correspondences that went into the solve.
    pub sampled: usize,
}

/// Pairs every valid depth pixel (lifted through its reference-frame camera)
/// with the canonical point predicted at the same pixel, weights each pair by
/// the smaller of the two confidences, draws `m` spread-out pairs with
/// two-stage sampling and solves for the reference-to-canonical similarity.
pub fn canonicalize_views(
    depths: &[DepthMap],
    cams: &[CameraModel],
    canon_maps: &[PointMap],
    m: usize,
    seed: u64,
) -> Result<Canonicalization> {
    if depths.len() != cams.len() || depths.len() != canon_maps.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} depth maps, {} cameras, {} point maps",
            depths.len(),
            cams.len(),
            canon_maps.len()
        )));
    }
    let mut src = Vec::new();
    let mut dst = Vec::new();
    let mut weights = Vec::new();
    for ((depth, cam), pmap) in depths.iter().zip(cams).zip(canon_maps) {
        if depth.size != pmap.size {
            return Err(Error::ShapeMismatch(format!(
                "depth map {:?} and point map {:?} differ in size",
                depth.size, pmap.size
            )));
        }
        for (pixel, p) in unproject_indexed(depth, cam)? {
            src.push(p);
            dst.push(pmap.points[pixel]);
            weights.push(depth.confidence[pixel].min(pmap.confidence[pixel]));
        }
    }
    if src.is_empty() {
        return Err(Error::Degenerate("no valid depth pixels to canonicalize".into()));
    }
    let m = m.min(src.len());
    let picked = two_stage_indices(&src, m, seed)?.indices;
    let sampled = Correspondences::new(
        picked.iter().map(|&i| src[i]).collect(),
        picked.iter().map(|&i| dst[i]).collect(),
        picked.iter().map(|&i| weights[i]).collect(),
    )?;
    let report = weighted_sim3_procrustes(&sampled)?;
    let cloud = PointCloud {
        positions: src.iter().map(|p| report.transform.apply(p)).collect(),
        normals: None,
        confidence: Some(weights),
    };
    Ok(Canonicalization {
        report,
        cloud,
        sampled: picked.len(),
    })
}

/// Outcome of [`align_gt_to_prediction_detailed`].
#[derive(Debug, Clone)]
pub struct IcpResult {
    pub transform: Sim3Transform,
    /// RMS nearest-neighbor distance of the initial and of every iterate.
    pub residuals: Vec<f64>,
}

fn rms_radius(points: &[Vec3], center: &Vec3) -> f64 {
    (points.iter().map(|p| (p - center).norm_squared()).sum::<f64>() / points.len() as f64).sqrt()
}

fn nn_residual(tree: &KdTree, src: &[Vec3], t: &Sim3Transform) -> (f64, Vec<Vec3>) {
    let mut sq = 0.0;
    let mut matched = Vec::with_capacity(src.len());
    for p in src {
        let q = t.apply(p);
        let (j, d) = tree.nearest(&q).expect("non-empty tree");
        sq += d;
        matched.push(tree.points()[j]);
    }
    ((sq / src.len() as f64).sqrt(), matched)
}

/// Sim(3)-ICP from `gt` onto `pred`: initialized by matching centroids and RMS
/// radii, then alternating nearest-neighbor matching with
/// [`weighted_sim3_procrustes`] for a fixed number of iterations.
pub fn align_gt_to_prediction_detailed(gt: &PointCloud, pred: &PointCloud, iterations: usize) -> Result<IcpResult> {
    if gt.len() < 3 || pred.len() < 3 {
        return Err(Error::Degenerate("ICP needs at least 3 points per cloud".into()));
    }
    let cg = gt.centroid();
    let cp = pred.centroid();
    let rg = rms_radius(&gt.positions, &cg);
    let rp = rms_radius(&pred.positions, &cp);
    if !(rg > 1e-12 && rp > 1e-12) {
        return Err(Error::Degenerate("cloud collapses to a point".into()));
    }
    let s = rp / rg;
    let mut t = Sim3Transform::new(s, crate::geometry::Quat::identity(), cp - s * cg)?;

    let tree = KdTree::build(&pred.positions);
    let (mut residual, mut matched) = nn_residual(&tree, &gt.positions, &t);
    let mut residuals = vec![residual];
    for _ in 0..iterations {
        let corr = Correspondences::uniform(gt.positions.clone(), matched)?;
        let candidate = weighted_sim3_procrustes(&corr)?.transform;
        let (next_residual, next_matched) = nn_residual(&tree, &gt.positions, &candidate);
        // The alternating scheme cannot increase the objective; rounding can.
        if next_residual > residual {
            residuals.push(residual);
            break;
        }
        t = candidate;
        residual = next_residual;
        matched = next_matched;
        residuals.push(residual);
    }
    Ok(IcpResult {
        transform: t,
        residuals,
    })
}

pub fn align_gt_to_prediction(gt: &PointCloud, pred: &PointCloud, iterations: usize) -> Result<Sim3Transform> {
    Ok(align_gt_to_prediction_detailed(gt, pred, iterations)?.transform)
}

/// Default ICP budget for ground-truth alignment.
pub const DEFAULT_ICP_ITERATIONS: usize = 20;

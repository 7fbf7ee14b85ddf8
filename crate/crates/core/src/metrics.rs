//! Mesh, trajectory and depth metrics.

use serde::{Deserialize, Serialize};

use crate::align::{align_gt_to_prediction, weighted_sim3_procrustes, Correspondences, DEFAULT_ICP_ITERATIONS};
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, DepthMap, Mat3, OrientedPointSet, PointCloud, Vec3};
use crate::mesh::Mesh;
use crate::spatial::KdTree;

/// Default F-score threshold in unit-diameter canonical units.
pub const DEFAULT_TAU: f64 = 0.01;
pub const DEFAULT_SAMPLES: usize = 10_000;
pub const DEFAULT_IOU_RES: usize = 128;
/// Largest tolerated fraction of voxels whose axis votes disagree.
pub const MAX_PARITY_AMBIGUITY: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshMetrics {
    pub chamfer_l2: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub normal_consistency: f64,
    pub voxel_iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics {
    pub ate: f64,
    pub rpe_t: f64,
    /// Degrees.
    pub rpe_r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub rmse: f64,
}

fn non_empty(name: &str, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument(format!("{name} cloud is empty")));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean over both directions of the mean squared nearest-neighbor distance.
pub fn chamfer_l2(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    non_empty("first", a.len())?;
    non_empty("second", b.len())?;
    let ab = KdTree::build(&b.positions).nearest_sq_distances(&a.positions);
    let ba = KdTree::build(&a.positions).nearest_sq_distances(&b.positions);
    Ok(0.5 * (mean(&ab) + mean(&ba)))
}

fn fraction_within(sq: &[f64], tau: f64) -> f64 {
    sq.iter().filter(|d| d.sqrt() < tau).count() as f64 / sq.len() as f64
}

/// Harmonic mean of precision and recall; zero when both are zero.
pub fn f_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Precision: share of `pred` within `tau` of `gt`. Recall: the reverse.
pub fn precision_recall_fscore(pred: &PointCloud, gt: &PointCloud, tau: f64) -> Result<(f64, f64, f64)> {
    non_empty("predicted", pred.len())?;
    non_empty("ground-truth", gt.len())?;
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("threshold must be positive, got {tau}")));
    }
    let p = fraction_within(&KdTree::build(&gt.positions).nearest_sq_distances(&pred.positions), tau);
    let r = fraction_within(&KdTree::build(&pred.positions).nearest_sq_distances(&gt.positions), tau);
    Ok((p, r, f_score(p, r)))
}

fn one_way_normals(q: &OrientedPointSet, target: &OrientedPointSet, tree: &KdTree, absolute: bool) -> f64 {
    let mut sum = 0.0;
    for i in 0..q.len() {
        let (j, _) = tree.nearest(&q.position(i)).expect("non-empty target");
        let c = q.normal(i).dot(&target.normal(j));
        sum += if absolute { c.abs() } else { c };
    }
    sum / q.len() as f64
}

/// Symmetric mean cosine between each normal and its nearest neighbor's.
/// `absolute` ignores orientation.
pub fn normal_consistency(a: &OrientedPointSet, b: &OrientedPointSet, absolute: bool) -> Result<f64> {
    non_empty("first", a.len())?;
    non_empty("second", b.len())?;
    let ta = KdTree::build(&a.positions());
    let tb = KdTree::build(&b.positions());
    Ok(0.5 * (one_way_normals(a, b, &tb, absolute) + one_way_normals(b, a, &ta, absolute)))
}

/// Voxel-center occupancy on an axis-aligned grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Occupancy {
    pub lo: Vec3,
    pub step: Vec3,
    pub res: usize,
    pub inside: Vec<bool>,
    /// Voxels whose three axis-parity votes disagree.
    pub ambiguous: usize,
}

impl Occupancy {
    pub fn center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        self.lo
            + Vec3::new(
                (x as f64 + 0.5) * self.step.x,
                (y as f64 + 0.5) * self.step.y,
                (z as f64 + 0.5) * self.step.z,
            )
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.res + y) * self.res + x
    }

    pub fn count(&self) -> usize {
        self.inside.iter().filter(|b| **b).count()
    }
}

/// Edge function of the directed edge `p -> q` at `(x, y)` in the `(u, v)`
/// plane. Evaluated with the endpoints in a fixed order so that the reversed
/// edge yields exactly the negated value.
fn edge_function(p: &Vec3, q: &Vec3, u: usize, v: usize, x: f64, y: f64) -> f64 {
    let swapped = (q[u], q[v]) < (p[u], p[v]);
    let (p, q) = if swapped { (q, p) } else { (p, q) };
    let e = (q[u] - p[u]) * (y - p[v]) - (q[v] - p[v]) * (x - p[u]);
    if swapped {
        -e
    } else {
        e
    }
}

/// Half-open tie rule: of an edge and its reverse exactly one owns points
/// lying on it.
fn owns_edge(p: &Vec3, q: &Vec3, u: usize, v: usize) -> bool {
    let (du, dv) = (q[u] - p[u], q[v] - p[v]);
    dv > 0.0 || (dv == 0.0 && du < 0.0)
}

/// Parity of crossings along lines parallel to `axis` through voxel centers.
fn axis_parity(mesh: &Mesh, lo: &Vec3, step: &Vec3, res: usize, axis: usize) -> Vec<bool> {
    let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
    let mut crossings: Vec<Vec<f64>> = vec![Vec::new(); res * res];
    for t in 0..mesh.triangles.len() {
        let [a, mut b, mut c] = mesh.triangle(t);
        let area = (b[u] - a[u]) * (c[v] - a[v]) - (b[v] - a[v]) * (c[u] - a[u]);
        if area == 0.0 {
            continue;
        }
        if area < 0.0 {
            std::mem::swap(&mut b, &mut c);
        }
        let cell = |p: f64, k: usize| (p - lo[k]) / step[k] - 0.5;
        let umin = cell(a[u].min(b[u]).min(c[u]), u).ceil().max(0.0) as usize;
        let umax = cell(a[u].max(b[u]).max(c[u]), u).floor();
        let vmin = cell(a[v].min(b[v]).min(c[v]), v).ceil().max(0.0) as usize;
        let vmax = cell(a[v].max(b[v]).max(c[v]), v).floor();
        if umax < 0.0 || vmax < 0.0 {
            continue;
        }
        let umax = (umax as usize).min(res - 1);
        let vmax = (vmax as usize).min(res - 1);
        let owns = [
            owns_edge(&b, &c, u, v),
            owns_edge(&c, &a, u, v),
            owns_edge(&a, &b, u, v),
        ];
        for iv in vmin..=vmax {
            let pv = lo[v] + (iv as f64 + 0.5) * step[v];
            for iu in umin..=umax {
                let pu = lo[u] + (iu as f64 + 0.5) * step[u];
                let w = [
                    edge_function(&b, &c, u, v, pu, pv),
                    edge_function(&c, &a, u, v, pu, pv),
                    edge_function(&a, &b, u, v, pu, pv),
                ];
                let hit = w.iter().zip(&owns).all(|(w, o)| *w > 0.0 || (*w == 0.0 && *o));
                let s = w[0] + w[1] + w[2];
                if hit && s > 0.0 {
                    let along = (w[0] * a[axis] + w[1] * b[axis] + w[2] * c[axis]) / s;
                    crossings[iv * res + iu].push(along);
                }
            }
        }
    }
    let mut inside = vec![false; res * res * res];
    for iv in 0..res {
        for iu in 0..res {
            let xs = &mut crossings[iv * res + iu];
            xs.sort_by(|p, q| p.total_cmp(q));
            let mut k = 0;
            for ia in 0..res {
                let pa = lo[axis] + (ia as f64 + 0.5) * step[axis];
                while k < xs.len() && xs[k] < pa {
                    k += 1;
                }
                let mut idx = [0usize; 3];
                idx[axis] = ia;
                idx[u] = iu;
                idx[v] = iv;
                inside[(idx[2] * res + idx[1]) * res + idx[0]] = k % 2 == 1;
            }
        }
    }
    inside
}

/// Inside test for voxel centers by majority vote of x, y and z ray parity.
pub fn voxelize(mesh: &Mesh, lo: Vec3, hi: Vec3, res: usize) -> Result<Occupancy> {
    mesh.validate()?;
    if res == 0 {
        return Err(Error::InvalidArgument("voxel resolution must be positive".into()));
    }
    let step = (hi - lo) / res as f64;
    if step.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Degenerate("voxel grid has zero extent".into()));
    }
    let votes: Vec<Vec<bool>> = (0..3).map(|axis| axis_parity(mesh, &lo, &step, res, axis)).collect();
    let mut inside = vec![false; res * res * res];
    let mut ambiguous = 0;
    for i in 0..inside.len() {
        let n = votes.iter().filter(|v| v[i]).count();
        inside[i] = n >= 2;
        if n == 1 || n == 2 {
            ambiguous += 1;
        }
    }
    Ok(Occupancy {
        lo,
        step,
        res,
        inside,
        ambiguous,
    })
}

/// Grid bounds: the union bounding box padded by 5% of its extent per side.
pub fn shared_bounds(a: &Mesh, b: &Mesh) -> Result<(Vec3, Vec3)> {
    let (alo, ahi) = a
        .bounds()
        .ok_or_else(|| Error::InvalidArgument("first mesh is empty".into()))?;
    let (blo, bhi) = b
        .bounds()
        .ok_or_else(|| Error::InvalidArgument("second mesh is empty".into()))?;
    let lo = alo.inf(&blo);
    let hi = ahi.sup(&bhi);
    let pad = (hi - lo) * 0.05;
    Ok((lo - pad, hi + pad))
}

fn check_watertight(occ: &Occupancy) -> Result<()> {
    let total = occ.inside.len();
    if occ.ambiguous as f64 > MAX_PARITY_AMBIGUITY * total as f64 {
        return Err(Error::NotWatertight {
            ambiguous: occ.ambiguous,
            total,
        });
    }
    Ok(())
}

/// Volumetric IoU on a `res^3` grid over the padded union bounding box.
pub fn voxel_iou(a: &Mesh, b: &Mesh, res: usize) -> Result<f64> {
    let (lo, hi) = shared_bounds(a, b)?;
    let oa = voxelize(a, lo, hi, res)?;
    check_watertight(&oa)?;
    let ob = voxelize(b, lo, hi, res)?;
    check_watertight(&ob)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in oa.inside.iter().zip(&ob.inside) {
        inter += (*x && *y) as usize;
        union += (*x || *y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

fn centers(cams: &[CameraModel]) -> Vec<Vec3> {
    cams.iter().map(CameraModel::center).collect()
}

/// RMSE of camera centers after an unweighted Sim(3) fit of `pred` onto `gt`.
pub fn ate(pred: &[CameraModel], gt: &[CameraModel]) -> Result<f64> {
    if pred.len() != gt.len() || pred.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "ATE needs equal camera counts >= 3, got {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    let (p, g) = (centers(pred), centers(gt));
    let t = weighted_sim3_procrustes(&Correspondences::uniform(p.clone(), g.clone())?)?.transform;
    let sq: f64 = p.iter().zip(&g).map(|(a, b)| (t.apply(a) - b).norm_squared()).sum();
    Ok((sq / p.len() as f64).sqrt())
}

/// Camera centers without any alignment; both sets must share a frame.
pub fn center_rmse(pred: &[CameraModel], gt: &[CameraModel]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::InvalidArgument("camera counts differ or are zero".into()));
    }
    let sq: f64 = pred
        .iter()
        .zip(gt)
        .map(|(a, b)| (a.center() - b.center()).norm_squared())
        .sum();
    Ok((sq / pred.len() as f64).sqrt())
}

fn rms_spread(c: &[Vec3]) -> f64 {
    let mu = c.iter().sum::<Vec3>() / c.len() as f64;
    (c.iter().map(|p| (p - mu).norm_squared()).sum::<f64>() / c.len() as f64).sqrt()
}

/// Rotation angle of `r`, in degrees.
fn angle_degrees(r: &Mat3) -> f64 {
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Relative pose error over all ordered pairs `(i, j)`, `i != j`.
///
/// The relative pose `T_i^-1 T_j` (camera-to-world poses) has rotation
/// `R_i R_j^T` and translation `R_i (c_j - c_i)`. Each trajectory is first
/// scaled so its centers have unit RMS radius.
pub fn rpe(pred: &[CameraModel], gt: &[CameraModel]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() || pred.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "RPE needs equal camera counts >= 2, got {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    let (pc, gc) = (centers(pred), centers(gt));
    let (sp, sg) = (rms_spread(&pc), rms_spread(&gc));
    if !(sp > 1e-12 && sg > 1e-12) {
        return Err(Error::Degenerate("camera centers coincide".into()));
    }
    let rel = |cams: &[CameraModel], c: &[Vec3], s: f64, i: usize, j: usize| {
        let (ri, rj) = (
            cams[i].rotation().to_rotation_matrix(),
            cams[j].rotation().to_rotation_matrix(),
        );
        (ri.matrix() * rj.matrix().transpose(), ri.matrix() * (c[j] - c[i]) / s)
    };
    let mut sq_t = 0.0;
    let mut sum_r = 0.0;
    let mut pairs = 0usize;
    for i in 0..pred.len() {
        for j in 0..pred.len() {
            if i == j {
                continue;
            }
            let (rp, tp) = rel(pred, &pc, sp, i, j);
            let (rg, tg) = rel(gt, &gc, sg, i, j);
            sq_t += (tp - tg).norm_squared();
            sum_r += angle_degrees(&(rp.transpose() * rg));
            pairs += 1;
        }
    }
    Ok(((sq_t / pairs as f64).sqrt(), sum_r / pairs as f64))
}

pub fn pose_metrics(pred: &[CameraModel], gt: &[CameraModel]) -> Result<PoseMetrics> {
    let (rpe_t, rpe_r) = rpe(pred, gt)?;
    Ok(PoseMetrics {
        ate: ate(pred, gt)?,
        rpe_t,
        rpe_r,
    })
}

/// Abs Rel and RMSE over pixels valid in both maps.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap) -> Result<DepthMetrics> {
    depth_metrics_many(std::slice::from_ref(pred), std::slice::from_ref(gt))
}

/// Like [`depth_metrics`] but pooled over several views.
pub fn depth_metrics_many(pred: &[DepthMap], gt: &[DepthMap]) -> Result<DepthMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted vs {} ground-truth depth maps",
            pred.len(),
            gt.len()
        )));
    }
    let mut n = 0usize;
    let mut rel = 0.0;
    let mut sq = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        if p.size != g.size {
            return Err(Error::ShapeMismatch(format!(
                "depth maps {:?} and {:?}",
                p.size, g.size
            )));
        }
        for i in 0..p.values.len() {
            if !(p.valid[i] && g.valid[i]) {
                continue;
            }
            let d = g.values[i];
            if !(d > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "ground-truth depth {d} under the valid mask"
                )));
            }
            let e = p.values[i] - d;
            rel += e.abs() / d;
            sq += e * e;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no pixel is valid in both depth maps".into()));
    }
    Ok(DepthMetrics {
        abs_rel: rel / n as f64,
        rmse: (sq / n as f64).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshEvalConfig {
    pub samples: usize,
    pub seed: u64,
    pub tau: f64,
    pub iou_res: usize,
    pub absolute_normals: bool,
}

impl Default for MeshEvalConfig {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            seed: 0,
            tau: DEFAULT_TAU,
            iou_res: DEFAULT_IOU_RES,
            absolute_normals: false,
        }
    }
}

/// Point and volume metrics of two meshes already in the same frame.
pub fn mesh_metrics(pred: &Mesh, gt: &Mesh, cfg: &MeshEvalConfig) -> Result<MeshMetrics> {
    let ps = pred.sample_surface(cfg.samples, cfg.seed)?;
    let gs = gt.sample_surface(cfg.samples, cfg.seed)?;
    let (pc, gc) = (ps.to_point_cloud(), gs.to_point_cloud());
    let (precision, recall, f) = precision_recall_fscore(&pc, &gc, cfg.tau)?;
    Ok(MeshMetrics {
        chamfer_l2: chamfer_l2(&pc, &gc)?,
        precision,
        recall,
        f_score: f,
        normal_consistency: normal_consistency(&ps, &gs, cfg.absolute_normals)?,
        voxel_iou: voxel_iou(pred, gt, cfg.iou_res)?,
    })
}

/// Brings `pred` into the ground-truth gauge: a Sim(3)-ICP of surface samples
/// of `gt` onto samples of `pred`, inverted and applied to `pred`.
pub fn align_to_ground_truth(pred: &Mesh, gt: &Mesh, samples: usize, seed: u64) -> Result<Mesh> {
    let ps = pred.sample_surface(samples, seed)?.to_point_cloud();
    let gs = gt.sample_surface(samples, seed)?.to_point_cloud();
    let t = align_gt_to_prediction(&gs, &ps, DEFAULT_ICP_ITERATIONS)?.inverse();
    Ok(Mesh {
        vertices: pred.vertices.iter().map(|v| t.apply(v)).collect(),
        triangles: pred.triangles.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalMeta {
    pub seed: u64,
    pub samples: usize,
    pub res: usize,
}

/// Flat report; field names are the on-disk JSON schema.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub chamfer_l2: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub normal_consistency: f64,
    pub voxel_iou: f64,
    pub ate: f64,
    pub rpe_t: f64,
    pub rpe_r: f64,
    pub abs_rel: f64,
    pub rmse: f64,
    pub meta: EvalMeta,
}

impl EvalReport {
    pub fn mesh(&self) -> MeshMetrics {
        MeshMetrics {
            chamfer_l2: self.chamfer_l2,
            precision: self.precision,
            recall: self.recall,
            f_score: self.f_score,
            normal_consistency: self.normal_consistency,
            voxel_iou: self.voxel_iou,
        }
    }

    /// Field-wise mean; `meta` is taken from the first report.
    pub fn mean(reports: &[EvalReport]) -> Option<EvalReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let avg = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(EvalReport {
            chamfer_l2: avg(|r| r.chamfer_l2),
            precision: avg(|r| r.precision),
            recall: avg(|r| r.recall),
            f_score: avg(|r| r.f_score),
            normal_consistency: avg(|r| r.normal_consistency),
            voxel_iou: avg(|r| r.voxel_iou),
            ate: avg(|r| r.ate),
            rpe_t: avg(|r| r.rpe_t),
            rpe_r: avg(|r| r.rpe_r),
            abs_rel: avg(|r| r.abs_rel),
            rmse: avg(|r| r.rmse),
            meta: first.meta,
        })
    }
}

/// Predicted artifacts of one scene. Depths must be in canonical units.
#[derive(Debug, Clone, Copy)]
pub struct RunArtifacts<'a> {
    pub mesh: &'a Mesh,
    pub cameras: &'a [CameraModel],
    pub depths: &'a [DepthMap],
}

/// Ground truth of one scene.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruth<'a> {
    pub mesh: &'a Mesh,
    pub cameras: &'a [CameraModel],
    pub depths: &'a [DepthMap],
}

/// Every metric for one scene.
pub fn evaluate_run(pred: &RunArtifacts, gt: &GroundTruth, cfg: &MeshEvalConfig) -> Result<EvalReport> {
    let aligned = align_to_ground_truth(pred.mesh, gt.mesh, cfg.samples, cfg.seed)?;
    let m = mesh_metrics(&aligned, gt.mesh, cfg)?;
    let p = pose_metrics(pred.cameras, gt.cameras)?;
    let d = depth_metrics_many(pred.depths, gt.depths)?;
    Ok(EvalReport {
        chamfer_l2: m.chamfer_l2,
        precision: m.precision,
        recall: m.recall,
        f_score: m.f_score,
        normal_consistency: m.normal_consistency,
        voxel_iou: m.voxel_iou,
        ate: p.ate,
        rpe_t: p.rpe_t,
        rpe_r: p.rpe_r,
        abs_rel: d.abs_rel,
        rmse: d.rmse,
        meta: EvalMeta {
            seed: cfg.seed,
            samples: cfg.samples,
            res: cfg.iou_res,
        },
    })
}

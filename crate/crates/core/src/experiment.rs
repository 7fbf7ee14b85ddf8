//! Dataset splits and the evaluation loops behind the reconstruction and
//! generation comparisons.

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{
    aligned_latents, condition_inputs, decode_mesh, Autoencoder, ConditionInputs, GenSample, Generator,
};
use crate::geometry::{DepthMap, Sim3Transform};
use crate::mesh::{extract_mesh, Mesh};
use crate::metrics::{
    align_to_ground_truth, center_rmse, depth_metrics_many, mesh_metrics, pose_metrics, MeshEvalConfig, MeshMetrics,
};
use crate::recon::{canonicalize_prediction, CanonicalReconstruction, Frame, ReconModel, ReconPrediction, Strategy};
use crate::world::{generate_scene, reference_frame, simulate_reconstruction, NoiseModel, Scene, SceneConfig, ViewSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Seed of scene `index` in `split`; train and test never share a seed.
pub fn scene_seed(seed: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 0x7472_6169_6e00_0000u64,
        Split::Test => 0x7465_7374_0000_0000u64,
    };
    let mut z = seed ^ tag ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn build_split(cfg: &SceneConfig, seed: u64, split: Split, count: usize) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| generate_scene(cfg, scene_seed(seed, split, i)))
        .collect()
}

/// The `k`-view subset used for scene `index`; the first entry is the reference view.
pub fn view_subset(n_views: usize, k: usize, seed: u64, index: usize) -> Result<Vec<usize>> {
    if k == 0 || k > n_views {
        return Err(Error::InvalidArgument(format!("cannot pick {k} of {n_views} views")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(seed ^ 0x5eed, Split::Test, index));
    Ok(sample_indices(&mut rng, n_views, k).into_vec())
}

/// Mean reconstruction metrics of one strategy over held-out scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconRow {
    pub strategy: Strategy,
    pub ate: f64,
    pub rpe_t: f64,
    pub rpe_r: f64,
    pub abs_rel: f64,
    pub rmse: f64,
    /// Camera-center RMSE in the canonical frame without any alignment.
    pub canonical_center_rmse: f64,
    pub scenes: usize,
}

/// Ground-truth depth expressed in the frame the depth head predicts in.
fn depth_in_head_frame(views: &ViewSet, frame: Frame) -> Result<Vec<DepthMap>> {
    let s = match frame {
        Frame::Reference => reference_frame(views)?.scale(),
        Frame::Canonical => 1.0,
    };
    views
        .depths
        .iter()
        .map(|d| {
            DepthMap::new(
                d.size,
                d.values.iter().map(|v| v * s).collect(),
                d.valid.clone(),
                d.confidence.clone(),
            )
        })
        .collect()
}

pub fn evaluate_reconstructor(model: &ReconModel, scenes: &[Scene], k: usize, m: usize, seed: u64) -> Result<ReconRow> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("no evaluation scenes".into()));
    }
    let mut row = ReconRow {
        strategy: model.strategy,
        ate: 0.0,
        rpe_t: 0.0,
        rpe_r: 0.0,
        abs_rel: 0.0,
        rmse: 0.0,
        canonical_center_rmse: 0.0,
        scenes: scenes.len(),
    };
    let inv = 1.0 / scenes.len() as f64;
    for (i, scene) in scenes.iter().enumerate() {
        let views = scene.views.subset(&view_subset(scene.views.len(), k, seed, i)?)?;
        let images: Vec<&[f64]> = views.images.iter().map(|v| v.as_slice()).collect();
        let pred = model.forward(&images)?;
        let canon = canonicalize_prediction(&pred, m, seed)?;
        let pose = pose_metrics(&canon.canonical_cameras, &views.cameras)?;
        let gt_depth = depth_in_head_frame(&views, model.strategy.head_frames().depth)?;
        let depth = depth_metrics_many(&pred.depths, &gt_depth)?;
        row.ate += pose.ate * inv;
        row.rpe_t += pose.rpe_t * inv;
        row.rpe_r += pose.rpe_r * inv;
        row.abs_rel += depth.abs_rel * inv;
        row.rmse += depth.rmse * inv;
        row.canonical_center_rmse += center_rmse(&canon.canonical_cameras, &views.cameras)? * inv;
    }
    Ok(row)
}

/// Where stage-II conditioning comes from.
#[derive(Debug, Clone, Copy)]
pub enum ConditionSource<'a> {
    /// Corrupted ground truth from the reconstruction simulator.
    Simulator(NoiseModel),
    Reconstructor(&'a ReconModel),
}

/// Reconstructs `views` with `source` and canonicalizes the result.
pub fn reconstruct(
    source: ConditionSource,
    views: &ViewSet,
    m: usize,
    seed: u64,
) -> Result<(ReconPrediction, CanonicalReconstruction)> {
    let pred = match source {
        ConditionSource::Simulator(noise) => {
            let sim = simulate_reconstruction(views, &noise, &Sim3Transform::identity(), seed)?;
            ReconPrediction::from_simulation(&sim)
        }
        ConditionSource::Reconstructor(model) => {
            let images: Vec<&[f64]> = views.images.iter().map(|v| v.as_slice()).collect();
            model.forward(&images)?
        }
    };
    let canon = canonicalize_prediction(&pred, m, seed)?;
    Ok((pred, canon))
}

/// Settings shared by stage-II sample construction and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageTwoConfig {
    /// Views per object fed to the reconstructor.
    pub views: usize,
    /// Correspondences for canonicalization.
    pub correspondences: usize,
    pub icp_iterations: usize,
    /// Marching-cubes resolution of generated meshes.
    pub resolution: usize,
    /// Resolution of the ground-truth reference meshes.
    pub gt_resolution: usize,
    pub seed: u64,
}

impl Default for StageTwoConfig {
    fn default() -> Self {
        Self {
            views: 4,
            correspondences: 1024,
            icp_iterations: 20,
            resolution: 64,
            gt_resolution: 64,
            seed: 0,
        }
    }
}

/// Everything derived from one scene's sparse views in stage II.
#[derive(Debug, Clone)]
pub struct SceneReconstruction {
    /// Views used, in input order; the first is the reference.
    pub view_indices: Vec<usize>,
    pub views: ViewSet,
    pub prediction: ReconPrediction,
    pub canonical: CanonicalReconstruction,
    pub inputs: ConditionInputs,
}

impl SceneReconstruction {
    /// Factor taking predicted depth to canonical units.
    pub fn depth_scale(&self) -> f64 {
        match self.prediction.strategy.head_frames().depth {
            Frame::Reference => self.canonical.transform.scale(),
            Frame::Canonical => 1.0,
        }
    }

    /// Predicted depth maps rescaled to canonical units.
    pub fn canonical_depths(&self) -> Result<Vec<DepthMap>> {
        let s = self.depth_scale();
        self.prediction
            .depths
            .iter()
            .map(|d| {
                DepthMap::new(
                    d.size,
                    d.values.iter().map(|v| v * s).collect(),
                    d.valid.clone(),
                    d.confidence.clone(),
                )
            })
            .collect()
    }
}

/// Seed of the generator sample drawn for scene `index`.
pub fn sample_seed(cfg: &StageTwoConfig, index: usize) -> u64 {
    cfg.seed ^ ((index as u64) << 1)
}

/// Reconstructs and canonicalizes a view subset of scene `index` of a split.
pub fn reconstruct_scene(
    source: ConditionSource,
    scene: &Scene,
    index: usize,
    cfg: &StageTwoConfig,
    control_points: usize,
) -> Result<SceneReconstruction> {
    let view_indices = view_subset(scene.views.len(), cfg.views, cfg.seed, index)?;
    let views = scene.views.subset(&view_indices)?;
    let seed = cfg.seed ^ index as u64;
    let (prediction, canonical) = reconstruct(source, &views, cfg.correspondences, seed)?;
    let inputs = condition_inputs(&views.images, &prediction, &canonical, control_points, seed)?;
    Ok(SceneReconstruction {
        view_indices,
        views,
        prediction,
        canonical,
        inputs,
    })
}

/// Condition inputs for scene `index` of a split.
pub fn scene_condition(
    source: ConditionSource,
    scene: &Scene,
    index: usize,
    cfg: &StageTwoConfig,
    control_points: usize,
) -> Result<(ConditionInputs, CanonicalReconstruction)> {
    let r = reconstruct_scene(source, scene, index, cfg, control_points)?;
    Ok((r.inputs, r.canonical))
}

/// Training items: ground-truth latents aligned to each reconstruction plus its condition.
pub fn build_gen_samples(
    ae: &Autoencoder,
    scenes: &[Scene],
    source: ConditionSource,
    cfg: &StageTwoConfig,
) -> Result<Vec<GenSample>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, scene)| {
            let (inputs, canon) = scene_condition(source, scene, i, cfg, ae.cfg.control_points)?;
            let latents = aligned_latents(ae, &scene.shape, &canon.cloud, cfg.icp_iterations, cfg.seed ^ i as u64)?;
            Ok(GenSample {
                latents,
                inputs: Some(inputs),
            })
        })
        .collect()
}

/// Mean mesh metrics over scenes. Scenes whose sample produced no surface
/// score zero on every bounded metric and are left out of the Chamfer mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshRow {
    pub chamfer_l2: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub normal_consistency: f64,
    pub voxel_iou: f64,
    pub scenes: usize,
    pub failures: usize,
}

impl MeshRow {
    pub fn mean(results: &[Option<MeshMetrics>]) -> MeshRow {
        let n = results.len().max(1) as f64;
        let ok: Vec<&MeshMetrics> = results.iter().flatten().collect();
        let sum = |f: fn(&MeshMetrics) -> f64| ok.iter().map(|m| f(m)).sum::<f64>() / n;
        MeshRow {
            chamfer_l2: if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().map(|m| m.chamfer_l2).sum::<f64>() / ok.len() as f64
            },
            precision: sum(|m| m.precision),
            recall: sum(|m| m.recall),
            f_score: sum(|m| m.f_score),
            normal_consistency: sum(|m| m.normal_consistency),
            voxel_iou: sum(|m| m.voxel_iou),
            scenes: results.len(),
            failures: results.len() - ok.len(),
        }
    }
}

pub fn ground_truth_mesh(scene: &Scene, resolution: usize) -> Result<Mesh> {
    extract_mesh(|p| scene.shape.sdf(p), resolution)
}

/// Generates one mesh per scene (conditioned, or unconditional when
/// `source` is `None`) and scores it. With `align` the prediction is first
/// brought into the ground-truth gauge by Sim(3)-ICP.
pub fn evaluate_generator(
    ae: &Autoencoder,
    gen: &Generator,
    scenes: &[Scene],
    source: Option<ConditionSource>,
    cfg: &StageTwoConfig,
    eval: &MeshEvalConfig,
    align: bool,
) -> Result<(MeshRow, Vec<Option<MeshMetrics>>)> {
    let mut results = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let inputs = match source {
            Some(src) => Some(scene_condition(src, scene, i, cfg, gen.cfg.control_points)?.0),
            None => None,
        };
        let z = gen.sample_latents(inputs.as_ref(), sample_seed(cfg, i))?;
        let mesh = match decode_mesh(ae, &z, cfg.resolution) {
            Ok(m) => m,
            Err(Error::EmptySurface) => {
                results.push(None);
                continue;
            }
            Err(e) => return Err(e),
        };
        let gt = ground_truth_mesh(scene, cfg.gt_resolution)?;
        let mesh = if align {
            align_to_ground_truth(&mesh, &gt, eval.samples, eval.seed)?
        } else {
            mesh
        };
        match mesh_metrics(&mesh, &gt, eval) {
            Ok(m) => results.push(Some(m)),
            Err(Error::NotWatertight { .. }) | Err(Error::EmptySurface) => results.push(None),
            Err(e) => return Err(e),
        }
    }
    Ok((MeshRow::mean(&results), results))
}

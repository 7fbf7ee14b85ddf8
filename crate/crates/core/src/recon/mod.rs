//! Trainable multi-view, multi-head toy reconstructor.
//!
//! A shared transformer trunk feeds camera, depth and point-map heads. Which
//! frame each head predicts in is set by the [`Strategy`]:
//!
//! | strategy   | camera    | depth     | points    | extra                    |
//! |------------|-----------|-----------|-----------|--------------------------|
//! | `direct`   | canonical | canonical | canonical |                          |
//! | `explicit` | reference | reference | reference | transform token and head |
//! | `branch`   | reference | reference | canonical |                          |

pub mod loss;
pub mod model;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::align::canonicalize_views;
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, PointCloud, Sim3Transform};
use crate::world::SimulatedReconstruction;

pub use loss::{
    camera_target, recon_loss, Frame, HeadFrames, LossTerms, LossVars, LossWeights, ReconTargets, ViewTargets,
};
pub use model::{confidence_from_raw, HeadVars, PatchLayout, ReconConfig, ReconModel, ReconPrediction};
pub use train::{load_model, save_training_state, train, CurvePoint, ReconTrainConfig, RunDir};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "direct")]
    DirectSupervision,
    #[serde(rename = "explicit")]
    ExplicitTransform,
    #[serde(rename = "branch")]
    BranchRepurposing,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [
        Strategy::DirectSupervision,
        Strategy::ExplicitTransform,
        Strategy::BranchRepurposing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::DirectSupervision => "direct",
            Strategy::ExplicitTransform => "explicit",
            Strategy::BranchRepurposing => "branch",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy {s:?} (direct, explicit, branch)")))
    }
}

/// A reconstruction brought into the canonical frame.
#[derive(Debug, Clone)]
pub struct CanonicalReconstruction {
    /// Maps the camera/depth frame to the canonical frame.
    pub transform: Sim3Transform,
    /// Depth-derived points in the canonical frame, with confidences.
    pub cloud: PointCloud,
    /// Cameras as predicted (reference frame unless `direct`).
    pub cameras: Vec<CameraModel>,
    /// The same cameras expressed in the canonical frame.
    pub canonical_cameras: Vec<CameraModel>,
}

impl ReconPrediction {
    /// Zero-network stand-in built from simulator outputs.
    pub fn from_simulation(sim: &SimulatedReconstruction) -> Self {
        Self {
            strategy: Strategy::BranchRepurposing,
            cameras: sim.views.iter().map(|v| camera_target(&v.camera)).collect(),
            depths: sim.views.iter().map(|v| v.depth.clone()).collect(),
            points: sim.views.iter().map(|v| v.points.clone()).collect(),
            camera_tokens: Vec::new(),
            transform: None,
        }
    }
}

/// Lifts predicted depth through predicted cameras and maps it to the
/// canonical frame.
///
/// `branch` and `direct` solve the reference-to-canonical similarity from
/// `m` depth/point-map correspondences; `explicit` uses its transform head.
pub fn canonicalize_prediction(pred: &ReconPrediction, m: usize, seed: u64) -> Result<CanonicalReconstruction> {
    let cameras = pred.camera_models()?;
    let (transform, cloud) = match pred.strategy {
        Strategy::ExplicitTransform => {
            let log7 = pred
                .transform
                .ok_or_else(|| Error::InvalidArgument("explicit prediction lacks a transform".into()))?;
            let t = Sim3Transform::from_log7(&log7)?;
            let mut positions = Vec::new();
            let mut confidence = Vec::new();
            for (d, cam) in pred.depths.iter().zip(&cameras) {
                for (i, p) in crate::geometry::unproject_indexed(d, cam)? {
                    positions.push(t.apply(&p));
                    confidence.push(d.confidence[i]);
                }
            }
            if positions.is_empty() {
                return Err(Error::Degenerate("no valid depth pixels to canonicalize".into()));
            }
            let cloud = PointCloud {
                positions,
                normals: None,
                confidence: Some(confidence),
            };
            (t, cloud)
        }
        _ => {
            let c = canonicalize_views(&pred.depths, &cameras, &pred.points, m, seed)?;
            (c.report.transform, c.cloud)
        }
    };
    let canonical_cameras = cameras.iter().map(|c| c.transformed(&transform)).collect();
    Ok(CanonicalReconstruction {
        transform,
        cloud,
        cameras,
        canonical_cameras,
    })
}

/// Runs the network on `images` and canonicalizes the result.
pub fn predict_and_canonicalize(
    model: &ReconModel,
    images: &[&[f64]],
    m: usize,
    seed: u64,
) -> Result<(ReconPrediction, CanonicalReconstruction)> {
    let pred = model.forward(images)?;
    let canon = canonicalize_prediction(&pred, m, seed)?;
    Ok((pred, canon))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ImageSize;
    use crate::spatial::KdTree;
    use crate::world::{generate_scene, simulate_reconstruction, NoiseModel, SceneConfig};

    #[test]
    fn oracle_heads_reproduce_the_ground_truth_cloud() {
        let cfg = SceneConfig {
            views: 4,
            size: ImageSize::new(24, 24),
            ..SceneConfig::default()
        };
        let scene = generate_scene(&cfg, 5).unwrap();
        let sim = simulate_reconstruction(&scene.views, &NoiseModel::zero(), &Sim3Transform::identity(), 1).unwrap();
        let pred = ReconPrediction::from_simulation(&sim);
        let canon = canonicalize_prediction(&pred, 512, 0).unwrap();
        let mut gt = Vec::new();
        for (d, c) in scene.views.depths.iter().zip(&scene.views.cameras) {
            gt.extend(
                crate::geometry::unproject_indexed(d, c)
                    .unwrap()
                    .into_iter()
                    .map(|(_, p)| p),
            );
        }
        assert_eq!(gt.len(), canon.cloud.len());
        for (a, b) in canon.cloud.positions.iter().zip(&gt) {
            assert!((a - b).norm() < 1e-3);
        }
        let tree = KdTree::build(&gt);
        assert!(tree
            .nearest_sq_distances(&canon.cloud.positions)
            .iter()
            .all(|d| *d < 1e-6));
        for (a, b) in canon.canonical_cameras.iter().zip(&scene.views.cameras) {
            assert!((a.center() - b.center()).norm() < 1e-6);
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
        assert!("both".parse::<Strategy>().is_err());
    }
}

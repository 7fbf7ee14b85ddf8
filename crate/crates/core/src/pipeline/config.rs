use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::StageTwoConfig;
use crate::generator::{AeTrainConfig, GenTrainConfig, GeneratorConfig};
use crate::metrics::MeshEvalConfig;
use crate::recon::{ReconConfig, ReconTrainConfig};
use crate::world::{NoiseModel, SceneConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_scenes: usize,
    pub test_scenes: usize,
    /// Surface samples stored as each scene's canonical cloud.
    pub cloud_points: usize,
    pub scene: SceneConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_scenes: 200,
            test_scenes: 50,
            cloud_points: 2048,
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconSection {
    pub model: ReconConfig,
    pub train: ReconTrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSection {
    pub model: GeneratorConfig,
    pub autoencoder: AeTrainConfig,
    pub train: GenTrainConfig,
    /// View count, canonicalization and meshing settings shared by
    /// training-sample construction, generation and evaluation.
    pub stage: StageTwoConfig,
    /// Corruption used in simulator mode.
    pub noise: NoiseModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub mesh: MeshEvalConfig,
    /// Held-out scenes used by `generate`, `eval` and `ablate`; all when unset.
    pub scenes: Option<usize>,
    /// Sim(3)-ICP generated meshes onto ground truth before scoring them in
    /// `ablate`. `eval` always aligns.
    pub align: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            mesh: MeshEvalConfig::default(),
            scenes: None,
            align: true,
        }
    }
}

/// Full run configuration. Section seeds are derived from `seed` by
/// [`RunConfig::resolved`]; values written in the file are replaced.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Run root used when neither the command line nor the environment names one.
    pub out: Option<String>,
    pub data: DataSection,
    pub recon: ReconSection,
    pub gen: GenSection,
    pub eval: EvalSection,
}

fn mix(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RunConfig {
    /// Copy with every section seed derived from the global seed and the
    /// output directory cleared, as recorded in manifests.
    pub fn resolved(&self) -> RunConfig {
        let mut c = self.clone();
        c.out = None;
        c.recon.train.seed = mix(self.seed, 1);
        c.gen.autoencoder.seed = mix(self.seed, 2);
        c.gen.train.seed = mix(self.seed, 3);
        c.gen.stage.seed = mix(self.seed, 4);
        c.eval.mesh.seed = mix(self.seed, 5);
        c
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        let d = &self.data;
        if d.train_scenes == 0 || d.test_scenes == 0 || d.cloud_points == 0 {
            return Err(Error::Config(
                "data.train_scenes, data.test_scenes and data.cloud_points must be positive".into(),
            ));
        }
        if d.scene.views == 0 || d.scene.size.pixels() == 0 {
            return Err(Error::Config("data.scene needs at least one view and pixel".into()));
        }
        if !(0.0..=1.0).contains(&d.scene.csg_probability) {
            return Err(Error::Config("data.scene.csg_probability must lie in [0, 1]".into()));
        }
        d.scene.rig.validate().map_err(cfg)?;
        self.recon.model.validate().map_err(cfg)?;
        self.recon.train.validate().map_err(cfg)?;
        self.gen.model.validate().map_err(cfg)?;
        self.gen.autoencoder.validate().map_err(cfg)?;
        self.gen.train.validate().map_err(cfg)?;
        self.gen.noise.validate().map_err(cfg)?;
        if self.recon.model.image != d.scene.size || self.gen.model.image != d.scene.size {
            return Err(Error::Config(format!(
                "recon.model.image {:?} and gen.model.image {:?} must equal data.scene.size {:?}",
                self.recon.model.image, self.gen.model.image, d.scene.size
            )));
        }
        let st = &self.gen.stage;
        if st.views < 2 || st.views > d.scene.views || st.views > self.gen.model.max_views {
            return Err(Error::Config(format!(
                "gen.stage.views = {} must lie in [2, min(data.scene.views = {}, gen.model.max_views = {})]",
                st.views, d.scene.views, self.gen.model.max_views
            )));
        }
        if self.recon.train.views_per_sample > d.scene.views {
            return Err(Error::Config(
                "recon.train.views_per_sample exceeds data.scene.views".into(),
            ));
        }
        if st.correspondences == 0 || st.resolution < 8 || st.gt_resolution < 8 {
            return Err(Error::Config(
                "gen.stage needs correspondences > 0 and resolutions >= 8".into(),
            ));
        }
        let m = &self.eval.mesh;
        if m.samples == 0 || m.iou_res == 0 || !(m.tau > 0.0) {
            return Err(Error::Config(
                "eval.mesh needs positive samples, iou_res and tau".into(),
            ));
        }
        if self.eval.scenes == Some(0) {
            return Err(Error::Config("eval.scenes must be positive when set".into()));
        }
        Ok(())
    }

    /// Held-out scenes used downstream of training.
    pub fn eval_scenes(&self) -> usize {
        self.eval
            .scenes
            .unwrap_or(self.data.test_scenes)
            .min(self.data.test_scenes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_seeds_derive() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let r = c.resolved();
        assert_ne!(r.recon.train.seed, r.gen.train.seed);
        let mut d = c.clone();
        d.seed = 1;
        assert_ne!(d.resolved().recon.train.seed, r.recon.train.seed);
        assert_eq!(r.resolved(), r);
    }

    #[test]
    fn mismatched_image_sizes_are_rejected() {
        let mut c = RunConfig::default();
        c.recon.model.image = crate::geometry::ImageSize::new(32, 32);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}

//! Latent flow-matching shape generator.
//!
//! A set autoencoder maps oriented surface samples to `L x D` latent tokens
//! and decodes tokens plus query points to signed distances. A conditioned
//! transformer regresses the flow velocity between Gaussian noise and those
//! latents; meshes come from marching cubes over the decoded SDF.

pub mod autoencoder;
pub mod condition;
pub mod flow;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ImageSize, Vec3};
use crate::nn::Tensor;

pub use autoencoder::{Autoencoder, SdfDecoder, ShapeEncoder};
pub use condition::{
    build_condition_latent_augmented, build_condition_point_guided, geometry_patches, ConditionBundle, ConditionInputs,
    Conditioner, ControlEncoder, ImageEncoder, LatentAugmentedBuilder, PointGuidedBuilder, PointSampling,
};
pub use flow::{
    energy_distance, fm_loss, fm_loss_value, interpolate, noise, sample, sample_with, ConstantField, Denoiser,
    DenoiserField, VelocityField,
};
pub use train::{
    aligned_latents, condition_inputs, decode_mesh, generate, load_autoencoder, load_generator, save_autoencoder,
    save_generator, train_autoencoder, train_generator, AeSample, AeTrainConfig, GenSample, GenTrainConfig, Generator,
    LossPoint,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Conditioning {
    #[serde(rename = "point-guided")]
    PointGuided,
    #[serde(rename = "latent-augmented")]
    LatentAugmented,
}

impl Conditioning {
    pub const ALL: [Conditioning; 2] = [Conditioning::LatentAugmented, Conditioning::PointGuided];

    pub fn name(self) -> &'static str {
        match self {
            Conditioning::PointGuided => "point-guided",
            Conditioning::LatentAugmented => "latent-augmented",
        }
    }
}

impl std::str::FromStr for Conditioning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Conditioning::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown conditioning {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Latent sequence length `L`.
    pub latent_tokens: usize,
    /// Latent channel width `D`.
    pub latent_dim: usize,
    /// Transformer width `C`.
    pub width: usize,
    pub heads: usize,
    /// Surface samples fed to the shape encoder.
    pub encoder_points: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub denoiser_depth: usize,
    /// Control embedding length `K_c`.
    pub control_tokens: usize,
    /// Control points `N_c` drawn from the canonical cloud.
    pub control_points: usize,
    pub fourier_bands: usize,
    pub image: ImageSize,
    pub patch: usize,
    pub max_views: usize,
    pub sample_steps: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            latent_tokens: 64,
            latent_dim: 128,
            width: 128,
            heads: 4,
            encoder_points: 512,
            encoder_blocks: 1,
            decoder_blocks: 1,
            denoiser_depth: 4,
            control_tokens: 16,
            control_points: 512,
            fourier_bands: 8,
            image: ImageSize::new(64, 64),
            patch: 8,
            max_views: 8,
            sample_steps: 50,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.latent_tokens,
            self.latent_dim,
            self.width,
            self.heads,
            self.encoder_points,
            self.control_tokens,
            self.control_points,
            self.patch,
            self.max_views,
            self.sample_steps,
        ];
        if positive.contains(&0) || !self.width.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(
                "generator sizes must be positive; width divisible by heads".into(),
            ));
        }
        if !self.image.height.is_multiple_of(self.patch) || !self.image.width.is_multiple_of(self.patch) {
            return Err(Error::InvalidArgument(format!(
                "image {:?} is not tiled by {}-pixel patches",
                self.image, self.patch
            )));
        }
        Ok(())
    }

    /// Width of Fourier position features for 3D points.
    pub fn fourier_width(&self) -> usize {
        3 * (1 + 2 * self.fourier_bands)
    }
}

/// `L x D` latent shape code.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTokens {
    pub tokens: Tensor,
}

impl LatentTokens {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.is_empty() || !tokens.is_finite() {
            return Err(Error::InvalidArgument(
                "latent tokens must be non-empty and finite".into(),
            ));
        }
        Ok(Self { tokens })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tokens.shape()
    }

    pub fn distance(&self, other: &LatentTokens) -> f64 {
        self.tokens
            .data
            .iter()
            .zip(&other.tokens.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Canonical-frame control points.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPoints {
    pub points: Vec<Vec3>,
    pub confidence: Option<Vec<f64>>,
}

impl ControlPoints {
    pub fn new(points: Vec<Vec3>, confidence: Option<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("control point set is empty".into()));
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidArgument("control points must be finite".into()));
        }
        if let Some(c) = &confidence {
            if c.len() != points.len() {
                return Err(Error::ShapeMismatch(
                    "control confidences and points differ in length".into(),
                ));
            }
        }
        Ok(Self { points, confidence })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            self.len(),
            3,
            self.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect(),
        )
    }
}

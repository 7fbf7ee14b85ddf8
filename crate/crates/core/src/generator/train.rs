//! Autoencoder and flow-matching training loops, checkpoints, and the
//! end-to-end `generate` path.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::align::align_gt_to_prediction;
use crate::error::{Error, Result};
use crate::geometry::{unproject_indexed, OrientedPointSet, PointCloud, PointMap, Vec3};
use crate::io::{append_jsonl, read_checkpoint, write_checkpoint};
use crate::mesh::{marching_cubes, Mesh, SdfGrid};
use crate::nn::{Adam, AdamConfig, Grads, Graph, ParamStore, Tensor};
use crate::recon::train::{restore_optimizer, truncate_curves, ADAM_M, ADAM_V};
use crate::recon::{CanonicalReconstruction, ReconPrediction, RunDir};
use crate::sampling::two_stage_sample;
use crate::world::{sample_surface, ShapeSpec};

use super::autoencoder::Autoencoder;
use super::condition::{ConditionInputs, Conditioner};
use super::flow::{fm_loss, sample, Denoiser};
use super::{Conditioning, ControlPoints, GeneratorConfig, LatentTokens};

/// One JSONL curve record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub final_lr_fraction: f64,
    pub clip_norm: f64,
    /// Queries per shape jittered off the surface.
    pub near_queries: usize,
    /// Queries per shape drawn uniformly from `[-1, 1]^3`.
    pub uniform_queries: usize,
    pub near_sigma: f64,
    /// SDF targets are clamped to `[-clamp, clamp]`.
    pub clamp: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 8,
            peak_lr: 1e-3,
            warmup_steps: 100,
            final_lr_fraction: 0.05,
            clip_norm: 1.0,
            near_queries: 192,
            uniform_queries: 64,
            near_sigma: 0.02,
            clamp: 0.1,
            seed: 0,
            checkpoint_every: 500,
        }
    }
}

impl AeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.near_queries + self.uniform_queries == 0 {
            return Err(Error::InvalidArgument(
                "steps, batch size and query counts must be positive".into(),
            ));
        }
        if !(self.clamp > 0.0 && self.near_sigma >= 0.0) {
            return Err(Error::InvalidArgument(
                "clamp must be positive and near_sigma nonnegative".into(),
            ));
        }
        self.adam().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
            final_lr_fraction: self.final_lr_fraction,
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub final_lr_fraction: f64,
    pub clip_norm: f64,
    /// Probability of replacing a sample's condition with the null token.
    pub condition_dropout: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for GenTrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 8,
            peak_lr: 5e-4,
            warmup_steps: 200,
            final_lr_fraction: 0.05,
            clip_norm: 1.0,
            condition_dropout: 0.1,
            seed: 0,
            checkpoint_every: 500,
        }
    }
}

impl GenTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("steps and batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.condition_dropout) {
            return Err(Error::InvalidArgument("condition_dropout must lie in [0, 1]".into()));
        }
        self.adam().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
            final_lr_fraction: self.final_lr_fraction,
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        }
    }
}

/// Autoencoder training item: encoder input and the exact SDF.
#[derive(Debug, Clone)]
pub struct AeSample {
    pub points: OrientedPointSet,
    pub shape: ShapeSpec,
}

impl AeSample {
    pub fn from_shape(shape: &ShapeSpec, points: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            points: sample_surface(shape, points, seed)?,
            shape: shape.clone(),
        })
    }
}

/// Generator training item: target latents and, unless unconditional, the
/// canonical-frame condition.
#[derive(Debug, Clone)]
pub struct GenSample {
    pub latents: LatentTokens,
    pub inputs: Option<ConditionInputs>,
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenMeta {
    kind: String,
    model: GeneratorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    conditioning: Option<Conditioning>,
    step: usize,
}

fn save_state(base: &Path, store: &ParamStore, opt: Option<&Adam>, meta: GenMeta) -> Result<()> {
    let mut entries: Vec<(String, &Tensor)> = store.params().iter().map(|p| (p.name.clone(), &p.value)).collect();
    if let Some(opt) = opt {
        for (p, (m, v)) in store.params().iter().zip(opt.m.iter().zip(&opt.v)) {
            entries.push((format!("{ADAM_M}{}", p.name), m));
            entries.push((format!("{ADAM_V}{}", p.name), v));
        }
    }
    write_checkpoint(base, &entries, serde_json::to_value(meta)?)
}

type LoadedState = (Vec<(String, Tensor)>, Vec<(String, Tensor)>, GenMeta);

fn load_state(base: &Path, kind: &str) -> Result<LoadedState> {
    let (tensors, meta) = read_checkpoint(base)?;
    let meta: GenMeta = serde_json::from_value(meta)?;
    if meta.kind != kind {
        return Err(Error::Format(format!(
            "{} is a {} checkpoint, expected {kind}",
            base.display(),
            meta.kind
        )));
    }
    let (params, moments) = tensors
        .into_iter()
        .partition(|(n, _)| !n.starts_with(ADAM_M) && !n.starts_with(ADAM_V));
    Ok((params, moments, meta))
}

pub fn save_autoencoder(base: &Path, ae: &Autoencoder, opt: Option<&Adam>) -> Result<()> {
    let meta = GenMeta {
        kind: "autoencoder".into(),
        model: ae.cfg,
        conditioning: None,
        step: opt.map_or(0, |o| o.step),
    };
    save_state(base, &ae.store, opt, meta)
}

pub fn load_autoencoder(base: &Path) -> Result<Autoencoder> {
    let (params, _, meta) = load_state(base, "autoencoder")?;
    let mut ae = Autoencoder::new(meta.model, &mut ChaCha8Rng::seed_from_u64(0))?;
    ae.store.load(params)?;
    ae.trained = true;
    Ok(ae)
}

/// Flow-matching generator with its conditioning encoders.
#[derive(Debug, Clone)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub conditioning: Conditioning,
    pub store: ParamStore,
    pub conditioner: Conditioner,
    pub denoiser: Denoiser,
    pub trained: bool,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, conditioning: Conditioning, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let conditioner = Conditioner::new(&mut store, "cond", &cfg, &mut rng);
        let denoiser = Denoiser::new(&mut store, "den", &cfg, &mut rng);
        Ok(Self {
            cfg,
            conditioning,
            store,
            conditioner,
            denoiser,
            trained: false,
        })
    }

    /// Condition sequence fed to cross-attention; the null token when `inputs` is `None`.
    pub fn condition_sequence(&self, inputs: Option<&ConditionInputs>) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = match inputs {
            Some(inputs) => {
                let b = self
                    .conditioner
                    .bundle(&mut g, &self.store, &self.cfg, self.conditioning, inputs)?;
                self.conditioner.sequence(&mut g, &self.store, &b)
            }
            None => self.conditioner.null_sequence(&mut g, &self.store),
        };
        Ok(g.value(v).clone())
    }

    pub fn sample_latents(&self, inputs: Option<&ConditionInputs>, seed: u64) -> Result<LatentTokens> {
        if !self.trained {
            return Err(Error::Untrained("shape generator".into()));
        }
        let cond = self.condition_sequence(inputs)?;
        sample(&self.denoiser, &self.store, &cond, self.cfg.sample_steps, seed)
    }
}

pub fn save_generator(base: &Path, gen: &Generator, opt: Option<&Adam>) -> Result<()> {
    let meta = GenMeta {
        kind: "generator".into(),
        model: gen.cfg,
        conditioning: Some(gen.conditioning),
        step: opt.map_or(0, |o| o.step),
    };
    save_state(base, &gen.store, opt, meta)
}

pub fn load_generator(base: &Path) -> Result<Generator> {
    let (params, _, meta) = load_state(base, "generator")?;
    let conditioning = meta
        .conditioning
        .ok_or_else(|| Error::Format("generator checkpoint lacks its conditioning".into()))?;
    let mut gen = Generator::new(meta.model, conditioning, 0)?;
    gen.store.load(params)?;
    gen.trained = true;
    Ok(gen)
}

/// Restores a resumable run; returns whether a checkpoint was found.
fn resume(
    run: Option<&RunDir>,
    kind: &str,
    store: &mut ParamStore,
    opt: &mut Adam,
    check: impl Fn(&GenMeta) -> bool,
) -> Result<()> {
    let Some(run) = run else { return Ok(()) };
    let base = run.checkpoint_base();
    if run.resume && base.with_extension("json").exists() {
        let (params, moments, meta) = load_state(&base, kind)?;
        if !check(&meta) {
            return Err(Error::InvalidArgument(
                "checkpoint was trained with a different setup".into(),
            ));
        }
        store.load(params)?;
        restore_optimizer(opt, store, moments, meta.step)?;
        truncate_curves(&run.curves(), meta.step)?;
    } else if run.curves().exists() {
        std::fs::remove_file(run.curves())?;
    }
    Ok(())
}

fn record(
    run: Option<&RunDir>,
    point: &LossPoint,
    finished: bool,
    every: usize,
    step: usize,
    save: impl Fn(&Path) -> Result<()>,
) -> Result<()> {
    if let Some(run) = run {
        append_jsonl(&run.curves(), point)?;
        if step.is_multiple_of(every.max(1)) || finished {
            save(&run.checkpoint_base())?;
        }
    }
    Ok(())
}

/// SDF regression queries for one shape: near-surface jitter plus uniform
/// samples over the grid cube.
fn ae_queries(sample: &AeSample, cfg: &AeTrainConfig, rng: &mut impl Rng) -> Result<(Vec<Vec3>, Tensor)> {
    let jitter = Normal::new(0.0, cfg.near_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut q = Vec::with_capacity(cfg.near_queries + cfg.uniform_queries);
    for _ in 0..cfg.near_queries {
        let p = sample.points.position(rng.random_range(0..sample.points.len()));
        q.push(p + Vec3::new(jitter.sample(rng), jitter.sample(rng), jitter.sample(rng)));
    }
    for _ in 0..cfg.uniform_queries {
        q.push(Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ));
    }
    let target = q
        .iter()
        .map(|p| sample.shape.sdf(p).clamp(-cfg.clamp, cfg.clamp))
        .collect();
    Ok((q.clone(), Tensor::from_vec(q.len(), 1, target)))
}

/// Mean L1 SDF error of one batch and its gradients.
fn ae_batch(ae: &Autoencoder, samples: &[AeSample], cfg: &AeTrainConfig, step: usize) -> Result<(f64, Grads)> {
    let mut rng = step_rng(cfg.seed, step);
    let mut grads = Grads::zeros_like(&ae.store);
    let inv = 1.0 / cfg.batch_size as f64;
    let mut total = 0.0;
    for _ in 0..cfg.batch_size {
        let s = &samples[rng.random_range(0..samples.len())];
        let (q, target) = ae_queries(s, cfg, &mut rng)?;
        let mut g = Graph::new();
        let z = ae.encoder.forward(&mut g, &ae.store, &s.points);
        let pred = ae.decoder.forward(&mut g, &ae.store, z, &q);
        let t = g.input(target);
        let d = g.sub(pred, t);
        let d = g.abs(d);
        let loss = g.mean(d);
        total += g.value(loss).item() * inv;
        g.backward(loss);
        g.accumulate_param_grads(&mut grads);
    }
    grads.scale(inv);
    Ok((total, grads))
}

/// Trains the shape autoencoder (or resumes it from `run`).
pub fn train_autoencoder(
    samples: &[AeSample],
    model_cfg: &GeneratorConfig,
    cfg: &AeTrainConfig,
    run: Option<&RunDir>,
) -> Result<(Autoencoder, Vec<LossPoint>)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("autoencoder training set is empty".into()));
    }
    let mut ae = Autoencoder::new(*model_cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut opt = Adam::new(cfg.adam(), &ae.store);
    resume(run, "autoencoder", &mut ae.store, &mut opt, |m| m.model == *model_cfg)?;
    log::info!("autoencoder: {} parameters", ae.store.count());
    let mut curve = Vec::new();
    while opt.step < cfg.steps {
        let step = opt.step;
        let (loss, mut grads) = ae_batch(&ae, samples, cfg, step)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("autoencoder loss is {loss}"),
            });
        }
        let grad_norm = opt.update(&mut ae.store, &mut grads)?;
        let point = LossPoint {
            step,
            loss,
            lr: cfg.adam().lr_at(step),
            grad_norm,
        };
        record(
            run,
            &point,
            opt.step == cfg.steps,
            cfg.checkpoint_every,
            opt.step,
            |b| {
                let mut snapshot = ae.clone();
                snapshot.trained = true;
                save_autoencoder(b, &snapshot, Some(&opt))
            },
        )?;
        if step.is_multiple_of(100) {
            log::debug!("autoencoder step {step}: loss {loss:.5}");
        }
        curve.push(point);
    }
    ae.trained = true;
    Ok((ae, curve))
}

fn gen_batch(gen: &Generator, samples: &[GenSample], cfg: &GenTrainConfig, step: usize) -> Result<(f64, Grads)> {
    let mut rng = step_rng(cfg.seed, step);
    let mut grads = Grads::zeros_like(&gen.store);
    let inv = 1.0 / cfg.batch_size as f64;
    let mut total = 0.0;
    for _ in 0..cfg.batch_size {
        let s = &samples[rng.random_range(0..samples.len())];
        let t: f64 = rng.random();
        let noise_seed: u64 = rng.random();
        let drop = rng.random::<f64>() < cfg.condition_dropout;
        let mut g = Graph::new();
        let cond = match (&s.inputs, drop) {
            (Some(inputs), false) => {
                let b = gen
                    .conditioner
                    .bundle(&mut g, &gen.store, &gen.cfg, gen.conditioning, inputs)?;
                gen.conditioner.sequence(&mut g, &gen.store, &b)
            }
            _ => gen.conditioner.null_sequence(&mut g, &gen.store),
        };
        let loss = fm_loss(
            &mut g,
            &gen.store,
            &gen.denoiser,
            &s.latents.tokens,
            cond,
            t,
            noise_seed,
        )?;
        total += g.value(loss).item() * inv;
        g.backward(loss);
        g.accumulate_param_grads(&mut grads);
    }
    grads.scale(inv);
    Ok((total, grads))
}

/// Trains the flow-matching generator (or resumes it from `run`).
pub fn train_generator(
    samples: &[GenSample],
    conditioning: Conditioning,
    model_cfg: &GeneratorConfig,
    cfg: &GenTrainConfig,
    run: Option<&RunDir>,
) -> Result<(Generator, Vec<LossPoint>)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("generator training set is empty".into()));
    }
    let mut gen = Generator::new(*model_cfg, conditioning, cfg.seed)?;
    let mut opt = Adam::new(cfg.adam(), &gen.store);
    resume(run, "generator", &mut gen.store, &mut opt, |m| {
        m.model == *model_cfg && m.conditioning == Some(conditioning)
    })?;
    log::info!("generator {}: {} parameters", conditioning.name(), gen.store.count());
    let mut curve = Vec::new();
    while opt.step < cfg.steps {
        let step = opt.step;
        let (loss, mut grads) = gen_batch(&gen, samples, cfg, step)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("flow-matching loss is {loss}"),
            });
        }
        let grad_norm = opt.update(&mut gen.store, &mut grads)?;
        let point = LossPoint {
            step,
            loss,
            lr: cfg.adam().lr_at(step),
            grad_norm,
        };
        record(
            run,
            &point,
            opt.step == cfg.steps,
            cfg.checkpoint_every,
            opt.step,
            |b| save_generator(b, &gen, Some(&opt)),
        )?;
        if step.is_multiple_of(100) {
            log::debug!("generator step {step}: loss {loss:.5}");
        }
        curve.push(point);
    }
    gen.trained = true;
    Ok((gen, curve))
}

/// Condition inputs from a canonicalized reconstruction: canonical cameras,
/// per-pixel canonical geometry lifted from the predicted depth, and control
/// points drawn from the canonical cloud.
pub fn condition_inputs(
    images: &[Vec<f64>],
    pred: &ReconPrediction,
    canon: &CanonicalReconstruction,
    control_points: usize,
    seed: u64,
) -> Result<ConditionInputs> {
    if images.len() != pred.depths.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} images, {} depth maps",
            images.len(),
            pred.depths.len()
        )));
    }
    let mut point_maps = Vec::with_capacity(images.len());
    for (d, cam) in pred.depths.iter().zip(&canon.cameras) {
        let n = d.size.pixels();
        let mut pts = vec![Vec3::zeros(); n];
        let mut conf = vec![0.0; n];
        for (i, p) in unproject_indexed(d, cam)? {
            pts[i] = canon.transform.apply(&p);
            conf[i] = 1.0;
        }
        point_maps.push(PointMap::new(d.size, pts, conf)?);
    }
    let m = control_points.min(canon.cloud.len());
    let picked = two_stage_sample(&canon.cloud, m, seed)?;
    Ok(ConditionInputs {
        images: images.to_vec(),
        cameras: canon.canonical_cameras.clone(),
        point_maps,
        control: ControlPoints::new(picked.positions, picked.confidence)?,
    })
}

/// Ground-truth latents: surface samples of `shape`, aligned onto the
/// predicted canonical cloud, then encoded.
pub fn aligned_latents(
    ae: &Autoencoder,
    shape: &ShapeSpec,
    predicted: &PointCloud,
    icp_iterations: usize,
    seed: u64,
) -> Result<LatentTokens> {
    let pts = sample_surface(shape, ae.cfg.encoder_points, seed)?;
    let gt = pts.to_point_cloud();
    let t = align_gt_to_prediction(&gt, predicted, icp_iterations)?;
    let positions: Vec<Vec3> = pts.positions().iter().map(|p| t.apply(p)).collect();
    let normals: Vec<Vec3> = pts.normals().iter().map(|n| t.apply_direction(n).normalize()).collect();
    ae.encode_shape(&OrientedPointSet::from_parts(&positions, &normals)?)
}

/// Decodes latents on a `resolution^3` grid over `[-1, 1]^3` and extracts the zero set.
pub fn decode_mesh(ae: &Autoencoder, z: &LatentTokens, resolution: usize) -> Result<Mesh> {
    if resolution < 8 {
        return Err(Error::InvalidArgument(format!(
            "marching cubes needs resolution >= 8, got {resolution}"
        )));
    }
    let values = ae.decode_sdf(z, &SdfGrid::positions(resolution))?;
    marching_cubes(&SdfGrid::new(resolution, values)?, 0.0)
}

/// Samples latents under `inputs` (or unconditionally) and meshes them.
pub fn generate(
    ae: &Autoencoder,
    gen: &Generator,
    inputs: Option<&ConditionInputs>,
    resolution: usize,
    seed: u64,
) -> Result<Mesh> {
    if ae.cfg.latent_tokens != gen.cfg.latent_tokens || ae.cfg.latent_dim != gen.cfg.latent_dim {
        return Err(Error::ShapeMismatch(
            "autoencoder and generator latent shapes differ".into(),
        ));
    }
    let z = gen.sample_latents(inputs, seed)?;
    decode_mesh(ae, &z, resolution)
}

//! Seeded training loop with JSONL curves and resumable checkpoints.

use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{append_jsonl, read_checkpoint, read_jsonl, write_checkpoint};
use crate::nn::{Adam, AdamConfig, Grads, Graph, ParamStore, Tensor};
use crate::world::ViewSet;

use super::loss::{recon_loss, LossWeights, ReconTargets};
use super::model::{ReconConfig, ReconModel};
use super::Strategy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Views drawn per training sample; the first drawn view is the reference.
    pub views_per_sample: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub final_lr_fraction: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub checkpoint_every: usize,
}

impl Default for ReconTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            views_per_sample: 4,
            peak_lr: 3e-4,
            warmup_steps: 100,
            final_lr_fraction: 0.1,
            weight_decay: 0.0,
            clip_norm: 1.0,
            seed: 0,
            weights: LossWeights::default(),
            checkpoint_every: 500,
        }
    }
}

impl ReconTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.views_per_sample < 2 {
            return Err(Error::InvalidArgument(
                "steps, batch size must be positive and views per sample >= 2".into(),
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
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        }
    }
}

/// One JSONL curve record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub camera: f64,
    pub depth: f64,
    pub points: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Where a run persists its checkpoint and curves.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub dir: PathBuf,
    pub resume: bool,
}

impl RunDir {
    pub fn checkpoint_base(&self) -> PathBuf {
        self.dir.join("checkpoint")
    }

    pub fn curves(&self) -> PathBuf {
        self.dir.join("curves.jsonl")
    }
}

pub(crate) const ADAM_M: &str = "adam.m.";
pub(crate) const ADAM_V: &str = "adam.v.";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    kind: String,
    strategy: Strategy,
    model: ReconConfig,
    step: usize,
}

/// Saves parameters, optimizer moments and the step counter.
pub fn save_training_state(base: &Path, model: &ReconModel, opt: Option<&Adam>) -> Result<()> {
    let mut entries: Vec<(String, &Tensor)> = model
        .store
        .params()
        .iter()
        .map(|p| (p.name.clone(), &p.value))
        .collect();
    if let Some(opt) = opt {
        for (p, (m, v)) in model.store.params().iter().zip(opt.m.iter().zip(&opt.v)) {
            entries.push((format!("{ADAM_M}{}", p.name), m));
            entries.push((format!("{ADAM_V}{}", p.name), v));
        }
    }
    let meta = CheckpointMeta {
        kind: "recon".into(),
        strategy: model.strategy,
        model: model.cfg,
        step: opt.map_or(0, |o| o.step),
    };
    write_checkpoint(base, &entries, serde_json::to_value(meta)?)
}

fn load_state(base: &Path) -> Result<(ReconModel, Vec<(String, Tensor)>, usize)> {
    let (tensors, meta) = read_checkpoint(base)?;
    let meta: CheckpointMeta = serde_json::from_value(meta)?;
    if meta.kind != "recon" {
        return Err(Error::Format(format!(
            "{} is a {} checkpoint",
            base.display(),
            meta.kind
        )));
    }
    let mut model = ReconModel::new(meta.model, meta.strategy, 0)?;
    let (params, moments): (Vec<_>, Vec<_>) = tensors
        .into_iter()
        .partition(|(n, _)| !n.starts_with(ADAM_M) && !n.starts_with(ADAM_V));
    model.store.load(params)?;
    Ok((model, moments, meta.step))
}

/// Loads a model saved by [`save_training_state`].
pub fn load_model(base: &Path) -> Result<ReconModel> {
    Ok(load_state(base)?.0)
}

pub(crate) fn restore_optimizer(
    opt: &mut Adam,
    store: &ParamStore,
    moments: Vec<(String, Tensor)>,
    step: usize,
) -> Result<()> {
    let mut found = 0;
    for (name, t) in moments {
        let (key, is_m) = match name.strip_prefix(ADAM_M) {
            Some(k) => (k.to_string(), true),
            None => (name[ADAM_V.len()..].to_string(), false),
        };
        let id = store
            .id(&key)
            .ok_or_else(|| Error::Format(format!("optimizer state for unknown parameter {key}")))?;
        let slot = if is_m { &mut opt.m[id.0] } else { &mut opt.v[id.0] };
        if slot.shape() != t.shape() {
            return Err(Error::Format(format!("optimizer state for {key} has the wrong shape")));
        }
        *slot = t;
        found += 1;
    }
    if found != 2 * store.len() {
        return Err(Error::Format("checkpoint lacks optimizer state".into()));
    }
    opt.step = step;
    Ok(())
}

/// Drops curve records at or after `step`, the point a resumed run restarts from.
pub(crate) fn truncate_curves(curves: &Path, step: usize) -> Result<()> {
    if !curves.exists() {
        return Ok(());
    }
    let kept: Vec<serde_json::Value> = read_jsonl(curves)?
        .into_iter()
        .filter(|r| r["step"].as_u64().is_some_and(|s| (s as usize) < step))
        .collect();
    std::fs::remove_file(curves)?;
    for r in kept {
        append_jsonl(curves, &r)?;
    }
    Ok(())
}

/// Batch draw for `step`: a pure function of `(seed, step)`, so resumed runs
/// see the same data as uninterrupted ones.
fn draw_batch(dataset: &[ViewSet], cfg: &ReconTrainConfig, step: usize) -> Vec<(usize, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    (0..cfg.batch_size)
        .map(|_| {
            let s = rng.random_range(0..dataset.len());
            let n = dataset[s].len();
            let k = cfg.views_per_sample.min(n);
            (s, sample_indices(&mut rng, n, k).into_vec())
        })
        .collect()
}

/// Loss and gradients of one batch, averaged over samples.
pub fn batch_gradients(
    model: &ReconModel,
    dataset: &[ViewSet],
    batch: &[(usize, Vec<usize>)],
    weights: &LossWeights,
) -> Result<(CurvePoint, Grads)> {
    let mut grads = Grads::zeros_like(&model.store);
    let mut acc = CurvePoint {
        step: 0,
        loss: 0.0,
        camera: 0.0,
        depth: 0.0,
        points: 0.0,
        transform: None,
        consistency: None,
        lr: 0.0,
        grad_norm: 0.0,
    };
    let layout = model.cfg.layout();
    let inv = 1.0 / batch.len() as f64;
    for (scene, views) in batch {
        let sub = dataset[*scene].subset(views)?;
        let targets = ReconTargets::build(&sub, layout, model.strategy.head_frames())?;
        let images: Vec<&[f64]> = sub.images.iter().map(|v| v.as_slice()).collect();
        let mut g = Graph::new();
        let heads = model.forward_graph(&mut g, &images)?;
        let loss = recon_loss(&mut g, &heads, &targets, model.strategy, weights)?;
        let v = loss.values(&g);
        g.backward(loss.total);
        g.accumulate_param_grads(&mut grads);
        acc.loss += v.total * inv;
        acc.camera += v.camera * inv;
        acc.depth += v.depth * inv;
        acc.points += v.points * inv;
        if let Some(t) = v.transform {
            *acc.transform.get_or_insert(0.0) += t * inv;
        }
        if let Some(c) = v.consistency {
            *acc.consistency.get_or_insert(0.0) += c * inv;
        }
    }
    grads.scale(inv);
    Ok((acc, grads))
}

/// Trains a fresh model (or resumes one from `run`) and returns it with the
/// curve of every step taken in this call.
pub fn train(
    dataset: &[ViewSet],
    strategy: Strategy,
    model_cfg: &ReconConfig,
    cfg: &ReconTrainConfig,
    run: Option<&RunDir>,
) -> Result<(ReconModel, Vec<CurvePoint>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if let Some(bad) = dataset.iter().find(|v| v.len() < 2) {
        return Err(Error::InvalidArgument(format!(
            "scene with {} views; need at least 2",
            bad.len()
        )));
    }
    let mut model = ReconModel::new(*model_cfg, strategy, cfg.seed)?;
    let mut opt = Adam::new(cfg.adam(), &model.store);
    if let Some(run) = run {
        let base = run.checkpoint_base();
        if run.resume && base.with_extension("json").exists() {
            let (loaded, moments, step) = load_state(&base)?;
            if loaded.strategy != strategy || loaded.cfg != *model_cfg {
                return Err(Error::InvalidArgument(
                    "checkpoint was trained with a different setup".into(),
                ));
            }
            model = loaded;
            restore_optimizer(&mut opt, &model.store, moments, step)?;
            truncate_curves(&run.curves(), step)?;
        } else if run.curves().exists() {
            std::fs::remove_file(run.curves())?;
        }
    }
    log::info!("recon {strategy:?}: {} parameters", model.parameter_count());
    let mut curve = Vec::new();
    while opt.step < cfg.steps {
        let step = opt.step;
        let batch = draw_batch(dataset, cfg, step);
        let (mut point, mut grads) = batch_gradients(&model, dataset, &batch, &cfg.weights)?;
        if !point.loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss is {}", point.loss),
            });
        }
        point.step = step;
        point.lr = cfg.adam().lr_at(step);
        point.grad_norm = opt.update(&mut model.store, &mut grads)?;
        if let Some(run) = run {
            append_jsonl(&run.curves(), &point)?;
            if opt.step.is_multiple_of(cfg.checkpoint_every.max(1)) || opt.step == cfg.steps {
                save_training_state(&run.checkpoint_base(), &model, Some(&opt))?;
            }
        }
        if step.is_multiple_of(100) {
            log::debug!("recon step {step}: loss {:.5}", point.loss);
        }
        curve.push(point);
    }
    Ok((model, curve))
}

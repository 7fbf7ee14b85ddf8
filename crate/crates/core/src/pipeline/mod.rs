//! Persisted experiment driver. Each command owns one or more stage
//! directories under the run root:
//!
//! ```text
//! data/{train,test}/NNNN/          scenes
//! recon-{strategy}/                reconstructor checkpoint and curves
//! ae/                              shape autoencoder
//! gen-{conditioning}-{source}/     generator; source is `sim` or a strategy
//! generate/{cond}-{source}/scene-NNNN/
//! eval/{cond}-{source}/            metrics.json, summary.md
//! ablate/{source}/                 report.json, report.md
//! ```
//!
//! Every stage directory ends with a `manifest.json` listing all its files.

pub mod config;
pub mod dataset;
pub mod manifest;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use config::{DataSection, EvalSection, GenSection, ReconSection, RunConfig};
pub use manifest::{content_hash, RunManifest, Stage, StageFlags, StageStatus};

use crate::error::{Error, Result};
use crate::experiment::{
    build_gen_samples, evaluate_generator, evaluate_reconstructor, ground_truth_mesh, reconstruct_scene, sample_seed,
    ConditionSource, MeshRow, ReconRow, Split,
};
use crate::generator::{
    decode_mesh, load_autoencoder, load_generator, train_autoencoder, train_generator, AeSample, Autoencoder,
    Conditioning, Generator,
};
use crate::geometry::{CameraModel, DepthMap, Sim3Transform};
use crate::io::{
    read_json, read_mesh_obj, read_raw_grid, write_json, write_mesh_obj, write_mesh_ply, write_point_cloud_ply,
    write_raw_grid, GridHeader,
};
use crate::metrics::{evaluate_run, EvalReport, GroundTruth, RunArtifacts};
use crate::recon::{load_model, train, ReconModel, RunDir, Strategy};
use crate::world::{Scene, ViewSet};

/// Where stage-II conditioning comes from on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Simulator,
    Reconstructor(Strategy),
}

impl Source {
    pub fn tag(self) -> &'static str {
        match self {
            Source::Simulator => "sim",
            Source::Reconstructor(s) => s.name(),
        }
    }
}

/// A resolved configuration bound to a run root.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub root: PathBuf,
    pub cfg: RunConfig,
    pub flags: StageFlags,
}

impl RunContext {
    /// Validates `cfg` and derives section seeds.
    pub fn new(root: impl Into<PathBuf>, cfg: &RunConfig, flags: StageFlags) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            root: root.into(),
            cfg: cfg.resolved(),
            flags,
        })
    }

    fn data_dir(&self) -> PathBuf {
        self.root.join(DATA)
    }

    /// Upstream stages are reused when complete, never forced.
    fn upstream(&self) -> RunContext {
        RunContext {
            flags: StageFlags {
                force: false,
                resume: self.flags.resume,
            },
            ..self.clone()
        }
    }
}

/// What a command did to one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub stage: String,
    pub skipped: bool,
    pub failure: Option<String>,
}

impl Outcome {
    fn from(stage: &Stage, skipped: bool, m: &RunManifest) -> Self {
        Self {
            stage: stage.name.clone(),
            skipped,
            failure: m.failure.clone(),
        }
    }
}

const DATA: &str = "data";
const AE: &str = "ae";
const CHECKPOINT: &str = "checkpoint";

fn recon_stage(s: Strategy) -> String {
    format!("recon-{}", s.name())
}

fn gen_stage(c: Conditioning, src: Source) -> String {
    format!("gen-{}-{}", c.name(), src.tag())
}

fn generate_stage(c: Conditioning, src: Source, index: usize) -> String {
    format!("generate/{}-{}/scene-{index:04}", c.name(), src.tag())
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Renders and stores the train and test splits.
pub fn cmd_gen_data(ctx: &RunContext) -> Result<Outcome> {
    let d = &ctx.cfg.data;
    let stage = Stage::new(&ctx.root, DATA, &json!({ "seed": ctx.cfg.seed, "data": d }))?;
    let status = stage.begin(ctx.flags)?;
    if let StageStatus::Done(m) = &status {
        return Ok(Outcome::from(&stage, true, m));
    }
    let t = Instant::now();
    let dir = stage.dir();
    for (split, count) in [(Split::Train, d.train_scenes), (Split::Test, d.test_scenes)] {
        for i in 0..count {
            // scene.json is written last, so its presence marks a finished scene.
            if status == StageStatus::Resume && dataset::scene_dir(&dir, split, i).join("scene.json").is_file() {
                continue;
            }
            dataset::write_scene(&dir, &d.scene, ctx.cfg.seed, split, i, d.cloud_points)?;
        }
        log::info!("wrote {count} {} scenes", dataset::split_name(split));
    }
    let m = stage.finish(BTreeMap::from([("render".into(), secs(t))]), None)?;
    Ok(Outcome::from(&stage, false, &m))
}

fn train_views(ctx: &RunContext) -> Result<Vec<ViewSet>> {
    Ok(
        dataset::read_split(&ctx.data_dir(), Split::Train, ctx.cfg.data.train_scenes)?
            .into_iter()
            .map(|s| s.views)
            .collect(),
    )
}

/// Trains one canonicalization strategy of the reconstructor.
pub fn cmd_train_recon(ctx: &RunContext, strategy: Strategy) -> Result<Outcome> {
    let mut stage = Stage::new(
        &ctx.root,
        &recon_stage(strategy),
        &json!({ "recon": ctx.cfg.recon, "strategy": strategy }),
    )?;
    stage.require(DATA, "run gen-data first")?;
    let status = stage.begin(ctx.flags)?;
    if let StageStatus::Done(m) = &status {
        return Ok(Outcome::from(&stage, true, m));
    }
    let t = Instant::now();
    let data = train_views(ctx)?;
    let run = RunDir {
        dir: stage.dir(),
        resume: status == StageStatus::Resume,
    };
    train(&data, strategy, &ctx.cfg.recon.model, &ctx.cfg.recon.train, Some(&run))?;
    let m = stage.finish(BTreeMap::from([("train".into(), secs(t))]), None)?;
    Ok(Outcome::from(&stage, false, &m))
}

fn load_recon(ctx: &RunContext, strategy: Strategy) -> Result<ReconModel> {
    load_model(&ctx.root.join(recon_stage(strategy)).join(CHECKPOINT))
}

/// Trains the shape autoencoder on the training shapes.
fn ensure_autoencoder(ctx: &RunContext) -> Result<Outcome> {
    let g = &ctx.cfg.gen;
    let mut stage = Stage::new(&ctx.root, AE, &json!({ "model": g.model, "train": g.autoencoder }))?;
    stage.require(DATA, "run gen-data first")?;
    let status = stage.begin(ctx.flags)?;
    if let StageStatus::Done(m) = &status {
        return Ok(Outcome::from(&stage, true, m));
    }
    let t = Instant::now();
    let scenes = dataset::read_split(&ctx.data_dir(), Split::Train, ctx.cfg.data.train_scenes)?;
    let samples = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| AeSample::from_shape(&s.shape, g.model.encoder_points, g.autoencoder.seed ^ i as u64))
        .collect::<Result<Vec<_>>>()?;
    let run = RunDir {
        dir: stage.dir(),
        resume: status == StageStatus::Resume,
    };
    train_autoencoder(&samples, &g.model, &g.autoencoder, Some(&run))?;
    let m = stage.finish(BTreeMap::from([("train".into(), secs(t))]), None)?;
    Ok(Outcome::from(&stage, false, &m))
}

fn with_source<T>(ctx: &RunContext, src: Source, f: impl FnOnce(ConditionSource) -> Result<T>) -> Result<T> {
    match src {
        Source::Simulator => f(ConditionSource::Simulator(ctx.cfg.gen.noise)),
        Source::Reconstructor(s) => {
            let model = load_recon(ctx, s)?;
            f(ConditionSource::Reconstructor(&model))
        }
    }
}

fn require_source(stage: &mut Stage, src: Source) -> Result<()> {
    if let Source::Reconstructor(s) = src {
        stage.require(
            &recon_stage(s),
            &format!("run train-recon --strategy {} or pass --simulator", s.name()),
        )?;
    }
    Ok(())
}

/// Trains the autoencoder if needed, then the flow generator under one
/// conditioning scheme fed by `src`.
pub fn cmd_train_gen(ctx: &RunContext, conditioning: Conditioning, src: Source) -> Result<Vec<Outcome>> {
    let g = &ctx.cfg.gen;
    let mut stage = Stage::new(
        &ctx.root,
        &gen_stage(conditioning, src),
        &json!({
            "model": g.model,
            "train": g.train,
            "stage": g.stage,
            "noise": if src == Source::Simulator { Some(g.noise) } else { None },
            "conditioning": conditioning,
            "source": src,
        }),
    )?;
    stage.require(DATA, "run gen-data first")?;
    require_source(&mut stage, src)?;
    let ae_outcome = ensure_autoencoder(&ctx.upstream())?;
    stage.require(AE, "autoencoder training did not complete")?;
    let status = stage.begin(ctx.flags)?;
    if let StageStatus::Done(m) = &status {
        return Ok(vec![ae_outcome, Outcome::from(&stage, true, m)]);
    }
    let t = Instant::now();
    let ae = load_autoencoder(&ctx.root.join(AE).join(CHECKPOINT))?;
    let scenes = dataset::read_split(&ctx.data_dir(), Split::Train, ctx.cfg.data.train_scenes)?;
    let samples = with_source(ctx, src, |source| build_gen_samples(&ae, &scenes, source, &g.stage))?;
    let prepared = secs(t);
    let t = Instant::now();
    let run = RunDir {
        dir: stage.dir(),
        resume: status == StageStatus::Resume,
    };
    train_generator(&samples, conditioning, &g.model, &g.train, Some(&run))?;
    let m = stage.finish(
        BTreeMap::from([("samples".into(), prepared), ("train".into(), secs(t))]),
        None,
    )?;
    Ok(vec![ae_outcome, Outcome::from(&stage, false, &m)])
}

/// Sidecar of one generated scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentReport {
    pub scene: usize,
    pub view_indices: Vec<usize>,
    pub seed: u64,
    /// Maps the frame cameras and depth were predicted in to the canonical frame.
    pub transform: Sim3Transform,
    pub predicted_cameras: Vec<CameraModel>,
    pub canonical_cameras: Vec<CameraModel>,
    /// Factor taking predicted depth to canonical units.
    pub depth_scale: f64,
}

fn load_stage_two(ctx: &RunContext, conditioning: Conditioning, src: Source) -> Result<(Autoencoder, Generator)> {
    let ae = load_autoencoder(&ctx.root.join(AE).join(CHECKPOINT))?;
    let gen = load_generator(&ctx.root.join(gen_stage(conditioning, src)).join(CHECKPOINT))?;
    Ok((ae, gen))
}

fn write_depths(path: &Path, depths: &[DepthMap]) -> Result<()> {
    let size = depths[0].size;
    let data: Vec<f64> = depths
        .iter()
        .flat_map(|d| d.values.iter().zip(&d.valid).map(|(&x, &ok)| if ok { x } else { 0.0 }))
        .collect();
    write_raw_grid(path, &GridHeader::new_3d(depths.len(), size.height, size.width), &data)
}

fn read_depths(path: &Path) -> Result<Vec<DepthMap>> {
    let (h, data) = read_raw_grid(path)?;
    let size = crate::geometry::ImageSize::new(h.height, h.width);
    data.chunks(size.pixels().max(1))
        .map(|c| {
            let valid: Vec<bool> = c.iter().map(|&x| x > 0.0).collect();
            let conf = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
            DepthMap::new(size, c.to_vec(), valid, conf)
        })
        .collect()
}

fn generate_one(
    ctx: &RunContext,
    ae: &Autoencoder,
    gen: &Generator,
    conditioning: Conditioning,
    src: Source,
    scene: &Scene,
    index: usize,
) -> Result<Outcome> {
    let st = &ctx.cfg.gen.stage;
    let mut stage = Stage::new(
        &ctx.root,
        &generate_stage(conditioning, src, index),
        &json!({ "stage": st, "scene": index }),
    )?;
    stage.require(DATA, "run gen-data first")?;
    stage.require(AE, "run train-gen first")?;
    stage.require(&gen_stage(conditioning, src), "run train-gen with the same flags first")?;
    let status = stage.begin(ctx.flags)?;
    if let StageStatus::Done(m) = &status {
        return Ok(Outcome::from(&stage, true, m));
    }
    let t = Instant::now();
    let dir = stage.dir();
    let r = with_source(ctx, src, |source| {
        reconstruct_scene(source, scene, index, st, gen.cfg.control_points)
    })?;
    let seed = sample_seed(st, index);
    write_depths(&dir.join("depths.raw"), &r.canonical_depths()?)?;
    write_point_cloud_ply(&dir.join("canonical_cloud.ply"), &r.canonical.cloud)?;
    write_json(
        &dir.join("alignment.json"),
        &AlignmentReport {
            scene: index,
            view_indices: r.view_indices.clone(),
            seed,
            transform: r.canonical.transform,
            predicted_cameras: r.canonical.cameras.clone(),
            canonical_cameras: r.canonical.canonical_cameras.clone(),
            depth_scale: r.depth_scale(),
        },
    )?;
    let z = gen.sample_latents(Some(&r.inputs), seed)?;
    let failure = match decode_mesh(ae, &z, st.resolution) {
        Ok(mesh) => {
            write_mesh_obj(&dir.join("mesh.obj"), &mesh)?;
            write_mesh_ply(&dir.join("mesh.ply"), &mesh)?;
            None
        }
        Err(Error::EmptySurface) => {
            log::warn!("scene {index}: sampled shape has no surface");
            Some(Error::EmptySurface.to_string())
        }
        Err(e) => return Err(e),
    };
    let m = stage.finish(BTreeMap::from([("generate".into(), secs(t))]), failure)?;
    Ok(Outcome::from(&stage, false, &m))
}

/// Generates a mesh for held-out scene `scene`, or for every evaluation scene.
pub fn cmd_generate(
    ctx: &RunContext,
    conditioning: Conditioning,
    src: Source,
    scene: Option<usize>,
) -> Result<Vec<Outcome>> {
    let indices: Vec<usize> = match scene {
        Some(i) if i >= ctx.cfg.data.test_scenes => {
            return Err(Error::Config(format!(
                "scene {i} out of range; {} test scenes",
                ctx.cfg.data.test_scenes
            )))
        }
        Some(i) => vec![i],
        None => (0..ctx.cfg.eval_scenes()).collect(),
    };
    for name in [DATA, AE, &gen_stage(conditioning, src)] {
        if !ctx.root.join(name).join(manifest::MANIFEST).is_file() {
            return Err(Error::MissingPrerequisite(format!(
                "{name} has not been produced; run gen-data and train-gen --conditioning {} {}",
                conditioning.name(),
                match src {
                    Source::Simulator => "--simulator".to_string(),
                    Source::Reconstructor(s) => format!("--strategy {}", s.name()),
                }
            )));
        }
    }
    let (ae, gen) = load_stage_two(ctx, conditioning, src)?;
    let mut out = Vec::with_capacity(indices.len());
    for i in indices {
        let scene = dataset::read_scene(&ctx.data_dir(), Split::Test, i)?;
        out.push(generate_one(ctx, &ae, &gen, conditioning, src, &scene, i)?);
    }
    Ok(out)
}

/// Metrics of one generated scene; `report` is absent when no usable mesh exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub scene: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Mean over scenes with a usable mesh.
    pub aggregate: Option<EvalReport>,
    pub scenes: Vec<SceneEval>,
    pub failures: usize,
}

const METRIC_COLUMNS: [&str; 11] = [
    "Chamfer-L2",
    "Precision",
    "Recall",
    "F-score",
    "NC",
    "IoU",
    "ATE",
    "RPE-t",
    "RPE-r",
    "AbsRel",
    "RMSE",
];

fn report_values(r: &EvalReport) -> [f64; 11] {
    [
        r.chamfer_l2,
        r.precision,
        r.recall,
        r.f_score,
        r.normal_consistency,
        r.voxel_iou,
        r.ate,
        r.rpe_t,
        r.rpe_r,
        r.abs_rel,
        r.rmse,
    ]
}

fn markdown_table(header: &[&str], rows: &[(String, Vec<f64>)]) -> String {
    let mut s = format!("| | {} |\n|---|{}\n", header.join(" | "), "---|".repeat(header.len()));
    for (name, vals) in rows {
        let cells: Vec<String> = vals.iter().map(|v| format!("{v:.4}")).collect();
        let _ = writeln!(s, "| {name} | {} |", cells.join(" | "));
    }
    s
}

/// Scores one generated scene against ground truth.
pub fn evaluate_scene(dir: &Path, scene: &Scene, ctx: &RunContext) -> Result<SceneEval> {
    let m: RunManifest = read_json(&dir.join(manifest::MANIFEST))?;
    let al: AlignmentReport = read_json(&dir.join("alignment.json"))?;
    if let Some(f) = m.failure {
        return Ok(SceneEval {
            scene: al.scene,
            report: None,
            failure: Some(f),
        });
    }
    let mesh = read_mesh_obj(&dir.join("mesh.obj"))?;
    let depths = read_depths(&dir.join("depths.raw"))?;
    let gt_views = scene.views.subset(&al.view_indices)?;
    let gt_mesh = ground_truth_mesh(scene, ctx.cfg.gen.stage.gt_resolution)?;
    let pred = RunArtifacts {
        mesh: &mesh,
        cameras: &al.canonical_cameras,
        depths: &depths,
    };
    let gt = GroundTruth {
        mesh: &gt_mesh,
        cameras: &gt_views.cameras,
        depths: &gt_views.depths,
    };
    match evaluate_run(&pred, &gt, &ctx.cfg.eval.mesh) {
        Ok(r) => Ok(SceneEval {
            scene: al.scene,
            report: Some(r),
            failure: None,
        }),
        Err(e @ (Error::NotWatertight { .. } | Error::EmptySurface)) => Ok(SceneEval {
            scene: al.scene,
            report: None,
            failure: Some(e.to_string()),
        }),
        Err(e) => Err(e),
    }
}

/// Scores every generated evaluation scene and writes `metrics.json` and `summary.md`.
pub fn cmd_eval(ctx: &RunContext, conditioning: Conditioning, src: Source) -> Result<Outcome> {
    let name = format!("eval/{}-{}", conditioning.name(), src.tag());
    let mut stage = Stage::new(
        &ctx.root,
        &name,
        &json!({ "eval": ctx.cfg.eval, "stage": ctx.cfg.gen.stage }),
    )?;
    let n = ctx.cfg.eval_scenes();
    stage.require(DATA, "run gen-data first")?;
    for i in 0..n {
        stage.require(
            &generate_stage(conditioning, src, i),
            "run generate with the same conditioning and source first",
        )?;
    }
    if let StageStatus::Done(m) = stage.begin(ctx.flags)? {
        return Ok(Outcome::from(&stage, true, &m));
    }
    let t = Instant::now();
    let mut scenes = Vec::with_capacity(n);
    for i in 0..n {
        let scene = dataset::read_scene(&ctx.data_dir(), Split::Test, i)?;
        scenes.push(evaluate_scene(
            &ctx.root.join(generate_stage(conditioning, src, i)),
            &scene,
            ctx,
        )?);
    }
    let ok: Vec<EvalReport> = scenes.iter().filter_map(|s| s.report).collect();
    let summary = EvalSummary {
        aggregate: EvalReport::mean(&ok),
        failures: n - ok.len(),
        scenes,
    };
    let dir = stage.dir();
    write_json(&dir.join("metrics.json"), &summary)?;
    let mut md = format!("# {} / {}\n\n", conditioning.name(), src.tag());
    let mut rows: Vec<(String, Vec<f64>)> = summary
        .scenes
        .iter()
        .filter_map(|s| {
            s.report
                .map(|r| (format!("scene {:04}", s.scene), report_values(&r).to_vec()))
        })
        .collect();
    if let Some(a) = summary.aggregate {
        rows.push(("**mean**".into(), report_values(&a).to_vec()));
    }
    md.push_str(&markdown_table(&METRIC_COLUMNS, &rows));
    let _ = writeln!(md, "\n{} of {n} scenes without a usable mesh.", summary.failures);
    crate::io::atomic_write(&dir.join("summary.md"), md.as_bytes())?;
    let m = stage.finish(BTreeMap::from([("eval".into(), secs(t))]), None)?;
    Ok(Outcome::from(&stage, false, &m))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningRow {
    pub conditioning: Conditioning,
    #[serde(flatten)]
    pub metrics: MeshRow,
}

/// Both ablation tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub source: Source,
    pub strategies: Vec<ReconRow>,
    pub conditioning: Vec<ConditioningRow>,
}

impl AblationReport {
    pub fn markdown(&self) -> String {
        let t4: Vec<(String, Vec<f64>)> = self
            .strategies
            .iter()
            .map(|r| {
                (
                    r.strategy.name().to_string(),
                    vec![r.ate, r.rpe_t, r.rpe_r, r.abs_rel, r.rmse],
                )
            })
            .collect();
        let t5: Vec<(String, Vec<f64>)> = self
            .conditioning
            .iter()
            .map(|r| {
                let m = &r.metrics;
                (
                    r.conditioning.name().to_string(),
                    vec![
                        m.chamfer_l2,
                        m.precision,
                        m.recall,
                        m.f_score,
                        m.normal_consistency,
                        m.voxel_iou,
                    ],
                )
            })
            .collect();
        format!(
            "# Canonicalization strategies\n\n{}\n# Conditioning ({} source)\n\n{}",
            markdown_table(&["ATE", "RPE-t", "RPE-r", "AbsRel", "RMSE"], &t4),
            self.source.tag(),
            markdown_table(&["Chamfer-L2", "Precision", "Recall", "F-score", "NC", "IoU"], &t5),
        )
    }
}

/// Trains every strategy and conditioning scheme (reusing finished stages)
/// and writes the comparison report.
pub fn cmd_ablate(ctx: &RunContext, src: Source) -> Result<(AblationReport, Vec<Outcome>)> {
    let mut outcomes = vec![cmd_gen_data(&ctx.upstream())?];
    for s in Strategy::ALL {
        outcomes.push(cmd_train_recon(&ctx.upstream(), s)?);
    }
    for c in Conditioning::ALL {
        outcomes.extend(cmd_train_gen(&ctx.upstream(), c, src)?);
    }
    let mut stage = Stage::new(
        &ctx.root,
        &format!("ablate/{}", src.tag()),
        &json!({ "config": ctx.cfg, "source": src }),
    )?;
    stage.require(DATA, "run gen-data first")?;
    stage.require(AE, "run train-gen first")?;
    for s in Strategy::ALL {
        stage.require(&recon_stage(s), "run train-recon first")?;
    }
    for c in Conditioning::ALL {
        stage.require(&gen_stage(c, src), "run train-gen first")?;
    }
    let report_path = stage.dir().join("report.json");
    if let StageStatus::Done(m) = stage.begin(ctx.flags)? {
        outcomes.push(Outcome::from(&stage, true, &m));
        return Ok((read_json(&report_path)?, outcomes));
    }
    let t = Instant::now();
    let st = &ctx.cfg.gen.stage;
    let test = dataset::read_split(&ctx.data_dir(), Split::Test, ctx.cfg.eval_scenes())?;
    let mut strategies = Vec::new();
    for s in Strategy::ALL {
        let model = load_recon(ctx, s)?;
        strategies.push(evaluate_reconstructor(
            &model,
            &test,
            st.views,
            st.correspondences,
            st.seed,
        )?);
    }
    let recon_time = secs(t);
    let t = Instant::now();
    let mut conditioning = Vec::new();
    for c in Conditioning::ALL {
        let (ae, gen) = load_stage_two(ctx, c, src)?;
        let (row, _) = with_source(ctx, src, |source| {
            evaluate_generator(
                &ae,
                &gen,
                &test,
                Some(source),
                st,
                &ctx.cfg.eval.mesh,
                ctx.cfg.eval.align,
            )
        })?;
        conditioning.push(ConditioningRow {
            conditioning: c,
            metrics: row,
        });
    }
    let report = AblationReport {
        source: src,
        strategies,
        conditioning,
    };
    write_json(&report_path, &report)?;
    crate::io::atomic_write(&stage.dir().join("report.md"), report.markdown().as_bytes())?;
    let m = stage.finish(
        BTreeMap::from([("strategies".into(), recon_time), ("conditioning".into(), secs(t))]),
        None,
    )?;
    outcomes.push(Outcome::from(&stage, false, &m));
    Ok((report, outcomes))
}

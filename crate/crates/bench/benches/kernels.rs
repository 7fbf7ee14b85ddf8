use std::hint::black_box;

use canongen_core::align::{align_gt_to_prediction, weighted_sim3_procrustes, Correspondences};
use canongen_core::geometry::{ImageSize, PointCloud, Quat, Sim3Transform, Vec3};
use canongen_core::mesh::extract_mesh;
use canongen_core::metrics::{chamfer_l2, precision_recall_fscore};
use canongen_core::recon::{ReconConfig, ReconModel, Strategy};
use canongen_core::sampling::{fps_positions, two_stage_sample};
use canongen_core::world::{generate_scene, SceneConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            Vec3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            )
        })
        .collect()
}

fn sampling(c: &mut Criterion) {
    let mut g = c.benchmark_group("sampling");
    for n in [1_000, 10_000] {
        let pts = cloud(n, 1);
        g.bench_with_input(BenchmarkId::new("fps_512", n), &pts, |b, p| {
            b.iter(|| fps_positions(black_box(p), 512, 0).unwrap())
        });
        let pc = PointCloud::from_positions(pts.clone());
        g.bench_with_input(BenchmarkId::new("two_stage_512", n), &pc, |b, p| {
            b.iter(|| two_stage_sample(black_box(p), 512, 3).unwrap())
        });
    }
    g.finish();
}

fn alignment(c: &mut Criterion) {
    let src = cloud(512, 2);
    let t = Sim3Transform::new(1.4, Quat::from_euler_angles(0.3, -0.2, 1.1), Vec3::new(0.1, 0.2, -0.3)).unwrap();
    let dst: Vec<Vec3> = src.iter().map(|p| t.apply(p)).collect();
    let corr = Correspondences::uniform(src.clone(), dst.clone()).unwrap();
    c.bench_function("procrustes_512", |b| {
        b.iter(|| weighted_sim3_procrustes(black_box(&corr)).unwrap())
    });
    let (a, d) = (PointCloud::from_positions(src), PointCloud::from_positions(dst));
    c.bench_function("sim3_icp_512x20", |b| {
        b.iter(|| align_gt_to_prediction(black_box(&a), black_box(&d), 20).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let a = PointCloud::from_positions(cloud(10_000, 3));
    let b2 = PointCloud::from_positions(cloud(10_000, 4));
    c.bench_function("chamfer_10k", |b| {
        b.iter(|| chamfer_l2(black_box(&a), black_box(&b2)).unwrap())
    });
    c.bench_function("fscore_10k", |b| {
        b.iter(|| precision_recall_fscore(black_box(&a), black_box(&b2), 0.01).unwrap())
    });
}

fn meshing(c: &mut Criterion) {
    let mut g = c.benchmark_group("marching_cubes");
    g.sample_size(10);
    for res in [32, 64] {
        g.bench_with_input(BenchmarkId::new("sphere", res), &res, |b, &r| {
            b.iter(|| extract_mesh(|p| p.norm() - 0.8, r).unwrap())
        });
    }
    g.finish();
}

fn reconstructor(c: &mut Criterion) {
    let cfg = SceneConfig {
        views: 4,
        size: ImageSize::new(32, 32),
        ..SceneConfig::default()
    };
    let scene = generate_scene(&cfg, 0).unwrap();
    let model = ReconModel::new(
        ReconConfig {
            image: cfg.size,
            patch: 8,
            width: 32,
            heads: 2,
            depth: 2,
        },
        Strategy::BranchRepurposing,
        0,
    )
    .unwrap();
    let images: Vec<&[f64]> = scene.views.images.iter().map(|v| v.as_slice()).collect();
    let mut g = c.benchmark_group("reconstructor");
    g.sample_size(20);
    g.bench_function("forward_4x32x32", |b| {
        b.iter(|| model.forward(black_box(&images)).unwrap())
    });
    g.bench_function("render_4x32x32", |b| {
        b.iter(|| generate_scene(black_box(&cfg), 1).unwrap())
    });
    g.finish();
}

criterion_group!(benches, sampling, alignment, metrics, meshing, reconstructor);
criterion_main!(benches);

//! Emulated feed-forward reconstruction outputs with controlled corruption.
//!
//! Frames: the world frame is the canonical authoring frame. The reference
//! frame is the first camera's frame scaled by `1 / sigma`, where `sigma` is the
//! mean distance of all valid ground-truth points from the first camera.
//! Cameras and depths are emitted in the reference frame; point maps in the
//! canonical frame `gauge(world)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ViewSet;
use crate::error::{Error, Result};
use crate::geometry::{unproject_indexed, CameraModel, DepthMap, PointMap, Quat, Sim3Transform, Vec3};

/// Corruption applied by [`simulate_reconstruction`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Additive Gaussian depth noise, reference-frame units.
    pub depth_sigma: f64,
    /// Isotropic Gaussian point noise, canonical units.
    pub pointmap_sigma: f64,
    /// Probability that a valid point-map pixel is replaced by a uniform sample
    /// from the canonical unit box.
    pub outlier_fraction: f64,
    /// Per-axis rotation-vector noise on non-reference cameras, radians.
    pub camera_rot_sigma: f64,
    /// Translation noise on non-reference cameras, reference-frame units.
    pub camera_trans_sigma: f64,
    /// Mixing weight between error-driven and random confidence.
    pub confidence_fidelity: f64,
}

impl NoiseModel {
    pub fn zero() -> Self {
        Self {
            depth_sigma: 0.0,
            pointmap_sigma: 0.0,
            outlier_fraction: 0.0,
            camera_rot_sigma: 0.0,
            camera_trans_sigma: 0.0,
            confidence_fidelity: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("depth_sigma", self.depth_sigma),
            ("pointmap_sigma", self.pointmap_sigma),
            ("camera_rot_sigma", self.camera_rot_sigma),
            ("camera_trans_sigma", self.camera_trans_sigma),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be nonnegative, got {v}")));
            }
        }
        for (name, v) in [
            ("outlier_fraction", self.outlier_fraction),
            ("confidence_fidelity", self.confidence_fidelity),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            depth_sigma: 0.01,
            pointmap_sigma: 0.01,
            outlier_fraction: 0.02,
            camera_rot_sigma: 0.01,
            camera_trans_sigma: 0.01,
            confidence_fidelity: 0.8,
        }
    }
}

/// One view of simulated output.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedView {
    /// Reference-frame depth.
    pub depth: DepthMap,
    /// Canonical-frame point map; invalid pixels hold zeros with zero confidence.
    pub points: PointMap,
    /// Reference-frame camera estimate.
    pub camera: CameraModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedReconstruction {
    pub views: Vec<SimulatedView>,
    pub ref_from_world: Sim3Transform,
    /// Ground-truth map from the reference frame to the canonical frame.
    pub ref_to_canonical: Sim3Transform,
}

/// Reference frame of a view set: first camera, normalized by the mean
/// distance of the valid ground-truth points from that camera.
pub fn reference_frame(views: &ViewSet) -> Result<Sim3Transform> {
    let cam0 = views.cameras[0];
    let mut sum = 0.0;
    let mut count = 0usize;
    for (depth, cam) in views.depths.iter().zip(&views.cameras) {
        for (_, p) in unproject_indexed(depth, cam)? {
            sum += cam0.world_to_camera(&p).norm();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Degenerate("no valid pixels in any view".into()));
    }
    let sigma = sum / count as f64;
    Sim3Transform::new(1.0 / sigma, *cam0.rotation(), cam0.translation() / sigma)
}

fn confidence(error: f64, scale: f64, fidelity: f64, rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.random();
    fidelity / (1.0 + error / scale) + (1.0 - fidelity) * u
}

/// Corrupts the ground truth of `views` according to `noise`.
pub fn simulate_reconstruction(
    views: &ViewSet,
    noise: &NoiseModel,
    canonical_gauge: &Sim3Transform,
    seed: u64,
) -> Result<SimulatedReconstruction> {
    views.validate()?;
    noise.validate()?;
    let ref_from_world = reference_frame(views)?;
    let ref_to_canonical = canonical_gauge.compose(&ref_from_world.inverse());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = |s: f64| Normal::new(0.0, s).map_err(|e| Error::InvalidArgument(e.to_string()));
    let depth_noise = gauss(noise.depth_sigma)?;
    let point_noise = gauss(noise.pointmap_sigma)?;
    let rot_noise = gauss(noise.camera_rot_sigma)?;
    let trans_noise = gauss(noise.camera_trans_sigma)?;
    let depth_scale = noise.depth_sigma.max(1e-3);
    let point_scale = noise.pointmap_sigma.max(1e-3);
    let s_ref = ref_from_world.scale();

    let mut out = Vec::with_capacity(views.len());
    for (v, (gt_depth, cam)) in views.depths.iter().zip(&views.cameras).enumerate() {
        let size = gt_depth.size;
        let n = size.pixels();
        let mut depth = vec![0.0; n];
        let mut depth_conf = vec![0.0; n];
        let mut points = vec![Vec3::zeros(); n];
        let mut point_conf = vec![0.0; n];
        for (i, world) in unproject_indexed(gt_depth, cam)? {
            let d_true = gt_depth.values[i] * s_ref;
            let mut d = d_true + depth_noise.sample(&mut rng);
            if d <= 1e-6 {
                d = 1e-6;
            }
            depth[i] = d;
            depth_conf[i] = confidence((d - d_true).abs(), depth_scale, noise.confidence_fidelity, &mut rng);

            let p_true = canonical_gauge.apply(&world);
            let p = if rng.random::<f64>() < noise.outlier_fraction {
                let box_sample = Vec3::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                );
                canonical_gauge.apply(&box_sample)
            } else {
                p_true
                    + Vec3::new(
                        point_noise.sample(&mut rng),
                        point_noise.sample(&mut rng),
                        point_noise.sample(&mut rng),
                    ) * canonical_gauge.scale()
            };
            points[i] = p;
            point_conf[i] = confidence(
                (p - p_true).norm() / canonical_gauge.scale(),
                point_scale,
                noise.confidence_fidelity,
                &mut rng,
            );
        }
        let mut camera = cam.transformed(&ref_from_world);
        if v > 0 {
            let dr = Quat::from_scaled_axis(Vec3::new(
                rot_noise.sample(&mut rng),
                rot_noise.sample(&mut rng),
                rot_noise.sample(&mut rng),
            ));
            let dt = Vec3::new(
                trans_noise.sample(&mut rng),
                trans_noise.sample(&mut rng),
                trans_noise.sample(&mut rng),
            );
            camera = CameraModel::new(dr * camera.rotation(), camera.translation() + dt, camera.fov())?;
        }
        out.push(SimulatedView {
            depth: DepthMap::new(size, depth, gt_depth.valid.clone(), depth_conf)?,
            points: PointMap::new(size, points, point_conf)?,
            camera,
        });
    }
    Ok(SimulatedReconstruction {
        views: out,
        ref_from_world,
        ref_to_canonical,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::canonicalize_views;
    use crate::geometry::ImageSize;
    use crate::world::{generate_scene, SceneConfig};

    fn scene(seed: u64) -> crate::world::Scene {
        let cfg = SceneConfig {
            views: 4,
            size: ImageSize::new(24, 24),
            ..SceneConfig::default()
        };
        generate_scene(&cfg, seed).unwrap()
    }

    fn gauge() -> Sim3Transform {
        Sim3Transform::new(
            1.7,
            Quat::from_scaled_axis(Vec3::new(0.3, -1.1, 0.4)),
            Vec3::new(0.2, 0.1, -0.4),
        )
        .unwrap()
    }

    #[test]
    fn zero_noise_matches_ground_truth() {
        let sc = scene(0);
        let g = gauge();
        let sim = simulate_reconstruction(&sc.views, &NoiseModel::zero(), &g, 1).unwrap();
        let ref_from_world = sim.ref_from_world;
        for (v, view) in sim.views.iter().enumerate() {
            let gt = &sc.views.depths[v];
            for (i, world) in unproject_indexed(gt, &sc.views.cameras[v]).unwrap() {
                assert!((view.points.points[i] - g.apply(&world)).norm() < 1e-12);
                assert!((view.depth.values[i] - gt.values[i] * ref_from_world.scale()).abs() < 1e-12);
                // The reference-frame camera sees the reference-frame point at the same depth.
                let q = ref_from_world.apply(&world);
                assert!((view.camera.world_to_camera(&q).z - view.depth.values[i]).abs() < 1e-9);
            }
        }
        assert!(sim.views[0].camera.translation().norm() < 1e-12);
        let depths: Vec<_> = sim.views.iter().map(|v| v.depth.clone()).collect();
        let cams: Vec<_> = sim.views.iter().map(|v| v.camera).collect();
        let maps: Vec<_> = sim.views.iter().map(|v| v.points.clone()).collect();
        let c = canonicalize_views(&depths, &cams, &maps, 256, 0).unwrap();
        let t = c.report.transform;
        let truth = sim.ref_to_canonical;
        assert!((t.scale() / truth.scale() - 1.0).abs() < 1e-9);
        assert!(t.rotation_angle_to(&truth) < 1e-9);
        assert!((t.translation() - truth.translation()).norm() < 1e-9);
    }

    #[test]
    fn outlier_fraction_counted() {
        let sc = scene(2);
        let noise = NoiseModel {
            outlier_fraction: 0.1,
            pointmap_sigma: 0.002,
            ..NoiseModel::zero()
        };
        let sim = simulate_reconstruction(&sc.views, &noise, &Sim3Transform::identity(), 3).unwrap();
        let mut large = 0usize;
        let mut total = 0usize;
        for (v, view) in sim.views.iter().enumerate() {
            for (i, world) in unproject_indexed(&sc.views.depths[v], &sc.views.cameras[v]).unwrap() {
                total += 1;
                if (view.points.points[i] - world).norm() > 5.0 * noise.pointmap_sigma {
                    large += 1;
                }
            }
        }
        let frac = large as f64 / total as f64;
        assert!((frac - 0.1).abs() <= 0.02, "{frac} over {total} pixels");
    }

    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn confidence_tracks_error() {
        let sc = scene(4);
        let noise = NoiseModel {
            pointmap_sigma: 0.01,
            outlier_fraction: 0.05,
            confidence_fidelity: 1.0,
            ..NoiseModel::zero()
        };
        let sim = simulate_reconstruction(&sc.views, &noise, &Sim3Transform::identity(), 5).unwrap();
        let mut conf = Vec::new();
        let mut neg_err = Vec::new();
        for (v, view) in sim.views.iter().enumerate() {
            for (i, world) in unproject_indexed(&sc.views.depths[v], &sc.views.cameras[v]).unwrap() {
                conf.push(view.points.confidence[i]);
                neg_err.push(-(view.points.points[i] - world).norm());
            }
        }
        let rho = pearson(&ranks(&conf), &ranks(&neg_err));
        assert!(rho >= 0.9, "rank correlation {rho}");
    }

    #[test]
    fn deterministic() {
        let sc = scene(6);
        let n = NoiseModel::default();
        let a = simulate_reconstruction(&sc.views, &n, &gauge(), 9).unwrap();
        let b = simulate_reconstruction(&sc.views, &n, &gauge(), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_noise_rejected() {
        let sc = scene(7);
        let bad = NoiseModel {
            outlier_fraction: 1.5,
            ..NoiseModel::zero()
        };
        assert!(simulate_reconstruction(&sc.views, &bad, &Sim3Transform::identity(), 0).is_err());
    }
}

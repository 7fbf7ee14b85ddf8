//! Near area-uniform surface sampling by thin-shell rejection plus projection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::shape::ShapeSpec;
use crate::error::{Error, Result};
use crate::geometry::{OrientedPointSet, Vec3};

/// Residual |sdf| accepted after projection.
pub const SURFACE_TOLERANCE: f64 = 1e-5;
const PROJECTION_ITERATIONS: usize = 100;
const FD_STEP: f64 = 1e-6;

/// Moves `p` onto the zero level set by Newton steps along the gradient.
pub fn project_to_surface(shape: &ShapeSpec, p: &Vec3) -> Result<Vec3> {
    let mut q = *p;
    for _ in 0..PROJECTION_ITERATIONS {
        let d = shape.sdf(&q);
        if d.abs() < SURFACE_TOLERANCE {
            return Ok(q);
        }
        let g = shape.gradient(&q, FD_STEP);
        let gn2 = g.norm_squared();
        if gn2 < 1e-12 {
            break;
        }
        q -= g * (d / gn2);
    }
    Err(Error::ProjectionFailed {
        iterations: PROJECTION_ITERATIONS,
    })
}

/// Surface positions only. Candidates are drawn uniformly in the bounding cube
/// and kept inside a thin shell `|sdf| < delta`, whose volume is proportional
/// to area, then projected.
pub fn sample_surface_points(shape: &ShapeSpec, n: usize, seed: u64) -> Result<Vec<Vec3>> {
    shape.validate()?;
    let r = shape.bounding_radius();
    let delta = 0.01 * r;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let max_attempts = 20_000 + 50_000 * n;
    let mut attempts = 0;
    let mut failures = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::EmptySurface);
        }
        let p = Vec3::new(
            rng.random_range(-r..r),
            rng.random_range(-r..r),
            rng.random_range(-r..r),
        );
        if shape.sdf(&p).abs() >= delta {
            continue;
        }
        match project_to_surface(shape, &p) {
            Ok(q) => out.push(q),
            Err(e) => {
                // Kinks of CSG fields occasionally stall a projection; give up
                // only if it is systematic.
                failures += 1;
                if failures > 10 + n / 10 {
                    return Err(e);
                }
            }
        }
    }
    Ok(out)
}

/// `n` oriented surface samples with unit outward normals.
pub fn sample_surface(shape: &ShapeSpec, n: usize, seed: u64) -> Result<OrientedPointSet> {
    let positions = sample_surface_points(shape, n, seed)?;
    let normals: Vec<Vec3> = positions.iter().map(|p| shape.normal(p)).collect();
    OrientedPointSet::from_parts(&positions, &normals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::shape::{Pose, ShapeNode};

    #[test]
    fn sphere_samples_on_surface() {
        let s = ShapeSpec::sphere(1.0).unwrap();
        let set = sample_surface(&s, 2000, 0).unwrap();
        assert_eq!(set.len(), 2000);
        for i in 0..set.len() {
            let p = set.position(i);
            assert!((p.norm() - 1.0).abs() <= 1e-4);
            assert!((set.normal(i) - p / p.norm()).norm() < 1e-3);
        }
    }

    #[test]
    fn box_normals_axis_aligned() {
        let h = [0.5, 0.3, 0.4];
        let s = ShapeSpec::new(ShapeNode::Box {
            half_extents: h,
            pose: Pose::default(),
        })
        .unwrap();
        let set = sample_surface(&s, 2000, 1).unwrap();
        let mut checked = 0;
        for i in 0..set.len() {
            let p = set.position(i);
            // Distance to the nearest edge: second-smallest gap to a face.
            let mut gaps: Vec<f64> = (0..3).map(|k| h[k] - p[k].abs()).collect();
            gaps.sort_by(f64::total_cmp);
            if gaps[1] < 0.02 {
                continue;
            }
            checked += 1;
            let n = set.normal(i);
            let largest = n.abs().max();
            assert!((largest - 1.0).abs() < 1e-2, "normal {n:?} at {p:?}");
        }
        assert!(checked > 1500);
    }

    #[test]
    fn sphere_octants_balanced() {
        // Octant counts ~ Binomial(n, 1/8); allow 5 standard deviations.
        let n = 8000;
        let s = ShapeSpec::sphere(1.0).unwrap();
        let pts = sample_surface_points(&s, n, 7).unwrap();
        let mut counts = [0usize; 8];
        for p in &pts {
            let k = (p.x > 0.0) as usize | ((p.y > 0.0) as usize) << 1 | ((p.z > 0.0) as usize) << 2;
            counts[k] += 1;
        }
        let mean = n as f64 / 8.0;
        let sd = (n as f64 * 0.125 * 0.875).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() < 5.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn csg_samples_on_level_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..5 {
            let s = crate::world::shape::random_shape(&mut rng, i, 1.0).unwrap();
            for p in sample_surface_points(&s, 300, i).unwrap() {
                assert!(s.sdf(&p).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn deterministic() {
        let s = ShapeSpec::sphere(0.5).unwrap();
        assert_eq!(sample_surface(&s, 50, 3).unwrap(), sample_surface(&s, 50, 3).unwrap());
    }
}

//! Random look-at camera rigs around the origin.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, Vec3};

/// Closed interval `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interval {
    pub min: f64,
    pub max: f64,
}

impl Interval {
    pub fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn fixed(v: f64) -> Self {
        Self { min: v, max: v }
    }

    fn check(&self, what: &str, lo: f64, hi: f64) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite() && self.min <= self.max && self.min >= lo && self.max <= hi) {
            return Err(Error::InvalidArgument(format!(
                "{what} range [{}, {}] must be ordered and within [{lo}, {hi}]",
                self.min, self.max
            )));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut impl Rng) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.random_range(self.min..=self.max)
        }
    }
}

/// Camera sampling parameters. Elevation is measured from the xy-plane, world up is +z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraRig {
    pub fov: Interval,
    pub elevation: Interval,
    pub radius: Interval,
    /// Standard deviation of the Gaussian offset added to each camera center.
    pub perturb_sigma: f64,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            fov: Interval::new(0.7, 1.0),
            elevation: Interval::new(-0.3, 0.9),
            radius: Interval::new(1.6, 2.2),
            perturb_sigma: 0.03,
        }
    }
}

impl CameraRig {
    pub fn validate(&self) -> Result<()> {
        self.fov.check("fov", 1e-3, std::f64::consts::PI - 1e-3)?;
        self.elevation
            .check("elevation", -std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2)?;
        self.radius.check("radius", 1e-6, f64::MAX)?;
        if !(self.perturb_sigma >= 0.0 && self.perturb_sigma.is_finite()) {
            return Err(Error::InvalidArgument("perturbation sigma must be nonnegative".into()));
        }
        Ok(())
    }
}

/// `n` cameras looking at the origin from a perturbed sphere. Azimuth is uniform
/// in `[0, 2 pi)`; the center offset is applied after orienting, so the optical
/// axis misses the origin by at most the offset length.
pub fn sample_cameras(n: usize, rig: &CameraRig, seed: u64) -> Result<Vec<CameraModel>> {
    rig.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, rig.perturb_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let azimuth = rng.random_range(0.0..std::f64::consts::TAU);
        let elevation = rig.elevation.draw(&mut rng);
        let radius = rig.radius.draw(&mut rng);
        let fov = rig.fov.draw(&mut rng);
        let eye = radius
            * Vec3::new(
                elevation.cos() * azimuth.cos(),
                elevation.cos() * azimuth.sin(),
                elevation.sin(),
            );
        let cam = CameraModel::look_at(&eye, &Vec3::zeros(), &Vec3::z(), [fov, fov])?;
        let offset = Vec3::new(
            normal.sample(&mut rng),
            normal.sample(&mut rng),
            normal.sample(&mut rng),
        );
        let moved = eye + offset;
        out.push(CameraModel::new(
            *cam.rotation(),
            -(cam.rotation() * moved),
            [fov, fov],
        )?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_radius_without_perturbation() {
        let rig = CameraRig {
            radius: Interval::fixed(2.5),
            perturb_sigma: 0.0,
            ..CameraRig::default()
        };
        for cam in sample_cameras(100, &rig, 0).unwrap() {
            assert!((cam.center().norm() - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn optical_axis_near_origin() {
        let rig = CameraRig {
            perturb_sigma: 0.05,
            ..CameraRig::default()
        };
        for cam in sample_cameras(200, &rig, 1).unwrap() {
            let c = cam.center();
            let f = cam.forward();
            let miss = (-c - f * (-c).dot(&f)).norm();
            // Chi(3) tail beyond 6 sigma is negligible.
            assert!(miss <= 6.0 * 0.05, "axis misses origin by {miss}");
        }
        let exact = sample_cameras(
            50,
            &CameraRig {
                perturb_sigma: 0.0,
                ..rig
            },
            2,
        )
        .unwrap();
        for cam in exact {
            let c = cam.center();
            assert!((c.normalize() + cam.forward()).norm() < 1e-9);
        }
    }

    #[test]
    fn azimuth_uniform() {
        let rig = CameraRig {
            perturb_sigma: 0.0,
            elevation: Interval::fixed(0.2),
            ..CameraRig::default()
        };
        let n = 10_000;
        let bins = 8;
        let mut counts = vec![0usize; bins];
        for cam in sample_cameras(n, &rig, 3).unwrap() {
            let c = cam.center();
            let a = c.y.atan2(c.x).rem_euclid(std::f64::consts::TAU);
            counts[((a / std::f64::consts::TAU * bins as f64) as usize).min(bins - 1)] += 1;
        }
        let p = 1.0 / bins as f64;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in &counts {
            assert!((*c as f64 - n as f64 * p).abs() < 5.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn invalid_ranges_rejected() {
        let bad = CameraRig {
            radius: Interval::new(2.0, 1.0),
            ..CameraRig::default()
        };
        assert!(sample_cameras(1, &bad, 0).is_err());
        let bad = CameraRig {
            fov: Interval::new(0.5, 4.0),
            ..CameraRig::default()
        };
        assert!(sample_cameras(1, &bad, 0).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let rig = CameraRig::default();
        assert_eq!(
            sample_cameras(10, &rig, 9).unwrap(),
            sample_cameras(10, &rig, 9).unwrap()
        );
    }
}

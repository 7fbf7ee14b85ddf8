//! Sphere-traced depth and headlight shading.

use super::shape::ShapeSpec;
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, DepthMap, ImageSize};

pub const MAX_STEPS: usize = 256;
pub const HIT_EPSILON: f64 = 1e-4;

/// Ray parameter of the first hit along a unit direction, if any.
pub fn trace_ray(shape: &ShapeSpec, origin: &crate::geometry::Vec3, dir: &crate::geometry::Vec3) -> Option<f64> {
    // Clip to the bounding sphere so marching starts close to the object.
    let r = shape.bounding_radius() * 1.01 + 1e-3;
    let b = origin.dot(dir);
    let c = origin.norm_squared() - r * r;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t_exit = -b + sq;
    if t_exit < 0.0 {
        return None;
    }
    let mut t = (-b - sq).max(0.0);
    for _ in 0..MAX_STEPS {
        let d = shape.sdf(&(origin + dir * t));
        if d < HIT_EPSILON {
            return Some(refine_hit(shape, origin, dir, t, t_exit));
        }
        t += d;
        if t > t_exit {
            return None;
        }
    }
    None
}

/// Near grazing incidence the first point within `HIT_EPSILON` can sit well
/// before the actual crossing; march on with a floor step and bisect the sign
/// change if one follows shortly. Tangent rays keep the original hit.
fn refine_hit(
    shape: &ShapeSpec,
    origin: &crate::geometry::Vec3,
    dir: &crate::geometry::Vec3,
    t_hit: f64,
    t_exit: f64,
) -> f64 {
    const FLOOR: f64 = 2.0 * HIT_EPSILON;
    const EXTRA_STEPS: usize = 64;
    let mut lo = t_hit;
    let mut d = shape.sdf(&(origin + dir * lo));
    if d <= 0.0 {
        return lo;
    }
    for _ in 0..EXTRA_STEPS {
        let hi = lo + d.max(FLOOR);
        if hi > t_exit {
            break;
        }
        let dh = shape.sdf(&(origin + dir * hi));
        if dh <= 0.0 {
            let (mut a, mut b) = (lo, hi);
            for _ in 0..40 {
                let m = 0.5 * (a + b);
                if shape.sdf(&(origin + dir * m)) > 0.0 {
                    a = m;
                } else {
                    b = m;
                }
            }
            return 0.5 * (a + b);
        }
        lo = hi;
        d = dh;
    }
    t_hit
}

/// Renders intensity in `[0, 1]` and z-depth. Missed pixels are invalid with
/// zero depth and zero confidence; hits carry confidence 1.
pub fn render_view(shape: &ShapeSpec, cam: &CameraModel, size: ImageSize) -> Result<(Vec<f64>, DepthMap)> {
    let origin = cam.center();
    if shape.sdf(&origin) <= 0.0 {
        return Err(Error::InvalidArgument("camera center lies inside the shape".into()));
    }
    let n = size.pixels();
    let mut intensity = vec![0.0; n];
    let mut depth = vec![0.0; n];
    let mut valid = vec![false; n];
    let mut confidence = vec![0.0; n];
    for row in 0..size.height {
        for col in 0..size.width {
            let ray = cam.pixel_ray(col as f64 + 0.5, row as f64 + 0.5, size);
            let ray_cam = ray.normalize();
            let dir = cam.rotation().inverse() * ray_cam;
            if let Some(t) = trace_ray(shape, &origin, &dir) {
                let i = row * size.width + col;
                let hit = origin + dir * t;
                depth[i] = t * ray_cam.z;
                valid[i] = true;
                confidence[i] = 1.0;
                intensity[i] = shape.normal(&hit).dot(&(-dir)).clamp(0.0, 1.0);
            }
        }
    }
    Ok((intensity, DepthMap::new(size, depth, valid, confidence)?))
}

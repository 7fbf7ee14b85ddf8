//! Point subset selection: seeded uniform sampling, farthest point sampling and
//! the uniform-then-FPS two-stage scheme used for canonicalization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};

/// Default correspondence budget for canonicalization.
pub const DEFAULT_CORRESPONDENCES: usize = 1024;

/// Indices into a source cloud together with the seed that produced them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleIndexSet {
    pub indices: Vec<usize>,
    pub seed: u64,
}

/// Draws `k` distinct indices out of `n` without replacement.
pub fn uniform_indices(n: usize, k: usize, seed: u64) -> Result<SampleIndexSet> {
    if k > n {
        return Err(Error::NotEnoughPoints {
            requested: k,
            available: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = rand::seq::index::sample(&mut rng, n, k).into_vec();
    Ok(SampleIndexSet { indices, seed })
}

pub fn uniform_sample(cloud: &PointCloud, k: usize, seed: u64) -> Result<SampleIndexSet> {
    uniform_indices(cloud.len(), k, seed)
}

/// Greedy max-min farthest point sampling over raw positions. Ties go to the
/// lowest index; already selected points are never picked twice.
pub fn fps_positions(points: &[Vec3], m: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m > n {
        return Err(Error::NotEnoughPoints {
            requested: m,
            available: n,
        });
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    if start >= n {
        return Err(Error::InvalidArgument(format!(
            "FPS start index {start} out of range for {n} points"
        )));
    }
    let mut selected = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut order = Vec::with_capacity(m);
    let mut current = start;
    loop {
        selected[current] = true;
        order.push(current);
        if order.len() == m {
            break;
        }
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if selected[i] {
                continue;
            }
            let d = (points[i] - c).norm_squared();
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(order)
}

pub fn fps(cloud: &PointCloud, m: usize, start: usize) -> Result<SampleIndexSet> {
    Ok(SampleIndexSet {
        indices: fps_positions(&cloud.positions, m, start)?,
        seed: 0,
    })
}

/// Uniformly samples `min(4m, n)` candidates, then runs FPS down to `m`
/// starting at the first uniform pick. Returns indices into `points`.
pub fn two_stage_indices(points: &[Vec3], m: usize, seed: u64) -> Result<SampleIndexSet> {
    if m == 0 {
        return Err(Error::InvalidArgument("two-stage sampling needs m > 0".into()));
    }
    let n = points.len();
    if m > n {
        return Err(Error::NotEnoughPoints {
            requested: m,
            available: n,
        });
    }
    if m == n {
        return Ok(SampleIndexSet {
            indices: (0..n).collect(),
            seed,
        });
    }
    let stage_one = uniform_indices(n, (4 * m).min(n), seed)?;
    let subset: Vec<Vec3> = stage_one.indices.iter().map(|&i| points[i]).collect();
    let picked = fps_positions(&subset, m, 0)?;
    Ok(SampleIndexSet {
        indices: picked.into_iter().map(|j| stage_one.indices[j]).collect(),
        seed,
    })
}

pub fn two_stage_sample(cloud: &PointCloud, m: usize, seed: u64) -> Result<PointCloud> {
    let idx = two_stage_indices(&cloud.positions, m, seed)?;
    Ok(cloud.select(&idx.indices))
}

/// Largest distance from any point to its nearest selected point.
pub fn covering_radius(points: &[Vec3], selected: &[usize]) -> f64 {
    points
        .iter()
        .map(|p| {
            selected
                .iter()
                .map(|&s| (points[s] - p).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

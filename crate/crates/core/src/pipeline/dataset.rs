//! Scene directories: `scene.json` (seed, shape, cameras), `images.raw` and
//! `depths.raw` as `V x H x W` grids, and `cloud.ply` with canonical surface
//! samples. Depth zero marks a background pixel.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{scene_seed, Split};
use crate::geometry::{CameraModel, DepthMap, ImageSize};
use crate::io::{read_json, read_raw_grid, write_json, write_point_cloud_ply, write_raw_grid, GridHeader};
use crate::world::{generate_scene, sample_surface, Scene, SceneConfig, ShapeSpec, ViewSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    seed: u64,
    shape: ShapeSpec,
    cameras: Vec<CameraModel>,
}

pub fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

pub fn scene_dir(data: &Path, split: Split, index: usize) -> PathBuf {
    data.join(split_name(split)).join(format!("{index:04}"))
}

/// Generates scene `index` of `split` and writes it below `data`.
pub fn write_scene(
    data: &Path,
    cfg: &SceneConfig,
    seed: u64,
    split: Split,
    index: usize,
    cloud_points: usize,
) -> Result<()> {
    let s = scene_seed(seed, split, index);
    let scene = generate_scene(cfg, s)?;
    let dir = scene_dir(data, split, index);
    let v = &scene.views;
    let header = GridHeader::new_3d(v.len(), v.size.height, v.size.width);
    let images: Vec<f64> = v.images.iter().flatten().copied().collect();
    let depths: Vec<f64> = v
        .depths
        .iter()
        .flat_map(|d| d.values.iter().zip(&d.valid).map(|(&x, &ok)| if ok { x } else { 0.0 }))
        .collect();
    write_raw_grid(&dir.join("images.raw"), &header, &images)?;
    write_raw_grid(&dir.join("depths.raw"), &header, &depths)?;
    let cloud = sample_surface(&scene.shape, cloud_points, s)?.to_point_cloud();
    write_point_cloud_ply(&dir.join("cloud.ply"), &cloud)?;
    write_json(
        &dir.join("scene.json"),
        &SceneRecord {
            seed: s,
            shape: scene.shape,
            cameras: v.cameras.clone(),
        },
    )
}

fn read_views(path: &Path, views: usize) -> Result<(ImageSize, Vec<Vec<f64>>)> {
    let (h, data) = read_raw_grid(path)?;
    if h.depth != Some(views) {
        return Err(Error::Format(format!("{}: expected {views} views", path.display())));
    }
    let size = ImageSize::new(h.height, h.width);
    Ok((size, data.chunks(size.pixels()).map(|c| c.to_vec()).collect()))
}

pub fn read_scene(data: &Path, split: Split, index: usize) -> Result<Scene> {
    let dir = scene_dir(data, split, index);
    if !dir.join("scene.json").is_file() {
        return Err(Error::MissingPrerequisite(format!(
            "scene {} is missing; run gen-data",
            dir.display()
        )));
    }
    let rec: SceneRecord = read_json(&dir.join("scene.json"))?;
    let n = rec.cameras.len();
    let (size, images) = read_views(&dir.join("images.raw"), n)?;
    let (dsize, depth_values) = read_views(&dir.join("depths.raw"), n)?;
    if dsize != size {
        return Err(Error::Format(format!(
            "{}: image and depth sizes differ",
            dir.display()
        )));
    }
    let depths = depth_values
        .into_iter()
        .map(|d| {
            let valid: Vec<bool> = d.iter().map(|&x| x > 0.0).collect();
            let conf = valid.iter().map(|&ok| if ok { 1.0 } else { 0.0 }).collect();
            DepthMap::new(size, d, valid, conf)
        })
        .collect::<Result<Vec<_>>>()?;
    let views = ViewSet {
        size,
        cameras: rec.cameras,
        images,
        depths,
    };
    views.validate()?;
    Ok(Scene {
        shape: rec.shape,
        views,
    })
}

pub fn read_split(data: &Path, split: Split, count: usize) -> Result<Vec<Scene>> {
    (0..count).map(|i| read_scene(data, split, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_keeps_geometry() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = SceneConfig {
            views: 2,
            size: ImageSize::new(12, 12),
            ..SceneConfig::default()
        };
        write_scene(tmp.path(), &cfg, 5, Split::Test, 3, 64).unwrap();
        let back = read_scene(tmp.path(), Split::Test, 3).unwrap();
        let orig = generate_scene(&cfg, scene_seed(5, Split::Test, 3)).unwrap();
        assert_eq!(back.shape, orig.shape);
        assert_eq!(back.views.cameras, orig.views.cameras);
        for (a, b) in back.views.depths.iter().zip(&orig.views.depths) {
            assert_eq!(a.valid, b.valid);
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!((x - y).abs() < 1e-6 * y.abs().max(1.0));
            }
        }
        assert!(matches!(
            read_scene(tmp.path(), Split::Train, 0),
            Err(Error::MissingPrerequisite(_))
        ));
    }
}

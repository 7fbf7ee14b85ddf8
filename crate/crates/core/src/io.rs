//! On-disk formats: ASCII PLY point clouds, OBJ and binary PLY meshes, raw
//! 32-bit grids with a JSON sidecar, flat 32-bit checkpoints with a JSON
//! manifest, and JSONL metric curves.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};
use crate::mesh::Mesh;
use crate::nn::Tensor;

/// Writes through a sibling temporary file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    atomic_write(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// ASCII PLY with `x y z`, optional `nx ny nz` and optional `confidence`.
pub fn write_point_cloud_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    cloud.validate()?;
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", cloud.len()));
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.normals.is_some() {
        out.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    if cloud.confidence.is_some() {
        out.push_str("property double confidence\n");
    }
    out.push_str("end_header\n");
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        out.push_str(&format!("{} {} {}", p.x, p.y, p.z));
        if let Some(n) = &cloud.normals {
            out.push_str(&format!(" {} {} {}", n[i].x, n[i].y, n[i].z));
        }
        if let Some(c) = &cloud.confidence {
            out.push_str(&format!(" {}", c[i]));
        }
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

pub fn read_point_cloud_ply(path: &Path) -> Result<PointCloud> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if lines.next().transpose()?.as_deref() != Some("ply") {
        return Err(bad("missing ply magic"));
    }
    let mut count = None;
    let mut props = Vec::new();
    for line in lines.by_ref() {
        let line = line?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", fmt, _] if *fmt != "ascii" => return Err(bad("only ascii point clouds are supported")),
            ["element", "vertex", n] => count = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?),
            ["property", _, name] => props.push(name.to_string()),
            ["end_header"] => break,
            _ => {}
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element"))?;
    let has_normals = props.iter().any(|p| p == "nx");
    let conf_col = props.iter().position(|p| p == "confidence");
    let mut positions = Vec::with_capacity(count);
    let mut normals = Vec::new();
    let mut confidence = Vec::new();
    for _ in 0..count {
        let line = lines.next().ok_or_else(|| bad("truncated body"))??;
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| bad("bad number")))
            .collect::<Result<_>>()?;
        if v.len() != props.len() {
            return Err(bad("row width does not match header"));
        }
        positions.push(Vec3::new(v[0], v[1], v[2]));
        if has_normals {
            normals.push(Vec3::new(v[3], v[4], v[5]));
        }
        if let Some(c) = conf_col {
            confidence.push(v[c]);
        }
    }
    let cloud = PointCloud {
        positions,
        normals: has_normals.then_some(normals),
        confidence: conf_col.map(|_| confidence),
    };
    cloud.validate()?;
    Ok(cloud)
}

pub fn write_mesh_obj(path: &Path, mesh: &Mesh) -> Result<()> {
    mesh.validate()?;
    let mut out = String::with_capacity(mesh.vertices.len() * 40 + mesh.triangles.len() * 20);
    for v in &mesh.vertices {
        out.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
    }
    for t in &mesh.triangles {
        out.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
    }
    atomic_write(path, out.as_bytes())
}

pub fn read_mesh_obj(path: &Path) -> Result<Mesh> {
    let text = fs::read_to_string(path)?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for line in text.lines() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it
                    .map(|t| t.parse().map_err(|_| bad("bad vertex")))
                    .collect::<Result<_>>()?;
                if c.len() < 3 {
                    return Err(bad("vertex needs three coordinates"));
                }
                vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or(t);
                        head.parse::<usize>().map_err(|_| bad("bad face index"))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 || idx.contains(&0) {
                    return Err(bad("only 1-based triangles are supported"));
                }
                triangles.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
            }
            _ => {}
        }
    }
    Mesh::new(vertices, triangles)
}

/// Binary little-endian PLY: float vertices, uchar-counted int faces.
pub fn write_mesh_ply(path: &Path, mesh: &Mesh) -> Result<()> {
    mesh.validate()?;
    let mut out = Vec::new();
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    )?;
    for v in &mesh.vertices {
        for c in v.iter() {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    for t in &mesh.triangles {
        out.push(3);
        for &i in t {
            let i = i32::try_from(i).map_err(|_| Error::Format("vertex index exceeds i32".into()))?;
            out.extend_from_slice(&i.to_le_bytes());
        }
    }
    atomic_write(path, &out)
}

pub fn read_mesh_ply(path: &Path) -> Result<Mesh> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    let marker = b"end_header\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| bad("missing end_header"))?
        + marker.len();
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not utf-8"))?;
    if !header.contains("format binary_little_endian 1.0") {
        return Err(bad("expected binary little-endian mesh"));
    }
    let count = |elem: &str| {
        header
            .lines()
            .find_map(|l| {
                l.strip_prefix(&format!("element {elem} "))
                    .and_then(|n| n.trim().parse::<usize>().ok())
            })
            .ok_or_else(|| bad("missing element count"))
    };
    let (nv, nf) = (count("vertex")?, count("face")?);
    let body = &bytes[end..];
    if body.len() != nv * 12 + nf * 13 {
        return Err(bad("body size does not match header"));
    }
    let f32_at = |o: usize| f32::from_le_bytes(body[o..o + 4].try_into().expect("4 bytes")) as f64;
    let vertices = (0..nv)
        .map(|i| Vec3::new(f32_at(i * 12), f32_at(i * 12 + 4), f32_at(i * 12 + 8)))
        .collect();
    let mut triangles = Vec::with_capacity(nf);
    for k in 0..nf {
        let o = nv * 12 + k * 13;
        if body[o] != 3 {
            return Err(bad("only triangles are supported"));
        }
        let idx = |j: usize| i32::from_le_bytes(body[o + 1 + 4 * j..o + 5 + 4 * j].try_into().expect("4 bytes"));
        let t = [idx(0), idx(1), idx(2)];
        if t.iter().any(|&i| i < 0) {
            return Err(bad("negative vertex index"));
        }
        triangles.push([t[0] as usize, t[1] as usize, t[2] as usize]);
    }
    Mesh::new(vertices, triangles)
}

/// Sidecar of a raw 32-bit grid. 3D grids add a leading depth `D`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridHeader {
    #[serde(rename = "D", default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub dtype: String,
    pub order: String,
}

impl GridHeader {
    pub fn new_2d(height: usize, width: usize) -> Self {
        Self {
            depth: None,
            height,
            width,
            dtype: "float32".into(),
            order: "row-major".into(),
        }
    }

    pub fn new_3d(depth: usize, height: usize, width: usize) -> Self {
        Self {
            depth: Some(depth),
            ..Self::new_2d(height, width)
        }
    }

    pub fn len(&self) -> usize {
        self.depth.unwrap_or(1) * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

/// Writes `data` as little-endian `f32` to `raw` and the header next to it
/// (same stem, `.json`).
pub fn write_raw_grid(raw: &Path, header: &GridHeader, data: &[f64]) -> Result<()> {
    if data.len() != header.len() {
        return Err(Error::ShapeMismatch(format!(
            "grid header expects {} values, got {}",
            header.len(),
            data.len()
        )));
    }
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    atomic_write(raw, &bytes)?;
    write_json(&sidecar_path(raw), header)
}

pub fn read_raw_grid(raw: &Path) -> Result<(GridHeader, Vec<f64>)> {
    let header: GridHeader = read_json(&sidecar_path(raw))?;
    if header.dtype != "float32" || header.order != "row-major" {
        return Err(Error::Format(format!(
            "unsupported grid {} / {}",
            header.dtype, header.order
        )));
    }
    let bytes = fs::read(raw)?;
    if bytes.len() != header.len() * 4 {
        return Err(Error::Format(format!("{}: size does not match header", raw.display())));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((header, data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the binary file.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Writes `<base>.bin` (concatenated little-endian `f32` arrays) and
/// `<base>.json` (names, shapes, byte offsets and free-form metadata).
pub fn write_checkpoint(base: &Path, tensors: &[(String, &Tensor)], meta: serde_json::Value) -> Result<()> {
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: [t.rows, t.cols],
            offset: bytes.len(),
        });
        for v in &t.data {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    atomic_write(&base.with_extension("bin"), &bytes)?;
    write_json(
        &base.with_extension("json"),
        &CheckpointManifest {
            format: "f32-le".into(),
            tensors: entries,
            meta,
        },
    )
}

pub fn read_checkpoint(base: &Path) -> Result<(Vec<(String, Tensor)>, serde_json::Value)> {
    let manifest: CheckpointManifest = read_json(&base.with_extension("json"))?;
    if manifest.format != "f32-le" {
        return Err(Error::Format(format!(
            "unsupported checkpoint format {}",
            manifest.format
        )));
    }
    let bytes = fs::read(base.with_extension("bin"))?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let n = e.shape[0] * e.shape[1];
        let end = e.offset + 4 * n;
        if end > bytes.len() {
            return Err(Error::Format(format!(
                "tensor {} runs past the end of the checkpoint",
                e.name
            )));
        }
        let data = bytes[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        out.push((e.name, Tensor::from_vec(e.shape[0], e.shape[1], data)));
    }
    Ok((out, manifest.meta))
}

/// Appends one JSON object per line.
pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    f.write_all(line.as_bytes())?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<serde_json::Value>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::extract_mesh;

    #[test]
    fn point_cloud_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ply");
        let cloud = PointCloud {
            positions: vec![Vec3::new(0.1, -2.0, 3.5), Vec3::new(1e-9, 0.0, 7.0)],
            normals: Some(vec![Vec3::x(), Vec3::z()]),
            confidence: Some(vec![0.5, 1.0]),
        };
        write_point_cloud_ply(&p, &cloud).unwrap();
        assert_eq!(read_point_cloud_ply(&p).unwrap(), cloud);
        let bare = PointCloud::from_positions(cloud.positions.clone());
        write_point_cloud_ply(&p, &bare).unwrap();
        assert_eq!(read_point_cloud_ply(&p).unwrap(), bare);
    }

    #[test]
    fn mesh_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = extract_mesh(|p| p.norm() - 0.5, 12).unwrap();
        let obj = dir.path().join("m.obj");
        write_mesh_obj(&obj, &mesh).unwrap();
        assert_eq!(read_mesh_obj(&obj).unwrap(), mesh);
        let ply = dir.path().join("m.ply");
        write_mesh_ply(&ply, &mesh).unwrap();
        let back = read_mesh_ply(&ply).unwrap();
        assert_eq!(back.triangles, mesh.triangles);
        for (a, b) in back.vertices.iter().zip(&mesh.vertices) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn raw_grid_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("depth.raw");
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.25).collect();
        write_raw_grid(&raw, &GridHeader::new_2d(3, 4), &data).unwrap();
        let side: serde_json::Value = read_json(&dir.path().join("depth.json")).unwrap();
        assert_eq!(
            side,
            serde_json::json!({"H": 3, "W": 4, "dtype": "float32", "order": "row-major"})
        );
        let (h, back) = read_raw_grid(&raw).unwrap();
        assert_eq!(h, GridHeader::new_2d(3, 4));
        assert_eq!(back, data);
        assert!(write_raw_grid(&raw, &GridHeader::new_2d(2, 2), &data).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("ckpt");
        let a = Tensor::from_vec(2, 2, vec![1.0, -0.5, 0.25, 3.0]);
        let b = Tensor::from_vec(1, 3, vec![0.1f32 as f64, 2.0, -7.0]);
        write_checkpoint(
            &base,
            &[("a".into(), &a), ("b".into(), &b)],
            serde_json::json!({"step": 5}),
        )
        .unwrap();
        let (t, meta) = read_checkpoint(&base).unwrap();
        assert_eq!(t, vec![("a".to_string(), a), ("b".to_string(), b)]);
        assert_eq!(meta["step"], 5);
        let m: serde_json::Value = read_json(&base.with_extension("json")).unwrap();
        assert_eq!(m["tensors"][1]["offset"], 16);
    }

    #[test]
    fn jsonl_appends() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("curve.jsonl");
        append_jsonl(&p, &serde_json::json!({"step": 0, "loss": 1.5})).unwrap();
        append_jsonl(&p, &serde_json::json!({"step": 1, "loss": 1.25})).unwrap();
        let rows = read_jsonl(&p).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1]["loss"], 1.25);
    }
}

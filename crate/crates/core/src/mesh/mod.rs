//! Triangle meshes, sampled SDF grids and marching-cubes extraction.

mod tables;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{OrientedPointSet, Vec3};
use tables::{CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRIANGLE_TABLE};

/// Indexed triangle mesh with counter-clockwise outward winding.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let m = Self { vertices, triangles };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self
            .triangles
            .iter()
            .find(|t| t.iter().any(|&i| i >= self.vertices.len()))
        {
            return Err(Error::InvalidArgument(format!(
                "triangle {t:?} indexes past {} vertices",
                self.vertices.len()
            )));
        }
        if self.vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidArgument("mesh has non-finite vertices".into()));
        }
        Ok(())
    }

    pub fn triangle(&self, i: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[i];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Unnormalized face normal (twice the area vector).
    pub fn face_cross(&self, i: usize) -> Vec3 {
        let [a, b, c] = self.triangle(i);
        (b - a).cross(&(c - a))
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|i| 0.5 * self.face_cross(i).norm()).sum()
    }

    /// Positive for closed meshes with outward winding.
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|i| {
                let [a, b, c] = self.triangle(i);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    /// Whether every undirected edge is shared by exactly two triangles.
    pub fn is_edge_manifold(&self) -> bool {
        let mut counts: HashMap<(usize, usize), u32> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        !counts.is_empty() && counts.values().all(|&c| c == 2)
    }

    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(
            self.vertices
                .iter()
                .fold((first, first), |(lo, hi), v| (lo.inf(v), hi.sup(v))),
        )
    }

    /// Area-weighted uniform samples with the face normals of their triangles.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Result<OrientedPointSet> {
        let areas: Vec<f64> = (0..self.triangles.len())
            .map(|i| 0.5 * self.face_cross(i).norm())
            .collect();
        let total: f64 = areas.iter().sum();
        if !(total > 0.0) {
            return Err(Error::EmptySurface);
        }
        let mut cdf = Vec::with_capacity(areas.len());
        let mut acc = 0.0;
        for a in &areas {
            acc += a;
            cdf.push(acc / total);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut positions = Vec::with_capacity(n);
        let mut normals = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.random();
            let mut f = cdf.partition_point(|&c| c < u).min(cdf.len() - 1);
            while areas[f] == 0.0 {
                f = (f + 1) % areas.len();
            }
            let [a, b, c] = self.triangle(f);
            let (mut r1, mut r2): (f64, f64) = (rng.random(), rng.random());
            if r1 + r2 > 1.0 {
                r1 = 1.0 - r1;
                r2 = 1.0 - r2;
            }
            positions.push(a + (b - a) * r1 + (c - a) * r2);
            normals.push(self.face_cross(f).normalize());
        }
        OrientedPointSet::from_parts(&positions, &normals)
    }

    pub fn translated_scaled(&self, offset: &Vec3, scale: f64) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(|v| (v + offset) * scale).collect(),
            triangles: self.triangles.clone(),
        }
    }
}

/// Scalar samples on a `res^3` lattice spanning `[-1, 1]^3`, indexed `(x * res + y) * res + z`.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfGrid {
    pub res: usize,
    pub values: Vec<f64>,
}

impl SdfGrid {
    pub fn new(res: usize, values: Vec<f64>) -> Result<Self> {
        if res < 2 || values.len() != res * res * res {
            return Err(Error::ShapeMismatch(format!(
                "grid of resolution {res} needs {} values",
                res.pow(3)
            )));
        }
        Ok(Self { res, values })
    }

    pub fn spacing(&self) -> f64 {
        2.0 / (self.res - 1) as f64
    }

    pub fn position(&self, x: usize, y: usize, z: usize) -> Vec3 {
        let h = self.spacing();
        Vec3::new(-1.0 + x as f64 * h, -1.0 + y as f64 * h, -1.0 + z as f64 * h)
    }

    /// All lattice positions in storage order.
    pub fn positions(res: usize) -> Vec<Vec3> {
        let h = 2.0 / (res - 1) as f64;
        let mut out = Vec::with_capacity(res * res * res);
        for x in 0..res {
            for y in 0..res {
                for z in 0..res {
                    out.push(Vec3::new(-1.0 + x as f64 * h, -1.0 + y as f64 * h, -1.0 + z as f64 * h));
                }
            }
        }
        out
    }

    pub fn from_fn(res: usize, f: impl Fn(&Vec3) -> f64) -> Result<Self> {
        let values = Self::positions(res).iter().map(f).collect();
        Self::new(res, values)
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.res + y) * self.res + z
    }
}

/// Marching cubes of the `iso` level set. Samples below `iso` are inside.
/// The outermost lattice layer is treated as outside so the result is closed;
/// vertices are shared between cells that meet at a crossing edge.
pub fn marching_cubes(grid: &SdfGrid, iso: f64) -> Result<Mesh> {
    let res = grid.res;
    if res < 8 {
        return Err(Error::InvalidArgument(format!(
            "marching cubes needs resolution >= 8, got {res}"
        )));
    }
    let h = grid.spacing();
    let value = |x: usize, y: usize, z: usize| {
        let v = grid.values[grid.index(x, y, z)];
        if x == 0 || y == 0 || z == 0 || x == res - 1 || y == res - 1 || z == res - 1 {
            v.max(iso + 0.5 * h)
        } else {
            v
        }
    };
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut edge_vertex: HashMap<usize, usize> = HashMap::new();
    for x in 0..res - 1 {
        for y in 0..res - 1 {
            for z in 0..res - 1 {
                let mut corner_val = [0.0; 8];
                let mut case = 0usize;
                for (c, off) in CORNER_OFFSETS.iter().enumerate() {
                    corner_val[c] = value(x + off[0], y + off[1], z + off[2]);
                    if corner_val[c] < iso {
                        case |= 1 << c;
                    }
                }
                if EDGE_TABLE[case] == 0 {
                    continue;
                }
                let mut local = [usize::MAX; 12];
                for (e, &[c1, c2]) in EDGE_CORNERS.iter().enumerate() {
                    if EDGE_TABLE[case] & (1 << e) == 0 {
                        continue;
                    }
                    let (o1, o2) = (CORNER_OFFSETS[c1], CORNER_OFFSETS[c2]);
                    let n1 = grid.index(x + o1[0], y + o1[1], z + o1[2]);
                    let n2 = grid.index(x + o2[0], y + o2[1], z + o2[2]);
                    let axis = (0..3).find(|&k| o1[k] != o2[k]).expect("edge spans one axis");
                    let key = n1.min(n2) * 3 + axis;
                    local[e] = *edge_vertex.entry(key).or_insert_with(|| {
                        let (v1, v2) = (corner_val[c1], corner_val[c2]);
                        let t = ((iso - v1) / (v2 - v1)).clamp(1e-9, 1.0 - 1e-9);
                        let p1 = grid.position(x + o1[0], y + o1[1], z + o1[2]);
                        let p2 = grid.position(x + o2[0], y + o2[1], z + o2[2]);
                        vertices.push(p1 + (p2 - p1) * t);
                        vertices.len() - 1
                    });
                }
                let row = &TRIANGLE_TABLE[case];
                for tri in row.chunks(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    // The table winds clockwise seen from outside; reverse to CCW.
                    triangles.push([local[tri[0] as usize], local[tri[2] as usize], local[tri[1] as usize]]);
                }
            }
        }
    }
    if triangles.is_empty() {
        return Err(Error::EmptySurface);
    }
    Mesh::new(vertices, triangles)
}

/// Samples `f` on a `res^3` lattice over `[-1, 1]^3` and extracts its zero set.
pub fn extract_mesh(f: impl Fn(&Vec3) -> f64, res: usize) -> Result<Mesh> {
    if res < 8 {
        return Err(Error::InvalidArgument(format!(
            "marching cubes needs resolution >= 8, got {res}"
        )));
    }
    marching_cubes(&SdfGrid::from_fn(res, f)?, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_res64() {
        // The unit sphere touches the faces of the lattice cube.
        let mesh = extract_mesh(|p| p.norm() - 1.0, 64).unwrap();
        let h = 2.0 / 63.0;
        for v in &mesh.vertices {
            assert!((v.norm() - 1.0).abs() <= 2.0 * h);
        }
        assert!(mesh.is_edge_manifold());
        let area = 4.0 * std::f64::consts::PI;
        assert!((mesh.area() - area).abs() / area < 0.05);
        assert!(mesh.signed_volume() > 0.0);
    }

    #[test]
    fn outward_face_normals() {
        let mesh = extract_mesh(|p| p.norm() - 0.5, 24).unwrap();
        for i in 0..mesh.triangles.len() {
            let [a, b, c] = mesh.triangle(i);
            let centroid = (a + b + c) / 3.0;
            assert!(mesh.face_cross(i).dot(&centroid) > 0.0);
        }
    }

    #[test]
    fn every_case_is_closed_inside_grid() {
        // Random blobs exercise many cube cases; each must yield a closed surface.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let centers: Vec<(Vec3, f64)> = (0..4)
                .map(|_| {
                    (
                        Vec3::new(
                            rng.random_range(-0.5..0.5),
                            rng.random_range(-0.5..0.5),
                            rng.random_range(-0.5..0.5),
                        ),
                        rng.random_range(0.1..0.35),
                    )
                })
                .collect();
            let f = |p: &Vec3| {
                centers
                    .iter()
                    .map(|(c, r)| (p - c).norm() - r)
                    .fold(f64::INFINITY, f64::min)
            };
            let mesh = extract_mesh(f, 20).unwrap();
            assert!(mesh.is_edge_manifold());
            assert!(mesh.signed_volume() > 0.0);
        }
    }

    #[test]
    fn boundary_touching_surface_is_closed() {
        let mesh = extract_mesh(|p| p.norm() - 1.5, 16).unwrap();
        assert!(mesh.is_edge_manifold());
    }

    #[test]
    fn empty_and_low_resolution() {
        assert!(matches!(extract_mesh(|_| 1.0, 16), Err(Error::EmptySurface)));
        assert!(extract_mesh(|p| p.norm() - 0.5, 4).is_err());
    }

    #[test]
    fn area_weighted_sampling() {
        let mesh = extract_mesh(|p| p.norm() - 0.5, 32).unwrap();
        let s = mesh.sample_surface(2000, 0).unwrap();
        for i in 0..s.len() {
            assert!((s.position(i).norm() - 0.5).abs() < 0.01);
            assert!(s.normal(i).dot(&s.position(i).normalize()) > 0.95);
        }
        assert_eq!(s, mesh.sample_surface(2000, 0).unwrap());
    }
}

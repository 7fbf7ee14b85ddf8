//! Core 3D types: similarity transforms, pinhole cameras, depth and point maps,
//! and point clouds.
//!
//! Camera convention: camera-from-world rotation, right-handed, +Z forward,
//! +X right, +Y down, image origin at the top-left corner. Pixel `(row, col)`
//! has its center at continuous coordinates `(u, v) = (col + 0.5, row + 0.5)`
//! and the principal point sits at exactly `(W / 2, H / 2)`.

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Quat = UnitQuaternion<f64>;

/// Renormalizes a unit quaternion so its norm is within rounding of one.
fn renormalize(q: Quat) -> Quat {
    UnitQuaternion::new_normalize(q.into_inner())
}

/// Similarity transform `p -> s * R * p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "Sim3Record", try_from = "Sim3Record")]
pub struct Sim3Transform {
    scale: f64,
    rotation: Quat,
    translation: Vec3,
}

impl Default for Sim3Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Sim3Transform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Quat::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(scale: f64, rotation: Quat, translation: Vec3) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "similarity scale must be positive and finite, got {scale}"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite translation".into()));
        }
        Ok(Self {
            scale,
            rotation: renormalize(rotation),
            translation,
        })
    }

    pub fn from_rotation_matrix(scale: f64, rotation: &Mat3, translation: Vec3) -> Result<Self> {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*rotation);
        Self::new(scale, UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rotation(&self) -> &Quat {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }

    /// Applies only the linear part, for directions such as normals.
    pub fn apply_direction(&self, d: &Vec3) -> Vec3 {
        self.rotation * d
    }

    /// `compose(a, b)` applies `b` first, then `a`.
    pub fn compose(&self, other: &Sim3Transform) -> Sim3Transform {
        Sim3Transform {
            scale: self.scale * other.scale,
            rotation: renormalize(self.rotation * other.rotation),
            translation: self.scale * (self.rotation * other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Sim3Transform {
        let inv_rot = self.rotation.inverse();
        let inv_scale = 1.0 / self.scale;
        Sim3Transform {
            scale: inv_scale,
            rotation: renormalize(inv_rot),
            translation: -(inv_scale * (inv_rot * self.translation)),
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        let sr = self.rotation_matrix() * self.scale;
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&sr);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Seven log-parameters: rotation vector (3), translation (3), log-scale (1).
    pub fn to_log7(&self) -> [f64; 7] {
        let r = self.rotation.scaled_axis();
        let t = self.translation;
        [r.x, r.y, r.z, t.x, t.y, t.z, self.scale.ln()]
    }

    pub fn from_log7(v: &[f64; 7]) -> Result<Self> {
        let rot = Quat::from_scaled_axis(Vec3::new(v[0], v[1], v[2]));
        Self::new(v[6].exp(), rot, Vec3::new(v[3], v[4], v[5]))
    }

    /// Geodesic rotation angle between two transforms, in radians.
    pub fn rotation_angle_to(&self, other: &Sim3Transform) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }
}

/// Image dimensions in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub height: usize,
    pub width: usize,
}

impl ImageSize {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Pinhole camera with camera-from-world extrinsics and a per-axis field of view.
///
/// Serializes as `{"quat": [w, x, y, z], "t": [x, y, z], "fov": [fy, fx]}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "CameraRecord", try_from = "CameraRecord")]
pub struct CameraModel {
    rotation: Quat,
    translation: Vec3,
    /// `[vertical, horizontal]` in radians.
    fov: [f64; 2],
}

impl CameraModel {
    pub fn new(rotation: Quat, translation: Vec3, fov: [f64; 2]) -> Result<Self> {
        for f in fov {
            if !(f > 0.0 && f < std::f64::consts::PI) {
                return Err(Error::InvalidArgument(format!("field of view {f} outside (0, pi)")));
            }
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite camera translation".into()));
        }
        Ok(Self {
            rotation: renormalize(rotation),
            translation,
            fov,
        })
    }

    /// Camera at `eye` looking at `target`; `up` is a world-space hint.
    pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3, fov: [f64; 2]) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::Degenerate("look-at eye coincides with target".into()));
        }
        let z = forward.normalize();
        let mut x = z.cross(up);
        if x.norm() < 1e-9 {
            // up is parallel to the view direction; pick any perpendicular.
            let alt = if z.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
            x = z.cross(&alt);
        }
        // x = z x up is image-right; y = z x x then points image-down.
        let x = x.normalize();
        let y = z.cross(&x);
        // Rows of the camera-from-world rotation are the camera axes in world coordinates.
        let r = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let rot = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(r));
        let t = -(rot * eye);
        Self::new(rot, t, fov)
    }

    pub fn identity_pose(fov: [f64; 2]) -> Result<Self> {
        Self::new(Quat::identity(), Vec3::zeros(), fov)
    }

    pub fn rotation(&self) -> &Quat {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn fov(&self) -> [f64; 2] {
        self.fov
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.inverse() * self.translation)
    }

    /// World-frame direction of the optical axis.
    pub fn forward(&self) -> Vec3 {
        self.rotation.inverse() * Vec3::z()
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn camera_to_world(&self, p: &Vec3) -> Vec3 {
        self.rotation.inverse() * (p - self.translation)
    }

    /// `(fy, fx, cy, cx)` in pixels for an image of the given size.
    pub fn intrinsics(&self, size: ImageSize) -> (f64, f64, f64, f64) {
        let fy = 0.5 * size.height as f64 / (0.5 * self.fov[0]).tan();
        let fx = 0.5 * size.width as f64 / (0.5 * self.fov[1]).tan();
        (fy, fx, 0.5 * size.height as f64, 0.5 * size.width as f64)
    }

    /// Camera-frame ray direction (z = 1) through continuous pixel coordinates `(u, v)`.
    pub fn pixel_ray(&self, u: f64, v: f64, size: ImageSize) -> Vec3 {
        let (fy, fx, cy, cx) = self.intrinsics(size);
        Vec3::new((u - cx) / fx, (v - cy) / fy, 1.0)
    }

    /// Expresses this camera in a new world frame: if `g` maps old world
    /// coordinates to new ones, the result observes `g(p)` exactly where this
    /// camera observed `p` (up to the depth scale `g.scale()`).
    pub fn transformed(&self, g: &Sim3Transform) -> CameraModel {
        // x_cam = R p + t with p = g^-1(q) = (R_g^T (q - t_g)) / s_g.
        // Depth in the new frame is scaled by s_g: x_cam' = s_g x_cam.
        let rg_inv = g.rotation().inverse();
        let rot = renormalize(self.rotation * rg_inv);
        let t = g.scale() * self.translation - rot * g.translation();
        CameraModel {
            rotation: rot,
            translation: t,
            fov: self.fov,
        }
    }

    /// 9-vector layout: quaternion `[w, x, y, z]`, translation `[x, y, z]`, fov `[fy, fx]`.
    pub fn to_vector9(&self) -> [f64; 9] {
        let q = self.rotation.quaternion();
        let t = self.translation;
        [q.w, q.i, q.j, q.k, t.x, t.y, t.z, self.fov[0], self.fov[1]]
    }

    /// Inverse of [`CameraModel::to_vector9`]; normalizes the quaternion and
    /// clamps the fields of view into `(0, pi)`.
    pub fn from_vector9(v: &[f64; 9]) -> Result<Self> {
        let q = nalgebra::Quaternion::new(v[0], v[1], v[2], v[3]);
        if q.norm() < 1e-12 || !q.coords.iter().all(|c| c.is_finite()) {
            return Err(Error::Degenerate("camera quaternion has zero norm".into()));
        }
        let clamp = |f: f64| f.clamp(1e-3, std::f64::consts::PI - 1e-3);
        Self::new(
            UnitQuaternion::new_normalize(q),
            Vec3::new(v[4], v[5], v[6]),
            [clamp(v[7]), clamp(v[8])],
        )
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sim3Record {
    scale: f64,
    quat: [f64; 4],
    t: [f64; 3],
}

impl From<Sim3Transform> for Sim3Record {
    fn from(v: Sim3Transform) -> Self {
        let q = v.rotation.quaternion();
        Self {
            scale: v.scale,
            quat: [q.w, q.i, q.j, q.k],
            t: [v.translation.x, v.translation.y, v.translation.z],
        }
    }
}

impl TryFrom<Sim3Record> for Sim3Transform {
    type Error = Error;
    fn try_from(r: Sim3Record) -> Result<Self> {
        let q = nalgebra::Quaternion::new(r.quat[0], r.quat[1], r.quat[2], r.quat[3]);
        Sim3Transform::new(r.scale, UnitQuaternion::new_normalize(q), Vec3::from(r.t))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    quat: [f64; 4],
    t: [f64; 3],
    fov: [f64; 2],
}

impl From<CameraModel> for CameraRecord {
    fn from(c: CameraModel) -> Self {
        let q = c.rotation.quaternion();
        Self {
            quat: [q.w, q.i, q.j, q.k],
            t: [c.translation.x, c.translation.y, c.translation.z],
            fov: c.fov,
        }
    }
}

impl TryFrom<CameraRecord> for CameraModel {
    type Error = Error;
    fn try_from(r: CameraRecord) -> Result<Self> {
        let q = nalgebra::Quaternion::new(r.quat[0], r.quat[1], r.quat[2], r.quat[3]);
        if q.norm() < 1e-12 {
            return Err(Error::Format("camera quaternion has zero norm".into()));
        }
        CameraModel::new(UnitQuaternion::new_normalize(q), Vec3::from(r.t), r.fov)
    }
}

/// Projects a world point into the image. Returns continuous pixel coordinates
/// `(u, v)` and the camera-frame depth.
pub fn project(p: &Vec3, cam: &CameraModel, size: ImageSize) -> Result<([f64; 2], f64)> {
    let pc = cam.world_to_camera(p);
    if pc.z <= 1e-12 {
        return Err(Error::BehindCamera { depth: pc.z });
    }
    let (fy, fx, cy, cx) = cam.intrinsics(size);
    Ok(([fx * pc.x / pc.z + cx, fy * pc.y / pc.z + cy], pc.z))
}

/// Per-pixel z-depth with validity and confidence, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub size: ImageSize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
    pub confidence: Vec<f64>,
}

impl DepthMap {
    pub fn new(size: ImageSize, values: Vec<f64>, valid: Vec<bool>, confidence: Vec<f64>) -> Result<Self> {
        let n = size.pixels();
        if values.len() != n || valid.len() != n || confidence.len() != n {
            return Err(Error::ShapeMismatch(format!("depth map buffers must hold {n} entries")));
        }
        let map = Self {
            size,
            values,
            valid,
            confidence,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, (&d, &ok)) in self.values.iter().zip(&self.valid).enumerate() {
            if ok && !(d.is_finite() && d > 0.0) {
                return Err(Error::NonPositiveDepth {
                    row: i / self.size.width,
                    col: i % self.size.width,
                    value: d,
                });
            }
        }
        if self.confidence.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::InvalidArgument(
                "depth confidence must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.size.width + col
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Per-pixel 3D points with confidence, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMap {
    pub size: ImageSize,
    pub points: Vec<Vec3>,
    pub confidence: Vec<f64>,
}

impl PointMap {
    pub fn new(size: ImageSize, points: Vec<Vec3>, confidence: Vec<f64>) -> Result<Self> {
        let n = size.pixels();
        if points.len() != n || confidence.len() != n {
            return Err(Error::ShapeMismatch(format!("point map buffers must hold {n} entries")));
        }
        if confidence.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::InvalidArgument(
                "point confidence must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            size,
            points,
            confidence,
        })
    }
}

/// Unordered points with optional normals and confidences.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub positions: Vec<Vec3>,
    pub normals: Option<Vec<Vec3>>,
    pub confidence: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn from_positions(positions: Vec<Vec3>) -> Self {
        Self {
            positions,
            normals: None,
            confidence: None,
        }
    }

    pub fn with_normals(positions: Vec<Vec3>, normals: Vec<Vec3>) -> Result<Self> {
        let cloud = Self {
            positions,
            normals: Some(normals),
            confidence: None,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if let Some(normals) = &self.normals {
            if normals.len() != n {
                return Err(Error::ShapeMismatch("normals length differs from positions".into()));
            }
            if normals.iter().any(|v| (v.norm() - 1.0).abs() > 1e-6) {
                return Err(Error::InvalidArgument("normals must have unit length".into()));
            }
        }
        if let Some(conf) = &self.confidence {
            if conf.len() != n {
                return Err(Error::ShapeMismatch("confidence length differs from positions".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Subset by index, carrying along normals and confidences.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            normals: self.normals.as_ref().map(|n| indices.iter().map(|&i| n[i]).collect()),
            confidence: self
                .confidence
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
        }
    }

    pub fn transformed(&self, t: &Sim3Transform) -> PointCloud {
        PointCloud {
            positions: self.positions.iter().map(|p| t.apply(p)).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|n| n.iter().map(|d| t.apply_direction(d)).collect()),
            confidence: self.confidence.clone(),
        }
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.positions.len().max(1) as f64;
        self.positions.iter().fold(Vec3::zeros(), |a, p| a + p) / n
    }
}

/// `N x 6` rows of position followed by unit normal.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OrientedPointSet {
    pub entries: Vec<[f64; 6]>,
}

impl OrientedPointSet {
    pub fn new(entries: Vec<[f64; 6]>) -> Result<Self> {
        for e in &entries {
            let n = (e[3] * e[3] + e[4] * e[4] + e[5] * e[5]).sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!("normal norm {n} is not unit")));
            }
        }
        Ok(Self { entries })
    }

    pub fn from_parts(positions: &[Vec3], normals: &[Vec3]) -> Result<Self> {
        if positions.len() != normals.len() {
            return Err(Error::ShapeMismatch("positions and normals differ in length".into()));
        }
        Self::new(
            positions
                .iter()
                .zip(normals)
                .map(|(p, n)| [p.x, p.y, p.z, n.x, n.y, n.z])
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, i: usize) -> Vec3 {
        let e = &self.entries[i];
        Vec3::new(e[0], e[1], e[2])
    }

    pub fn normal(&self, i: usize) -> Vec3 {
        let e = &self.entries[i];
        Vec3::new(e[3], e[4], e[5])
    }

    pub fn positions(&self) -> Vec<Vec3> {
        (0..self.len()).map(|i| self.position(i)).collect()
    }

    pub fn normals(&self) -> Vec<Vec3> {
        (0..self.len()).map(|i| self.normal(i)).collect()
    }

    pub fn to_point_cloud(&self) -> PointCloud {
        PointCloud {
            positions: self.positions(),
            normals: Some(self.normals()),
            confidence: None,
        }
    }

    pub fn from_point_cloud(cloud: &PointCloud) -> Result<Self> {
        let normals = cloud
            .normals
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("point cloud carries no normals".into()))?;
        Self::from_parts(&cloud.positions, normals)
    }
}

/// Lifts every valid pixel of a depth map to a world-frame point.
pub fn unproject(depth: &DepthMap, cam: &CameraModel) -> Result<PointCloud> {
    depth.validate()?;
    let size = depth.size;
    let mut positions = Vec::with_capacity(depth.valid_count());
    let mut confidence = Vec::with_capacity(depth.valid_count());
    for row in 0..size.height {
        for col in 0..size.width {
            let i = depth.index(row, col);
            if !depth.valid[i] {
                continue;
            }
            let ray = cam.pixel_ray(col as f64 + 0.5, row as f64 + 0.5, size);
            positions.push(cam.camera_to_world(&(ray * depth.values[i])));
            confidence.push(depth.confidence[i]);
        }
    }
    Ok(PointCloud {
        positions,
        normals: None,
        confidence: Some(confidence),
    })
}

/// Like [`unproject`] but keeps the pixel index of each lifted point.
pub fn unproject_indexed(depth: &DepthMap, cam: &CameraModel) -> Result<Vec<(usize, Vec3)>> {
    depth.validate()?;
    let size = depth.size;
    let mut out = Vec::with_capacity(depth.valid_count());
    for row in 0..size.height {
        for col in 0..size.width {
            let i = depth.index(row, col);
            if depth.valid[i] {
                let ray = cam.pixel_ray(col as f64 + 0.5, row as f64 + 0.5, size);
                out.push((i, cam.camera_to_world(&(ray * depth.values[i]))));
            }
        }
    }
    Ok(out)
}

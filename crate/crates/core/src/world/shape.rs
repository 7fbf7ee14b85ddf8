//! Primitive trees with signed distance evaluation.
//!
//! Single sphere, box and torus primitives have exact distance fields. The
//! superquadric uses a radial approximation scaled by one half, and CSG
//! difference/intersection give bounds rather than exact distances.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Quat, Sim3Transform, Vec3};

/// Rigid placement of a primitive: `p_local = R^T (p - t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    /// `[w, x, y, z]`
    pub quat: [f64; 4],
    pub t: [f64; 3],
}

impl Default for Pose {
    fn default() -> Self {
        Self {
            quat: [1.0, 0.0, 0.0, 0.0],
            t: [0.0; 3],
        }
    }
}

impl Pose {
    pub fn new(rotation: Quat, t: Vec3) -> Self {
        let q = rotation.quaternion();
        Self {
            quat: [q.w, q.i, q.j, q.k],
            t: [t.x, t.y, t.z],
        }
    }

    fn rotation(&self) -> Quat {
        Quat::new_normalize(nalgebra::Quaternion::new(
            self.quat[0],
            self.quat[1],
            self.quat[2],
            self.quat[3],
        ))
    }

    fn to_local(&self, p: &Vec3) -> Vec3 {
        self.rotation().inverse() * (p - Vec3::from(self.t))
    }
}

/// A node of the primitive tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeNode {
    Sphere {
        radius: f64,
        #[serde(default)]
        pose: Pose,
    },
    Box {
        half_extents: [f64; 3],
        #[serde(default)]
        pose: Pose,
    },
    /// Ring in the local xy-plane.
    Torus {
        major: f64,
        minor: f64,
        #[serde(default)]
        pose: Pose,
    },
    Superquadric {
        radii: [f64; 3],
        /// `[e1, e2]`: vertical and horizontal squareness.
        exponents: [f64; 2],
        #[serde(default)]
        pose: Pose,
    },
    Union {
        children: Vec<ShapeNode>,
    },
    Intersection {
        children: Vec<ShapeNode>,
    },
    /// First child minus every later child.
    Difference {
        children: Vec<ShapeNode>,
    },
}

impl ShapeNode {
    pub fn sdf(&self, p: &Vec3) -> f64 {
        match self {
            ShapeNode::Sphere { radius, pose } => pose.to_local(p).norm() - radius,
            ShapeNode::Box { half_extents, pose } => {
                let q = pose.to_local(p).abs() - Vec3::from(*half_extents);
                q.sup(&Vec3::zeros()).norm() + q.max().min(0.0)
            }
            ShapeNode::Torus { major, minor, pose } => {
                let l = pose.to_local(p);
                let ring = (l.x * l.x + l.y * l.y).sqrt() - major;
                (ring * ring + l.z * l.z).sqrt() - minor
            }
            ShapeNode::Superquadric { radii, exponents, pose } => {
                let l = pose.to_local(p);
                let r = l.norm();
                if r < 1e-12 {
                    return -radii.iter().cloned().fold(f64::INFINITY, f64::min) * 0.5;
                }
                let [e1, e2] = *exponents;
                let x = (l.x / radii[0]).abs().powf(2.0 / e2);
                let y = (l.y / radii[1]).abs().powf(2.0 / e2);
                let z = (l.z / radii[2]).abs().powf(2.0 / e1);
                let f = (x + y).powf(e2 / e1) + z;
                0.5 * r * (1.0 - f.powf(-e1 / 2.0))
            }
            ShapeNode::Union { children } => children.iter().map(|c| c.sdf(p)).fold(f64::INFINITY, f64::min),
            ShapeNode::Intersection { children } => children.iter().map(|c| c.sdf(p)).fold(f64::NEG_INFINITY, f64::max),
            ShapeNode::Difference { children } => {
                let mut d = children[0].sdf(p);
                for c in &children[1..] {
                    d = d.max(-c.sdf(p));
                }
                d
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = |v: f64, what: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{what} must be positive, got {v}")))
            }
        };
        match self {
            ShapeNode::Sphere { radius, .. } => positive(*radius, "sphere radius"),
            ShapeNode::Box { half_extents, .. } => {
                half_extents.iter().try_for_each(|h| positive(*h, "box half extent"))
            }
            ShapeNode::Torus { major, minor, .. } => {
                positive(*major, "torus major radius")?;
                positive(*minor, "torus minor radius")
            }
            ShapeNode::Superquadric { radii, exponents, .. } => {
                radii.iter().try_for_each(|r| positive(*r, "superquadric radius"))?;
                exponents.iter().try_for_each(|e| positive(*e, "superquadric exponent"))
            }
            ShapeNode::Union { children }
            | ShapeNode::Intersection { children }
            | ShapeNode::Difference { children } => {
                if children.is_empty() {
                    return Err(Error::InvalidArgument("CSG node without children".into()));
                }
                children.iter().try_for_each(|c| c.validate())
            }
        }
    }

    /// Conservative bounding radius around the origin.
    fn bound(&self) -> f64 {
        match self {
            ShapeNode::Sphere { radius, pose } => Vec3::from(pose.t).norm() + radius,
            ShapeNode::Box { half_extents, pose } => Vec3::from(pose.t).norm() + Vec3::from(*half_extents).norm(),
            ShapeNode::Torus { major, minor, pose } => Vec3::from(pose.t).norm() + major + minor,
            ShapeNode::Superquadric { radii, pose, .. } => Vec3::from(pose.t).norm() + Vec3::from(*radii).norm(),
            ShapeNode::Union { children } | ShapeNode::Intersection { children } => {
                children.iter().map(|c| c.bound()).fold(0.0, f64::max)
            }
            ShapeNode::Difference { children } => children[0].bound(),
        }
    }
}

/// A primitive tree placed in canonical space by a uniform scale and offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub root: ShapeNode,
    /// Canonical point `p` evaluates the tree at `(p - offset) / scale`.
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub offset: [f64; 3],
}

fn one() -> f64 {
    1.0
}

impl ShapeSpec {
    pub fn new(root: ShapeNode) -> Result<Self> {
        root.validate()?;
        Ok(Self {
            root,
            scale: 1.0,
            offset: [0.0; 3],
        })
    }

    pub fn sphere(radius: f64) -> Result<Self> {
        Self::new(ShapeNode::Sphere {
            radius,
            pose: Pose::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidArgument("shape scale must be positive".into()));
        }
        self.root.validate()
    }

    pub fn sdf(&self, p: &Vec3) -> f64 {
        self.scale * self.root.sdf(&((p - Vec3::from(self.offset)) / self.scale))
    }

    /// Radius of a ball around the origin that contains the whole shape.
    pub fn bounding_radius(&self) -> f64 {
        self.scale * self.root.bound() + Vec3::from(self.offset).norm()
    }

    /// Central-difference gradient of the distance field.
    pub fn gradient(&self, p: &Vec3, h: f64) -> Vec3 {
        let mut g = Vec3::zeros();
        for axis in 0..3 {
            let mut e = Vec3::zeros();
            e[axis] = h;
            g[axis] = (self.sdf(&(p + e)) - self.sdf(&(p - e))) / (2.0 * h);
        }
        g
    }

    pub fn normal(&self, p: &Vec3) -> Vec3 {
        let g = self.gradient(p, 1e-5);
        let n = g.norm();
        if n > 1e-12 {
            g / n
        } else {
            Vec3::z()
        }
    }

    /// Rescales and recenters so the shape is origin-centered (bounding-box
    /// center) with unit diameter (largest distance from the center = 0.5),
    /// measured on a dense set of surface samples.
    pub fn normalized(&self, seed: u64) -> Result<ShapeSpec> {
        let mut base = self.clone();
        base.scale = 1.0;
        base.offset = [0.0; 3];
        let samples = super::surface::sample_surface_points(&base, 4000, seed)?;
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in &samples {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let center = (lo + hi) / 2.0;
        let radius = samples.iter().map(|p| (p - center).norm()).fold(0.0, f64::max);
        if radius <= 0.0 {
            return Err(Error::Degenerate("shape has no extent".into()));
        }
        let scale = 0.5 / radius;
        Ok(ShapeSpec {
            root: self.root.clone(),
            scale,
            offset: (-center * scale).into(),
        })
    }

    /// Shape whose field is `sdf'(q) = s_g * sdf(g^-1 q)`.
    pub fn transformed(&self, g: &Sim3Transform) -> ShapeSpec {
        let mut root = self.root.clone();
        rotate_tree(&mut root, g.rotation());
        ShapeSpec {
            root,
            scale: self.scale * g.scale(),
            offset: g.apply(&Vec3::from(self.offset)).into(),
        }
    }
}

fn rotate_tree(node: &mut ShapeNode, r: &Quat) {
    match node {
        ShapeNode::Sphere { pose, .. }
        | ShapeNode::Box { pose, .. }
        | ShapeNode::Torus { pose, .. }
        | ShapeNode::Superquadric { pose, .. } => {
            *pose = Pose::new(*r * pose.rotation(), r * Vec3::from(pose.t));
        }
        ShapeNode::Union { children } | ShapeNode::Intersection { children } | ShapeNode::Difference { children } => {
            for c in children {
                rotate_tree(c, r);
            }
        }
    }
}

/// Primitive families for random shape generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Sphere,
    Box,
    Torus,
    Superquadric,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 4] = [
        PrimitiveKind::Sphere,
        PrimitiveKind::Box,
        PrimitiveKind::Torus,
        PrimitiveKind::Superquadric,
    ];
}

fn random_rotation(rng: &mut impl Rng) -> Quat {
    // Uniform over SO(3) (Shoemake).
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let tau = std::f64::consts::TAU;
    let q = nalgebra::Quaternion::new(
        (1.0 - u1).sqrt() * (tau * u2).sin(),
        (1.0 - u1).sqrt() * (tau * u2).cos(),
        u1.sqrt() * (tau * u3).sin(),
        u1.sqrt() * (tau * u3).cos(),
    );
    Quat::new_normalize(q)
}

pub fn random_primitive(kind: PrimitiveKind, rng: &mut impl Rng, center_spread: f64) -> ShapeNode {
    let pose = Pose::new(
        random_rotation(rng),
        Vec3::new(
            rng.random_range(-center_spread..=center_spread),
            rng.random_range(-center_spread..=center_spread),
            rng.random_range(-center_spread..=center_spread),
        ),
    );
    match kind {
        PrimitiveKind::Sphere => ShapeNode::Sphere {
            radius: rng.random_range(0.3..0.6),
            pose,
        },
        PrimitiveKind::Box => ShapeNode::Box {
            half_extents: [
                rng.random_range(0.15..0.5),
                rng.random_range(0.15..0.5),
                rng.random_range(0.15..0.5),
            ],
            pose,
        },
        PrimitiveKind::Torus => {
            let major = rng.random_range(0.3..0.5);
            ShapeNode::Torus {
                major,
                minor: rng.random_range(0.1f64..0.2).min(0.8 * major),
                pose,
            }
        }
        PrimitiveKind::Superquadric => ShapeNode::Superquadric {
            radii: [
                rng.random_range(0.2..0.5),
                rng.random_range(0.2..0.5),
                rng.random_range(0.2..0.5),
            ],
            exponents: [rng.random_range(0.5..1.0), rng.random_range(0.5..1.0)],
            pose,
        },
    }
}

/// Single random primitive, normalized to canonical pose and unit diameter.
pub fn random_single_primitive(rng: &mut impl Rng, seed: u64) -> Result<ShapeSpec> {
    let kind = PrimitiveKind::ALL[rng.random_range(0..PrimitiveKind::ALL.len())];
    ShapeSpec::new(random_primitive(kind, rng, 0.0))?.normalized(seed)
}

/// Random tree: one base primitive, optionally combined with a second one by
/// union or difference. Normalized to canonical pose and unit diameter.
pub fn random_shape(rng: &mut impl Rng, seed: u64, csg_probability: f64) -> Result<ShapeSpec> {
    let kind = PrimitiveKind::ALL[rng.random_range(0..PrimitiveKind::ALL.len())];
    let base = random_primitive(kind, rng, 0.0);
    let root = if rng.random::<f64>() < csg_probability {
        let other_kind = PrimitiveKind::ALL[rng.random_range(0..PrimitiveKind::ALL.len())];
        let mut other = random_primitive(other_kind, rng, 0.35);
        if let ShapeNode::Sphere { radius, .. } = &mut other {
            *radius *= 0.7;
        }
        if rng.random::<f64>() < 0.6 {
            ShapeNode::Union {
                children: vec![base, other],
            }
        } else {
            ShapeNode::Difference {
                children: vec![base, other],
            }
        }
    } else {
        base
    };
    ShapeSpec::new(root)?.normalized(seed)
}

//! Built-in parametric shape catalog.
//!
//! Twelve classes with distinct geometry, each sampled uniformly by surface
//! area. All sampling runs in f64 regardless of the crate's scalar parameter
//! so that generated datasets are bit-identical across precision settings.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::mesh::{self, Mesh};
use crate::linalg::{add3, cross3, norm3, scale3, Vec3};

/// One entry of the synthetic catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Pyramid,
    Capsule,
    Ellipsoid,
    BoxFrame,
    TwoSphere,
    Disk,
    Helix,
}

/// Catalog order; also the label space of `generate_shape`.
pub const CATALOG: [ShapeClass; 12] = [
    ShapeClass::Sphere,
    ShapeClass::Cube,
    ShapeClass::Cylinder,
    ShapeClass::Cone,
    ShapeClass::Torus,
    ShapeClass::Pyramid,
    ShapeClass::Capsule,
    ShapeClass::Ellipsoid,
    ShapeClass::BoxFrame,
    ShapeClass::TwoSphere,
    ShapeClass::Disk,
    ShapeClass::Helix,
];

impl ShapeClass {
    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Cube => "cube",
            ShapeClass::Cylinder => "cylinder",
            ShapeClass::Cone => "cone",
            ShapeClass::Torus => "torus",
            ShapeClass::Pyramid => "pyramid",
            ShapeClass::Capsule => "capsule",
            ShapeClass::Ellipsoid => "ellipsoid",
            ShapeClass::BoxFrame => "box-frame",
            ShapeClass::TwoSphere => "two-sphere",
            ShapeClass::Disk => "disk",
            ShapeClass::Helix => "helix",
        }
    }

    pub fn parse(name: &str) -> Option<ShapeClass> {
        CATALOG.iter().copied().find(|c| c.name() == name)
    }

    /// Index of this class within [`CATALOG`].
    pub fn catalog_index(self) -> usize {
        CATALOG.iter().position(|&c| c == self).unwrap()
    }

    /// `n` surface points, uniform by area, before jitter and noise.
    pub fn sample_cloud(self, n: usize, rng: &mut ChaCha12Rng) -> Vec<Vec3<f64>> {
        let analytic = match self {
            ShapeClass::Sphere => unit_sphere as fn(&mut ChaCha12Rng) -> Vec3<f64>,
            ShapeClass::Cylinder => cylinder,
            ShapeClass::Cone => cone,
            ShapeClass::Torus => torus,
            ShapeClass::Capsule => capsule,
            ShapeClass::Ellipsoid => ellipsoid,
            ShapeClass::TwoSphere => two_sphere,
            ShapeClass::Disk => disk,
            ShapeClass::Helix => helix,
            ShapeClass::Cube => return mesh::sample_points(&cube_mesh(), n, rng),
            ShapeClass::Pyramid => return mesh::sample_points(&pyramid_mesh(), n, rng),
            ShapeClass::BoxFrame => return mesh::sample_points(&box_frame_mesh(), n, rng),
        };
        (0..n).map(|_| analytic(rng)).collect()
    }
}

/// Uniform direction on S²; rejection keeps the gaussian triple well away
/// from zero so the normalization is stable.
fn unit_sphere(rng: &mut ChaCha12Rng) -> Vec3<f64> {
    loop {
        let v = [gaussian(rng), gaussian(rng), gaussian(rng)];
        let n = norm3(&v);
        if n > 1e-6 {
            return scale3(&v, 1.0 / n);
        }
    }
}

fn gaussian(rng: &mut ChaCha12Rng) -> f64 {
    rng.sample::<f64, _>(rand_distr::StandardNormal)
}

/// Cylinder: radius 0.5, z in [-1, 1], capped.
fn cylinder(rng: &mut ChaCha12Rng) -> Vec3<f64> {
    let r = 0.5;
    let lateral = 2.0 * std::f64::consts::PI * r * 2.0;
    let cap = std::f64::consts::PI * r * r;
    let u: f64 = rng.random_range(0.0..lateral + 2.0 * cap);
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    if u < lateral {
        let z = rng.random_range(-1.0..1.0);
        [r * phi.cos(), r * phi.sin(), z]
    } else {
        let rho = r * rng.random_range(0.0f64..1.0).sqrt();
        let z = if u < lateral + cap { 1.0 } else { -1.0 };
        [rho * phi.cos(), rho * phi.sin(), z]
    }
}

/// Cone: base radius 0.7 at z = -0.7, apex at z = +0.7, with base disk.
fn cone(rng: &mut ChaCha12Rng) -> Vec3<f64> {
    let (r, h) = (0.7f64, 1.4f64);
    let slant = (r * r + h * h).sqrt();
    let lateral = std::f64::consts::PI * r * slant;
    let base = std::f64::consts::PI * r * r;
    let u: f64 = rng.random_range(0.0..lateral + base);
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    if u < lateral {
        // Area grows linearly with distance from the apex along the slant.
        let t = rng.random_range(0.0f64..1.0).sqrt();
        [t * r * phi.cos(), t * r * phi.sin(), 0.7 - t * h]
    } else {
        let rho = r * rng.random_range(0.0f64..1.0).sqrt();
        [rho * phi.cos(), rho * phi.sin(), -0.7]
    }
}

/// Torus: ring radius 0.7, tube radius 0.3.
fn torus(rng: &mut ChaCha12Rng) -> Vec3<f64> {
    let (big, small) = (0.7, 0.3);
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    // Tube angle density is proportional to (big + small*cos θ).
    let theta = loop {
        let t = rng.random_range(0.0..std::f64::consts::TAU);
        let accept = (big + small * t.cos()) / (big + small);
        if rng.random_range(0.0..1.0) < accept {
            break t;
        }
    };
    let w = big + small * theta.cos();
    [w * phi.cos(), w * phi.sin(), small * theta.sin()]
}

/// Capsule: cylinder radius 0.45 with z in [-0.55, 0.55] and hemispherical
/// end caps.
fn capsule(rng: &mut ChaCha12Rng) -> Vec3<f64> {
    let (r, hh) = (0.45, 0.55);
    let lateral = std::f64::consts::TAU * r * 2.0 * hh;
    let caps = 4.0 * std::f64::consts::PI * r * r;
    let u: f64 = rng.random_range(0.0..lateral + caps);
    if u < lateral {
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let z = rng.random_range(-hh..hh);
        [r * phi.cos(), r * phi.sin(), z]
    } else {
        let d = unit_sphere(rng);
        let top = u < lateral + caps * 0.5;
        let z = if top { d[2].abs() } else { -d[2].abs() };
        let off = if top { hh } else { -hh };
        [r * d[0], r * d[1], r * z + off]
    }
}

/// Ellipsoid with semi-axes (1.0, 0.62, 0.38); rejection corrects the sphere
/// map for area distortion.
fn ellipsoid(rng: &mut ChaCha12Rng) -> Vec3<f64> {
    let (a, b, c) = (1.0, 0.62, 0.38);
    loop {
        let u = unit_sphere(rng);
        let g = ((b * c * u[0]).powi(2) + (a * c * u[1]).powi(2) + (a * b * u[2]).powi(2)).sqrt();
        if rng.random_range(0.0..1.0) < g / (a * b) {
            return [a * u[0], b * u[1], c * u[2]];
        }
    }
}

/// Two spheres of radius 0.55 centered at x = ±0.65.
fn two_sphere(rng: &mut ChaCha12Rng) -> Vec3<f64> {
    let d = unit_sphere(rng);
    let side = if rng.random_range(0.0..1.0) < 0.5 { 0.65 } else { -0.65 };
    add3(&scale3(&d, 0.55), &[side, 0.0, 0.0])
}

/// Flat disk of radius 1 in the xy-plane.
fn disk(rng: &mut ChaCha12Rng) -> Vec3<f64> {
    let rho = rng.random_range(0.0f64..1.0).sqrt();
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    [rho * phi.cos(), rho * phi.sin(), 0.0]
}

/// Open helical tube: coil radius 0.55, rise 0.09 per radian, 2.5 turns,
/// tube radius 0.18, vertically centered.
fn helix(rng: &mut ChaCha12Rng) -> Vec3<f64> {
    let (a, b, rho) = (0.55f64, 0.09f64, 0.18f64);
    let t_max = 5.0 * std::f64::consts::PI;
    let c = (a * a + b * b).sqrt();
    let kappa = a / (c * c);
    // Arc length is linear in t, so t is uniform; the tube angle density is
    // proportional to (1 - rho*kappa*cos alpha).
    let t = rng.random_range(0.0..t_max);
    let alpha = loop {
        let al = rng.random_range(0.0..std::f64::consts::TAU);
        let accept = (1.0 - rho * kappa * al.cos()) / (1.0 + rho * kappa);
        if rng.random_range(0.0..1.0) < accept {
            break al;
        }
    };
    let center = [a * t.cos(), a * t.sin(), b * t - b * t_max / 2.0];
    let tangent = scale3(&[-a * t.sin(), a * t.cos(), b], 1.0 / c);
    let normal = [-t.cos(), -t.sin(), 0.0];
    let binormal = cross3(&tangent, &normal);
    let radial = add3(&scale3(&normal, alpha.cos()), &scale3(&binormal, alpha.sin()));
    add3(&center, &scale3(&radial, rho))
}

/// Axis-aligned box as 12 triangles, for mesh-based catalog entries.
fn push_box(mesh: &mut MeshBuilder, center: Vec3<f64>, half: Vec3<f64>) {
    let base = mesh.vertices.len();
    for dx in [-1.0, 1.0] {
        for dy in [-1.0, 1.0] {
            for dz in [-1.0, 1.0] {
                mesh.vertices.push([
                    center[0] + dx * half[0],
                    center[1] + dy * half[1],
                    center[2] + dz * half[2],
                ]);
            }
        }
    }
    // Vertex order above is (x,y,z) bits: index = 4*bx + 2*by + bz.
    const QUADS: [[usize; 4]; 6] = [
        [0, 1, 3, 2], // x = -1
        [4, 6, 7, 5], // x = +1
        [0, 4, 5, 1], // y = -1
        [2, 3, 7, 6], // y = +1
        [0, 2, 6, 4], // z = -1
        [1, 5, 7, 3], // z = +1
    ];
    for q in QUADS {
        mesh.faces.push([base + q[0], base + q[1], base + q[2]]);
        mesh.faces.push([base + q[0], base + q[2], base + q[3]]);
    }
}

struct MeshBuilder {
    vertices: Vec<Vec3<f64>>,
    faces: Vec<[usize; 3]>,
}

impl MeshBuilder {
    fn new() -> Self {
        MeshBuilder { vertices: Vec::new(), faces: Vec::new() }
    }

    fn build(self) -> Mesh {
        Mesh::new(self.vertices, self.faces).expect("catalog meshes are valid")
    }
}

/// Cube of side 1 centered at the origin.
fn cube_mesh() -> Mesh {
    let mut b = MeshBuilder::new();
    push_box(&mut b, [0.0; 3], [0.5; 3]);
    b.build()
}

/// Square pyramid: base half-width 0.7 at z = -0.5, apex at z = +0.9.
fn pyramid_mesh() -> Mesh {
    let mut b = MeshBuilder::new();
    let (h, z0) = (0.7, -0.5);
    b.vertices = vec![
        [-h, -h, z0],
        [h, -h, z0],
        [h, h, z0],
        [-h, h, z0],
        [0.0, 0.0, 0.9],
    ];
    b.faces = vec![[0, 2, 1], [0, 3, 2], [0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]];
    b.build()
}

/// Wireframe cube: 12 square beams of half-thickness 0.1 along the edges of
/// a cube with half-extent 0.8.
fn box_frame_mesh() -> Mesh {
    let (e, t) = (0.8, 0.1);
    let mut b = MeshBuilder::new();
    for s1 in [-e, e] {
        for s2 in [-e, e] {
            push_box(&mut b, [0.0, s1, s2], [e + t, t, t]);
            push_box(&mut b, [s1, 0.0, s2], [t, e + t, t]);
            push_box(&mut b, [s1, s2, 0.0], [t, t, e + t]);
        }
    }
    b.build()
}

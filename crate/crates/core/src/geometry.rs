//! Rotations, their sampling, and their action on point clouds.
//!
//! Rotations are stored as explicit 3x3 matrices because every consumer needs
//! the matrix action. Random rotations are drawn uniformly with respect to the
//! Haar measure on SO(3) by normalizing four independent standard normals into
//! a unit quaternion.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot3, norm3, scale3, sub3, Vec3};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("degenerate axis")]
    DegenerateAxis,
    #[error("empty point cloud")]
    EmptyCloud,
}

/// A proper rotation: orthogonal 3x3 matrix with determinant +1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation<R> {
    m: [[R; 3]; 3],
}

impl<R: Real> Rotation<R> {
    pub fn identity() -> Self {
        let mut m = [[R::zero(); 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = R::one();
        }
        Rotation { m }
    }

    /// Wraps a raw matrix. Callers must guarantee the rotation invariants;
    /// constructors in this module always do.
    pub fn from_matrix(m: [[R; 3]; 3]) -> Self {
        Rotation { m }
    }

    pub fn matrix(&self) -> &[[R; 3]; 3] {
        &self.m
    }

    /// R v
    #[inline]
    pub fn apply(&self, v: &Vec3<R>) -> Vec3<R> {
        [
            dot3(&self.m[0], v),
            dot3(&self.m[1], v),
            dot3(&self.m[2], v),
        ]
    }

    /// self · other (apply `other` first, then `self`).
    pub fn compose(&self, other: &Rotation<R>) -> Rotation<R> {
        let mut m = [[R::zero(); 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                let mut acc = R::zero();
                for k in 0..3 {
                    acc += self.m[i][k] * other.m[k][j];
                }
                *cell = acc;
            }
        }
        Rotation { m }
    }

    /// Transpose, which is also the inverse for a rotation.
    pub fn transpose(&self) -> Rotation<R> {
        let mut m = [[R::zero(); 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = self.m[j][i];
            }
        }
        Rotation { m }
    }

    pub fn det(&self) -> R {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Max absolute entry of RᵀR − I; zero for an exact rotation.
    pub fn orthogonality_residual(&self) -> R {
        let t = self.transpose();
        let p = t.compose(self);
        let mut worst = R::zero();
        for (i, row) in p.m.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let target = if i == j { R::one() } else { R::zero() };
                worst = worst.max((v - target).abs());
            }
        }
        worst
    }
}

/// An ordered collection of 3D points with an optional per-point normal and a
/// class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud<R> {
    pub points: Vec<Vec3<R>>,
    pub normals: Option<Vec<Vec3<R>>>,
    pub label: usize,
}

impl<R: Real> PointCloud<R> {
    pub fn new(points: Vec<Vec3<R>>, label: usize) -> Self {
        PointCloud {
            points,
            normals: None,
            label,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3<R> {
        let mut c = [R::zero(); 3];
        for p in &self.points {
            c[0] += p[0];
            c[1] += p[1];
            c[2] += p[2];
        }
        let n = R::from_f64(self.points.len() as f64);
        [c[0] / n, c[1] / n, c[2] / n]
    }
}

/// Rodrigues rotation about `axis` by `angle` radians.
///
/// The axis is normalized internally; a zero axis is rejected.
pub fn rotation_from_axis_angle<R: Real>(
    axis: &Vec3<R>,
    angle: R,
) -> Result<Rotation<R>, GeometryError> {
    let n = norm3(axis);
    if n < R::from_f64(1e-300) || !n.is_finite() {
        return Err(GeometryError::DegenerateAxis);
    }
    let u = scale3(axis, R::one() / n);
    let (s, c) = (angle.sin(), angle.cos());
    let t = R::one() - c;
    let (x, y, z) = (u[0], u[1], u[2]);
    let m = [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ];
    Ok(Rotation { m })
}

/// A rotation drawn uniformly w.r.t. the Haar measure on SO(3).
///
/// Four independent standard normals are normalized into a unit quaternion,
/// which is mapped to its matrix form. Draws consume exactly four values from
/// the stream, so fixed seeds reproduce fixed rotations bit-for-bit.
pub fn random_rotation<R: Real, G: Rng + ?Sized>(rng: &mut G) -> Rotation<R> {
    loop {
        let q: [f64; 4] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if n < 1e-8 {
            continue; // astronomically rare; redraw keeps the map well-defined
        }
        let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        let m = [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ];
        let mut out = [[R::zero(); 3]; 3];
        for (o, r) in out.iter_mut().zip(&m) {
            for (ov, &rv) in o.iter_mut().zip(r) {
                *ov = R::from_f64(rv);
            }
        }
        return Rotation { m: out };
    }
}

/// Applies `rot` to every point (and normal, when present); label unchanged.
pub fn rotate_cloud<R: Real>(rot: &Rotation<R>, cloud: &PointCloud<R>) -> PointCloud<R> {
    PointCloud {
        points: cloud.points.iter().map(|p| rot.apply(p)).collect(),
        normals: cloud
            .normals
            .as_ref()
            .map(|ns| ns.iter().map(|n| rot.apply(n)).collect()),
        label: cloud.label,
    }
}

/// Max pairwise-distance discrepancy between two clouds of equal length.
pub fn pairwise_distance_residual<R: Real>(a: &PointCloud<R>, b: &PointCloud<R>) -> R {
    let mut worst = R::zero();
    for i in 0..a.points.len() {
        for j in (i + 1)..a.points.len() {
            let da = norm3(&sub3(&a.points[i], &a.points[j]));
            let db = norm3(&sub3(&b.points[i], &b.points[j]));
            worst = worst.max((da - db).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    #[test]
    fn quarter_turn_about_z() {
        let rot = rotation_from_axis_angle(&[0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2).unwrap();
        let v = rot.apply(&[1.0, 0.0, 0.0]);
        assert!((v[0]).abs() < 1e-15);
        assert!((v[1] - 1.0).abs() < 1e-15);
        assert!((v[2]).abs() < 1e-15);
    }

    #[test]
    fn zero_angle_is_identity() {
        let rot = rotation_from_axis_angle(&[0.3, -0.4, 0.8], 0.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0f64 } else { 0.0 };
                assert!((rot.matrix()[i][j] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn full_turn_is_identity() {
        let rot =
            rotation_from_axis_angle(&[1.0, 0.0, 0.0], 2.0 * std::f64::consts::PI).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0f64 } else { 0.0 };
                assert!((rot.matrix()[i][j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_axis_rejected() {
        let err = rotation_from_axis_angle(&[0.0, 0.0, 0.0], 1.0).unwrap_err();
        assert!(matches!(err, GeometryError::DegenerateAxis));
    }

    #[test]
    fn random_rotations_live_on_so3() {
        let mut r = rng(7);
        for _ in 0..200 {
            let rot: Rotation<f64> = random_rotation(&mut r);
            assert!((rot.det() - 1.0).abs() < 1e-12);
            assert!(rot.orthogonality_residual() < 1e-12);
        }
    }

    // Monte-Carlo check of Haar uniformity: by symmetry the mean of R·v over
    // uniform rotations is exactly zero, so the empirical mean of 1e5 draws
    // must be small.
    #[test]
    fn haar_mean_of_rotated_vector_vanishes() {
        let mut r = rng(42);
        let v = [1.0f64, 0.0, 0.0];
        let n = 100_000;
        let mut acc = [0.0f64; 3];
        for _ in 0..n {
            let rot: Rotation<f64> = random_rotation(&mut r);
            let w = rot.apply(&v);
            acc[0] += w[0];
            acc[1] += w[1];
            acc[2] += w[2];
        }
        let mean = [acc[0] / n as f64, acc[1] / n as f64, acc[2] / n as f64];
        assert!(norm3(&mean) < 0.02, "empirical mean {:?}", mean);
    }

    #[test]
    fn same_seed_reproduces_bitwise() {
        let a: Rotation<f64> = random_rotation(&mut rng(99));
        let b: Rotation<f64> = random_rotation(&mut rng(99));
        assert_eq!(a.matrix(), b.matrix());
    }

    fn sample_cloud(seed: u64, n: usize) -> PointCloud<f64> {
        let mut r = rng(seed);
        let points = (0..n)
            .map(|_| {
                [
                    r.random_range(-1.0..1.0),
                    r.random_range(-1.0..1.0),
                    r.random_range(-1.0..1.0),
                ]
            })
            .collect();
        PointCloud::new(points, 3)
    }

    #[test]
    fn identity_rotation_leaves_cloud_untouched() {
        let cloud = sample_cloud(1, 32);
        let out = rotate_cloud(&Rotation::identity(), &cloud);
        assert_eq!(out, cloud);
    }

    #[test]
    fn rotation_action_composes() {
        let cloud = sample_cloud(2, 24);
        let mut r = rng(5);
        let r1: Rotation<f64> = random_rotation(&mut r);
        let r2: Rotation<f64> = random_rotation(&mut r);
        let seq = rotate_cloud(&r2, &rotate_cloud(&r1, &cloud));
        let fused = rotate_cloud(&r2.compose(&r1), &cloud);
        for (a, b) in seq.points.iter().zip(&fused.points) {
            assert!(norm3(&sub3(a, b)) < 1e-12);
        }
    }

    #[test]
    fn rotation_preserves_point_norms() {
        let cloud = sample_cloud(3, 40);
        let mut r = rng(6);
        let rot: Rotation<f64> = random_rotation(&mut r);
        let out = rotate_cloud(&rot, &cloud);
        for (a, b) in cloud.points.iter().zip(&out.points) {
            assert!((norm3(a) - norm3(b)).abs() < 1e-12);
        }
    }

    #[test]
    fn normals_rotate_with_points() {
        let mut cloud = sample_cloud(4, 8);
        cloud.normals = Some(vec![[0.0, 0.0, 1.0]; 8]);
        let rot = rotation_from_axis_angle(&[1.0, 0.0, 0.0], std::f64::consts::FRAC_PI_2).unwrap();
        let out = rotate_cloud(&rot, &cloud);
        for n in out.normals.unwrap() {
            assert!(norm3(&sub3(&n, &[0.0, -1.0, 0.0])) < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn prop_rotation_is_isometry(seed in 0u64..1_000, cloud_seed in 0u64..1_000) {
            let cloud = sample_cloud(cloud_seed, 12);
            let rot: Rotation<f64> = random_rotation(&mut rng(seed));
            let out = rotate_cloud(&rot, &cloud);
            prop_assert!(pairwise_distance_residual(&cloud, &out) < 1e-9);
        }
    }
}

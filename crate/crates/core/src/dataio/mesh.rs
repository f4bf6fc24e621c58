//! Triangle meshes and area-weighted surface sampling.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::DataError;
use crate::linalg::{cross3, norm3, sub3, Vec3};

/// Triangle mesh in double precision.
///
/// Invariants (checked by [`Mesh::new`]): all face indices in range, the
/// three indices of every face distinct, total surface area positive.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub vertices: Vec<Vec3<f64>>,
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3<f64>>, faces: Vec<[usize; 3]>) -> Result<Mesh, DataError> {
        for (fi, f) in faces.iter().enumerate() {
            for &ix in f {
                if ix >= vertices.len() {
                    return Err(DataError::FaceIndexOutOfRange {
                        face: fi,
                        index: ix,
                        vertices: vertices.len(),
                    });
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(DataError::DegenerateFace { face: fi });
            }
        }
        let mesh = Mesh { vertices, faces };
        if !(mesh.total_area() > 0.0) {
            return Err(DataError::ZeroAreaMesh);
        }
        Ok(mesh)
    }

    pub fn triangle_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.faces[face];
        let u = sub3(&self.vertices[b], &self.vertices[a]);
        let v = sub3(&self.vertices[c], &self.vertices[a]);
        0.5 * norm3(&cross3(&u, &v))
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.triangle_area(f)).sum()
    }
}

/// `n` points, triangles weighted by area, uniform barycentric inside each.
/// Zero-area triangles get zero mass. Assumes mesh invariants hold.
pub(crate) fn sample_points(mesh: &Mesh, n: usize, rng: &mut ChaCha12Rng) -> Vec<Vec3<f64>> {
    let mut cum = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.triangle_area(f);
        cum.push(total);
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random_range(0.0..total);
        let f = cum.partition_point(|&c| c <= u).min(mesh.faces.len() - 1);
        let [ia, ib, ic] = mesh.faces[f];
        let (a, b, c) = (&mesh.vertices[ia], &mesh.vertices[ib], &mesh.vertices[ic]);
        let r1: f64 = rng.random_range(0.0..1.0);
        let r2: f64 = rng.random_range(0.0..1.0);
        let s = r1.sqrt();
        let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
        out.push([
            wa * a[0] + wb * b[0] + wc * c[0],
            wa * a[1] + wb * b[1] + wc * c[1],
            wa * a[2] + wb * b[2] + wc * c[2],
        ]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;

    fn triangle() -> Mesh {
        Mesh::new(
            vec![[0.0, 0.0, 1.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0]],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    #[test]
    fn rejects_bad_faces() {
        let verts = vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        assert!(matches!(
            Mesh::new(verts.clone(), vec![[0, 1, 5]]),
            Err(DataError::FaceIndexOutOfRange { index: 5, vertices: 3, .. })
        ));
        assert!(matches!(
            Mesh::new(verts.clone(), vec![[0, 1, 1]]),
            Err(DataError::DegenerateFace { face: 0 })
        ));
        let flat = vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert!(matches!(Mesh::new(flat, vec![[0, 1, 2]]), Err(DataError::ZeroAreaMesh)));
    }

    #[test]
    fn triangle_samples_lie_in_plane() {
        let m = triangle();
        let mut rng = seeding::stream(9, "tri", &[]);
        for p in sample_points(&m, 500, &mut rng) {
            assert!((p[2] - 1.0).abs() < 1e-9);
            assert!(p[0] >= -1e-12 && p[1] >= -1e-12 && p[0] + p[1] <= 1.0 + 1e-12);
        }
    }
}

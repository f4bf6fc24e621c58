//! Feature maps and the forward passes of the individual layers.
//!
//! A vector-neuron feature map carries C channels of 3D vectors per point;
//! rotations act on the trailing spatial axis only. Each layer here commutes
//! with that action exactly (up to floating-point roundoff), which is what
//! the property suites pin down numerically.

use serde::{Deserialize, Serialize};

use crate::linalg::{dot3, Matrix, Vec3};
use crate::scalar::Real;

/// C channels of 3D vectors per point: layout `[c][p][xyz]`, contiguous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap<R> {
    channels: usize,
    points: usize,
    data: Vec<R>,
}

impl<R: Real> FeatureMap<R> {
    pub fn zeros(channels: usize, points: usize) -> Self {
        FeatureMap { channels, points, data: vec![R::zero(); channels * points * 3] }
    }

    /// Lifts raw points to the 2-channel map: channel 0 the position,
    /// channel 1 the mean edge vector into the point's neighborhood. With a
    /// single position channel every first-section channel is parallel per
    /// point, and the directional nonlinearity can annihilate whole channels
    /// (or the entire map) at init.
    pub fn lift(points: &[Vec3<R>], nbhd: &[Vec<usize>]) -> Self {
        let mut map = FeatureMap::zeros(2, points.len());
        for (p, v) in points.iter().enumerate() {
            map.set(0, p, *v);
            let set = &nbhd[p];
            let inv = R::one() / R::from_f64(set.len() as f64);
            let mut e = [R::zero(); 3];
            for &n in set {
                e[0] += points[n][0] - v[0];
                e[1] += points[n][1] - v[1];
                e[2] += points[n][2] - v[2];
            }
            map.set(1, p, [e[0] * inv, e[1] * inv, e[2] * inv]);
        }
        map
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn points(&self) -> usize {
        self.points
    }

    #[inline]
    pub fn get(&self, c: usize, p: usize) -> Vec3<R> {
        let i = (c * self.points + p) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, c: usize, p: usize, v: Vec3<R>) {
        let i = (c * self.points + p) * 3;
        self.data[i] = v[0];
        self.data[i + 1] = v[1];
        self.data[i + 2] = v[2];
    }

    #[inline]
    pub fn add(&mut self, c: usize, p: usize, v: Vec3<R>) {
        let i = (c * self.points + p) * 3;
        self.data[i] += v[0];
        self.data[i + 1] += v[1];
        self.data[i + 2] += v[2];
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Applies a rotation matrix to every vector entry (the group action
    /// property tests exercise against).
    pub fn rotated(&self, rot: &crate::geometry::Rotation<R>) -> Self {
        let mut out = FeatureMap::zeros(self.channels, self.points);
        for c in 0..self.channels {
            for p in 0..self.points {
                out.set(c, p, rot.apply(&self.get(c, p)));
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Self) -> R {
        assert_eq!(self.data.len(), other.data.len());
        let mut m = R::zero();
        for (a, b) in self.data.iter().zip(&other.data) {
            m = m.max((*a - *b).abs());
        }
        m
    }
}

/// Channel-mixing map: `out[c,p,:] = Σ_j W[c,j] · V[j,p,:]`.
///
/// Acts only on the channel axis, so it commutes with rotations exactly.
pub fn vn_linear<R: Real>(w: &Matrix<R>, v: &FeatureMap<R>) -> FeatureMap<R> {
    assert_eq!(w.cols, v.channels(), "vn_linear: weight columns must match input channels");
    let mut out = FeatureMap::zeros(w.rows, v.points());
    for c in 0..w.rows {
        for j in 0..w.cols {
            let wcj = w.get(c, j);
            if wcj == R::zero() {
                continue;
            }
            for p in 0..v.points() {
                let x = v.get(j, p);
                out.add(c, p, [wcj * x[0], wcj * x[1], wcj * x[2]]);
            }
        }
    }
    out
}

/// Below this norm the learned direction is treated as undefined and the
/// nonlinearity passes its input through.
pub fn dir_epsilon<R: Real>() -> R {
    R::from_f64(1e-12)
}

/// Directional half-space nonlinearity.
///
/// One learned direction per point, `k[p] = Σ_c dir[c] · q[c,p,:]`. Channels
/// on the positive side of the plane normal to k pass through; channels on
/// the negative side are projected onto that plane. `‖k‖ < 1e-12` passes q
/// through (the projection limit is undefined there).
///
/// Returns the output map and the per-point directions (reused by the
/// gradient engine).
pub fn vn_nonlinear<R: Real>(dir: &[R], q: &FeatureMap<R>) -> (FeatureMap<R>, Vec<Vec3<R>>) {
    assert_eq!(dir.len(), q.channels(), "vn_nonlinear: direction weights must match channels");
    let (c_out, n_pts) = (q.channels(), q.points());
    let mut ks = vec![[R::zero(); 3]; n_pts];
    for p in 0..n_pts {
        let mut k = [R::zero(); 3];
        for c in 0..c_out {
            let qc = q.get(c, p);
            k[0] += dir[c] * qc[0];
            k[1] += dir[c] * qc[1];
            k[2] += dir[c] * qc[2];
        }
        ks[p] = k;
    }
    let eps = dir_epsilon::<R>();
    let mut out = FeatureMap::zeros(c_out, n_pts);
    for p in 0..n_pts {
        let k = ks[p];
        let n2 = dot3(&k, &k);
        let degenerate = n2.sqrt() < eps;
        for c in 0..c_out {
            let qc = q.get(c, p);
            let u = dot3(&qc, &k);
            if degenerate || u >= R::zero() {
                out.set(c, p, qc);
            } else {
                let s = u / n2;
                out.set(c, p, [qc[0] - s * k[0], qc[1] - s * k[1], qc[2] - s * k[2]]);
            }
        }
    }
    (out, ks)
}

/// Direction-aligned max pooling.
///
/// `ξ[p] = Σ_c pool_dir[c] · V[c,p,:]`; the output at (c, p) is the
/// neighborhood element whose feature best aligns with ξ[p], ties broken by
/// lowest index. Returns the pooled map and the selected index per (c, p).
pub fn vn_maxpool<R: Real>(
    pool_dir: &[R],
    v: &FeatureMap<R>,
    neighborhoods: &[Vec<usize>],
) -> (FeatureMap<R>, Vec<usize>) {
    assert_eq!(pool_dir.len(), v.channels(), "vn_maxpool: direction weights must match channels");
    assert_eq!(neighborhoods.len(), v.points(), "vn_maxpool: one neighborhood per point");
    let (c_out, n_pts) = (v.channels(), v.points());
    let mut out = FeatureMap::zeros(c_out, n_pts);
    let mut selected = vec![0usize; c_out * n_pts];
    for p in 0..n_pts {
        let mut xi = [R::zero(); 3];
        for c in 0..c_out {
            let vc = v.get(c, p);
            xi[0] += pool_dir[c] * vc[0];
            xi[1] += pool_dir[c] * vc[1];
            xi[2] += pool_dir[c] * vc[2];
        }
        for c in 0..c_out {
            let mut best = neighborhoods[p][0];
            let mut best_score = dot3(&xi, &v.get(c, best));
            for &n in &neighborhoods[p][1..] {
                let score = dot3(&xi, &v.get(c, n));
                // Strict improvement only: equal scores keep the earlier
                // index, and neighborhoods are stored in ascending order.
                if score > best_score {
                    best = n;
                    best_score = score;
                }
            }
            out.set(c, p, v.get(c, best));
            selected[c * n_pts + p] = best;
        }
    }
    (out, selected)
}

/// [`vn_maxpool`] with the neighborhood of every point being all points;
/// avoids materializing P index sets of size P.
pub fn vn_maxpool_global<R: Real>(pool_dir: &[R], v: &FeatureMap<R>) -> (FeatureMap<R>, Vec<usize>) {
    assert_eq!(pool_dir.len(), v.channels());
    let (c_out, n_pts) = (v.channels(), v.points());
    let mut out = FeatureMap::zeros(c_out, n_pts);
    let mut selected = vec![0usize; c_out * n_pts];
    for p in 0..n_pts {
        let mut xi = [R::zero(); 3];
        for c in 0..c_out {
            let vc = v.get(c, p);
            xi[0] += pool_dir[c] * vc[0];
            xi[1] += pool_dir[c] * vc[1];
            xi[2] += pool_dir[c] * vc[2];
        }
        for c in 0..c_out {
            let mut best = 0usize;
            let mut best_score = dot3(&xi, &v.get(c, 0));
            for n in 1..n_pts {
                let score = dot3(&xi, &v.get(c, n));
                if score > best_score {
                    best = n;
                    best_score = score;
                }
            }
            out.set(c, p, v.get(c, best));
            selected[c * n_pts + p] = best;
        }
    }
    (out, selected)
}

/// [`scalar_maxpool`] over all points.
pub fn scalar_maxpool_global<R: Real>(v: &FeatureMap<R>) -> (FeatureMap<R>, Vec<usize>) {
    let (c_out, n_pts) = (v.channels(), v.points());
    let mut out = FeatureMap::zeros(c_out, n_pts);
    let mut selected = vec![0usize; c_out * n_pts * 3];
    for c in 0..c_out {
        // The winner is position-independent for global pooling.
        let mut best = [0usize; 3];
        let mut val = v.get(c, 0);
        for n in 1..n_pts {
            let x = v.get(c, n);
            for d in 0..3 {
                if x[d] > val[d] {
                    val[d] = x[d];
                    best[d] = n;
                }
            }
        }
        for p in 0..n_pts {
            out.set(c, p, val);
            for d in 0..3 {
                selected[(c * n_pts + p) * 3 + d] = best[d];
            }
        }
    }
    (out, selected)
}

/// Rotation-invariant readout: `out[c,p] = ⟨V[c,p,:], m[p,:]⟩` with m the
/// channel mean at each point.
pub fn invariant_reduce<R: Real>(v: &FeatureMap<R>) -> Matrix<R> {
    let (c_out, n_pts) = (v.channels(), v.points());
    let inv_c = R::one() / R::from_f64(c_out as f64);
    let mut out = Matrix::zeros(c_out, n_pts);
    for p in 0..n_pts {
        let mut m = [R::zero(); 3];
        for c in 0..c_out {
            let vc = v.get(c, p);
            m[0] += vc[0];
            m[1] += vc[1];
            m[2] += vc[2];
        }
        m = [m[0] * inv_c, m[1] * inv_c, m[2] * inv_c];
        for c in 0..c_out {
            out.set(c, p, dot3(&v.get(c, p), &m));
        }
    }
    out
}

/// Per-coordinate ReLU, the non-equivariant stand-in for `vn_nonlinear` in
/// the scalar-baseline trunk.
pub fn scalar_relu<R: Real>(q: &FeatureMap<R>) -> FeatureMap<R> {
    let mut out = FeatureMap::zeros(q.channels(), q.points());
    for c in 0..q.channels() {
        for p in 0..q.points() {
            let x = q.get(c, p);
            out.set(c, p, [x[0].max(R::zero()), x[1].max(R::zero()), x[2].max(R::zero())]);
        }
    }
    out
}

/// Per-coordinate neighborhood max, the non-equivariant stand-in for
/// `vn_maxpool`. Returns selected indices per (c, p, coordinate).
pub fn scalar_maxpool<R: Real>(
    v: &FeatureMap<R>,
    neighborhoods: &[Vec<usize>],
) -> (FeatureMap<R>, Vec<usize>) {
    assert_eq!(neighborhoods.len(), v.points());
    let (c_out, n_pts) = (v.channels(), v.points());
    let mut out = FeatureMap::zeros(c_out, n_pts);
    let mut selected = vec![0usize; c_out * n_pts * 3];
    for p in 0..n_pts {
        for c in 0..c_out {
            let mut best = [neighborhoods[p][0]; 3];
            let mut val = v.get(c, best[0]);
            for &n in &neighborhoods[p][1..] {
                let x = v.get(c, n);
                for d in 0..3 {
                    if x[d] > val[d] {
                        val[d] = x[d];
                        best[d] = n;
                    }
                }
            }
            out.set(c, p, val);
            for d in 0..3 {
                selected[(c * n_pts + p) * 3 + d] = best[d];
            }
        }
    }
    (out, selected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::random_rotation;
    use crate::seeding;
    use rand::Rng;

    fn random_map(c: usize, p: usize, seed: u64) -> FeatureMap<f64> {
        let mut rng = seeding::stream(seed, "map", &[c as u64, p as u64]);
        let mut m = FeatureMap::zeros(c, p);
        for ci in 0..c {
            for pi in 0..p {
                m.set(ci, pi, [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            }
        }
        m
    }

    fn random_weights(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = seeding::stream(seed, "w", &[rows as u64, cols as u64]);
        let mut w = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                w.set(r, c, rng.random_range(-1.0..1.0));
            }
        }
        w
    }

    fn full_neighborhoods(p: usize) -> Vec<Vec<usize>> {
        (0..p).map(|_| (0..p).collect()).collect()
    }

    #[test]
    fn identity_linear_is_identity() {
        let v = random_map(3, 5, 1);
        let out = vn_linear(&Matrix::identity(3), &v);
        assert_eq!(out, v);
    }

    #[test]
    fn linear_sums_channels() {
        let v = random_map(2, 4, 2);
        let mut w = Matrix::zeros(1, 2);
        w.set(0, 0, 1.0);
        w.set(0, 1, 1.0);
        let out = vn_linear(&w, &v);
        for p in 0..4 {
            let (a, b, o) = (v.get(0, p), v.get(1, p), out.get(0, p));
            for d in 0..3 {
                assert!((o[d] - (a[d] + b[d])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn linear_commutes_with_rotation() {
        let mut rng = seeding::stream(3, "rot", &[]);
        for trial in 0..20 {
            let v = random_map(4, 6, 10 + trial);
            let w = random_weights(5, 4, 20 + trial);
            let rot = random_rotation::<f64, _>(&mut rng);
            let a = vn_linear(&w, &v.rotated(&rot));
            let b = vn_linear(&w, &v).rotated(&rot);
            assert!(a.max_abs_diff(&b) < 1e-10);
        }
    }

    #[test]
    fn nonlinear_negative_branch_is_orthogonal_to_direction() {
        let q = random_map(4, 8, 4);
        let dir = vec![0.7, -0.3, 0.5, 0.2];
        let (out, ks) = vn_nonlinear(&dir, &q);
        let mut saw_negative = false;
        for p in 0..8 {
            for c in 0..4 {
                if dot3(&q.get(c, p), &ks[p]) < 0.0 {
                    saw_negative = true;
                    assert!(dot3(&out.get(c, p), &ks[p]).abs() < 1e-10);
                }
            }
        }
        assert!(saw_negative, "fixture never hit the projection branch");
    }

    #[test]
    fn nonlinear_positive_branch_passes_through() {
        // Single channel, dir weight 1: k = q, so <q,k> = |q|^2 >= 0 always.
        let mut q = FeatureMap::zeros(1, 1);
        q.set(0, 0, [0.0, 0.0, 1.0]);
        let (out, _) = vn_nonlinear(&[1.0], &q);
        assert_eq!(out.get(0, 0), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn nonlinear_degenerate_direction_passes_through() {
        let q = random_map(3, 4, 5);
        let (out, _) = vn_nonlinear(&[0.0, 0.0, 0.0], &q);
        assert_eq!(out, q);
    }

    #[test]
    fn nonlinear_commutes_with_rotation() {
        let mut rng = seeding::stream(6, "rot", &[]);
        for trial in 0..20 {
            let q = random_map(4, 6, 30 + trial);
            let dir = vec![0.9, -0.4, 0.15, 0.6];
            let rot = random_rotation::<f64, _>(&mut rng);
            let (a, _) = vn_nonlinear(&dir, &q.rotated(&rot));
            let b = vn_nonlinear(&dir, &q).0.rotated(&rot);
            assert!(a.max_abs_diff(&b) < 1e-10);
        }
    }

    #[test]
    fn maxpool_single_element_neighborhoods_are_identity() {
        let v = random_map(3, 5, 7);
        let nbhd: Vec<Vec<usize>> = (0..5).map(|p| vec![p]).collect();
        let (out, sel) = vn_maxpool(&[0.3, 0.4, -0.2], &v, &nbhd);
        assert_eq!(out, v);
        for p in 0..5 {
            for c in 0..3 {
                assert_eq!(sel[c * 5 + p], p);
            }
        }
    }

    #[test]
    fn maxpool_commutes_with_rotation_and_keeps_selection() {
        let mut rng = seeding::stream(8, "rot", &[]);
        for trial in 0..20 {
            let v = random_map(4, 7, 40 + trial);
            let dir = vec![0.5, 0.1, -0.7, 0.3];
            let nbhd = full_neighborhoods(7);
            let rot = random_rotation::<f64, _>(&mut rng);
            let (a, sel_rot) = vn_maxpool(&dir, &v.rotated(&rot), &nbhd);
            let (b, sel) = vn_maxpool(&dir, &v, &nbhd);
            assert_eq!(sel_rot, sel, "selection must be rotation-independent");
            assert!(a.max_abs_diff(&b.rotated(&rot)) < 1e-10);
        }
    }

    #[test]
    fn maxpool_breaks_ties_toward_lower_index() {
        // Two identical candidates: inner products tie exactly.
        let mut v = FeatureMap::zeros(1, 2);
        v.set(0, 0, [1.0, 0.0, 0.0]);
        v.set(0, 1, [1.0, 0.0, 0.0]);
        let (_, sel) = vn_maxpool(&[1.0], &v, &full_neighborhoods(2));
        assert_eq!(sel, vec![0, 0]);
    }

    #[test]
    fn reduce_is_rotation_invariant() {
        let mut rng = seeding::stream(9, "rot", &[]);
        for trial in 0..20 {
            let v = random_map(5, 6, 50 + trial);
            let rot = random_rotation::<f64, _>(&mut rng);
            let a = invariant_reduce(&v.rotated(&rot));
            let b = invariant_reduce(&v);
            let mut max = 0.0f64;
            for i in 0..a.data.len() {
                max = max.max((a.data[i] - b.data[i]).abs());
            }
            assert!(max < 1e-10);
        }
    }

    #[test]
    fn reduce_zero_and_single_channel_cases() {
        let z = FeatureMap::<f64>::zeros(3, 4);
        assert!(invariant_reduce(&z).data.iter().all(|&x| x == 0.0));
        let v = random_map(1, 6, 11);
        let out = invariant_reduce(&v);
        for p in 0..6 {
            let x = v.get(0, p);
            assert!((out.get(0, p) - dot3(&x, &x)).abs() < 1e-12);
        }
    }

    #[test]
    fn global_pool_variants_match_full_neighborhoods() {
        let v = random_map(3, 9, 15);
        let dir = vec![0.4, -0.6, 0.2];
        let full = full_neighborhoods(9);
        assert_eq!(vn_maxpool_global(&dir, &v), vn_maxpool(&dir, &v, &full));
        assert_eq!(scalar_maxpool_global(&v), scalar_maxpool(&v, &full));
    }

    #[test]
    fn scalar_ops_are_not_equivariant_but_are_deterministic() {
        let q = random_map(3, 6, 13);
        let a = scalar_relu(&q);
        let b = scalar_relu(&q);
        assert_eq!(a, b);
        let (pa, sa) = scalar_maxpool(&q, &full_neighborhoods(6));
        let (pb, sb) = scalar_maxpool(&q, &full_neighborhoods(6));
        assert_eq!(pa, pb);
        assert_eq!(sa, sb);
    }
}

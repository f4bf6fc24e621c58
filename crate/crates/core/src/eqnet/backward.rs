//! Reverse-mode gradients for the section trunk and heads.
//!
//! No general tape: the forward trace holds exactly the values each layer's
//! adjoint needs, and this module walks sections top-down. The pooling
//! argmax is treated as a fixed selection (gradient flows to the selected
//! element only; the pooling direction weights receive none), matching
//! standard max-pool backprop.

use serde::{Deserialize, Serialize};

use super::{ForwardTrace, Model, TrunkKind};
use crate::linalg::{axpy3, dot3, Matrix, Vec3};
use crate::scalar::Real;

/// Upstream gradients of a loss w.r.t. the per-section outputs.
#[derive(Debug, Clone)]
pub struct OutputGrads<R> {
    /// D × classes, w.r.t. section logits.
    pub dlogits: Vec<Vec<R>>,
    /// D × head_dim, w.r.t. pre-logit features.
    pub dfeats: Vec<Vec<R>>,
}

impl<R: Real> OutputGrads<R> {
    pub fn zeros(depth: usize, classes: usize, head_dim: usize) -> Self {
        OutputGrads {
            dlogits: vec![vec![R::zero(); classes]; depth],
            dfeats: vec![vec![R::zero(); head_dim]; depth],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionGrad<R> {
    pub weight: Matrix<R>,
    pub dir: Vec<R>,
    pub pool_dir: Vec<R>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadGrad<R> {
    pub proj_w: Matrix<R>,
    pub proj_b: Vec<R>,
    pub out_w: Matrix<R>,
    pub out_b: Vec<R>,
}

/// Shape-congruent mirror of a model's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSet<R> {
    pub sections: Vec<SectionGrad<R>>,
    pub heads: Vec<HeadGrad<R>>,
}

impl<R: Real> GradientSet<R> {
    pub fn zeros_like(model: &Model<R>) -> Self {
        GradientSet {
            sections: model
                .sections
                .iter()
                .map(|s| SectionGrad {
                    weight: Matrix::zeros(s.weight.rows, s.weight.cols),
                    dir: vec![R::zero(); s.dir.len()],
                    pool_dir: vec![R::zero(); s.pool_dir.len()],
                })
                .collect(),
            heads: model
                .heads
                .iter()
                .map(|h| HeadGrad {
                    proj_w: Matrix::zeros(h.proj_w.rows, h.proj_w.cols),
                    proj_b: vec![R::zero(); h.proj_b.len()],
                    out_w: Matrix::zeros(h.out_w.rows, h.out_w.cols),
                    out_b: vec![R::zero(); h.out_b.len()],
                })
                .collect(),
        }
    }

    /// Same canonical order as [`Model::param_slices`].
    pub fn param_slices(&self) -> Vec<&[R]> {
        let mut out = Vec::with_capacity(self.sections.len() * 3 + self.heads.len() * 4);
        for s in &self.sections {
            out.push(s.weight.data.as_slice());
            out.push(s.dir.as_slice());
            out.push(s.pool_dir.as_slice());
        }
        for h in &self.heads {
            out.push(h.proj_w.data.as_slice());
            out.push(h.proj_b.as_slice());
            out.push(h.out_w.data.as_slice());
            out.push(h.out_b.as_slice());
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [R]> {
        let mut out = Vec::with_capacity(self.sections.len() * 3 + self.heads.len() * 4);
        for s in &mut self.sections {
            out.push(s.weight.data.as_mut_slice());
            out.push(s.dir.as_mut_slice());
            out.push(s.pool_dir.as_mut_slice());
        }
        for h in &mut self.heads {
            out.push(h.proj_w.data.as_mut_slice());
            out.push(h.proj_b.as_mut_slice());
            out.push(h.out_w.data.as_mut_slice());
            out.push(h.out_b.as_mut_slice());
        }
        out
    }

    pub fn scale(&mut self, s: R) {
        for slice in self.param_slices_mut() {
            for v in slice {
                *v *= s;
            }
        }
    }

    /// self += s * other
    pub fn axpy(&mut self, s: R, other: &GradientSet<R>) {
        let mut mine = self.param_slices_mut();
        let theirs = other.param_slices();
        assert_eq!(mine.len(), theirs.len());
        for (m, t) in mine.iter_mut().zip(theirs) {
            assert_eq!(m.len(), t.len());
            for (a, b) in m.iter_mut().zip(t) {
                *a += s * *b;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.param_slices().into_iter().flatten().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> R {
        let mut m = R::zero();
        for s in self.param_slices() {
            for v in s {
                m = m.max(v.abs());
            }
        }
        m
    }
}

/// Gradient of the quadratic probe `‖θ‖²/2`: exactly the parameters.
pub fn weight_l2_gradients<R: Real>(model: &Model<R>) -> GradientSet<R> {
    let mut g = GradientSet::zeros_like(model);
    let mut dst = g.param_slices_mut();
    let src = model.param_slices();
    for (d, s) in dst.iter_mut().zip(src) {
        d.copy_from_slice(s);
    }
    drop(dst);
    g
}

/// Accumulates exact reverse-mode gradients of one traced forward pass into
/// `grads`, given upstream gradients w.r.t. every section's logits and
/// pre-logit features. Callers handle batch averaging by scaling upstream.
pub fn accumulate_gradients<R: Real>(
    model: &Model<R>,
    trace: &ForwardTrace<R>,
    upstream: &OutputGrads<R>,
    grads: &mut GradientSet<R>,
) {
    let depth = model.depth();
    assert_eq!(upstream.dlogits.len(), depth);
    assert_eq!(upstream.dfeats.len(), depth);
    // Gradient w.r.t. the current section's pooled output, fed back from the
    // section above (None for the top section).
    let mut d_from_above: Option<super::FeatureMap<R>> = None;

    for idx in (0..depth).rev() {
        let st = &trace.sections[idx];
        let ht = &trace.heads[idx];
        let head = &model.heads[idx];
        let sec = &model.sections[idx];
        let (c_out, n_pts) = (st.pooled.channels(), st.pooled.points());

        // Head adjoint: logits -> feat -> z -> reduce -> pooled map.
        let dlogit = &upstream.dlogits[idx];
        assert_eq!(dlogit.len(), model.classes);
        let mut dfeat = head.out_w.matvec_t(dlogit);
        for (df, ext) in dfeat.iter_mut().zip(&upstream.dfeats[idx]) {
            *df += *ext;
        }
        {
            let hg = &mut grads.heads[idx];
            for (i, &dl) in dlogit.iter().enumerate() {
                if dl != R::zero() {
                    for (h, &f) in ht.feat.iter().enumerate() {
                        let cur = hg.out_w.get(i, h);
                        hg.out_w.set(i, h, cur + dl * f);
                    }
                }
                hg.out_b[i] += dl;
            }
            for (h, &df) in dfeat.iter().enumerate() {
                if df != R::zero() {
                    for (c, &z) in ht.z.iter().enumerate() {
                        let cur = hg.proj_w.get(h, c);
                        hg.proj_w.set(h, c, cur + df * z);
                    }
                }
                hg.proj_b[h] += df;
            }
        }
        let dz = head.proj_w.matvec_t(&dfeat);

        // Mean over points, then the invariant readout's adjoint:
        //   d_pooled[c,p] = dy[c,p]·m[p] + (1/C)·Σ_j dy[j,p]·pooled[j,p]
        // with dy[c,p] = dz[c]/P and m[p] the channel mean.
        let inv_p = R::one() / R::from_f64(n_pts as f64);
        let inv_c = R::one() / R::from_f64(c_out as f64);
        let mut d_pooled = super::FeatureMap::zeros(c_out, n_pts);
        for p in 0..n_pts {
            let mut m = [R::zero(); 3];
            let mut s = [R::zero(); 3];
            for c in 0..c_out {
                let v = st.pooled.get(c, p);
                axpy3(&mut m, inv_c, &v);
                axpy3(&mut s, dz[c] * inv_p, &v);
            }
            for c in 0..c_out {
                let dy = dz[c] * inv_p;
                let mut g = [R::zero(); 3];
                axpy3(&mut g, dy, &m);
                axpy3(&mut g, inv_c, &s);
                d_pooled.set(c, p, g);
            }
        }
        if let Some(above) = d_from_above.take() {
            for c in 0..c_out {
                for p in 0..n_pts {
                    d_pooled.add(c, p, above.get(c, p));
                }
            }
        }

        // Pooling adjoint: route to the selected element; the pooling
        // direction weights get nothing through the selection.
        let mut d_u = super::FeatureMap::zeros(c_out, n_pts);
        match model.kind {
            TrunkKind::VectorNeuron => {
                for c in 0..c_out {
                    for p in 0..n_pts {
                        d_u.add(c, st.selected[c * n_pts + p], d_pooled.get(c, p));
                    }
                }
            }
            TrunkKind::ScalarBaseline => {
                for c in 0..c_out {
                    for p in 0..n_pts {
                        let g = d_pooled.get(c, p);
                        for d in 0..3 {
                            let sel = st.selected[(c * n_pts + p) * 3 + d];
                            let mut v = d_u.get(c, sel);
                            v[d] += g[d];
                            d_u.set(c, sel, v);
                        }
                    }
                }
            }
        }

        // Nonlinearity adjoint.
        let mut d_q = super::FeatureMap::zeros(c_out, n_pts);
        match model.kind {
            TrunkKind::VectorNeuron => {
                let eps = super::layers::dir_epsilon::<R>();
                for p in 0..n_pts {
                    let k = st.k[p];
                    let n2 = dot3(&k, &k);
                    let degenerate = n2.sqrt() < eps;
                    let mut dk: Vec3<R> = [R::zero(); 3];
                    for c in 0..c_out {
                        let g = d_u.get(c, p);
                        let q = st.q.get(c, p);
                        let u = dot3(&q, &k);
                        if degenerate || u >= R::zero() {
                            d_q.add(c, p, g);
                        } else {
                            let gk = dot3(&g, &k);
                            let mut dq = g;
                            axpy3(&mut dq, -(gk / n2), &k);
                            d_q.add(c, p, dq);
                            axpy3(&mut dk, -(gk / n2), &q);
                            axpy3(&mut dk, -(u / n2), &g);
                            axpy3(&mut dk, R::from_f64(2.0) * u * gk / (n2 * n2), &k);
                        }
                    }
                    if dk != [R::zero(); 3] {
                        let sg = &mut grads.sections[idx];
                        for c in 0..c_out {
                            let q = st.q.get(c, p);
                            d_q.add(c, p, [sec.dir[c] * dk[0], sec.dir[c] * dk[1], sec.dir[c] * dk[2]]);
                            sg.dir[c] += dot3(&q, &dk);
                        }
                    }
                }
            }
            TrunkKind::ScalarBaseline => {
                for c in 0..c_out {
                    for p in 0..n_pts {
                        let g = d_u.get(c, p);
                        let q = st.q.get(c, p);
                        let mut dq = [R::zero(); 3];
                        for d in 0..3 {
                            if q[d] > R::zero() {
                                dq[d] = g[d];
                            }
                        }
                        d_q.add(c, p, dq);
                    }
                }
            }
        }

        // Linear adjoint: dW[c,j] += Σ_p ⟨d_q[c,p], in[j,p]⟩ and, except at
        // the bottom, d_in[j,p] += Σ_c W[c,j]·d_q[c,p].
        let c_in = st.input.channels();
        {
            let sg = &mut grads.sections[idx];
            for c in 0..c_out {
                for j in 0..c_in {
                    let mut acc = R::zero();
                    for p in 0..n_pts {
                        acc += dot3(&d_q.get(c, p), &st.input.get(j, p));
                    }
                    let cur = sg.weight.get(c, j);
                    sg.weight.set(c, j, cur + acc);
                }
            }
        }
        if idx > 0 {
            let mut d_in = super::FeatureMap::zeros(c_in, n_pts);
            for c in 0..c_out {
                for j in 0..c_in {
                    let w = sec.weight.get(c, j);
                    if w == R::zero() {
                        continue;
                    }
                    for p in 0..n_pts {
                        let g = d_q.get(c, p);
                        d_in.add(j, p, [w * g[0], w * g[1], w * g[2]]);
                    }
                }
            }
            d_from_above = Some(d_in);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eqnet::{knn_neighborhoods, FinalPool, ModelCfg, ModelOutputs};
    use crate::seeding;
    use rand::Rng;

    fn tiny_cfg(kind: TrunkKind) -> ModelCfg {
        ModelCfg {
            widths: vec![2, 3],
            head_dim: 4,
            knn: 3,
            kind,
            final_pool: FinalPool::Global,
        }
    }

    fn random_points(n: usize, seed: u64) -> Vec<Vec3<f64>> {
        let mut rng = seeding::stream(seed, "pts", &[]);
        (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect()
    }

    /// Smooth probe of all outputs: L = Σ_δ (‖logits_δ‖² + ‖feat_δ‖²) / 2.
    fn probe_loss(out: &ModelOutputs<f64>) -> f64 {
        let mut l = 0.0;
        for v in out.logits.iter().chain(out.feats.iter()) {
            for &x in v {
                l += 0.5 * x * x;
            }
        }
        l
    }

    fn probe_upstream(out: &ModelOutputs<f64>) -> OutputGrads<f64> {
        OutputGrads { dlogits: out.logits.clone(), dfeats: out.feats.clone() }
    }

    #[test]
    fn quadratic_probe_gradient_equals_weights() {
        let model = Model::<f64>::init(&tiny_cfg(TrunkKind::VectorNeuron), 2, 5).unwrap();
        let g = weight_l2_gradients(&model);
        for (gs, ms) in g.param_slices().iter().zip(model.param_slices()) {
            assert_eq!(*gs, ms);
        }
    }

    #[test]
    fn pool_direction_weights_never_receive_gradient() {
        let model = Model::<f64>::init(&tiny_cfg(TrunkKind::VectorNeuron), 2, 6).unwrap();
        let pts = random_points(8, 1);
        let nbhd = knn_neighborhoods(&pts, model.knn);
        let (out, trace) = model.forward_traced(&pts, &nbhd).unwrap();
        let mut g = GradientSet::zeros_like(&model);
        accumulate_gradients(&model, &trace, &probe_upstream(&out), &mut g);
        for s in &g.sections {
            assert!(s.pool_dir.iter().all(|&x| x == 0.0));
        }
        assert!(g.is_finite());
    }

    #[test]
    fn all_positive_branches_leave_dir_gradient_zero() {
        // Single-channel sections with dir weight forced to 1: k = q, so
        // <q,k> = |q|^2 and the projection branch never fires.
        let mut model = Model::<f64>::init(
            &ModelCfg { widths: vec![1, 1], head_dim: 3, knn: 2, kind: TrunkKind::VectorNeuron, final_pool: FinalPool::Global },
            2,
            7,
        )
        .unwrap();
        for s in &mut model.sections {
            s.dir = vec![1.0];
        }
        let pts = random_points(6, 2);
        let nbhd = knn_neighborhoods(&pts, model.knn);
        let (out, trace) = model.forward_traced(&pts, &nbhd).unwrap();
        let mut g = GradientSet::zeros_like(&model);
        accumulate_gradients(&model, &trace, &probe_upstream(&out), &mut g);
        for s in &g.sections {
            assert!(s.dir.iter().all(|&x| x.abs() < 1e-10));
        }
    }

    /// Central finite differences over every parameter of a tiny model.
    fn fd_check(kind: TrunkKind, seed: u64) {
        let model = Model::<f64>::init(&tiny_cfg(kind), 2, seed).unwrap();
        let pts = random_points(7, seed + 100);
        let nbhd = knn_neighborhoods(&pts, model.knn);
        let (out, trace) = model.forward_traced(&pts, &nbhd).unwrap();
        let mut analytic = GradientSet::zeros_like(&model);
        accumulate_gradients(&model, &trace, &probe_upstream(&out), &mut analytic);

        let h = 1e-5;
        let n_tensors = model.param_slices().len();
        for t in 0..n_tensors {
            let len = model.param_slices()[t].len();
            for i in 0..len {
                let mut plus = model.clone();
                plus.param_slices_mut()[t][i] += h;
                let mut minus = model.clone();
                minus.param_slices_mut()[t][i] -= h;
                let lp = probe_loss(&plus.forward(&pts, &nbhd).unwrap());
                let lm = probe_loss(&minus.forward(&pts, &nbhd).unwrap());
                let fd = (lp - lm) / (2.0 * h);
                let an = analytic.param_slices()[t][i];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((an - fd) / denom).abs() < 1e-4,
                    "tensor {t} entry {i}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn finite_differences_agree_vector_neuron() {
        fd_check(TrunkKind::VectorNeuron, 11);
    }

    #[test]
    fn finite_differences_agree_scalar_baseline() {
        fd_check(TrunkKind::ScalarBaseline, 12);
    }

    #[test]
    fn axpy_and_scale_walk_all_parameters() {
        let model = Model::<f64>::init(&tiny_cfg(TrunkKind::VectorNeuron), 2, 9).unwrap();
        let mut a = weight_l2_gradients(&model);
        let b = weight_l2_gradients(&model);
        a.axpy(1.0, &b);
        a.scale(0.5);
        for (ga, gm) in a.param_slices().iter().zip(model.param_slices()) {
            for (x, y) in ga.iter().zip(gm) {
                assert!((x - y).abs() < 1e-15);
            }
        }
        assert!(a.max_abs() > 0.0);
    }
}

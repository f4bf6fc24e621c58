//! The equivariant feature extractor: vector-neuron layers arranged in D
//! sections with per-section invariant heads and a growing classifier,
//! plus the matching hand-written gradient engine.

mod backward;
mod layers;

pub use backward::{accumulate_gradients, weight_l2_gradients, GradientSet, OutputGrads};
pub use layers::{
    invariant_reduce, scalar_maxpool, scalar_maxpool_global, scalar_relu, vn_linear, vn_maxpool,
    vn_maxpool_global, vn_nonlinear, FeatureMap,
};

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{dist3_sq, Matrix, Vec3};
use crate::scalar::Real;

#[derive(Debug, thiserror::Error)]
pub enum EqnetError {
    #[error("bad model configuration: {0}")]
    BadConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("neighborhood of point {point} is empty")]
    EmptyNeighborhood { point: usize },
    #[error("neighborhood of point {point} references index {index} outside 0..{len}")]
    NeighborOutOfRange { point: usize, index: usize, len: usize },
    #[error("classifier can only grow: current {from}, requested {to}")]
    BadExpansion { from: usize, to: usize },
    #[error("checkpoint {path}: {source}")]
    CheckpointIo { path: String, source: std::io::Error },
    #[error("checkpoint decode failed: {0}")]
    CheckpointDecode(String),
}

/// Which trunk the model runs: the equivariant vector-neuron layers, or the
/// per-coordinate scalar baseline used by the equivariance ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrunkKind {
    VectorNeuron,
    ScalarBaseline,
}

/// Pooling scheme of the last section; earlier sections always pool over
/// k-nearest-neighbor sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinalPool {
    Global,
    Knn,
}

/// Parameters of one section: channel mixing, a direction predictor for the
/// nonlinearity, and a direction predictor for pooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionParams<R> {
    /// C_out × C_in channel weights.
    pub weight: Matrix<R>,
    /// Length C_out; predicts the nonlinearity direction from the mixed map.
    pub dir: Vec<R>,
    /// Length C_out; predicts the pooling direction.
    pub pool_dir: Vec<R>,
}

/// Per-section head: invariant readout is reduced to a channel vector, then
/// projected to the shared head dimension, then mapped to class logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head<R> {
    /// head_dim × C_out(section).
    pub proj_w: Matrix<R>,
    pub proj_b: Vec<R>,
    /// classes × head_dim.
    pub out_w: Matrix<R>,
    pub out_b: Vec<R>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelCfg {
    /// Output channel widths of the D sections.
    pub widths: Vec<usize>,
    /// Shared head dimension (the pre-logit feature length of every head).
    pub head_dim: usize,
    /// Neighborhood size for local pooling.
    pub knn: usize,
    pub kind: TrunkKind,
    pub final_pool: FinalPool,
}

impl Default for ModelCfg {
    fn default() -> Self {
        ModelCfg {
            widths: vec![16, 32, 64, 128],
            head_dim: 64,
            knn: 16,
            kind: TrunkKind::VectorNeuron,
            final_pool: FinalPool::Global,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Model<R: Real> {
    pub kind: TrunkKind,
    pub final_pool: FinalPool,
    pub knn: usize,
    pub head_dim: usize,
    /// Classifier width: classes seen so far.
    pub classes: usize,
    pub sections: Vec<SectionParams<R>>,
    pub heads: Vec<Head<R>>,
}

fn draw<R: Real>(rng: &mut ChaCha12Rng, scale: f64) -> R {
    R::from_f64(rng.random_range(-scale..scale))
}

/// Uniform ±√(3/fan_in): entry variance 1/fan_in, so the map preserves
/// expected squared norms. There is no normalization layer anywhere in the
/// trunk to absorb a scale deficit, and the plain ±1/√fan_in bound loses a
/// factor 3 in energy per layer, burying class signal in the pooled
/// invariants far below what the classifier heads can recover.
fn init_scale(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

fn init_matrix<R: Real>(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha12Rng) -> Matrix<R> {
    let s = init_scale(fan_in);
    let mut m = Matrix::zeros(rows, cols);
    for v in &mut m.data {
        *v = draw(rng, s);
    }
    m
}

fn init_row<R: Real>(len: usize, rng: &mut ChaCha12Rng) -> Vec<R> {
    let s = 1.0 / (len as f64).sqrt();
    (0..len).map(|_| draw(rng, s)).collect()
}

impl<R: Real> Model<R> {
    /// Fresh model with `classes` output logits; all weights drawn uniform
    /// in ±√(3/fan_in) from a stream derived from `seed`.
    pub fn init(cfg: &ModelCfg, classes: usize, seed: u64) -> Result<Model<R>, EqnetError> {
        if cfg.widths.is_empty() || cfg.widths.iter().any(|&w| w == 0) {
            return Err(EqnetError::BadConfig("section widths must be non-empty and positive".into()));
        }
        if cfg.head_dim == 0 || cfg.knn == 0 || classes == 0 {
            return Err(EqnetError::BadConfig("head_dim, knn, classes must be positive".into()));
        }
        let mut rng = crate::seeding::stream(seed, "model-init", &[]);
        let mut sections = Vec::with_capacity(cfg.widths.len());
        let mut c_in = 2usize; // lift channels
        for &c_out in &cfg.widths {
            sections.push(SectionParams {
                weight: init_matrix(c_out, c_in, c_in, &mut rng),
                dir: init_row(c_out, &mut rng),
                pool_dir: init_row(c_out, &mut rng),
            });
            c_in = c_out;
        }
        let heads = cfg
            .widths
            .iter()
            .map(|&c_out| Head {
                proj_w: init_matrix(cfg.head_dim, c_out, c_out, &mut rng),
                proj_b: vec![R::zero(); cfg.head_dim],
                out_w: init_matrix(classes, cfg.head_dim, cfg.head_dim, &mut rng),
                out_b: vec![R::zero(); classes],
            })
            .collect();
        Ok(Model {
            kind: cfg.kind,
            final_pool: cfg.final_pool,
            knn: cfg.knn,
            head_dim: cfg.head_dim,
            classes,
            sections,
            heads,
        })
    }

    pub fn depth(&self) -> usize {
        self.sections.len()
    }

    /// Structural soundness: width chaining, head shapes, finite entries.
    pub fn validate(&self) -> Result<(), EqnetError> {
        if self.sections.is_empty() || self.sections.len() != self.heads.len() {
            return Err(EqnetError::ShapeMismatch("need D sections and D heads, D >= 1".into()));
        }
        let mut c_in = 2usize; // lift channels
        for (i, s) in self.sections.iter().enumerate() {
            let c_out = s.weight.rows;
            if s.weight.cols != c_in || s.dir.len() != c_out || s.pool_dir.len() != c_out || c_out == 0 {
                return Err(EqnetError::ShapeMismatch(format!("section {i} widths inconsistent")));
            }
            let h = &self.heads[i];
            if h.proj_w.rows != self.head_dim
                || h.proj_w.cols != c_out
                || h.proj_b.len() != self.head_dim
                || h.out_w.rows != self.classes
                || h.out_w.cols != self.head_dim
                || h.out_b.len() != self.classes
            {
                return Err(EqnetError::ShapeMismatch(format!("head {i} shapes inconsistent")));
            }
            c_in = c_out;
        }
        let finite = self.param_slices().into_iter().flatten().all(|x| x.is_finite());
        if !finite {
            return Err(EqnetError::ShapeMismatch("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Canonical parameter walk; gradient tensors use the identical order.
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

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Widens every head's classifier to `new_t` logits. Existing rows and
    /// biases are copied bit-exactly; new rows are drawn uniform ±1/√head_dim
    /// from `rng`, new biases are zero. The trunk is untouched.
    pub fn expand_classifier(&self, new_t: usize, rng: &mut ChaCha12Rng) -> Result<Model<R>, EqnetError> {
        if new_t <= self.classes {
            return Err(EqnetError::BadExpansion { from: self.classes, to: new_t });
        }
        let mut out = self.clone();
        out.classes = new_t;
        for h in &mut out.heads {
            let mut w = Matrix::zeros(new_t, self.head_dim);
            w.data[..h.out_w.data.len()].copy_from_slice(&h.out_w.data);
            let s = init_scale(self.head_dim);
            for v in &mut w.data[h.out_w.data.len()..] {
                *v = draw(rng, s);
            }
            h.out_w = w;
            h.out_b.resize(new_t, R::zero());
        }
        Ok(out)
    }
}

/// Per-section outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputs<R> {
    /// D × classes section logits; the last row is the final classifier.
    pub logits: Vec<Vec<R>>,
    /// D × head_dim pre-logit invariant features (the distillation targets).
    pub feats: Vec<Vec<R>>,
}

impl<R: Real> ModelOutputs<R> {
    pub fn final_logits(&self) -> &[R] {
        self.logits.last().expect("at least one section")
    }

    pub fn final_feat(&self) -> &[R] {
        self.feats.last().expect("at least one section")
    }

    pub fn is_finite(&self) -> bool {
        self.logits.iter().chain(self.feats.iter()).flatten().all(|x| x.is_finite())
    }
}

/// Everything the gradient engine needs to replay one forward pass.
pub struct ForwardTrace<R> {
    pub(crate) sections: Vec<SectionTrace<R>>,
    pub(crate) heads: Vec<HeadTrace<R>>,
}

pub(crate) struct SectionTrace<R> {
    pub input: FeatureMap<R>,
    pub q: FeatureMap<R>,
    /// Per-point nonlinearity directions (vector-neuron trunk only).
    pub k: Vec<Vec3<R>>,
    /// Argmax index per (c, p) — or per (c, p, coord) for the scalar trunk.
    pub selected: Vec<usize>,
    pub pooled: FeatureMap<R>,
}

pub(crate) struct HeadTrace<R> {
    /// Point-averaged invariant channel vector.
    pub z: Vec<R>,
    /// Pre-logit feature (= ModelOutputs.feats entry).
    pub feat: Vec<R>,
}

impl<R: Real> ForwardTrace<R> {
    /// Section output maps F_1..F_D (kept accessible for inspection tests).
    pub fn pooled_map(&self, section: usize) -> &FeatureMap<R> {
        &self.sections[section].pooled
    }
}

/// Ascending-index k-nearest-neighbor sets (self included) under squared
/// euclidean distance of the given coordinates; ties broken by index.
/// Rotation-compatible: distances are rotation-invariant.
pub fn knn_neighborhoods<R: Real>(points: &[Vec3<R>], k: usize) -> Vec<Vec<usize>> {
    let n = points.len();
    let k = k.max(1).min(n);
    let mut out = Vec::with_capacity(n);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n);
    for p in 0..n {
        scratch.clear();
        for (i, x) in points.iter().enumerate() {
            scratch.push((dist3_sq(&points[p], x).as_f64(), i));
        }
        scratch.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut nb: Vec<usize> = scratch[..k].iter().map(|&(_, i)| i).collect();
        nb.sort_unstable();
        out.push(nb);
    }
    out
}

fn check_neighborhoods(n_points: usize, nbhd: &[Vec<usize>]) -> Result<(), EqnetError> {
    if nbhd.len() != n_points {
        return Err(EqnetError::ShapeMismatch(format!(
            "{} neighborhoods for {} points",
            nbhd.len(),
            n_points
        )));
    }
    for (p, set) in nbhd.iter().enumerate() {
        if set.is_empty() {
            return Err(EqnetError::EmptyNeighborhood { point: p });
        }
        for &i in set {
            if i >= n_points {
                return Err(EqnetError::NeighborOutOfRange { point: p, index: i, len: n_points });
            }
        }
    }
    Ok(())
}

impl<R: Real> Model<R> {
    /// Forward pass over a (normalized) cloud with precomputed neighborhoods,
    /// keeping the intermediate state the gradient engine replays.
    pub fn forward_traced(
        &self,
        points: &[Vec3<R>],
        nbhd: &[Vec<usize>],
    ) -> Result<(ModelOutputs<R>, ForwardTrace<R>), EqnetError> {
        if points.is_empty() {
            return Err(EqnetError::ShapeMismatch("empty point cloud".into()));
        }
        check_neighborhoods(points.len(), nbhd)?;
        let depth = self.depth();
        let mut sections = Vec::with_capacity(depth);
        let mut heads = Vec::with_capacity(depth);
        let mut logits = Vec::with_capacity(depth);
        let mut feats = Vec::with_capacity(depth);
        let mut x = FeatureMap::lift(points, nbhd);
        for (idx, sec) in self.sections.iter().enumerate() {
            let input = x;
            let q = vn_linear(&sec.weight, &input);
            let (u, k) = match self.kind {
                TrunkKind::VectorNeuron => vn_nonlinear(&sec.dir, &q),
                TrunkKind::ScalarBaseline => (scalar_relu(&q), Vec::new()),
            };
            let last = idx + 1 == depth;
            let global = last && self.final_pool == FinalPool::Global;
            let (pooled, selected) = match (self.kind, global) {
                (TrunkKind::VectorNeuron, false) => vn_maxpool(&sec.pool_dir, &u, nbhd),
                (TrunkKind::VectorNeuron, true) => vn_maxpool_global(&sec.pool_dir, &u),
                (TrunkKind::ScalarBaseline, false) => scalar_maxpool(&u, nbhd),
                (TrunkKind::ScalarBaseline, true) => scalar_maxpool_global(&u),
            };
            let head = &self.heads[idx];
            let y = invariant_reduce(&pooled);
            let inv_p = R::one() / R::from_f64(y.cols as f64);
            let mut z = vec![R::zero(); y.rows];
            for c in 0..y.rows {
                let mut acc = R::zero();
                for p in 0..y.cols {
                    acc += y.get(c, p);
                }
                z[c] = acc * inv_p;
            }
            let mut feat = head.proj_w.matvec(&z);
            for (f, b) in feat.iter_mut().zip(&head.proj_b) {
                *f += *b;
            }
            let mut lg = head.out_w.matvec(&feat);
            for (l, b) in lg.iter_mut().zip(&head.out_b) {
                *l += *b;
            }
            logits.push(lg);
            feats.push(feat.clone());
            heads.push(HeadTrace { z, feat });
            x = pooled.clone();
            sections.push(SectionTrace { input, q, k, selected, pooled });
        }
        Ok((ModelOutputs { logits, feats }, ForwardTrace { sections, heads }))
    }

    /// Forward pass without keeping the trace.
    pub fn forward(
        &self,
        points: &[Vec3<R>],
        nbhd: &[Vec<usize>],
    ) -> Result<ModelOutputs<R>, EqnetError> {
        self.forward_traced(points, nbhd).map(|(out, _)| out)
    }

    /// Convenience: computes neighborhoods from the cloud itself.
    pub fn forward_cloud(
        &self,
        cloud: &crate::geometry::PointCloud<R>,
    ) -> Result<ModelOutputs<R>, EqnetError> {
        let nbhd = knn_neighborhoods(&cloud.points, self.knn);
        self.forward(&cloud.points, &nbhd)
    }
}

/// Writes a JSON checkpoint (atomic). Doubles round-trip bit-exactly.
pub fn save_checkpoint<R: Real>(path: &Path, model: &Model<R>) -> Result<(), EqnetError> {
    let body = serde_json::to_vec(model).map_err(|e| EqnetError::CheckpointDecode(e.to_string()))?;
    crate::fsutil::write_atomic(path, &body)
        .map_err(|e| EqnetError::CheckpointIo { path: path.display().to_string(), source: e })
}

pub fn load_checkpoint<R: Real>(path: &Path) -> Result<Model<R>, EqnetError> {
    let body = std::fs::read(path)
        .map_err(|e| EqnetError::CheckpointIo { path: path.display().to_string(), source: e })?;
    let model: Model<R> =
        serde_json::from_slice(&body).map_err(|e| EqnetError::CheckpointDecode(e.to_string()))?;
    model.validate()?;
    Ok(model)
}

//! Self-contained property suites: equivariance and invariance of the
//! network, finite-difference validation of the full objective's gradients,
//! and independent straight-line oracles for the losses, exemplar selection,
//! and metrics. Every suite is deterministic under its seed and reports the
//! worst observed residual against its threshold.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::eqnet::{
    accumulate_gradients, knn_neighborhoods, vn_linear, vn_maxpool, vn_nonlinear, FeatureMap,
    GradientSet, Model, ModelCfg, ModelOutputs,
};
use crate::geometry::{random_rotation, PointCloud, Rotation};
use crate::linalg::{Matrix, Vec3};
use crate::losses::{
    exemplar_loss_grads, exemplar_loss_outputs, task_loss_grads, task_loss_outputs,
    LossHyperparams,
};
use crate::protocol::avg_accuracy;
use crate::rehearsal::{quota, rank_exemplars, ExemplarStore};
use crate::scalar::Real;
use crate::seeding::stream;

/// Outcome of one property check.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    pub passed: bool,
    /// Worst residual observed (meaning depends on the property).
    pub worst: f64,
    pub threshold: f64,
    pub trials: usize,
    pub detail: String,
}

impl SuiteReport {
    fn new(name: &str, worst: f64, threshold: f64, trials: usize, detail: String) -> Self {
        SuiteReport {
            name: name.to_string(),
            passed: worst < threshold,
            worst,
            threshold,
            trials,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<28} worst {:.3e} (threshold {:.0e}, {} trials){}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.threshold,
            self.trials,
            if self.detail.is_empty() { String::new() } else { format!(" — {}", self.detail) }
        )
    }
}

/// Test hook: corrupt one named layer's output so the equivariance suite
/// demonstrably catches breakage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Corruption {
    #[default]
    None,
    VnLinear,
    VnNonlinear,
    VnMaxpool,
    Trunk,
}

impl Corruption {
    pub fn parse(name: &str) -> Option<Corruption> {
        match name {
            "vn-linear" => Some(Corruption::VnLinear),
            "vn-nonlinear" => Some(Corruption::VnNonlinear),
            "vn-maxpool" => Some(Corruption::VnMaxpool),
            "trunk" => Some(Corruption::Trunk),
            _ => None,
        }
    }
}

fn corrupt_map<R: Real>(map: &mut FeatureMap<R>) {
    // Additive x-offset on the first vector: not equivariant.
    let v = map.get(0, 0);
    map.set(0, 0, [v[0] + R::from_f64(1e-3), v[1], v[2]]);
}

fn random_map(rng: &mut ChaCha12Rng, channels: usize, points: usize) -> FeatureMap<f64> {
    let mut m = FeatureMap::zeros(channels, points);
    for c in 0..channels {
        for p in 0..points {
            m.set(c, p, [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]);
        }
    }
    m
}

fn random_matrix(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Matrix<f64> {
    let mut w = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            w.set(r, c, rng.random_range(-1.0..1.0));
        }
    }
    w
}

fn random_dir(rng: &mut ChaCha12Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn frob(map: &FeatureMap<f64>) -> f64 {
    let mut s = 0.0;
    for c in 0..map.channels() {
        for p in 0..map.points() {
            let v = map.get(c, p);
            s += v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        }
    }
    s.sqrt()
}

fn rel_residual(direct: &FeatureMap<f64>, reference: &FeatureMap<f64>) -> f64 {
    let mut diff = 0.0;
    for c in 0..direct.channels() {
        for p in 0..direct.points() {
            let a = direct.get(c, p);
            let b = reference.get(c, p);
            let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
            diff += d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        }
    }
    diff.sqrt() / (frob(reference) + 1e-12)
}

fn random_neighborhoods(rng: &mut ChaCha12Rng, points: usize, k: usize) -> Vec<Vec<usize>> {
    (0..points)
        .map(|p| {
            let mut set = vec![p];
            while set.len() < k {
                let cand = rng.random_range(0..points);
                if !set.contains(&cand) {
                    set.push(cand);
                }
            }
            set.sort_unstable();
            set
        })
        .collect()
}

/// Equivariance of each vector-neuron layer and the composed trunk:
/// ‖f(R·V) − R·f(V)‖ / (‖f(V)‖ + 1e-12) over random (weights, input,
/// rotation) triples, threshold 1e-8.
pub fn equivariance_suite(trials: usize, seed: u64, corrupt: Corruption) -> Vec<SuiteReport> {
    let threshold = 1e-8;
    let mut rng = stream(seed, "verify-equivariance", &[]);
    let points = 20;

    let mut worst_linear = 0.0f64;
    let mut worst_nonlinear = 0.0f64;
    let mut worst_pool = 0.0f64;
    for _ in 0..trials {
        // Two or more channels on each side. With one input channel every
        // channel of W·V is parallel per point, and with one output channel
        // the learned direction is parallel to the sole channel; either way
        // the nonlinearity can annihilate the whole map, collapsing the
        // residual's denominator to rounding dust.
        let c_in = rng.random_range(2usize..5);
        let c_out = rng.random_range(2usize..6);
        let v = random_map(&mut rng, c_in, points);
        let rot: Rotation<f64> = random_rotation(&mut rng);
        let v_rot = v.rotated(&rot);

        let w = random_matrix(&mut rng, c_out, c_in);
        let mut direct = vn_linear(&w, &v_rot);
        if corrupt == Corruption::VnLinear {
            corrupt_map(&mut direct);
        }
        let reference = vn_linear(&w, &v).rotated(&rot);
        worst_linear = worst_linear.max(rel_residual(&direct, &reference));

        let q = vn_linear(&w, &v);
        let q_rot = q.rotated(&rot);
        let dir = random_dir(&mut rng, c_out);
        let (mut direct, _) = vn_nonlinear(&dir, &q_rot);
        if corrupt == Corruption::VnNonlinear {
            corrupt_map(&mut direct);
        }
        let (base, _) = vn_nonlinear(&dir, &q);
        worst_nonlinear = worst_nonlinear.max(rel_residual(&direct, &base.rotated(&rot)));

        let nbhd = random_neighborhoods(&mut rng, points, 4);
        let pool_dir = random_dir(&mut rng, c_out);
        let (mut direct, _) = vn_maxpool(&pool_dir, &q_rot, &nbhd);
        if corrupt == Corruption::VnMaxpool {
            corrupt_map(&mut direct);
        }
        let (base, _) = vn_maxpool(&pool_dir, &q, &nbhd);
        worst_pool = worst_pool.max(rel_residual(&direct, &base.rotated(&rot)));
    }

    // Composed four-section trunk through the real model, same graph both ways.
    let cfg = ModelCfg { widths: vec![4, 8, 8, 8], head_dim: 8, knn: 6, ..Default::default() };
    let mut worst_trunk = 0.0f64;
    for t in 0..trials {
        let model: Model<f64> = Model::init(&cfg, 3, crate::seeding::derive(seed, "trunk", &[t as u64])).unwrap();
        let pts: Vec<Vec3<f64>> = (0..points)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let rot: Rotation<f64> = random_rotation(&mut rng);
        let pts_rot: Vec<Vec3<f64>> = pts.iter().map(|p| rot.apply(p)).collect();
        let nbhd = knn_neighborhoods(&pts, cfg.knn);
        let (_, trace) = model.forward_traced(&pts, &nbhd).unwrap();
        let (_, trace_rot) = model.forward_traced(&pts_rot, &nbhd).unwrap();
        let last = cfg.widths.len() - 1;
        let mut direct = trace_rot.pooled_map(last).clone();
        if corrupt == Corruption::Trunk {
            corrupt_map(&mut direct);
        }
        let reference = trace.pooled_map(last).rotated(&rot);
        worst_trunk = worst_trunk.max(rel_residual(&direct, &reference));
    }

    vec![
        SuiteReport::new("equivariance/vn-linear", worst_linear, threshold, trials, String::new()),
        SuiteReport::new("equivariance/vn-nonlinear", worst_nonlinear, threshold, trials, String::new()),
        SuiteReport::new("equivariance/vn-maxpool", worst_pool, threshold, trials, String::new()),
        SuiteReport::new("equivariance/trunk", worst_trunk, threshold, trials, String::new()),
    ]
}

/// Head invariance: per-section logits move < 1e-8 under input rotation, and
/// the predicted class never changes when the logit margin exceeds 1e-6.
pub fn invariance_suite(trials: usize, seed: u64) -> Vec<SuiteReport> {
    let mut rng = stream(seed, "verify-invariance", &[]);
    let cfg = ModelCfg { widths: vec![4, 8], head_dim: 8, knn: 5, ..Default::default() };
    let points = 16;
    let mut worst_logit = 0.0f64;
    let mut argmax_flips = 0usize;
    let mut margin_skips = 0usize;
    for t in 0..trials {
        let model: Model<f64> =
            Model::init(&cfg, 4, crate::seeding::derive(seed, "inv-model", &[t as u64])).unwrap();
        let pts: Vec<Vec3<f64>> = (0..points)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let rot: Rotation<f64> = random_rotation(&mut rng);
        let pts_rot: Vec<Vec3<f64>> = pts.iter().map(|p| rot.apply(p)).collect();
        let base = model.forward(&pts, &knn_neighborhoods(&pts, cfg.knn)).unwrap();
        let turned = model.forward(&pts_rot, &knn_neighborhoods(&pts_rot, cfg.knn)).unwrap();
        for (a, b) in base.logits.iter().zip(&turned.logits) {
            for (x, y) in a.iter().zip(b) {
                worst_logit = worst_logit.max((x - y).abs());
            }
        }
        let fl = base.final_logits();
        let mut sorted = fl.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        if sorted[0] - sorted[1] <= 1e-6 {
            margin_skips += 1;
            continue;
        }
        let am = |xs: &[f64]| {
            xs.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap()
        };
        if am(fl) != am(turned.final_logits()) {
            argmax_flips += 1;
        }
    }
    vec![
        SuiteReport::new("invariance/section-logits", worst_logit, 1e-8, trials, String::new()),
        SuiteReport::new(
            "invariance/argmax",
            argmax_flips as f64,
            0.5,
            trials,
            format!("{margin_skips} low-margin trials excluded"),
        ),
    ]
}

/// Finite-difference validation of the full objective (new-task sources plus
/// exemplar terms) on a second-task toy problem: teacher of 2 classes,
/// student expanded to 4, rehearsal batch from the old classes.
pub fn gradient_suite(seed: u64) -> SuiteReport {
    let cfg = ModelCfg { widths: vec![2, 3], head_dim: 4, knn: 3, ..Default::default() };
    let hp = LossHyperparams::default();
    let teacher: Model<f64> = Model::init(&cfg, 2, crate::seeding::derive(seed, "fd-teacher", &[])).unwrap();
    let mut rng = stream(seed, "fd-expand", &[]);
    let model = teacher.expand_classifier(4, &mut rng).unwrap();

    let mut cloud_rng = stream(seed, "fd-clouds", &[]);
    let mut cloud = |label: usize| {
        let pts: Vec<Vec3<f64>> = (0..8)
            .map(|_| {
                [
                    cloud_rng.random_range(-1.0..1.0),
                    cloud_rng.random_range(-1.0..1.0),
                    cloud_rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        PointCloud::new(pts, label)
    };
    let new_batch = vec![cloud(2), cloud(3)];
    let new_labels = vec![2usize, 3usize];
    let ex_batch = vec![cloud(0), cloud(1)];
    let ex_labels = vec![0usize, 1usize];

    let objective = |m: &Model<f64>| -> f64 {
        let outs: Vec<ModelOutputs<f64>> =
            new_batch.iter().map(|c| m.forward_cloud(c).unwrap()).collect();
        let touts: Vec<ModelOutputs<f64>> =
            new_batch.iter().map(|c| teacher.forward_cloud(c).unwrap()).collect();
        let bd = task_loss_outputs(&outs, Some(&touts), &new_labels, &hp).unwrap();
        let ex_outs: Vec<ModelOutputs<f64>> =
            ex_batch.iter().map(|c| m.forward_cloud(c).unwrap()).collect();
        let ex_touts: Vec<ModelOutputs<f64>> =
            ex_batch.iter().map(|c| teacher.forward_cloud(c).unwrap()).collect();
        let (ce, kl) = exemplar_loss_outputs(&ex_outs, Some(&ex_touts), &ex_labels, &hp).unwrap();
        bd.total + ce + kl
    };

    let mut grads = GradientSet::zeros_like(&model);
    {
        let mut run = |batch: &[PointCloud<f64>], labels: &[usize], exemplar: bool| {
            let mut outs = Vec::new();
            let mut traces = Vec::new();
            for c in batch {
                let nbhd = knn_neighborhoods(&c.points, model.knn);
                let (o, tr) = model.forward_traced(&c.points, &nbhd).unwrap();
                outs.push(o);
                traces.push(tr);
            }
            let touts: Vec<ModelOutputs<f64>> =
                batch.iter().map(|c| teacher.forward_cloud(c).unwrap()).collect();
            let ups = if exemplar {
                exemplar_loss_grads(&outs, Some(&touts), labels, &hp).unwrap().1
            } else {
                task_loss_grads(&outs, Some(&touts), labels, &hp).unwrap().1
            };
            for (tr, up) in traces.iter().zip(&ups) {
                accumulate_gradients(&model, tr, up, &mut grads);
            }
        };
        run(&new_batch, &new_labels, false);
        run(&ex_batch, &ex_labels, true);
    }

    let flat: Vec<f64> = grads.param_slices().into_iter().flatten().copied().collect();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let n = model.num_params();
    for idx in 0..n {
        let mut plus = model.clone();
        let mut minus = model.clone();
        nudge(&mut plus, idx, h);
        nudge(&mut minus, idx, -h);
        let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
        let an = flat[idx];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    SuiteReport::new("gradients/full-objective", worst, 1e-4, n, String::new())
}

fn nudge(model: &mut Model<f64>, idx: usize, h: f64) {
    let mut i = idx;
    for s in model.param_slices_mut() {
        if i < s.len() {
            s[i] += h;
            return;
        }
        i -= s.len();
    }
    panic!("parameter index {idx} out of range");
}

// Straight-line re-implementations of the objective, written directly from
// the formulas with no shared helpers (plain exp, no max subtraction).

fn oracle_softmax(z: &[f64], t: f64) -> Vec<f64> {
    let e: Vec<f64> = z.iter().map(|x| (x / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn oracle_ce(p: &[f64], label: usize) -> f64 {
    -(p[label] + 1e-12).ln()
}

fn oracle_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * ((a + 1e-12) / (b + 1e-12)).ln()).sum()
}

#[allow(clippy::too_many_arguments)]
fn oracle_task_loss(
    student: &[ModelOutputs<f64>],
    teacher: Option<&[ModelOutputs<f64>]>,
    labels: &[usize],
    gamma: f64,
    lambda: f64,
    kappa: f64,
    temp: f64,
) -> f64 {
    let depth = student[0].logits.len();
    let b = student.len() as f64;
    let mut total = 0.0;
    for delta in 0..depth {
        let mut l1 = 0.0;
        let mut l2 = 0.0;
        let mut l3 = 0.0;
        let mut l4 = 0.0;
        for (i, out) in student.iter().enumerate() {
            let z = &out.logits[delta];
            l1 += oracle_ce(&oracle_softmax(z, 1.0), labels[i]);
            if let Some(tch) = teacher {
                let tz = &tch[i].logits[delta];
                l2 += oracle_kl(&oracle_softmax(&z[..tz.len()], temp), &oracle_softmax(tz, temp));
            }
            if delta + 1 < depth {
                let fz = &out.logits[depth - 1];
                l3 += oracle_kl(&oracle_softmax(z, temp), &oracle_softmax(fz, temp));
                let (fa, fb) = (&out.feats[delta], &out.feats[depth - 1]);
                l4 += fa.iter().zip(fb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            }
        }
        total += (1.0 - gamma) * l1 / b + lambda * l2 / b + gamma * l3 / b + kappa * l4 / b;
    }
    total
}

fn oracle_exemplar_loss(
    student: &[ModelOutputs<f64>],
    teacher: &[ModelOutputs<f64>],
    labels: &[usize],
    lambda: f64,
    temp: f64,
) -> f64 {
    let b = student.len() as f64;
    let mut acc = 0.0;
    for (i, out) in student.iter().enumerate() {
        let z = out.final_logits();
        let tz = teacher[i].final_logits();
        acc += oracle_ce(&oracle_softmax(z, 1.0), labels[i]);
        acc += lambda * oracle_kl(&oracle_softmax(&z[..tz.len()], temp), &oracle_softmax(tz, temp));
    }
    acc / b
}

fn random_outputs(
    rng: &mut ChaCha12Rng,
    batch: usize,
    depth: usize,
    classes: usize,
    head_dim: usize,
) -> Vec<ModelOutputs<f64>> {
    (0..batch)
        .map(|_| ModelOutputs {
            logits: (0..depth)
                .map(|_| (0..classes).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect(),
            feats: (0..depth)
                .map(|_| (0..head_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
        })
        .collect()
}

/// task_loss and exemplar_loss against the straight-line oracle on random
/// fixtures, threshold 1e-9.
pub fn loss_oracle_suite(fixtures: usize, seed: u64) -> Vec<SuiteReport> {
    let mut rng = stream(seed, "verify-loss-oracle", &[]);
    let mut worst_task = 0.0f64;
    let mut worst_ex = 0.0f64;
    for _ in 0..fixtures {
        let depth = rng.random_range(2usize..5);
        let t_classes = rng.random_range(2usize..5);
        let growth = rng.random_range(0usize..3);
        let classes = t_classes + growth;
        let head_dim = rng.random_range(2usize..6);
        let batch = rng.random_range(1usize..6);
        let hp = LossHyperparams {
            self_distill_weight: rng.random_range(0.0..0.9),
            teacher_kl_weight: rng.random_range(0.0..2.0),
            feature_l2_weight: rng.random_range(0.0..0.5),
            temperature: rng.random_range(0.5..4.0),
            teacher_first_kl: false,
        };
        let student = random_outputs(&mut rng, batch, depth, classes, head_dim);
        let teacher = random_outputs(&mut rng, batch, depth, t_classes, head_dim);
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();

        let got = task_loss_outputs(&student, Some(&teacher), &labels, &hp).unwrap().total;
        let want = oracle_task_loss(
            &student,
            Some(&teacher),
            &labels,
            hp.self_distill_weight,
            hp.teacher_kl_weight,
            hp.feature_l2_weight,
            hp.temperature,
        );
        worst_task = worst_task.max((got - want).abs());

        let ex_labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..t_classes)).collect();
        let (ce, kl) = exemplar_loss_outputs(&student, Some(&teacher), &ex_labels, &hp).unwrap();
        let want_ex = oracle_exemplar_loss(
            &student,
            &teacher,
            &ex_labels,
            hp.teacher_kl_weight,
            hp.temperature,
        );
        worst_ex = worst_ex.max((ce + kl - want_ex).abs());
    }
    vec![
        SuiteReport::new("loss-oracle/task", worst_task, 1e-9, fixtures, String::new()),
        SuiteReport::new("loss-oracle/exemplar", worst_ex, 1e-9, fixtures, String::new()),
    ]
}

/// Exemplar machinery against brute force: selection order on random
/// instances, quota worked examples, and budget safety under growth.
pub fn exemplar_oracle_suite(instances: usize, seed: u64) -> Vec<SuiteReport> {
    let mut rng = stream(seed, "verify-exemplar", &[]);
    let mut mismatches = 0usize;
    for _ in 0..instances {
        let n = rng.random_range(1usize..=100);
        let dim = rng.random_range(1usize..=6);
        let feats: Vec<Vec<f64>> =
            (0..n).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let r = rng.random_range(1usize..=n + 3);
        // Brute force: full sort over all candidates.
        let dim_mean: Vec<f64> = (0..dim)
            .map(|d| feats.iter().map(|f| f[d]).sum::<f64>() / n as f64)
            .collect();
        let mut scored: Vec<(usize, f64)> = feats
            .iter()
            .enumerate()
            .map(|(i, f)| {
                (i, f.iter().zip(&dim_mean).map(|(x, c)| (x - c) * (x - c)).sum::<f64>())
            })
            .collect();
        scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        scored.truncate(r);
        let got = rank_exemplars(&feats, r).unwrap();
        if got.iter().map(|&(i, _)| i).ne(scored.iter().map(|&(i, _)| i)) {
            mismatches += 1;
        }
    }

    let quota_ok = quota(500, 40).unwrap() == 12 && quota(400, 15).unwrap() == 26;

    // Budget stress: growing class count, random pools, shrinking quota.
    let mut over_budget = 0usize;
    let budget = 37;
    let mut store: ExemplarStore<f64> = ExemplarStore::new(budget);
    let mut seen = 0usize;
    for task in 0..6usize {
        let mut new = std::collections::BTreeMap::new();
        for j in 0..2usize {
            let class = task * 2 + j;
            let n = rng.random_range(1usize..15);
            let pool: Vec<PointCloud<f64>> = (0..n)
                .map(|i| {
                    PointCloud::new(
                        vec![[class as f64, i as f64, rng.random_range(-1.0..1.0)]; 3],
                        class,
                    )
                })
                .collect();
            new.insert(class, pool);
        }
        seen += 2;
        store
            .update(&new, seen, |c: &PointCloud<f64>| {
                Ok::<_, std::convert::Infallible>(c.centroid().to_vec())
            })
            .unwrap();
        if store.total_len() > budget {
            over_budget += 1;
        }
    }

    vec![
        SuiteReport::new("exemplar-oracle/selection", mismatches as f64, 0.5, instances, String::new()),
        SuiteReport::new(
            "exemplar-oracle/quota",
            if quota_ok { 0.0 } else { 1.0 },
            0.5,
            2,
            "500/40→12, 400/15→26".into(),
        ),
        SuiteReport::new("exemplar-oracle/budget", over_budget as f64, 0.5, 6, String::new()),
    ]
}

/// The published per-step accuracies must average to 82.19 (rounding to 82).
pub fn metric_suite() -> SuiteReport {
    let row = [99.6, 92.8, 88.5, 87.3, 85.3, 81.9, 78.7, 74.8, 71.8, 61.2];
    let avg = avg_accuracy(&row).unwrap();
    let err = (avg - 82.19).abs().max(if format!("{avg:.0}") == "82" { 0.0 } else { 1.0 });
    SuiteReport::new("metrics/avg-accuracy", err, 1e-9, 1, format!("mean {avg:.4}"))
}

/// Everything `verify` runs by default, in print order.
pub fn full_suite(trials: usize, seed: u64, corrupt: Corruption) -> Vec<SuiteReport> {
    let mut out = equivariance_suite(trials, seed, corrupt);
    out.extend(invariance_suite(trials.max(100), seed));
    out.push(gradient_suite(seed));
    out.extend(loss_oracle_suite(20.max(trials / 5), seed));
    out.extend(exemplar_oracle_suite(200.max(trials), seed));
    out.push(metric_suite());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_trunk() {
        use crate::eqnet::{knn_neighborhoods, Model, ModelCfg};
        use crate::geometry::{random_rotation, Rotation};
        use crate::linalg::Vec3;
        use crate::seeding::stream;
        use rand::Rng;
        let seed = 3u64;
        let trials = 25;
        let mut rng = stream(seed, "verify-equivariance", &[]);
        let points = 20;
        // burn the per-layer draws
        for _ in 0..trials {
            let c_in = rng.random_range(2usize..5);
            let c_out = rng.random_range(2usize..6);
            let _v = super::random_map(&mut rng, c_in, points);
            let _rot: Rotation<f64> = random_rotation(&mut rng);
            let _w = super::random_matrix(&mut rng, c_out, c_in);
            let _d = super::random_dir(&mut rng, c_out);
            let _n = super::random_neighborhoods(&mut rng, points, 4);
            let _pd = super::random_dir(&mut rng, c_out);
        }
        let cfg = ModelCfg { widths: vec![4, 8, 8, 8], head_dim: 8, knn: 6, ..Default::default() };
        for t in 0..trials {
            let model: Model<f64> = Model::init(&cfg, 3, crate::seeding::derive(seed, "trunk", &[t as u64])).unwrap();
            let pts: Vec<Vec3<f64>> = (0..points)
                .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect();
            let rot: Rotation<f64> = random_rotation(&mut rng);
            let pts_rot: Vec<Vec3<f64>> = pts.iter().map(|p| rot.apply(p)).collect();
            let nbhd = knn_neighborhoods(&pts, cfg.knn);
            let (_, trace) = model.forward_traced(&pts, &nbhd).unwrap();
            let (_, trace_rot) = model.forward_traced(&pts_rot, &nbhd).unwrap();
            let last = cfg.widths.len() - 1;
            let direct = trace_rot.pooled_map(last).clone();
            let reference = trace.pooled_map(last).rotated(&rot);
            let res = super::rel_residual(&direct, &reference);
            if res > 1e-10 {
                let mut num = 0.0f64;
                let mut worst = (0usize, 0usize, 0.0f64);
                for c in 0..direct.channels() {
                    for p in 0..direct.points() {
                        let a = direct.get(c, p);
                        let b = reference.get(c, p);
                        let d2 = (a[0]-b[0]).powi(2)+(a[1]-b[1]).powi(2)+(a[2]-b[2]).powi(2);
                        num += d2;
                        if d2.sqrt() > worst.2 { worst = (c, p, d2.sqrt()); }
                    }
                }
                println!("trial {t} res={res:.3e} num={:.3e} den={:.3e} worst c={} p={} diff={:.3e}",
                    num.sqrt(), super::frob(&reference), worst.0, worst.1, worst.2);
                // how many entries differ materially
                let mut big = 0;
                for c in 0..direct.channels() {
                    for p in 0..direct.points() {
                        let a = direct.get(c, p);
                        let b = reference.get(c, p);
                        let d2 = (a[0]-b[0]).powi(2)+(a[1]-b[1]).powi(2)+(a[2]-b[2]).powi(2);
                        if d2.sqrt() > 1e-12 { big += 1; }
                    }
                }
                println!("  entries over 1e-12: {big} / {}", direct.channels()*direct.points());
                // check earlier sections
                for s in 0..cfg.widths.len() {
                    let d = trace_rot.pooled_map(s);
                    let r = trace.pooled_map(s).rotated(&rot);
                    println!("  section {s} res={:.3e} den={:.3e}", super::rel_residual(d, &r), super::frob(&r));
                }
            }
        }
    }

    #[test]
    fn equivariance_suite_passes_clean() {
        for r in equivariance_suite(25, 3, Corruption::None) {
            assert!(r.passed, "{}", r.line());
        }
    }

    #[test]
    fn corruption_is_caught_and_named() {
        let reports = equivariance_suite(10, 3, Corruption::VnNonlinear);
        let bad: Vec<&SuiteReport> = reports.iter().filter(|r| !r.passed).collect();
        assert!(!bad.is_empty());
        assert!(bad.iter().any(|r| r.name.contains("vn-nonlinear")));
        // Other layers keep passing.
        assert!(reports.iter().any(|r| r.name.contains("vn-linear") && r.passed));
        let reports = equivariance_suite(10, 3, Corruption::Trunk);
        assert!(reports.iter().any(|r| r.name.contains("trunk") && !r.passed));
    }

    #[test]
    fn invariance_suite_passes() {
        for r in invariance_suite(60, 5) {
            assert!(r.passed, "{}", r.line());
        }
    }

    #[test]
    fn gradient_suite_passes() {
        let r = gradient_suite(11);
        assert!(r.passed, "{}", r.line());
    }

    #[test]
    fn loss_oracle_agrees() {
        for r in loss_oracle_suite(20, 17) {
            assert!(r.passed, "{}", r.line());
        }
    }

    #[test]
    fn exemplar_oracle_agrees() {
        for r in exemplar_oracle_suite(60, 23) {
            assert!(r.passed, "{}", r.line());
        }
    }

    #[test]
    fn metric_suite_passes() {
        assert!(metric_suite().passed);
    }

    #[test]
    fn suites_are_deterministic() {
        let a = full_suite(10, 2, Corruption::None);
        let b = full_suite(10, 2, Corruption::None);
        assert_eq!(a, b);
    }
}

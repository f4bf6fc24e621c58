//! Classification and distillation loss primitives and their composition
//! into the training objective.
//!
//! Four sources per section δ of the trunk, all batch means:
//!
//! 1. ground-truth cross-entropy, weighted (1 − γ)
//! 2. teacher KL on the old-class logit columns, weighted λ
//! 3. self-distillation KL of each section against the final head, weighted γ
//! 4. squared distance of each section's pre-logit feature to the final
//!    head's, weighted κ
//!
//! plus an exemplar term (CE + λ·KL on the final head) for rehearsal
//! batches. KL argument order is student-first throughout, with a config
//! switch to swap. The module also produces the analytic upstream gradients
//! (w.r.t. logits and features) the gradient engine consumes.

use serde::{Deserialize, Serialize};

use crate::eqnet::{EqnetError, Model, ModelOutputs, OutputGrads};
use crate::geometry::PointCloud;
use crate::scalar::Real;

/// Additive smoothing inside every logarithm.
pub fn log_epsilon<R: Real>() -> R {
    R::from_f64(1e-12)
}

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("temperature must be positive")]
    BadTemperature,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("student classifier ({student}) narrower than teacher ({teacher})")]
    TeacherWiderThanStudent { student: usize, teacher: usize },
    #[error("nonempty exemplar batch requires a teacher model")]
    MissingTeacher,
    #[error("invalid hyperparameters: {0}")]
    BadHyperparams(String),
    #[error(transparent)]
    Net(#[from] EqnetError),
}

/// Loss weights. γ splits mass between ground-truth CE (1 − γ) and
/// self-distillation KL (γ); λ weighs teacher KL; κ weighs the feature
/// consistency term; logits are softened at `temperature` in every KL.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossHyperparams {
    pub self_distill_weight: f64,
    pub teacher_kl_weight: f64,
    pub feature_l2_weight: f64,
    pub temperature: f64,
    /// Swap every KL to teacher-first (the conventional direction); the
    /// default follows the objective as defined: student-first.
    pub teacher_first_kl: bool,
}

impl Default for LossHyperparams {
    fn default() -> Self {
        LossHyperparams {
            self_distill_weight: 0.3,
            teacher_kl_weight: 1.0,
            feature_l2_weight: 0.1,
            temperature: 2.0,
            teacher_first_kl: false,
        }
    }
}

impl LossHyperparams {
    pub fn validate(&self) -> Result<(), LossError> {
        let ok = (0.0..1.0).contains(&self.self_distill_weight)
            && self.teacher_kl_weight >= 0.0
            && self.feature_l2_weight >= 0.0
            && self.teacher_kl_weight.is_finite()
            && self.feature_l2_weight.is_finite();
        if !ok {
            return Err(LossError::BadHyperparams(
                "need self_distill_weight in [0,1), nonnegative finite weights".into(),
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(LossError::BadTemperature);
        }
        Ok(())
    }

    fn gamma<R: Real>(&self) -> R {
        R::from_f64(self.self_distill_weight)
    }
    fn lambda<R: Real>(&self) -> R {
        R::from_f64(self.teacher_kl_weight)
    }
    fn kappa<R: Real>(&self) -> R {
        R::from_f64(self.feature_l2_weight)
    }
    fn temp<R: Real>(&self) -> R {
        R::from_f64(self.temperature)
    }
}

/// Temperature-softened softmax with max-subtraction.
pub fn softmax_t<R: Real>(logits: &[R], temperature: R) -> Result<Vec<R>, LossError> {
    if temperature <= R::zero() {
        return Err(LossError::BadTemperature);
    }
    Ok(stable_softmax(logits, temperature))
}

fn stable_softmax<R: Real>(logits: &[R], temperature: R) -> Vec<R> {
    debug_assert!(!logits.is_empty());
    let mut top = logits[0];
    for &x in &logits[1..] {
        top = top.max(x);
    }
    let mut out: Vec<R> = logits.iter().map(|&x| ((x - top) / temperature).exp()).collect();
    let mut z = R::zero();
    for &e in &out {
        z += e;
    }
    let inv = R::one() / z;
    for e in &mut out {
        *e *= inv;
    }
    out
}

fn check_probs<R: Real>(p: &[R], what: &str) -> Result<(), LossError> {
    let mut s = R::zero();
    for &x in p {
        s += x;
    }
    if (s - R::one()).abs() > R::from_f64(1e-9) {
        return Err(LossError::DimensionMismatch(format!("{what} does not sum to 1")));
    }
    Ok(())
}

/// −Σ y·log(p + ε) for a one-hot target.
pub fn cross_entropy<R: Real>(probs: &[R], one_hot: &[R]) -> Result<R, LossError> {
    if probs.len() != one_hot.len() {
        return Err(LossError::DimensionMismatch(format!(
            "probs len {} vs target len {}",
            probs.len(),
            one_hot.len()
        )));
    }
    check_probs(probs, "probs")?;
    let eps = log_epsilon::<R>();
    let mut acc = R::zero();
    for (&p, &y) in probs.iter().zip(one_hot) {
        if y != R::zero() {
            acc -= y * (p + eps).ln();
        }
    }
    Ok(acc)
}

/// Index form of [`cross_entropy`].
pub fn cross_entropy_label<R: Real>(probs: &[R], label: usize) -> Result<R, LossError> {
    if label >= probs.len() {
        return Err(LossError::LabelOutOfRange { label, classes: probs.len() });
    }
    check_probs(probs, "probs")?;
    Ok(-(probs[label] + log_epsilon::<R>()).ln())
}

/// Σ p·log((p+ε)/(q+ε)); first argument is the student distribution.
pub fn kl_div<R: Real>(p: &[R], q: &[R]) -> Result<R, LossError> {
    if p.len() != q.len() {
        return Err(LossError::DimensionMismatch(format!("p len {} vs q len {}", p.len(), q.len())));
    }
    check_probs(p, "p")?;
    check_probs(q, "q")?;
    Ok(kl_unchecked(p, q))
}

fn kl_unchecked<R: Real>(p: &[R], q: &[R]) -> R {
    let eps = log_epsilon::<R>();
    let mut acc = R::zero();
    for (&pi, &qi) in p.iter().zip(q) {
        acc += pi * ((pi + eps) / (qi + eps)).ln();
    }
    acc
}

fn one_hot<R: Real>(classes: usize, label: usize) -> Vec<R> {
    let mut v = vec![R::zero(); classes];
    v[label] = R::one();
    v
}

/// Ground-truth cross-entropy of one section over a batch: (1 − γ) · mean CE.
pub fn loss1<R: Real>(
    section_logits: &[Vec<R>],
    labels: &[usize],
    self_distill_weight: f64,
) -> Result<R, LossError> {
    debug_assert_eq!(section_logits.len(), labels.len());
    let gamma = R::from_f64(self_distill_weight);
    if section_logits.is_empty() || gamma == R::one() {
        return Ok(R::zero());
    }
    let mut acc = R::zero();
    for (logits, &y) in section_logits.iter().zip(labels) {
        if y >= logits.len() {
            return Err(LossError::LabelOutOfRange { label: y, classes: logits.len() });
        }
        let p = stable_softmax(logits, R::one());
        acc += cross_entropy(&p, &one_hot(p.len(), y))?;
    }
    Ok((R::one() - gamma) * acc / R::from_f64(section_logits.len() as f64))
}

/// Teacher distillation of one section over a batch:
/// λ · mean KL(σ(student/T), σ(teacher/T)), student columns restricted to
/// the teacher's classifier width.
pub fn loss2<R: Real>(
    student_logits: &[Vec<R>],
    teacher_logits: &[Vec<R>],
    teacher_kl_weight: f64,
    temperature: f64,
    teacher_first: bool,
) -> Result<R, LossError> {
    debug_assert_eq!(student_logits.len(), teacher_logits.len());
    let lambda = R::from_f64(teacher_kl_weight);
    if student_logits.is_empty() || lambda == R::zero() {
        return Ok(R::zero());
    }
    let t = R::from_f64(temperature);
    if t <= R::zero() {
        return Err(LossError::BadTemperature);
    }
    let mut acc = R::zero();
    for (s, c) in student_logits.iter().zip(teacher_logits) {
        if s.len() < c.len() {
            return Err(LossError::TeacherWiderThanStudent { student: s.len(), teacher: c.len() });
        }
        let p = stable_softmax(&s[..c.len()], t);
        let q = stable_softmax(c, t);
        acc += if teacher_first { kl_unchecked(&q, &p) } else { kl_unchecked(&p, &q) };
    }
    Ok(lambda * acc / R::from_f64(student_logits.len() as f64))
}

/// Self-distillation of one section against the final head:
/// γ · mean KL(σ(section/T), σ(final/T)).
pub fn loss3<R: Real>(
    section_logits: &[Vec<R>],
    final_logits: &[Vec<R>],
    self_distill_weight: f64,
    temperature: f64,
    teacher_first: bool,
) -> Result<R, LossError> {
    debug_assert_eq!(section_logits.len(), final_logits.len());
    let gamma = R::from_f64(self_distill_weight);
    if section_logits.is_empty() || gamma == R::zero() {
        return Ok(R::zero());
    }
    let t = R::from_f64(temperature);
    if t <= R::zero() {
        return Err(LossError::BadTemperature);
    }
    let mut acc = R::zero();
    for (s, f) in section_logits.iter().zip(final_logits) {
        if s.len() != f.len() {
            return Err(LossError::DimensionMismatch(format!(
                "section logits {} vs final logits {}",
                s.len(),
                f.len()
            )));
        }
        let p = stable_softmax(s, t);
        let q = stable_softmax(f, t);
        acc += if teacher_first { kl_unchecked(&q, &p) } else { kl_unchecked(&p, &q) };
    }
    Ok(gamma * acc / R::from_f64(section_logits.len() as f64))
}

/// Feature consistency of one section: κ · mean ‖F_δ − F_D‖².
pub fn loss4<R: Real>(
    section_feats: &[Vec<R>],
    final_feats: &[Vec<R>],
    feature_l2_weight: f64,
) -> Result<R, LossError> {
    debug_assert_eq!(section_feats.len(), final_feats.len());
    let kappa = R::from_f64(feature_l2_weight);
    if section_feats.is_empty() || kappa == R::zero() {
        return Ok(R::zero());
    }
    let mut acc = R::zero();
    for (a, b) in section_feats.iter().zip(final_feats) {
        if a.len() != b.len() {
            return Err(LossError::DimensionMismatch(format!(
                "feature dims {} vs {}",
                a.len(),
                b.len()
            )));
        }
        for (&x, &y) in a.iter().zip(b) {
            acc += (x - y) * (x - y);
        }
    }
    Ok(kappa * acc / R::from_f64(section_feats.len() as f64))
}

/// Per-section values of every loss source plus the exemplar terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<R> {
    pub loss1: Vec<R>,
    pub loss2: Vec<R>,
    pub loss3: Vec<R>,
    pub loss4: Vec<R>,
    pub exemplar_ce: R,
    pub exemplar_kl: R,
    pub total: R,
}

impl<R: Real> LossBreakdown<R> {
    fn assemble(
        loss1: Vec<R>,
        loss2: Vec<R>,
        loss3: Vec<R>,
        loss4: Vec<R>,
        exemplar_ce: R,
        exemplar_kl: R,
    ) -> Self {
        let mut total = exemplar_ce + exemplar_kl;
        for v in loss1.iter().chain(&loss2).chain(&loss3).chain(&loss4) {
            total += *v;
        }
        LossBreakdown { loss1, loss2, loss3, loss4, exemplar_ce, exemplar_kl, total }
    }

    pub fn source_sums(&self) -> [R; 4] {
        let sum = |v: &[R]| {
            let mut s = R::zero();
            for &x in v {
                s += x;
            }
            s
        };
        [sum(&self.loss1), sum(&self.loss2), sum(&self.loss3), sum(&self.loss4)]
    }

    pub fn exemplar_total(&self) -> R {
        self.exemplar_ce + self.exemplar_kl
    }

    /// Folds separately computed exemplar terms into the breakdown.
    pub fn with_exemplar(mut self, ce: R, kl: R) -> Self {
        self.total = self.total - self.exemplar_ce - self.exemplar_kl + ce + kl;
        self.exemplar_ce = ce;
        self.exemplar_kl = kl;
        self
    }
}

fn check_outputs_batch<R: Real>(
    outs: &[ModelOutputs<R>],
    labels: &[usize],
) -> Result<(usize, usize, usize), LossError> {
    if outs.len() != labels.len() {
        return Err(LossError::DimensionMismatch(format!(
            "{} outputs vs {} labels",
            outs.len(),
            labels.len()
        )));
    }
    let depth = outs[0].logits.len();
    let classes = outs[0].logits[0].len();
    let head_dim = outs[0].feats[0].len();
    for o in outs {
        if o.logits.len() != depth || o.feats.len() != depth {
            return Err(LossError::DimensionMismatch("ragged section count".into()));
        }
        if o.logits.iter().any(|l| l.len() != classes) || o.feats.iter().any(|f| f.len() != head_dim)
        {
            return Err(LossError::DimensionMismatch("ragged logit or feature widths".into()));
        }
    }
    Ok((depth, classes, head_dim))
}

/// The per-task objective over one new-task batch, from precomputed model
/// outputs. `teacher` is absent exactly on the first task, which zeroes the
/// teacher KL source.
pub fn task_loss_outputs<R: Real>(
    student: &[ModelOutputs<R>],
    teacher: Option<&[ModelOutputs<R>]>,
    labels: &[usize],
    hp: &LossHyperparams,
) -> Result<LossBreakdown<R>, LossError> {
    hp.validate()?;
    if student.is_empty() {
        return Ok(LossBreakdown::assemble(vec![], vec![], vec![], vec![], R::zero(), R::zero()));
    }
    let (depth, _, _) = check_outputs_batch(student, labels)?;
    if let Some(t) = teacher {
        if t.len() != student.len() {
            return Err(LossError::DimensionMismatch(format!(
                "{} teacher outputs vs {} student outputs",
                t.len(),
                student.len()
            )));
        }
    }
    let batch = student.len();
    let mut l1 = Vec::with_capacity(depth);
    let mut l2 = Vec::with_capacity(depth);
    let mut l3 = Vec::with_capacity(depth);
    let mut l4 = Vec::with_capacity(depth);
    // Batch-major views per section.
    let mut sec_logits: Vec<Vec<R>> = Vec::with_capacity(batch);
    for delta in 0..depth {
        sec_logits.clear();
        for o in student {
            sec_logits.push(o.logits[delta].clone());
        }
        l1.push(loss1(&sec_logits, labels, hp.self_distill_weight)?);
        l2.push(match teacher {
            Some(t) => {
                let teach: Vec<Vec<R>> = t.iter().map(|o| o.logits[delta].clone()).collect();
                loss2(
                    &sec_logits,
                    &teach,
                    hp.teacher_kl_weight,
                    hp.temperature,
                    hp.teacher_first_kl,
                )?
            }
            None => R::zero(),
        });
        if delta + 1 == depth {
            // The final section distills against itself: identically zero.
            l3.push(R::zero());
            l4.push(R::zero());
        } else {
            let fin: Vec<Vec<R>> = student.iter().map(|o| o.logits[depth - 1].clone()).collect();
            l3.push(loss3(
                &sec_logits,
                &fin,
                hp.self_distill_weight,
                hp.temperature,
                hp.teacher_first_kl,
            )?);
            let sec_f: Vec<Vec<R>> = student.iter().map(|o| o.feats[delta].clone()).collect();
            let fin_f: Vec<Vec<R>> = student.iter().map(|o| o.feats[depth - 1].clone()).collect();
            l4.push(loss4(&sec_f, &fin_f, hp.feature_l2_weight)?);
        }
    }
    Ok(LossBreakdown::assemble(l1, l2, l3, l4, R::zero(), R::zero()))
}

/// Rehearsal objective on the final head: mean CE + λ · mean KL against the
/// teacher. Empty batches cost zero; a nonempty batch requires the teacher.
pub fn exemplar_loss_outputs<R: Real>(
    student: &[ModelOutputs<R>],
    teacher: Option<&[ModelOutputs<R>]>,
    labels: &[usize],
    hp: &LossHyperparams,
) -> Result<(R, R), LossError> {
    hp.validate()?;
    if student.is_empty() {
        return Ok((R::zero(), R::zero()));
    }
    check_outputs_batch(student, labels)?;
    let teacher = match teacher {
        Some(t) if t.len() == student.len() => t,
        Some(t) => {
            return Err(LossError::DimensionMismatch(format!(
                "{} teacher outputs vs {} student outputs",
                t.len(),
                student.len()
            )))
        }
        None => return Err(LossError::MissingTeacher),
    };
    let s_final: Vec<Vec<R>> = student.iter().map(|o| o.final_logits().to_vec()).collect();
    let t_final: Vec<Vec<R>> = teacher.iter().map(|o| o.final_logits().to_vec()).collect();
    let ce = loss1(&s_final, labels, 0.0)?;
    let kl = loss2(&s_final, &t_final, hp.teacher_kl_weight, hp.temperature, hp.teacher_first_kl)?;
    Ok((ce, kl))
}

fn forward_batch<R: Real>(
    model: &Model<R>,
    batch: &[PointCloud<R>],
) -> Result<Vec<ModelOutputs<R>>, LossError> {
    batch.iter().map(|c| model.forward_cloud(c).map_err(LossError::from)).collect()
}

/// The per-task objective over one batch of clouds: runs both models
/// forward and assembles every source. `teacher` is absent exactly on the
/// first task.
pub fn task_loss<R: Real>(
    student: &Model<R>,
    teacher: Option<&Model<R>>,
    batch: &[PointCloud<R>],
    labels: &[usize],
    hp: &LossHyperparams,
) -> Result<LossBreakdown<R>, LossError> {
    let s = forward_batch(student, batch)?;
    let t = match teacher {
        Some(m) => Some(forward_batch(m, batch)?),
        None => None,
    };
    task_loss_outputs(&s, t.as_deref(), labels, hp)
}

/// Rehearsal objective over a batch of exemplar clouds; empty costs zero.
pub fn exemplar_loss<R: Real>(
    student: &Model<R>,
    teacher: Option<&Model<R>>,
    batch: &[PointCloud<R>],
    labels: &[usize],
    hp: &LossHyperparams,
) -> Result<(R, R), LossError> {
    if batch.is_empty() {
        return Ok((R::zero(), R::zero()));
    }
    let s = forward_batch(student, batch)?;
    let t = match teacher {
        Some(m) => Some(forward_batch(m, batch)?),
        None => None,
    };
    exemplar_loss_outputs(&s, t.as_deref(), labels, hp)
}

/// Gradient of mean CE w.r.t. logits, scaled by `w / batch`:
/// w·(σ(z) − onehot)/B per sample.
fn add_ce_grad<R: Real>(dlogits: &mut [R], logits: &[R], label: usize, w: R) {
    let p = stable_softmax(logits, R::one());
    for (i, d) in dlogits.iter_mut().enumerate() {
        let y = if i == label { R::one() } else { R::zero() };
        *d += w * (p[i] - y);
    }
}

/// Gradient of KL(σ(x/T), q_fixed) w.r.t. x, scaled by w:
/// (w/T) · p_k·[(ln p_k − ln q_k) − KL(p, q)].
fn add_kl_first_slot_grad<R: Real>(dlogits: &mut [R], x: &[R], q_fixed: &[R], t: R, w: R) {
    let p = stable_softmax(x, t);
    let eps = log_epsilon::<R>();
    let kl = kl_unchecked(&p, q_fixed);
    for k in 0..p.len() {
        let diff = ((p[k] + eps) / (q_fixed[k] + eps)).ln();
        dlogits[k] += w / t * p[k] * (diff - kl);
    }
}

/// Gradient of KL(p_fixed, σ(x/T)) w.r.t. x, scaled by w: (w/T)·(σ(x/T) − p).
fn add_kl_second_slot_grad<R: Real>(dlogits: &mut [R], x: &[R], p_fixed: &[R], t: R, w: R) {
    let q = stable_softmax(x, t);
    for k in 0..q.len() {
        dlogits[k] += w / t * (q[k] - p_fixed[k]);
    }
}

/// Computes the task objective and its per-sample upstream gradients in one
/// pass. Gradients are already scaled for the batch mean: feeding each
/// sample's `OutputGrads` through the gradient engine and summing yields
/// d(total)/d(parameters).
pub fn task_loss_grads<R: Real>(
    student: &[ModelOutputs<R>],
    teacher: Option<&[ModelOutputs<R>]>,
    labels: &[usize],
    hp: &LossHyperparams,
) -> Result<(LossBreakdown<R>, Vec<OutputGrads<R>>), LossError> {
    let breakdown = task_loss_outputs(student, teacher, labels, hp)?;
    if student.is_empty() {
        return Ok((breakdown, Vec::new()));
    }
    let depth = student[0].logits.len();
    let classes = student[0].logits[0].len();
    let head_dim = student[0].feats[0].len();
    let bn = R::from_f64(student.len() as f64);
    let gamma = hp.gamma::<R>();
    let lambda = hp.lambda::<R>();
    let kappa = hp.kappa::<R>();
    let t = hp.temp::<R>();
    let mut grads: Vec<OutputGrads<R>> =
        student.iter().map(|_| OutputGrads::zeros(depth, classes, head_dim)).collect();

    for (i, out) in student.iter().enumerate() {
        let g = &mut grads[i];
        let final_logits = &out.logits[depth - 1];
        let final_feat = &out.feats[depth - 1];
        for delta in 0..depth {
            let logits = &out.logits[delta];
            // Source 1: ground-truth CE.
            if gamma != R::one() {
                add_ce_grad(&mut g.dlogits[delta], logits, labels[i], (R::one() - gamma) / bn);
            }
            // Source 2: teacher KL on restricted columns.
            if let Some(teach) = teacher {
                if lambda != R::zero() {
                    let tl = &teach[i].logits[delta];
                    let q = stable_softmax(tl, t);
                    let width = tl.len();
                    if hp.teacher_first_kl {
                        add_kl_second_slot_grad(
                            &mut g.dlogits[delta][..width],
                            &logits[..width],
                            &q,
                            t,
                            lambda / bn,
                        );
                    } else {
                        add_kl_first_slot_grad(
                            &mut g.dlogits[delta][..width],
                            &logits[..width],
                            &q,
                            t,
                            lambda / bn,
                        );
                    }
                }
            }
            if delta + 1 < depth {
                // Source 3: section-vs-final KL; both slots get gradient.
                if gamma != R::zero() {
                    let p_sec = stable_softmax(logits, t);
                    let p_fin = stable_softmax(final_logits, t);
                    if hp.teacher_first_kl {
                        // KL(σ(final/T), σ(section/T))
                        add_kl_second_slot_grad(&mut g.dlogits[delta], logits, &p_fin, t, gamma / bn);
                        add_kl_first_slot_grad(
                            &mut g.dlogits[depth - 1],
                            final_logits,
                            &p_sec,
                            t,
                            gamma / bn,
                        );
                    } else {
                        add_kl_first_slot_grad(&mut g.dlogits[delta], logits, &p_fin, t, gamma / bn);
                        add_kl_second_slot_grad(
                            &mut g.dlogits[depth - 1],
                            final_logits,
                            &p_sec,
                            t,
                            gamma / bn,
                        );
                    }
                }
                // Source 4: feature consistency.
                if kappa != R::zero() {
                    let two = R::from_f64(2.0);
                    for h in 0..head_dim {
                        let d = out.feats[delta][h] - final_feat[h];
                        g.dfeats[delta][h] += kappa * two * d / bn;
                        g.dfeats[depth - 1][h] -= kappa * two * d / bn;
                    }
                }
            }
        }
    }
    Ok((breakdown, grads))
}

/// Exemplar objective and upstream gradients (final head only).
pub fn exemplar_loss_grads<R: Real>(
    student: &[ModelOutputs<R>],
    teacher: Option<&[ModelOutputs<R>]>,
    labels: &[usize],
    hp: &LossHyperparams,
) -> Result<((R, R), Vec<OutputGrads<R>>), LossError> {
    let (ce, kl) = exemplar_loss_outputs(student, teacher, labels, hp)?;
    if student.is_empty() {
        return Ok(((ce, kl), Vec::new()));
    }
    let teacher = teacher.expect("validated nonempty batch has a teacher");
    let depth = student[0].logits.len();
    let classes = student[0].logits[0].len();
    let head_dim = student[0].feats[0].len();
    let bn = R::from_f64(student.len() as f64);
    let lambda = hp.lambda::<R>();
    let t = hp.temp::<R>();
    let mut grads: Vec<OutputGrads<R>> =
        student.iter().map(|_| OutputGrads::zeros(depth, classes, head_dim)).collect();
    for (i, out) in student.iter().enumerate() {
        let g = &mut grads[i];
        let logits = out.final_logits();
        add_ce_grad(&mut g.dlogits[depth - 1], logits, labels[i], R::one() / bn);
        if lambda != R::zero() {
            let tl = teacher[i].final_logits();
            let q = stable_softmax(tl, t);
            let width = tl.len();
            if hp.teacher_first_kl {
                add_kl_second_slot_grad(
                    &mut g.dlogits[depth - 1][..width],
                    &logits[..width],
                    &q,
                    t,
                    lambda / bn,
                );
            } else {
                add_kl_first_slot_grad(
                    &mut g.dlogits[depth - 1][..width],
                    &logits[..width],
                    &q,
                    t,
                    lambda / bn,
                );
            }
        }
    }
    Ok(((ce, kl), grads))
}

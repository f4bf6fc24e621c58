//! Continual-learning metrics: average accuracy across steps, forgetting on
//! the first task's classes, and per-task feature retention.

use serde::{Deserialize, Serialize};

use super::ProtocolError;

/// Fraction of predictions equal to their labels.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64, ProtocolError> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(ProtocolError::EmptyEvaluation);
    }
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Arithmetic mean of the per-step accuracies.
pub fn avg_accuracy(acc: &[f64]) -> Result<f64, ProtocolError> {
    if acc.is_empty() {
        return Err(ProtocolError::EmptyEvaluation);
    }
    Ok(acc.iter().sum::<f64>() / acc.len() as f64)
}

/// Which baseline the forgetting series subtracts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ForgettingVariant {
    /// F_k = A₁(1) − A_k(1): drop on task 1 relative to when it was learned.
    #[default]
    FirstTask,
    /// F_k = max_{j≤k} A_j(1) − A_k(1): drop relative to the best accuracy
    /// task 1 ever reached.
    MaxSeen,
}

/// Forgetting series over the lower-triangular accuracy matrix
/// `task_acc[k][i]` (accuracy on task i's classes after task k). F₁ = 0.
pub fn forgetting_rate(task_acc: &[Vec<f64>], variant: ForgettingVariant) -> Vec<f64> {
    let mut out = Vec::with_capacity(task_acc.len());
    let mut best = f64::NEG_INFINITY;
    for (k, row) in task_acc.iter().enumerate() {
        let a_k1 = row[0];
        best = best.max(a_k1);
        let anchor = match variant {
            ForgettingVariant::FirstTask => task_acc[0][0],
            ForgettingVariant::MaxSeen => best,
        };
        out.push(if k == 0 { 0.0 } else { anchor - a_k1 });
    }
    out
}

/// Retention series R_i = A_K(i) / A_i(i); `None` marks an undefined ratio
/// (the task was never learned above zero).
pub fn feature_retention(task_acc: &[Vec<f64>]) -> Vec<Option<f64>> {
    let Some(last) = task_acc.last() else {
        return Vec::new();
    };
    (0..task_acc.len())
        .map(|i| {
            let learned = task_acc[i][i];
            if learned == 0.0 {
                None
            } else {
                Some(last[i] / learned)
            }
        })
        .collect()
}

/// One logged training epoch; `acc_seen` is present when the run evaluates
/// between epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub task: usize,
    pub epoch: usize,
    pub loss_total: f64,
    pub loss1: f64,
    pub loss2: f64,
    pub loss3: f64,
    pub loss4: f64,
    pub loss_exemplar: f64,
    pub acc_seen: Option<f64>,
}

/// Everything a continual run records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    /// Overall accuracy across all seen classes after each task.
    pub seen_acc: Vec<f64>,
    /// Lower-triangular matrix: `task_acc[k][i]` = accuracy on task i's
    /// classes after finishing task k (i ≤ k).
    pub task_acc: Vec<Vec<f64>>,
    pub forgetting: Vec<f64>,
    pub retention: Vec<Option<f64>>,
    pub epochs: Vec<EpochRecord>,
}

impl MetricsTable {
    pub fn finish(
        seen_acc: Vec<f64>,
        task_acc: Vec<Vec<f64>>,
        epochs: Vec<EpochRecord>,
        variant: ForgettingVariant,
    ) -> Self {
        let forgetting = forgetting_rate(&task_acc, variant);
        let retention = feature_retention(&task_acc);
        MetricsTable { seen_acc, task_acc, forgetting, retention, epochs }
    }

    pub fn avg_acc(&self) -> Result<f64, ProtocolError> {
        avg_accuracy(&self.seen_acc)
    }
}

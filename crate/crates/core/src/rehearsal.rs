//! Exemplar memory for rehearsal: per class, keep the r samples whose
//! invariant features lie nearest the class's feature center, under a fixed
//! total budget M with quota r = floor(M / classes seen).
//!
//! Ranking features are rotation-invariant, so an exemplar's rank does not
//! depend on the pose it arrived in; stored clouds keep their original
//! coordinates.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{decode_points, encode_points};
use crate::fsutil::write_atomic;
use crate::geometry::PointCloud;
use crate::scalar::Real;

#[derive(Debug, thiserror::Error)]
pub enum RehearsalError {
    #[error("budget {budget} cannot cover {classes} classes at one sample each")]
    BudgetTooSmall { budget: usize, classes: usize },
    #[error("no classes seen yet")]
    NoClasses,
    #[error("empty candidate list")]
    EmptyCandidates,
    #[error("feature dimension mismatch: {0} vs {1}")]
    FeatureDim(usize, usize),
    #[error("non-finite feature value")]
    NonFiniteFeature,
    #[error("feature extraction failed: {0}")]
    Feature(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad store manifest: {0}")]
    BadManifest(String),
}

fn io_err(path: &Path, source: std::io::Error) -> RehearsalError {
    RehearsalError::Io { path: path.display().to_string(), source }
}

/// Per-class sample cap: floor(M / t), guaranteed ≥ 1.
pub fn quota(budget: usize, classes_seen: usize) -> Result<usize, RehearsalError> {
    if classes_seen == 0 {
        return Err(RehearsalError::NoClasses);
    }
    if budget < classes_seen {
        return Err(RehearsalError::BudgetTooSmall { budget, classes: classes_seen });
    }
    Ok(budget / classes_seen)
}

/// Componentwise mean of the feature vectors.
pub fn class_center<R: Real>(features: &[Vec<R>]) -> Result<Vec<R>, RehearsalError> {
    let first = features.first().ok_or(RehearsalError::EmptyCandidates)?;
    let dim = first.len();
    let mut center = vec![R::zero(); dim];
    for f in features {
        if f.len() != dim {
            return Err(RehearsalError::FeatureDim(dim, f.len()));
        }
        for (c, &x) in center.iter_mut().zip(f) {
            if !x.is_finite() {
                return Err(RehearsalError::NonFiniteFeature);
            }
            *c += x;
        }
    }
    let inv = R::one() / R::from_f64(features.len() as f64);
    for c in &mut center {
        *c *= inv;
    }
    Ok(center)
}

fn center_distance_sq<R: Real>(center: &[R], f: &[R]) -> R {
    let mut d = R::zero();
    for (&c, &x) in center.iter().zip(f) {
        d += (c - x) * (c - x);
    }
    d
}

/// Ranks candidates by squared distance to the center of ALL candidates and
/// returns `(original index, distance)` for the nearest min(r, n), ascending,
/// ties broken by original index. Selection is partial: only the kept prefix
/// gets sorted.
pub fn rank_exemplars<R: Real>(
    features: &[Vec<R>],
    r: usize,
) -> Result<Vec<(usize, R)>, RehearsalError> {
    if r == 0 {
        return Err(RehearsalError::BudgetTooSmall { budget: 0, classes: 1 });
    }
    let center = class_center(features)?;
    let mut scored: Vec<(usize, R)> = features
        .iter()
        .enumerate()
        .map(|(i, f)| (i, center_distance_sq(&center, f)))
        .collect();
    let keep = r.min(scored.len());
    let by_dist = |a: &(usize, R), b: &(usize, R)| {
        a.1.as_f64().total_cmp(&b.1.as_f64()).then(a.0.cmp(&b.0))
    };
    if keep < scored.len() {
        scored.select_nth_unstable_by(keep - 1, by_dist);
        scored.truncate(keep);
    }
    scored.sort_unstable_by(by_dist);
    Ok(scored)
}

/// One stored sample and its distance to the class center at selection time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar<R> {
    pub cloud: PointCloud<R>,
    pub distance: R,
}

/// Keeps the nearest-to-center candidates themselves.
pub fn select_exemplars<R: Real>(
    candidates: &[PointCloud<R>],
    features: &[Vec<R>],
    r: usize,
) -> Result<Vec<Exemplar<R>>, RehearsalError> {
    if candidates.len() != features.len() {
        return Err(RehearsalError::FeatureDim(candidates.len(), features.len()));
    }
    let kept = rank_exemplars(features, r)?;
    Ok(kept
        .into_iter()
        .map(|(i, distance)| Exemplar { cloud: candidates[i].clone(), distance })
        .collect())
}

/// The exemplar memory. Class lists stay sorted nearest-to-center first and
/// the total never exceeds the budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ExemplarStore<R: Real> {
    pub budget: usize,
    quota: usize,
    classes: BTreeMap<usize, Vec<Exemplar<R>>>,
}

impl<R: Real> ExemplarStore<R> {
    pub fn new(budget: usize) -> Self {
        ExemplarStore { budget, quota: 0, classes: BTreeMap::new() }
    }

    pub fn quota(&self) -> usize {
        self.quota
    }

    pub fn is_empty(&self) -> bool {
        self.classes.values().all(|v| v.is_empty())
    }

    pub fn total_len(&self) -> usize {
        self.classes.values().map(|v| v.len()).sum()
    }

    pub fn class_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.keys().copied()
    }

    pub fn class_samples(&self, class: usize) -> &[Exemplar<R>] {
        self.classes.get(&class).map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// Every stored cloud with its label, class-major.
    pub fn iter_samples(&self) -> impl Iterator<Item = &PointCloud<R>> + '_ {
        self.classes.values().flat_map(|v| v.iter().map(|e| &e.cloud))
    }

    /// Checks the structural invariants: budget respected, per-class cap
    /// respected, lists ascending by distance.
    pub fn validate(&self) -> Result<(), RehearsalError> {
        if self.total_len() > self.budget {
            return Err(RehearsalError::BadManifest(format!(
                "stores {} samples over budget {}",
                self.total_len(),
                self.budget
            )));
        }
        for (class, list) in &self.classes {
            if self.quota > 0 && list.len() > self.quota {
                return Err(RehearsalError::BadManifest(format!(
                    "class {class} holds {} samples over quota {}",
                    list.len(),
                    self.quota
                )));
            }
            for w in list.windows(2) {
                if w[0].distance.as_f64() > w[1].distance.as_f64() {
                    return Err(RehearsalError::BadManifest(format!(
                        "class {class} list not sorted by distance"
                    )));
                }
            }
        }
        Ok(())
    }

    /// End-of-task memory update. New classes select from their candidate
    /// pools; already-stored classes are re-ranked under the current feature
    /// extractor and truncated to the new quota. The swap is atomic: the
    /// store never holds more than the budget, even mid-update.
    pub fn update<F, E>(
        &mut self,
        new_classes: &BTreeMap<usize, Vec<PointCloud<R>>>,
        classes_seen: usize,
        mut features: F,
    ) -> Result<(), RehearsalError>
    where
        F: FnMut(&PointCloud<R>) -> Result<Vec<R>, E>,
        E: std::fmt::Display,
    {
        let r = quota(self.budget, classes_seen)?;
        let mut next: BTreeMap<usize, Vec<Exemplar<R>>> = BTreeMap::new();
        let mut feat = |cloud: &PointCloud<R>| -> Result<Vec<R>, RehearsalError> {
            features(cloud).map_err(|e| RehearsalError::Feature(e.to_string()))
        };
        for (&class, kept) in &self.classes {
            if new_classes.contains_key(&class) {
                continue;
            }
            let clouds: Vec<PointCloud<R>> = kept.iter().map(|e| e.cloud.clone()).collect();
            let feats: Vec<Vec<R>> = clouds.iter().map(&mut feat).collect::<Result<_, _>>()?;
            next.insert(class, select_exemplars(&clouds, &feats, r)?);
        }
        for (&class, candidates) in new_classes {
            if candidates.is_empty() {
                return Err(RehearsalError::EmptyCandidates);
            }
            let feats: Vec<Vec<R>> = candidates.iter().map(&mut feat).collect::<Result<_, _>>()?;
            next.insert(class, select_exemplars(candidates, &feats, r)?);
        }
        self.quota = r;
        self.classes = next;
        self.validate()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreManifest {
    budget: usize,
    quota: usize,
    /// class → (file, label, point count, distance)
    classes: BTreeMap<usize, Vec<StoredSample>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredSample {
    file: String,
    label: usize,
    points: usize,
    distance: f64,
}

/// Writes `manifest.json` plus one binary point file per exemplar. Point
/// coordinates round-trip bit-exactly at double precision; normals are not
/// stored (the synthetic pipeline never produces them).
pub fn save_store<R: Real>(dir: &Path, store: &ExemplarStore<R>) -> Result<(), RehearsalError> {
    std::fs::create_dir_all(dir.join("points")).map_err(|e| io_err(dir, e))?;
    let mut manifest =
        StoreManifest { budget: store.budget, quota: store.quota, classes: BTreeMap::new() };
    for (&class, list) in &store.classes {
        let mut rows = Vec::with_capacity(list.len());
        for (k, e) in list.iter().enumerate() {
            let file = format!("points/exemplar_{class}_{k:04}.bin");
            let path = dir.join(&file);
            write_atomic(&path, &encode_points(&e.cloud)).map_err(|err| io_err(&path, err))?;
            rows.push(StoredSample {
                file,
                label: e.cloud.label,
                points: e.cloud.len(),
                distance: e.distance.as_f64(),
            });
        }
        manifest.classes.insert(class, rows);
    }
    let body = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| RehearsalError::BadManifest(e.to_string()))?;
    let path = dir.join("manifest.json");
    write_atomic(&path, &body).map_err(|e| io_err(&path, e))
}

pub fn load_store(dir: &Path) -> Result<ExemplarStore<f64>, RehearsalError> {
    let path = dir.join("manifest.json");
    let body = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
    let manifest: StoreManifest =
        serde_json::from_slice(&body).map_err(|e| RehearsalError::BadManifest(e.to_string()))?;
    let mut store = ExemplarStore::new(manifest.budget);
    store.quota = manifest.quota;
    for (class, rows) in manifest.classes {
        let mut list = Vec::with_capacity(rows.len());
        for row in rows {
            let p = dir.join(&row.file);
            let bytes = std::fs::read(&p).map_err(|e| io_err(&p, e))?;
            let points = decode_points(&bytes, row.points, &p)
                .map_err(|e| RehearsalError::BadManifest(e.to_string()))?;
            list.push(Exemplar {
                cloud: PointCloud::new(points, row.label),
                distance: row.distance,
            });
        }
        store.classes.insert(class, list);
    }
    store.validate()?;
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn quota_examples() {
        assert_eq!(quota(500, 40).unwrap(), 12);
        assert_eq!(quota(400, 15).unwrap(), 26);
        assert_eq!(quota(100, 100).unwrap(), 1);
        assert!(matches!(
            quota(5, 6),
            Err(RehearsalError::BudgetTooSmall { budget: 5, classes: 6 })
        ));
        assert!(matches!(quota(5, 0), Err(RehearsalError::NoClasses)));
    }

    proptest! {
        #[test]
        fn quota_is_monotone_in_classes(budget in 1usize..10_000, t in 1usize..200) {
            prop_assume!(budget >= t + 1);
            prop_assert!(quota(budget, t + 1).unwrap() <= quota(budget, t).unwrap());
            prop_assert!(quota(budget, t).unwrap() >= 1);
        }
    }

    #[test]
    fn center_examples() {
        let one = class_center(&[vec![3.0, -1.0]]).unwrap();
        assert_eq!(one, vec![3.0, -1.0]);
        let sym = class_center(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(sym, vec![0.0, 0.0]);
        let copies: Vec<f64> = class_center(&vec![vec![0.25, 0.5, -2.0]; 7]).unwrap();
        for (a, b) in copies.iter().zip(&[0.25, 0.5, -2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(class_center::<f64>(&[]), Err(RehearsalError::EmptyCandidates)));
        assert!(class_center(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn selection_keeps_nearest_to_center() {
        // Center of {(0,0), (10,0), (0.1,0)} is (3.3667, 0); the two nearest
        // are (0.1,0) then (0,0).
        let feats = vec![vec![0.0, 0.0], vec![10.0, 0.0], vec![0.1, 0.0]];
        let kept = rank_exemplars(&feats, 2).unwrap();
        let idx: Vec<usize> = kept.iter().map(|&(i, _)| i).collect();
        assert_eq!(idx, vec![2, 0]);
        assert!(kept[0].1 <= kept[1].1);
        // r covering everything returns all three, sorted.
        let all = rank_exemplars(&feats, 10).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(all.iter().map(|&(i, _)| i).collect::<Vec<_>>(), vec![2, 0, 1]);
    }

    #[test]
    fn selection_ties_break_by_original_index() {
        let feats = vec![vec![1.0, 1.0]; 5];
        let kept = rank_exemplars(&feats, 3).unwrap();
        assert_eq!(kept.iter().map(|&(i, _)| i).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    /// Independent oracle: full sort of every candidate, plain Vec::sort_by.
    fn brute_force(feats: &[Vec<f64>], r: usize) -> Vec<(usize, f64)> {
        let dim = feats[0].len();
        let mut center = vec![0.0; dim];
        for f in feats {
            for (c, x) in center.iter_mut().zip(f) {
                *c += x;
            }
        }
        for c in &mut center {
            *c /= feats.len() as f64;
        }
        let mut scored: Vec<(usize, f64)> = feats
            .iter()
            .enumerate()
            .map(|(i, f)| {
                (i, f.iter().zip(&center).map(|(x, c)| (x - c) * (x - c)).sum::<f64>())
            })
            .collect();
        scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        scored.truncate(r);
        scored
    }

    #[test]
    fn selection_matches_exhaustive_oracle() {
        let mut rng = crate::seeding::stream(404, "rehearsal-oracle", &[]);
        for trial in 0..40 {
            let n = rng.random_range(1usize..=100);
            let dim = rng.random_range(1usize..=8);
            let feats: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let r = rng.random_range(1usize..=n + 5);
            let got = rank_exemplars(&feats, r).unwrap();
            let want = brute_force(&feats, r);
            assert_eq!(got.len(), want.len(), "trial {trial}");
            for (g, w) in got.iter().zip(&want) {
                assert_eq!(g.0, w.0, "trial {trial}");
                assert!((g.1 - w.1).abs() < 1e-12, "trial {trial}");
            }
        }
        // The documented 50-candidate, r=10 instance.
        let mut rng = crate::seeding::stream(7, "rehearsal-oracle-50", &[]);
        let feats: Vec<Vec<f64>> =
            (0..50).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let got = rank_exemplars(&feats, 10).unwrap();
        let want = brute_force(&feats, 10);
        assert_eq!(
            got.iter().map(|&(i, _)| i).collect::<Vec<_>>(),
            want.iter().map(|&(i, _)| i).collect::<Vec<_>>()
        );
        for (g, w) in got.iter().zip(&want) {
            assert!((g.1 - w.1).abs() < 1e-12);
        }
    }

    fn cloud_at(x: f64, label: usize) -> PointCloud<f64> {
        PointCloud::new(vec![[x, 0.0, 0.0], [x, 1.0, 0.0], [x, 0.0, 1.0]], label)
    }

    /// Feature = centroid; deterministic stand-in for a trained extractor.
    fn centroid_feature(c: &PointCloud<f64>) -> Result<Vec<f64>, std::convert::Infallible> {
        let ctr = c.centroid();
        Ok(ctr.to_vec())
    }

    #[test]
    fn first_task_fills_quota_per_class() {
        let mut store: ExemplarStore<f64> = ExemplarStore::new(500);
        let mut new = BTreeMap::new();
        for class in 0..4usize {
            let pool: Vec<PointCloud<f64>> =
                (0..130).map(|i| cloud_at(class as f64 + i as f64 * 0.01, class)).collect();
            new.insert(class, pool);
        }
        store.update(&new, 4, centroid_feature).unwrap();
        assert_eq!(store.quota(), 125);
        assert_eq!(store.total_len(), 500);
        for class in 0..4 {
            assert_eq!(store.class_samples(class).len(), 125);
        }
        store.validate().unwrap();
    }

    #[test]
    fn old_classes_truncate_when_quota_shrinks() {
        let mut store: ExemplarStore<f64> = ExemplarStore::new(8);
        let mut task1 = BTreeMap::new();
        task1.insert(0usize, (0..6).map(|i| cloud_at(i as f64, 0)).collect::<Vec<_>>());
        task1.insert(1usize, (0..6).map(|i| cloud_at(10.0 + i as f64, 1)).collect::<Vec<_>>());
        store.update(&task1, 2, centroid_feature).unwrap();
        assert_eq!(store.quota(), 4);
        assert_eq!(store.total_len(), 8);

        let mut task2 = BTreeMap::new();
        task2.insert(2usize, (0..6).map(|i| cloud_at(20.0 + i as f64, 2)).collect::<Vec<_>>());
        task2.insert(3usize, (0..6).map(|i| cloud_at(30.0 + i as f64, 3)).collect::<Vec<_>>());
        store.update(&task2, 4, centroid_feature).unwrap();
        assert_eq!(store.quota(), 2);
        assert_eq!(store.total_len(), 8);
        for class in 0..4 {
            assert_eq!(store.class_samples(class).len(), 2, "class {class}");
        }
        store.validate().unwrap();
        // Old-class survivors are the nearest to their refreshed centers.
        let kept: Vec<f64> =
            store.class_samples(0).iter().map(|e| e.cloud.points[0][0]).collect();
        assert_eq!(kept.len(), 2);
        for x in kept {
            assert!((0.0..6.0).contains(&x));
        }
    }

    #[test]
    fn update_is_idempotent_with_unchanged_features() {
        let mut store: ExemplarStore<f64> = ExemplarStore::new(10);
        let mut task1 = BTreeMap::new();
        task1.insert(0usize, (0..9).map(|i| cloud_at(i as f64 * 0.3, 0)).collect::<Vec<_>>());
        task1.insert(1usize, (0..9).map(|i| cloud_at(5.0 + i as f64 * 0.3, 1)).collect::<Vec<_>>());
        store.update(&task1, 2, centroid_feature).unwrap();

        let empty = BTreeMap::new();
        store.update(&empty, 2, centroid_feature).unwrap();
        let once = store.clone();
        store.update(&empty, 2, centroid_feature).unwrap();
        assert_eq!(store, once);
    }

    #[test]
    fn update_rejects_budget_below_class_count() {
        let mut store: ExemplarStore<f64> = ExemplarStore::new(3);
        let mut new = BTreeMap::new();
        for class in 0..4usize {
            new.insert(class, vec![cloud_at(class as f64, class)]);
        }
        assert!(matches!(
            store.update(&new, 4, centroid_feature),
            Err(RehearsalError::BudgetTooSmall { budget: 3, classes: 4 })
        ));
    }

    #[test]
    fn store_round_trips_through_disk() {
        let mut store: ExemplarStore<f64> = ExemplarStore::new(6);
        let mut new = BTreeMap::new();
        new.insert(0usize, (0..5).map(|i| cloud_at(0.37 * i as f64, 0)).collect::<Vec<_>>());
        new.insert(2usize, (0..5).map(|i| cloud_at(1.0 + 0.11 * i as f64, 2)).collect::<Vec<_>>());
        store.update(&new, 2, centroid_feature).unwrap();

        let dir = tempfile::tempdir().unwrap();
        save_store(dir.path(), &store).unwrap();
        let back = load_store(dir.path()).unwrap();
        assert_eq!(back.budget, store.budget);
        assert_eq!(back.quota(), store.quota());
        assert_eq!(back.total_len(), store.total_len());
        for class in back.class_ids() {
            let (a, b) = (store.class_samples(class), back.class_samples(class));
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.cloud.points, y.cloud.points, "bit-exact points");
                assert_eq!(x.cloud.label, y.cloud.label);
                assert_eq!(x.distance, y.distance);
            }
        }
    }

    #[test]
    fn budget_never_exceeded_across_growth() {
        let mut store: ExemplarStore<f64> = ExemplarStore::new(23);
        let mut rng = crate::seeding::stream(99, "rehearsal-growth", &[]);
        let mut seen = 0usize;
        for task in 0..5usize {
            let mut new = BTreeMap::new();
            for j in 0..3usize {
                let class = task * 3 + j;
                let n = rng.random_range(2usize..12);
                new.insert(
                    class,
                    (0..n).map(|i| cloud_at(class as f64 + 0.05 * i as f64, class)).collect(),
                );
            }
            seen += 3;
            store.update(&new, seen, centroid_feature).unwrap();
            assert!(store.total_len() <= 23, "task {task}");
            store.validate().unwrap();
        }
        assert_eq!(store.quota(), 23 / 15);
    }
}

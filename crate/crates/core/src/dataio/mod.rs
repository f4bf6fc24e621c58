//! Data supply: synthetic shape generation, OFF mesh ingestion with surface
//! sampling, normalization, and on-disk dataset layout.

mod mesh;
mod off;
mod shapes;

pub use mesh::Mesh;
pub use off::{load_off, parse_off};
pub use shapes::{ShapeClass, CATALOG};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::PointCloud;
use crate::linalg::{norm3, sub3, Vec3};
use crate::scalar::Real;
use crate::seeding;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("unknown shape class '{0}'")]
    UnknownClass(String),
    #[error("point count {n} below minimum {min}")]
    TooFewPoints { n: usize, min: usize },
    #[error("need at least {min} samples per class, got {got}")]
    TooFewSamples { got: usize, min: usize },
    #[error("class list is empty or contains duplicates")]
    BadClassList,
    #[error("cannot normalize: cloud is empty")]
    EmptyCloud,
    #[error("cannot normalize: all points identical")]
    ZeroScale,
    #[error("OFF line {line}: expected OFF header")]
    OffHeader { line: usize },
    #[error("OFF line {line}: malformed {what}")]
    OffMalformed { line: usize, what: String },
    #[error("OFF line {line}: vertex index {index} out of range for {vertices} vertices")]
    OffIndexRange { line: usize, index: usize, vertices: usize },
    #[error("OFF file truncated at line {line}")]
    OffTruncated { line: usize },
    #[error("face {face}: vertex index {index} out of range for {vertices} vertices")]
    FaceIndexOutOfRange { face: usize, index: usize, vertices: usize },
    #[error("face {face} has repeated vertices")]
    DegenerateFace { face: usize },
    #[error("mesh has zero surface area")]
    ZeroAreaMesh,
    #[error("dataset manifest invalid: {0}")]
    BadManifest(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> DataError {
        DataError::Io { path: path.display().to_string(), source }
    }
}

/// Per-sample corruption applied after surface sampling: one isotropic scale
/// factor per cloud, then independent gaussian offsets per coordinate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseParams {
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub sigma: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams { scale_lo: 0.8, scale_hi: 1.2, sigma: 0.01 }
    }
}

impl NoiseParams {
    pub fn disabled() -> Self {
        NoiseParams { scale_lo: 1.0, scale_hi: 1.0, sigma: 0.0 }
    }

    fn validate(&self) -> Result<(), DataError> {
        if !(self.scale_lo > 0.0 && self.scale_hi >= self.scale_lo && self.sigma >= 0.0) {
            return Err(DataError::BadManifest("invalid noise parameters".into()));
        }
        Ok(())
    }
}

pub const MIN_POINTS: usize = 8;

/// Samples one cloud of `n` surface points from a catalog class.
///
/// The label is the class's catalog index; dataset builders remap labels to
/// their own class ordering. All randomness is drawn in f64 so output is
/// bit-identical across scalar types.
pub fn generate_shape<R: Real>(
    class: ShapeClass,
    n: usize,
    noise: &NoiseParams,
    rng: &mut ChaCha12Rng,
) -> Result<PointCloud<R>, DataError> {
    if n < MIN_POINTS {
        return Err(DataError::TooFewPoints { n, min: MIN_POINTS });
    }
    noise.validate()?;
    let raw = class.sample_cloud(n, rng);
    Ok(PointCloud::new(finish_cloud(raw, noise, rng), class.catalog_index()))
}

/// Scale jitter plus gaussian offsets, shared by synthetic and mesh sources.
fn finish_cloud<R: Real>(
    mut raw: Vec<Vec3<f64>>,
    noise: &NoiseParams,
    rng: &mut ChaCha12Rng,
) -> Vec<Vec3<R>> {
    let scale = if noise.scale_hi > noise.scale_lo {
        rng.random_range(noise.scale_lo..noise.scale_hi)
    } else {
        noise.scale_lo
    };
    for p in &mut raw {
        for coord in p.iter_mut() {
            *coord *= scale;
            if noise.sigma > 0.0 {
                let eps: f64 = rng.sample(rand_distr::StandardNormal);
                *coord += noise.sigma * eps;
            }
        }
    }
    raw.iter().map(|p| [R::from_f64(p[0]), R::from_f64(p[1]), R::from_f64(p[2])]).collect()
}

/// By-name variant for callers holding user input.
pub fn generate_shape_named<R: Real>(
    name: &str,
    n: usize,
    noise: &NoiseParams,
    rng: &mut ChaCha12Rng,
) -> Result<PointCloud<R>, DataError> {
    let class = ShapeClass::parse(name).ok_or_else(|| DataError::UnknownClass(name.into()))?;
    generate_shape(class, n, noise, rng)
}

/// Area-weighted surface sampling of a mesh into a cloud with label 0.
pub fn sample_mesh<R: Real>(
    m: &Mesh,
    n: usize,
    rng: &mut ChaCha12Rng,
) -> Result<PointCloud<R>, DataError> {
    if n == 0 {
        return Err(DataError::TooFewPoints { n: 0, min: 1 });
    }
    if !(m.total_area() > 0.0) {
        return Err(DataError::ZeroAreaMesh);
    }
    let pts = mesh::sample_points(m, n, rng)
        .into_iter()
        .map(|p| [R::from_f64(p[0]), R::from_f64(p[1]), R::from_f64(p[2])])
        .collect();
    Ok(PointCloud::new(pts, 0))
}

/// Centers the cloud and scales it so the largest point norm is exactly 1.
/// Normals, if present, are directions and pass through unchanged.
pub fn normalize<R: Real>(x: &PointCloud<R>) -> Result<PointCloud<R>, DataError> {
    if x.is_empty() {
        return Err(DataError::EmptyCloud);
    }
    let c = x.centroid();
    let centered: Vec<Vec3<R>> = x.points.iter().map(|p| sub3(p, &c)).collect();
    let mut max_norm = R::zero();
    for p in &centered {
        max_norm = max_norm.max(norm3(p));
    }
    if max_norm < R::from_f64(1e-12) {
        return Err(DataError::ZeroScale);
    }
    let inv = R::one() / max_norm;
    let points = centered.iter().map(|p| [p[0] * inv, p[1] * inv, p[2] * inv]).collect();
    let mut out = PointCloud::new(points, x.label);
    out.normals = x.normals.clone();
    Ok(out)
}

/// Where dataset samples come from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    /// Catalog classes by name.
    Synthetic { classes: Vec<String> },
    /// One subdirectory of OFF files per class.
    MeshDir { path: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    /// Samples generated per class (for mesh sources, a cap on files used).
    pub per_class: usize,
    /// Points per cloud.
    pub points: usize,
    pub seed: u64,
    pub noise: NoiseParams,
    /// Fraction of each class assigned to the train split.
    pub train_fraction: f64,
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            classes: shapes::CATALOG[..8].iter().map(|c| c.name().to_string()).collect(),
        }
    }
}

/// Eight classes, 125 samples each (100 train / 25 test at the default
/// split), 256 points: the desk-scale benchmark shape.
impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            source: DataSource::default(),
            per_class: 125,
            points: 256,
            seed: 7,
            noise: NoiseParams::default(),
            train_fraction: 0.8,
        }
    }
}

impl DatasetSpec {
    pub fn synthetic(classes: &[&str], per_class: usize, points: usize, seed: u64) -> Self {
        DatasetSpec {
            source: DataSource::Synthetic { classes: classes.iter().map(|s| s.to_string()).collect() },
            per_class,
            points,
            seed,
            noise: NoiseParams::default(),
            train_fraction: 0.8,
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.per_class < 2 {
            return Err(DataError::TooFewSamples { got: self.per_class, min: 2 });
        }
        if self.points < MIN_POINTS {
            return Err(DataError::TooFewPoints { n: self.points, min: MIN_POINTS });
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(DataError::BadManifest("train_fraction must lie in (0,1)".into()));
        }
        self.noise.validate()
    }
}

/// Materialized dataset; labels index into `classes`.
#[derive(Debug, Clone)]
pub struct Dataset<R: Real> {
    pub classes: Vec<String>,
    pub train: Vec<PointCloud<R>>,
    pub test: Vec<PointCloud<R>>,
}

impl<R: Real> Dataset<R> {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn convert<S: Real>(&self) -> Dataset<S> {
        let conv = |clouds: &[PointCloud<R>]| {
            clouds
                .iter()
                .map(|c| {
                    let pts = c
                        .points
                        .iter()
                        .map(|p| {
                            [
                                S::from_f64(p[0].as_f64()),
                                S::from_f64(p[1].as_f64()),
                                S::from_f64(p[2].as_f64()),
                            ]
                        })
                        .collect();
                    PointCloud::new(pts, c.label)
                })
                .collect()
        };
        Dataset { classes: self.classes.clone(), train: conv(&self.train), test: conv(&self.test) }
    }
}

/// Deterministic per-class 80/20-style split: seeded shuffle, first part
/// trains. Guarantees at least one sample on each side.
fn split_indices(n: usize, fraction: f64, seed: u64, class_index: usize) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeding::stream(seed, "split", &[class_index as u64]);
    order.shuffle(&mut rng);
    let n_train = ((n as f64 * fraction).floor() as usize).clamp(1, n - 1);
    let test = order.split_off(n_train);
    (order, test)
}

/// All samples of one class in generation order, before splitting.
fn class_samples(spec: &DatasetSpec, class_index: usize) -> Result<Vec<PointCloud<f64>>, DataError> {
    match &spec.source {
        DataSource::Synthetic { classes } => {
            let name = &classes[class_index];
            let class =
                ShapeClass::parse(name).ok_or_else(|| DataError::UnknownClass(name.clone()))?;
            (0..spec.per_class)
                .map(|j| {
                    let mut rng =
                        seeding::stream(spec.seed, "shape", &[class_index as u64, j as u64]);
                    let mut cloud = generate_shape::<f64>(class, spec.points, &spec.noise, &mut rng)?;
                    cloud.label = class_index;
                    Ok(cloud)
                })
                .collect()
        }
        DataSource::MeshDir { path } => {
            let class_dirs = sorted_dirs(path)?;
            let dir = &class_dirs[class_index];
            let files = sorted_off_files(dir)?;
            if files.len() < 2 {
                return Err(DataError::TooFewSamples { got: files.len(), min: 2 });
            }
            files
                .iter()
                .take(spec.per_class.max(2))
                .enumerate()
                .map(|(j, f)| {
                    let mesh = load_off(f)?;
                    let mut rng =
                        seeding::stream(spec.seed, "mesh", &[class_index as u64, j as u64]);
                    let raw = mesh::sample_points(&mesh, spec.points, &mut rng);
                    let mut cloud =
                        PointCloud::new(finish_cloud::<f64>(raw, &spec.noise, &mut rng), class_index);
                    cloud.label = class_index;
                    Ok(cloud)
                })
                .collect()
        }
    }
}

fn sorted_dirs(path: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| DataError::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(DataError::BadClassList);
    }
    Ok(dirs)
}

fn sorted_off_files(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| DataError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "off").unwrap_or(false))
        .collect();
    files.sort();
    Ok(files)
}

/// Class names for a source: the listed names, or mesh subdirectory names.
fn source_classes(spec: &DatasetSpec) -> Result<Vec<String>, DataError> {
    let names = match &spec.source {
        DataSource::Synthetic { classes } => classes.clone(),
        DataSource::MeshDir { path } => sorted_dirs(path)?
            .iter()
            .map(|d| d.file_name().unwrap_or_default().to_string_lossy().into_owned())
            .collect(),
    };
    if names.is_empty() {
        return Err(DataError::BadClassList);
    }
    let mut seen = std::collections::BTreeSet::new();
    for n in &names {
        if !seen.insert(n.clone()) {
            return Err(DataError::BadClassList);
        }
    }
    Ok(names)
}

/// Builds the dataset in double precision (convert afterwards if training
/// in f32).
pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset<f64>, DataError> {
    spec.validate()?;
    let classes = source_classes(spec)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for ci in 0..classes.len() {
        let samples = class_samples(spec, ci)?;
        let (tr, te) = split_indices(samples.len(), spec.train_fraction, spec.seed, ci);
        for i in tr {
            train.push(samples[i].clone());
        }
        for i in te {
            test.push(samples[i].clone());
        }
    }
    Ok(Dataset { classes, train, test })
}

const MANIFEST_NAME: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: DatasetSpec,
    classes: Vec<String>,
    /// Samples actually written per class, keyed by class name.
    counts: BTreeMap<String, usize>,
    /// Raw little-endian f64 triples, `points` per sample.
    format: String,
}

fn sample_rel_path(class: &str, index: usize) -> String {
    format!("points/{class}_{index:04}.bin")
}

pub(crate) fn encode_points<R: Real>(cloud: &PointCloud<R>) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(cloud.len() * 24);
    for p in &cloud.points {
        for &coord in p {
            bytes.extend_from_slice(&coord.as_f64().to_le_bytes());
        }
    }
    bytes
}

pub(crate) fn decode_points(bytes: &[u8], expect: usize, path: &Path) -> Result<Vec<Vec3<f64>>, DataError> {
    if bytes.len() != expect * 24 {
        return Err(DataError::BadManifest(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            expect * 24,
            bytes.len()
        )));
    }
    let mut pts = Vec::with_capacity(expect);
    for chunk in bytes.chunks_exact(24) {
        let mut p = [0.0f64; 3];
        for (k, c) in chunk.chunks_exact(8).enumerate() {
            p[k] = f64::from_le_bytes(c.try_into().unwrap());
        }
        pts.push(p);
    }
    Ok(pts)
}

/// Writes a dataset directory: `manifest.json` plus one binary point file
/// per sample, in generation order (splits are re-derived on load). All
/// writes are atomic.
pub fn save_dataset(dir: &Path, spec: &DatasetSpec) -> Result<Dataset<f64>, DataError> {
    spec.validate()?;
    let classes = source_classes(spec)?;
    std::fs::create_dir_all(dir.join("points")).map_err(|e| DataError::io(dir, e))?;
    let mut counts = BTreeMap::new();
    for (ci, name) in classes.iter().enumerate() {
        let samples = class_samples(spec, ci)?;
        counts.insert(name.clone(), samples.len());
        for (j, cloud) in samples.iter().enumerate() {
            let path = dir.join(sample_rel_path(name, j));
            crate::fsutil::write_atomic(&path, &encode_points(cloud))
                .map_err(|e| DataError::io(&path, e))?;
        }
    }
    let manifest = Manifest {
        spec: spec.clone(),
        classes: classes.clone(),
        counts,
        format: "points-f64-le".into(),
    };
    let body = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| DataError::BadManifest(e.to_string()))?;
    let mpath = dir.join(MANIFEST_NAME);
    crate::fsutil::write_atomic(&mpath, &body).map_err(|e| DataError::io(&mpath, e))?;
    build_dataset(spec)
}

/// Reads a dataset directory written by [`save_dataset`]; the split is
/// re-derived from the manifest seed.
pub fn load_dataset(dir: &Path) -> Result<(DatasetSpec, Dataset<f64>), DataError> {
    let mpath = dir.join(MANIFEST_NAME);
    let body = std::fs::read(&mpath).map_err(|e| DataError::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_slice(&body).map_err(|e| DataError::BadManifest(e.to_string()))?;
    if manifest.format != "points-f64-le" {
        return Err(DataError::BadManifest(format!("unknown format '{}'", manifest.format)));
    }
    let spec = manifest.spec;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (ci, name) in manifest.classes.iter().enumerate() {
        let count = *manifest
            .counts
            .get(name)
            .ok_or_else(|| DataError::BadManifest(format!("missing count for class '{name}'")))?;
        let mut samples = Vec::with_capacity(count);
        for j in 0..count {
            let path = dir.join(sample_rel_path(name, j));
            let bytes = std::fs::read(&path).map_err(|e| DataError::io(&path, e))?;
            samples.push(PointCloud::new(decode_points(&bytes, spec.points, &path)?, ci));
        }
        let (tr, te) = split_indices(count, spec.train_fraction, spec.seed, ci);
        for i in tr {
            train.push(samples[i].clone());
        }
        for i in te {
            test.push(samples[i].clone());
        }
    }
    Ok((spec, Dataset { classes: manifest.classes, train, test }))
}

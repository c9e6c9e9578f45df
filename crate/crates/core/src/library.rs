//! The model library: every trained spec, its cached predictions on the
//! test block and on out-of-fold training rows, and precomputed metrics.
//!
//! On disk:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/models/<id>.bin    model state (EATM codec)
//! <dir>/cache/<id>.f32     "EAPC", u32 rows_test, u32 rows_cv, u32 K, then f32 LE rows
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use byteorder::{ByteOrder, LittleEndian as LE};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataio::{self, DataError, Dataset, SchemaHints};
use crate::matrix::Matrix;
use crate::metrics::{self, MetricError, MetricRecord, ModelOutputs};
use crate::models::{self, ModelError, ModelSpec, TrainedModel};

pub const FORMAT_VERSION: u32 = 1;
pub const CACHE_MAGIC: &[u8; 4] = b"EAPC";
const CACHE_HEADER: usize = 16;

#[derive(Debug, Error)]
pub enum LibraryError {
    #[error("no model specs given")]
    NoSpecs,
    #[error("every spec failed to train; first failure: {0}")]
    AllFailed(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest is not valid JSON: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("library format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("dataset fingerprint {found} does not match the library's {expected}")]
    Fingerprint { expected: String, found: String },
    #[error("model file for model {model_id} is corrupt: {reason}")]
    CorruptModel { model_id: usize, reason: String },
    #[error("cache file for model {model_id} is corrupt: {reason}")]
    CorruptCache { model_id: usize, reason: String },
    #[error("library manifest has no data source; pass the dataset explicitly")]
    NoSource,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("invalid cache shapes: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, LibraryError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LibraryError + '_ {
    move |source| LibraryError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Where the dataset came from, so a saved library can be reattached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSource {
    pub path: PathBuf,
    pub label: String,
    pub test_fraction: f64,
    pub folds: usize,
    pub seed: u64,
    #[serde(default)]
    pub hints: SchemaHints,
}

impl DataSource {
    pub fn load(&self) -> std::result::Result<Dataset, DataError> {
        let ds = dataio::load_csv(&self.path, &self.label, &self.hints)?;
        dataio::split_and_fold(ds, self.test_fraction, self.folds, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub model_id: usize,
    pub spec_id: String,
    pub spec: ModelSpec,
    pub train_seed: u64,
    pub fold_seeds: Vec<u64>,
    pub model_sha256: String,
    pub cache_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildFailure {
    pub spec_id: String,
    pub spec: ModelSpec,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dataset_fingerprint: String,
    #[serde(default)]
    pub source: Option<DataSource>,
    pub label: String,
    pub classes: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub n_folds: usize,
    pub seed: u64,
    pub grid: String,
    pub models: Vec<ModelEntry>,
    #[serde(default)]
    pub failures: Vec<BuildFailure>,
    pub metrics: Vec<MetricRecord>,
    pub training_runs: usize,
    pub build_seconds: f64,
}

/// Cached class probabilities of one model. `cv_probs` row `i` belongs to
/// the `i`-th training row (ascending dataset order) and comes from the
/// model trained without that row's fold.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionCache {
    pub model_id: usize,
    pub test_probs: Matrix,
    pub cv_probs: Matrix,
}

#[derive(Debug, Clone)]
pub struct ModelLibrary {
    pub manifest: Manifest,
    /// Empty for cache-only libraries built with [`ModelLibrary::from_caches`].
    pub models: Vec<TrainedModel>,
    pub caches: Vec<PredictionCache>,
    pub model_metrics: Vec<MetricRecord>,
    test_labels: Vec<usize>,
    cv_labels: Vec<usize>,
    test_pred: Vec<Vec<usize>>,
    cv_pred: Vec<Vec<usize>>,
}

impl ModelLibrary {
    pub fn len(&self) -> usize {
        self.caches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.caches.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.classes.len()
    }

    pub fn classes(&self) -> &[String] {
        &self.manifest.classes
    }

    /// True labels of the test block, indexed by instance id.
    pub fn test_labels(&self) -> &[usize] {
        &self.test_labels
    }

    /// True labels of the out-of-fold block.
    pub fn cv_labels(&self) -> &[usize] {
        &self.cv_labels
    }

    pub fn test_pred(&self, model: usize) -> &[usize] {
        &self.test_pred[model]
    }

    pub fn cv_pred(&self, model: usize) -> &[usize] {
        &self.cv_pred[model]
    }

    pub fn n_test(&self) -> usize {
        self.test_labels.len()
    }

    pub fn spec_id(&self, model: usize) -> &str {
        &self.manifest.models[model].spec_id
    }

    pub fn local_accuracy(&self, selection: &[usize]) -> std::result::Result<Vec<f64>, MetricError> {
        metrics::local_accuracy_all_models(self, selection)
    }

    fn assemble(
        manifest: Manifest,
        models: Vec<TrainedModel>,
        caches: Vec<PredictionCache>,
        model_metrics: Vec<MetricRecord>,
        test_labels: Vec<usize>,
        cv_labels: Vec<usize>,
    ) -> Self {
        let test_pred = caches.iter().map(|c| metrics::predicted_labels(&c.test_probs)).collect();
        let cv_pred = caches.iter().map(|c| metrics::predicted_labels(&c.cv_probs)).collect();
        Self {
            manifest,
            models,
            caches,
            model_metrics,
            test_labels,
            cv_labels,
            test_pred,
            cv_pred,
        }
    }

    /// A library made only of prediction caches, for synthetic experiments.
    /// Cache rows are renormalized; metrics are computed as for a build.
    pub fn from_caches(
        classes: Vec<String>,
        test_labels: Vec<usize>,
        cv_labels: Vec<usize>,
        mut caches: Vec<PredictionCache>,
    ) -> Result<Self> {
        let k = classes.len();
        for (i, c) in caches.iter_mut().enumerate() {
            c.model_id = i;
            if c.test_probs.rows() != test_labels.len()
                || c.cv_probs.rows() != cv_labels.len()
                || c.test_probs.cols() != k
                || c.cv_probs.cols() != k
            {
                return Err(LibraryError::Shape(format!("cache {i} does not match the label vectors")));
            }
            renormalize(&mut c.test_probs);
            renormalize(&mut c.cv_probs);
        }
        let records = records_for(&caches, &test_labels, &cv_labels, k)?;
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            dataset_fingerprint: String::new(),
            source: None,
            label: String::new(),
            classes,
            n_train: cv_labels.len(),
            n_test: test_labels.len(),
            n_folds: 0,
            seed: 0,
            grid: "synthetic".into(),
            models: caches
                .iter()
                .map(|c| ModelEntry {
                    model_id: c.model_id,
                    spec_id: format!("synthetic_{}", c.model_id),
                    spec: ModelSpec::NaiveBayes { alpha: 1.0 },
                    train_seed: 0,
                    fold_seeds: vec![],
                    model_sha256: String::new(),
                    cache_sha256: String::new(),
                })
                .collect(),
            failures: vec![],
            metrics: records.clone(),
            training_runs: 0,
            build_seconds: 0.0,
        };
        Ok(Self::assemble(manifest, vec![], caches, records, test_labels, cv_labels))
    }
}

fn records_for(caches: &[PredictionCache], test_labels: &[usize], cv_labels: &[usize], k: usize) -> Result<Vec<MetricRecord>> {
    let test_pred: Vec<Vec<usize>> = caches.iter().map(|c| metrics::predicted_labels(&c.test_probs)).collect();
    let cv_pred: Vec<Vec<usize>> = caches.iter().map(|c| metrics::predicted_labels(&c.cv_probs)).collect();
    let outputs: Vec<ModelOutputs<'_>> = caches
        .iter()
        .enumerate()
        .map(|(i, c)| ModelOutputs {
            test_probs: &c.test_probs,
            test_pred: &test_pred[i],
            cv_probs: &c.cv_probs,
            cv_pred: &cv_pred[i],
        })
        .collect();
    Ok(metrics::compute_records(&outputs, test_labels, cv_labels, k)?)
}

/// Rounds every entry through `f32`, the on-disk precision.
fn quantize(m: &mut Matrix) {
    m.as_mut_slice().iter_mut().for_each(|x| *x = *x as f32 as f64);
}

/// Rescales rows to sum to one in `f64`.
fn renormalize(m: &mut Matrix) {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|x| *x /= s);
        }
    }
}

/// Training rows used by the model that predicts fold `fold`.
pub fn fold_training_rows(ds: &Dataset, fold: usize) -> std::result::Result<Vec<usize>, DataError> {
    let p = ds.partition()?;
    Ok((0..ds.n_rows()).filter(|&r| matches!(p.folds[r], Some(f) if f != fold)).collect())
}

/// Training rows held out as fold `fold`.
pub fn fold_holdout_rows(ds: &Dataset, fold: usize) -> std::result::Result<Vec<usize>, DataError> {
    let p = ds.partition()?;
    Ok((0..ds.n_rows()).filter(|&r| p.folds[r] == Some(fold)).collect())
}

/// Seed for the model trained without fold `fold`.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_add((fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Reported once per spec as it finishes.
#[derive(Debug, Clone)]
pub struct BuildEvent {
    pub index: usize,
    pub total: usize,
    pub spec_id: String,
    pub error: Option<String>,
    pub seconds: f64,
}

#[derive(Default)]
pub struct BuildOptions<'a> {
    pub grid: String,
    pub source: Option<DataSource>,
    pub progress: Option<&'a (dyn Fn(&BuildEvent) + Sync)>,
}

pub fn build_library(ds: &Dataset, specs: &[ModelSpec], seed: u64) -> Result<ModelLibrary> {
    build_library_with(ds, specs, seed, &BuildOptions::default())
}

struct Built {
    model: TrainedModel,
    fold_seeds: Vec<u64>,
    test_probs: Matrix,
    cv_probs: Matrix,
}

fn build_one(
    ds: &Dataset,
    view: &dataio::EncodedView,
    spec: &ModelSpec,
    seed: u64,
    train_rows: &[usize],
    test_rows: &[usize],
    folds: &[(Vec<usize>, Vec<usize>)],
    cv_pos: &[usize],
) -> std::result::Result<Built, ModelError> {
    let k = ds.n_classes();
    let mut cv_probs = Matrix::zeros(train_rows.len(), k);
    let mut fold_seeds = Vec::with_capacity(folds.len());
    for (f, (fit_rows, hold_rows)) in folds.iter().enumerate() {
        let s = fold_seed(seed, f);
        fold_seeds.push(s);
        let m = models::train(spec, view, fit_rows, &ds.labels, k, s)?;
        let p = m.predict_proba(view, hold_rows)?;
        for (i, &r) in hold_rows.iter().enumerate() {
            cv_probs.row_mut(cv_pos[r]).copy_from_slice(p.row(i));
        }
    }
    let model = models::train(spec, view, train_rows, &ds.labels, k, seed)?;
    let test_probs = model.predict_proba(view, test_rows)?;
    Ok(Built {
        model,
        fold_seeds,
        test_probs,
        cv_probs,
    })
}

/// Trains `F` fold models and one full model per spec, caches their
/// predictions and computes metrics. Specs that fail are recorded in the
/// manifest; at least one must succeed.
pub fn build_library_with(ds: &Dataset, specs: &[ModelSpec], seed: u64, opts: &BuildOptions<'_>) -> Result<ModelLibrary> {
    if specs.is_empty() {
        return Err(LibraryError::NoSpecs);
    }
    let start = Instant::now();
    let view = dataio::encode(ds)?;
    let partition = ds.partition()?;
    let train_rows = ds.train_rows();
    let test_rows = ds.test_rows();
    let mut cv_pos = vec![usize::MAX; ds.n_rows()];
    for (i, &r) in train_rows.iter().enumerate() {
        cv_pos[r] = i;
    }
    let folds: Vec<(Vec<usize>, Vec<usize>)> = (0..partition.n_folds)
        .map(|f| Ok((fold_training_rows(ds, f)?, fold_holdout_rows(ds, f)?)))
        .collect::<std::result::Result<_, DataError>>()?;

    let total = specs.len();
    let results: Vec<std::result::Result<Built, ModelError>> = specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let t = Instant::now();
            let r = build_one(ds, &view, spec, seed, &train_rows, &test_rows, &folds, &cv_pos);
            if let Some(cb) = opts.progress {
                cb(&BuildEvent {
                    index: i,
                    total,
                    spec_id: spec.spec_id(),
                    error: r.as_ref().err().map(ToString::to_string),
                    seconds: t.elapsed().as_secs_f64(),
                });
            }
            r
        })
        .collect();

    let mut models_out = Vec::new();
    let mut caches = Vec::new();
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for (spec, r) in specs.iter().zip(results) {
        match r {
            Ok(mut b) => {
                let id = caches.len();
                for m in [&mut b.test_probs, &mut b.cv_probs] {
                    quantize(m);
                    renormalize(m);
                }
                entries.push(ModelEntry {
                    model_id: id,
                    spec_id: spec.spec_id(),
                    spec: spec.clone(),
                    train_seed: seed,
                    fold_seeds: b.fold_seeds,
                    model_sha256: String::new(),
                    cache_sha256: String::new(),
                });
                caches.push(PredictionCache {
                    model_id: id,
                    test_probs: b.test_probs,
                    cv_probs: b.cv_probs,
                });
                models_out.push(b.model);
            }
            Err(e) => {
                log::warn!("spec {} failed: {e}", spec.spec_id());
                failures.push(BuildFailure {
                    spec_id: spec.spec_id(),
                    spec: spec.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    if caches.is_empty() {
        return Err(LibraryError::AllFailed(failures[0].error.clone()));
    }

    let test_labels: Vec<usize> = test_rows.iter().map(|&r| ds.labels[r]).collect();
    let cv_labels: Vec<usize> = train_rows.iter().map(|&r| ds.labels[r]).collect();
    let records = records_for(&caches, &test_labels, &cv_labels, ds.n_classes())?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dataset_fingerprint: ds.fingerprint(),
        source: opts.source.clone(),
        label: ds.label_name.clone(),
        classes: ds.classes.clone(),
        n_train: train_rows.len(),
        n_test: test_rows.len(),
        n_folds: partition.n_folds,
        seed,
        grid: opts.grid.clone(),
        models: entries,
        failures,
        metrics: records.clone(),
        training_runs: specs.len() * (partition.n_folds + 1),
        build_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(ModelLibrary::assemble(
        manifest,
        models_out,
        caches,
        records,
        test_labels,
        cv_labels,
    ))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn cache_bytes(c: &PredictionCache) -> Vec<u8> {
    let k = c.test_probs.cols();
    let n = c.test_probs.rows() + c.cv_probs.rows();
    let mut out = vec![0u8; CACHE_HEADER + 4 * n * k];
    out[..4].copy_from_slice(CACHE_MAGIC);
    LE::write_u32(&mut out[4..8], c.test_probs.rows() as u32);
    LE::write_u32(&mut out[8..12], c.cv_probs.rows() as u32);
    LE::write_u32(&mut out[12..16], k as u32);
    let values = c.test_probs.as_slice().iter().chain(c.cv_probs.as_slice());
    for (chunk, &v) in out[CACHE_HEADER..].chunks_exact_mut(4).zip(values) {
        LE::write_f32(chunk, v as f32);
    }
    out
}

fn parse_cache(model_id: usize, bytes: &[u8], n_test: usize, n_cv: usize, k: usize) -> Result<PredictionCache> {
    let corrupt = |reason: String| LibraryError::CorruptCache { model_id, reason };
    if bytes.len() < CACHE_HEADER || &bytes[..4] != CACHE_MAGIC {
        return Err(corrupt("bad header".into()));
    }
    let (rt, rc, kk) = (
        LE::read_u32(&bytes[4..8]) as usize,
        LE::read_u32(&bytes[8..12]) as usize,
        LE::read_u32(&bytes[12..16]) as usize,
    );
    if (rt, rc, kk) != (n_test, n_cv, k) {
        return Err(corrupt(format!("shape {rt}+{rc}x{kk}, expected {n_test}+{n_cv}x{k}")));
    }
    let expected = CACHE_HEADER + 4 * (rt + rc) * k;
    if bytes.len() != expected {
        return Err(corrupt(format!("{} bytes, expected {expected}", bytes.len())));
    }
    let mut values: Vec<f64> = bytes[CACHE_HEADER..].chunks_exact(4).map(|c| LE::read_f32(c) as f64).collect();
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(corrupt("non-finite or negative probability".into()));
    }
    let cv = values.split_off(rt * k);
    let mut test_probs = Matrix::from_vec(rt, k, values);
    let mut cv_probs = Matrix::from_vec(rc, k, cv);
    renormalize(&mut test_probs);
    renormalize(&mut cv_probs);
    Ok(PredictionCache {
        model_id,
        test_probs,
        cv_probs,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

/// Writes the manifest, model states and caches under `dir`.
pub fn save_library(lib: &ModelLibrary, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for sub in [dir.to_path_buf(), dir.join("models"), dir.join("cache")] {
        fs::create_dir_all(&sub).map_err(io_err(&sub))?;
    }
    let mut manifest = lib.manifest.clone();
    for (id, entry) in manifest.models.iter_mut().enumerate() {
        if let Some(model) = lib.models.get(id) {
            let bytes = model.to_bytes();
            entry.model_sha256 = sha256_hex(&bytes);
            write_file(&dir.join("models").join(format!("{id}.bin")), &bytes)?;
        }
        let bytes = cache_bytes(&lib.caches[id]);
        entry.cache_sha256 = sha256_hex(&bytes);
        write_file(&dir.join("cache").join(format!("{id}.f32")), &bytes)?;
    }
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_file(&dir.join("manifest.json"), &json)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let bytes = read_file(&dir.as_ref().join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(LibraryError::Version {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(manifest)
}

/// Loads a saved library and checks it belongs to `ds`.
pub fn load_library(dir: impl AsRef<Path>, ds: &Dataset) -> Result<ModelLibrary> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let found = ds.fingerprint();
    if found != manifest.dataset_fingerprint {
        return Err(LibraryError::Fingerprint {
            expected: manifest.dataset_fingerprint,
            found,
        });
    }
    let k = manifest.classes.len();
    let (n_test, n_cv) = (manifest.n_test, manifest.n_train);
    let loaded: Vec<(TrainedModel, PredictionCache)> = manifest
        .models
        .par_iter()
        .enumerate()
        .map(|(id, entry)| {
            let model_bytes = read_file(&dir.join("models").join(format!("{id}.bin")))?;
            if sha256_hex(&model_bytes) != entry.model_sha256 {
                return Err(LibraryError::CorruptModel {
                    model_id: id,
                    reason: "checksum mismatch".into(),
                });
            }
            let model = TrainedModel::from_bytes(&model_bytes).map_err(|e| LibraryError::CorruptModel {
                model_id: id,
                reason: e.to_string(),
            })?;
            let cache_bytes = read_file(&dir.join("cache").join(format!("{id}.f32")))?;
            let cache = parse_cache(id, &cache_bytes, n_test, n_cv, k)?;
            if sha256_hex(&cache_bytes) != entry.cache_sha256 {
                return Err(LibraryError::CorruptCache {
                    model_id: id,
                    reason: "checksum mismatch".into(),
                });
            }
            Ok((model, cache))
        })
        .collect::<Result<_>>()?;
    let (models_out, caches): (Vec<_>, Vec<_>) = loaded.into_iter().unzip();
    let test_labels: Vec<usize> = ds.test_rows().iter().map(|&r| ds.labels[r]).collect();
    let cv_labels: Vec<usize> = ds.train_rows().iter().map(|&r| ds.labels[r]).collect();
    let records = manifest.metrics.clone();
    Ok(ModelLibrary::assemble(
        manifest,
        models_out,
        caches,
        records,
        test_labels,
        cv_labels,
    ))
}

/// Loads the library in `dir` together with its dataset, read from
/// `data` when given and otherwise from the manifest's recorded source.
pub fn open_library(dir: impl AsRef<Path>, data: Option<&Path>) -> Result<(Dataset, ModelLibrary)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut source = manifest.source.ok_or(LibraryError::NoSource)?;
    if let Some(p) = data {
        source.path = p.to_path_buf();
    }
    let ds = source.load()?;
    let lib = load_library(dir, &ds)?;
    Ok((ds, lib))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{load_csv_reader, split_and_fold};
    use crate::models::{default_grid, Weighting};

    pub(crate) fn toy_dataset(n: usize, seed: u64) -> Dataset {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut csv = String::from("x1,x2,color,y\n");
        for _ in 0..n {
            let x1: f64 = rng.random_range(-2.0..2.0);
            let x2: f64 = rng.random_range(-2.0..2.0);
            let color = ["red", "green", "blue"][rng.random_range(0..3)];
            let noise: f64 = rng.random_range(-0.7..0.7);
            let y = if x1 + 0.5 * x2 + noise + if color == "red" { 0.4 } else { 0.0 } > 0.0 {
                "pos"
            } else {
                "neg"
            };
            csv.push_str(&format!("{x1:.4},{x2:.4},{color},{y}\n"));
        }
        let ds = load_csv_reader(csv.as_bytes(), "y", &SchemaHints::default()).unwrap();
        split_and_fold(ds, 0.25, 5, 3).unwrap()
    }

    fn small_specs() -> Vec<ModelSpec> {
        vec![
            ModelSpec::Knn {
                k: 5,
                weighting: Weighting::Uniform,
            },
            ModelSpec::DecisionTree {
                max_depth: Some(3),
                min_leaf: 2,
            },
            ModelSpec::NaiveBayes { alpha: 1.0 },
        ]
    }

    #[test]
    fn build_fills_every_cache() {
        let ds = toy_dataset(200, 1);
        let lib = build_library(&ds, &small_specs(), 7).unwrap();
        assert_eq!(lib.len(), 3);
        assert_eq!(lib.models.len(), 3);
        assert_eq!(lib.model_metrics.len(), 3);
        assert_eq!(lib.manifest.training_runs, 3 * 6);
        for c in &lib.caches {
            assert_eq!(c.test_probs.rows(), 50);
            assert_eq!(c.cv_probs.rows(), 150);
            for row in c.test_probs.iter_rows().chain(c.cv_probs.iter_rows()) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cached_accuracy_matches_argmax() {
        let ds = toy_dataset(200, 2);
        let lib = build_library(&ds, &small_specs(), 7).unwrap();
        for (m, rec) in lib.model_metrics.iter().enumerate() {
            let acc = metrics::accuracy(lib.test_pred(m), lib.test_labels(), None).unwrap();
            assert_eq!(acc, rec.accuracy_test);
            assert!(rec.accuracy_test > 0.6, "{}", rec.accuracy_test);
        }
    }

    #[test]
    fn out_of_fold_bookkeeping() {
        let ds = toy_dataset(120, 3);
        let p = ds.partition().unwrap();
        for f in 0..p.n_folds {
            let fit = fold_training_rows(&ds, f).unwrap();
            let hold = fold_holdout_rows(&ds, f).unwrap();
            assert!(fit.iter().all(|r| p.folds[*r] != Some(f)));
            assert!(fit.iter().all(|r| p.folds[*r].is_some()));
            assert!(hold.iter().all(|r| p.folds[*r] == Some(f)));
            assert_eq!(fit.len() + hold.len(), ds.train_rows().len());
        }
    }

    #[test]
    fn cv_prediction_comes_from_fold_model() {
        // retrain the fold model by hand and compare one held-out row
        let ds = toy_dataset(150, 4);
        let spec = ModelSpec::Knn {
            k: 3,
            weighting: Weighting::Distance,
        };
        let lib = build_library(&ds, std::slice::from_ref(&spec), 5).unwrap();
        let view = dataio::encode(&ds).unwrap();
        let train_rows = ds.train_rows();
        let hold = fold_holdout_rows(&ds, 2).unwrap();
        let m = models::train(&spec, &view, &fold_training_rows(&ds, 2).unwrap(), &ds.labels, 2, fold_seed(5, 2)).unwrap();
        let p = m.predict_proba(&view, &hold[..1]).unwrap();
        let pos = train_rows.iter().position(|&r| r == hold[0]).unwrap();
        for (a, b) in p.row(0).iter().zip(lib.caches[0].cv_probs.row(pos)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn single_spec_library() {
        let ds = toy_dataset(80, 5);
        let lib = build_library(
            &ds,
            &[ModelSpec::Knn {
                k: 1,
                weighting: Weighting::Uniform,
            }],
            1,
        )
        .unwrap();
        assert_eq!(lib.len(), 1);
        assert_eq!(lib.model_metrics[0].diversity_coord, 0.0);
    }

    #[test]
    fn failures_are_recorded() {
        let ds = toy_dataset(80, 6);
        let specs = vec![
            ModelSpec::Knn {
                k: 0,
                weighting: Weighting::Uniform,
            },
            ModelSpec::NaiveBayes { alpha: 1.0 },
        ];
        let lib = build_library(&ds, &specs, 1).unwrap();
        assert_eq!(lib.len(), 1);
        assert_eq!(lib.manifest.failures.len(), 1);
        assert_eq!(lib.manifest.models[0].spec_id, specs[1].spec_id());
        let all_bad = build_library(&ds, &specs[..1], 1);
        assert!(matches!(all_bad, Err(LibraryError::AllFailed(_))));
        assert!(matches!(build_library(&ds, &[], 1), Err(LibraryError::NoSpecs)));
    }

    #[test]
    fn build_is_deterministic() {
        let ds = toy_dataset(120, 7);
        let a = build_library(&ds, &default_grid()[..4], 9).unwrap();
        let b = build_library(&ds, &default_grid()[..4], 9).unwrap();
        assert_eq!(a.caches, b.caches);
        assert_eq!(a.model_metrics, b.model_metrics);
    }

    #[test]
    fn save_load_round_trip() {
        let ds = toy_dataset(160, 8);
        let lib = build_library(&ds, &small_specs(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_library(&lib, dir.path()).unwrap();
        let back = load_library(dir.path(), &ds).unwrap();
        assert_eq!(back.caches, lib.caches);
        assert_eq!(back.model_metrics, lib.model_metrics);
        assert_eq!(back.models, lib.models);
        for m in 0..lib.len() {
            assert_eq!(back.test_pred(m), lib.test_pred(m));
        }
    }

    #[test]
    fn load_rejects_other_split() {
        let ds = toy_dataset(160, 8);
        let lib = build_library(&ds, &small_specs()[..1], 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_library(&lib, dir.path()).unwrap();
        let other = toy_dataset(160, 9);
        assert!(matches!(load_library(dir.path(), &other), Err(LibraryError::Fingerprint { .. })));
    }

    #[test]
    fn corrupt_cache_names_model() {
        let ds = toy_dataset(160, 8);
        let lib = build_library(&ds, &small_specs(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_library(&lib, dir.path()).unwrap();
        let path = dir.path().join("cache/1.f32");
        let mut bytes = fs::read(&path).unwrap();
        bytes[100] ^= 0x5a;
        fs::write(&path, &bytes).unwrap();
        match load_library(dir.path(), &ds) {
            Err(LibraryError::CorruptCache { model_id, .. }) => assert_eq!(model_id, 1),
            other => panic!("{other:?}"),
        }
        fs::write(&path, &bytes[..60]).unwrap();
        match load_library(dir.path(), &ds) {
            Err(LibraryError::CorruptCache { model_id, .. }) => assert_eq!(model_id, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let ds = toy_dataset(100, 8);
        let lib = build_library(&ds, &small_specs()[..1], 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_library(&lib, dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        v["format_version"] = 99.into();
        fs::write(&path, serde_json::to_vec(&v).unwrap()).unwrap();
        assert!(matches!(
            load_library(dir.path(), &ds),
            Err(LibraryError::Version { found: 99, .. })
        ));
    }

    #[test]
    fn cache_header_layout() {
        let c = PredictionCache {
            model_id: 0,
            test_probs: Matrix::from_rows(&[[0.25, 0.75]]),
            cv_probs: Matrix::from_rows(&[[0.5, 0.5], [1.0, 0.0]]),
        };
        let b = cache_bytes(&c);
        assert_eq!(&b[..4], b"EAPC");
        assert_eq!(LE::read_u32(&b[4..8]), 1);
        assert_eq!(LE::read_u32(&b[8..12]), 2);
        assert_eq!(LE::read_u32(&b[12..16]), 2);
        assert_eq!(b.len(), 16 + 6 * 4);
        assert_eq!(LE::read_f32(&b[16..20]), 0.25);
        let back = parse_cache(0, &b, 1, 2, 2).unwrap();
        assert_eq!(back, c);
    }
}

//! Data-space and model-space coordinates: the attribute-binned
//! probability layout, PCA / MDS / t-SNE projections, density grids.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::dataio::{AttributeKind, Column, Dataset};
use crate::ensemble::EnsembleState;
use crate::library::ModelLibrary;
use crate::linalg::{fix_sign, top_eigenpairs};
use crate::matrix::{squared_distance, Matrix};
use crate::metrics::{MetricError, MetricName};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayoutError {
    #[error("unknown attribute {0:?}")]
    UnknownAttribute(String),
    #[error("unknown layout mode {0:?} (use attribute:<name>, pca, mds or tsne)")]
    UnknownMode(String),
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("distance matrix is not symmetric at ({0}, {1})")]
    NotSymmetric(usize, usize),
    #[error("distance matrix must be square with a zero diagonal")]
    BadDistances,
    #[error("perplexity {perplexity} out of range for {n} points (need 1 < perplexity < n - 1)")]
    Perplexity { perplexity: f64, n: usize },
    #[error("{n} points exceed the exact t-SNE cap of {cap}")]
    TooManyPoints { n: usize, cap: usize },
    #[error("grid needs at least one column and one row")]
    EmptyGrid,
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, LayoutError>;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum LayoutMode {
    Attribute(String),
    Pca,
    Mds,
    Tsne,
}

impl FromStr for LayoutMode {
    type Err = LayoutError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(Self::Pca),
            "mds" => Ok(Self::Mds),
            "tsne" => Ok(Self::Tsne),
            _ => match s.strip_prefix("attribute:") {
                Some(a) if !a.is_empty() => Ok(Self::Attribute(a.to_string())),
                _ => Err(LayoutError::UnknownMode(s.to_string())),
            },
        }
    }
}

impl fmt::Display for LayoutMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Attribute(a) => write!(f, "attribute:{a}"),
            Self::Pca => f.write_str("pca"),
            Self::Mds => f.write_str("mds"),
            Self::Tsne => f.write_str("tsne"),
        }
    }
}

impl Serialize for LayoutMode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayoutMode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutPoint {
    pub instance_id: usize,
    pub x: f64,
    pub y: f64,
    pub predicted_class: usize,
    pub probability: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutFrame {
    pub mode: LayoutMode,
    pub points: Vec<LayoutPoint>,
    pub x_extent: [f64; 2],
    pub y_extent: [f64; 2],
    /// How the horizontal axis was derived (attribute mode), or the
    /// projection's diagnostics.
    pub notes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Horizontal position in the predicted class's bin: left edge is maximal
/// uncertainty (`p = 1/K`), certainty approaches `c + 1` from below.
pub fn bin_x(class: usize, p: f64, k: usize) -> f64 {
    let k = k as f64;
    let c = class as f64;
    let offset = ((p - 1.0 / k) / (1.0 - 1.0 / k)).max(0.0);
    (c + offset).min((c + 1.0).next_down())
}

/// Vertical position of `row` for attribute `attr`: training min/max
/// scaling for numerics (clamped to [0, 1]), `index / (n - 1)` for
/// categories.
pub fn attribute_y(ds: &Dataset, attr: usize, row: usize) -> f64 {
    match (&ds.attributes[attr].kind, &ds.columns[attr]) {
        (AttributeKind::Numeric { min, max }, Column::Numeric(v)) => {
            if max > min {
                ((v[row] - min) / (max - min)).clamp(0.0, 1.0)
            } else {
                0.5
            }
        }
        (AttributeKind::Categorical { categories }, Column::Categorical(v)) => {
            if categories.len() > 1 {
                v[row] as f64 / (categories.len() - 1) as f64
            } else {
                0.5
            }
        }
        _ => unreachable!("attribute kind and column disagree"),
    }
}

pub fn attribute_layout(ens: &EnsembleState, ds: &Dataset, attr: &str) -> Result<LayoutFrame> {
    let a = ds
        .attribute_index(attr)
        .ok_or_else(|| LayoutError::UnknownAttribute(attr.to_string()))?;
    let k = ds.n_classes();
    let test_rows = ds.test_rows();
    let points = test_rows
        .iter()
        .enumerate()
        .map(|(id, &row)| {
            let c = ens.pred[id];
            let p = ens.confidence(id);
            LayoutPoint {
                instance_id: id,
                x: bin_x(c, p, k),
                y: attribute_y(ds, a, row),
                predicted_class: c,
                probability: p,
                correct: ens.correct[id],
            }
        })
        .collect();
    Ok(LayoutFrame {
        mode: LayoutMode::Attribute(attr.to_string()),
        points,
        x_extent: [0.0, k as f64],
        y_extent: [0.0, 1.0],
        notes: vec!["x = class + (p - 1/K) / (1 - 1/K) of the predicted class".into()],
        seed: None,
    })
}

/// Two-column coordinates with diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub coords: Matrix,
    /// Eigenvalues (PCA, MDS) of the two components.
    pub eigenvalues: [f64; 2],
    pub flags: Vec<String>,
}

fn extent(values: impl Iterator<Item = f64>) -> [f64; 2] {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        [0.0, 1.0]
    } else if hi > lo {
        [lo, hi]
    } else {
        [lo - 0.5, hi + 0.5]
    }
}

/// A frame placing each test instance at its projected coordinates.
pub fn projection_frame(ens: &EnsembleState, proj: &Projection, mode: LayoutMode, seed: Option<u64>) -> LayoutFrame {
    let ids: Vec<usize> = (0..proj.coords.rows()).collect();
    projection_frame_for(ens, proj, &ids, mode, seed)
}

/// As [`projection_frame`] for a projection of a subset of the test rows:
/// row `r` of the projection is instance `ids[r]`.
pub fn projection_frame_for(ens: &EnsembleState, proj: &Projection, ids: &[usize], mode: LayoutMode, seed: Option<u64>) -> LayoutFrame {
    assert_eq!(ids.len(), proj.coords.rows(), "one id per projected row");
    let points: Vec<LayoutPoint> = ids
        .iter()
        .enumerate()
        .map(|(r, &id)| LayoutPoint {
            instance_id: id,
            x: proj.coords.get(r, 0),
            y: proj.coords.get(r, 1),
            predicted_class: ens.pred[id],
            probability: ens.confidence(id),
            correct: ens.correct[id],
        })
        .collect();
    LayoutFrame {
        mode,
        x_extent: extent(points.iter().map(|p| p.x)),
        y_extent: extent(points.iter().map(|p| p.y)),
        points,
        notes: proj.flags.clone(),
        seed,
    }
}

/// Projection onto the top two principal directions of the centred data.
/// Each loading vector is oriented to have a non-negative sum.
pub fn pca_2d(x: &Matrix) -> Result<Projection> {
    let (n, d) = (x.rows(), x.cols());
    if n < 2 {
        return Err(LayoutError::TooFewPoints { need: 2, got: n });
    }
    let mut xc = x.clone();
    for j in 0..d {
        let mean = (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64;
        for i in 0..n {
            xc.set(i, j, x.get(i, j) - mean);
        }
    }
    let total: f64 = xc.as_slice().iter().map(|v| v * v).sum::<f64>() / n as f64;
    if total < 1e-12 {
        return Ok(Projection {
            coords: Matrix::zeros(n, 2),
            eigenvalues: [0.0, 0.0],
            flags: vec!["zero_variance".into()],
        });
    }
    let mut cov = Matrix::zeros(d, d);
    for row in xc.iter_rows() {
        for a in 0..d {
            if row[a] == 0.0 {
                continue;
            }
            let ra = row[a];
            let out = cov.row_mut(a);
            for b in a..d {
                out[b] += ra * row[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov.get(a, b) / n as f64;
            cov.set(a, b, v);
            cov.set(b, a, v);
        }
    }
    let mut pairs = top_eigenpairs(&cov, 2);
    let mut coords = Matrix::zeros(n, 2);
    let mut eigenvalues = [0.0; 2];
    for (c, pair) in pairs.iter_mut().enumerate() {
        fix_sign(&mut pair.vector);
        eigenvalues[c] = pair.value.max(0.0);
        for i in 0..n {
            let s: f64 = xc.row(i).iter().zip(&pair.vector).map(|(a, b)| a * b).sum();
            coords.set(i, c, s);
        }
    }
    Ok(Projection {
        coords,
        eigenvalues,
        flags: vec![],
    })
}

/// Pairwise Euclidean distances between rows.
pub fn euclidean_distances(x: &Matrix) -> Matrix {
    let n = x.rows();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| squared_distance(x.row(i), x.row(j)).sqrt()).collect())
        .collect();
    Matrix::from_rows(&rows)
}

/// Classical (Torgerson) scaling: double-centre `-D^2 / 2` and scale the
/// top two eigenvectors by the square roots of their eigenvalues.
/// Negative eigenvalues are clamped to zero and flagged.
pub fn mds_2d(dist: &Matrix) -> Result<Projection> {
    let n = dist.rows();
    if dist.cols() != n {
        return Err(LayoutError::BadDistances);
    }
    let scale = dist.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for i in 0..n {
        if dist.get(i, i).abs() > 1e-12 * scale {
            return Err(LayoutError::BadDistances);
        }
        for j in i + 1..n {
            if (dist.get(i, j) - dist.get(j, i)).abs() > 1e-9 * scale {
                return Err(LayoutError::NotSymmetric(i, j));
            }
        }
    }
    let mut b = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            b.set(i, j, -0.5 * dist.get(i, j).powi(2));
        }
    }
    let row_means: Vec<f64> = b.iter_rows().map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            // B is symmetric, so column means equal row means
            b.set(i, j, b.get(i, j) - row_means[i] - row_means[j] + grand);
        }
    }
    // largest-magnitude pairs may include negative ones for non-Euclidean
    // input; keep the two algebraically largest
    let mut pairs = top_eigenpairs(&b, 4);
    pairs.truncate(2);
    let mut flags = Vec::new();
    let mut coords = Matrix::zeros(n, 2);
    let mut eigenvalues = [0.0; 2];
    for (c, pair) in pairs.iter_mut().enumerate() {
        if pair.value < 0.0 {
            flags.push(format!("negative_eigenvalue_clamped:{}", pair.value));
        }
        let lambda = pair.value.max(0.0);
        eigenvalues[c] = lambda;
        fix_sign(&mut pair.vector);
        for i in 0..n {
            coords.set(i, c, pair.vector[i] * lambda.sqrt());
        }
    }
    Ok(Projection {
        coords,
        eigenvalues,
        flags,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iters: usize,
    pub seed: u64,
    pub max_points: usize,
}

impl Default for TsneParams {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iters: 1000,
            seed: 0,
            max_points: 5000,
        }
    }
}

pub const EXAGGERATION: f64 = 12.0;
pub const EXAGGERATION_ITERS: usize = 250;
pub const LEARNING_RATE: f64 = 200.0;
const PERPLEXITY_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct TsneResult {
    pub coords: Matrix,
    pub kl: f64,
    /// KL divergence (without exaggeration) when exaggeration ended.
    pub kl_after_exaggeration: f64,
}

/// Conditional probabilities `p_{j|i}` for one row, bandwidth chosen by
/// bisection so the entropy matches `ln(perplexity)`.
fn conditional_row(d2: &[f64], i: usize, target: f64) -> Vec<f64> {
    let n = d2.len();
    let mut beta = 1.0;
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let mut p = vec![0.0; n];
    for _ in 0..200 {
        let min_d = d2
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, d)| *d)
            .fold(f64::INFINITY, f64::min);
        let mut sum = 0.0;
        for j in 0..n {
            p[j] = if j == i { 0.0 } else { (-(d2[j] - min_d) * beta).exp() };
            sum += p[j];
        }
        let mut h = 0.0;
        for j in 0..n {
            if j != i {
                p[j] /= sum;
                h += beta * (d2[j] - min_d) * p[j];
            }
        }
        h += sum.ln();
        let diff = h - target;
        if diff.abs() < PERPLEXITY_TOL {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
    p
}

fn joint_probabilities(x: &Matrix, perplexity: f64) -> Matrix {
    let n = x.rows();
    let target = perplexity.ln();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let d2: Vec<f64> = (0..n).map(|j| squared_distance(x.row(i), x.row(j))).collect();
            conditional_row(&d2, i, target)
        })
        .collect();
    let mut p = Matrix::zeros(n, n);
    let denom = 2.0 * n as f64;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p.set(i, j, ((rows[i][j] + rows[j][i]) / denom).max(1e-12));
            }
        }
    }
    p
}

/// Student-t kernel rows and their total.
fn kernel(y: &Matrix) -> (Matrix, f64) {
    let n = y.rows();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        1.0 / (1.0 + squared_distance(y.row(i), y.row(j)))
                    }
                })
                .collect()
        })
        .collect();
    let num = Matrix::from_rows(&rows);
    let total = num.as_slice().iter().sum();
    (num, total)
}

fn kl_divergence(p: &Matrix, y: &Matrix) -> f64 {
    let (num, total) = kernel(y);
    let n = p.rows();
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let pij = p.get(i, j);
                let qij = (num.get(i, j) / total).max(1e-12);
                kl += pij * (pij / qij).ln();
            }
        }
    }
    kl
}

/// Exact t-SNE with early exaggeration, momentum and per-coordinate gains.
pub fn tsne_2d(x: &Matrix, params: &TsneParams) -> Result<TsneResult> {
    let n = x.rows();
    if n > params.max_points {
        return Err(LayoutError::TooManyPoints { n, cap: params.max_points });
    }
    if n < 3 {
        return Err(LayoutError::TooFewPoints { need: 3, got: n });
    }
    if !(params.perplexity > 1.0 && params.perplexity < (n - 1) as f64) {
        return Err(LayoutError::Perplexity {
            perplexity: params.perplexity,
            n,
        });
    }
    let p = joint_probabilities(x, params.perplexity);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y = Matrix::from_vec(n, 2, (0..2 * n).map(|_| normal.sample(&mut rng)).collect());
    let mut update = Matrix::zeros(n, 2);
    let mut gains = Matrix::from_vec(n, 2, vec![1.0; 2 * n]);
    let mut kl_after_exaggeration = f64::NAN;

    for it in 0..params.iters {
        let exaggeration = if it < EXAGGERATION_ITERS { EXAGGERATION } else { 1.0 };
        let momentum = if it < EXAGGERATION_ITERS { 0.5 } else { 0.8 };
        let (num, total) = kernel(&y);
        let grads: Vec<[f64; 2]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = [0.0; 2];
                let yi = y.row(i);
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let nij = num.get(i, j);
                    let m = (exaggeration * p.get(i, j) - nij / total) * nij;
                    let yj = y.row(j);
                    g[0] += m * (yi[0] - yj[0]);
                    g[1] += m * (yi[1] - yj[1]);
                }
                [4.0 * g[0], 4.0 * g[1]]
            })
            .collect();
        for (i, g) in grads.iter().enumerate() {
            for d in 0..2 {
                let u = update.get(i, d);
                let gain = if (g[d] > 0.0) != (u > 0.0) {
                    gains.get(i, d) + 0.2
                } else {
                    gains.get(i, d) * 0.8
                }
                .max(0.01);
                gains.set(i, d, gain);
                let nu = momentum * u - LEARNING_RATE * gain * g[d];
                update.set(i, d, nu);
                y.set(i, d, y.get(i, d) + nu);
            }
        }
        for d in 0..2 {
            let mean = (0..n).map(|i| y.get(i, d)).sum::<f64>() / n as f64;
            for i in 0..n {
                y.set(i, d, y.get(i, d) - mean);
            }
        }
        if it + 1 == EXAGGERATION_ITERS {
            kl_after_exaggeration = kl_divergence(&p, &y);
        }
    }
    let kl = kl_divergence(&p, &y);
    if kl_after_exaggeration.is_nan() {
        kl_after_exaggeration = kl;
    }
    Ok(TsneResult {
        coords: y,
        kl,
        kl_after_exaggeration,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GridSubset {
    #[default]
    All,
    ErrorsOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub cols: usize,
    pub rows: usize,
    /// `counts[col][row]`, row 0 at the bottom of the y extent.
    pub counts: Vec<Vec<u64>>,
    pub x_extent: [f64; 2],
    pub y_extent: [f64; 2],
    pub subset: GridSubset,
    pub total: u64,
}

/// Cell index of `v` among `bins` half-open bins over `[lo, hi]`, with the
/// top edge falling into the last bin.
fn bin_of(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    let b = ((v - lo) / (hi - lo) * bins as f64).floor();
    (b.max(0.0) as usize).min(bins - 1)
}

pub fn density_grid(frame: &LayoutFrame, cols: usize, rows: usize, subset: GridSubset) -> Result<DensityGrid> {
    if cols == 0 || rows == 0 {
        return Err(LayoutError::EmptyGrid);
    }
    let mut counts = vec![vec![0u64; rows]; cols];
    let mut total = 0;
    for p in &frame.points {
        if subset == GridSubset::ErrorsOnly && p.correct {
            continue;
        }
        let c = bin_of(p.x, frame.x_extent[0], frame.x_extent[1], cols);
        let r = bin_of(p.y, frame.y_extent[0], frame.y_extent[1], rows);
        counts[c][r] += 1;
        total += 1;
    }
    Ok(DensityGrid {
        cols,
        rows,
        counts,
        x_extent: frame.x_extent,
        y_extent: frame.y_extent,
        subset,
        total,
    })
}

impl DensityGrid {
    /// Data-space rectangle `[x0, x1] x [y0, y1]` covered by a cell.
    pub fn cell_rect(&self, col: usize, row: usize) -> [f64; 4] {
        let w = (self.x_extent[1] - self.x_extent[0]) / self.cols as f64;
        let h = (self.y_extent[1] - self.y_extent[0]) / self.rows as f64;
        [
            self.x_extent[0] + col as f64 * w,
            self.x_extent[0] + (col + 1) as f64 * w,
            self.y_extent[0] + row as f64 * h,
            self.y_extent[0] + (row + 1) as f64 * h,
        ]
    }

    /// Points of `frame` that fall into cell `(col, row)` under this grid's
    /// binning and subset.
    pub fn members(&self, frame: &LayoutFrame, col: usize, row: usize) -> Vec<usize> {
        frame
            .points
            .iter()
            .filter(|p| self.subset == GridSubset::All || !p.correct)
            .filter(|p| {
                bin_of(p.x, self.x_extent[0], self.x_extent[1], self.cols) == col
                    && bin_of(p.y, self.y_extent[0], self.y_extent[1], self.rows) == row
            })
            .map(|p| p.instance_id)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPoint {
    pub model_id: usize,
    pub x: f64,
    pub y: f64,
    pub is_member: bool,
}

fn axis_values(lib: &ModelLibrary, axis: MetricName, local: &Option<Vec<f64>>) -> Vec<f64> {
    match axis {
        MetricName::AccLocal => local.clone().expect("computed when requested"),
        other => lib.model_metrics.iter().map(|r| other.from_record(r).unwrap_or(f64::NAN)).collect(),
    }
}

/// One point per library model under the chosen axes. `acc_local` needs a
/// non-empty selection of test instance ids.
pub fn model_space_coords(
    lib: &ModelLibrary,
    members: &[usize],
    axis_x: MetricName,
    axis_y: MetricName,
    selection: Option<&[usize]>,
) -> Result<Vec<ModelPoint>> {
    let local = if axis_x == MetricName::AccLocal || axis_y == MetricName::AccLocal {
        match selection {
            Some(s) if !s.is_empty() => Some(lib.local_accuracy(s)?),
            _ => return Err(MetricError::NoSelection.into()),
        }
    } else {
        None
    };
    let xs = axis_values(lib, axis_x, &local);
    let ys = axis_values(lib, axis_y, &local);
    Ok((0..lib.len())
        .map(|m| ModelPoint {
            model_id: m,
            x: xs[m],
            y: ys[m],
            is_member: members.binary_search(&m).is_ok(),
        })
        .collect())
}

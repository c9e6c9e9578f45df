//! Classifier families that populate the model library.
//!
//! Every family emits one probability vector per row. Counting-based
//! families (trees, forests, bagging, knn, naive Bayes) apply additive
//! smoothing so they never emit exact 0/1.

mod boost;
mod codec;
mod knn;
mod logistic;
mod naive_bayes;
mod tree;

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataio::EncodedView;
use crate::matrix::Matrix;

pub use boost::Boosted;
pub use codec::CodecError;
pub use knn::Knn;
pub use logistic::Logistic;
pub use naive_bayes::NaiveBayes;
pub use tree::{Node, Tree};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid parameters for {spec}: {reason}")]
    InvalidParams { spec: String, reason: String },
    #[error("training rows contain a single class")]
    SingleClass,
    #[error("no training rows")]
    NoRows,
    #[error("non-finite feature value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("row width {got} does not match model width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Codec(#[from] CodecError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    DecisionTree,
    RandomForest,
    BaggedTrees,
    AdaboostStumps,
    Knn,
    NaiveBayes,
    LogisticRegression,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::DecisionTree,
        Family::RandomForest,
        Family::BaggedTrees,
        Family::AdaboostStumps,
        Family::Knn,
        Family::NaiveBayes,
        Family::LogisticRegression,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::DecisionTree => "decision_tree",
            Family::RandomForest => "random_forest",
            Family::BaggedTrees => "bagged_trees",
            Family::AdaboostStumps => "adaboost_stumps",
            Family::Knn => "knn",
            Family::NaiveBayes => "naive_bayes",
            Family::LogisticRegression => "logistic_regression",
        }
    }

    fn tag(self) -> u8 {
        Family::ALL.iter().position(|&f| f == self).unwrap() as u8
    }

    fn from_tag(tag: u8) -> Option<Family> {
        Family::ALL.get(tag as usize).copied()
    }
}

/// Features tried at each split of a random forest tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mtry {
    Sqrt,
    Third,
}

impl Mtry {
    fn resolve(self, d: usize) -> usize {
        let m = match self {
            Mtry::Sqrt => (d as f64).sqrt().round() as usize,
            Mtry::Third => d / 3,
        };
        m.clamp(1, d.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    Distance,
}

/// A family plus its hyperparameters. `max_depth: None` means unlimited.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelSpec {
    DecisionTree { max_depth: Option<u32>, min_leaf: u32 },
    RandomForest { trees: u32, mtry: Mtry, min_leaf: u32 },
    BaggedTrees { bags: u32, max_depth: Option<u32>, min_leaf: u32 },
    AdaboostStumps { rounds: u32, learning_rate: f64 },
    Knn { k: u32, weighting: Weighting },
    NaiveBayes { alpha: f64 },
    LogisticRegression { lambda: f64 },
}

impl ModelSpec {
    pub fn family(&self) -> Family {
        match self {
            ModelSpec::DecisionTree { .. } => Family::DecisionTree,
            ModelSpec::RandomForest { .. } => Family::RandomForest,
            ModelSpec::BaggedTrees { .. } => Family::BaggedTrees,
            ModelSpec::AdaboostStumps { .. } => Family::AdaboostStumps,
            ModelSpec::Knn { .. } => Family::Knn,
            ModelSpec::NaiveBayes { .. } => Family::NaiveBayes,
            ModelSpec::LogisticRegression { .. } => Family::LogisticRegression,
        }
    }

    /// Reasonable single configuration per family.
    pub fn default_for(family: Family) -> ModelSpec {
        match family {
            Family::DecisionTree => ModelSpec::DecisionTree {
                max_depth: Some(8),
                min_leaf: 1,
            },
            Family::RandomForest => ModelSpec::RandomForest {
                trees: 16,
                mtry: Mtry::Sqrt,
                min_leaf: 1,
            },
            Family::BaggedTrees => ModelSpec::BaggedTrees {
                bags: 10,
                max_depth: None,
                min_leaf: 1,
            },
            Family::AdaboostStumps => ModelSpec::AdaboostStumps {
                rounds: 25,
                learning_rate: 1.0,
            },
            Family::Knn => ModelSpec::Knn {
                k: 5,
                weighting: Weighting::Uniform,
            },
            Family::NaiveBayes => ModelSpec::NaiveBayes { alpha: 1.0 },
            Family::LogisticRegression => ModelSpec::LogisticRegression { lambda: 0.01 },
        }
    }

    /// Parameters as sorted key/value strings.
    pub fn params(&self) -> BTreeMap<&'static str, String> {
        let depth = |d: &Option<u32>| d.map_or_else(|| "inf".to_owned(), |d| d.to_string());
        let mut p = BTreeMap::new();
        match self {
            ModelSpec::DecisionTree { max_depth, min_leaf } => {
                p.insert("max_depth", depth(max_depth));
                p.insert("min_leaf", min_leaf.to_string());
            }
            ModelSpec::RandomForest { trees, mtry, min_leaf } => {
                p.insert("trees", trees.to_string());
                p.insert("mtry", format!("{mtry:?}").to_lowercase());
                p.insert("min_leaf", min_leaf.to_string());
            }
            ModelSpec::BaggedTrees { bags, max_depth, min_leaf } => {
                p.insert("bags", bags.to_string());
                p.insert("max_depth", depth(max_depth));
                p.insert("min_leaf", min_leaf.to_string());
            }
            ModelSpec::AdaboostStumps { rounds, learning_rate } => {
                p.insert("rounds", rounds.to_string());
                p.insert("learning_rate", format!("{learning_rate:?}"));
            }
            ModelSpec::Knn { k, weighting } => {
                p.insert("k", k.to_string());
                p.insert("weighting", format!("{weighting:?}").to_lowercase());
            }
            ModelSpec::NaiveBayes { alpha } => {
                p.insert("alpha", format!("{alpha:?}"));
            }
            ModelSpec::LogisticRegression { lambda } => {
                p.insert("lambda", format!("{lambda:?}"));
            }
        }
        p
    }

    /// Canonical, injective identifier, e.g. `knn(k=5,weighting=uniform)`.
    pub fn spec_id(&self) -> String {
        let params: Vec<String> = self.params().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("{}({})", self.family().name(), params.join(","))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(ModelError::InvalidParams {
                spec: self.spec_id(),
                reason: reason.to_owned(),
            })
        };
        let depth_ok = |d: &Option<u32>| d.is_none_or(|d| d >= 1);
        match self {
            ModelSpec::DecisionTree { max_depth, min_leaf } => {
                if !depth_ok(max_depth) {
                    return bad("max_depth must be >= 1");
                }
                if *min_leaf < 1 {
                    return bad("min_leaf must be >= 1");
                }
            }
            ModelSpec::RandomForest { trees, min_leaf, .. } => {
                if *trees < 1 {
                    return bad("trees must be >= 1");
                }
                if *min_leaf < 1 {
                    return bad("min_leaf must be >= 1");
                }
            }
            ModelSpec::BaggedTrees { bags, max_depth, min_leaf } => {
                if *bags < 1 {
                    return bad("bags must be >= 1");
                }
                if !depth_ok(max_depth) {
                    return bad("max_depth must be >= 1");
                }
                if *min_leaf < 1 {
                    return bad("min_leaf must be >= 1");
                }
            }
            ModelSpec::AdaboostStumps { rounds, learning_rate } => {
                if *rounds < 1 {
                    return bad("rounds must be >= 1");
                }
                if !(learning_rate.is_finite() && *learning_rate > 0.0) {
                    return bad("learning_rate must be > 0");
                }
            }
            ModelSpec::Knn { k, .. } => {
                if *k < 1 {
                    return bad("k must be >= 1");
                }
            }
            ModelSpec::NaiveBayes { alpha } => {
                if !(alpha.is_finite() && *alpha > 0.0) {
                    return bad("alpha must be > 0");
                }
            }
            ModelSpec::LogisticRegression { lambda } => {
                if !(lambda.is_finite() && *lambda >= 0.0) {
                    return bad("lambda must be >= 0");
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.spec_id())
    }
}

/// Named candidate grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grid {
    Default,
    Large,
}

impl Grid {
    pub fn specs(self) -> Vec<ModelSpec> {
        match self {
            Grid::Default => default_grid(),
            Grid::Large => large_grid(),
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Grid::Default => {
                "decision_tree max_depth{2,4,8,inf} x min_leaf{1,5,25}; \
                 random_forest trees{16,64} x mtry{sqrt,third} x min_leaf{1,5}; \
                 bagged_trees bags{10,30} x max_depth{8,inf} x min_leaf{1,5}; \
                 knn k{1,5,15,51} x weighting{uniform,distance}; \
                 adaboost_stumps rounds{10,25,100} x learning_rate{0.5,1}; \
                 logistic_regression lambda{0,0.01,0.1,1}; naive_bayes alpha{0.01,0.1,1}"
            }
            Grid::Large => {
                "default grid plus decision_tree max_depth{3,6,12} x min_leaf{1,5,25,100}; \
                 random_forest trees{32} x mtry{sqrt,third} x min_leaf{1,5,25}; \
                 bagged_trees bags{20} x max_depth{4,12} x min_leaf{1,5}; \
                 knn k{2,3,7,9,25,35,75,101} x weighting{uniform,distance}; \
                 adaboost_stumps rounds{50,200} x learning_rate{0.25,1} and rounds 400 x learning_rate{0.1,0.5}; \
                 logistic_regression lambda{0.001,0.03,0.3,3}; naive_bayes alpha{0.3,3,10}"
            }
        }
    }
}

/// The 49-spec default candidate grid across all seven families.
pub fn default_grid() -> Vec<ModelSpec> {
    let mut specs = Vec::new();
    for max_depth in [Some(2), Some(4), Some(8), None] {
        for min_leaf in [1, 5, 25] {
            specs.push(ModelSpec::DecisionTree { max_depth, min_leaf });
        }
    }
    for trees in [16, 64] {
        for mtry in [Mtry::Sqrt, Mtry::Third] {
            for min_leaf in [1, 5] {
                specs.push(ModelSpec::RandomForest { trees, mtry, min_leaf });
            }
        }
    }
    for bags in [10, 30] {
        for max_depth in [Some(8), None] {
            for min_leaf in [1, 5] {
                specs.push(ModelSpec::BaggedTrees { bags, max_depth, min_leaf });
            }
        }
    }
    for k in [1, 5, 15, 51] {
        for weighting in [Weighting::Uniform, Weighting::Distance] {
            specs.push(ModelSpec::Knn { k, weighting });
        }
    }
    for rounds in [10, 25, 100] {
        for learning_rate in [0.5, 1.0] {
            specs.push(ModelSpec::AdaboostStumps { rounds, learning_rate });
        }
    }
    for lambda in [0.0, 0.01, 0.1, 1.0] {
        specs.push(ModelSpec::LogisticRegression { lambda });
    }
    for alpha in [0.01, 0.1, 1.0] {
        specs.push(ModelSpec::NaiveBayes { alpha });
    }
    specs
}

/// A 100-spec grid: the default grid plus 51 further configurations.
pub fn large_grid() -> Vec<ModelSpec> {
    let mut specs = default_grid();
    for max_depth in [3, 6, 12] {
        for min_leaf in [1, 5, 25, 100] {
            specs.push(ModelSpec::DecisionTree {
                max_depth: Some(max_depth),
                min_leaf,
            });
        }
    }
    for mtry in [Mtry::Sqrt, Mtry::Third] {
        for min_leaf in [1, 5, 25] {
            specs.push(ModelSpec::RandomForest { trees: 32, mtry, min_leaf });
        }
    }
    for max_depth in [4, 12] {
        for min_leaf in [1, 5] {
            specs.push(ModelSpec::BaggedTrees {
                bags: 20,
                max_depth: Some(max_depth),
                min_leaf,
            });
        }
    }
    for k in [3, 9, 25, 101] {
        for weighting in [Weighting::Uniform, Weighting::Distance] {
            specs.push(ModelSpec::Knn { k, weighting });
        }
    }
    for rounds in [50, 200] {
        for learning_rate in [0.25, 1.0] {
            specs.push(ModelSpec::AdaboostStumps { rounds, learning_rate });
        }
    }
    for lambda in [0.001, 0.03, 0.3, 3.0] {
        specs.push(ModelSpec::LogisticRegression { lambda });
    }
    for alpha in [0.3, 3.0, 10.0] {
        specs.push(ModelSpec::NaiveBayes { alpha });
    }
    for k in [2, 7, 35, 75] {
        for weighting in [Weighting::Uniform, Weighting::Distance] {
            specs.push(ModelSpec::Knn { k, weighting });
        }
    }
    for learning_rate in [0.1, 0.5] {
        specs.push(ModelSpec::AdaboostStumps {
            rounds: 400,
            learning_rate,
        });
    }
    specs
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelState {
    Tree(Tree),
    /// Forest and bagging: probabilities averaged over members.
    Ensemble(Vec<Tree>),
    Boosted(Boosted),
    Knn(Knn),
    NaiveBayes(NaiveBayes),
    Logistic(Logistic),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub train_seed: u64,
    pub n_features: usize,
    pub n_classes: usize,
    pub state: ModelState,
}

/// PRNG seed derived from the training seed and the spec identity.
pub fn derive_seed(seed: u64, spec: &ModelSpec) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(spec.spec_id().as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

/// Fits `spec` on `rows` of `view`. `labels` is indexed by view row.
pub fn train(spec: &ModelSpec, view: &EncodedView, rows: &[usize], labels: &[usize], n_classes: usize, seed: u64) -> Result<TrainedModel> {
    spec.validate()?;
    if rows.is_empty() {
        return Err(ModelError::NoRows);
    }
    let first = labels[rows[0]];
    if rows.iter().all(|&r| labels[r] == first) {
        return Err(ModelError::SingleClass);
    }
    for &r in rows {
        if let Some(col) = view.row(r).iter().position(|x| !x.is_finite()) {
            return Err(ModelError::NonFinite { row: r, col });
        }
    }

    let x = view.matrix.select_rows(rows);
    let y: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, spec));
    let d = x.cols();

    let state = match *spec {
        ModelSpec::DecisionTree { max_depth, min_leaf } => {
            let data = tree::Binned::new(&x, &y, n_classes);
            let params = tree::GrowParams {
                max_depth,
                min_leaf: min_leaf as f64,
                mtry: None,
            };
            ModelState::Tree(tree::grow(&data, &vec![1.0; y.len()], None, &params, &mut rng))
        }
        ModelSpec::RandomForest { trees, mtry, min_leaf } => {
            let data = tree::Binned::new(&x, &y, n_classes);
            let params = tree::GrowParams {
                max_depth: None,
                min_leaf: min_leaf as f64,
                mtry: Some(mtry.resolve(d)),
            };
            ModelState::Ensemble(tree::bagged(&data, trees, &params, &mut rng))
        }
        ModelSpec::BaggedTrees { bags, max_depth, min_leaf } => {
            let data = tree::Binned::new(&x, &y, n_classes);
            let params = tree::GrowParams {
                max_depth,
                min_leaf: min_leaf as f64,
                mtry: None,
            };
            ModelState::Ensemble(tree::bagged(&data, bags, &params, &mut rng))
        }
        ModelSpec::AdaboostStumps { rounds, learning_rate } => {
            let data = tree::Binned::new(&x, &y, n_classes);
            ModelState::Boosted(boost::fit(&data, rounds, learning_rate, &mut rng))
        }
        ModelSpec::Knn { k, weighting } => ModelState::Knn(Knn::fit(x, y, n_classes, k as usize, weighting)),
        ModelSpec::NaiveBayes { alpha } => ModelState::NaiveBayes(NaiveBayes::fit(&x, &y, n_classes, &view.column_map, alpha)),
        ModelSpec::LogisticRegression { lambda } => ModelState::Logistic(Logistic::fit(&x, &y, n_classes, lambda)),
    };

    Ok(TrainedModel {
        spec: spec.clone(),
        train_seed: seed,
        n_features: d,
        n_classes,
        state,
    })
}

impl TrainedModel {
    /// Probability rows for the listed rows of `view`.
    pub fn predict_proba(&self, view: &EncodedView, rows: &[usize]) -> Result<Matrix> {
        if view.n_cols() != self.n_features {
            return Err(ModelError::WidthMismatch {
                expected: self.n_features,
                got: view.n_cols(),
            });
        }
        let mut out = Matrix::zeros(rows.len(), self.n_classes);
        match &self.state {
            ModelState::Knn(m) => m.predict_into(&view.matrix, rows, &mut out),
            _ => {
                for (o, &r) in rows.iter().enumerate() {
                    self.predict_row_into(view.row(r), out.row_mut(o));
                }
            }
        }
        Ok(out)
    }

    /// Probability rows for every row of `x`.
    pub fn predict_matrix(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.n_features {
            return Err(ModelError::WidthMismatch {
                expected: self.n_features,
                got: x.cols(),
            });
        }
        let rows: Vec<usize> = (0..x.rows()).collect();
        let mut out = Matrix::zeros(x.rows(), self.n_classes);
        match &self.state {
            ModelState::Knn(m) => m.predict_into(x, &rows, &mut out),
            _ => {
                for r in rows {
                    self.predict_row_into(x.row(r), out.row_mut(r));
                }
            }
        }
        Ok(out)
    }

    fn predict_row_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.state {
            ModelState::Tree(t) => out.copy_from_slice(t.leaf_probs(x)),
            ModelState::Ensemble(trees) => {
                out.fill(0.0);
                for t in trees {
                    for (o, p) in out.iter_mut().zip(t.leaf_probs(x)) {
                        *o += p;
                    }
                }
                let n = trees.len() as f64;
                out.iter_mut().for_each(|o| *o /= n);
            }
            ModelState::Boosted(b) => b.predict_into(x, out),
            ModelState::Knn(m) => m.predict_row_into(x, out),
            ModelState::NaiveBayes(m) => m.predict_into(x, out),
            ModelState::Logistic(m) => m.predict_into(x, out),
        }
    }

    /// Versioned binary encoding: magic `EATM`, u16 version, family tag,
    /// then the payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        codec::encode_model(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<TrainedModel> {
        Ok(codec::decode_model(bytes)?)
    }
}

/// Normalizes `v` in place so it sums to one.
pub(crate) fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
}

/// Softmax in place with max-subtraction.
pub(crate) fn softmax(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    v.iter_mut().for_each(|x| *x = (*x - m).exp());
    normalize(v);
}

//! Model state encoding: `EATM` magic, u16 format version, u8 family tag,
//! then a little-endian payload (spec as JSON, seed, shape, family state).

use std::io::{Cursor, Read};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use super::boost::Boosted;
use super::knn::Knn;
use super::logistic::Logistic;
use super::naive_bayes::{CategoricalBlock, GaussianColumn, NaiveBayes};
use super::tree::{Node, Tree};
use super::{Family, ModelSpec, ModelState, TrainedModel, Weighting};
use crate::matrix::Matrix;

pub const MAGIC: &[u8; 4] = b"EATM";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported model format version {0}")]
    Version(u16),
    #[error("unknown family tag {0}")]
    UnknownFamily(u8),
    #[error("truncated model data")]
    Truncated,
    #[error("invalid model data: {0}")]
    Invalid(String),
}

impl From<std::io::Error> for CodecError {
    fn from(_: std::io::Error) -> Self {
        CodecError::Truncated
    }
}

type Result<T> = std::result::Result<T, CodecError>;

struct W(Vec<u8>);

impl W {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.write_u32::<LE>(v as u32).unwrap();
    }
    fn u64(&mut self, v: u64) {
        self.0.write_u64::<LE>(v).unwrap();
    }
    fn f64(&mut self, v: f64) {
        self.0.write_f64::<LE>(v).unwrap();
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u32(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }
    fn usizes(&mut self, v: &[usize]) {
        self.u32(v.len());
        v.iter().for_each(|&x| self.u32(x));
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len());
        self.0.extend_from_slice(b);
    }
    fn matrix(&mut self, m: &Matrix) {
        self.u32(m.rows());
        self.u32(m.cols());
        m.as_slice().iter().for_each(|&x| self.f64(x));
    }
    fn tree(&mut self, t: &Tree) {
        self.u32(t.n_classes);
        self.u32(t.nodes.len());
        for n in &t.nodes {
            match n {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    self.u8(0);
                    self.u32(*feature as usize);
                    self.f64(*threshold);
                    self.u32(*left as usize);
                    self.u32(*right as usize);
                }
                Node::Leaf { probs } => {
                    self.u8(1);
                    self.f64s(probs);
                }
            }
        }
    }
}

struct R<'a>(Cursor<&'a [u8]>);

impl R<'_> {
    fn u8(&mut self) -> Result<u8> {
        Ok(self.0.read_u8()?)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(self.0.read_u32::<LE>()? as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(self.0.read_u64::<LE>()?)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(self.0.read_f64::<LE>()?)
    }
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.u32()?;
        let left = self.0.get_ref().len() - self.0.position() as usize;
        if n.saturating_mul(elem) > left {
            return Err(CodecError::Truncated);
        }
        Ok(n)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len(4)?;
        (0..n).map(|_| self.u32()).collect()
    }
    fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.len(1)?;
        let mut b = vec![0; n];
        self.0.read_exact(&mut b)?;
        Ok(b)
    }
    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u32()?;
        let cols = self.u32()?;
        let left = self.0.get_ref().len() - self.0.position() as usize;
        if rows.saturating_mul(cols).saturating_mul(8) > left {
            return Err(CodecError::Truncated);
        }
        let data = (0..rows * cols).map(|_| self.f64()).collect::<Result<_>>()?;
        Ok(Matrix::from_vec(rows, cols, data))
    }
    fn tree(&mut self) -> Result<Tree> {
        let n_classes = self.u32()?;
        let n = self.len(1)?;
        let mut nodes = Vec::with_capacity(n);
        for _ in 0..n {
            nodes.push(match self.u8()? {
                0 => {
                    let feature = self.u32()? as u32;
                    let threshold = self.f64()?;
                    let left = self.u32()?;
                    let right = self.u32()?;
                    if left >= n || right >= n {
                        return Err(CodecError::Invalid("child index out of range".into()));
                    }
                    Node::Split {
                        feature,
                        threshold,
                        left: left as u32,
                        right: right as u32,
                    }
                }
                1 => {
                    let probs = self.f64s()?;
                    if probs.len() != n_classes {
                        return Err(CodecError::Invalid("leaf width".into()));
                    }
                    Node::Leaf { probs }
                }
                t => return Err(CodecError::Invalid(format!("node tag {t}"))),
            });
        }
        Ok(Tree { n_classes, nodes })
    }
}

pub(crate) fn encode_model(m: &TrainedModel) -> Vec<u8> {
    let mut w = W(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.0.write_u16::<LE>(VERSION).unwrap();
    w.u8(m.spec.family().tag());
    w.bytes(&serde_json::to_vec(&m.spec).expect("spec serializes"));
    w.u64(m.train_seed);
    w.u32(m.n_features);
    w.u32(m.n_classes);
    match &m.state {
        ModelState::Tree(t) => w.tree(t),
        ModelState::Ensemble(trees) => {
            w.u32(trees.len());
            trees.iter().for_each(|t| w.tree(t));
        }
        ModelState::Boosted(b) => {
            w.u32(b.stumps.len());
            for (t, a) in &b.stumps {
                w.f64(*a);
                w.tree(t);
            }
        }
        ModelState::Knn(k) => {
            w.u32(k.k);
            w.u8(matches!(k.weighting, Weighting::Distance) as u8);
            w.matrix(&k.x);
            w.usizes(&k.y);
        }
        ModelState::NaiveBayes(nb) => {
            w.f64s(&nb.log_prior);
            w.u32(nb.gaussians.len());
            for g in &nb.gaussians {
                w.u32(g.col);
                w.f64s(&g.mean);
                w.f64s(&g.var);
            }
            w.u32(nb.blocks.len());
            for b in &nb.blocks {
                w.u32(b.start);
                w.u32(b.width);
                w.f64s(&b.log_p);
            }
        }
        ModelState::Logistic(l) => {
            w.f64s(&l.weights);
            w.f64s(&l.bias);
        }
    }
    w.0
}

pub(crate) fn decode_model(bytes: &[u8]) -> Result<TrainedModel> {
    if bytes.len() < 7 {
        return Err(CodecError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(CodecError::BadMagic);
    }
    let mut r = R(Cursor::new(bytes));
    r.0.set_position(4);
    let version = r.0.read_u16::<LE>()?;
    if version != VERSION {
        return Err(CodecError::Version(version));
    }
    let tag = r.u8()?;
    let family = Family::from_tag(tag).ok_or(CodecError::UnknownFamily(tag))?;
    let spec: ModelSpec = serde_json::from_slice(&r.bytes()?).map_err(|e| CodecError::Invalid(format!("spec: {e}")))?;
    if spec.family() != family {
        return Err(CodecError::Invalid("family tag does not match spec".into()));
    }
    let train_seed = r.u64()?;
    let n_features = r.u32()?;
    let n_classes = r.u32()?;
    let state = match family {
        Family::DecisionTree => ModelState::Tree(r.tree()?),
        Family::RandomForest | Family::BaggedTrees => {
            let n = r.len(1)?;
            ModelState::Ensemble((0..n).map(|_| r.tree()).collect::<Result<_>>()?)
        }
        Family::AdaboostStumps => {
            let n = r.len(1)?;
            let mut stumps = Vec::with_capacity(n);
            for _ in 0..n {
                let a = r.f64()?;
                stumps.push((r.tree()?, a));
            }
            ModelState::Boosted(Boosted { n_classes, stumps })
        }
        Family::Knn => {
            let k = r.u32()?;
            let weighting = if r.u8()? == 1 { Weighting::Distance } else { Weighting::Uniform };
            let x = r.matrix()?;
            let y = r.usizes()?;
            ModelState::Knn(Knn::fit(x, y, n_classes, k, weighting))
        }
        Family::NaiveBayes => {
            let log_prior = r.f64s()?;
            let ng = r.len(4)?;
            let mut gaussians = Vec::with_capacity(ng);
            for _ in 0..ng {
                gaussians.push(GaussianColumn {
                    col: r.u32()?,
                    mean: r.f64s()?,
                    var: r.f64s()?,
                });
            }
            let nb = r.len(4)?;
            let mut blocks = Vec::with_capacity(nb);
            for _ in 0..nb {
                blocks.push(CategoricalBlock {
                    start: r.u32()?,
                    width: r.u32()?,
                    log_p: r.f64s()?,
                });
            }
            ModelState::NaiveBayes(NaiveBayes {
                n_classes,
                log_prior,
                gaussians,
                blocks,
            })
        }
        Family::LogisticRegression => ModelState::Logistic(Logistic {
            n_classes,
            weights: r.f64s()?,
            bias: r.f64s()?,
        }),
    };
    if (r.0.position() as usize) != bytes.len() {
        return Err(CodecError::Invalid("trailing bytes".into()));
    }
    Ok(TrainedModel {
        spec,
        train_seed,
        n_features,
        n_classes,
        state,
    })
}

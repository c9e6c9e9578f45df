//! Multi-class AdaBoost (SAMME) over depth-1 stumps with reweighting.

use rand_chacha::ChaCha8Rng;

use super::tree::{self, Binned, GrowParams, Tree};
use crate::matrix::argmax;

#[derive(Debug, Clone, PartialEq)]
pub struct Boosted {
    pub(crate) n_classes: usize,
    /// (stump, vote weight)
    pub(crate) stumps: Vec<(Tree, f64)>,
}

const MIN_ERROR: f64 = 1e-10;

pub(crate) fn fit(data: &Binned<'_>, rounds: u32, learning_rate: f64, rng: &mut ChaCha8Rng) -> Boosted {
    let n = data.n_samples();
    let k = data.n_classes;
    let ones = vec![1.0; n];
    let mut w = vec![1.0 / n as f64; n];
    let params = GrowParams {
        max_depth: Some(1),
        min_leaf: 1.0,
        mtry: None,
    };
    let chance = 1.0 - 1.0 / k as f64;
    let mut stumps = Vec::new();

    for _ in 0..rounds {
        let stump = tree::grow(data, &w, Some(&ones), &params, rng);
        let miss: Vec<bool> = (0..n).map(|i| argmax(stump.leaf_probs(data.x.row(i))) != data.labels[i]).collect();
        let total: f64 = w.iter().sum();
        let err = miss.iter().zip(&w).filter(|(m, _)| **m).map(|(_, w)| w).sum::<f64>() / total;
        if err >= chance {
            if stumps.is_empty() {
                stumps.push((stump, 1.0));
            }
            break;
        }
        let e = err.max(MIN_ERROR);
        let alpha = learning_rate * (((1.0 - e) / e).ln() + (k as f64 - 1.0).ln());
        stumps.push((stump, alpha));
        if err <= MIN_ERROR {
            break;
        }
        for (wi, &m) in w.iter_mut().zip(&miss) {
            if m {
                *wi *= alpha.exp();
            }
        }
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= s);
    }

    Boosted { n_classes: k, stumps }
}

impl Boosted {
    pub fn rounds(&self) -> usize {
        self.stumps.len()
    }

    /// Softmax over vote-weight-normalized SAMME margins (predicted class
    /// coded `1`, others `-1/(K-1)`), scaled by `1/(K-1)`.
    pub(crate) fn predict_into(&self, x: &[f64], out: &mut [f64]) {
        let k = self.n_classes;
        let off = -1.0 / (k as f64 - 1.0);
        out.fill(0.0);
        let mut total = 0.0;
        for (stump, alpha) in &self.stumps {
            let c = argmax(stump.leaf_probs(x));
            for (j, o) in out.iter_mut().enumerate() {
                *o += alpha * if j == c { 1.0 } else { off };
            }
            total += alpha;
        }
        let scale = 1.0 / (total * (k as f64 - 1.0));
        out.iter_mut().for_each(|o| *o *= scale);
        super::softmax(out);
    }
}

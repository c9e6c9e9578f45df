//! CART classification trees (Gini) over pre-binned features.
//!
//! Candidate thresholds are midpoints between adjacent distinct training
//! values present in a node. Ties in split quality go to the lowest column,
//! then the lowest threshold.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    /// Laplace-smoothed (alpha = 1) class frequencies.
    Leaf { probs: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub(crate) n_classes: usize,
    pub(crate) nodes: Vec<Node>,
}

impl Tree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn leaf_probs(&self, x: &[f64]) -> &[f64] {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[*feature as usize] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
                Node::Leaf { probs } => return probs,
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left as usize).max(walk(nodes, *right as usize)),
            }
        }
        walk(&self.nodes, 0)
    }
}

/// Training matrix with every feature mapped to the rank of its value among
/// the distinct training values.
pub(crate) struct Binned<'a> {
    pub(crate) x: &'a Matrix,
    pub(crate) labels: &'a [usize],
    pub(crate) n_classes: usize,
    values: Vec<Vec<f64>>,
    codes: Vec<Vec<u32>>,
}

impl<'a> Binned<'a> {
    pub(crate) fn new(x: &'a Matrix, labels: &'a [usize], n_classes: usize) -> Self {
        let n = x.rows();
        let mut values = Vec::with_capacity(x.cols());
        let mut codes = Vec::with_capacity(x.cols());
        let mut order: Vec<u32> = Vec::with_capacity(n);
        for f in 0..x.cols() {
            order.clear();
            order.extend(0..n as u32);
            order.sort_by(|&a, &b| x.get(a as usize, f).total_cmp(&x.get(b as usize, f)));
            let mut vals: Vec<f64> = Vec::new();
            let mut code = vec![0u32; n];
            for &i in &order {
                let v = x.get(i as usize, f);
                if vals.last() != Some(&v) {
                    vals.push(v);
                }
                code[i as usize] = (vals.len() - 1) as u32;
            }
            values.push(vals);
            codes.push(code);
        }
        Self {
            x,
            labels,
            n_classes,
            values,
            codes,
        }
    }

    pub(crate) fn n_samples(&self) -> usize {
        self.labels.len()
    }

    fn n_features(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct GrowParams {
    pub(crate) max_depth: Option<u32>,
    /// Minimum sample count (with multiplicity) in each child.
    pub(crate) min_leaf: f64,
    /// Features sampled per node; `None` tries all.
    pub(crate) mtry: Option<usize>,
}

struct BestSplit {
    feature: usize,
    left_bin: u32,
    right_bin: u32,
    score: f64,
}

struct Scratch {
    hist_w: Vec<f64>,
    hist_c: Vec<f64>,
    pairs: Vec<(u32, u32)>,
    feats: Vec<usize>,
    left_w: Vec<f64>,
}

/// Grows one tree. `weights[i]` weighs sample `i` in impurity (0 excludes
/// it); `counts[i]` is its multiplicity for `min_leaf`, defaulting to the
/// weight.
pub(crate) fn grow(data: &Binned<'_>, weights: &[f64], counts: Option<&[f64]>, params: &GrowParams, rng: &mut ChaCha8Rng) -> Tree {
    let k = data.n_classes;
    let counts = counts.unwrap_or(weights);
    let root: Vec<u32> = (0..data.n_samples() as u32).filter(|&i| weights[i as usize] > 0.0).collect();
    let max_bins = data.values.iter().map(Vec::len).max().unwrap_or(1);
    let mut scratch = Scratch {
        hist_w: vec![0.0; max_bins * k],
        hist_c: vec![0.0; max_bins],
        pairs: Vec::new(),
        feats: (0..data.n_features()).collect(),
        left_w: vec![0.0; k],
    };

    let mut nodes = vec![Node::Leaf { probs: Vec::new() }];
    let mut stack: Vec<(usize, Vec<u32>, u32)> = vec![(0, root, 0)];
    while let Some((at, idx, depth)) = stack.pop() {
        let mut class_w = vec![0.0; k];
        let mut total_c = 0.0;
        for &i in &idx {
            class_w[data.labels[i as usize]] += weights[i as usize];
            total_c += counts[i as usize];
        }
        let total_w: f64 = class_w.iter().sum();
        let leaf = |class_w: &[f64]| Node::Leaf {
            probs: class_w.iter().map(|w| (w + 1.0) / (total_w + k as f64)).collect(),
        };

        let pure = class_w.iter().filter(|&&w| w > 0.0).count() <= 1;
        let depth_reached = params.max_depth.is_some_and(|d| depth >= d);
        if pure || depth_reached || total_c < 2.0 * params.min_leaf {
            nodes[at] = leaf(&class_w);
            continue;
        }

        let parent_score = class_w.iter().map(|w| w * w).sum::<f64>() / total_w;
        let best = find_split(data, weights, counts, &idx, &class_w, total_c, params, rng, &mut scratch);
        let best = match best {
            Some(b) if b.score - parent_score > 1e-12 * total_w => b,
            _ => {
                nodes[at] = leaf(&class_w);
                continue;
            }
        };

        let codes = &data.codes[best.feature];
        let (left, right): (Vec<u32>, Vec<u32>) = idx.into_iter().partition(|&i| codes[i as usize] <= best.left_bin);
        let vals = &data.values[best.feature];
        let threshold = 0.5 * (vals[best.left_bin as usize] + vals[best.right_bin as usize]);
        let l = nodes.len();
        nodes.push(Node::Leaf { probs: Vec::new() });
        nodes.push(Node::Leaf { probs: Vec::new() });
        nodes[at] = Node::Split {
            feature: best.feature as u32,
            threshold,
            left: l as u32,
            right: (l + 1) as u32,
        };
        stack.push((l + 1, right, depth + 1));
        stack.push((l, left, depth + 1));
    }

    Tree { n_classes: k, nodes }
}

#[allow(clippy::too_many_arguments)]
fn find_split(
    data: &Binned<'_>,
    weights: &[f64],
    counts: &[f64],
    idx: &[u32],
    class_w: &[f64],
    total_c: f64,
    params: &GrowParams,
    rng: &mut ChaCha8Rng,
    s: &mut Scratch,
) -> Option<BestSplit> {
    let k = data.n_classes;
    let d = data.n_features();
    let n_try = params.mtry.map_or(d, |m| m.min(d));
    if n_try < d {
        for j in 0..n_try {
            let r = rng.random_range(j..d);
            s.feats.swap(j, r);
        }
    }
    let mut chosen: Vec<usize> = if n_try < d { s.feats[..n_try].to_vec() } else { (0..d).collect() };
    chosen.sort_unstable();

    let total_w: f64 = class_w.iter().sum();
    let mut best: Option<BestSplit> = None;
    for f in chosen {
        let nb = data.values[f].len();
        if nb < 2 {
            continue;
        }
        let codes = &data.codes[f];
        s.left_w.iter_mut().for_each(|x| *x = 0.0);
        let mut left_c = 0.0;
        let mut prev_bin: Option<u32> = None;

        let mut consider = |bin: u32, left_w: &[f64], left_c: f64, prev: Option<u32>| {
            let Some(prev) = prev else { return };
            let right_c = total_c - left_c;
            if left_c < params.min_leaf || right_c < params.min_leaf {
                return;
            }
            let wl: f64 = left_w.iter().sum();
            let wr = total_w - wl;
            if wl <= 0.0 || wr <= 0.0 {
                return;
            }
            let mut sl = 0.0;
            let mut sr = 0.0;
            for c in 0..k {
                sl += left_w[c] * left_w[c];
                let r = class_w[c] - left_w[c];
                sr += r * r;
            }
            let score = sl / wl + sr / wr;
            if best.as_ref().is_none_or(|b| score > b.score) {
                best = Some(BestSplit {
                    feature: f,
                    left_bin: prev,
                    right_bin: bin,
                    score,
                });
            }
        };

        if nb <= 4 * idx.len() {
            s.hist_w[..nb * k].iter_mut().for_each(|x| *x = 0.0);
            s.hist_c[..nb].iter_mut().for_each(|x| *x = 0.0);
            for &i in idx {
                let i = i as usize;
                let b = codes[i] as usize;
                s.hist_w[b * k + data.labels[i]] += weights[i];
                s.hist_c[b] += counts[i];
            }
            for b in 0..nb {
                if s.hist_c[b] == 0.0 {
                    continue;
                }
                consider(b as u32, &s.left_w, left_c, prev_bin);
                for c in 0..k {
                    s.left_w[c] += s.hist_w[b * k + c];
                }
                left_c += s.hist_c[b];
                prev_bin = Some(b as u32);
            }
        } else {
            s.pairs.clear();
            s.pairs.extend(idx.iter().map(|&i| (codes[i as usize], i)));
            s.pairs.sort_unstable();
            let mut j = 0;
            while j < s.pairs.len() {
                let b = s.pairs[j].0;
                consider(b, &s.left_w, left_c, prev_bin);
                while j < s.pairs.len() && s.pairs[j].0 == b {
                    let i = s.pairs[j].1 as usize;
                    s.left_w[data.labels[i]] += weights[i];
                    left_c += counts[i];
                    j += 1;
                }
                prev_bin = Some(b);
            }
        }
    }
    best
}

/// Bootstrap-aggregated trees: each tree sees `n` draws with replacement.
pub(crate) fn bagged(data: &Binned<'_>, n_trees: u32, params: &GrowParams, rng: &mut ChaCha8Rng) -> Vec<Tree> {
    let n = data.n_samples();
    (0..n_trees)
        .map(|_| {
            let mut mult = vec![0.0; n];
            for _ in 0..n {
                mult[rng.random_range(0..n)] += 1.0;
            }
            grow(data, &mult, None, params, rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn params(depth: Option<u32>, min_leaf: f64) -> GrowParams {
        GrowParams {
            max_depth: depth,
            min_leaf,
            mtry: None,
        }
    }

    #[test]
    fn leaf_uses_laplace_smoothing() {
        // 3 of class 0, 1 of class 1, depth limit keeps a single leaf
        let x = Matrix::from_rows(&[[0.0], [1.0], [2.0], [3.0]]);
        let y = [0, 0, 0, 1];
        let data = Binned::new(&x, &y, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = grow(&data, &[1.0; 4], None, &params(None, 3.0), &mut rng);
        assert_eq!(t.nodes.len(), 1);
        let p = t.leaf_probs(&[0.0]);
        assert!((p[0] - 4.0 / 6.0).abs() < 1e-15);
        assert!((p[1] - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn split_at_midpoint() {
        let x = Matrix::from_rows(&[[1.0], [2.0], [5.0], [7.0]]);
        let y = [0, 0, 1, 1];
        let data = Binned::new(&x, &y, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = grow(&data, &[1.0; 4], None, &params(None, 1.0), &mut rng);
        match &t.nodes[0] {
            Node::Split { feature, threshold, .. } => {
                assert_eq!(*feature, 0);
                assert_eq!(*threshold, 3.5);
            }
            other => panic!("expected split, got {other:?}"),
        }
    }

    #[test]
    fn ties_prefer_lowest_column() {
        // both columns separate the classes perfectly
        let x = Matrix::from_rows(&[[0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [1.0, 1.0]]);
        let y = [0, 0, 1, 1];
        let data = Binned::new(&x, &y, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = grow(&data, &[1.0; 4], None, &params(None, 1.0), &mut rng);
        assert!(matches!(t.nodes[0], Node::Split { feature: 0, .. }));
    }

    #[test]
    fn min_leaf_blocks_small_children() {
        let x = Matrix::from_rows(&[[0.0], [1.0], [2.0], [3.0], [4.0]]);
        let y = [1, 0, 0, 0, 0];
        let data = Binned::new(&x, &y, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = grow(&data, &[1.0; 5], None, &params(None, 2.0), &mut rng);
        for node in &t.nodes {
            if let Node::Leaf { probs } = node {
                assert!(!probs.is_empty());
            }
        }
        // the lone class-1 row can never be isolated
        assert!(t.leaf_probs(&[0.0])[0] >= 0.5);
    }

    #[test]
    fn depth_limit() {
        let x = Matrix::from_rows(&[[0.0], [1.0], [2.0], [3.0], [4.0], [5.0]]);
        let y = [0, 1, 0, 1, 0, 1];
        let data = Binned::new(&x, &y, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = grow(&data, &[1.0; 6], None, &params(Some(2), 1.0), &mut rng);
        assert!(t.depth() <= 2);
        let full = grow(&data, &[1.0; 6], None, &params(None, 1.0), &mut rng);
        for i in 0..6 {
            let p = full.leaf_probs(&[i as f64]);
            assert_eq!(crate::matrix::argmax(p), y[i]);
        }
    }
}

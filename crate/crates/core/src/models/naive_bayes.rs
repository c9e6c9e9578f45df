use crate::dataio::EncodedColumn;
use crate::matrix::Matrix;

/// Mixed naive Bayes over the shared encoding: Gaussian likelihoods for
/// standardized numeric columns, smoothed categorical likelihoods for each
/// one-hot block. Posteriors are computed in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct NaiveBayes {
    pub(crate) n_classes: usize,
    pub(crate) log_prior: Vec<f64>,
    pub(crate) gaussians: Vec<GaussianColumn>,
    pub(crate) blocks: Vec<CategoricalBlock>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct GaussianColumn {
    pub(crate) col: usize,
    pub(crate) mean: Vec<f64>,
    pub(crate) var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct CategoricalBlock {
    pub(crate) start: usize,
    pub(crate) width: usize,
    /// `log_p[c * width + v]`
    pub(crate) log_p: Vec<f64>,
}

fn active(row: &[f64], start: usize, width: usize) -> Option<usize> {
    row[start..start + width].iter().position(|&v| v == 1.0)
}

impl NaiveBayes {
    pub(crate) fn fit(x: &Matrix, y: &[usize], k: usize, column_map: &[EncodedColumn], alpha: f64) -> Self {
        let n = x.rows();
        let mut class_n = vec![0usize; k];
        for &c in y {
            class_n[c] += 1;
        }
        let log_prior = class_n
            .iter()
            .map(|&nc| ((nc as f64 + alpha) / (n as f64 + k as f64 * alpha)).ln())
            .collect();

        let mut gaussians = Vec::new();
        let mut blocks: Vec<CategoricalBlock> = Vec::new();
        let mut j = 0;
        while j < column_map.len() {
            let cm = column_map[j];
            if cm.category.is_none() {
                gaussians.push(GaussianColumn {
                    col: j,
                    mean: vec![0.0; k],
                    var: vec![0.0; k],
                });
                j += 1;
            } else {
                let width = column_map[j..].iter().take_while(|c| c.attribute == cm.attribute).count();
                blocks.push(CategoricalBlock {
                    start: j,
                    width,
                    log_p: vec![0.0; k * width],
                });
                j += width;
            }
        }

        let mut max_var: f64 = 0.0;
        for g in &mut gaussians {
            let mut sum = vec![0.0; k];
            for (i, &c) in y.iter().enumerate() {
                sum[c] += x.get(i, g.col);
            }
            for c in 0..k {
                g.mean[c] = if class_n[c] > 0 { sum[c] / class_n[c] as f64 } else { 0.0 };
            }
            let mut ss = vec![0.0; k];
            for (i, &c) in y.iter().enumerate() {
                let d = x.get(i, g.col) - g.mean[c];
                ss[c] += d * d;
            }
            for c in 0..k {
                g.var[c] = if class_n[c] > 0 { ss[c] / class_n[c] as f64 } else { 1.0 };
            }
            let all_mean = (0..n).map(|i| x.get(i, g.col)).sum::<f64>() / n as f64;
            let all_var = (0..n).map(|i| (x.get(i, g.col) - all_mean).powi(2)).sum::<f64>() / n as f64;
            max_var = max_var.max(all_var);
        }
        let eps = if max_var > 0.0 { 1e-9 * max_var } else { 1e-9 };
        for g in &mut gaussians {
            g.var.iter_mut().for_each(|v| *v += eps);
        }

        for b in &mut blocks {
            let mut counts = vec![0.0; k * b.width];
            for (i, &c) in y.iter().enumerate() {
                if let Some(v) = active(x.row(i), b.start, b.width) {
                    counts[c * b.width + v] += 1.0;
                }
            }
            for c in 0..k {
                let denom = class_n[c] as f64 + alpha * b.width as f64;
                for v in 0..b.width {
                    b.log_p[c * b.width + v] = ((counts[c * b.width + v] + alpha) / denom).ln();
                }
            }
        }

        Self {
            n_classes: k,
            log_prior,
            gaussians,
            blocks,
        }
    }

    pub(crate) fn predict_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.log_prior);
        for g in &self.gaussians {
            let v = x[g.col];
            for (c, o) in out.iter_mut().enumerate() {
                let var = g.var[c];
                let d = v - g.mean[c];
                *o += -0.5 * (2.0 * std::f64::consts::PI * var).ln() - d * d / (2.0 * var);
            }
        }
        for b in &self.blocks {
            if let Some(v) = active(x, b.start, b.width) {
                for (c, o) in out.iter_mut().enumerate() {
                    *o += b.log_p[c * b.width + v];
                }
            }
        }
        super::softmax(out);
    }
}

use super::Weighting;
use crate::matrix::{squared_distance as sq_dist, Matrix};

/// Brute-force k-nearest neighbours (Euclidean) with Laplace-smoothed
/// vote fractions: `p_c = (v_c + 1) / (k + K)`, where distance-weighted
/// votes are rescaled to sum to `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Knn {
    pub(crate) x: Matrix,
    pub(crate) y: Vec<usize>,
    pub(crate) n_classes: usize,
    pub(crate) k: usize,
    pub(crate) weighting: Weighting,
}

impl Knn {
    pub(crate) fn fit(x: Matrix, y: Vec<usize>, n_classes: usize, k: usize, weighting: Weighting) -> Self {
        Self {
            x,
            y,
            n_classes,
            k,
            weighting,
        }
    }

    pub(crate) fn predict_into(&self, q: &Matrix, rows: &[usize], out: &mut Matrix) {
        let mut buf = Vec::with_capacity(self.x.rows());
        for (o, &r) in rows.iter().enumerate() {
            self.predict_with(q.row(r), out.row_mut(o), &mut buf);
        }
    }

    pub(crate) fn predict_row_into(&self, q: &[f64], out: &mut [f64]) {
        let mut buf = Vec::with_capacity(self.x.rows());
        self.predict_with(q, out, &mut buf);
    }

    fn predict_with(&self, q: &[f64], out: &mut [f64], buf: &mut Vec<(f64, u32)>) {
        buf.clear();
        buf.extend(self.x.iter_rows().enumerate().map(|(i, row)| (sq_dist(q, row), i as u32)));
        let k = self.k.min(buf.len());
        let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < buf.len() {
            buf.select_nth_unstable_by(k - 1, cmp);
        }
        let nearest = &mut buf[..k];
        nearest.sort_unstable_by(cmp);

        let mut votes = vec![0.0; self.n_classes];
        match self.weighting {
            Weighting::Uniform => {
                for &(_, i) in nearest.iter() {
                    votes[self.y[i as usize]] += 1.0;
                }
            }
            Weighting::Distance => {
                let mut total = 0.0;
                for &(d2, i) in nearest.iter() {
                    let w = 1.0 / (d2.sqrt() + 1e-9);
                    votes[self.y[i as usize]] += w;
                    total += w;
                }
                votes.iter_mut().for_each(|v| *v *= k as f64 / total);
            }
        }
        let denom = k as f64 + self.n_classes as f64;
        for (o, v) in out.iter_mut().zip(&votes) {
            *o = (v + 1.0) / denom;
        }
    }
}

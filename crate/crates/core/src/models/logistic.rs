use crate::matrix::Matrix;

/// Multinomial logistic regression with an L2 penalty on the weights
/// (not the intercepts), fit by full-batch gradient descent with Armijo
/// backtracking.
#[derive(Debug, Clone, PartialEq)]
pub struct Logistic {
    pub(crate) n_classes: usize,
    /// `weights[c * d + j]`
    pub(crate) weights: Vec<f64>,
    pub(crate) bias: Vec<f64>,
}

const MAX_ITERS: usize = 300;
const GRAD_TOL: f64 = 1e-6;

struct Objective<'a> {
    x: &'a Matrix,
    y: &'a [usize],
    k: usize,
    lambda: f64,
}

impl Objective<'_> {
    /// Loss and, when `grad` is given, its gradient (weights then biases).
    fn eval(&self, theta: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let (n, d, k) = (self.x.rows(), self.x.cols(), self.k);
        let (w, b) = theta.split_at(k * d);
        let mut g = grad;
        if let Some(g) = g.as_deref_mut() {
            g.fill(0.0);
        }
        let mut loss = 0.0;
        let mut z = vec![0.0; k];
        for i in 0..n {
            let row = self.x.row(i);
            for c in 0..k {
                z[c] = b[c] + row.iter().zip(&w[c * d..(c + 1) * d]).map(|(a, b)| a * b).sum::<f64>();
            }
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - z[self.y[i]];
            if let Some(g) = g.as_deref_mut() {
                for c in 0..k {
                    let r = (z[c] - lse).exp() - if c == self.y[i] { 1.0 } else { 0.0 };
                    if r != 0.0 {
                        for (gj, xj) in g[c * d..(c + 1) * d].iter_mut().zip(row) {
                            *gj += r * xj;
                        }
                    }
                    g[k * d + c] += r;
                }
            }
        }
        let inv_n = 1.0 / n as f64;
        loss *= inv_n;
        loss += 0.5 * self.lambda * w.iter().map(|v| v * v).sum::<f64>();
        if let Some(g) = g {
            g.iter_mut().for_each(|v| *v *= inv_n);
            for (gj, wj) in g[..k * d].iter_mut().zip(w) {
                *gj += self.lambda * wj;
            }
        }
        loss
    }
}

impl Logistic {
    pub(crate) fn fit(x: &Matrix, y: &[usize], k: usize, lambda: f64) -> Self {
        let d = x.cols();
        let obj = Objective { x, y, k, lambda };
        let p = k * d + k;
        let mut theta = vec![0.0; p];
        let mut grad = vec![0.0; p];
        let mut loss = obj.eval(&theta, Some(&mut grad));
        let mut step = 1.0;
        let mut trial = vec![0.0; p];
        let mut trial_grad = vec![0.0; p];

        for _ in 0..MAX_ITERS {
            let gnorm2: f64 = grad.iter().map(|g| g * g).sum();
            if grad.iter().all(|g| g.abs() < GRAD_TOL) {
                break;
            }
            let mut accepted = false;
            while step > 1e-12 {
                for ((t, th), g) in trial.iter_mut().zip(&theta).zip(&grad) {
                    *t = th - step * g;
                }
                let l = obj.eval(&trial, Some(&mut trial_grad));
                if l <= loss - 1e-4 * step * gnorm2 {
                    let improvement = loss - l;
                    std::mem::swap(&mut theta, &mut trial);
                    std::mem::swap(&mut grad, &mut trial_grad);
                    loss = l;
                    accepted = improvement > 1e-14 * loss.abs().max(1.0);
                    step *= 2.0;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }

        let bias = theta.split_off(k * d);
        Self {
            n_classes: k,
            weights: theta,
            bias,
        }
    }

    pub(crate) fn predict_into(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.bias[c] + x.iter().zip(&self.weights[c * d..(c + 1) * d]).map(|(a, b)| a * b).sum::<f64>();
        }
        super::softmax(out);
    }
}

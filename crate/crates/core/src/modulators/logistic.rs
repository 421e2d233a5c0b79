//! Multinomial logistic regression with an L2 penalty on the weights,
//! trained by full-batch gradient descent with backtracking line search.

use serde::{Deserialize, Serialize};

use super::{dot, round_f32, softmax};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticParams {
    /// Penalty `l2 / 2 · ‖W‖²` added to the summed cross-entropy.
    pub l2: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LogisticParams {
    fn default() -> Self {
        LogisticParams {
            l2: 1.0,
            tol: 1e-6,
            max_iter: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub params: LogisticParams,
    pub classes: usize,
    pub dim: usize,
    /// Row-major `classes × dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub iterations: usize,
}

/// Mean objective and its gradient over the flat parameter vector
/// `[W (classes × dim, row-major) | b (classes)]`:
///
/// `J = (1/n) · ( Σ_i −log softmax(W x_i + b)[y_i] + l2/2 · ‖W‖² )`
pub fn objective(theta: &[f64], x: &[Vec<f64>], y: &[usize], classes: usize, l2: f64) -> (f64, Vec<f64>) {
    let n = x.len() as f64;
    let dim = x[0].len();
    let (w, b) = theta.split_at(classes * dim);
    let mut grad = vec![0.0; theta.len()];
    let mut loss = 0.0;
    for (xi, &yi) in x.iter().zip(y) {
        let logits: Vec<f64> = (0..classes).map(|c| dot(&w[c * dim..(c + 1) * dim], xi) + b[c]).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        loss += lse - logits[yi];
        for c in 0..classes {
            let r = (logits[c] - lse).exp() - if c == yi { 1.0 } else { 0.0 };
            let g = &mut grad[c * dim..(c + 1) * dim];
            for (gj, xj) in g.iter_mut().zip(xi) {
                *gj += r * xj;
            }
            grad[classes * dim + c] += r;
        }
    }
    let sq: f64 = w.iter().map(|v| v * v).sum();
    loss += 0.5 * l2 * sq;
    for (g, wv) in grad[..classes * dim].iter_mut().zip(w) {
        *g += l2 * wv;
    }
    for g in &mut grad {
        *g /= n;
    }
    (loss / n, grad)
}

pub(crate) fn fit(p: &LogisticParams, x: &[Vec<f64>], y: &[usize], classes: usize) -> Result<LogisticModel> {
    let dim = x[0].len();
    let mut theta = vec![0.0; classes * dim + classes];
    let (mut loss, mut grad) = objective(&theta, x, y, classes, p.l2);
    let mut step = 1.0;
    let mut iterations = 0;
    while iterations < p.max_iter {
        let gnorm2: f64 = grad.iter().map(|g| g * g).sum();
        if gnorm2.sqrt() <= p.tol {
            break;
        }
        iterations += 1;
        // Armijo backtracking from a step slightly larger than the last one.
        step *= 2.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t - step * g).collect();
            let (cl, cg) = objective(&cand, x, y, classes, p.l2);
            if cl <= loss - 0.5 * step * gnorm2 {
                theta = cand;
                loss = cl;
                grad = cg;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let mut weights = theta[..classes * dim].to_vec();
    let mut bias = theta[classes * dim..].to_vec();
    round_f32(&mut weights);
    round_f32(&mut bias);
    Ok(LogisticModel {
        params: p.clone(),
        classes,
        dim,
        weights,
        bias,
        iterations,
    })
}

impl LogisticModel {
    /// A model with all parameters zero.
    pub fn zeros(classes: usize, dim: usize) -> Self {
        LogisticModel {
            params: LogisticParams::default(),
            classes,
            dim,
            weights: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
            iterations: 0,
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| dot(&self.weights[c * self.dim..(c + 1) * self.dim], x) + self.bias[c])
            .collect()
    }

    pub(crate) fn proba(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    /// Flat parameters in the layout `objective` expects.
    pub fn theta(&self) -> Vec<f64> {
        let mut t = self.weights.clone();
        t.extend(&self.bias);
        t
    }

    /// Mean penalized cross-entropy of this model on `(x, y)`.
    pub fn loss(&self, x: &[Vec<f64>], y: &[usize]) -> f64 {
        objective(&self.theta(), x, y, self.classes, self.params.l2).0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modulators::{fit as fit_any, FittedModulator, ModulatorKind};

    #[test]
    fn separable_pair() {
        let x = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let m = fit_any(&ModulatorKind::default(), &x, &[0, 1], 2, 0).unwrap();
        assert_eq!(m.predict(&[1.0, 1.0]).unwrap(), 1);
        assert_eq!(m.predict(&[0.0, 0.0]).unwrap(), 0);
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = FittedModulator::Logistic(LogisticModel::zeros(3, 4));
        let p = m.predict_proba(&[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(m.predict(&[1.0, -2.0, 3.0, 0.5]).unwrap(), 0);
    }

    #[test]
    fn fit_descends_from_zero() {
        let x = vec![vec![0.1, 2.0], vec![1.0, -1.0], vec![-0.5, 0.3], vec![2.0, 0.0]];
        let y = [0, 1, 0, 2];
        let m = fit(&LogisticParams::default(), &x, &y, 3).unwrap();
        let zero = LogisticModel::zeros(3, 2).loss(&x, &y);
        assert!(m.loss(&x, &y) <= zero);
    }
}

//! One-vs-rest linear SVM: hinge loss plus L2, minimized per class by
//! full-batch subgradient descent with a `1/√t` step. The best iterate seen
//! is kept since subgradient steps are not monotone.

use serde::{Deserialize, Serialize};

use super::{dot, round_f32, softmax};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmParams {
    /// Inverse regularization, as in `½‖w‖² + C Σ hinge`.
    pub c: f64,
    pub max_iter: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams { c: 1.0, max_iter: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub params: SvmParams,
    pub classes: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Per-sample scaled objective `½λ‖w‖² + mean hinge` with `λ = 1/(C n)`.
fn objective(w: &[f64], b: f64, x: &[Vec<f64>], t: &[f64], lambda: f64) -> f64 {
    let hinge: f64 = x
        .iter()
        .zip(t)
        .map(|(xi, &ti)| (1.0 - ti * (dot(w, xi) + b)).max(0.0))
        .sum();
    0.5 * lambda * dot(w, w) + hinge / x.len() as f64
}

fn fit_binary(x: &[Vec<f64>], t: &[f64], lambda: f64, max_iter: usize) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let dim = x[0].len();
    let mean_sq = x.iter().map(|r| dot(r, r)).sum::<f64>() / n;
    let eta0 = 1.0 / (1.0 + mean_sq).sqrt();
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut best = (w.clone(), b, objective(&w, b, x, t, lambda));
    for iter in 1..=max_iter {
        let mut gw: Vec<f64> = w.iter().map(|v| lambda * v).collect();
        let mut gb = 0.0;
        for (xi, &ti) in x.iter().zip(t) {
            if ti * (dot(&w, xi) + b) < 1.0 {
                for (g, v) in gw.iter_mut().zip(xi) {
                    *g -= ti * v / n;
                }
                gb -= ti / n;
            }
        }
        let eta = eta0 / (iter as f64).sqrt();
        for (wv, g) in w.iter_mut().zip(&gw) {
            *wv -= eta * g;
        }
        b -= eta * gb;
        let obj = objective(&w, b, x, t, lambda);
        if obj < best.2 {
            best = (w.clone(), b, obj);
        }
    }
    (best.0, best.1)
}

pub(crate) fn fit(p: &SvmParams, x: &[Vec<f64>], y: &[usize], classes: usize) -> Result<SvmModel> {
    let dim = x[0].len();
    let lambda = 1.0 / (p.c * x.len() as f64);
    let mut weights = Vec::with_capacity(classes * dim);
    let mut bias = Vec::with_capacity(classes);
    for c in 0..classes {
        let t: Vec<f64> = y.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
        let (w, b) = fit_binary(x, &t, lambda, p.max_iter);
        weights.extend(w);
        bias.push(b);
    }
    round_f32(&mut weights);
    round_f32(&mut bias);
    Ok(SvmModel {
        params: p.clone(),
        classes,
        dim,
        weights,
        bias,
    })
}

impl SvmModel {
    pub fn margins(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| dot(&self.weights[c * self.dim..(c + 1) * self.dim], x) + self.bias[c])
            .collect()
    }

    /// Softmax over the raw one-vs-rest margins.
    pub(crate) fn proba(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.margins(x))
    }
}

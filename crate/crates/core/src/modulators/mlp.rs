//! One-hidden-layer ReLU network with a softmax output, trained with Adam on
//! shuffled mini-batches until the epoch loss stops improving.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{round_f32, softmax};
use crate::error::Result;
use crate::rng::{stream, Substream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpParams {
    pub hidden: usize,
    /// L2 penalty, applied as `alpha / (2 n) · ‖W‖²` per batch.
    pub alpha: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub tol: f64,
    pub n_iter_no_change: usize,
}

impl Default for MlpParams {
    fn default() -> Self {
        MlpParams {
            hidden: 100,
            alpha: 1e-4,
            learning_rate: 1e-3,
            max_epochs: 200,
            batch_size: 200,
            tol: 1e-4,
            n_iter_no_change: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpShape {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl MlpShape {
    pub fn len(&self) -> usize {
        self.hidden * self.input + self.hidden + self.classes * self.hidden + self.classes
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Offsets of W1, b1, W2, b2 in the flat parameter vector.
    fn offsets(&self) -> [usize; 4] {
        let w1 = 0;
        let b1 = w1 + self.hidden * self.input;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.classes * self.hidden;
        [w1, b1, w2, b2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub params: MlpParams,
    pub classes: usize,
    pub dim: usize,
    /// Flat `[W1 (hidden × dim) | b1 | W2 (classes × hidden) | b2]`.
    pub theta: Vec<f64>,
    pub epochs: usize,
}

fn forward(theta: &[f64], s: MlpShape, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let [w1, b1, w2, b2] = s.offsets();
    let z1: Vec<f64> = (0..s.hidden)
        .map(|h| {
            let row = &theta[w1 + h * s.input..w1 + (h + 1) * s.input];
            row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + theta[b1 + h]
        })
        .collect();
    let a1: Vec<f64> = z1.iter().map(|&z| z.max(0.0)).collect();
    let z2: Vec<f64> = (0..s.classes)
        .map(|c| {
            let row = &theta[w2 + c * s.hidden..w2 + (c + 1) * s.hidden];
            row.iter().zip(&a1).map(|(a, b)| a * b).sum::<f64>() + theta[b2 + c]
        })
        .collect();
    (z1, z2)
}

/// Mean cross-entropy plus `alpha / (2n) · (‖W1‖² + ‖W2‖²)` and its gradient.
pub fn loss_and_grad(theta: &[f64], s: MlpShape, x: &[Vec<f64>], y: &[usize], alpha: f64) -> (f64, Vec<f64>) {
    let [w1, b1, w2, b2] = s.offsets();
    let n = x.len() as f64;
    let mut grad = vec![0.0; theta.len()];
    let mut loss = 0.0;
    for (xi, &yi) in x.iter().zip(y) {
        let (z1, z2) = forward(theta, s, xi);
        let p = softmax(&z2);
        loss -= p[yi].max(1e-300).ln();
        let dz2: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(c, &pc)| pc - if c == yi { 1.0 } else { 0.0 })
            .collect();
        let mut da1 = vec![0.0; s.hidden];
        for c in 0..s.classes {
            grad[b2 + c] += dz2[c];
            for h in 0..s.hidden {
                let a = z1[h].max(0.0);
                grad[w2 + c * s.hidden + h] += dz2[c] * a;
                da1[h] += theta[w2 + c * s.hidden + h] * dz2[c];
            }
        }
        for h in 0..s.hidden {
            if z1[h] <= 0.0 {
                continue;
            }
            grad[b1 + h] += da1[h];
            let g = &mut grad[w1 + h * s.input..w1 + (h + 1) * s.input];
            for (gj, xj) in g.iter_mut().zip(xi) {
                *gj += da1[h] * xj;
            }
        }
    }
    let mut sq = 0.0;
    for range in [w1..b1, w2..b2] {
        for i in range {
            sq += theta[i] * theta[i];
            grad[i] += alpha * theta[i];
        }
    }
    for g in &mut grad {
        *g /= n;
    }
    (loss / n + 0.5 * alpha * sq / n, grad)
}

/// Glorot-uniform initialization for weights and biases of both layers.
pub fn init(s: MlpShape, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, Substream::Modulator);
    let [w1, b1, w2, b2] = s.offsets();
    let mut theta = vec![0.0; s.len()];
    let bound1 = (6.0 / (s.input + s.hidden) as f64).sqrt();
    let bound2 = (6.0 / (s.hidden + s.classes) as f64).sqrt();
    for (i, t) in theta.iter_mut().enumerate() {
        let bound = if i < w2 { bound1 } else { bound2 };
        *t = rng.random_range(-bound..bound);
    }
    debug_assert!(w1 < b1 && b1 < w2 && w2 < b2);
    theta
}

pub(crate) fn fit(p: &MlpParams, x: &[Vec<f64>], y: &[usize], classes: usize, seed: u64) -> Result<MlpModel> {
    let shape = MlpShape {
        input: x[0].len(),
        hidden: p.hidden,
        classes,
    };
    let mut theta = init(shape, seed);
    let mut rng = stream(seed.wrapping_add(1), Substream::Modulator);
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    let mut t = 0i32;
    let batch = p.batch_size.clamp(1, x.len());
    let mut order: Vec<usize> = (0..x.len()).collect();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut epochs = 0;
    for _ in 0..p.max_epochs {
        epochs += 1;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let bx: Vec<Vec<f64>> = chunk.iter().map(|&i| x[i].clone()).collect();
            let by: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let (loss, grad) = loss_and_grad(&theta, shape, &bx, &by, p.alpha);
            epoch_loss += loss * chunk.len() as f64;
            t += 1;
            let lr = p.learning_rate * (1.0 - beta2.powi(t)).sqrt() / (1.0 - beta1.powi(t));
            for i in 0..theta.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                theta[i] -= lr * m[i] / (v[i].sqrt() + eps);
            }
        }
        epoch_loss /= x.len() as f64;
        if epoch_loss > best - p.tol {
            stale += 1;
        } else {
            stale = 0;
        }
        best = best.min(epoch_loss);
        if stale > p.n_iter_no_change {
            break;
        }
    }
    round_f32(&mut theta);
    Ok(MlpModel {
        params: p.clone(),
        classes,
        dim: shape.input,
        theta,
        epochs,
    })
}

impl MlpModel {
    pub fn shape(&self) -> MlpShape {
        MlpShape {
            input: self.dim,
            hidden: self.params.hidden,
            classes: self.classes,
        }
    }

    pub(crate) fn proba(&self, x: &[f64]) -> Vec<f64> {
        softmax(&forward(&self.theta, self.shape(), x).1)
    }
}

//! k-nearest-neighbour vote under squared Euclidean distance. Equal
//! distances are broken by training order.

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnnParams {
    pub k: usize,
}

impl Default for KnnParams {
    fn default() -> Self {
        KnnParams { k: 5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    pub params: KnnParams,
    pub classes: usize,
    pub dim: usize,
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

pub(crate) fn fit(p: &KnnParams, x: &[Vec<f64>], y: &[usize], classes: usize) -> Result<KnnModel> {
    let mut points = x.to_vec();
    for row in &mut points {
        super::round_f32(row);
    }
    Ok(KnnModel {
        params: p.clone(),
        classes,
        dim: x[0].len(),
        points,
        labels: y.to_vec(),
    })
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KnnModel {
    /// Indices of the `min(k, n)` nearest stored points, nearest first.
    pub fn neighbors(&self, x: &[f64]) -> Vec<usize> {
        let mut d: Vec<(f64, usize)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| (squared_distance(p, x), i))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.into_iter().take(self.params.k).map(|(_, i)| i).collect()
    }

    /// Class frequencies among the neighbours.
    pub(crate) fn proba(&self, x: &[f64]) -> Vec<f64> {
        let nb = self.neighbors(x);
        let mut p = vec![0.0; self.classes];
        for &i in &nb {
            p[self.labels[i]] += 1.0;
        }
        let k = nb.len() as f64;
        p.iter_mut().for_each(|v| *v /= k);
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_prefer_earlier_points() {
        let x = vec![vec![1.0], vec![-1.0], vec![3.0]];
        let m = fit(&KnnParams { k: 1 }, &x, &[1, 0, 0], 2).unwrap();
        assert_eq!(m.neighbors(&[0.0]), vec![0]);
        assert_eq!(m.proba(&[0.0]), vec![0.0, 1.0]);
    }

    #[test]
    fn k_larger_than_n_uses_all() {
        let x = vec![vec![0.0], vec![1.0]];
        let m = fit(&KnnParams { k: 5 }, &x, &[0, 1], 2).unwrap();
        assert_eq!(m.proba(&[0.2]), vec![0.5, 0.5]);
    }
}

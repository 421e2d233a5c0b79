//! CART classification tree on Gini impurity, grown until leaves are pure or
//! too small to split. Leaves keep class counts so `predict_proba` returns
//! the leaf's class frequencies.

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    pub min_samples_split: usize,
    /// `None` grows without a depth limit.
    pub max_depth: Option<usize>,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            min_samples_split: 2,
            max_depth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    /// `x[feature] <= threshold` goes to `left`.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        counts: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeModel {
    pub params: TreeParams,
    pub classes: usize,
    pub dim: usize,
    /// Root at index 0.
    pub nodes: Vec<TreeNode>,
}

fn gini(counts: &[f64], total: f64) -> f64 {
    if total == 0.0 {
        return 0.0;
    }
    1.0 - counts.iter().map(|c| (c / total) * (c / total)).sum::<f64>()
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    classes: usize,
    params: &'a TreeParams,
    nodes: Vec<TreeNode>,
}

impl Builder<'_> {
    fn counts(&self, idx: &[usize]) -> Vec<f64> {
        let mut c = vec![0.0; self.classes];
        for &i in idx {
            c[self.y[i]] += 1.0;
        }
        c
    }

    /// Best `(feature, threshold)` by weighted child impurity. Scans features
    /// in order and thresholds ascending, keeping the first strict minimum.
    fn best_split(&self, idx: &[usize]) -> Option<(usize, f64)> {
        let n = idx.len() as f64;
        let total = self.counts(idx);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order = idx.to_vec();
        for f in 0..self.x[0].len() {
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let mut left = vec![0.0; self.classes];
            for pos in 0..order.len() - 1 {
                left[self.y[order[pos]]] += 1.0;
                let (a, b) = (self.x[order[pos]][f], self.x[order[pos + 1]][f]);
                if a == b {
                    continue;
                }
                let nl = (pos + 1) as f64;
                let right: Vec<f64> = total.iter().zip(&left).map(|(t, l)| t - l).collect();
                let imp = (nl * gini(&left, nl) + (n - nl) * gini(&right, n - nl)) / n;
                if best.is_none_or(|(bi, _, _)| imp < bi) {
                    // f32 so the threshold persists exactly
                    let mut t = (a + (b - a) / 2.0) as f32 as f64;
                    if t >= b || t < a {
                        t = a;
                    }
                    best = Some((imp, f, t));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        let counts = self.counts(&idx);
        let pure = counts.iter().filter(|&&c| c > 0.0).count() <= 1;
        let too_deep = self.params.max_depth.is_some_and(|d| depth >= d);
        self.nodes.push(TreeNode::Leaf { counts });
        if pure || too_deep || idx.len() < self.params.min_samples_split {
            return id;
        }
        let Some((feature, threshold)) = self.best_split(&idx) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id] = TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }
}

pub(crate) fn fit(p: &TreeParams, x: &[Vec<f64>], y: &[usize], classes: usize) -> Result<TreeModel> {
    let mut b = Builder {
        x,
        y,
        classes,
        params: p,
        nodes: Vec::new(),
    };
    b.grow((0..x.len()).collect(), 0);
    Ok(TreeModel {
        params: p.clone(),
        classes,
        dim: x[0].len(),
        nodes: b.nodes,
    })
}

impl TreeModel {
    pub fn leaf_counts(&self, x: &[f64]) -> &[f64] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
                TreeNode::Leaf { counts } => return counts,
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[TreeNode], i: usize) -> usize {
            match &nodes[i] {
                TreeNode::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
                TreeNode::Leaf { .. } => 0,
            }
        }
        go(&self.nodes, 0)
    }

    pub(crate) fn proba(&self, x: &[f64]) -> Vec<f64> {
        let c = self.leaf_counts(x);
        let total: f64 = c.iter().sum();
        c.iter().map(|v| v / total).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fits_training_data_exactly() {
        let x: Vec<Vec<f64>> = (0..12).map(|i| vec![(i % 4) as f64, (i / 4) as f64]).collect();
        let y: Vec<usize> = (0..12).map(|i| (i * 7 % 3) as usize).collect();
        let m = fit(&TreeParams::default(), &x, &y, 3).unwrap();
        for (xi, &yi) in x.iter().zip(&y) {
            assert_eq!(m.proba(xi)[yi], 1.0);
        }
    }

    #[test]
    fn threshold_is_midpoint_and_ties_pick_first_feature() {
        // both features separate perfectly; feature 0 must win
        let x = vec![vec![0.0, 10.0], vec![1.0, 20.0]];
        let m = fit(&TreeParams::default(), &x, &[0, 1], 2).unwrap();
        match &m.nodes[0] {
            TreeNode::Split { feature, threshold, .. } => {
                assert_eq!(*feature, 0);
                assert_eq!(*threshold, 0.5);
            }
            other => panic!("expected split, got {other:?}"),
        }
        assert_eq!(m.depth(), 1);
    }

    #[test]
    fn constant_features_make_a_leaf() {
        let x = vec![vec![1.0], vec![1.0], vec![1.0]];
        let m = fit(&TreeParams::default(), &x, &[0, 1, 1], 2).unwrap();
        assert_eq!(m.nodes.len(), 1);
        let p = m.proba(&[1.0]);
        assert!((p[1] - 2.0 / 3.0).abs() < 1e-15);
    }
}

//! Regression trees fitted to second-order gradient statistics.

use serde::{Deserialize, Serialize};

/// A node of a regression tree. Rows with `x[feature] < threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        weight: f64,
    },
}

impl TreeNode {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { weight } => return *weight,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[*feature] < *threshold {
                        left
                    } else {
                        right
                    };
                }
            }
        }
    }

    /// Number of split levels on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => left.leaf_count() + right.leaf_count(),
        }
    }

    pub fn leaves(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_leaves(&mut out);
        out
    }

    fn visit_leaves(&self, out: &mut Vec<f64>) {
        match self {
            TreeNode::Leaf { weight } => out.push(*weight),
            TreeNode::Split { left, right, .. } => {
                left.visit_leaves(out);
                right.visit_leaves(out);
            }
        }
    }

    pub fn max_feature(&self) -> Option<usize> {
        match self {
            TreeNode::Leaf { .. } => None,
            TreeNode::Split {
                feature,
                left,
                right,
                ..
            } => Some(
                (*feature)
                    .max(left.max_feature().unwrap_or(0))
                    .max(right.max_feature().unwrap_or(0)),
            ),
        }
    }

    pub fn all_finite(&self) -> bool {
        match self {
            TreeNode::Leaf { weight } => weight.is_finite(),
            TreeNode::Split {
                threshold,
                left,
                right,
                ..
            } => threshold.is_finite() && left.all_finite() && right.all_finite(),
        }
    }
}

pub(crate) struct TreeParams {
    pub max_depth: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub min_child_weight: f64,
}

/// Training view: row-major features plus per-row gradient and hessian.
pub(crate) struct GradStats<'a, const F: usize> {
    pub rows: &'a [[f64; F]],
    pub grad: &'a [f64],
    pub hess: &'a [f64],
}

pub(crate) fn leaf_weight(g: f64, h: f64, lambda: f64) -> f64 {
    let denom = h + lambda;
    if denom > 0.0 {
        -g / denom
    } else {
        0.0
    }
}

fn score(g: f64, h: f64, lambda: f64) -> f64 {
    let denom = h + lambda;
    if denom > 0.0 {
        g * g / denom
    } else {
        0.0
    }
}

struct Candidate {
    feature: usize,
    threshold: f64,
    gain: f64,
}

/// Grows one tree by exact greedy search. `sorted[f]` lists the node's rows
/// in ascending order of feature `f` (ties by row index).
pub(crate) fn grow<const F: usize>(
    stats: &GradStats<'_, F>,
    sorted: [Vec<usize>; F],
    depth: usize,
    params: &TreeParams,
) -> TreeNode {
    let (g, h) = sorted[0].iter().fold((0.0, 0.0), |(g, h), &i| {
        (g + stats.grad[i], h + stats.hess[i])
    });
    let leaf = TreeNode::Leaf {
        weight: leaf_weight(g, h, params.lambda),
    };
    if depth >= params.max_depth || sorted[0].len() < 2 {
        return leaf;
    }
    let parent = score(g, h, params.lambda);
    let mut best: Option<Candidate> = None;
    for (f, order) in sorted.iter().enumerate() {
        let (mut gl, mut hl) = (0.0, 0.0);
        for w in order.windows(2) {
            let (i, j) = (w[0], w[1]);
            gl += stats.grad[i];
            hl += stats.hess[i];
            let (a, b) = (stats.rows[i][f], stats.rows[j][f]);
            if b <= a {
                continue;
            }
            let (gr, hr) = (g - gl, h - hl);
            if hl < params.min_child_weight || hr < params.min_child_weight {
                continue;
            }
            let gain = 0.5 * (score(gl, hl, params.lambda) + score(gr, hr, params.lambda) - parent)
                - params.gamma;
            if gain > 0.0 && best.as_ref().is_none_or(|c| gain > c.gain) {
                best = Some(Candidate {
                    feature: f,
                    threshold: midpoint(a, b),
                    gain,
                });
            }
        }
    }
    let Some(best) = best else {
        return leaf;
    };
    let goes_left = |i: usize| stats.rows[i][best.feature] < best.threshold;
    let mut left: [Vec<usize>; F] = std::array::from_fn(|_| Vec::new());
    let mut right: [Vec<usize>; F] = std::array::from_fn(|_| Vec::new());
    for (f, order) in sorted.into_iter().enumerate() {
        let (l, r): (Vec<usize>, Vec<usize>) = order.into_iter().partition(|&i| goes_left(i));
        left[f] = l;
        right[f] = r;
    }
    TreeNode::Split {
        feature: best.feature,
        threshold: best.threshold,
        left: Box::new(grow(stats, left, depth + 1, params)),
        right: Box::new(grow(stats, right, depth + 1, params)),
    }
}

/// Threshold separating `a < b` such that `a < t <= b`.
fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    if a < m && m <= b {
        m
    } else {
        b
    }
}

pub(crate) fn presort<const F: usize>(rows: &[[f64; F]]) -> [Vec<usize>; F] {
    std::array::from_fn(|f| {
        let mut idx: Vec<usize> = (0..rows.len()).collect();
        idx.sort_by(|&i, &j| rows[i][f].total_cmp(&rows[j][f]).then(i.cmp(&j)));
        idx
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(max_depth: usize, gamma: f64) -> TreeParams {
        TreeParams {
            max_depth,
            gamma,
            lambda: 1.0,
            min_child_weight: 0.0,
        }
    }

    #[test]
    fn midpoint_stays_between_neighbours() {
        assert_eq!(midpoint(1.0, 3.0), 2.0);
        let a = 1.0f64;
        let b = f64::from_bits(a.to_bits() + 1);
        let t = midpoint(a, b);
        assert!(a < t && t <= b);
    }

    #[test]
    fn single_split_separates_gradients() {
        let rows = [[0.0], [1.0], [2.0], [3.0]];
        let grad = [1.0, 1.0, -1.0, -1.0];
        let hess = [1.0; 4];
        let stats = GradStats {
            rows: &rows,
            grad: &grad,
            hess: &hess,
        };
        let tree = grow(&stats, presort(&rows), 0, &params(3, 0.0));
        match &tree {
            TreeNode::Split {
                feature, threshold, ..
            } => {
                assert_eq!(*feature, 0);
                assert_eq!(*threshold, 1.5);
            }
            _ => panic!("expected a split"),
        }
        assert_eq!(tree.leaves(), vec![-2.0 / 3.0, 2.0 / 3.0]);
        assert_eq!(tree.predict(&[0.5]), -2.0 / 3.0);
        assert_eq!(tree.predict(&[1.5]), 2.0 / 3.0);
    }

    #[test]
    fn depth_limit_and_gamma() {
        let rows: Vec<[f64; 1]> = (0..16).map(|i| [i as f64]).collect();
        let grad: Vec<f64> = (0..16)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let hess = vec![1.0; 16];
        let stats = GradStats {
            rows: &rows,
            grad: &grad,
            hess: &hess,
        };
        let t = grow(&stats, presort(&rows), 0, &params(2, 0.0));
        assert!(t.depth() <= 2);
        let stump = grow(&stats, presort(&rows), 0, &params(6, 1e6));
        assert_eq!(stump.leaf_count(), 1);
    }

    #[test]
    fn equal_gains_prefer_lowest_feature() {
        // both features separate identically
        let rows = [[0.0, 0.0], [1.0, 1.0]];
        let grad = [1.0, -1.0];
        let hess = [1.0, 1.0];
        let stats = GradStats {
            rows: &rows,
            grad: &grad,
            hess: &hess,
        };
        let t = grow(&stats, presort(&rows), 0, &params(1, 0.0));
        assert!(matches!(t, TreeNode::Split { feature: 0, .. }));
    }
}

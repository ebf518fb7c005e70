//! Newton-boosted regression trees on the logistic loss.
//!
//! Binary problems fit a single score; `C > 2` fits one score per class
//! (one-vs-rest) and normalizes the sigmoids.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{clip_prob, sigmoid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// A single regression tree stored as a flat node arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if row[feature] < threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match nodes[at] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub min_child_weight: f64,
}

/// Fitted ensemble of boosted trees. `rounds[e][h]` is the tree added to
/// score head `h` at boosting round `e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub class_count: usize,
    pub base_scores: Vec<f64>,
    pub rounds: Vec<Vec<Tree>>,
}

impl GbdtModel {
    /// Model holding only the class-prior base scores.
    pub fn from_prior(labels: &[usize], class_count: usize) -> Self {
        let n = labels.len() as f64;
        let mut counts = vec![0usize; class_count];
        for &l in labels {
            counts[l] += 1;
        }
        let logit = |c: usize| {
            let p = clip_prob(c as f64 / n);
            (p / (1.0 - p)).ln()
        };
        let base_scores = if class_count == 2 {
            vec![logit(counts[1])]
        } else {
            counts.iter().map(|&c| logit(c)).collect()
        };
        Self {
            class_count,
            base_scores,
            rounds: Vec::new(),
        }
    }

    pub fn heads(&self) -> usize {
        self.base_scores.len()
    }

    /// Raw scores for `x` using the first `rounds` boosting rounds.
    pub fn raw_scores(&self, x: ArrayView2<f64>, rounds: usize) -> Array2<f64> {
        let heads = self.heads();
        let mut out = Array2::zeros((x.nrows(), heads));
        for (i, row) in x.rows().into_iter().enumerate() {
            let row = row.to_vec();
            for h in 0..heads {
                let mut s = self.base_scores[h];
                for round in self.rounds.iter().take(rounds) {
                    s += round[h].predict_row(&row);
                }
                out[[i, h]] = s;
            }
        }
        out
    }

    pub fn truncated(&self, rounds: usize) -> Self {
        Self {
            class_count: self.class_count,
            base_scores: self.base_scores.clone(),
            rounds: self.rounds.iter().take(rounds).cloned().collect(),
        }
    }
}

/// Probabilities from raw scores.
pub fn scores_to_proba(scores: &Array2<f64>, class_count: usize) -> Array2<f64> {
    let n = scores.nrows();
    let mut out = Array2::zeros((n, class_count));
    if class_count == 2 {
        for i in 0..n {
            let p = sigmoid(scores[[i, 0]]);
            out[[i, 0]] = 1.0 - p;
            out[[i, 1]] = p;
        }
    } else {
        for i in 0..n {
            let total: f64 = (0..class_count).map(|k| sigmoid(scores[[i, k]])).sum();
            for k in 0..class_count {
                out[[i, k]] = sigmoid(scores[[i, k]]) / total;
            }
        }
    }
    out
}

/// Sum of per-head logistic losses (mean over samples), the quantity each
/// boosting round decreases.
pub fn training_loss(scores: &Array2<f64>, labels: &[usize]) -> f64 {
    let heads = scores.ncols();
    let n = labels.len() as f64;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        for h in 0..heads {
            let target = head_target(heads, h, y);
            let s = scores[[i, h]];
            // log(1 + e^{-s}) for y=1, log(1 + e^{s}) for y=0, stable form
            let z = if target > 0.5 { -s } else { s };
            total += z.max(0.0) + (-z.abs()).exp().ln_1p();
        }
    }
    total / n
}

fn head_target(heads: usize, h: usize, y: usize) -> f64 {
    if heads == 1 {
        y as f64
    } else if y == h {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Default)]
struct Best {
    gain: f64,
    feature: usize,
    threshold: f64,
    found: bool,
}

/// Grow one tree level-wise by exact greedy search over presorted features.
pub fn grow_tree(
    x: ArrayView2<f64>,
    sorted: &[Vec<usize>],
    grad: &[f64],
    hess: &[f64],
    params: &TreeParams,
) -> Tree {
    let n = x.nrows();
    let d = x.ncols();
    let lambda = params.l2;
    let leaf_value = |g: f64, h: f64| -params.learning_rate * g / (h + lambda);
    let score = |g: f64, h: f64| g * g / (h + lambda);

    let mut nodes = vec![Node::Leaf(0.0)];
    // frontier position per row, usize::MAX once the row sits in a finished leaf
    let mut slot = vec![0usize; n];
    let mut frontier: Vec<usize> = vec![0];
    let mut totals = vec![(grad.iter().sum::<f64>(), hess.iter().sum::<f64>())];

    for _depth in 0..params.max_depth {
        if frontier.is_empty() {
            break;
        }
        let m = frontier.len();
        let mut best = vec![Best::default(); m];
        let mut left_g = vec![0.0; m];
        let mut left_h = vec![0.0; m];
        let mut last = vec![f64::NAN; m];
        for f in 0..d {
            left_g.iter_mut().for_each(|v| *v = 0.0);
            left_h.iter_mut().for_each(|v| *v = 0.0);
            last.iter_mut().for_each(|v| *v = f64::NAN);
            for &i in &sorted[f] {
                let k = slot[i];
                if k == usize::MAX {
                    continue;
                }
                let v = x[[i, f]];
                if !last[k].is_nan() && v > last[k] {
                    let (gt, ht) = totals[k];
                    let (gl, hl) = (left_g[k], left_h[k]);
                    let (gr, hr) = (gt - gl, ht - hl);
                    if hl >= params.min_child_weight && hr >= params.min_child_weight {
                        let gain = 0.5 * (score(gl, hl) + score(gr, hr) - score(gt, ht));
                        if gain > best[k].gain + 1e-12 {
                            best[k] = Best {
                                gain,
                                feature: f,
                                threshold: 0.5 * (last[k] + v),
                                found: true,
                            };
                        }
                    }
                }
                left_g[k] += grad[i];
                left_h[k] += hess[i];
                last[k] = v;
            }
        }

        let mut next_frontier = Vec::new();
        let mut next_totals = Vec::new();
        // new slot index for (frontier k, side)
        let mut child_slot = vec![[usize::MAX; 2]; m];
        for k in 0..m {
            let node = frontier[k];
            if best[k].found {
                let left = nodes.len();
                nodes.push(Node::Leaf(0.0));
                nodes.push(Node::Leaf(0.0));
                nodes[node] = Node::Split {
                    feature: best[k].feature,
                    threshold: best[k].threshold,
                    left,
                    right: left + 1,
                };
                child_slot[k] = [next_frontier.len(), next_frontier.len() + 1];
                next_frontier.push(left);
                next_frontier.push(left + 1);
                next_totals.push((0.0, 0.0));
                next_totals.push((0.0, 0.0));
            } else {
                let (g, h) = totals[k];
                nodes[node] = Node::Leaf(leaf_value(g, h));
            }
        }
        for i in 0..n {
            let k = slot[i];
            if k == usize::MAX {
                continue;
            }
            if !best[k].found {
                slot[i] = usize::MAX;
                continue;
            }
            let side = usize::from(x[[i, best[k].feature]] >= best[k].threshold);
            let s = child_slot[k][side];
            slot[i] = s;
            next_totals[s].0 += grad[i];
            next_totals[s].1 += hess[i];
        }
        frontier = next_frontier;
        totals = next_totals;
    }
    for (k, &node) in frontier.iter().enumerate() {
        let (g, h) = totals[k];
        nodes[node] = Node::Leaf(leaf_value(g, h));
    }
    Tree { nodes }
}

/// Per-feature row orderings used by [`grow_tree`].
pub fn presort(x: ArrayView2<f64>) -> Vec<Vec<usize>> {
    (0..x.ncols())
        .map(|f| {
            let mut idx: Vec<usize> = (0..x.nrows()).collect();
            idx.sort_by(|&a, &b| x[[a, f]].total_cmp(&x[[b, f]]).then(a.cmp(&b)));
            idx
        })
        .collect()
}

/// Gradient and hessian of the logistic loss for one head.
pub fn logistic_grad_hess(scores: &Array2<f64>, labels: &[usize], head: usize, grad: &mut [f64], hess: &mut [f64]) {
    let heads = scores.ncols();
    for (i, &y) in labels.iter().enumerate() {
        let p = sigmoid(scores[[i, head]]);
        grad[i] = p - head_target(heads, head, y);
        hess[i] = (p * (1.0 - p)).max(1e-16);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn stump_finds_midpoint() {
        let x = array![[0.0], [1.0], [2.0], [3.0]];
        let labels = [0, 0, 1, 1];
        let scores = Array2::zeros((4, 1));
        let mut g = vec![0.0; 4];
        let mut h = vec![0.0; 4];
        logistic_grad_hess(&scores, &labels, 0, &mut g, &mut h);
        let params = TreeParams {
            max_depth: 1,
            learning_rate: 1.0,
            l2: 0.0,
            min_child_weight: 0.0,
        };
        let tree = grow_tree(x.view(), &presort(x.view()), &g, &h, &params);
        match tree.nodes[0] {
            Node::Split { feature, threshold, .. } => {
                assert_eq!(feature, 0);
                assert_eq!(threshold, 1.5);
            }
            _ => panic!("expected split"),
        }
        assert!(tree.predict_row(&[0.0]) < 0.0);
        assert!(tree.predict_row(&[3.0]) > 0.0);
        assert_eq!(tree.depth(), 1);
    }

    #[test]
    fn pure_node_is_leaf() {
        let x = array![[0.0, 1.0], [1.0, 1.0]];
        let g = vec![0.0, 0.0];
        let h = vec![0.25, 0.25];
        let params = TreeParams {
            max_depth: 3,
            learning_rate: 0.1,
            l2: 1.0,
            min_child_weight: 0.0,
        };
        let tree = grow_tree(x.view(), &presort(x.view()), &g, &h, &params);
        assert_eq!(tree.nodes, vec![Node::Leaf(0.0)]);
    }

    #[test]
    fn prior_scores_reproduce_prior() {
        let labels = [0, 1, 2, 2, 2, 1];
        let m = GbdtModel::from_prior(&labels, 3);
        let x = Array2::zeros((2, 1));
        let p = scores_to_proba(&m.raw_scores(x.view(), 0), 3);
        for row in p.rows() {
            assert!((row[0] - 1.0 / 6.0).abs() < 1e-12);
            assert!((row[1] - 2.0 / 6.0).abs() < 1e-12);
            assert!((row[2] - 3.0 / 6.0).abs() < 1e-12);
        }
    }
}

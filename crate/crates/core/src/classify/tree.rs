//! CART decision trees with Gini impurity and per-split feature subsampling.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    /// Samples with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        positive_fraction: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    nodes: Vec<Node>,
}

/// Growth limits for one tree.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TreeParams {
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub max_features: usize,
}

impl DecisionTree {
    /// Grow a tree on `samples` (row indices into `x`, repeats allowed).
    pub(crate) fn fit<R: Rng>(
        x: &[Vec<f64>],
        y: &[bool],
        samples: Vec<usize>,
        params: TreeParams,
        rng: &mut R,
    ) -> DecisionTree {
        let n_features = x.first().map_or(0, Vec::len);
        let mut nodes = Vec::new();
        // (slot in `nodes`, samples, depth)
        let mut stack = vec![(0usize, samples, 0usize)];
        nodes.push(Node::Leaf { positive_fraction: 0.0 });
        let mut features: Vec<usize> = (0..n_features).collect();
        while let Some((slot, idx, depth)) = stack.pop() {
            let positives = idx.iter().filter(|&&i| y[i]).count();
            let fraction = positives as f64 / idx.len().max(1) as f64;
            let splittable = positives > 0
                && positives < idx.len()
                && idx.len() >= params.min_samples_split
                && params.max_depth.is_none_or(|d| depth < d);
            let split = if splittable {
                features.shuffle(rng);
                best_split(x, y, &idx, &features, params.max_features)
            } else {
                None
            };
            let Some((feature, threshold)) = split else {
                nodes[slot] = Node::Leaf {
                    positive_fraction: fraction,
                };
                continue;
            };
            let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
                idx.into_iter().partition(|&i| x[i][feature] <= threshold);
            let left = nodes.len();
            nodes.push(Node::Leaf { positive_fraction: 0.0 });
            let right = nodes.len();
            nodes.push(Node::Leaf { positive_fraction: 0.0 });
            nodes[slot] = Node::Split {
                feature,
                threshold,
                left,
                right,
            };
            stack.push((right, right_idx, depth + 1));
            stack.push((left, left_idx, depth + 1));
        }
        DecisionTree { nodes }
    }

    /// Fraction of positive training samples in the leaf `row` falls into.
    pub fn leaf_fraction(&self, row: &[f64]) -> f64 {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                Node::Leaf { positive_fraction } => return *positive_fraction,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => k = if row[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    /// Hard vote; an evenly split leaf votes negative.
    pub fn vote(&self, row: &[f64]) -> bool {
        self.leaf_fraction(row) > 0.5
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], k: usize) -> usize {
            match &nodes[k] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

/// Best Gini split over the first `max_features` non-constant features in
/// `order`. Features beyond the first `max_features` are only tried while
/// every one inspected so far has been constant on the node.
fn best_split(
    x: &[Vec<f64>],
    y: &[bool],
    idx: &[usize],
    order: &[usize],
    max_features: usize,
) -> Option<(usize, f64)> {
    let total = idx.len() as f64;
    let total_pos = idx.iter().filter(|&&i| y[i]).count() as f64;
    let mut best: Option<(f64, usize, f64)> = None;
    let mut useful = 0;
    let mut sorted = idx.to_vec();
    for (tried, &f) in order.iter().enumerate() {
        if tried >= max_features && useful > 0 {
            break;
        }
        sorted.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]));
        if x[sorted[0]][f] == x[sorted[sorted.len() - 1]][f] {
            continue;
        }
        useful += 1;
        // maximise sum over children of (pos^2 + neg^2) / n, i.e. minimise weighted Gini
        let mut left_n = 0.0;
        let mut left_pos = 0.0;
        for w in 0..sorted.len() - 1 {
            left_n += 1.0;
            if y[sorted[w]] {
                left_pos += 1.0;
            }
            let (a, b) = (x[sorted[w]][f], x[sorted[w + 1]][f]);
            if a == b {
                continue;
            }
            let left_neg = left_n - left_pos;
            let right_n = total - left_n;
            let right_pos = total_pos - left_pos;
            let right_neg = right_n - right_pos;
            let score = (left_pos * left_pos + left_neg * left_neg) / left_n
                + (right_pos * right_pos + right_neg * right_neg) / right_n;
            if best.is_none_or(|(s, _, _)| score > s) {
                let mid = a + (b - a) / 2.0;
                let threshold = if mid < b { mid } else { a };
                best = Some((score, f, threshold));
            }
        }
    }
    best.map(|(_, f, t)| (f, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> TreeParams {
        TreeParams {
            max_depth: None,
            min_samples_split: 2,
            max_features: 1,
        }
    }

    #[test]
    fn fits_training_data_exactly() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![(i % 7) as f64, i as f64]).collect();
        let y: Vec<bool> = (0..40).map(|i| (i * 37 % 11) < 5).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tree = DecisionTree::fit(&x, &y, (0..40).collect(), params(), &mut rng);
        for (row, &label) in x.iter().zip(&y) {
            assert_eq!(tree.vote(row), label);
        }
    }

    #[test]
    fn constant_features_make_a_leaf() {
        let x = vec![vec![1.0]; 4];
        let y = vec![true, false, true, true];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tree = DecisionTree::fit(&x, &y, (0..4).collect(), params(), &mut rng);
        assert_eq!(tree.node_count(), 1);
        assert_eq!(tree.leaf_fraction(&[1.0]), 0.75);
    }

    #[test]
    fn depth_limit_is_respected() {
        let x: Vec<Vec<f64>> = (0..64).map(|i| vec![i as f64]).collect();
        let y: Vec<bool> = (0..64).map(|i| i % 2 == 0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = TreeParams {
            max_depth: Some(3),
            ..params()
        };
        let tree = DecisionTree::fit(&x, &y, (0..64).collect(), p, &mut rng);
        assert!(tree.depth() <= 3);
    }

    #[test]
    fn threshold_separates_adjacent_floats() {
        let a = 1.0f64;
        let b = f64::from_bits(a.to_bits() + 1);
        let x = vec![vec![a], vec![b]];
        let y = vec![false, true];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tree = DecisionTree::fit(&x, &y, vec![0, 1], params(), &mut rng);
        assert!(!tree.vote(&[a]));
        assert!(tree.vote(&[b]));
    }
}

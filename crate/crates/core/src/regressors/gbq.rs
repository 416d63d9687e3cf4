//! Gradient-boosted regression trees for quantile prediction.
//!
//! The ensemble starts from the empirical alpha-quantile of the training
//! demand. Each tree is grown greedily on the negative pinball
//! subgradients with variance-reduction splits, and each leaf outputs the
//! empirical alpha-quantile of the current residuals in that leaf (the
//! exact in-leaf minimizer of the pinball loss), scaled by the learning
//! rate.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::loss::QuantileLevel;
use crate::rng::RngStream;
use crate::stats::empirical_quantile;

use super::{check_dim, QuantileLearner, QuantileModel};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbqConfig {
    /// Number of boosted trees. Zero yields the constant baseline model.
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_leaf: usize,
    /// Row fraction drawn (without replacement) per tree.
    pub subsample: f64,
    pub seed: u64,
}

impl Default for GbqConfig {
    fn default() -> Self {
        Self {
            n_trees: 200,
            max_depth: 3,
            learning_rate: 0.05,
            min_leaf: 10,
            subsample: 1.0,
            seed: 0,
        }
    }
}

impl GbqConfig {
    /// A faster, shallower preset in the spirit of large-scale boosting
    /// frameworks.
    pub fn light() -> Self {
        Self {
            n_trees: 300,
            max_depth: 5,
            learning_rate: 0.1,
            min_leaf: 20,
            subsample: 0.9,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_depth == 0 {
            return Err(Error::InvalidParameter("max_depth must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::InvalidParameter(
                "learning_rate must lie in (0,1]".into(),
            ));
        }
        if self.min_leaf == 0 {
            return Err(Error::InvalidParameter("min_leaf must be >= 1".into()));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::InvalidParameter(
                "subsample must lie in (0,1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum TreeNode {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<TreeNode>,
    root: usize,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut node = self.root;
        loop {
            match self.nodes[node] {
                TreeNode::Leaf { value } => return value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }
}

/// A fitted boosted-tree quantile model.
#[derive(Debug)]
pub struct GbqModel {
    baseline: f64,
    trees: Vec<Tree>,
    alpha: QuantileLevel,
    dim: usize,
}

impl GbqModel {
    pub fn baseline(&self) -> f64 {
        self.baseline
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }
}

impl QuantileModel for GbqModel {
    fn alpha(&self) -> QuantileLevel {
        self.alpha
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn predict(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x)?;
        let mut acc = self.baseline;
        for tree in &self.trees {
            acc += tree.predict(x);
        }
        Ok(acc)
    }
}

struct TreeBuilder<'a> {
    train: &'a Dataset,
    grad: &'a [f64],
    residual: &'a [f64],
    config: &'a GbqConfig,
    alpha: f64,
    nodes: Vec<TreeNode>,
}

impl TreeBuilder<'_> {
    fn grow(&mut self, rows: &mut [usize], depth: usize) -> usize {
        if depth < self.config.max_depth && rows.len() >= 2 * self.config.min_leaf {
            if let Some((feature, threshold, split_at)) = self.best_split(rows) {
                // partition in place: stable order not required, the split
                // search re-sorts each node
                rows.sort_unstable_by(|&a, &b| {
                    self.train.row(a)[feature]
                        .total_cmp(&self.train.row(b)[feature])
                        .then(a.cmp(&b))
                });
                let (left_rows, right_rows) = rows.split_at_mut(split_at);
                let left = self.grow(left_rows, depth + 1);
                let right = self.grow(right_rows, depth + 1);
                self.nodes.push(TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                });
                return self.nodes.len() - 1;
            }
        }
        let leaf_residuals: Vec<f64> = rows.iter().map(|&i| self.residual[i]).collect();
        let value = empirical_quantile(&leaf_residuals, self.alpha) * self.config.learning_rate;
        self.nodes.push(TreeNode::Leaf { value });
        self.nodes.len() - 1
    }

    /// Best (feature, threshold, position) by gradient variance reduction;
    /// ties resolve to the first candidate in (feature, position) order.
    fn best_split(&self, rows: &[usize]) -> Option<(usize, f64, usize)> {
        let len = rows.len();
        let total: f64 = rows.iter().map(|&i| self.grad[i]).sum();
        let base_score = total * total / len as f64;
        let mut best: Option<(f64, usize, f64, usize)> = None;
        let mut order: Vec<usize> = rows.to_vec();
        for feature in 0..self.train.dim() {
            order.sort_unstable_by(|&a, &b| {
                self.train.row(a)[feature]
                    .total_cmp(&self.train.row(b)[feature])
                    .then(a.cmp(&b))
            });
            let mut left_sum = 0.0;
            for pos in 1..len {
                left_sum += self.grad[order[pos - 1]];
                if pos < self.config.min_leaf || len - pos < self.config.min_leaf {
                    continue;
                }
                let lo = self.train.row(order[pos - 1])[feature];
                let hi = self.train.row(order[pos])[feature];
                if lo == hi {
                    continue;
                }
                let right_sum = total - left_sum;
                let gain = left_sum * left_sum / pos as f64
                    + right_sum * right_sum / (len - pos) as f64
                    - base_score;
                if gain > 1e-12 && best.is_none_or(|(g, ..)| gain > g) {
                    best = Some((gain, feature, 0.5 * (lo + hi), pos));
                }
            }
        }
        best.map(|(_, feature, threshold, pos)| (feature, threshold, pos))
    }
}

pub fn fit_gbq(train: &Dataset, alpha: QuantileLevel, config: &GbqConfig) -> Result<GbqModel> {
    config.validate()?;
    let n = train.len();
    if config.min_leaf > n {
        return Err(Error::DegenerateTree {
            min_leaf: config.min_leaf,
            n,
        });
    }
    let a = alpha.get();
    let baseline = empirical_quantile(train.demand(), a);
    let mut predictions = vec![baseline; n];
    let mut trees = Vec::with_capacity(config.n_trees);
    let mut residual = vec![0.0; n];
    let mut grad = vec![0.0; n];

    for t in 0..config.n_trees {
        for i in 0..n {
            let y = train.demand()[i];
            residual[i] = y - predictions[i];
            grad[i] = if y > predictions[i] {
                a
            } else if y < predictions[i] {
                -(1.0 - a)
            } else {
                0.0
            };
        }
        let mut rows: Vec<usize> = if config.subsample < 1.0 {
            let k = ((config.subsample * n as f64).floor() as usize).max(1);
            let mut sampled = RngStream::new(config.seed, t as u64).sample_indices(n, k.min(n));
            sampled.sort_unstable();
            sampled
        } else {
            (0..n).collect()
        };
        if rows.len() < config.min_leaf {
            break;
        }
        let mut builder = TreeBuilder {
            train,
            grad: &grad,
            residual: &residual,
            config,
            alpha: a,
            nodes: Vec::new(),
        };
        let root = builder.grow(&mut rows, 0);
        let tree = Tree {
            nodes: builder.nodes,
            root,
        };
        for i in 0..n {
            predictions[i] += tree.predict(train.row(i));
        }
        trees.push(tree);
    }

    Ok(GbqModel {
        baseline,
        trees,
        alpha,
        dim: train.dim(),
    })
}

/// Learner wrapper around [`fit_gbq`].
#[derive(Debug, Clone, Default)]
pub struct GbqLearner {
    pub config: GbqConfig,
}

impl GbqLearner {
    pub fn new(config: GbqConfig) -> Self {
        Self { config }
    }
}

impl QuantileLearner for GbqLearner {
    fn name(&self) -> String {
        "gbq".into()
    }
    fn fit(&self, train: &Dataset, alpha: QuantileLevel) -> Result<Box<dyn QuantileModel>> {
        Ok(Box::new(fit_gbq(train, alpha, &self.config)?))
    }
}

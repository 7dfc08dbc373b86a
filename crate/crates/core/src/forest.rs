//! Multi-output random forest over dense real features.
//!
//! Every leaf stores the positive fraction of each of the 19 labels; a split
//! minimizes the summed per-label Gini impurity weighted by node size.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Labels;
use crate::{seed, Error, Result, N_LABELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    /// `None` means `⌈√d⌉`.
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            max_depth: None,
            min_samples_leaf: 1,
            features_per_split: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::Config("n_trees must be at least 1".into()));
        }
        if self.max_depth == Some(0) {
            return Err(Error::Config("max_depth must be positive when set".into()));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::Config("min_samples_leaf must be positive".into()));
        }
        if self.features_per_split == Some(0) {
            return Err(Error::Config(
                "features_per_split must be positive when set".into(),
            ));
        }
        Ok(())
    }

    fn split_features(&self, d: usize) -> usize {
        self.features_per_split
            .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize)
            .clamp(1, d.max(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        positive_fraction: Vec<f64>,
    },
    /// Samples with `x[feature] < threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn predict(&self, x: &[f64]) -> &[f64] {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { positive_fraction } => return positive_fraction,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[*feature] < *threshold {
                        *left
                    } else {
                        *right
                    }
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    n_features: usize,
    trees: Vec<Tree>,
}

impl Forest {
    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    /// Builds a forest from explicit trees, e.g. to average duplicated trees.
    pub fn from_trees(n_features: usize, trees: Vec<Tree>) -> Result<Forest> {
        if trees.is_empty() {
            return Err(Error::Empty("forest needs at least one tree".into()));
        }
        Ok(Forest { n_features, trees })
    }
}

/// Size-weighted summed Gini impurity `Σ_ℓ 2·c_ℓ·(n − c_ℓ) / n`.
pub fn weighted_gini(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    counts
        .iter()
        .map(|&c| 2.0 * c as f64 * (n - c) as f64 / nf)
        .sum()
}

fn label_counts(samples: &[usize], labels: &[Labels]) -> [usize; N_LABELS] {
    let mut counts = [0usize; N_LABELS];
    for &s in samples {
        for (c, &y) in counts.iter_mut().zip(&labels[s]) {
            *c += y as usize;
        }
    }
    counts
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [Labels],
    config: &'a ForestConfig,
    m: usize,
    nodes: Vec<Node>,
}

struct Candidate {
    impurity: f64,
    feature: usize,
    threshold: f64,
}

impl Builder<'_> {
    fn leaf(&mut self, samples: &[usize], counts: &[usize; N_LABELS]) -> usize {
        let n = samples.len() as f64;
        self.nodes.push(Node::Leaf {
            positive_fraction: counts.iter().map(|&c| c as f64 / n).collect(),
        });
        self.nodes.len() - 1
    }

    fn best_split_on(
        &self,
        samples: &[usize],
        feature: usize,
        order: &mut Vec<(f64, usize)>,
    ) -> Option<Candidate> {
        order.clear();
        order.extend(samples.iter().map(|&s| (self.x[s][feature], s)));
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let n = order.len();
        let total = label_counts(samples, self.y);
        let mut left = [0usize; N_LABELS];
        let mut best: Option<Candidate> = None;
        let msl = self.config.min_samples_leaf;
        for i in 0..n - 1 {
            for (c, &v) in left.iter_mut().zip(&self.y[order[i].1]) {
                *c += v as usize;
            }
            let (lo, hi) = (order[i].0, order[i + 1].0);
            let n_left = i + 1;
            if lo >= hi || n_left < msl || n - n_left < msl {
                continue;
            }
            let mut right = [0usize; N_LABELS];
            for ((r, &t), &l) in right.iter_mut().zip(&total).zip(&left) {
                *r = t - l;
            }
            let impurity = weighted_gini(&left, n_left) + weighted_gini(&right, n - n_left);
            if best.as_ref().is_none_or(|b| impurity < b.impurity) {
                let mut threshold = lo + (hi - lo) / 2.0;
                if threshold <= lo {
                    threshold = hi;
                }
                best = Some(Candidate {
                    impurity,
                    feature,
                    threshold,
                });
            }
        }
        best
    }

    fn grow<R: Rng>(&mut self, samples: &[usize], depth: usize, rng: &mut R) -> usize {
        let counts = label_counts(samples, self.y);
        let n = samples.len();
        let pure = weighted_gini(&counts, n) == 0.0;
        let depth_capped = self.config.max_depth.is_some_and(|d| depth >= d);
        if pure || depth_capped || n < 2 * self.config.min_samples_leaf {
            return self.leaf(samples, &counts);
        }

        let d = self.x[0].len();
        let mut features: Vec<usize> = (0..d).collect();
        features.shuffle(rng);
        let mut order = Vec::with_capacity(n);
        let mut best: Option<Candidate> = None;
        let mut evaluated = 0;
        for &f in &features {
            if evaluated == self.m {
                break;
            }
            let first = self.x[samples[0]][f];
            if samples.iter().all(|&s| self.x[s][f] == first) {
                continue;
            }
            evaluated += 1;
            if let Some(c) = self.best_split_on(samples, f, &mut order) {
                let better = match &best {
                    None => true,
                    Some(b) => {
                        c.impurity < b.impurity
                            || (c.impurity == b.impurity
                                && (c.feature, c.threshold) < (b.feature, b.threshold))
                    }
                };
                if better {
                    best = Some(c);
                }
            }
        }

        let Some(split) = best else {
            return self.leaf(samples, &counts);
        };
        let (left, right): (Vec<usize>, Vec<usize>) = samples
            .iter()
            .partition(|&&s| self.x[s][split.feature] < split.threshold);
        let at = self.nodes.len();
        self.nodes.push(Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: 0,
            right: 0,
        });
        let l = self.grow(&left, depth + 1, rng);
        let r = self.grow(&right, depth + 1, rng);
        if let Node::Split { left, right, .. } = &mut self.nodes[at] {
            *left = l;
            *right = r;
        }
        at
    }
}

fn check_features(features: &[Vec<f64>]) -> Result<usize> {
    let d = features.first().map_or(0, Vec::len);
    for (i, row) in features.iter().enumerate() {
        if row.len() != d {
            return Err(Error::Shape(format!(
                "row {i} has {} features, expected {d}",
                row.len()
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integrity(format!(
                "row {i} has a non-finite feature"
            )));
        }
    }
    Ok(d)
}

pub fn forest_fit(
    features: &[Vec<f64>],
    labels: &[Labels],
    config: &ForestConfig,
) -> Result<Forest> {
    config.validate()?;
    if features.is_empty() {
        return Err(Error::Empty("forest_fit needs at least one sample".into()));
    }
    if features.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} feature rows but {} label rows",
            features.len(),
            labels.len()
        )));
    }
    let d = check_features(features)?;
    let n = features.len();
    let m = config.split_features(d);
    let trees = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = seed::rng(config.seed, &[0xF0_2E57, t as u64]);
            let mut samples: Vec<usize> = if config.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            samples.sort_unstable();
            let mut builder = Builder {
                x: features,
                y: labels,
                config,
                m,
                nodes: Vec::new(),
            };
            if d == 0 {
                let counts = label_counts(&samples, labels);
                builder.leaf(&samples, &counts);
            } else {
                builder.grow(&samples, 0, &mut rng);
            }
            Tree {
                nodes: builder.nodes,
            }
        })
        .collect();
    Ok(Forest {
        n_features: d,
        trees,
    })
}

/// Per sample, the mean over trees of each leaf's positive fraction.
pub fn forest_predict(forest: &Forest, features: &[Vec<f64>]) -> Result<Vec<[f64; N_LABELS]>> {
    let d = check_features(features)?;
    if !features.is_empty() && d != forest.n_features {
        return Err(Error::Shape(format!(
            "forest fitted on {} features, got {d}",
            forest.n_features
        )));
    }
    let k = forest.trees.len() as f64;
    Ok(features
        .par_iter()
        .map(|x| {
            let mut out = [0.0; N_LABELS];
            for tree in &forest.trees {
                for (o, p) in out.iter_mut().zip(tree.predict(x)) {
                    *o += p;
                }
            }
            out.iter_mut().for_each(|o| *o /= k);
            out
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_tree() -> ForestConfig {
        ForestConfig {
            n_trees: 1,
            bootstrap: false,
            ..ForestConfig::default()
        }
    }

    fn label(bits: &[usize]) -> Labels {
        let mut l = [0u8; N_LABELS];
        bits.iter().for_each(|&b| l[b] = 1);
        l
    }

    #[test]
    fn identical_labels_give_a_pure_root() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let y = vec![label(&[2, 5]); 10];
        let f = forest_fit(&x, &y, &ForestConfig::default()).unwrap();
        for p in forest_predict(&f, &x).unwrap() {
            assert_eq!(p, label(&[2, 5]).map(f64::from));
        }
        assert!(f.trees().iter().all(|t| t.nodes().len() == 1));
    }

    #[test]
    fn recovers_threshold_at_one_half() {
        let x: Vec<Vec<f64>> = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
            .iter()
            .map(|&v| vec![v])
            .collect();
        let y: Vec<Labels> = x
            .iter()
            .map(|r| if r[0] >= 0.5 { label(&[0]) } else { label(&[]) })
            .collect();
        let f = forest_fit(&x, &y, &single_tree()).unwrap();
        match &f.trees()[0].nodes()[0] {
            Node::Split {
                feature, threshold, ..
            } => {
                assert_eq!(*feature, 0);
                assert!((threshold - 0.5).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
        let p = forest_predict(&f, &x).unwrap();
        for (pi, yi) in p.iter().zip(&y) {
            assert_eq!(pi[0], yi[0] as f64);
        }
    }

    #[test]
    fn constant_features_give_single_leaves() {
        let x = vec![vec![1.0, 2.0]; 6];
        let y: Vec<Labels> = (0..6)
            .map(|i| label(if i % 2 == 0 { &[1] } else { &[] }))
            .collect();
        let f = forest_fit(&x, &y, &single_tree()).unwrap();
        assert_eq!(f.trees()[0].nodes().len(), 1);
        assert_eq!(forest_predict(&f, &x[..1]).unwrap()[0][1], 0.5);
    }

    #[test]
    fn unlimited_single_tree_memorizes() {
        let mut rng = seed::rng(3, &[]);
        let x: Vec<Vec<f64>> = (0..60)
            .map(|_| (0..5).map(|_| rng.random::<f64>()).collect())
            .collect();
        let y: Vec<Labels> = (0..60)
            .map(|_| {
                let mut l = [0u8; N_LABELS];
                l.iter_mut().for_each(|v| *v = rng.random_range(0..2));
                l
            })
            .collect();
        let cfg = ForestConfig {
            features_per_split: Some(5),
            ..single_tree()
        };
        let f = forest_fit(&x, &y, &cfg).unwrap();
        for (p, l) in forest_predict(&f, &x).unwrap().iter().zip(&y) {
            assert_eq!(*p, l.map(f64::from));
        }
    }

    #[test]
    fn same_seed_same_forest() {
        let mut rng = seed::rng(9, &[]);
        let x: Vec<Vec<f64>> = (0..80)
            .map(|_| (0..9).map(|_| rng.random::<f64>()).collect())
            .collect();
        let y: Vec<Labels> = x
            .iter()
            .map(|r| label(if r[0] + r[3] > 1.0 { &[4] } else { &[7] }))
            .collect();
        let cfg = ForestConfig {
            n_trees: 12,
            seed: 5,
            ..ForestConfig::default()
        };
        let a = forest_fit(&x, &y, &cfg).unwrap();
        let b = forest_fit(&x, &y, &cfg).unwrap();
        assert_eq!(a, b);
        let c = forest_fit(&x, &y, &ForestConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn duplicated_trees_leave_predictions_unchanged() {
        let x: Vec<Vec<f64>> = (0..30)
            .map(|i| vec![(i % 7) as f64, (i % 3) as f64])
            .collect();
        let y: Vec<Labels> = (0..30)
            .map(|i| label(if i % 7 > 3 { &[0] } else { &[1] }))
            .collect();
        let f = forest_fit(
            &x,
            &y,
            &ForestConfig {
                n_trees: 5,
                ..ForestConfig::default()
            },
        )
        .unwrap();
        let doubled: Vec<Tree> = f.trees().iter().chain(f.trees()).cloned().collect();
        let g = Forest::from_trees(2, doubled).unwrap();
        let (pf, pg) = (
            forest_predict(&f, &x).unwrap(),
            forest_predict(&g, &x).unwrap(),
        );
        for (a, b) in pf.iter().zip(&pg) {
            for (u, v) in a.iter().zip(b) {
                assert!((u - v).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn pure_leaf_tree_predicts_zero_or_one() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let y: Vec<Labels> = (0..10)
            .map(|i| label(if i < 4 { &[3] } else { &[] }))
            .collect();
        let f = forest_fit(&x, &y, &single_tree()).unwrap();
        for p in forest_predict(&f, &x).unwrap() {
            assert!(p.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn max_depth_and_min_leaf_are_respected() {
        let x: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64]).collect();
        let y: Vec<Labels> = (0..50)
            .map(|i| label(if i % 2 == 0 { &[0] } else { &[] }))
            .collect();
        let f = forest_fit(
            &x,
            &y,
            &ForestConfig {
                max_depth: Some(3),
                ..single_tree()
            },
        )
        .unwrap();
        assert!(f.trees()[0].depth() <= 3);
        let g = forest_fit(
            &x,
            &y,
            &ForestConfig {
                min_samples_leaf: 10,
                ..single_tree()
            },
        )
        .unwrap();
        for node in g.trees()[0].nodes() {
            if let Node::Split {
                feature: _,
                threshold,
                ..
            } = node
            {
                let left = x.iter().filter(|r| r[0] < *threshold).count();
                assert!(left >= 10 || 50 - left >= 10);
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        let y = vec![label(&[]); 2];
        assert!(matches!(
            forest_fit(&[], &[], &ForestConfig::default()),
            Err(Error::Empty(_))
        ));
        assert!(matches!(
            forest_fit(&[vec![1.0], vec![1.0, 2.0]], &y, &ForestConfig::default()),
            Err(Error::Shape(_))
        ));
        assert!(forest_fit(
            &[vec![1.0]],
            &y[..1],
            &ForestConfig {
                n_trees: 0,
                ..ForestConfig::default()
            }
        )
        .is_err());
        let f = forest_fit(&[vec![1.0]], &y[..1], &ForestConfig::default()).unwrap();
        assert!(matches!(
            forest_predict(&f, &[vec![1.0, 2.0]]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn weighted_gini_closed_forms() {
        assert_eq!(weighted_gini(&[2, 0], 4), 2.0);
        assert_eq!(weighted_gini(&[4, 0], 4), 0.0);
        assert_eq!(weighted_gini(&[], 0), 0.0);
    }
}

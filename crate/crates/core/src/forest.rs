//! Probabilistic random forests of CART trees with Gini splits and
//! surrogate splits for missing features.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn gini_impurity(pos: usize, neg: usize) -> Result<f64> {
    let n = pos + neg;
    if n == 0 {
        return Err(Error::invalid("impurity of an empty node"));
    }
    Ok(gini(pos as f64, n as f64))
}

fn gini(pos: f64, n: f64) -> f64 {
    let p = pos / n;
    2.0 * p * (1.0 - p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

/// Best Gini split of `rows` over `features`.
///
/// Rows missing a feature do not enter that feature's impurity computation;
/// the gain is scaled by the non-missing fraction so features with many
/// gaps are not favoured.
pub fn best_split(
    x: &[Vec<f64>],
    y: &[bool],
    rows: &[usize],
    features: &[usize],
    min_leaf: usize,
) -> Option<Split> {
    let min_leaf = min_leaf.max(1);
    let mut best: Option<Split> = None;
    let mut vals: Vec<(f64, bool)> = Vec::with_capacity(rows.len());
    for &f in features {
        vals.clear();
        vals.extend(rows.iter().filter(|&&r| x[r][f].is_finite()).map(|&r| (x[r][f], y[r])));
        let n = vals.len();
        if n < 2 * min_leaf {
            continue;
        }
        vals.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total_pos = vals.iter().filter(|v| v.1).count() as f64;
        let nf = n as f64;
        let parent = gini(total_pos, nf);
        let scale = nf / rows.len() as f64;
        let mut left_pos = 0.0;
        for i in 0..n - 1 {
            if vals[i].1 {
                left_pos += 1.0;
            }
            let nl = (i + 1) as f64;
            if vals[i].0 == vals[i + 1].0 || i + 1 < min_leaf || n - i - 1 < min_leaf {
                continue;
            }
            let nr = nf - nl;
            let child = (nl * gini(left_pos, nl) + nr * gini(total_pos - left_pos, nr)) / nf;
            let gain = (parent - child) * scale;
            if gain > 1e-12 && best.map_or(true, |b| gain > b.gain) {
                best = Some(Split { feature: f, threshold: 0.5 * (vals[i].0 + vals[i + 1].0), gain });
            }
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Surrogate {
    pub feature: usize,
    pub threshold: f64,
    /// When set, `x ≤ threshold` routes right instead of left.
    pub reversed: bool,
    pub agreement: f64,
}

impl Surrogate {
    fn goes_left(&self, v: f64) -> bool {
        (v <= self.threshold) != self.reversed
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateSet {
    /// Ranked by agreement, best first.
    pub surrogates: Vec<Surrogate>,
    /// Agreement reached by always following the majority side.
    pub baseline: f64,
    pub default_left: bool,
}

/// Alternative splits ranked by how well they reproduce the primary
/// partition on rows where both features are present.
pub fn build_surrogates(
    x: &[Vec<f64>],
    rows: &[usize],
    primary: &Split,
    candidates: &[usize],
    max_surrogates: usize,
) -> SurrogateSet {
    let sides: Vec<(usize, bool)> = rows
        .iter()
        .filter(|&&r| x[r][primary.feature].is_finite())
        .map(|&r| (r, x[r][primary.feature] <= primary.threshold))
        .collect();
    let n_left = sides.iter().filter(|s| s.1).count();
    let default_left = 2 * n_left >= sides.len();
    let baseline = if sides.is_empty() {
        0.0
    } else {
        n_left.max(sides.len() - n_left) as f64 / sides.len() as f64
    };

    let mut found = Vec::new();
    let mut vals: Vec<(f64, bool)> = Vec::with_capacity(sides.len());
    for &f in candidates {
        if f == primary.feature {
            continue;
        }
        vals.clear();
        vals.extend(sides.iter().filter(|(r, _)| x[*r][f].is_finite()).map(|(r, l)| (x[*r][f], *l)));
        let n = vals.len();
        if n < 2 {
            continue;
        }
        vals.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total_left = vals.iter().filter(|v| v.1).count();
        let mut below_left = 0;
        let mut best: Option<(usize, f64, bool)> = None;
        for i in 0..n - 1 {
            if vals[i].1 {
                below_left += 1;
            }
            if vals[i].0 == vals[i + 1].0 {
                continue;
            }
            let below = i + 1;
            let above_right = (n - below) - (total_left - below_left);
            let normal = below_left + above_right;
            let reversed = n - normal;
            let (agree, rev) = if reversed > normal { (reversed, true) } else { (normal, false) };
            if best.map_or(true, |b| agree > b.0) {
                best = Some((agree, 0.5 * (vals[i].0 + vals[i + 1].0), rev));
            }
        }
        if let Some((agree, threshold, reversed)) = best {
            found.push(Surrogate { feature: f, threshold, reversed, agreement: agree as f64 / n as f64 });
        }
    }
    found.sort_by(|a, b| b.agreement.total_cmp(&a.agreement).then(a.feature.cmp(&b.feature)));
    found.truncate(max_surrogates);
    SurrogateSet { surrogates: found, baseline, default_left }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    Leaf {
        positive_fraction: f64,
        sample_count: usize,
    },
    Internal {
        feature: usize,
        threshold: f64,
        surrogates: Vec<Surrogate>,
        default_left: bool,
        left: usize,
        right: usize,
    },
}

/// Nodes in an arena; the root is node 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    fn leaf_for(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { positive_fraction, .. } => return *positive_fraction,
                TreeNode::Internal { feature, threshold, surrogates, default_left, left, right } => {
                    let go_left = route(x, *feature, *threshold, surrogates, *default_left);
                    i = if go_left { *left } else { *right };
                }
            }
        }
    }

    /// Checks child indices: in range, pointing forward, each used once.
    pub fn validate(&self, n_features: usize) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Corrupted("empty tree".into()));
        }
        let mut seen = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            match node {
                TreeNode::Leaf { positive_fraction, .. } => {
                    if !(0.0..=1.0).contains(positive_fraction) {
                        return Err(Error::Corrupted(format!("node {i}: leaf fraction out of range")));
                    }
                }
                TreeNode::Internal { feature, left, right, surrogates, .. } => {
                    if *feature >= n_features || surrogates.iter().any(|s| s.feature >= n_features) {
                        return Err(Error::Corrupted(format!("node {i}: feature index out of range")));
                    }
                    for &c in [left, right] {
                        if c <= i || c >= self.nodes.len() || seen[c] {
                            return Err(Error::Corrupted(format!("node {i}: bad child index {c}")));
                        }
                        seen[c] = true;
                    }
                }
            }
        }
        Ok(())
    }
}

fn route(x: &[f64], feature: usize, threshold: f64, surrogates: &[Surrogate], default_left: bool) -> bool {
    let v = x[feature];
    if v.is_finite() {
        return v <= threshold;
    }
    surrogates
        .iter()
        .find(|s| x[s.feature].is_finite())
        .map_or(default_left, |s| s.goes_left(x[s.feature]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Defaults to `ceil(√F)`.
    pub features_per_split: Option<usize>,
    pub min_leaf: usize,
    pub max_surrogates: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self { n_trees: 50, features_per_split: None, min_leaf: 5, max_surrogates: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub n_trees: usize,
    pub features_per_split: usize,
    pub min_leaf: usize,
    pub max_surrogates: usize,
    pub seed: u64,
    pub n_features: usize,
}

/// Out-of-bag mean prediction per training row (`None` if always in-bag).
#[derive(Debug, Clone, PartialEq)]
pub struct OobEstimate {
    pub predictions: Vec<Option<f64>>,
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [bool],
    mtry: usize,
    min_leaf: usize,
    max_surrogates: usize,
    nodes: Vec<TreeNode>,
}

impl Builder<'_> {
    fn leaf(&mut self, rows: &[usize]) -> usize {
        let pos = rows.iter().filter(|&&r| self.y[r]).count();
        self.nodes.push(TreeNode::Leaf {
            positive_fraction: pos as f64 / rows.len() as f64,
            sample_count: rows.len(),
        });
        self.nodes.len() - 1
    }

    fn grow(&mut self, rows: Vec<usize>, rng: &mut ChaCha8Rng) -> usize {
        let pos = rows.iter().filter(|&&r| self.y[r]).count();
        let n_feat = self.x[0].len();
        if rows.len() < 2 * self.min_leaf || pos == 0 || pos == rows.len() || n_feat == 0 {
            return self.leaf(&rows);
        }
        let mut cand: Vec<usize> = sample(rng, n_feat, self.mtry.min(n_feat)).into_vec();
        cand.sort_unstable();
        let Some(split) = best_split(self.x, self.y, &rows, &cand, self.min_leaf) else {
            return self.leaf(&rows);
        };
        let sur = build_surrogates(self.x, &rows, &split, &cand, self.max_surrogates);
        let surrogates: Vec<Surrogate> =
            sur.surrogates.into_iter().filter(|s| s.agreement > sur.baseline).collect();
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| {
            route(&self.x[r], split.feature, split.threshold, &surrogates, sur.default_left)
        });
        if left_rows.is_empty() || right_rows.is_empty() {
            return self.leaf(&rows);
        }
        let idx = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { positive_fraction: 0.0, sample_count: 0 });
        let left = self.grow(left_rows, rng);
        let right = self.grow(right_rows, rng);
        self.nodes[idx] = TreeNode::Internal {
            feature: split.feature,
            threshold: split.threshold,
            surrogates,
            default_left: sur.default_left,
            left,
            right,
        };
        idx
    }
}

fn tree_rng(seed: u64, tree: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tree as u64 + 1);
    rng
}

/// Fits a forest and its out-of-bag estimate.
pub fn fit_forest_with_oob(x: &[Vec<f64>], y: &[bool], params: &ForestParams) -> Result<(Forest, OobEstimate)> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::dim("feature rows and labels must be non-empty and equal in length"));
    }
    let n_features = x[0].len();
    if x.iter().any(|r| r.len() != n_features) {
        return Err(Error::dim("ragged feature matrix"));
    }
    let pos = y.iter().filter(|&&v| v).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::invalid("training labels contain a single class"));
    }
    if params.n_trees == 0 {
        return Err(Error::invalid("forest needs at least one tree"));
    }
    let mtry = params
        .features_per_split
        .unwrap_or_else(|| (n_features as f64).sqrt().ceil() as usize)
        .clamp(1, n_features.max(1));
    let n = x.len();
    let grown: Vec<(Tree, Vec<bool>)> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = tree_rng(params.seed, t);
            let mut in_bag = vec![false; n];
            let rows: Vec<usize> = (0..n)
                .map(|_| {
                    let r = rng.random_range(0..n);
                    in_bag[r] = true;
                    r
                })
                .collect();
            let mut b = Builder {
                x,
                y,
                mtry,
                min_leaf: params.min_leaf.max(1),
                max_surrogates: params.max_surrogates,
                nodes: Vec::new(),
            };
            b.grow(rows, &mut rng);
            (Tree { nodes: b.nodes }, in_bag)
        })
        .collect();

    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    for (tree, in_bag) in &grown {
        for r in 0..n {
            if !in_bag[r] {
                sums[r] += tree.leaf_for(&x[r]);
                counts[r] += 1;
            }
        }
    }
    let oob = OobEstimate {
        predictions: sums.iter().zip(&counts).map(|(s, &c)| (c > 0).then(|| s / c as f64)).collect(),
    };
    let forest = Forest {
        trees: grown.into_iter().map(|(t, _)| t).collect(),
        n_trees: params.n_trees,
        features_per_split: mtry,
        min_leaf: params.min_leaf,
        max_surrogates: params.max_surrogates,
        seed: params.seed,
        n_features,
    };
    Ok((forest, oob))
}

pub fn fit_forest(x: &[Vec<f64>], y: &[bool], params: &ForestParams) -> Result<Forest> {
    fit_forest_with_oob(x, y, params).map(|(f, _)| f)
}

impl Forest {
    /// Mean reached-leaf positive fraction over trees.
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(Error::SchemaMismatch(format!(
                "forest expects {} features, got {}",
                self.n_features,
                x.len()
            )));
        }
        let s: f64 = self.trees.iter().map(|t| t.leaf_for(x)).sum();
        Ok((s / self.trees.len() as f64).clamp(0.0, 1.0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.trees.is_empty() || self.trees.len() != self.n_trees {
            return Err(Error::Corrupted("tree count does not match n_trees".into()));
        }
        self.trees.iter().try_for_each(|t| t.validate(self.n_features))
    }
}

/// Classifier for one factor: a single forest for binary factors, one
/// one-vs-rest forest per value otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorClassifier {
    pub cardinality: usize,
    pub forests: Vec<Forest>,
}

impl FactorClassifier {
    pub fn fit(x: &[Vec<f64>], labels: &[usize], cardinality: usize, params: &ForestParams) -> Result<Self> {
        if cardinality == 2 {
            let y: Vec<bool> = labels.iter().map(|&v| v == 1).collect();
            return Ok(Self { cardinality, forests: vec![fit_forest(x, &y, params)?] });
        }
        let forests = (0..cardinality)
            .map(|v| {
                let y: Vec<bool> = labels.iter().map(|&l| l == v).collect();
                let p = ForestParams { seed: params.seed.wrapping_add(v as u64 * 7919), ..*params };
                fit_forest(x, &y, &p)
            })
            .collect::<Result<_>>()?;
        Ok(Self { cardinality, forests })
    }

    /// Distribution over the factor's values.
    pub fn marginal(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.cardinality == 2 {
            let p = self.forests[0].predict_proba(x)?;
            return Ok(vec![1.0 - p, p]);
        }
        let raw: Vec<f64> = self.forests.iter().map(|f| f.predict_proba(x)).collect::<Result<_>>()?;
        let s: f64 = raw.iter().sum();
        if s > 0.0 {
            Ok(raw.iter().map(|p| p / s).collect())
        } else {
            Ok(vec![1.0 / self.cardinality as f64; self.cardinality])
        }
    }

    pub fn n_features(&self) -> usize {
        self.forests[0].n_features
    }

    pub fn validate(&self) -> Result<()> {
        let expected = if self.cardinality == 2 { 1 } else { self.cardinality };
        if self.forests.len() != expected {
            return Err(Error::Corrupted("classifier forest count does not match cardinality".into()));
        }
        self.forests.iter().try_for_each(Forest::validate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gini_examples() {
        assert_eq!(gini_impurity(5, 5).unwrap(), 0.5);
        assert_eq!(gini_impurity(10, 0).unwrap(), 0.0);
        assert!((gini_impurity(3, 1).unwrap() - 0.375).abs() < 1e-15);
        assert!(gini_impurity(0, 0).is_err());
    }

    #[test]
    fn split_examples() {
        let x: Vec<Vec<f64>> = [1.0, 2.0, 3.0, 4.0].iter().map(|&v| vec![v, 7.0]).collect();
        let y = [true, true, false, false];
        let s = best_split(&x, &y, &[0, 1, 2, 3], &[0, 1], 1).unwrap();
        assert_eq!((s.feature, s.threshold), (0, 2.5));
        assert!((s.gain - 0.5).abs() < 1e-15);
        assert!(best_split(&x, &y, &[0, 1, 2, 3], &[1], 1).is_none());
    }

    #[test]
    fn duplicate_column_is_perfect_surrogate() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64, i as f64, (i * 7 % 13) as f64]).collect();
        let y: Vec<bool> = (0..40).map(|i| i >= 20).collect();
        let rows: Vec<usize> = (0..40).collect();
        let s = best_split(&x, &y, &rows, &[0], 1).unwrap();
        let set = build_surrogates(&x, &rows, &s, &[0, 1, 2], 5);
        assert_eq!(set.surrogates[0].feature, 1);
        assert_eq!(set.surrogates[0].agreement, 1.0);
        assert!(build_surrogates(&x, &rows, &s, &[0], 5).surrogates.is_empty());
    }

    #[test]
    fn single_leaf_forest() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let y: Vec<bool> = (0..20).map(|i| i % 4 == 0).collect();
        let p = ForestParams { n_trees: 1, min_leaf: 20, ..Default::default() };
        let f = fit_forest(&x, &y, &p).unwrap();
        assert_eq!(f.trees[0].nodes.len(), 1);
        let TreeNode::Leaf { positive_fraction, sample_count } = f.trees[0].nodes[0] else { panic!() };
        assert_eq!(sample_count, 20);
        // bootstrap prior of the single leaf
        assert!((0.0..=1.0).contains(&positive_fraction));
        assert_eq!(f.predict_proba(&[3.0]).unwrap(), positive_fraction);
    }

    #[test]
    fn missing_inputs_route_by_default() {
        let x: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64, (i % 10) as f64]).collect();
        let y: Vec<bool> = (0..100).map(|i| i >= 50).collect();
        let f = fit_forest(&x, &y, &ForestParams { n_trees: 5, ..Default::default() }).unwrap();
        let p = f.predict_proba(&[f64::NAN, f64::NAN]).unwrap();
        assert!((0.0..=1.0).contains(&p));
        assert!(f.predict_proba(&[1.0]).is_err());
    }

    #[test]
    fn averaging_and_pure_leaves() {
        let leaf = |p: f64| Tree { nodes: vec![TreeNode::Leaf { positive_fraction: p, sample_count: 1 }] };
        let mut f = Forest {
            trees: vec![leaf(0.2), leaf(0.6)],
            n_trees: 2,
            features_per_split: 1,
            min_leaf: 1,
            max_surrogates: 0,
            seed: 0,
            n_features: 1,
        };
        assert!((f.predict_proba(&[0.0]).unwrap() - 0.4).abs() < 1e-15);
        f.trees = vec![leaf(1.0), leaf(1.0)];
        assert_eq!(f.predict_proba(&[0.0]).unwrap(), 1.0);
    }

    #[test]
    fn corrupted_children_rejected() {
        let t = Tree {
            nodes: vec![
                TreeNode::Internal {
                    feature: 0,
                    threshold: 0.0,
                    surrogates: vec![],
                    default_left: true,
                    left: 1,
                    right: 5,
                },
                TreeNode::Leaf { positive_fraction: 0.0, sample_count: 1 },
            ],
        };
        assert!(t.validate(1).is_err());
    }

    #[test]
    fn seeded_forests_are_identical() {
        let x: Vec<Vec<f64>> = (0..200).map(|i| vec![(i * 37 % 101) as f64, (i % 7) as f64, i as f64]).collect();
        let y: Vec<bool> = (0..200).map(|i| (i * 37 % 101) > 50).collect();
        let p = ForestParams { n_trees: 8, seed: 42, ..Default::default() };
        assert_eq!(fit_forest(&x, &y, &p).unwrap(), fit_forest(&x, &y, &p).unwrap());
    }

    #[test]
    fn multiclass_marginal_sums_to_one() {
        let x: Vec<Vec<f64>> = (0..90).map(|i| vec![i as f64]).collect();
        let labels: Vec<usize> = (0..90).map(|i| i / 30).collect();
        let c = FactorClassifier::fit(&x, &labels, 3, &ForestParams { n_trees: 5, ..Default::default() }).unwrap();
        let m = c.marginal(&[45.0]).unwrap();
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(m[1] > m[0] && m[1] > m[2]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn monotone_transform_invariance(seed in 0u64..1000) {
            let x: Vec<Vec<f64>> = (0..120)
                .map(|i| vec![((i as u64 * 31 + seed) % 97) as f64, ((i as u64 * 17 + seed) % 53) as f64])
                .collect();
            let y: Vec<bool> = x.iter().map(|r| r[0] + 0.5 * r[1] > 60.0).collect();
            let p = ForestParams { n_trees: 4, seed, ..Default::default() };
            let a = fit_forest(&x, &y, &p).unwrap();
            // Any increasing map keeps the partitions of the training rows.
            let xe: Vec<Vec<f64>> = x.iter().map(|r| vec![r[0].exp() / 1e20, r[1]]).collect();
            let e = fit_forest(&xe, &y, &p).unwrap();
            let shape = |f: &Forest| -> Vec<Vec<String>> {
                f.trees.iter().map(|t| t.nodes.iter().map(|n| match n {
                    TreeNode::Leaf { positive_fraction, sample_count } => format!("{positive_fraction}/{sample_count}"),
                    TreeNode::Internal { feature, left, right, .. } => format!("{feature}:{left}:{right}"),
                }).collect()).collect()
            };
            prop_assert_eq!(shape(&a), shape(&e));
            // Midpoint thresholds also commute with increasing affine maps,
            // so predictions on unseen rows agree as well.
            let xt: Vec<Vec<f64>> = x.iter().map(|r| vec![3.0 * r[0] + 7.0, r[1]]).collect();
            let b = fit_forest(&xt, &y, &p).unwrap();
            for (ra, rb) in x.iter().zip(&xt) {
                prop_assert_eq!(a.predict_proba(ra).unwrap(), b.predict_proba(rb).unwrap());
            }
        }
    }
}

//! Deterministic policy trees and stochastic mixtures of trees.
//!
//! A depth-`H` policy tree fixes a root action and, for every observation, a
//! depth-`H-1` subtree. Its successor feature matrix obeys
//!
//!   A^pi = F_a + gamma * sum_o A^{pi(o)} T_ao
//!
//! bottoming out at the zero matrix below depth 1. A stochastic policy is a
//! mixture of trees; executing one samples a root action by total weight and,
//! after seeing (a, o), filters to the consistent trees, renormalizes, and
//! descends to the children.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SfError};
use crate::model::PsrModel;

/// Default cap on the number of trees [`enumerate_trees`] will produce.
pub const ENUMERATION_CAP: usize = 1_000_000;

/// An immutable, structurally shared policy tree. Leaves (depth 1) have no
/// children; internal nodes have one child per observation.
#[derive(Debug, PartialEq, Eq)]
pub struct PolicyTree {
    pub action: usize,
    pub children: Vec<Arc<PolicyTree>>,
}

impl PolicyTree {
    pub fn leaf(action: usize) -> Arc<Self> {
        Arc::new(Self {
            action,
            children: Vec::new(),
        })
    }

    pub fn node(action: usize, children: Vec<Arc<PolicyTree>>) -> Arc<Self> {
        Arc::new(Self { action, children })
    }

    pub fn depth(&self) -> usize {
        match self.children.first() {
            None => 1,
            Some(c) => 1 + c.depth(),
        }
    }

    /// Balanced-tree check against a model's observation count.
    pub fn check(&self, num_actions: usize, num_observations: usize) -> Result<()> {
        if self.action >= num_actions {
            return Err(SfError::InvalidInput(format!(
                "tree action {} out of range",
                self.action
            )));
        }
        if !self.children.is_empty() {
            if self.children.len() != num_observations {
                return Err(SfError::DimensionMismatch(format!(
                    "internal node has {} children, expected {num_observations}",
                    self.children.len()
                )));
            }
            let d = self.children[0].depth();
            for c in &self.children {
                if c.depth() != d {
                    return Err(SfError::InvalidInput("tree is not balanced".into()));
                }
                c.check(num_actions, num_observations)?;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&TreeFile::from_tree(self)).expect("tree serializes")
    }

    pub fn from_json(s: &str) -> Result<Arc<Self>> {
        let file: TreeFile = serde_json::from_str(s)?;
        Ok(file.into_tree())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TreeFile {
    a: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    children: Vec<TreeFile>,
}

impl TreeFile {
    fn from_tree(t: &PolicyTree) -> Self {
        Self {
            a: t.action,
            children: t.children.iter().map(|c| Self::from_tree(c)).collect(),
        }
    }

    fn into_tree(self) -> Arc<PolicyTree> {
        PolicyTree::node(
            self.a,
            self.children.into_iter().map(|c| c.into_tree()).collect(),
        )
    }
}

/// A stochastic policy: a finite mixture of same-depth trees.
#[derive(Debug, Clone)]
pub struct PolicyMixture {
    pub trees: Vec<Arc<PolicyTree>>,
    pub weights: Vec<f64>,
}

impl PolicyMixture {
    pub fn new(trees: Vec<Arc<PolicyTree>>, weights: Vec<f64>) -> Result<Self> {
        if trees.is_empty() || trees.len() != weights.len() {
            return Err(SfError::InvalidInput(
                "mixture needs matching nonempty trees and weights".into(),
            ));
        }
        let depth = trees[0].depth();
        if trees.iter().any(|t| t.depth() != depth) {
            return Err(SfError::InvalidInput(
                "all mixture trees must share a depth".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| w < -1e-12) || (sum - 1.0).abs() > 1e-12 {
            return Err(SfError::InvalidInput(
                "mixture weights must lie on the simplex".into(),
            ));
        }
        Ok(Self { trees, weights })
    }

    pub fn single(tree: Arc<PolicyTree>) -> Self {
        Self {
            trees: vec![tree],
            weights: vec![1.0],
        }
    }

    pub fn depth(&self) -> usize {
        self.trees[0].depth()
    }

    /// Probability of playing `a` at the root: total weight of trees rooted
    /// at `a`.
    pub fn action_probability(&self, a: usize) -> f64 {
        self.trees
            .iter()
            .zip(&self.weights)
            .filter(|(t, _)| t.action == a)
            .map(|(_, &w)| w)
            .sum()
    }

    /// Samples a root action by total weight.
    pub fn sample_action<R: Rng>(&self, rng: &mut R) -> usize {
        let mut x: f64 = rng.gen::<f64>();
        for (t, &w) in self.trees.iter().zip(&self.weights) {
            if x < w {
                return t.action;
            }
            x -= w;
        }
        self.trees[self.trees.len() - 1].action
    }

    /// Conditions the mixture on having played `a` and seen `o`: keeps trees
    /// rooted at `a`, renormalizes, and descends to the `o`-children.
    pub fn condition(&self, a: usize, o: usize) -> Result<PolicyMixture> {
        let mut trees = Vec::new();
        let mut weights = Vec::new();
        for (t, &w) in self.trees.iter().zip(&self.weights) {
            if t.action == a && w > 0.0 {
                if t.children.is_empty() {
                    return Err(SfError::InvalidInput(
                        "cannot condition past the leaves".into(),
                    ));
                }
                trees.push(Arc::clone(&t.children[o]));
                weights.push(w);
            }
        }
        let total: f64 = weights.iter().sum();
        if trees.is_empty() || total <= 0.0 {
            return Err(SfError::DegenerateMixture);
        }
        for w in &mut weights {
            *w /= total;
        }
        Ok(PolicyMixture { trees, weights })
    }
}

/// Samples a root action and returns it with the post-(a, o) conditioning
/// left to [`PolicyMixture::condition`].
pub fn execute_mixture_step<R: Rng>(mix: &PolicyMixture, rng: &mut R) -> usize {
    mix.sample_action(rng)
}

/// Successor feature matrix of a deterministic tree:
/// `A^pi = F_a + gamma * sum_o A^{pi(o)} T_ao`.
pub fn successor_matrix(model: &PsrModel, tree: &PolicyTree) -> DMatrix<f64> {
    let mut memo: HashMap<*const PolicyTree, DMatrix<f64>> = HashMap::new();
    successor_matrix_memo(model, tree, &mut memo)
}

fn successor_matrix_memo(
    model: &PsrModel,
    tree: &PolicyTree,
    memo: &mut HashMap<*const PolicyTree, DMatrix<f64>>,
) -> DMatrix<f64> {
    let key = tree as *const PolicyTree;
    if let Some(m) = memo.get(&key) {
        return m.clone();
    }
    let mut a_mat = model.f[tree.action].clone();
    if !tree.children.is_empty() {
        for (o, child) in tree.children.iter().enumerate() {
            let child_mat = successor_matrix_memo(model, child, memo);
            a_mat += child_mat * &model.t[tree.action][o] * model.gamma;
        }
    }
    memo.insert(key, a_mat.clone());
    a_mat
}

/// Weight-weighted sum of per-tree successor matrices.
pub fn successor_matrix_mixture(model: &PsrModel, mix: &PolicyMixture) -> DMatrix<f64> {
    let mut memo: HashMap<*const PolicyTree, DMatrix<f64>> = HashMap::new();
    let mut out = DMatrix::zeros(model.d, model.k);
    for (t, &w) in mix.trees.iter().zip(&mix.weights) {
        out += successor_matrix_memo(model, t, &mut memo) * w;
    }
    out
}

/// Number of trees for `num_actions` actions, `num_observations` observations
/// at depth `h`, as a float (may overflow to infinity).
pub fn tree_count(num_actions: usize, num_observations: usize, h: usize) -> f64 {
    let nodes: f64 = if num_observations <= 1 {
        h as f64
    } else {
        let o = num_observations as f64;
        (o.powi(h as i32) - 1.0) / (o - 1.0)
    };
    (nodes * (num_actions as f64).ln()).exp()
}

/// Enumerates every balanced depth-`h` tree exactly once, in lexicographic
/// order of (root action, children tuple). Subtrees are shared across trees.
pub fn enumerate_trees(
    num_actions: usize,
    num_observations: usize,
    h: usize,
    cap: usize,
) -> Result<Vec<Arc<PolicyTree>>> {
    if num_actions == 0 || h == 0 {
        return Ok(Vec::new());
    }
    let approx = tree_count(num_actions, num_observations, h);
    if !(approx <= cap as f64) {
        return Err(SfError::EnumerationTooLarge {
            approx_count: approx,
            cap,
        });
    }
    let mut level: Vec<Arc<PolicyTree>> = (0..num_actions).map(PolicyTree::leaf).collect();
    for _ in 1..h {
        let n = level.len();
        let mut next = Vec::new();
        // Mixed-radix counter over the O-tuple of previous-level indices,
        // most significant digit first for lexicographic order.
        for a in 0..num_actions {
            let mut idx = vec![0usize; num_observations];
            loop {
                let children: Vec<_> = idx.iter().map(|&i| Arc::clone(&level[i])).collect();
                next.push(PolicyTree::node(a, children));
                let mut pos = num_observations;
                loop {
                    if pos == 0 {
                        break;
                    }
                    pos -= 1;
                    idx[pos] += 1;
                    if idx[pos] < n {
                        break;
                    }
                    idx[pos] = 0;
                }
                if idx.iter().all(|&i| i == 0) {
                    break;
                }
            }
        }
        level = next;
    }
    Ok(level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{mdp_to_psr, MdpSpec};
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_state(gamma: f64) -> PsrModel {
        mdp_to_psr(&MdpSpec {
            k: 1,
            num_actions: 1,
            d: 1,
            gamma,
            transitions: vec![DMatrix::from_row_slice(1, 1, &[1.0])],
            features: vec![DMatrix::from_row_slice(1, 1, &[1.0])],
            b1: DVector::from_vec(vec![1.0]),
        })
        .unwrap()
    }

    fn two_state_two_action() -> PsrModel {
        // Deterministic: action 0 stays, action 1 swaps states.
        mdp_to_psr(&MdpSpec {
            k: 2,
            num_actions: 2,
            d: 2,
            gamma: 0.9,
            transitions: vec![
                DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
                DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            ],
            features: vec![
                DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]),
                DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 3.0, 0.0]),
            ],
            b1: DVector::from_vec(vec![1.0, 0.0]),
        })
        .unwrap()
    }

    fn chain(model: &PsrModel, h: usize) -> Arc<PolicyTree> {
        let mut t = PolicyTree::leaf(0);
        for _ in 1..h {
            let children = (0..model.num_observations).map(|_| Arc::clone(&t)).collect();
            t = PolicyTree::node(0, children);
        }
        t
    }

    #[test]
    fn geometric_series_on_one_state() {
        let model = one_state(0.5);
        for h in 1..=10 {
            let t = chain(&model, h);
            let a = successor_matrix(&model, &t);
            let expected = 2.0 * (1.0 - 0.5f64.powi(h as i32));
            assert!((a[(0, 0)] - expected).abs() < 1e-12, "h = {h}");
        }
    }

    #[test]
    fn depth_two_matches_direct_expectation() {
        let model = two_state_two_action();
        // Root action 1, then action 0 after observation 0 and action 1 after
        // observation 1. From state 0 the path is deterministic: play 1 (f =
        // col 0 of F_1), land in state 1 (observation 1), play 1 (f = col 1
        // of F_1).
        let t = PolicyTree::node(1, vec![PolicyTree::leaf(0), PolicyTree::leaf(1)]);
        let a = successor_matrix(&model, &t);
        let q0 = DVector::from_vec(vec![1.0, 0.0]);
        let got = &a * &q0;
        let f1 = &model.f[1];
        let expected = f1.column(0) + f1.column(1) * model.gamma;
        assert!((got - expected).norm() < 1e-12);
    }

    #[test]
    fn mixture_matrix_is_weighted_sum() {
        let model = two_state_two_action();
        let t0 = chain(&model, 3);
        let t1 = PolicyTree::node(
            1,
            vec![
                PolicyTree::node(0, vec![PolicyTree::leaf(1), PolicyTree::leaf(0)]),
                PolicyTree::node(1, vec![PolicyTree::leaf(0), PolicyTree::leaf(0)]),
            ],
        );
        let a0 = successor_matrix(&model, &t0);
        let a1 = successor_matrix(&model, &t1);
        let mix = PolicyMixture::new(vec![Arc::clone(&t0), Arc::clone(&t1)], vec![0.5, 0.5]).unwrap();
        let am = successor_matrix_mixture(&model, &mix);
        assert!((am - (a0 * 0.5 + a1 * 0.5)).norm() < 1e-12);

        let single = PolicyMixture::single(t0);
        let a_single = successor_matrix_mixture(&model, &single);
        let a_direct = successor_matrix(&model, &single.trees[0]);
        assert_eq!(a_single, a_direct);
    }

    #[test]
    fn enumeration_counts() {
        assert_eq!(enumerate_trees(2, 1, 3, 1_000_000).unwrap().len(), 8);
        assert_eq!(enumerate_trees(2, 2, 2, 1_000_000).unwrap().len(), 8);
        let err = enumerate_trees(3, 3, 3, 1_000_000).unwrap_err();
        assert!(matches!(err, SfError::EnumerationTooLarge { .. }));
    }

    #[test]
    fn enumeration_is_lexicographic_and_balanced() {
        let trees = enumerate_trees(2, 2, 2, 1_000_000).unwrap();
        // First tree: root 0, children (0, 0); last: root 1, children (1, 1).
        assert_eq!(trees[0].action, 0);
        assert_eq!(trees[0].children[0].action, 0);
        assert_eq!(trees[0].children[1].action, 0);
        assert_eq!(trees[7].action, 1);
        assert_eq!(trees[7].children[0].action, 1);
        assert_eq!(trees[7].children[1].action, 1);
        for t in &trees {
            assert_eq!(t.depth(), 2);
            t.check(2, 2).unwrap();
        }
        // Root changes slowest.
        assert!(trees[..4].iter().all(|t| t.action == 0));
        assert!(trees[4..].iter().all(|t| t.action == 1));
    }

    #[test]
    fn mixture_action_frequencies() {
        let t0 = PolicyTree::leaf(0);
        let t1 = PolicyTree::leaf(1);
        let mix = PolicyMixture::new(vec![t0, t1], vec![0.3, 0.7]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut count1 = 0usize;
        for _ in 0..n {
            if mix.sample_action(&mut rng) == 1 {
                count1 += 1;
            }
        }
        let p = count1 as f64 / n as f64;
        let sigma = (0.3 * 0.7 / n as f64).sqrt();
        assert!((p - 0.7).abs() < 3.0 * sigma, "p = {p}");
    }

    #[test]
    fn conditioning_matches_symbolic_filter() {
        let model = two_state_two_action();
        let trees = enumerate_trees(2, 2, 2, 1_000_000).unwrap();
        let weights = vec![1.0 / 8.0; 8];
        let mix = PolicyMixture::new(trees.clone(), weights).unwrap();
        // Condition on (a = 0, o = 1): keep the 4 trees rooted at 0, weight
        // 1/4 each, descend to the o = 1 child.
        let cond = mix.condition(0, 1).unwrap();
        assert_eq!(cond.trees.len(), 4);
        assert!(cond.weights.iter().all(|&w| (w - 0.25).abs() < 1e-12));
        // The surviving subtrees are the o = 1 children of trees 0..4: leaf
        // actions 0, 1, 0, 1 in enumeration order.
        let acts: Vec<_> = cond.trees.iter().map(|t| t.action).collect();
        assert_eq!(acts, vec![0, 1, 0, 1]);
        drop(model);
    }

    #[test]
    fn degenerate_conditioning_detected() {
        let t = PolicyTree::node(0, vec![PolicyTree::leaf(0), PolicyTree::leaf(1)]);
        let mix = PolicyMixture::single(t);
        let err = mix.condition(1, 0).unwrap_err();
        assert!(matches!(err, SfError::DegenerateMixture));
    }

    #[test]
    fn successor_matrix_matches_monte_carlo() {
        let model = two_state_two_action();
        let trees = enumerate_trees(2, 2, 3, 1_000_000).unwrap();
        let tree = &trees[37 % trees.len()];
        let a = successor_matrix(&model, tree);
        let predicted = &a * &model.q1;

        // Rollouts: follow the tree for its depth, then stop (A^pi covers
        // exactly depth steps).
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = 20_000;
        let mut mean = DVector::zeros(model.d);
        let mut m2 = DVector::zeros(model.d);
        for i in 0..n {
            let mut q = model.q1.clone();
            let mut node = Arc::clone(tree);
            let mut disc = 1.0;
            let mut total = DVector::zeros(model.d);
            loop {
                let act = node.action;
                total += model.feature_vector(&q, act) * disc;
                if node.children.is_empty() {
                    break;
                }
                let (probs, _) = model.observation_probs(&q, act);
                let mut x: f64 = rng.gen();
                let mut o = model.num_observations - 1;
                for (j, &p) in probs.iter().enumerate() {
                    if x < p {
                        o = j;
                        break;
                    }
                    x -= p;
                }
                q = model.update(&q, act, o).unwrap().0;
                node = Arc::clone(&node.children[o]);
                disc *= model.gamma;
            }
            let delta = &total - &mean;
            mean += &delta / (i as f64 + 1.0);
            let delta2 = &total - &mean;
            m2 += delta.component_mul(&delta2);
        }
        for j in 0..model.d {
            let se = (m2[j] / (n as f64 - 1.0) / n as f64).sqrt();
            assert!(
                (mean[j] - predicted[j]).abs() < 4.0 * se + 1e-9,
                "coord {j}: mc {} vs {}",
                mean[j],
                predicted[j]
            );
        }
    }

    #[test]
    fn mixture_rollouts_match_mixture_matrix() {
        let model = two_state_two_action();
        let trees = enumerate_trees(2, 2, 2, 1_000_000).unwrap();
        let mix = PolicyMixture::new(
            vec![
                Arc::clone(&trees[1]),
                Arc::clone(&trees[4]),
                Arc::clone(&trees[6]),
            ],
            vec![0.2, 0.5, 0.3],
        )
        .unwrap();
        let predicted = successor_matrix_mixture(&model, &mix) * &model.q1;

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 20_000;
        let mut mean = DVector::zeros(model.d);
        for i in 0..n {
            let mut q = model.q1.clone();
            let mut cur = mix.clone();
            let mut disc = 1.0;
            let mut total = DVector::zeros(model.d);
            loop {
                let act = cur.sample_action(&mut rng);
                total += model.feature_vector(&q, act) * disc;
                if cur.depth() == 1 {
                    break;
                }
                let (probs, _) = model.observation_probs(&q, act);
                let mut x: f64 = rng.gen();
                let mut o = model.num_observations - 1;
                for (j, &p) in probs.iter().enumerate() {
                    if x < p {
                        o = j;
                        break;
                    }
                    x -= p;
                }
                q = model.update(&q, act, o).unwrap().0;
                cur = cur.condition(act, o).unwrap();
                disc *= model.gamma;
            }
            mean += (&total - &mean) / (i as f64 + 1.0);
        }
        assert!(
            (&mean - &predicted).norm() < 0.05,
            "mc {mean:?} vs {predicted:?}"
        );
    }

    #[test]
    fn tree_json_round_trip() {
        let t = PolicyTree::node(
            1,
            vec![
                PolicyTree::node(0, vec![PolicyTree::leaf(1), PolicyTree::leaf(0)]),
                PolicyTree::node(1, vec![PolicyTree::leaf(0), PolicyTree::leaf(0)]),
            ],
        );
        let json = t.to_json();
        let back = PolicyTree::from_json(&json).unwrap();
        assert_eq!(*t, *back);
    }
}

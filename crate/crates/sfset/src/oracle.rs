//! Ground-truth machinery for validating the point-based DP.
//!
//! Three independent oracles:
//! - exhaustive tree enumeration: Phi^(H) is the hull of one successor
//!   matrix per depth-H deterministic policy tree;
//! - exact support recursion for MDP embeddings:
//!   h^(H)(M) = max_a [<M, F_a> + gamma * sum_o v^(H-1)_o(M t_ao)] where
//!   v^(h)(g) is finite-horizon value iteration with scalar reward
//!   g . f(s, a) (positive homogeneity of supports in the rank-1 factors);
//! - exact 2-D hulls per state (monotone chain) with exact Hausdorff
//!   distances, plus scalar value iteration and a point-based value
//!   iteration reference that mirrors the set backup arithmetic bit for bit.

use nalgebra::{DMatrix, DVector};

use crate::dp::{
    argmax_tie, assembled_support, dedup_matrices, dedup_vectors, project_set, support, ModelView,
    SfSet, WDir,
};
use crate::error::{Result, SfError};
use crate::model::{MdpSpec, PsrModel};
use crate::planner::RewardSpec;
use crate::policy::{enumerate_trees, successor_matrix};

/// Hard cap on enumerated trees.
pub const TREE_CAP: usize = 1_000_000;
/// Dedup tolerance for enumerated successor matrices.
pub const EXACT_DEDUP_TOL: f64 = 1e-12;
/// Cap on intermediate 2-D cross-sum sizes.
const CROSS_SUM_CAP: usize = 200_000;

/// The exact horizon-H set: one point per deterministic depth-H tree.
#[derive(Debug, Clone)]
pub struct ExactSet {
    pub points: Vec<DMatrix<f64>>,
    pub horizon: usize,
    pub model_fingerprint: u64,
}

/// Enumerates all depth-`h` trees and collects their successor matrices,
/// deduped at 1e-12. `h = 0` yields the singleton {0}.
pub fn exact_sfset(model: &PsrModel, h: usize, cap: usize) -> Result<ExactSet> {
    let mut points: Vec<DMatrix<f64>> = if h == 0 {
        vec![DMatrix::zeros(model.d, model.k)]
    } else {
        enumerate_trees(model.num_actions, model.num_observations, h, cap)?
            .iter()
            .map(|t| successor_matrix(model, t))
            .collect()
    };
    dedup_matrices(&mut points, EXACT_DEDUP_TOL);
    Ok(ExactSet {
        points,
        horizon: h,
        model_fingerprint: model.fingerprint(),
    })
}

impl ExactSet {
    /// Support of the hull in matrix direction `m`.
    pub fn support(&self, m: &DMatrix<f64>) -> Result<f64> {
        Ok(support(&self.points, m)?.0)
    }

    /// Support of the projected hull (points times `q`) in direction `g`.
    pub fn support_at(&self, q: &DVector<f64>, g: &DVector<f64>) -> f64 {
        let vals: Vec<f64> = self.points.iter().map(|p| g.dot(&(p * q))).collect();
        argmax_tie(&vals).0
    }
}

// ---------------------------------------------------------------------------
// Exact supports for MDP embeddings

/// Finite-horizon value iteration with scalar reward `g . f(s, a)`:
/// v^(0) = 0, v^(h)(s) = max_a [g . f(s,a) + gamma * sum_s' P(s'|s,a) v^(h-1)(s')].
pub fn finite_vi(spec: &MdpSpec, g: &DVector<f64>, horizon: usize) -> DVector<f64> {
    let k = spec.k;
    // rewards[a][s] = g . f(s, a)
    let rewards: Vec<DVector<f64>> = spec.features.iter().map(|f| f.transpose() * g).collect();
    let mut v = DVector::zeros(k);
    for _ in 0..horizon {
        let mut next = DVector::zeros(k);
        for s in 0..k {
            let vals: Vec<f64> = (0..spec.num_actions)
                .map(|a| {
                    let cont: f64 = (0..k)
                        .map(|s2| spec.transitions[a][(s2, s)] * v[s2])
                        .sum();
                    rewards[a][s] + spec.gamma * cont
                })
                .collect();
            next[s] = argmax_tie(&vals).0;
        }
        v = next;
    }
    v
}

/// Exact support of Phi^(H) in matrix direction `m` for an MDP embedding.
///
/// Tree supports factor through the rank-1 structure of T_ao: after the root
/// choice, the subtree rooted at observation o contributes the support of the
/// per-state set Phi^(H-1) e_o in direction M t_ao, which equals a scalar
/// finite-horizon optimal value. No tree enumeration is needed.
pub fn exact_support_mdp(spec: &MdpSpec, m: &DMatrix<f64>, horizon: usize) -> f64 {
    if horizon == 0 {
        return 0.0;
    }
    let k = spec.k;
    let mut best: Vec<f64> = Vec::with_capacity(spec.num_actions);
    for a in 0..spec.num_actions {
        let mut total = m.dot(&spec.features[a]);
        for o in 0..k {
            // g = M t_ao where t_ao is row o of the column-stochastic T_a.
            let mut g = DVector::zeros(spec.d);
            let mut any = false;
            for s in 0..k {
                let p = spec.transitions[a][(o, s)];
                if p != 0.0 {
                    any = true;
                    g += m.column(s) * p;
                }
            }
            if !any || g.iter().all(|&x| x == 0.0) {
                continue;
            }
            total += spec.gamma * finite_vi(spec, &g, horizon - 1)[o];
        }
        best.push(total);
    }
    argmax_tie(&best).0
}

// ---------------------------------------------------------------------------
// Exact 2-D hulls per state

/// Convex hull (counterclockwise, no collinear interior points) of 2-D
/// points via the monotone chain.
pub fn convex_hull_2d(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite coordinates"));
    pts.dedup();
    if pts.len() <= 2 {
        return pts;
    }
    let cross = |o: &[f64; 2], a: &[f64; 2], b: &[f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for p in &pts {
        while lower.len() >= 2 && cross(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= 0.0
        {
            lower.pop();
        }
        lower.push(*p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2 && cross(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= 0.0
        {
            upper.pop();
        }
        upper.push(*p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn point_segment_distance(p: &[f64; 2], a: &[f64; 2], b: &[f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let denom = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if denom == 0.0 {
        0.0
    } else {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / denom).clamp(0.0, 1.0)
    };
    let dx = ap[0] - t * ab[0];
    let dy = ap[1] - t * ab[1];
    (dx * dx + dy * dy).sqrt()
}

/// Euclidean distance from a point to a convex polygon (ccw hull vertices).
fn point_polygon_distance(p: &[f64; 2], hull: &[[f64; 2]]) -> f64 {
    match hull.len() {
        0 => f64::INFINITY,
        1 => {
            let dx = p[0] - hull[0][0];
            let dy = p[1] - hull[0][1];
            (dx * dx + dy * dy).sqrt()
        }
        2 => point_segment_distance(p, &hull[0], &hull[1]),
        n => {
            let mut inside = true;
            let mut min_edge = f64::INFINITY;
            for i in 0..n {
                let a = &hull[i];
                let b = &hull[(i + 1) % n];
                let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
                if cross < 0.0 {
                    inside = false;
                }
                min_edge = min_edge.min(point_segment_distance(p, a, b));
            }
            if inside {
                0.0
            } else {
                min_edge
            }
        }
    }
}

fn to_2d(points: &[DVector<f64>]) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::with_capacity(points.len());
    for p in points {
        if p.len() != 2 {
            return Err(SfError::DimensionUnsupported { d: p.len() });
        }
        out.push([p[0], p[1]]);
    }
    Ok(out)
}

/// Exact Hausdorff distance between the convex hulls of two 2-D point
/// clouds. The directed distance from a convex set is attained at a vertex,
/// so it suffices to probe hull vertices against the other polygon.
pub fn hausdorff_2d(points_a: &[DVector<f64>], points_b: &[DVector<f64>]) -> Result<f64> {
    if points_a.is_empty() || points_b.is_empty() {
        return Err(SfError::EmptySet);
    }
    let hull_a = convex_hull_2d(&to_2d(points_a)?);
    let hull_b = convex_hull_2d(&to_2d(points_b)?);
    let directed = |from: &[[f64; 2]], to: &[[f64; 2]]| {
        from.iter()
            .map(|p| point_polygon_distance(p, to))
            .fold(0.0f64, f64::max)
    };
    Ok(directed(&hull_a, &hull_b).max(directed(&hull_b, &hull_a)))
}

/// Exact per-state 2-D sets of the finite-horizon recursion
/// phi^(h)(s) = hull union_a { f(s,a) + gamma * sum_s' P(s'|s,a) phi^(h-1)(s') },
/// the projection of Phi^(h) onto basis state s. Returns one hull per
/// horizon 0..=H per state, as length-2 vectors.
pub fn per_state_exact_dp(
    spec: &MdpSpec,
    horizon: usize,
) -> Result<Vec<Vec<Vec<DVector<f64>>>>> {
    if spec.d != 2 {
        return Err(SfError::DimensionUnsupported { d: spec.d });
    }
    let k = spec.k;
    let mut iterates: Vec<Vec<Vec<[f64; 2]>>> = vec![vec![vec![[0.0, 0.0]]; k]];
    for h in 1..=horizon {
        let prev = &iterates[h - 1];
        let mut level: Vec<Vec<[f64; 2]>> = Vec::with_capacity(k);
        for s in 0..k {
            let mut cand: Vec<[f64; 2]> = Vec::new();
            for a in 0..spec.num_actions {
                // Weighted Minkowski sum over successor states.
                let mut acc: Vec<[f64; 2]> = vec![[0.0, 0.0]];
                for s2 in 0..k {
                    let p = spec.transitions[a][(s2, s)];
                    if p == 0.0 {
                        continue;
                    }
                    if acc.len().saturating_mul(prev[s2].len()) > CROSS_SUM_CAP {
                        return Err(SfError::EnumerationTooLarge {
                            approx_count: (acc.len() * prev[s2].len()) as f64,
                            cap: CROSS_SUM_CAP,
                        });
                    }
                    let mut sum = Vec::with_capacity(acc.len() * prev[s2].len());
                    for x in &acc {
                        for y in &prev[s2] {
                            sum.push([x[0] + p * y[0], x[1] + p * y[1]]);
                        }
                    }
                    acc = convex_hull_2d(&sum);
                }
                let fx = spec.features[a][(0, s)];
                let fy = spec.features[a][(1, s)];
                for x in &acc {
                    cand.push([fx + spec.gamma * x[0], fy + spec.gamma * x[1]]);
                }
            }
            level.push(convex_hull_2d(&cand));
        }
        iterates.push(level);
    }
    Ok(iterates
        .into_iter()
        .map(|level| {
            level
                .into_iter()
                .map(|hull| {
                    hull.into_iter()
                        .map(|p| DVector::from_vec(vec![p[0], p[1]]))
                        .collect()
                })
                .collect()
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Scalar value iteration

/// Infinite-horizon value iteration on
/// V(s) = max_a [r . f(s,a) + gamma * sum_s' P(s'|s,a) V(s')],
/// iterated until the sup-norm change drops below `tol`.
pub fn value_iteration(spec: &MdpSpec, reward: &RewardSpec, tol: f64) -> DVector<f64> {
    let k = spec.k;
    let rewards: Vec<DVector<f64>> = spec
        .features
        .iter()
        .map(|f| f.transpose() * &reward.r)
        .collect();
    let mut v = DVector::zeros(k);
    for _ in 0..1_000_000 {
        let mut next = DVector::zeros(k);
        for s in 0..k {
            let vals: Vec<f64> = (0..spec.num_actions)
                .map(|a| {
                    let cont: f64 = (0..k)
                        .map(|s2| spec.transitions[a][(s2, s)] * v[s2])
                        .sum();
                    rewards[a][s] + spec.gamma * cont
                })
                .collect();
            next[s] = argmax_tie(&vals).0;
        }
        let delta = (&next - &v).amax();
        v = next;
        if delta <= tol {
            break;
        }
    }
    v
}

/// Greedy action per state under a value vector.
pub fn greedy_policy(spec: &MdpSpec, reward: &RewardSpec, v: &DVector<f64>) -> Vec<usize> {
    let rewards: Vec<DVector<f64>> = spec
        .features
        .iter()
        .map(|f| f.transpose() * &reward.r)
        .collect();
    (0..spec.k)
        .map(|s| {
            let vals: Vec<f64> = (0..spec.num_actions)
                .map(|a| {
                    let cont: f64 = (0..spec.k)
                        .map(|s2| spec.transitions[a][(s2, s)] * v[s2])
                        .sum();
                    rewards[a][s] + spec.gamma * cont
                })
                .collect();
            argmax_tie(&vals).1
        })
        .collect()
}

// ---------------------------------------------------------------------------
// PBVI reference

/// Point-based value iteration in the (a, o)-factored form that mirrors the
/// set backup exactly: each cell (a, o) keeps vectors delta = (phi T_ao)^T r
/// for the stored boundary points phi, so supports, selections, and tie
/// breaks reproduce the rank-1-direction DP arithmetic step for step.
#[derive(Debug, Clone)]
pub struct PbviReference {
    /// `r_vecs[a] = F_a^T r`.
    pub r_vecs: Vec<DVector<f64>>,
    /// `deltas[a][o]`: one k-vector per retained cell point.
    pub deltas: Vec<Vec<Vec<DVector<f64>>>>,
    pub beliefs: Vec<DVector<f64>>,
    pub gamma: f64,
    pub iterations: usize,
}

pub fn pbvi_reference(
    model: &PsrModel,
    reward: &RewardSpec,
    sampled_states: &[DVector<f64>],
    iters: usize,
) -> PbviReference {
    let a_n = model.num_actions;
    let o_n = model.num_observations;
    let r_vecs: Vec<DVector<f64>> = model.f.iter().map(|f| f.transpose() * &reward.r).collect();
    let mut deltas: Vec<Vec<Vec<DVector<f64>>>> =
        vec![vec![vec![DVector::zeros(model.k)]; o_n]; a_n];
    for _ in 0..iters {
        let mut next: Vec<Vec<Vec<DVector<f64>>>> = vec![vec![Vec::new(); o_n]; a_n];
        for q in sampled_states {
            for a in 0..a_n {
                for o in 0..o_n {
                    let b = &model.t[a][o] * q;
                    let (root, choices) = if b.iter().all(|&x| x == 0.0) {
                        // Mirrors the zero-direction shortcut of the backup.
                        (0usize, vec![0usize; o_n])
                    } else {
                        let mut per_action = Vec::with_capacity(a_n);
                        let mut per_choices = Vec::with_capacity(a_n);
                        for a2 in 0..a_n {
                            let mut score = r_vecs[a2].dot(&b);
                            let mut chosen = Vec::with_capacity(o_n);
                            for o2 in 0..o_n {
                                let vals: Vec<f64> =
                                    deltas[a2][o2].iter().map(|d| d.dot(&b)).collect();
                                let (v, idx) = argmax_tie(&vals);
                                score += model.gamma * v;
                                chosen.push(idx);
                            }
                            per_action.push(score);
                            per_choices.push(chosen);
                        }
                        let (_, a_star) = argmax_tie(&per_action);
                        (a_star, per_choices.swap_remove(a_star))
                    };
                    let mut alpha = r_vecs[root].clone();
                    for (o2, &idx) in choices.iter().enumerate() {
                        alpha += &deltas[root][o2][idx] * model.gamma;
                    }
                    next[a][o].push(model.t[a][o].transpose() * alpha);
                }
            }
        }
        for row in next.iter_mut().flatten() {
            // Bit-exact deduplication only: tolerance-based merging here acts
            // on k-vectors while the set backup merges d x k matrices, and the
            // mismatched merge decisions would break the exact pairing.
            dedup_vectors(row, 0.0);
        }
        deltas = next;
    }
    PbviReference {
        r_vecs,
        deltas,
        beliefs: sampled_states.to_vec(),
        gamma: model.gamma,
        iterations: iters,
    }
}

impl PbviReference {
    /// Assembled value at a state: `max_a [r_a . q + gamma * sum_o max_p delta . q]`.
    pub fn value(&self, q: &DVector<f64>) -> f64 {
        let vals: Vec<f64> = (0..self.r_vecs.len())
            .map(|a| {
                let mut v = self.r_vecs[a].dot(q);
                for cell in &self.deltas[a] {
                    let cvals: Vec<f64> = cell.iter().map(|d| d.dot(q)).collect();
                    v += self.gamma * argmax_tie(&cvals).0;
                }
                v
            })
            .collect();
        argmax_tie(&vals).0
    }

    /// The retained alpha-vector set: the zero initializer before any
    /// iteration, otherwise one assembled alpha per sampled belief.
    pub fn alpha_set(&self) -> Vec<DVector<f64>> {
        let k = self.deltas[0][0]
            .first()
            .map(|d| d.len())
            .unwrap_or_else(|| self.beliefs[0].len());
        if self.iterations == 0 {
            return vec![DVector::zeros(k)];
        }
        let mut out: Vec<DVector<f64>> = Vec::new();
        for q in &self.beliefs {
            let mut best: Option<(f64, DVector<f64>)> = None;
            for a in 0..self.r_vecs.len() {
                let mut alpha = self.r_vecs[a].clone();
                for cell in &self.deltas[a] {
                    let cvals: Vec<f64> = cell.iter().map(|d| d.dot(q)).collect();
                    let (_, idx) = argmax_tie(&cvals);
                    alpha += &cell[idx] * self.gamma;
                }
                let v = alpha.dot(q);
                if best.as_ref().map_or(true, |(bv, _)| v > *bv) {
                    best = Some((v, alpha));
                }
            }
            let (_, alpha) = best.expect("at least one action");
            if !out.iter().any(|prev| (prev - &alpha).norm() <= 1e-12) {
                out.push(alpha);
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Gap reports

/// Maximum support differences between an exact set and a point-based set.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GapReport {
    /// Max over probe directions of |h_exact(m) - h_approx(m)| (assembled).
    pub max_gap_directions: f64,
    /// Max over probe states and directions of the projected-set gap.
    pub max_gap_states: f64,
}

/// Compares exact and approximate supports on matrix probes (assembled
/// supports) and on per-state projections (via the LMO of the projected
/// set, probed in the directions `m q`).
pub fn support_gap(
    exact: &ExactSet,
    approx: &SfSet,
    model: &PsrModel,
    probe_directions: &[DMatrix<f64>],
    probe_states: &[DVector<f64>],
) -> Result<GapReport> {
    let view = ModelView::new(model);
    let mut max_dir = 0.0f64;
    for m in probe_directions {
        let he = exact.support(m)?;
        let ha = assembled_support(&view, approx, &WDir::full(m));
        max_dir = max_dir.max((he - ha).abs());
    }
    let mut max_state = 0.0f64;
    for q in probe_states {
        let lmo = project_set(&view, approx, q);
        for m in probe_directions {
            let g = m * q;
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            let he = exact.support_at(q, &g);
            let ha = lmo.maximize(&g).value;
            max_state = max_state.max((he - ha).abs());
        }
    }
    Ok(GapReport {
        max_gap_directions: max_dir,
        max_gap_states: max_state,
    })
}

/// Same gap on matrix probes, with the exact side computed by the MDP
/// support recursion instead of tree enumeration (feasible at any horizon).
pub fn support_gap_mdp(
    spec: &MdpSpec,
    horizon: usize,
    approx: &SfSet,
    model: &PsrModel,
    probe_directions: &[DMatrix<f64>],
) -> f64 {
    let view = ModelView::new(model);
    probe_directions
        .iter()
        .map(|m| {
            let he = exact_support_mdp(spec, m, horizon);
            let ha = assembled_support(&view, approx, &WDir::full(m));
            (he - ha).abs()
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::{run_dp, sample_directions, BackupConfig, DirectionSet};
    use crate::envs::{gridworld_mdp, GridSpec};
    use crate::model::mdp_to_psr;
    use crate::planner;

    fn two_state_one_obs() -> PsrModel {
        // A PSR with k=2, two actions, one observation: T_a0 is a full
        // column-stochastic matrix, so depth-h trees are action sequences.
        let t0 = DMatrix::from_row_slice(2, 2, &[0.7, 0.2, 0.3, 0.8]);
        let t1 = DMatrix::from_row_slice(2, 2, &[0.1, 0.5, 0.9, 0.5]);
        PsrModel {
            k: 2,
            num_actions: 2,
            num_observations: 1,
            d: 2,
            gamma: 0.9,
            q1: DVector::from_vec(vec![1.0, 0.0]),
            u: DVector::repeat(2, 1.0),
            t: vec![vec![t0], vec![t1]],
            f: vec![
                DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
                DMatrix::from_row_slice(2, 2, &[0.0, 2.0, -1.0, 0.5]),
            ],
        }
    }

    #[test]
    fn exact_sfset_horizon_zero_is_origin() {
        let model = two_state_one_obs();
        let ex = exact_sfset(&model, 0, TREE_CAP).unwrap();
        assert_eq!(ex.points.len(), 1);
        assert_eq!(ex.points[0].norm(), 0.0);
    }

    #[test]
    fn exact_sfset_horizon_one_is_feature_matrices() {
        let model = two_state_one_obs();
        let ex = exact_sfset(&model, 1, TREE_CAP).unwrap();
        assert_eq!(ex.points.len(), 2);
        for (p, f) in ex.points.iter().zip(&model.f) {
            assert_eq!((p - f).norm(), 0.0);
        }
    }

    #[test]
    fn exact_sfset_depth_three_matches_action_sequences() {
        let model = two_state_one_obs();
        let ex = exact_sfset(&model, 3, TREE_CAP).unwrap();
        assert_eq!(ex.points.len(), 8);
        // Direct expectation over the 8 action sequences (a0, a1, a2):
        // A = F_a0 + g F_a1 T_a0 + g^2 F_a2 T_a1 T_a0.
        let g = model.gamma;
        let mut expected = Vec::new();
        for a0 in 0..2 {
            for a1 in 0..2 {
                for a2 in 0..2 {
                    let t0 = &model.t[a0][0];
                    let t1 = &model.t[a1][0];
                    expected.push(
                        &model.f[a0] + (&model.f[a1] * t0) * g + ((&model.f[a2] * t1) * t0) * g * g,
                    );
                }
            }
        }
        for e in &expected {
            assert!(
                ex.points.iter().any(|p| (p - e).norm() < 1e-12),
                "missing expected matrix"
            );
        }
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let model = two_state_one_obs();
        let err = exact_sfset(&model, 30, 100).unwrap_err();
        assert!(matches!(err, SfError::EnumerationTooLarge { .. }));
    }

    #[test]
    fn exact_support_recursion_matches_enumeration() {
        let spec = gridworld_mdp(&GridSpec::open(2, 2, 0.9)).unwrap();
        let model = mdp_to_psr(&spec).unwrap();
        let probes = sample_directions(7, 12, 2, 4);
        for h in 0..=2 {
            let ex = exact_sfset(&model, h, TREE_CAP).unwrap();
            for m in &probes.directions {
                let via_trees = ex.support(m).unwrap();
                let via_vi = exact_support_mdp(&spec, m, h);
                assert!(
                    (via_trees - via_vi).abs() < 1e-10,
                    "h={h}: {via_trees} vs {via_vi}"
                );
            }
        }
    }

    #[test]
    fn per_state_hull_supports_match_finite_vi() {
        let spec = gridworld_mdp(&GridSpec::open(3, 3, 0.9)).unwrap();
        let iterates = per_state_exact_dp(&spec, 5).unwrap();
        let probes = sample_directions(3, 8, 2, 1);
        for h in 0..=5 {
            for m in &probes.directions {
                let g = DVector::from_vec(vec![m[(0, 0)], m[(1, 0)]]);
                let v = finite_vi(&spec, &g, h);
                for s in 0..spec.k {
                    let hull_sup = iterates[h][s]
                        .iter()
                        .map(|p| g.dot(p))
                        .fold(f64::NEG_INFINITY, f64::max);
                    assert!(
                        (hull_sup - v[s]).abs() < 1e-9,
                        "h={h} s={s}: {hull_sup} vs {}",
                        v[s]
                    );
                }
            }
        }
    }

    #[test]
    fn hausdorff_identical_and_shifted_squares() {
        let square: Vec<DVector<f64>> = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]
            .iter()
            .map(|p| DVector::from_vec(vec![p[0], p[1]]))
            .collect();
        assert_eq!(hausdorff_2d(&square, &square).unwrap(), 0.0);
        let shifted: Vec<DVector<f64>> = square
            .iter()
            .map(|p| DVector::from_vec(vec![p[0] + 0.3, p[1]]))
            .collect();
        let d = hausdorff_2d(&square, &shifted).unwrap();
        assert!((d - 0.3).abs() < 1e-12, "d = {d}");
    }

    #[test]
    fn hausdorff_rejects_non_2d() {
        let a = vec![DVector::from_vec(vec![0.0, 0.0, 0.0])];
        let err = hausdorff_2d(&a, &a).unwrap_err();
        assert!(matches!(err, SfError::DimensionUnsupported { d: 3 }));
    }

    #[test]
    fn exact_iterates_contract_on_gridworld() {
        let spec = gridworld_mdp(&GridSpec::open(3, 3, 0.9)).unwrap();
        let iterates = per_state_exact_dp(&spec, 8).unwrap();
        let dist = |h: usize| -> f64 {
            (0..spec.k)
                .map(|s| hausdorff_2d(&iterates[h][s], &iterates[h + 1][s]).unwrap())
                .fold(0.0f64, f64::max)
        };
        let mut prev = dist(0);
        for h in 1..=6 {
            let cur = dist(h);
            assert!(
                cur <= spec.gamma * prev + 1e-9,
                "h={h}: {cur} vs gamma * {prev}"
            );
            prev = cur;
        }
    }

    #[test]
    fn value_iteration_gamma_zero_is_myopic_max() {
        let mut spec = gridworld_mdp(&GridSpec::open(2, 2, 0.5)).unwrap();
        spec.gamma = 0.0;
        let reward = RewardSpec::new(DVector::from_vec(vec![1.0, -2.0])).unwrap();
        let v = value_iteration(&spec, &reward, 1e-12);
        for s in 0..spec.k {
            let expected = (0..spec.num_actions)
                .map(|a| reward.r.dot(&spec.features[a].column(s).into_owned()))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((v[s] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn value_iteration_self_loop_geometric_series() {
        let spec = MdpSpec {
            k: 1,
            num_actions: 1,
            d: 1,
            gamma: 0.9,
            transitions: vec![DMatrix::from_row_slice(1, 1, &[1.0])],
            features: vec![DMatrix::from_row_slice(1, 1, &[1.0])],
            b1: DVector::from_vec(vec![1.0]),
        };
        let reward = RewardSpec::new(DVector::from_vec(vec![1.0])).unwrap();
        let v = value_iteration(&spec, &reward, 1e-12);
        assert!((v[0] - 10.0).abs() < 1e-9, "v = {}", v[0]);
    }

    #[test]
    fn negative_reward_policy_heads_to_low_feature_corner() {
        // Features are scaled coordinates in [-1, 1]; with reward (-1, -1)
        // the best cell is the bottom-left corner (features (-1, -1)).
        let grid = GridSpec::open(3, 3, 0.9);
        let spec = gridworld_mdp(&grid).unwrap();
        let reward = RewardSpec::new(DVector::from_vec(vec![-1.0, -1.0])).unwrap();
        let v = value_iteration(&spec, &reward, 1e-10);
        let corner = grid.cell(0, 0);
        for s in 0..spec.k {
            assert!(v[corner] >= v[s] - 1e-9);
        }
        let policy = greedy_policy(&spec, &reward, &v);
        // From the opposite corner the greedy action moves toward (0, 0).
        let far = grid.cell(2, 2);
        assert!(
            policy[far] == crate::envs::ACTION_DOWN || policy[far] == crate::envs::ACTION_LEFT
        );
    }

    #[test]
    fn pbvi_zero_iterations_keeps_zero_alpha() {
        let spec = gridworld_mdp(&GridSpec::open(2, 2, 0.9)).unwrap();
        let model = mdp_to_psr(&spec).unwrap();
        let reward = RewardSpec::new(DVector::from_vec(vec![1.0, 1.0])).unwrap();
        let beliefs = vec![model.q1.clone()];
        let reference = pbvi_reference(&model, &reward, &beliefs, 0);
        let alphas = reference.alpha_set();
        assert_eq!(alphas.len(), 1);
        assert_eq!(alphas[0].norm(), 0.0);
    }

    #[test]
    fn pbvi_corner_beliefs_reproduce_value_iteration() {
        let spec = gridworld_mdp(&GridSpec::open(3, 3, 0.9)).unwrap();
        let model = mdp_to_psr(&spec).unwrap();
        let reward = RewardSpec::new(DVector::from_vec(vec![0.7, -0.4])).unwrap();
        // Corner beliefs = all basis states: PBVI degenerates to VI.
        let beliefs: Vec<DVector<f64>> = (0..spec.k)
            .map(|s| {
                let mut q = DVector::zeros(spec.k);
                q[s] = 1.0;
                q
            })
            .collect();
        let reference = pbvi_reference(&model, &reward, &beliefs, 200);
        let v = value_iteration(&spec, &reward, 1e-13);
        for (s, q) in beliefs.iter().enumerate() {
            assert!(
                (reference.value(q) - v[s]).abs() < 1e-7,
                "s={s}: {} vs {}",
                reference.value(q),
                v[s]
            );
        }
    }

    #[test]
    fn pbvi_matches_rank_one_direction_dp() {
        let spec = gridworld_mdp(&GridSpec::open(2, 2, 0.9)).unwrap();
        let model = mdp_to_psr(&spec).unwrap();
        let view = ModelView::new(&model);
        let reward = RewardSpec::new(DVector::from_vec(vec![0.3, 1.1])).unwrap();
        let beliefs: Vec<DVector<f64>> = (0..spec.k)
            .map(|s| {
                let mut q = DVector::zeros(spec.k);
                q[s] = 1.0;
                q
            })
            .collect();
        let dirs = planner::pbvi_directions(&reward, &beliefs);
        let iters = 15;
        let cfg = BackupConfig {
            max_iters: iters,
            convergence_tol: Some(0.0),
            ..Default::default()
        };
        let (set, _) = run_dp(&model, &cfg, dirs);
        // Both start from {0} cells, so n backups pair with n iterations.
        let reference = pbvi_reference(&model, &reward, &beliefs, iters);
        for q in &beliefs {
            let via_set = planner::optimal_value(&set, &view, &reward, q);
            let via_pbvi = reference.value(q);
            assert!(
                (via_set - via_pbvi).abs() < 1e-10,
                "{via_set} vs {via_pbvi}"
            );
        }
    }

    #[test]
    fn point_based_supports_never_exceed_exact() {
        let spec = gridworld_mdp(&GridSpec::open(2, 2, 0.9)).unwrap();
        let model = mdp_to_psr(&spec).unwrap();
        let n = 6;
        let cfg = BackupConfig {
            max_iters: n,
            convergence_tol: Some(0.0),
            ..Default::default()
        };
        let (set, _) = run_dp(&model, &cfg, sample_directions(11, 40, 2, 4));
        let view = ModelView::new(&model);
        let probes = sample_directions(12, 30, 2, 4);
        for m in &probes.directions {
            let approx = assembled_support(&view, &set, &WDir::full(m));
            let exact = exact_support_mdp(&spec, m, n + 1);
            assert!(
                approx <= exact + 1e-9,
                "soundness violated: {approx} > {exact}"
            );
        }
    }

    #[test]
    fn support_gap_of_matching_sets_is_small() {
        let spec = gridworld_mdp(&GridSpec::open(2, 2, 0.9)).unwrap();
        let model = mdp_to_psr(&spec).unwrap();
        let ex = exact_sfset(&model, 1, TREE_CAP).unwrap();
        // Zero backups: the assembled set is exactly {F_a}.
        let view = ModelView::new(&model);
        let dirs = sample_directions(5, 30, 2, 4);
        let set = SfSet::initial(&view, DirectionSet::from_matrices(dirs.directions.clone(), 5), None);
        let probes: Vec<DMatrix<f64>> = dirs.directions.clone();
        let states: Vec<DVector<f64>> = (0..4)
            .map(|s| {
                let mut q = DVector::zeros(4);
                q[s] = 1.0;
                q
            })
            .collect();
        let report = support_gap(&ex, &set, &model, &probes, &states).unwrap();
        assert!(report.max_gap_directions < 1e-12);
        assert!(report.max_gap_states < 1e-12);
    }
}

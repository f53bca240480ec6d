//! Planning readouts from a computed successor feature set.
//!
//! For a linear reward R(q, a) = r^T f(q, a), the optimal value at state q is
//! read straight off the set: V*(q) = max { r^T psi q : psi in Phi_a, a }.
//! The maximization runs through the per-action linear maximization oracles
//! of the projected set, so Phi is never materialized.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dp::{argmax_tie, cell_support, project_set, DirectionSet, ModelView, SfSet, WDir};
use crate::error::{Result, SfError};
use crate::model::PsrModel;

/// A linear reward `R(q, a) = r^T f(q, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardSpec {
    pub r: DVector<f64>,
}

impl RewardSpec {
    pub fn new(r: DVector<f64>) -> Result<Self> {
        if r.iter().any(|x| !x.is_finite()) {
            return Err(SfError::InvalidInput("reward entries must be finite".into()));
        }
        Ok(Self { r })
    }
}

/// `V*(q) = max_a max over Phi_a q of r . x`.
pub fn optimal_value(set: &SfSet, view: &ModelView, reward: &RewardSpec, q: &DVector<f64>) -> f64 {
    project_set(view, set, q).maximize(&reward.r).value
}

/// The lowest-index action achieving the max in [`optimal_value`].
pub fn optimal_action(
    set: &SfSet,
    view: &ModelView,
    reward: &RewardSpec,
    q: &DVector<f64>,
) -> usize {
    project_set(view, set, q).maximize(&reward.r).action
}

/// Alpha vectors `psi^T r` for the LMO-reachable vertices of each Phi_a at
/// the stored directions; their pointwise max over states approximates the
/// value function from below.
pub fn alpha_vectors(set: &SfSet, view: &ModelView, reward: &RewardSpec) -> Vec<DVector<f64>> {
    let mut alphas: Vec<DVector<f64>> = Vec::new();
    for m in &set.directions.directions {
        let w = WDir::full(m);
        for a in 0..view.num_actions {
            // Vertex of Phi_a maximal in direction m.
            let mut y = view.f[a].clone();
            for o in 0..view.num_observations {
                let (_, idx) = cell_support(view, &set.cells[a][o], a, o, &w);
                y += set.point_matrix(view, a, o, idx) * view.gamma;
            }
            let alpha = y.transpose() * &reward.r;
            if !alphas.iter().any(|prev| (prev - &alpha).norm() <= 1e-12) {
                alphas.push(alpha);
            }
        }
    }
    alphas
}

/// Rank-1 directions `m_i = r q_i^T` (Frobenius-normalized); running the DP
/// with these reproduces point-based value iteration at the sampled states.
pub fn pbvi_directions(reward: &RewardSpec, sampled_states: &[DVector<f64>]) -> DirectionSet {
    let directions = sampled_states
        .iter()
        .map(|q| &reward.r * q.transpose())
        .collect();
    DirectionSet::from_matrices(directions, 0)
}

/// Collects reachable belief/state vectors by random-action rollouts from
/// q1. The initial state is always included; near-duplicates are skipped.
pub fn sample_beliefs(
    model: &PsrModel,
    count: usize,
    horizon: usize,
    seed: u64,
) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<DVector<f64>> = vec![model.q1.clone()];
    'outer: for _ in 0..10_000 {
        if out.len() >= count {
            break;
        }
        let mut q = model.q1.clone();
        for _ in 0..horizon {
            let a = rng.gen_range(0..model.num_actions);
            let (probs, _) = model.observation_probs(&q, a);
            let mut x: f64 = rng.gen();
            let mut o = model.num_observations - 1;
            for (j, &p) in probs.iter().enumerate() {
                if x < p {
                    o = j;
                    break;
                }
                x -= p;
            }
            match model.update(&q, a, o) {
                Ok((q2, _)) => q = q2,
                Err(_) => continue 'outer,
            }
            if out.iter().all(|prev| (prev - &q).norm() > 1e-9) {
                out.push(q.clone());
                if out.len() >= count {
                    break 'outer;
                }
            }
        }
    }
    out
}

/// Value of a state under the alpha-vector representation (pointwise max).
pub fn alpha_value(alphas: &[DVector<f64>], q: &DVector<f64>) -> f64 {
    let vals: Vec<f64> = alphas.iter().map(|a| a.dot(q)).collect();
    if vals.is_empty() {
        return 0.0;
    }
    argmax_tie(&vals).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::{run_dp, sample_directions, BackupConfig};
    use crate::envs::{gridworld_mdp, GridSpec};
    use crate::model::{mdp_to_psr, MdpSpec};
    use nalgebra::DMatrix;

    fn grid_model(n: usize, gamma: f64) -> PsrModel {
        mdp_to_psr(&gridworld_mdp(&GridSpec::open(n, n, gamma)).unwrap()).unwrap()
    }

    fn basis(k: usize, s: usize) -> DVector<f64> {
        let mut q = DVector::zeros(k);
        q[s] = 1.0;
        q
    }

    #[test]
    fn zero_reward_gives_zero_value() {
        let model = grid_model(2, 0.9);
        let view = ModelView::new(&model);
        let cfg = BackupConfig {
            max_iters: 10,
            ..Default::default()
        };
        let (set, _) = run_dp(&model, &cfg, sample_directions(1, 20, view.d, view.k));
        let reward = RewardSpec::new(DVector::zeros(2)).unwrap();
        assert_eq!(optimal_value(&set, &view, &reward, &basis(4, 0)), 0.0);
        for a in alpha_vectors(&set, &view, &reward) {
            assert!(a.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn single_action_model_plans_that_action() {
        let spec = MdpSpec {
            k: 1,
            num_actions: 1,
            d: 1,
            gamma: 0.9,
            transitions: vec![DMatrix::from_row_slice(1, 1, &[1.0])],
            features: vec![DMatrix::from_row_slice(1, 1, &[1.0])],
            b1: DVector::from_vec(vec![1.0]),
        };
        let model = mdp_to_psr(&spec).unwrap();
        let view = ModelView::new(&model);
        let (set, _) = run_dp(
            &model,
            &BackupConfig::default(),
            sample_directions(1, 4, 1, 1),
        );
        let reward = RewardSpec::new(DVector::from_vec(vec![1.0])).unwrap();
        assert_eq!(optimal_action(&set, &view, &reward, &basis(1, 0)), 0);
        // Geometric series: V = 1 / (1 - 0.9) = 10.
        let v = optimal_value(&set, &view, &reward, &basis(1, 0));
        assert!((v - 10.0).abs() < 1e-6, "v = {v}");
    }

    #[test]
    fn value_is_positively_homogeneous_in_reward() {
        let model = grid_model(3, 0.9);
        let view = ModelView::new(&model);
        let cfg = BackupConfig {
            max_iters: 60,
            ..Default::default()
        };
        let (set, _) = run_dp(&model, &cfg, sample_directions(2, 60, view.d, view.k));
        let r1 = RewardSpec::new(DVector::from_vec(vec![0.4, -1.2])).unwrap();
        let r3 = RewardSpec::new(DVector::from_vec(vec![1.2, -3.6])).unwrap();
        for s in 0..9 {
            let q = basis(9, s);
            let v1 = optimal_value(&set, &view, &r1, &q);
            let v3 = optimal_value(&set, &view, &r3, &q);
            assert!((3.0 * v1 - v3).abs() < 1e-9);
            assert_eq!(
                optimal_action(&set, &view, &r1, &q),
                optimal_action(&set, &view, &r3, &q)
            );
        }
    }

    #[test]
    fn value_is_convex_in_state() {
        let model = grid_model(3, 0.9);
        let view = ModelView::new(&model);
        let cfg = BackupConfig {
            max_iters: 60,
            ..Default::default()
        };
        let (set, _) = run_dp(&model, &cfg, sample_directions(4, 60, view.d, view.k));
        let reward = RewardSpec::new(DVector::from_vec(vec![-1.0, 0.5])).unwrap();
        let qa = basis(9, 2);
        let qb = basis(9, 7);
        for &lam in &[0.25, 0.5, 0.75] {
            let mix = &qa * lam + &qb * (1.0 - lam);
            let vm = optimal_value(&set, &view, &reward, &mix);
            let va = optimal_value(&set, &view, &reward, &qa);
            let vb = optimal_value(&set, &view, &reward, &qb);
            assert!(vm <= lam * va + (1.0 - lam) * vb + 1e-9);
        }
    }

    #[test]
    fn pbvi_directions_are_normalized_rank_one() {
        let reward = RewardSpec::new(DVector::from_vec(vec![1.0, 0.0])).unwrap();
        let states = vec![basis(3, 0), basis(3, 2)];
        let ds = pbvi_directions(&reward, &states);
        assert_eq!(ds.len(), 2);
        for (i, m) in ds.directions.iter().enumerate() {
            assert!((m.norm() - 1.0).abs() < 1e-12);
            // Rank-1 structure: the only nonzero column is the state's.
            let s = if i == 0 { 0 } else { 2 };
            for j in 0..3 {
                if j != s {
                    assert_eq!(m.column(j).norm(), 0.0);
                }
            }
        }
    }

    #[test]
    fn sampled_beliefs_start_at_q1_and_are_distinct() {
        let mut spec = GridSpec::open(3, 3, 0.9);
        spec.noise = 0.05;
        let model =
            crate::model::pomdp_to_psr(&crate::envs::gridworld_pomdp(&spec).unwrap()).unwrap();
        let beliefs = sample_beliefs(&model, 10, 15, 4);
        assert_eq!(beliefs.len(), 10);
        assert!((beliefs[0].clone() - &model.q1).norm() < 1e-15);
        for i in 0..beliefs.len() {
            assert!((beliefs[i].sum() - 1.0).abs() < 1e-9);
            for j in 0..i {
                assert!((&beliefs[i] - &beliefs[j]).norm() > 1e-9);
            }
        }
    }
}

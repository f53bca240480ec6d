//! Imitation by feature matching.
//!
//! Given a target phi^d in Phi q, the matcher keeps the invariant
//! phi^d_t in Phi q_t: it decomposes the target as a convex combination of
//! vertices of the per-action sets Phi_a q (Frank-Wolfe over the
//! observation-decomposable LMO), samples an entry with its weight,
//! executes its action, and on observation o passes the chosen vertex's
//! per-observation continuation forward as the next target:
//! phi^d_{t+1} = phi_o q / p_o. In expectation the discounted feature sum
//! of the induced policy equals the target exactly (martingale property);
//! numerical drift beyond eps_fw is projected back onto Phi q and logged.

use std::collections::HashMap;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dp::{project_set, CellData, Lmo, ModelView, SfSet, TOp};
use crate::error::{Result, SfError};
use crate::model::PsrModel;

/// Feasibility slack: targets further than this from Phi q are rejected.
pub const EPS_FEAS: f64 = 1e-6;
/// Frank-Wolfe residual at which a decomposition counts as exact.
pub const EPS_FW: f64 = 1e-8;
/// Iteration cap for a single Frank-Wolfe solve.
pub const MAX_FW_ITERS: usize = 10_000;

/// The matcher's per-step state.
#[derive(Debug, Clone)]
pub struct MatchState {
    pub q: DVector<f64>,
    pub target: DVector<f64>,
    pub step: usize,
}

/// One convex-combination entry: a vertex of Phi_{action} q with its
/// per-observation annotation (stored-point index per cell).
#[derive(Debug, Clone)]
pub struct DecompEntry {
    pub action: usize,
    pub weight: f64,
    pub vertex: DVector<f64>,
    pub choices: Vec<usize>,
}

/// A convex combination of annotated vertices reconstructing a target.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub entries: Vec<DecompEntry>,
    /// `|sum_i w_i vertex_i - target|`.
    pub residual: f64,
}

impl Decomposition {
    pub fn barycenter(&self, d: usize) -> DVector<f64> {
        let mut x = DVector::zeros(d);
        for e in &self.entries {
            x += &e.vertex * e.weight;
        }
        x
    }
}

/// Outcome of a feasibility test; infeasibility is a value, not an error.
#[derive(Debug, Clone)]
pub enum Feasibility {
    Feasible { witness: Decomposition },
    Infeasible { nearest: DVector<f64>, distance: f64 },
}

// ---------------------------------------------------------------------------
// Frank-Wolfe over Phi q

/// Away-step Frank-Wolfe for min |x - target|^2 over Phi q. Deterministic:
/// starts from the LMO vertex of the lowest-index action in direction
/// `target`, uses exact line search, and merges entries by (action,
/// choices). Linear convergence on the polytope makes eps_fw reachable for
/// feasible targets; for infeasible ones the duality gap certifies the
/// projection.
fn frank_wolfe(lmo: &Lmo, target: &DVector<f64>, stop_residual: f64) -> Decomposition {
    let d = target.len();
    let start = lmo.maximize_action(0, target);
    let mut entries: Vec<DecompEntry> = vec![DecompEntry {
        action: start.action,
        weight: 1.0,
        vertex: start.vertex,
        choices: start.choices,
    }];
    let mut x = entries[0].vertex.clone();
    let gap_tol = 1e-14 * (1.0 + target.norm_squared());
    for it in 0..MAX_FW_ITERS {
        let neg_grad = target - &x; // -grad of 0.5|x - t|^2
        if neg_grad.norm() <= stop_residual {
            break;
        }
        let s = lmo.maximize(&neg_grad);
        let gap_fw = neg_grad.dot(&s.vertex) - neg_grad.dot(&x);
        if gap_fw <= gap_tol {
            break; // projection certified up to the duality gap
        }
        // Away vertex: active entry maximal along the gradient.
        let mut away = 0usize;
        let mut away_val = f64::NEG_INFINITY;
        for (i, e) in entries.iter().enumerate() {
            let v = -neg_grad.dot(&e.vertex);
            if v > away_val {
                away_val = v;
                away = i;
            }
        }
        let gap_away = away_val - (-neg_grad.dot(&x));
        let (dir, gamma_max, away_step) = if gap_fw >= gap_away || entries.len() == 1 {
            (&s.vertex - &x, 1.0f64, false)
        } else {
            let w = entries[away].weight;
            let gm = if w >= 1.0 { f64::INFINITY } else { w / (1.0 - w) };
            (&x - &entries[away].vertex, gm, true)
        };
        let denom = dir.norm_squared();
        if denom == 0.0 {
            break;
        }
        let gamma = (neg_grad.dot(&dir) / denom).clamp(0.0, gamma_max);
        if gamma == 0.0 {
            break;
        }
        if away_step {
            for e in entries.iter_mut() {
                e.weight *= 1.0 + gamma;
            }
            entries[away].weight -= gamma;
            if entries[away].weight <= 1e-15 {
                entries.swap_remove(away);
            }
        } else {
            for e in entries.iter_mut() {
                e.weight *= 1.0 - gamma;
            }
            if gamma == 1.0 {
                entries.clear();
            }
            match entries
                .iter_mut()
                .find(|e| e.action == s.action && e.choices == s.choices)
            {
                Some(e) => e.weight += gamma,
                None => entries.push(DecompEntry {
                    action: s.action,
                    weight: gamma,
                    vertex: s.vertex.clone(),
                    choices: s.choices.clone(),
                }),
            }
            entries.retain(|e| e.weight > 1e-15);
        }
        x += dir * gamma;
        // Periodically rebuild x from the weights to cancel drift.
        if it % 128 == 127 {
            x = DVector::zeros(d);
            for e in &entries {
                x += &e.vertex * e.weight;
            }
        }
    }
    let total: f64 = entries.iter().map(|e| e.weight).sum();
    if total > 0.0 {
        for e in entries.iter_mut() {
            e.weight /= total;
        }
    }
    let mut xb = DVector::zeros(d);
    for e in &entries {
        xb += &e.vertex * e.weight;
    }
    Decomposition {
        residual: (xb - target).norm(),
        entries,
    }
}

/// Tests whether `target` lies in Phi q within `tol`; on failure returns
/// the nearest point found and its distance.
pub fn check_feasible(
    set: &SfSet,
    model: &PsrModel,
    q: &DVector<f64>,
    target: &DVector<f64>,
    tol: f64,
) -> Feasibility {
    let view = ModelView::new(model);
    let lmo = project_set(&view, set, q);
    let decomp = frank_wolfe(&lmo, target, EPS_FW.min(tol));
    if decomp.residual <= tol {
        Feasibility::Feasible { witness: decomp }
    } else {
        let nearest = decomp.barycenter(target.len());
        Feasibility::Infeasible {
            distance: decomp.residual,
            nearest,
        }
    }
}

/// Decomposes a feasible target into annotated vertices of Phi_a q.
pub fn decompose_target(
    set: &SfSet,
    model: &PsrModel,
    q: &DVector<f64>,
    target: &DVector<f64>,
) -> Result<Decomposition> {
    let view = ModelView::new(model);
    decompose_view(&view, set, q, target)
}

fn decompose_view(
    view: &ModelView,
    set: &SfSet,
    q: &DVector<f64>,
    target: &DVector<f64>,
) -> Result<Decomposition> {
    let lmo = project_set(view, set, q);
    let decomp = frank_wolfe(&lmo, target, EPS_FW);
    if decomp.residual > EPS_FW {
        return Err(SfError::InfeasibleTarget {
            residual: decomp.residual,
            tol: EPS_FW,
        });
    }
    Ok(decomp)
}

// ---------------------------------------------------------------------------
// Stepping

/// Result of one matcher step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub action: usize,
    pub observation: usize,
    pub state: MatchState,
    /// Decomposition of the next target, ready for the following step.
    pub next_decomposition: Decomposition,
    /// Projection drift: distance from the intended next target to Phi q'
    /// (0 when the target was representable within eps_fw).
    pub drift: f64,
}

fn sample_entry<R: Rng>(decomposition: &Decomposition, rng: &mut R) -> usize {
    let mut x: f64 = rng.gen();
    for (i, e) in decomposition.entries.iter().enumerate() {
        if x < e.weight {
            return i;
        }
        x -= e.weight;
    }
    decomposition.entries.len() - 1
}

/// Executes one matcher step: samples an entry by weight, plays its action,
/// and on the observation supplied by `env_observation` advances the state
/// and target. Targets that drift into the (eps_fw, eps_feas] band are
/// projected back onto Phi q'; beyond eps_feas the step fails.
pub fn step_match<R: Rng>(
    set: &SfSet,
    model: &PsrModel,
    state: &MatchState,
    decomposition: &Decomposition,
    rng: &mut R,
    env_observation: impl FnOnce(usize, &mut R) -> usize,
) -> Result<StepOutcome> {
    let view = ModelView::new(model);
    step_match_view(&view, set, model, state, decomposition, rng, env_observation, &mut None)
}

type DecompCache = HashMap<(usize, usize, usize), Decomposition>;

#[allow(clippy::too_many_arguments)]
fn step_match_view<R: Rng>(
    view: &ModelView,
    set: &SfSet,
    model: &PsrModel,
    state: &MatchState,
    decomposition: &Decomposition,
    rng: &mut R,
    env_observation: impl FnOnce(usize, &mut R) -> usize,
    cache: &mut Option<&mut DecompCache>,
) -> Result<StepOutcome> {
    if decomposition.entries.is_empty() {
        return Err(SfError::EmptySet);
    }
    let i = sample_entry(decomposition, rng);
    let entry = &decomposition.entries[i];
    let a = entry.action;
    let o = env_observation(a, rng);
    let (q2, p) = model.update(&state.q, a, o)?;
    let choice = entry.choices[o];
    // Intended next target: (stored point of cell (a, o)) q / p. For rank-1
    // cells this is the stored left vector over u[row], independent of q,
    // which makes the fresh decomposition cacheable by (a, o, choice).
    let (target2, cache_key) = match (&set.cells[a][o], &view.tops[a][o]) {
        (CellData::Rank1 { lefts }, TOp::Rank1 { row, .. }) => {
            (&lefts[choice] / model.u[*row], Some((a, o, choice)))
        }
        _ => (set.point_matrix(view, a, o, choice) * &state.q / p, None),
    };
    let cached = cache_key.and_then(|key| {
        cache
            .as_ref()
            .and_then(|c| c.get(&key).cloned().map(|d| (key, d)))
    });
    let (next_decomposition, drift, target2) = match cached {
        Some((_, d)) => (d, 0.0, target2),
        None => {
            let lmo = project_set(view, set, &q2);
            let decomp = frank_wolfe(&lmo, &target2, EPS_FW);
            let (decomp, drift, target2) = if decomp.residual <= EPS_FW {
                (decomp, 0.0, target2)
            } else if decomp.residual <= EPS_FEAS {
                // Project back onto Phi q' and log the drift.
                let projected = decomp.barycenter(target2.len());
                let drift = decomp.residual;
                (decomp, drift, projected)
            } else {
                return Err(SfError::InfeasibleTarget {
                    residual: decomp.residual,
                    tol: EPS_FEAS,
                });
            };
            if drift == 0.0 {
                if let (Some(key), Some(c)) = (cache_key, cache.as_mut()) {
                    c.insert(key, decomp.clone());
                }
            }
            (decomp, drift, target2)
        }
    };
    Ok(StepOutcome {
        action: a,
        observation: o,
        state: MatchState {
            q: q2,
            target: target2,
            step: state.step + 1,
        },
        next_decomposition,
        drift,
    })
}

// ---------------------------------------------------------------------------
// Rollouts

/// Per-rollout record.
#[derive(Debug, Clone)]
pub struct RolloutLog {
    pub discounted_features: DVector<f64>,
    pub max_drift: f64,
    pub projections: usize,
}

/// Monte-Carlo summary over all rollouts.
#[derive(Debug, Clone)]
pub struct RolloutReport {
    pub mean: DVector<f64>,
    /// Per-coordinate standard error of the mean.
    pub std_err: DVector<f64>,
    pub logs: Vec<RolloutLog>,
    pub max_drift: f64,
    /// `gamma^horizon / (1 - gamma) * max_a |F_a|`: truncation bias bound.
    pub tail_bound: f64,
}

/// Runs the matcher `num_rollouts` times from q1 in the simulated model,
/// truncated at `horizon`, and reports the empirical mean discounted
/// feature vector. Rollout r uses its own ChaCha8 stream derived from
/// `seed` and r.
pub fn rollout_match(
    set: &SfSet,
    model: &PsrModel,
    target: &DVector<f64>,
    horizon: usize,
    num_rollouts: usize,
    seed: u64,
) -> Result<RolloutReport> {
    let view = ModelView::new(model);
    // Targets within eps_feas of Phi q1 are projected to the closest
    // achievable point; beyond that the match is refused.
    let lmo = project_set(&view, set, &model.q1);
    let root = frank_wolfe(&lmo, target, EPS_FW);
    if root.residual > EPS_FEAS {
        return Err(SfError::InfeasibleTarget {
            residual: root.residual,
            tol: EPS_FEAS,
        });
    }
    let root_drift = if root.residual > EPS_FW { root.residual } else { 0.0 };
    let target = &root.barycenter(model.d);
    let mut cache: DecompCache = HashMap::new();
    let mut logs = Vec::with_capacity(num_rollouts);
    let d = model.d;
    let mut sum = DVector::zeros(d);
    let mut sum_sq = DVector::zeros(d);
    for r in 0..num_rollouts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(
            (r as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        ));
        let mut state = MatchState {
            q: model.q1.clone(),
            target: target.clone(),
            step: 0,
        };
        let mut decomp = root.clone();
        let mut features = DVector::zeros(d);
        let mut discount = 1.0;
        let mut max_drift = 0.0f64;
        let mut projections = 0usize;
        for _ in 0..horizon {
            let mut cache_opt = Some(&mut cache);
            let out = step_match_view(
                &view,
                set,
                model,
                &state,
                &decomp,
                &mut rng,
                |a, rng| {
                    let (probs, _) = model.observation_probs(&state.q, a);
                    let mut x: f64 = rng.gen();
                    let mut o = model.num_observations - 1;
                    for (j, &p) in probs.iter().enumerate() {
                        if x < p {
                            o = j;
                            break;
                        }
                        x -= p;
                    }
                    o
                },
                &mut cache_opt,
            )?;
            features += model.feature_vector(&state.q, out.action) * discount;
            discount *= model.gamma;
            if out.drift > 0.0 {
                projections += 1;
                max_drift = max_drift.max(out.drift);
            }
            state = out.state;
            decomp = out.next_decomposition;
        }
        sum += &features;
        sum_sq += features.map(|x| x * x);
        logs.push(RolloutLog {
            discounted_features: features,
            max_drift,
            projections,
        });
    }
    let n = num_rollouts as f64;
    let mean = &sum / n;
    let var = (&sum_sq / n - mean.map(|x| x * x)).map(|v| v.max(0.0));
    let std_err = var.map(|v| (v / n).sqrt());
    let max_drift = logs
        .iter()
        .map(|l| l.max_drift)
        .fold(root_drift, f64::max);
    let tail_bound =
        model.gamma.powi(horizon as i32) / (1.0 - model.gamma) * model.max_feature_norm();
    Ok(RolloutReport {
        mean,
        std_err,
        logs,
        max_drift,
        tail_bound,
    })
}

//! The unified PSR model and embeddings from MDPs and POMDPs.
//!
//! Everything downstream (the set-valued dynamic programming, planning,
//! imitation) consumes a single model form: a state dimension `k`, an initial
//! state `q1`, a normalization vector `u`, one `k x k` transition operator
//! `T_ao` per (action, observation) pair, and one `d x k` feature matrix `F_a`
//! per action. The state recursion is
//!
//!   q' = T_ao q / (u^T T_ao q),   P(o | q, do a) = u^T T_ao q
//!
//! MDPs and POMDPs embed by taking `u` to be the all-ones vector and
//! `T_ao = diag(D_{o,.}) T_a` (for an MDP the observation reveals the next
//! state, so `D` is the identity).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SfError};

/// Tolerance for probability checks (nonnegativity, sums to one).
pub const EPS_PROB: f64 = 1e-9;

/// Singularity threshold for core-test transforms: smallest singular value
/// below `1e-8 *` largest is treated as singular.
pub const CORE_TEST_SV_RATIO: f64 = 1e-8;

/// A predictive state representation with linear features.
#[derive(Debug, Clone, PartialEq)]
pub struct PsrModel {
    pub k: usize,
    pub num_actions: usize,
    pub num_observations: usize,
    pub d: usize,
    pub gamma: f64,
    pub q1: DVector<f64>,
    pub u: DVector<f64>,
    /// `t[a][o]` is the `k x k` operator for (action `a`, observation `o`).
    pub t: Vec<Vec<DMatrix<f64>>>,
    /// `f[a]` is the `d x k` feature matrix for action `a`.
    pub f: Vec<DMatrix<f64>>,
}

/// A fully observable MDP: column-stochastic transitions plus per-action
/// feature matrices whose columns are `f(s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MdpSpec {
    pub k: usize,
    pub num_actions: usize,
    pub d: usize,
    pub gamma: f64,
    /// `transitions[a][i][j] = P(s' = i | s = j, a)`; columns sum to one.
    pub transitions: Vec<DMatrix<f64>>,
    /// `features[a]` is `d x k`; column `s` is `f(s, a)`.
    pub features: Vec<DMatrix<f64>>,
    pub b1: DVector<f64>,
}

/// A POMDP: an MDP plus an `O x k` observation matrix whose columns sum to
/// one (`obs[o][s'] = P(o | s')`).
#[derive(Debug, Clone, PartialEq)]
pub struct PomdpSpec {
    pub k: usize,
    pub num_actions: usize,
    pub num_observations: usize,
    pub d: usize,
    pub gamma: f64,
    pub transitions: Vec<DMatrix<f64>>,
    pub observation_matrix: DMatrix<f64>,
    pub features: Vec<DMatrix<f64>>,
    pub b1: DVector<f64>,
}

/// A simple test: an action sequence paired with the observation sequence
/// whose success probability the test predicts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimpleTest {
    pub actions: Vec<usize>,
    pub observations: Vec<usize>,
}

impl SimpleTest {
    pub fn new(actions: Vec<usize>, observations: Vec<usize>) -> Result<Self> {
        if actions.len() != observations.len() {
            return Err(SfError::InvalidInput(format!(
                "test has {} actions but {} observations",
                actions.len(),
                observations.len()
            )));
        }
        Ok(Self {
            actions,
            observations,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Report from [`validate_model`]: worst-case violations of the PSR
/// probability constraints along sampled random-action trajectories.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub max_negativity: f64,
    pub max_sum_deviation: f64,
    pub trajectories: usize,
    pub horizon: usize,
    pub pass: bool,
}

impl PsrModel {
    /// Checks internal dimension consistency and `u^T q1 = 1`.
    pub fn check(&self) -> Result<()> {
        if self.q1.len() != self.k || self.u.len() != self.k {
            return Err(SfError::DimensionMismatch(format!(
                "q1/u length must be k = {}",
                self.k
            )));
        }
        if self.t.len() != self.num_actions || self.f.len() != self.num_actions {
            return Err(SfError::DimensionMismatch(
                "T and F must have one entry per action".into(),
            ));
        }
        for (a, per_obs) in self.t.iter().enumerate() {
            if per_obs.len() != self.num_observations {
                return Err(SfError::DimensionMismatch(format!(
                    "T[{a}] must have one operator per observation"
                )));
            }
            for (o, m) in per_obs.iter().enumerate() {
                if m.nrows() != self.k || m.ncols() != self.k {
                    return Err(SfError::DimensionMismatch(format!(
                        "T[{a}][{o}] must be {k} x {k}",
                        k = self.k
                    )));
                }
            }
        }
        for (a, m) in self.f.iter().enumerate() {
            if m.nrows() != self.d || m.ncols() != self.k {
                return Err(SfError::DimensionMismatch(format!(
                    "F[{a}] must be {} x {}",
                    self.d, self.k
                )));
            }
        }
        let norm = self.u.dot(&self.q1);
        if (norm - 1.0).abs() > 1e-6 {
            return Err(SfError::InvalidInput(format!(
                "u^T q1 = {norm}, expected 1"
            )));
        }
        Ok(())
    }

    /// One step of the state recursion. Returns the updated state and the
    /// probability of the conditioning observation.
    pub fn update(&self, q: &DVector<f64>, a: usize, o: usize) -> Result<(DVector<f64>, f64)> {
        let tq = &self.t[a][o] * q;
        let p = self.u.dot(&tq);
        if p <= EPS_PROB {
            return Err(SfError::ZeroProbabilityObservation {
                action: a,
                observation: o,
                probability: p,
            });
        }
        let mut q_next = tq / p;
        // Renormalize to suppress drift over long rollouts.
        let norm = self.u.dot(&q_next);
        if norm > 0.0 {
            q_next /= norm;
        }
        Ok((q_next, p))
    }

    /// Observation probabilities `u^T T_ao q` for all `o`, clamped at zero and
    /// renormalized when drift exceeds [`EPS_PROB`]. The second return value
    /// is the drift `|sum - 1|` before renormalization.
    pub fn observation_probs(&self, q: &DVector<f64>, a: usize) -> (DVector<f64>, f64) {
        let mut probs = DVector::zeros(self.num_observations);
        for o in 0..self.num_observations {
            let p = self.u.dot(&(&self.t[a][o] * q));
            probs[o] = p.max(0.0);
        }
        let sum: f64 = probs.sum();
        let drift = (sum - 1.0).abs();
        if drift > EPS_PROB && sum > 0.0 {
            probs /= sum;
        }
        (probs, drift)
    }

    /// One-step feature vector `f(q, a) = F_a q`.
    pub fn feature_vector(&self, q: &DVector<f64>, a: usize) -> DVector<f64> {
        &self.f[a] * q
    }

    /// Success probability of a simple test from state `q`:
    /// `u^T T_{a_l o_l} ... T_{a_1 o_1} q`.
    pub fn test_value(&self, q: &DVector<f64>, test: &SimpleTest) -> f64 {
        let mut v = q.clone();
        for (&a, &o) in test.actions.iter().zip(&test.observations) {
            v = &self.t[a][o] * v;
        }
        self.u.dot(&v)
    }

    /// Prediction vector `m_tau` of a simple test, so `tau(q) = m_tau . q`.
    pub fn prediction_vector(&self, test: &SimpleTest) -> DVector<f64> {
        let mut m = self.u.clone();
        for (&a, &o) in test.actions.iter().zip(&test.observations).rev() {
            m = self.t[a][o].transpose() * m;
        }
        m
    }

    /// Max Frobenius norm over the feature matrices.
    pub fn max_feature_norm(&self) -> f64 {
        self.f.iter().map(|m| m.norm()).fold(0.0, f64::max)
    }

    /// A stable 64-bit fingerprint of the model contents.
    pub fn fingerprint(&self) -> u64 {
        let file = ModelFile::from_model(self);
        let bytes = serde_json::to_vec(&file).expect("model serializes");
        fnv1a(&bytes)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile::from_model(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)?;
        file.into_model()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Embeds an MDP as a PSR: observations are identified with next states, so
/// `T_ao` keeps row `o` of `T_a` and zeroes the rest, and `u` is all ones.
pub fn mdp_to_psr(spec: &MdpSpec) -> Result<PsrModel> {
    spec.check()?;
    let k = spec.k;
    let mut t = Vec::with_capacity(spec.num_actions);
    for a in 0..spec.num_actions {
        let ta = &spec.transitions[a];
        let mut per_obs = Vec::with_capacity(k);
        for o in 0..k {
            let mut m = DMatrix::zeros(k, k);
            for j in 0..k {
                m[(o, j)] = ta[(o, j)];
            }
            per_obs.push(m);
        }
        t.push(per_obs);
    }
    let model = PsrModel {
        k,
        num_actions: spec.num_actions,
        num_observations: k,
        d: spec.d,
        gamma: spec.gamma,
        q1: spec.b1.clone(),
        u: DVector::repeat(k, 1.0),
        t,
        f: spec.features.clone(),
    };
    model.check()?;
    Ok(model)
}

/// Embeds a POMDP as a PSR via `T_ao = diag(D_{o,.}) T_a`.
pub fn pomdp_to_psr(spec: &PomdpSpec) -> Result<PsrModel> {
    spec.check()?;
    let k = spec.k;
    let mut t = Vec::with_capacity(spec.num_actions);
    for a in 0..spec.num_actions {
        let ta = &spec.transitions[a];
        let mut per_obs = Vec::with_capacity(spec.num_observations);
        for o in 0..spec.num_observations {
            let mut m = DMatrix::zeros(k, k);
            for i in 0..k {
                let w = spec.observation_matrix[(o, i)];
                if w != 0.0 {
                    for j in 0..k {
                        m[(i, j)] = w * ta[(i, j)];
                    }
                }
            }
            per_obs.push(m);
        }
        t.push(per_obs);
    }
    let model = PsrModel {
        k,
        num_actions: spec.num_actions,
        num_observations: spec.num_observations,
        d: spec.d,
        gamma: spec.gamma,
        q1: spec.b1.clone(),
        u: DVector::repeat(k, 1.0),
        t,
        f: spec.features.clone(),
    };
    model.check()?;
    Ok(model)
}

impl MdpSpec {
    pub fn check(&self) -> Result<()> {
        check_spec_common(
            self.k,
            self.num_actions,
            self.d,
            self.gamma,
            &self.transitions,
            &self.features,
            &self.b1,
        )
    }

    /// Converts to a POMDP with an identity observation matrix.
    pub fn to_pomdp(&self) -> PomdpSpec {
        PomdpSpec {
            k: self.k,
            num_actions: self.num_actions,
            num_observations: self.k,
            d: self.d,
            gamma: self.gamma,
            transitions: self.transitions.clone(),
            observation_matrix: DMatrix::identity(self.k, self.k),
            features: self.features.clone(),
            b1: self.b1.clone(),
        }
    }
}

impl PomdpSpec {
    pub fn check(&self) -> Result<()> {
        check_spec_common(
            self.k,
            self.num_actions,
            self.d,
            self.gamma,
            &self.transitions,
            &self.features,
            &self.b1,
        )?;
        if self.observation_matrix.nrows() != self.num_observations
            || self.observation_matrix.ncols() != self.k
        {
            return Err(SfError::DimensionMismatch(
                "observation matrix must be O x k".into(),
            ));
        }
        for j in 0..self.k {
            let col_sum: f64 = self.observation_matrix.column(j).sum();
            if (col_sum - 1.0).abs() > 1e-9 {
                return Err(SfError::InvalidInput(format!(
                    "observation matrix column {j} sums to {col_sum}"
                )));
            }
        }
        Ok(())
    }
}

fn check_spec_common(
    k: usize,
    num_actions: usize,
    d: usize,
    gamma: f64,
    transitions: &[DMatrix<f64>],
    features: &[DMatrix<f64>],
    b1: &DVector<f64>,
) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(SfError::InvalidInput(format!(
            "gamma = {gamma} must be in [0, 1)"
        )));
    }
    if transitions.len() != num_actions || features.len() != num_actions {
        return Err(SfError::DimensionMismatch(
            "need one transition and feature matrix per action".into(),
        ));
    }
    for (a, m) in transitions.iter().enumerate() {
        if m.nrows() != k || m.ncols() != k {
            return Err(SfError::DimensionMismatch(format!(
                "transitions[{a}] must be {k} x {k}"
            )));
        }
        for j in 0..k {
            let col_sum: f64 = m.column(j).sum();
            if (col_sum - 1.0).abs() > 1e-9 {
                return Err(SfError::InvalidInput(format!(
                    "transitions[{a}] column {j} sums to {col_sum}"
                )));
            }
        }
    }
    for (a, m) in features.iter().enumerate() {
        if m.nrows() != d || m.ncols() != k {
            return Err(SfError::DimensionMismatch(format!(
                "features[{a}] must be {d} x {k}"
            )));
        }
    }
    if b1.len() != k {
        return Err(SfError::DimensionMismatch("b1 must have length k".into()));
    }
    let sum: f64 = b1.sum();
    if (sum - 1.0).abs() > 1e-9 || b1.iter().any(|&x| x < -1e-12) {
        return Err(SfError::InvalidInput("b1 must lie on the simplex".into()));
    }
    Ok(())
}

/// Replaces the state coordinates by the values of `k` core tests.
///
/// With `S` the matrix whose rows are the tests' prediction vectors, the
/// returned model has `q1' = S q1`, `T'_ao = S T_ao S^-1`, `u' = S^-T u`, and
/// `F'_a = F_a S^-1`; all observable quantities are invariant.
pub fn transform_via_core_tests(model: &PsrModel, tests: &[SimpleTest]) -> Result<PsrModel> {
    if tests.len() != model.k {
        return Err(SfError::DimensionMismatch(format!(
            "need exactly k = {} core tests, got {}",
            model.k,
            tests.len()
        )));
    }
    let mut s = DMatrix::zeros(model.k, model.k);
    for (i, test) in tests.iter().enumerate() {
        let m = model.prediction_vector(test);
        s.row_mut(i).copy_from(&m.transpose());
    }
    let svd = s.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let min_sv = svd.singular_values.min();
    let ratio = if max_sv > 0.0 { min_sv / max_sv } else { 0.0 };
    if ratio < CORE_TEST_SV_RATIO {
        return Err(SfError::SingularCoreTests { ratio });
    }
    let s_inv = svd
        .pseudo_inverse(0.0)
        .map_err(|e| SfError::InvalidInput(e.to_string()))?;

    let t = model
        .t
        .iter()
        .map(|per_obs| per_obs.iter().map(|m| &s * m * &s_inv).collect())
        .collect();
    let f = model.f.iter().map(|m| m * &s_inv).collect();
    let out = PsrModel {
        k: model.k,
        num_actions: model.num_actions,
        num_observations: model.num_observations,
        d: model.d,
        gamma: model.gamma,
        q1: &s * &model.q1,
        u: s_inv.transpose() * &model.u,
        t,
        f,
    };
    out.check()?;
    Ok(out)
}

/// Samples random-action trajectories and reports the worst violations of the
/// PSR probability constraints.
pub fn validate_model(
    model: &PsrModel,
    num_trajectories: usize,
    horizon: usize,
    seed: u64,
) -> ValidationReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_neg: f64 = 0.0;
    let mut max_dev: f64 = 0.0;
    for _ in 0..num_trajectories {
        let mut q = model.q1.clone();
        for _ in 0..horizon {
            let a = rng.gen_range(0..model.num_actions);
            let mut raw = Vec::with_capacity(model.num_observations);
            let mut sum = 0.0;
            for o in 0..model.num_observations {
                let p = model.u.dot(&(&model.t[a][o] * &q));
                max_neg = max_neg.max(-p);
                raw.push(p.max(0.0));
                sum += p.max(0.0);
            }
            max_dev = max_dev.max((raw.iter().sum::<f64>() - 1.0).abs());
            if sum <= 0.0 {
                break;
            }
            // Sample an observation and condition on it.
            let mut x = rng.gen_range(0.0..sum);
            let mut o = model.num_observations - 1;
            for (i, &p) in raw.iter().enumerate() {
                if x < p {
                    o = i;
                    break;
                }
                x -= p;
            }
            match model.update(&q, a, o) {
                Ok((q_next, _)) => q = q_next,
                Err(_) => break,
            }
        }
    }
    ValidationReport {
        max_negativity: max_neg,
        max_sum_deviation: max_dev,
        trajectories: num_trajectories,
        horizon,
        pass: max_neg <= EPS_PROB && max_dev <= EPS_PROB,
    }
}

// ---------------------------------------------------------------------------
// JSON schemas

/// On-disk model schema. Matrices are row-major flat arrays.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub k: usize,
    pub num_actions: usize,
    pub num_observations: usize,
    pub gamma: f64,
    pub q1: Vec<f64>,
    pub u: Vec<f64>,
    #[serde(rename = "T")]
    pub t: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "F")]
    pub f: Vec<Vec<f64>>,
}

impl ModelFile {
    pub fn from_model(m: &PsrModel) -> Self {
        Self {
            k: m.k,
            num_actions: m.num_actions,
            num_observations: m.num_observations,
            gamma: m.gamma,
            q1: m.q1.iter().copied().collect(),
            u: m.u.iter().copied().collect(),
            t: m
                .t
                .iter()
                .map(|per_obs| per_obs.iter().map(mat_to_row_major).collect())
                .collect(),
            f: m.f.iter().map(mat_to_row_major).collect(),
        }
    }

    pub fn into_model(self) -> Result<PsrModel> {
        if self.f.is_empty() || self.k == 0 {
            return Err(SfError::InvalidInput("empty model file".into()));
        }
        if self.f[0].len() % self.k != 0 {
            return Err(SfError::DimensionMismatch(
                "feature array length is not a multiple of k".into(),
            ));
        }
        let d = self.f[0].len() / self.k;
        let t = self
            .t
            .iter()
            .map(|per_obs| {
                per_obs
                    .iter()
                    .map(|m| mat_from_row_major(m, self.k, self.k))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let f = self
            .f
            .iter()
            .map(|m| mat_from_row_major(m, d, self.k))
            .collect::<Result<Vec<_>>>()?;
        let model = PsrModel {
            k: self.k,
            num_actions: self.num_actions,
            num_observations: self.num_observations,
            d,
            gamma: self.gamma,
            q1: DVector::from_vec(self.q1),
            u: DVector::from_vec(self.u),
            t,
            f,
        };
        model.check()?;
        Ok(model)
    }
}

/// On-disk MDP/POMDP spec schema; `observation_matrix` is absent for MDPs.
#[derive(Debug, Serialize, Deserialize)]
pub struct SpecFile {
    pub gamma: f64,
    /// Per-action `k x k` row-major transition matrices.
    pub transitions: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observation_matrix: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_observations: Option<usize>,
    /// Per-action `d x k` row-major feature matrices.
    pub features: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
}

impl SpecFile {
    pub fn from_mdp(spec: &MdpSpec) -> Self {
        Self {
            gamma: spec.gamma,
            transitions: spec.transitions.iter().map(mat_to_row_major).collect(),
            observation_matrix: None,
            num_observations: None,
            features: spec.features.iter().map(mat_to_row_major).collect(),
            b1: spec.b1.iter().copied().collect(),
        }
    }

    pub fn from_pomdp(spec: &PomdpSpec) -> Self {
        Self {
            gamma: spec.gamma,
            transitions: spec.transitions.iter().map(mat_to_row_major).collect(),
            observation_matrix: Some(mat_to_row_major(&spec.observation_matrix)),
            num_observations: Some(spec.num_observations),
            features: spec.features.iter().map(mat_to_row_major).collect(),
            b1: spec.b1.iter().copied().collect(),
        }
    }

    /// Parses into an MDP or POMDP depending on `observation_matrix`.
    pub fn into_specs(self) -> Result<std::result::Result<MdpSpec, PomdpSpec>> {
        let k = self.b1.len();
        if k == 0 || self.transitions.is_empty() || self.features.is_empty() {
            return Err(SfError::InvalidInput("empty spec file".into()));
        }
        let num_actions = self.transitions.len();
        if self.features.len() != num_actions || self.features[0].len() % k != 0 {
            return Err(SfError::DimensionMismatch(
                "features must have one d x k matrix per action".into(),
            ));
        }
        let d = self.features[0].len() / k;
        let transitions = self
            .transitions
            .iter()
            .map(|m| mat_from_row_major(m, k, k))
            .collect::<Result<Vec<_>>>()?;
        let features = self
            .features
            .iter()
            .map(|m| mat_from_row_major(m, d, k))
            .collect::<Result<Vec<_>>>()?;
        let b1 = DVector::from_vec(self.b1);
        match self.observation_matrix {
            None => {
                let spec = MdpSpec {
                    k,
                    num_actions,
                    d,
                    gamma: self.gamma,
                    transitions,
                    features,
                    b1,
                };
                spec.check()?;
                Ok(Ok(spec))
            }
            Some(obs) => {
                if obs.len() % k != 0 {
                    return Err(SfError::DimensionMismatch(
                        "observation matrix length is not a multiple of k".into(),
                    ));
                }
                let num_observations = self.num_observations.unwrap_or(obs.len() / k);
                let observation_matrix = mat_from_row_major(&obs, num_observations, k)?;
                let spec = PomdpSpec {
                    k,
                    num_actions,
                    num_observations,
                    d,
                    gamma: self.gamma,
                    transitions,
                    observation_matrix,
                    features,
                    b1,
                };
                spec.check()?;
                Ok(Err(spec))
            }
        }
    }
}

pub fn mat_to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn mat_from_row_major(data: &[f64], rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(SfError::DimensionMismatch(format!(
            "expected {} entries for a {rows} x {cols} matrix, got {}",
            rows * cols,
            data.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

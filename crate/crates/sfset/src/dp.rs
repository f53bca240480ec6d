//! Point-based dynamic programming over successor feature sets.
//!
//! The successor feature set obeys the set-valued Bellman recursion
//!
//!   Phi^(n+1) = conv union_a [ F_a + gamma * sum_o Phi^(n) T_ao ]
//!
//! starting from Phi^(0) = {0}. We never materialize Phi itself: the working
//! representation stores, per (action, observation) pair, the boundary points
//! of Phi_ao = Phi * T_ao found by maximizing along a fixed set of direction
//! matrices m_i. One backup, for each direction m_i and each target pair
//! (a, o), assembles the new boundary point
//!
//!   [ F_{a*} + gamma * sum_o' v_{a*,o'} ] T_ao
//!
//! where each v_{a',o'} maximizes <m_i, phi T_ao> = <m_i T_ao^T, phi> over
//! the stored Phi_{a'o'} points independently per o' (the max passes through
//! the Minkowski sum), and a* maximizes the assembled total. Because
//! m_i T_ao^T has nonzero columns only at the nonzero rows of T_ao, scoring
//! stays cheap on the sparse operators produced by MDP and POMDP embeddings.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SfError};
use crate::model::{mat_from_row_major, mat_to_row_major, PsrModel};

/// Values within this of the maximum are ties; the lowest index wins.
pub const TIE_TOL: f64 = 1e-12;

/// Default Frobenius dedup tolerance for stored boundary points.
pub const DEDUP_TOL: f64 = 1e-10;

/// A fixed set of unit-Frobenius-norm direction matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionSet {
    pub directions: Vec<DMatrix<f64>>,
    pub seed: u64,
}

impl DirectionSet {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn from_matrices(mut directions: Vec<DMatrix<f64>>, seed: u64) -> Self {
        for m in &mut directions {
            let n = m.norm();
            if n > 0.0 {
                *m /= n;
            }
        }
        Self { directions, seed }
    }
}

/// `count` i.i.d. standard-Gaussian d x k matrices, Frobenius-normalized.
pub fn sample_directions(seed: u64, count: usize, d: usize, k: usize) -> DirectionSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut directions = Vec::with_capacity(count);
    for _ in 0..count {
        let mut m = DMatrix::zeros(d, k);
        for i in 0..d {
            for j in 0..k {
                m[(i, j)] = rng.sample(StandardNormal);
            }
        }
        let n = m.norm();
        if n > 0.0 {
            m /= n;
        }
        directions.push(m);
    }
    DirectionSet { directions, seed }
}

/// Max Frobenius inner product over a point list; first maximizer wins ties.
pub fn support(points: &[DMatrix<f64>], m: &DMatrix<f64>) -> Result<(f64, usize)> {
    if points.is_empty() {
        return Err(SfError::EmptySet);
    }
    let vals: Vec<f64> = points.iter().map(|p| p.dot(m)).collect();
    Ok(argmax_tie(&vals))
}

/// Max value, then the first index within [`TIE_TOL`] of it.
pub fn argmax_tie(vals: &[f64]) -> (f64, usize) {
    let mut best = f64::NEG_INFINITY;
    for &v in vals {
        if v > best {
            best = v;
        }
    }
    for (i, &v) in vals.iter().enumerate() {
        if v >= best - TIE_TOL {
            return (best, i);
        }
    }
    (best, 0)
}

// ---------------------------------------------------------------------------
// Model view: sparsity-analyzed operators

/// A `T_ao` operator analyzed for sparsity.
#[derive(Debug, Clone)]
pub enum TOp {
    /// `T_ao = e_row t^T`: a single nonzero row (MDP embeddings).
    Rank1 {
        row: usize,
        t: DVector<f64>,
        /// Indices with `t[j] != 0`.
        t_nz: Vec<usize>,
    },
    /// General operator with its nonzero-row index list.
    General {
        mat: DMatrix<f64>,
        nz_rows: Vec<usize>,
    },
}

impl TOp {
    fn analyze(mat: &DMatrix<f64>) -> TOp {
        let k = mat.nrows();
        let nz_rows: Vec<usize> = (0..k)
            .filter(|&r| (0..mat.ncols()).any(|j| mat[(r, j)] != 0.0))
            .collect();
        if nz_rows.len() == 1 {
            let row = nz_rows[0];
            let t = mat.row(row).transpose();
            let t_nz = (0..t.len()).filter(|&j| t[j] != 0.0).collect();
            TOp::Rank1 { row, t, t_nz }
        } else {
            TOp::General {
                mat: mat.clone(),
                nz_rows,
            }
        }
    }

    pub fn is_rank1(&self) -> bool {
        matches!(self, TOp::Rank1 { .. })
    }
}

/// Precomputed per-model data the backup and all readouts work from.
#[derive(Debug, Clone)]
pub struct ModelView {
    pub d: usize,
    pub k: usize,
    pub num_actions: usize,
    pub num_observations: usize,
    pub gamma: f64,
    pub f: Vec<DMatrix<f64>>,
    pub tops: Vec<Vec<TOp>>,
    pub fingerprint: u64,
    pub max_f_norm: f64,
}

impl ModelView {
    pub fn new(model: &PsrModel) -> Self {
        let tops = model
            .t
            .iter()
            .map(|per_obs| per_obs.iter().map(TOp::analyze).collect())
            .collect();
        Self {
            d: model.d,
            k: model.k,
            num_actions: model.num_actions,
            num_observations: model.num_observations,
            gamma: model.gamma,
            f: model.f.clone(),
            tops,
            fingerprint: model.fingerprint(),
            max_f_norm: model.max_feature_norm(),
        }
    }
}

/// A direction with explicit nonzero columns: `mat` holds the columns listed
/// in `cols`. Full (dense) directions list every column.
#[derive(Debug, Clone)]
pub struct WDir {
    pub cols: Vec<usize>,
    pub mat: DMatrix<f64>,
}

impl WDir {
    pub fn full(m: &DMatrix<f64>) -> Self {
        Self {
            cols: (0..m.ncols()).collect(),
            mat: m.clone(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.mat.iter().all(|&x| x == 0.0)
    }

    /// Frobenius inner product with a full d x k matrix.
    pub fn dot_full(&self, m: &DMatrix<f64>) -> f64 {
        let mut s = 0.0;
        for (ci, &j) in self.cols.iter().enumerate() {
            for i in 0..self.mat.nrows() {
                s += self.mat[(i, ci)] * m[(i, j)];
            }
        }
        s
    }
}

/// `W = m T_ao^T`: the direction under which previous-iterate points are
/// scored when the target cell is (a, o).
pub fn make_wdir(view: &ModelView, m: &DMatrix<f64>, a: usize, o: usize) -> WDir {
    let d = view.d;
    match &view.tops[a][o] {
        TOp::Rank1 { row, t, t_nz } => {
            let mut w = DMatrix::zeros(d, 1);
            for &j in t_nz {
                for i in 0..d {
                    w[(i, 0)] += t[j] * m[(i, j)];
                }
            }
            WDir {
                cols: vec![*row],
                mat: w,
            }
        }
        TOp::General { mat, nz_rows } => {
            let mut w = DMatrix::zeros(d, nz_rows.len());
            for (ci, &r) in nz_rows.iter().enumerate() {
                for j in 0..view.k {
                    let x = mat[(r, j)];
                    if x != 0.0 {
                        for i in 0..d {
                            w[(i, ci)] += x * m[(i, j)];
                        }
                    }
                }
            }
            WDir {
                cols: nz_rows.clone(),
                mat: w,
            }
        }
    }
}

// ---------------------------------------------------------------------------
// The stored set

/// Boundary points of one Phi_ao cell. When `T_ao = e_row t^T` every image
/// point has the form `c t^T`, so only the left factors are stored.
#[derive(Debug, Clone, PartialEq)]
pub enum CellData {
    Rank1 { lefts: Vec<DVector<f64>> },
    Dense { points: Vec<DMatrix<f64>> },
}

impl CellData {
    pub fn len(&self) -> usize {
        match self {
            CellData::Rank1 { lefts } => lefts.len(),
            CellData::Dense { points } => points.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The point-based representation of a successor feature set: per (a, o),
/// the stored boundary points of Phi_ao, plus the directions that produced
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct SfSet {
    pub d: usize,
    pub k: usize,
    pub num_actions: usize,
    pub num_observations: usize,
    pub gamma: f64,
    pub iteration: usize,
    pub model_fingerprint: u64,
    pub directions: DirectionSet,
    pub cells: Vec<Vec<CellData>>,
}

impl SfSet {
    /// Initial set: every cell holds the image of `init` (the zero matrix by
    /// default, or a stop-policy matrix for monotone backups).
    pub fn initial(view: &ModelView, directions: DirectionSet, init: Option<&DMatrix<f64>>) -> Self {
        let zero = DMatrix::zeros(view.d, view.k);
        let base = init.unwrap_or(&zero);
        let cells = (0..view.num_actions)
            .map(|a| {
                (0..view.num_observations)
                    .map(|o| match &view.tops[a][o] {
                        TOp::Rank1 { row, .. } => {
                            // base * (e_row t^T) has left factor base e_row.
                            let mut c = DVector::zeros(view.d);
                            for i in 0..view.d {
                                c[i] = base[(i, *row)];
                            }
                            CellData::Rank1 { lefts: vec![c] }
                        }
                        TOp::General { mat, nz_rows } => {
                            let mut p = DMatrix::zeros(view.d, view.k);
                            for &r in nz_rows {
                                for j in 0..view.k {
                                    let x = mat[(r, j)];
                                    if x != 0.0 {
                                        for i in 0..view.d {
                                            p[(i, j)] += x * base[(i, r)];
                                        }
                                    }
                                }
                            }
                            CellData::Dense { points: vec![p] }
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            d: view.d,
            k: view.k,
            num_actions: view.num_actions,
            num_observations: view.num_observations,
            gamma: view.gamma,
            iteration: 0,
            model_fingerprint: view.fingerprint,
            directions,
            cells,
        }
    }

    pub fn total_points(&self) -> usize {
        self.cells
            .iter()
            .flat_map(|per_obs| per_obs.iter().map(|c| c.len()))
            .sum()
    }

    /// Materializes stored point `p` of cell (a, o) as a full d x k matrix.
    pub fn point_matrix(&self, view: &ModelView, a: usize, o: usize, p: usize) -> DMatrix<f64> {
        match &self.cells[a][o] {
            CellData::Rank1 { lefts } => match &view.tops[a][o] {
                TOp::Rank1 { t, t_nz, .. } => {
                    let mut m = DMatrix::zeros(self.d, self.k);
                    for &j in t_nz {
                        for i in 0..self.d {
                            m[(i, j)] = lefts[p][i] * t[j];
                        }
                    }
                    m
                }
                _ => unreachable!("rank-1 cell requires rank-1 operator"),
            },
            CellData::Dense { points } => points[p].clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&SfSetFile::from_set(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: SfSetFile = serde_json::from_str(s)?;
        file.into_set()
    }
}

/// Support of cell (a, o) under a sparse direction `w`, over the stored
/// image points themselves. Returns (value, first-maximizer index).
pub fn cell_support(
    view: &ModelView,
    cell: &CellData,
    a: usize,
    o: usize,
    w: &WDir,
) -> (f64, usize) {
    match cell {
        CellData::Rank1 { lefts } => {
            // <W, c t^T> = (sum_j t[j] W[:,j]) . c
            let (t, _) = match &view.tops[a][o] {
                TOp::Rank1 { t, t_nz, .. } => (t, t_nz),
                _ => unreachable!("rank-1 cell requires rank-1 operator"),
            };
            let d = view.d;
            if w.cols.iter().all(|&j| t[j] == 0.0) {
                return (0.0, 0);
            }
            let mut wv = vec![0.0; d];
            for (ci, &j) in w.cols.iter().enumerate() {
                let tj = t[j];
                if tj != 0.0 {
                    for (i, wvi) in wv.iter_mut().enumerate() {
                        *wvi += tj * w.mat[(i, ci)];
                    }
                }
            }
            let mut best = f64::NEG_INFINITY;
            for c in lefts {
                let mut s = 0.0;
                for i in 0..d {
                    s += wv[i] * c[i];
                }
                if s > best {
                    best = s;
                }
            }
            for (p, c) in lefts.iter().enumerate() {
                let mut s = 0.0;
                for i in 0..d {
                    s += wv[i] * c[i];
                }
                if s >= best - TIE_TOL {
                    return (best, p);
                }
            }
            (best, 0)
        }
        CellData::Dense { points } => {
            let d = view.d;
            let score = |pt: &DMatrix<f64>| {
                let mut s = 0.0;
                for (ci, &j) in w.cols.iter().enumerate() {
                    for i in 0..d {
                        s += w.mat[(i, ci)] * pt[(i, j)];
                    }
                }
                s
            };
            let mut best = f64::NEG_INFINITY;
            for pt in points {
                let s = score(pt);
                if s > best {
                    best = s;
                }
            }
            for (p, pt) in points.iter().enumerate() {
                if score(pt) >= best - TIE_TOL {
                    return (best, p);
                }
            }
            (best, 0)
        }
    }
}

/// Support of the assembled set `conv union_a [F_a + gamma sum_o Phi_ao]`
/// under direction `w`: this is the exact support of one exact backup of the
/// hull of the stored points.
pub fn assembled_support(view: &ModelView, set: &SfSet, w: &WDir) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for a in 0..view.num_actions {
        let mut s = w.dot_full(&view.f[a]);
        for o in 0..view.num_observations {
            s += view.gamma * cell_support(view, &set.cells[a][o], a, o, w).0;
        }
        if s > best {
            best = s;
        }
    }
    best
}

/// One-step lookahead support: the support the set would have after one more
/// exact-form backup, `max_a [<m, F_a> + gamma sum_o h_assembled(m T_ao^T)]`.
pub fn backup_support(view: &ModelView, set: &SfSet, m: &DMatrix<f64>) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for a in 0..view.num_actions {
        let mut s = m.dot(&view.f[a]);
        for o in 0..view.num_observations {
            let w = make_wdir(view, m, a, o);
            if w.is_zero() {
                continue;
            }
            s += view.gamma * assembled_support(view, set, &w);
        }
        if s > best {
            best = s;
        }
    }
    best
}

/// Per-direction Bellman errors `h_backup - h_assembled` of the represented
/// set.
pub fn bellman_error(view: &ModelView, set: &SfSet, dirs: &[DMatrix<f64>]) -> Vec<f64> {
    dirs.par_iter()
        .map(|m| {
            let h_now = assembled_support(view, set, &WDir::full(m));
            backup_support(view, set, m) - h_now
        })
        .collect()
}

// ---------------------------------------------------------------------------
// The backup

/// Configuration for [`point_based_backup`] / [`run_dp`].
#[derive(Debug, Clone)]
pub struct BackupConfig {
    /// Keep the better of the old and new point per direction (stoppable
    /// problems).
    pub monotone: bool,
    /// If set, only these direction indices produce new points; all old
    /// points are retained.
    pub incremental_subset: Option<Vec<usize>>,
    pub dedup_tol: f64,
    /// Initialization for stoppable problems: the stop policy's successor
    /// matrix. Defaults to the zero matrix.
    pub stop_matrix: Option<DMatrix<f64>>,
    pub max_iters: usize,
    /// Convergence: max per-direction one-step support change. Defaults to
    /// `1e-8 * (1 - gamma)^-1 * max_a ||F_a||_F`.
    pub convergence_tol: Option<f64>,
    /// Fresh random directions tracked in the trace (0 disables).
    pub fresh_count: usize,
    pub fresh_seed: u64,
}

impl Default for BackupConfig {
    fn default() -> Self {
        Self {
            monotone: false,
            incremental_subset: None,
            dedup_tol: DEDUP_TOL,
            stop_matrix: None,
            max_iters: 1000,
            convergence_tol: None,
            fresh_count: 25,
            fresh_seed: 0x0f5e5e,
        }
    }
}

/// One new point, or a carried-over old one (monotone mode).
#[derive(Clone)]
enum SlotPoint {
    Rank1(DVector<f64>),
    Dense(DMatrix<f64>),
    FromOld(usize),
    /// The shared zero-direction point (action 0, first stored point in every
    /// cell); materialized once per cell during the merge.
    ZeroDefault,
}

struct DirOutput {
    /// One slot per (a, o), flattened a * O + o.
    slots: Vec<SlotPoint>,
    /// `h_assembled(m_i T_ao^T)` per (a, o), used to assemble h_backup.
    cell_scores: Vec<f64>,
}

/// One point-based backup; also returns per-direction one-step lookahead
/// supports (`h_backup` of the input set), which the caller gets for free.
pub fn backup_with_scores(
    view: &ModelView,
    set: &SfSet,
    config: &BackupConfig,
) -> (SfSet, Vec<f64>) {
    backup_with_scores_masked(view, set, config, None)
}

/// [`backup_with_scores`] with an optional precomputed zero-direction mask:
/// `mask[i * A * O + a * O + o]` is true iff `m_i T_ao^T` is the zero matrix.
/// The mask depends only on the directions and the model, so callers running
/// many backups of the same direction set can compute it once.
pub fn backup_with_scores_masked(
    view: &ModelView,
    set: &SfSet,
    config: &BackupConfig,
    zero_mask: Option<&[bool]>,
) -> (SfSet, Vec<f64>) {
    let dirs = &set.directions.directions;
    let na = view.num_actions;
    let no = view.num_observations;
    let gamma = view.gamma;

    let active = |i: usize| match &config.incremental_subset {
        None => true,
        Some(subset) => subset.contains(&i),
    };

    // A zero direction selects action 0 with the first stored point in every
    // cell, so its slot is the same for all directions: build it once.
    let zero_sels = vec![0usize; no];
    let zero_slots: Vec<SlotPoint> = (0..na * no)
        .map(|c| construct_point(view, set, 0, &zero_sels, c / no, c % no))
        .collect();

    let outputs: Vec<DirOutput> = (0..dirs.len())
        .into_par_iter()
        .map(|i| {
            if !active(i) {
                return DirOutput {
                    slots: Vec::new(),
                    cell_scores: Vec::new(),
                };
            }
            let m = &dirs[i];
            let mut slots = Vec::with_capacity(na * no);
            let mut cell_scores = Vec::with_capacity(na * no);
            let mut scores = vec![0.0; na];
            let mut sels = vec![vec![0usize; no]; na];
            for a in 0..na {
                for o in 0..no {
                    let known_zero = zero_mask.map(|mk| mk[i * na * no + a * no + o]);
                    let w = if known_zero == Some(true) {
                        None
                    } else {
                        Some(make_wdir(view, m, a, o))
                    };
                    let zero = match &w {
                        None => true,
                        Some(w) => w.is_zero(),
                    };
                    let (root, score) = if zero {
                        // All candidates score zero; the tie rule selects
                        // action 0 with the first stored point everywhere.
                        (0usize, 0.0)
                    } else {
                        let w = w.as_ref().unwrap();
                        for ap in 0..na {
                            let mut s = w.dot_full(&view.f[ap]);
                            for op in 0..no {
                                let (v, idx) =
                                    cell_support(view, &set.cells[ap][op], ap, op, w);
                                s += gamma * v;
                                sels[ap][op] = idx;
                            }
                            scores[ap] = s;
                        }
                        let (best, root) = argmax_tie(&scores);
                        (root, best)
                    };
                    cell_scores.push(score);
                    if config.monotone {
                        // Keep the better of the new point and the best old
                        // point under m_i.
                        let wm = WDir::full(m);
                        let (old_val, old_idx) =
                            cell_support(view, &set.cells[a][o], a, o, &wm);
                        if old_val >= score {
                            slots.push(SlotPoint::FromOld(old_idx));
                            continue;
                        }
                    }
                    slots.push(if zero {
                        SlotPoint::ZeroDefault
                    } else {
                        construct_point(view, set, root, &sels[root], a, o)
                    });
                }
            }
            DirOutput { slots, cell_scores }
        })
        .collect();

    // h_backup(m_i) = max_a [<m_i, F_a> + gamma sum_o h_assembled(m_i T_ao^T)].
    let h_backup: Vec<f64> = (0..dirs.len())
        .map(|i| {
            if outputs[i].cell_scores.is_empty() {
                return f64::NAN;
            }
            let m = &dirs[i];
            let mut best = f64::NEG_INFINITY;
            for a in 0..na {
                let mut s = m.dot(&view.f[a]);
                for o in 0..no {
                    s += gamma * outputs[i].cell_scores[a * no + o];
                }
                if s > best {
                    best = s;
                }
            }
            best
        })
        .collect();

    // Merge per-direction slots into new cells, in direction order, dedup.
    let mut cells: Vec<Vec<CellData>> = Vec::with_capacity(na);
    for a in 0..na {
        let mut per_obs = Vec::with_capacity(no);
        for o in 0..no {
            let rank1 = view.tops[a][o].is_rank1();
            let keep_old = config.incremental_subset.is_some();
            let mut lefts: Vec<DVector<f64>> = Vec::new();
            let mut points: Vec<DMatrix<f64>> = Vec::new();
            if keep_old {
                match &set.cells[a][o] {
                    CellData::Rank1 { lefts: old } => lefts.extend(old.iter().cloned()),
                    CellData::Dense { points: old } => points.extend(old.iter().cloned()),
                }
            }
            // Identical zero-direction slots would all be merged by dedup;
            // materialize only the first so the kept list is unchanged.
            let mut zero_pushed = false;
            for out in &outputs {
                if out.slots.is_empty() {
                    continue;
                }
                match &out.slots[a * no + o] {
                    SlotPoint::Rank1(c) => lefts.push(c.clone()),
                    SlotPoint::Dense(p) => points.push(p.clone()),
                    SlotPoint::FromOld(idx) => match &set.cells[a][o] {
                        CellData::Rank1 { lefts: old } => lefts.push(old[*idx].clone()),
                        CellData::Dense { points: old } => points.push(old[*idx].clone()),
                    },
                    SlotPoint::ZeroDefault => {
                        if !zero_pushed {
                            zero_pushed = true;
                            match &zero_slots[a * no + o] {
                                SlotPoint::Rank1(c) => lefts.push(c.clone()),
                                SlotPoint::Dense(p) => points.push(p.clone()),
                                _ => unreachable!("zero slot is always a constructed point"),
                            }
                        }
                    }
                }
            }
            let cell = if rank1 {
                dedup_vectors(&mut lefts, config.dedup_tol);
                CellData::Rank1 { lefts }
            } else {
                dedup_matrices(&mut points, config.dedup_tol);
                CellData::Dense { points }
            };
            per_obs.push(cell);
        }
        cells.push(per_obs);
    }

    let new_set = SfSet {
        d: view.d,
        k: view.k,
        num_actions: na,
        num_observations: no,
        gamma,
        iteration: set.iteration + 1,
        model_fingerprint: view.fingerprint,
        directions: set.directions.clone(),
        cells,
    };
    (new_set, h_backup)
}

/// One point-based backup (the spec-level operation).
pub fn point_based_backup(model: &PsrModel, set: &SfSet, config: &BackupConfig) -> SfSet {
    let view = ModelView::new(model);
    backup_with_scores(&view, set, config).0
}

/// Builds `[F_root + gamma sum_o' chosen_{o'}] T_ao` for the target cell.
fn construct_point(
    view: &ModelView,
    set: &SfSet,
    root: usize,
    sels: &[usize],
    a: usize,
    o: usize,
) -> SlotPoint {
    let d = view.d;
    let no = view.num_observations;
    let gamma = view.gamma;
    match &view.tops[a][o] {
        TOp::Rank1 { row, .. } => {
            // Only column `row` of the assembled matrix survives.
            let r = *row;
            let mut left = DVector::zeros(d);
            for i in 0..d {
                left[i] = view.f[root][(i, r)];
            }
            for op in 0..no {
                let p = sels[op];
                match &set.cells[root][op] {
                    CellData::Rank1 { lefts } => {
                        let t = match &view.tops[root][op] {
                            TOp::Rank1 { t, .. } => t,
                            _ => unreachable!(),
                        };
                        let tr = t[r];
                        if tr != 0.0 {
                            for i in 0..d {
                                left[i] += gamma * tr * lefts[p][i];
                            }
                        }
                    }
                    CellData::Dense { points } => {
                        for i in 0..d {
                            left[i] += gamma * points[p][(i, r)];
                        }
                    }
                }
            }
            SlotPoint::Rank1(left)
        }
        TOp::General { mat, nz_rows } => {
            // Assemble y = F_root + gamma sum chosen, then y * T_ao. Only the
            // columns of y at T_ao's nonzero rows matter.
            let mut y = view.f[root].clone();
            for op in 0..no {
                let p = sels[op];
                match &set.cells[root][op] {
                    CellData::Rank1 { lefts } => {
                        let (t, t_nz) = match &view.tops[root][op] {
                            TOp::Rank1 { t, t_nz, .. } => (t, t_nz),
                            _ => unreachable!(),
                        };
                        for &j in t_nz {
                            for i in 0..d {
                                y[(i, j)] += gamma * t[j] * lefts[p][i];
                            }
                        }
                    }
                    CellData::Dense { points } => {
                        y += &points[p] * gamma;
                    }
                }
            }
            let mut out = DMatrix::zeros(d, view.k);
            for &r in nz_rows {
                for j in 0..view.k {
                    let x = mat[(r, j)];
                    if x != 0.0 {
                        for i in 0..d {
                            out[(i, j)] += x * y[(i, r)];
                        }
                    }
                }
            }
            SlotPoint::Dense(out)
        }
    }
}

// ---------------------------------------------------------------------------
// Dedup

fn fnv_bits(xs: impl Iterator<Item = f64>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for x in xs {
        for b in x.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// Removes duplicates: exact bit-level duplicates first (hash pass), then
/// pairs within `tol` in Euclidean/Frobenius norm. Earlier entries win, and
/// relative order is preserved.
fn dedup_keep<T, NF, DF, HF>(items: &mut Vec<T>, tol: f64, norm: NF, dist: DF, hash: HF)
where
    NF: Fn(&T) -> f64,
    DF: Fn(&T, &T) -> f64,
    HF: Fn(&T) -> u64,
{
    use std::collections::HashMap;
    let mut seen: HashMap<u64, Vec<usize>> = HashMap::new();
    let mut kept: Vec<T> = Vec::with_capacity(items.len());
    let mut norms: Vec<f64> = Vec::new();
    'outer: for item in items.drain(..) {
        let h = hash(&item);
        if let Some(idxs) = seen.get(&h) {
            for &p in idxs {
                if dist(&kept[p], &item) == 0.0 {
                    continue 'outer;
                }
            }
        }
        let n = norm(&item);
        for p in 0..kept.len() {
            if (norms[p] - n).abs() <= tol && dist(&kept[p], &item) <= tol {
                continue 'outer;
            }
        }
        seen.entry(h).or_default().push(kept.len());
        kept.push(item);
        norms.push(n);
    }
    *items = kept;
}

pub(crate) fn dedup_vectors(items: &mut Vec<DVector<f64>>, tol: f64) {
    dedup_keep(
        items,
        tol,
        |v| v.norm(),
        |a, b| (a - b).norm(),
        |v| fnv_bits(v.iter().copied()),
    );
}

pub(crate) fn dedup_matrices(items: &mut Vec<DMatrix<f64>>, tol: f64) {
    dedup_keep(
        items,
        tol,
        |m| m.norm(),
        |a, b| (a - b).norm(),
        |m| fnv_bits(m.iter().copied()),
    );
}

// ---------------------------------------------------------------------------
// The DP driver

/// One trace row per iteration. Errors are measured on the set as it stood
/// at the start of the iteration; `wall_time` is seconds spent in the
/// iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub max_error_optimized: f64,
    pub max_error_fresh: f64,
    pub wall_time: f64,
}

/// Runs point-based DP to convergence (max per-direction one-step support
/// change below tolerance) or `max_iters`. Non-convergence is visible in the
/// trace, not an error.
pub fn run_dp(
    model: &PsrModel,
    config: &BackupConfig,
    directions: DirectionSet,
) -> (SfSet, Vec<TraceRow>) {
    let view = ModelView::new(model);
    run_dp_view(&view, config, directions)
}

pub fn run_dp_view(
    view: &ModelView,
    config: &BackupConfig,
    directions: DirectionSet,
) -> (SfSet, Vec<TraceRow>) {
    let tol = config
        .convergence_tol
        .unwrap_or_else(|| 1e-8 / (1.0 - view.gamma) * view.max_f_norm);
    let fresh = if config.fresh_count > 0 {
        sample_directions(config.fresh_seed, config.fresh_count, view.d, view.k).directions
    } else {
        Vec::new()
    };
    let mut set = SfSet::initial(view, directions, config.stop_matrix.as_ref());
    // The zero-direction mask depends only on the fixed directions and the
    // model, so compute it once for all iterations.
    let na = view.num_actions;
    let no = view.num_observations;
    let zero_mask: Vec<bool> = set
        .directions
        .directions
        .par_iter()
        .flat_map_iter(|m| {
            (0..na * no).map(move |c| make_wdir(view, m, c / no, c % no).is_zero())
        })
        .collect();
    let mut h_now: Vec<f64> = set
        .directions
        .directions
        .par_iter()
        .map(|m| assembled_support(view, &set, &WDir::full(m)))
        .collect();
    let mut trace = Vec::new();
    for n in 1..=config.max_iters {
        let t0 = Instant::now();
        let fresh_err = fresh
            .par_iter()
            .map(|m| {
                backup_support(view, &set, m) - assembled_support(view, &set, &WDir::full(m))
            })
            .fold(|| f64::NEG_INFINITY, f64::max)
            .reduce(|| f64::NEG_INFINITY, f64::max);
        let (new_set, h_backup) = backup_with_scores_masked(view, &set, config, Some(&zero_mask));
        let opt_err = h_backup
            .iter()
            .zip(&h_now)
            .filter(|(hb, _)| hb.is_finite())
            .map(|(hb, h)| hb - h)
            .fold(f64::NEG_INFINITY, f64::max);
        set = new_set;
        // For a plain backup the assembled support of the new set at a stored
        // direction equals the one-step lookahead support: the direction's own
        // slot points achieve it, and every mixed choice stays inside the
        // backup of the old hull. Monotone/incremental variants add extra
        // points, so those recompute.
        let h_new: Vec<f64> = if config.monotone || config.incremental_subset.is_some() {
            set.directions
                .directions
                .par_iter()
                .map(|m| assembled_support(view, &set, &WDir::full(m)))
                .collect()
        } else {
            h_backup.clone()
        };
        let delta = h_new
            .iter()
            .zip(&h_now)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        h_now = h_new;
        trace.push(TraceRow {
            iteration: n,
            max_error_optimized: opt_err,
            max_error_fresh: if fresh.is_empty() {
                f64::NAN
            } else {
                fresh_err
            },
            wall_time: t0.elapsed().as_secs_f64(),
        });
        if delta < tol {
            break;
        }
    }
    (set, trace)
}

// ---------------------------------------------------------------------------
// Projection: the per-state / per-q view and its linear maximization oracle

/// The set Phi q, exposed through per-action linear maximization oracles.
/// Vertices are never enumerated; a query direction returns the maximizing
/// vertex together with its annotation (chosen point index per observation).
pub struct Lmo {
    pub q: DVector<f64>,
    /// `f_q[a] = F_a q`.
    pub f_q: Vec<DVector<f64>>,
    /// `proj[a][o][p]` = stored point p of cell (a, o) times q.
    pub proj: Vec<Vec<Vec<DVector<f64>>>>,
    pub gamma: f64,
}

/// A vertex of Phi_a q returned by the oracle.
#[derive(Debug, Clone)]
pub struct LmoVertex {
    pub action: usize,
    pub value: f64,
    pub vertex: DVector<f64>,
    /// Chosen stored-point index per observation.
    pub choices: Vec<usize>,
}

/// Builds the projected view of the set at state `q`.
pub fn project_set(view: &ModelView, set: &SfSet, q: &DVector<f64>) -> Lmo {
    let mut f_q = Vec::with_capacity(view.num_actions);
    let mut proj = Vec::with_capacity(view.num_actions);
    for a in 0..view.num_actions {
        f_q.push(&view.f[a] * q);
        let mut per_obs = Vec::with_capacity(view.num_observations);
        for o in 0..view.num_observations {
            let pts: Vec<DVector<f64>> = match &set.cells[a][o] {
                CellData::Rank1 { lefts } => {
                    let t = match &view.tops[a][o] {
                        TOp::Rank1 { t, .. } => t,
                        _ => unreachable!(),
                    };
                    let tq = t.dot(q);
                    lefts.iter().map(|c| c * tq).collect()
                }
                CellData::Dense { points } => points.iter().map(|p| p * q).collect(),
            };
            per_obs.push(pts);
        }
        proj.push(per_obs);
    }
    Lmo {
        q: q.clone(),
        f_q,
        proj,
        gamma: view.gamma,
    }
}

impl Lmo {
    pub fn num_actions(&self) -> usize {
        self.f_q.len()
    }

    /// Maximizes `g . x` over Phi_a q.
    pub fn maximize_action(&self, a: usize, g: &DVector<f64>) -> LmoVertex {
        let mut vertex = self.f_q[a].clone();
        let mut choices = Vec::with_capacity(self.proj[a].len());
        for pts in &self.proj[a] {
            let vals: Vec<f64> = pts.iter().map(|p| g.dot(p)).collect();
            let (_, idx) = argmax_tie(&vals);
            vertex += &pts[idx] * self.gamma;
            choices.push(idx);
        }
        LmoVertex {
            action: a,
            value: g.dot(&vertex),
            vertex,
            choices,
        }
    }

    /// Maximizes `g . x` over Phi q (union over actions); lowest action wins
    /// ties.
    pub fn maximize(&self, g: &DVector<f64>) -> LmoVertex {
        let per_action: Vec<LmoVertex> = (0..self.num_actions())
            .map(|a| self.maximize_action(a, g))
            .collect();
        let vals: Vec<f64> = per_action.iter().map(|v| v.value).collect();
        let (_, a) = argmax_tie(&vals);
        per_action.into_iter().nth(a).expect("nonempty actions")
    }
}

// ---------------------------------------------------------------------------
// Serialization

#[derive(Serialize, Deserialize)]
struct SfSetFile {
    fingerprint: u64,
    d: usize,
    k: usize,
    num_actions: usize,
    num_observations: usize,
    gamma: f64,
    iteration: usize,
    seed: u64,
    directions: Vec<Vec<f64>>,
    cells: Vec<Vec<CellFile>>,
}

#[derive(Serialize, Deserialize)]
enum CellFile {
    #[serde(rename = "rank1")]
    Rank1 { lefts: Vec<Vec<f64>> },
    #[serde(rename = "dense")]
    Dense { points: Vec<Vec<f64>> },
}

impl SfSetFile {
    fn from_set(s: &SfSet) -> Self {
        Self {
            fingerprint: s.model_fingerprint,
            d: s.d,
            k: s.k,
            num_actions: s.num_actions,
            num_observations: s.num_observations,
            gamma: s.gamma,
            iteration: s.iteration,
            seed: s.directions.seed,
            directions: s.directions.directions.iter().map(mat_to_row_major).collect(),
            cells: s
                .cells
                .iter()
                .map(|per_obs| {
                    per_obs
                        .iter()
                        .map(|c| match c {
                            CellData::Rank1 { lefts } => CellFile::Rank1 {
                                lefts: lefts.iter().map(|v| v.iter().copied().collect()).collect(),
                            },
                            CellData::Dense { points } => CellFile::Dense {
                                points: points.iter().map(mat_to_row_major).collect(),
                            },
                        })
                        .collect()
                })
                .collect(),
        }
    }

    fn into_set(self) -> Result<SfSet> {
        let d = self.d;
        let k = self.k;
        let directions = DirectionSet {
            directions: self
                .directions
                .iter()
                .map(|m| mat_from_row_major(m, d, k))
                .collect::<Result<Vec<_>>>()?,
            seed: self.seed,
        };
        let cells = self
            .cells
            .into_iter()
            .map(|per_obs| {
                per_obs
                    .into_iter()
                    .map(|c| match c {
                        CellFile::Rank1 { lefts } => Ok(CellData::Rank1 {
                            lefts: lefts.into_iter().map(DVector::from_vec).collect(),
                        }),
                        CellFile::Dense { points } => Ok(CellData::Dense {
                            points: points
                                .iter()
                                .map(|p| mat_from_row_major(p, d, k))
                                .collect::<Result<Vec<_>>>()?,
                        }),
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SfSet {
            d,
            k,
            num_actions: self.num_actions,
            num_observations: self.num_observations,
            gamma: self.gamma,
            iteration: self.iteration,
            model_fingerprint: self.fingerprint,
            directions,
            cells,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{gridworld_mdp, GridSpec};
    use crate::model::mdp_to_psr;

    fn small_grid_model(gamma: f64) -> PsrModel {
        let mut spec = GridSpec::open(2, 2, gamma);
        spec.gamma = gamma;
        mdp_to_psr(&gridworld_mdp(&spec).unwrap()).unwrap()
    }

    #[test]
    fn directions_are_unit_and_deterministic() {
        let a = sample_directions(42, 50, 3, 4);
        let b = sample_directions(42, 50, 3, 4);
        assert_eq!(a.directions, b.directions);
        for m in &a.directions {
            assert!((m.norm() - 1.0).abs() < 1e-12);
        }
        let c = sample_directions(7, 100, 1, 1);
        for m in &c.directions {
            assert!((m[(0, 0)].abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn support_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let points: Vec<DMatrix<f64>> = (0..10)
            .map(|_| DMatrix::from_fn(2, 3, |_, _| rng.gen::<f64>() - 0.5))
            .collect();
        let m = DMatrix::from_fn(2, 3, |_, _| rng.gen::<f64>() - 0.5);
        let (v, i) = support(&points, &m).unwrap();
        let mut best = f64::NEG_INFINITY;
        let mut best_i = 0;
        for (p, pt) in points.iter().enumerate() {
            let s = pt.dot(&m);
            if s > best {
                best = s;
                best_i = p;
            }
        }
        assert_eq!(i, best_i);
        assert!((v - best).abs() < 1e-15);
        assert!(matches!(
            support(&[], &m).unwrap_err(),
            SfError::EmptySet
        ));
    }

    #[test]
    fn first_backup_recovers_one_step_hull() {
        // From Phi^(0) = {0}, the assembled support equals max_a <m, F_a>,
        // and after one backup the cells hold F_{a*} images.
        let model = small_grid_model(0.9);
        let view = ModelView::new(&model);
        let dirs = sample_directions(1, 40, view.d, view.k);
        let set = SfSet::initial(&view, dirs, None);
        for m in &set.directions.directions {
            let h = assembled_support(&view, &set, &WDir::full(m));
            let expect = (0..view.num_actions)
                .map(|a| m.dot(&view.f[a]))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((h - expect).abs() < 1e-12);
        }
        let (next, _) = backup_with_scores(&view, &set, &BackupConfig::default());
        // Every stored point must be F_{a'} T_ao for some a'.
        for a in 0..view.num_actions {
            for o in 0..view.num_observations {
                for p in 0..next.cells[a][o].len() {
                    let pt = next.point_matrix(&view, a, o, p);
                    let ok = (0..view.num_actions).any(|ap| {
                        let img = &view.f[ap] * &model.t[a][o];
                        (&pt - img).norm() < 1e-12
                    });
                    assert!(ok, "cell ({a},{o}) point {p} is not a one-step image");
                }
            }
        }
    }

    #[test]
    fn gamma_zero_converges_in_one_iteration() {
        let model = small_grid_model(0.0);
        let dirs = sample_directions(5, 20, model.d, model.k);
        let (set, trace) = run_dp(&model, &BackupConfig::default(), dirs);
        assert_eq!(trace.len(), 1);
        assert_eq!(set.iteration, 1);
        assert!(trace[0].max_error_optimized.abs() < 1e-12);
    }

    #[test]
    fn support_changes_shrink_geometrically() {
        let model = small_grid_model(0.9);
        let view = ModelView::new(&model);
        let dirs = sample_directions(11, 30, view.d, view.k);
        let mut set = SfSet::initial(&view, dirs, None);
        let probe = sample_directions(99, 10, view.d, view.k);
        let mut h_prev: Vec<f64> = probe
            .directions
            .iter()
            .map(|m| assembled_support(&view, &set, &WDir::full(m)))
            .collect();
        let mut deltas = Vec::new();
        for _ in 0..25 {
            set = backup_with_scores(&view, &set, &BackupConfig::default()).0;
            let h: Vec<f64> = probe
                .directions
                .iter()
                .map(|m| assembled_support(&view, &set, &WDir::full(m)))
                .collect();
            let delta = h
                .iter()
                .zip(&h_prev)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            deltas.push(delta);
            h_prev = h;
        }
        // Late-phase ratio approximately gamma.
        let ratio = deltas[20] / deltas[19];
        assert!(ratio < 0.95, "ratio {ratio}");
        assert!(deltas[24] < deltas[5]);
    }

    #[test]
    fn run_dp_is_deterministic() {
        let model = small_grid_model(0.8);
        let cfg = BackupConfig {
            max_iters: 15,
            ..Default::default()
        };
        let (s1, _) = run_dp(&model, &cfg, sample_directions(3, 25, model.d, model.k));
        let (s2, _) = run_dp(&model, &cfg, sample_directions(3, 25, model.d, model.k));
        assert_eq!(s1.to_json().unwrap(), s2.to_json().unwrap());
    }

    #[test]
    fn sfset_json_round_trip() {
        let model = small_grid_model(0.8);
        let cfg = BackupConfig {
            max_iters: 5,
            ..Default::default()
        };
        let (s, _) = run_dp(&model, &cfg, sample_directions(3, 10, model.d, model.k));
        let json = s.to_json().unwrap();
        let back = SfSet::from_json(&json).unwrap();
        assert_eq!(s, back);
        assert_eq!(back.to_json().unwrap(), json);
    }

    #[test]
    fn monotone_supports_never_decrease() {
        let model = small_grid_model(0.9);
        let view = ModelView::new(&model);
        let dirs = sample_directions(17, 25, view.d, view.k);
        let cfg = BackupConfig {
            monotone: true,
            ..Default::default()
        };
        // Zero init is achievable only with a zero-feature stop policy; for
        // the monotonicity property itself any achievable init works, and
        // {0} images are what the default init stores.
        let mut set = SfSet::initial(&view, dirs, None);
        let mut h_prev: Vec<f64> = set
            .directions
            .directions
            .iter()
            .map(|m| {
                (0..view.num_actions)
                    .flat_map(|a| (0..view.num_observations).map(move |o| (a, o)))
                    .map(|(a, o)| cell_support(&view, &set.cells[a][o], a, o, &WDir::full(m)).0)
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        for _ in 0..10 {
            set = backup_with_scores(&view, &set, &cfg).0;
            let h: Vec<f64> = set
                .directions
                .directions
                .iter()
                .map(|m| {
                    (0..view.num_actions)
                        .flat_map(|a| (0..view.num_observations).map(move |o| (a, o)))
                        .map(|(a, o)| {
                            cell_support(&view, &set.cells[a][o], a, o, &WDir::full(m)).0
                        })
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            for (new, old) in h.iter().zip(&h_prev) {
                assert!(new >= &(old - 1e-12), "support decreased: {old} -> {new}");
            }
            h_prev = h;
        }
    }

    #[test]
    fn incremental_subset_updates_only_selected_directions() {
        let model = small_grid_model(0.9);
        let view = ModelView::new(&model);
        let dirs = sample_directions(23, 10, view.d, view.k);
        let set = SfSet::initial(&view, dirs, None);
        let cfg = BackupConfig {
            incremental_subset: Some(vec![0, 1]),
            ..Default::default()
        };
        let (next, h) = backup_with_scores(&view, &set, &cfg);
        assert!(h[0].is_finite() && h[1].is_finite());
        assert!(h[2..].iter().all(|x| x.is_nan()));
        // Old points retained.
        for a in 0..view.num_actions {
            for o in 0..view.num_observations {
                assert!(!next.cells[a][o].is_empty());
            }
        }
    }

    #[test]
    fn lmo_matches_brute_force_vertex_enumeration() {
        let model = small_grid_model(0.9);
        let view = ModelView::new(&model);
        let cfg = BackupConfig {
            max_iters: 8,
            ..Default::default()
        };
        let (set, _) = run_dp(&model, &cfg, sample_directions(2, 12, view.d, view.k));
        let q = {
            let mut q = DVector::zeros(view.k);
            q[1] = 1.0;
            q
        };
        let lmo = project_set(&view, &set, &q);
        let g = DVector::from_vec(vec![0.3, -0.7]);
        for a in 0..view.num_actions {
            let v = lmo.maximize_action(a, &g);
            // Brute force over all per-observation combinations.
            let sizes: Vec<usize> = (0..view.num_observations)
                .map(|o| set.cells[a][o].len())
                .collect();
            let mut idx = vec![0usize; view.num_observations];
            let mut best = f64::NEG_INFINITY;
            loop {
                let mut x = lmo.f_q[a].clone();
                for (o, &p) in idx.iter().enumerate() {
                    x += &lmo.proj[a][o][p] * view.gamma;
                }
                best = best.max(g.dot(&x));
                let mut pos = view.num_observations;
                loop {
                    if pos == 0 {
                        break;
                    }
                    pos -= 1;
                    idx[pos] += 1;
                    if idx[pos] < sizes[pos] {
                        break;
                    }
                    idx[pos] = 0;
                }
                if idx.iter().all(|&i| i == 0) {
                    break;
                }
            }
            assert!((v.value - best).abs() < 1e-10, "{} vs {best}", v.value);
        }
    }

    #[test]
    fn bellman_error_nonnegative_in_monotone_mode() {
        let model = small_grid_model(0.9);
        let view = ModelView::new(&model);
        let cfg = BackupConfig {
            monotone: true,
            max_iters: 12,
            ..Default::default()
        };
        let (set, _) = run_dp(&model, &cfg, sample_directions(31, 20, view.d, view.k));
        let fresh = sample_directions(77, 15, view.d, view.k);
        for e in bellman_error(&view, &set, &fresh.directions) {
            assert!(e >= -DEDUP_TOL, "fresh error {e}");
        }
    }

    #[test]
    fn dedup_collapses_duplicates() {
        let mut pts = vec![
            DVector::from_vec(vec![1.0, 2.0]),
            DVector::from_vec(vec![1.0, 2.0]),
            DVector::from_vec(vec![1.0 + 1e-12, 2.0]),
            DVector::from_vec(vec![3.0, 4.0]),
        ];
        dedup_vectors(&mut pts, 1e-10);
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[0], DVector::from_vec(vec![1.0, 2.0]));
        assert_eq!(pts[1], DVector::from_vec(vec![3.0, 4.0]));
    }

    #[test]
    fn stop_matrix_initialization_is_stored() {
        let model = small_grid_model(0.9);
        let view = ModelView::new(&model);
        let stop = DMatrix::from_fn(view.d, view.k, |i, j| (i + j) as f64 * 0.1);
        let dirs = sample_directions(3, 5, view.d, view.k);
        let set = SfSet::initial(&view, dirs, Some(&stop));
        for a in 0..view.num_actions {
            for o in 0..view.num_observations {
                assert_eq!(set.cells[a][o].len(), 1);
                let pt = set.point_matrix(&view, a, o, 0);
                let expect = &stop * &model.t[a][o];
                assert!((pt - expect).norm() < 1e-12);
            }
        }
    }
}

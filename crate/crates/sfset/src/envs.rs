//! Benchmark environment constructors: gridworlds (fully and partially
//! observed) and a discretized mountain car.
//!
//! Gridworld cells are indexed `s = y * width + x` with `y` counted from the
//! bottom; actions are up, down, left, right (0..4); moving into a wall or
//! off the grid leaves the agent in place. Coordinate features scale each
//! axis to [-1, 1] so corner cells map exactly to (+-1, +-1).
//!
//! Mountain car uses the classic dynamics evaluated at cell centers of a
//! 12 x 12 mesh over [-1.2, 0.6] x [-0.07, 0.07]; features are 9 unnormalized
//! Gaussian RBFs on the state rescaled to [-1, 1]^2, centers {-0.8, 0, 0.8}^2
//! and width sigma = 0.8.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SfError};
use crate::model::{MdpSpec, PomdpSpec};

pub const ACTION_UP: usize = 0;
pub const ACTION_DOWN: usize = 1;
pub const ACTION_LEFT: usize = 2;
pub const ACTION_RIGHT: usize = 3;

/// How gridworld features are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    /// d = 2: cell coordinates scaled to [-1, 1] per axis.
    Coordinates,
    /// d = 3: a per-cell random color table, seeded.
    RgbTable,
}

/// A gridworld description. Walls block the edge between two adjacent cells
/// in both directions.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    /// Blocked edges as unordered cell-index pairs.
    pub walls: Vec<(usize, usize)>,
    pub feature_mode: FeatureMode,
    /// Transition/observation noise level (POMDP construction only).
    pub noise: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl GridSpec {
    pub fn open(width: usize, height: usize, gamma: f64) -> Self {
        Self {
            width,
            height,
            walls: Vec::new(),
            feature_mode: FeatureMode::Coordinates,
            noise: 0.0,
            gamma,
            seed: 0,
        }
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn cell(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    fn check(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(SfError::InvalidInput(
                "grid dimensions must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(SfError::InvalidInput(format!(
                "noise = {} must be in [0, 1)",
                self.noise
            )));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(SfError::InvalidInput(format!(
                "gamma = {} must be in [0, 1)",
                self.gamma
            )));
        }
        Ok(())
    }

    fn blocked(&self, s: usize, s2: usize) -> bool {
        self.walls
            .iter()
            .any(|&(a, b)| (a, b) == (s, s2) || (a, b) == (s2, s))
    }

    /// Destination of a deterministic move; walls and edges keep the agent
    /// in place.
    fn step(&self, s: usize, action: usize) -> usize {
        let (x, y) = (s % self.width, s / self.width);
        let (nx, ny) = match action {
            ACTION_UP => (x as isize, y as isize + 1),
            ACTION_DOWN => (x as isize, y as isize - 1),
            ACTION_LEFT => (x as isize - 1, y as isize),
            ACTION_RIGHT => (x as isize + 1, y as isize),
            _ => (x as isize, y as isize),
        };
        if nx < 0 || ny < 0 || nx >= self.width as isize || ny >= self.height as isize {
            return s;
        }
        let s2 = self.cell(nx as usize, ny as usize);
        if self.blocked(s, s2) {
            s
        } else {
            s2
        }
    }

    /// Grid-adjacent cells reachable in one move (walls respected).
    fn open_neighbors(&self, s: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(4);
        for a in 0..4 {
            let s2 = self.step(s, a);
            if s2 != s && !out.contains(&s2) {
                out.push(s2);
            }
        }
        out
    }

    /// All cells reachable from cell 0 through open edges.
    pub fn is_connected(&self) -> bool {
        let n = self.num_cells();
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(s) = stack.pop() {
            for s2 in self.open_neighbors(s) {
                if !seen[s2] {
                    seen[s2] = true;
                    count += 1;
                    stack.push(s2);
                }
            }
        }
        count == n
    }

    fn features(&self) -> Result<DMatrix<f64>> {
        let n = self.num_cells();
        match self.feature_mode {
            FeatureMode::Coordinates => {
                let mut f = DMatrix::zeros(2, n);
                for s in 0..n {
                    let (x, y) = (s % self.width, s / self.width);
                    f[(0, s)] = scale_axis(x, self.width);
                    f[(1, s)] = scale_axis(y, self.height);
                }
                Ok(f)
            }
            FeatureMode::RgbTable => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5f3759df);
                let mut f = DMatrix::zeros(3, n);
                for s in 0..n {
                    for c in 0..3 {
                        f[(c, s)] = rng.gen::<f64>();
                    }
                }
                Ok(f)
            }
        }
    }
}

fn scale_axis(i: usize, extent: usize) -> f64 {
    if extent <= 1 {
        0.0
    } else {
        2.0 * i as f64 / (extent - 1) as f64 - 1.0
    }
}

/// Deterministic gridworld MDP; start state is the bottom-left cell.
pub fn gridworld_mdp(spec: &GridSpec) -> Result<MdpSpec> {
    spec.check()?;
    let n = spec.num_cells();
    let features = spec.features()?;
    let mut transitions = Vec::with_capacity(4);
    for a in 0..4 {
        let mut t = DMatrix::zeros(n, n);
        for s in 0..n {
            t[(spec.step(s, a), s)] = 1.0;
        }
        transitions.push(t);
    }
    let mut b1 = DVector::zeros(n);
    b1[0] = 1.0;
    let out = MdpSpec {
        k: n,
        num_actions: 4,
        d: features.nrows(),
        gamma: spec.gamma,
        transitions: (0..4).map(|a| transitions[a].clone()).collect(),
        features: (0..4).map(|_| features.clone()).collect(),
        b1,
    };
    out.check()?;
    Ok(out)
}

/// Appends an idle/stop action: identity transition and zero features, so
/// the zero successor matrix is achievable and the monotone backup can start
/// from an achievable initialization.
pub fn with_idle_action(spec: &MdpSpec) -> MdpSpec {
    let mut out = spec.clone();
    out.num_actions += 1;
    out.transitions.push(DMatrix::identity(spec.k, spec.k));
    out.features.push(DMatrix::zeros(spec.d, spec.k));
    out
}

/// [`with_idle_action`] for POMDPs: the idle action keeps the latent state and
/// emits observations as usual.
pub fn with_idle_action_pomdp(spec: &PomdpSpec) -> PomdpSpec {
    let mut out = spec.clone();
    out.num_actions += 1;
    out.transitions.push(DMatrix::identity(spec.k, spec.k));
    out.features.push(DMatrix::zeros(spec.d, spec.k));
    out
}

/// Noisy gridworld POMDP: with probability `noise` the move is replaced by a
/// uniformly random open neighbor, and the observation is a uniformly random
/// grid-adjacent cell instead of the true cell.
pub fn gridworld_pomdp(spec: &GridSpec) -> Result<PomdpSpec> {
    spec.check()?;
    let n = spec.num_cells();
    let features = spec.features()?;
    let mut transitions = Vec::with_capacity(4);
    for a in 0..4 {
        let mut t = DMatrix::zeros(n, n);
        for s in 0..n {
            let dest = spec.step(s, a);
            let neighbors = spec.open_neighbors(s);
            if neighbors.is_empty() || spec.noise == 0.0 {
                t[(dest, s)] += 1.0;
            } else {
                t[(dest, s)] += 1.0 - spec.noise;
                let p = spec.noise / neighbors.len() as f64;
                for s2 in neighbors {
                    t[(s2, s)] += p;
                }
            }
        }
        transitions.push(t);
    }
    let mut obs = DMatrix::zeros(n, n);
    for s in 0..n {
        let neighbors = adjacent_cells(spec, s);
        if neighbors.is_empty() || spec.noise == 0.0 {
            obs[(s, s)] += 1.0;
        } else {
            obs[(s, s)] += 1.0 - spec.noise;
            let p = spec.noise / neighbors.len() as f64;
            for s2 in neighbors {
                obs[(s2, s)] += p;
            }
        }
    }
    let mut b1 = DVector::zeros(n);
    b1[0] = 1.0;
    let out = PomdpSpec {
        k: n,
        num_actions: 4,
        num_observations: n,
        d: features.nrows(),
        gamma: spec.gamma,
        transitions,
        observation_matrix: obs,
        features: (0..4).map(|_| features.clone()).collect(),
        b1,
    };
    out.check()?;
    Ok(out)
}

/// Grid-adjacent cells (observation confusions ignore walls).
fn adjacent_cells(spec: &GridSpec, s: usize) -> Vec<usize> {
    let (x, y) = (s % spec.width, s / spec.width);
    let mut out = Vec::with_capacity(4);
    if y + 1 < spec.height {
        out.push(spec.cell(x, y + 1));
    }
    if y > 0 {
        out.push(spec.cell(x, y - 1));
    }
    if x > 0 {
        out.push(spec.cell(x - 1, y));
    }
    if x + 1 < spec.width {
        out.push(spec.cell(x + 1, y));
    }
    out
}

/// Samples a random connected maze: each interior edge is walled i.i.d. with
/// the given density, rejected until the grid is fully connected.
pub fn random_maze(
    width: usize,
    height: usize,
    density: f64,
    gamma: f64,
    seed: u64,
) -> Result<GridSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..10_000 {
        let mut spec = GridSpec::open(width, height, gamma);
        spec.seed = seed;
        for y in 0..height {
            for x in 0..width {
                let s = spec.cell(x, y);
                if x + 1 < width && rng.gen::<f64>() < density {
                    spec.walls.push((s, spec.cell(x + 1, y)));
                }
                if y + 1 < height && rng.gen::<f64>() < density {
                    spec.walls.push((s, spec.cell(x, y + 1)));
                }
            }
        }
        if spec.is_connected() {
            return Ok(spec);
        }
    }
    Err(SfError::InvalidInput(format!(
        "no connected {width}x{height} maze found at density {density}"
    )))
}

/// Mountain-car discretization parameters.
#[derive(Debug, Clone)]
pub struct MountainCarSpec {
    pub mesh: usize,
    pub pos_range: (f64, f64),
    pub vel_range: (f64, f64),
    pub rbf_width: f64,
    pub gamma: f64,
}

impl Default for MountainCarSpec {
    fn default() -> Self {
        Self {
            mesh: 12,
            pos_range: (-1.2, 0.6),
            vel_range: (-0.07, 0.07),
            rbf_width: 0.8,
            gamma: 0.9,
        }
    }
}

impl MountainCarSpec {
    pub fn num_cells(&self) -> usize {
        self.mesh * self.mesh
    }

    fn cell_center(&self, s: usize) -> (f64, f64) {
        let (ip, iv) = (s / self.mesh, s % self.mesh);
        (
            center_of(ip, self.mesh, self.pos_range),
            center_of(iv, self.mesh, self.vel_range),
        )
    }

    fn nearest_cell(&self, p: f64, v: f64) -> usize {
        let ip = bin_of(p, self.mesh, self.pos_range);
        let iv = bin_of(v, self.mesh, self.vel_range);
        ip * self.mesh + iv
    }

    /// Rescales (position, velocity) to [-1, 1]^2.
    pub fn rescale(&self, p: f64, v: f64) -> (f64, f64) {
        (
            2.0 * (p - self.pos_range.0) / (self.pos_range.1 - self.pos_range.0) - 1.0,
            2.0 * (v - self.vel_range.0) / (self.vel_range.1 - self.vel_range.0) - 1.0,
        )
    }

    /// The 9 RBF features of a rescaled state.
    pub fn rbf_features(&self, ps: f64, vs: f64) -> DVector<f64> {
        let centers = [-0.8, 0.0, 0.8];
        let mut out = DVector::zeros(9);
        let two_sigma_sq = 2.0 * self.rbf_width * self.rbf_width;
        let mut i = 0;
        for &cp in &centers {
            for &cv in &centers {
                let d2 = (ps - cp).powi(2) + (vs - cv).powi(2);
                out[i] = (-d2 / two_sigma_sq).exp();
                i += 1;
            }
        }
        out
    }

    /// One classic dynamics step from (p, v) with accel in {-1, +1}.
    pub fn dynamics(&self, p: f64, v: f64, accel: f64) -> (f64, f64) {
        let mut v2 = v + 0.001 * accel - 0.0025 * (3.0 * p).cos();
        v2 = v2.clamp(self.vel_range.0, self.vel_range.1);
        let mut p2 = p + v2;
        p2 = p2.clamp(self.pos_range.0, self.pos_range.1);
        if p2 <= self.pos_range.0 {
            v2 = 0.0;
        }
        (p2, v2)
    }
}

fn center_of(i: usize, mesh: usize, range: (f64, f64)) -> f64 {
    range.0 + (i as f64 + 0.5) * (range.1 - range.0) / mesh as f64
}

fn bin_of(x: f64, mesh: usize, range: (f64, f64)) -> usize {
    let t = (x - range.0) / (range.1 - range.0) * mesh as f64;
    (t.floor() as isize).clamp(0, mesh as isize - 1) as usize
}

/// Mountain car on the mesh: deterministic cell-center dynamics, two actions
/// (accelerate left, accelerate right), 9 RBF features shared across actions.
pub fn mountain_car(spec: &MountainCarSpec) -> Result<MdpSpec> {
    if spec.mesh == 0 {
        return Err(SfError::InvalidInput("mesh must be at least 1".into()));
    }
    let n = spec.num_cells();
    let mut features = DMatrix::zeros(9, n);
    for s in 0..n {
        let (p, v) = spec.cell_center(s);
        let (ps, vs) = spec.rescale(p, v);
        features.column_mut(s).copy_from(&spec.rbf_features(ps, vs));
    }
    let mut transitions = Vec::with_capacity(2);
    for accel in [-1.0, 1.0] {
        let mut t = DMatrix::zeros(n, n);
        for s in 0..n {
            let (p, v) = spec.cell_center(s);
            let (p2, v2) = spec.dynamics(p, v, accel);
            t[(spec.nearest_cell(p2, v2), s)] = 1.0;
        }
        transitions.push(t);
    }
    let mut b1 = DVector::zeros(n);
    b1[spec.nearest_cell(-0.5, 0.0)] = 1.0;
    let out = MdpSpec {
        k: n,
        num_actions: 2,
        d: 9,
        gamma: spec.gamma,
        transitions,
        features: vec![features.clone(), features],
        b1,
    };
    out.check()?;
    Ok(out)
}

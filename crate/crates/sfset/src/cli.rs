//! Command-line entry point.
//!
//! Subcommands: build-env, run-dp, bellman-error, plan, imitate,
//! oracle-compare. Every subcommand is deterministic given --seed; emitted
//! artifacts round-trip through their own readers bit-exactly (trace CSVs
//! additionally carry wall-clock timings, which are informational only).
//! Exit codes: 0 ok, 1 usage, 2 numerical failure, 3 resource cap.
//! SFSET_THREADS caps worker parallelism.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dp::{
    assembled_support, backup_support, bellman_error, run_dp, sample_directions, BackupConfig,
    ModelView, SfSet, WDir,
};
use crate::envs::{
    gridworld_mdp, gridworld_pomdp, mountain_car, random_maze, with_idle_action, GridSpec,
    MountainCarSpec,
};
use crate::error::{Result, SfError};
use crate::imitation::{rollout_match, EPS_FEAS};
use crate::model::{mdp_to_psr, pomdp_to_psr, MdpSpec, PsrModel};
use crate::oracle::{exact_sfset, support_gap, support_gap_mdp, TREE_CAP};
use crate::planner::{optimal_action, optimal_value, RewardSpec};
use crate::policy::{successor_matrix, PolicyTree};

const TRACE_SCHEMA: &str = "# sfset-trace v1";
const ROLLOUT_SCHEMA: &str = "# sfset-rollouts v1";

#[derive(Parser)]
#[command(
    name = "sfset",
    about = "Successor feature sets: convex-set DP, planning, and feature matching",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Construct a model file for a built-in environment.
    BuildEnv(BuildEnvArgs),
    /// Run point-based dynamic programming; write the set artifact and trace.
    RunDp(RunDpArgs),
    /// Evaluate per-direction Bellman errors of a stored set.
    BellmanError(BellmanErrorArgs),
    /// Optimal values and actions for a linear reward.
    Plan(PlanArgs),
    /// Match a target feature vector by randomized rollouts.
    Imitate(ImitateArgs),
    /// Compare a stored set against exact oracles.
    OracleCompare(OracleCompareArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvKind {
    Gridworld,
    GridworldPomdp,
    Maze,
    MountainCar,
}

#[derive(Args)]
struct BuildEnvArgs {
    #[arg(long, value_enum)]
    env: EnvKind,
    /// Grid side length (gridworld/maze).
    #[arg(long, default_value_t = 3)]
    size: usize,
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
    /// Transition/observation noise (gridworld-pomdp).
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Wall density (maze).
    #[arg(long, default_value_t = 0.2)]
    density: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Append an idle/stop action (identity transition, zero features).
    #[arg(long, default_value_t = false)]
    idle_action: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunDpArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 100)]
    directions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    /// Convergence tolerance on per-direction support change
    /// (default: 1e-8 * max_a |F_a| / (1 - gamma)).
    #[arg(long)]
    tol: Option<f64>,
    /// Exit nonzero if the run does not converge.
    #[arg(long, default_value_t = false)]
    strict: bool,
    /// Monotone backup (keep the better of old and new per direction).
    #[arg(long, default_value_t = false)]
    monotone: bool,
    /// Initialize cells from the stationary matrix of this action instead
    /// of {0} (achievable initialization for stoppable problems).
    #[arg(long)]
    stop_action: Option<usize>,
    /// Fresh directions per evaluation set.
    #[arg(long, default_value_t = 25)]
    fresh_count: usize,
    /// Number of resampled fresh-direction sets for the asymptotic report.
    #[arg(long, default_value_t = 25)]
    fresh_sets: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct BellmanErrorArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    set: PathBuf,
    #[arg(long, default_value_t = 25)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    set: PathBuf,
    /// Comma-separated reward weights (length d).
    #[arg(long)]
    reward: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ImitateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    set: PathBuf,
    /// Comma-separated target feature vector (length d).
    #[arg(long, conflicts_with = "from_policy")]
    target: Option<String>,
    /// Derive the target from a policy-tree JSON file: A^pi q1.
    #[arg(long)]
    from_policy: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    rollouts: usize,
    #[arg(long, default_value_t = 100)]
    horizon: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-rollout CSV log.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct OracleCompareArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    set: PathBuf,
    #[arg(long, default_value_t = 4)]
    horizon: usize,
    #[arg(long, default_value_t = 25)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses arguments, dispatches, and maps errors to exit codes.
pub fn run() -> i32 {
    if let Ok(threads) = std::env::var("SFSET_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("{}", error_json(&err));
            exit_code(&err)
        }
    }
}

fn exit_code(err: &SfError) -> i32 {
    match err {
        SfError::EnumerationTooLarge { .. } => 3,
        SfError::InvalidInput(_)
        | SfError::DimensionMismatch(_)
        | SfError::DimensionUnsupported { .. }
        | SfError::Io(_)
        | SfError::Json(_) => 1,
        _ => 2,
    }
}

fn error_kind(err: &SfError) -> &'static str {
    match err {
        SfError::DimensionMismatch(_) => "dimension_mismatch",
        SfError::ZeroProbabilityObservation { .. } => "zero_probability_observation",
        SfError::SingularCoreTests { .. } => "singular_core_tests",
        SfError::EnumerationTooLarge { .. } => "enumeration_too_large",
        SfError::DegenerateMixture => "degenerate_mixture",
        SfError::EmptySet => "empty_set",
        SfError::InfeasibleTarget { .. } => "infeasible_target",
        SfError::DimensionUnsupported { .. } => "dimension_unsupported",
        SfError::InvalidInput(_) => "invalid_input",
        SfError::NonConvergence { .. } => "non_convergence",
        SfError::Io(_) => "io",
        SfError::Json(_) => "json",
    }
}

fn error_json(err: &SfError) -> String {
    serde_json::json!({
        "error": { "kind": error_kind(err), "message": err.to_string() }
    })
    .to_string()
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::BuildEnv(a) => cmd_build_env(a),
        Cmd::RunDp(a) => cmd_run_dp(a),
        Cmd::BellmanError(a) => cmd_bellman_error(a),
        Cmd::Plan(a) => cmd_plan(a),
        Cmd::Imitate(a) => cmd_imitate(a),
        Cmd::OracleCompare(a) => cmd_oracle_compare(a),
    }
}

// ---------------------------------------------------------------------------
// Shared helpers

fn read_model(path: &Path) -> Result<PsrModel> {
    PsrModel::from_json(&fs::read_to_string(path)?)
}

fn read_set(path: &Path, model: &PsrModel) -> Result<SfSet> {
    let set = SfSet::from_json(&fs::read_to_string(path)?)?;
    if set.model_fingerprint != model.fingerprint() {
        return Err(SfError::InvalidInput(
            "set artifact was computed for a different model".into(),
        ));
    }
    Ok(set)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn emit_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match path {
        Some(p) => write_text(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_vector(text: &str, expected: usize, what: &str) -> Result<DVector<f64>> {
    let vals: std::result::Result<Vec<f64>, _> =
        text.split(',').map(|s| s.trim().parse::<f64>()).collect();
    let vals = vals
        .map_err(|e| SfError::InvalidInput(format!("cannot parse {what} '{text}': {e}")))?;
    if vals.len() != expected {
        return Err(SfError::InvalidInput(format!(
            "{what} has {} entries; the model needs {expected}",
            vals.len()
        )));
    }
    Ok(DVector::from_vec(vals))
}

fn basis(k: usize, s: usize) -> DVector<f64> {
    let mut q = DVector::zeros(k);
    q[s] = 1.0;
    q
}

/// Recovers the MDP spec from a model that is an MDP embedding (u = 1,
/// observations = states, T_ao supported on row o).
fn as_mdp_spec(model: &PsrModel) -> Option<MdpSpec> {
    if model.num_observations != model.k || model.u.iter().any(|&x| x != 1.0) {
        return None;
    }
    let k = model.k;
    let mut transitions = Vec::with_capacity(model.num_actions);
    for a in 0..model.num_actions {
        let mut t = DMatrix::zeros(k, k);
        for o in 0..k {
            let m = &model.t[a][o];
            for i in 0..k {
                for j in 0..k {
                    if i == o {
                        t[(o, j)] = m[(o, j)];
                    } else if m[(i, j)] != 0.0 {
                        return None;
                    }
                }
            }
        }
        transitions.push(t);
    }
    Some(MdpSpec {
        k,
        num_actions: model.num_actions,
        d: model.d,
        gamma: model.gamma,
        transitions,
        features: model.f.clone(),
        b1: model.q1.clone(),
    })
}

/// Stationary successor matrix of always playing `a`:
/// A = F_a (I - gamma * T_a)^{-1} with T_a = sum_o T_ao.
fn stationary_matrix(model: &PsrModel, a: usize) -> Result<DMatrix<f64>> {
    if a >= model.num_actions {
        return Err(SfError::InvalidInput(format!(
            "stop action {a} out of range (model has {} actions)",
            model.num_actions
        )));
    }
    let mut t = DMatrix::zeros(model.k, model.k);
    for o in 0..model.num_observations {
        t += &model.t[a][o];
    }
    let sys = DMatrix::identity(model.k, model.k) - t * model.gamma;
    let inv = sys
        .try_inverse()
        .ok_or_else(|| SfError::InvalidInput("I - gamma T_a is singular".into()))?;
    Ok(&model.f[a] * inv)
}

// ---------------------------------------------------------------------------
// build-env

fn cmd_build_env(a: BuildEnvArgs) -> Result<()> {
    let model = match a.env {
        EnvKind::Gridworld | EnvKind::GridworldPomdp if a.size == 0 => {
            return Err(SfError::InvalidInput("--size must be at least 1".into()))
        }
        EnvKind::Gridworld => {
            let mut spec = gridworld_mdp(&GridSpec::open(a.size, a.size, a.gamma))?;
            if a.idle_action {
                spec = with_idle_action(&spec);
            }
            mdp_to_psr(&spec)?
        }
        EnvKind::GridworldPomdp => {
            let mut grid = GridSpec::open(a.size, a.size, a.gamma);
            grid.noise = a.noise;
            grid.seed = a.seed;
            pomdp_to_psr(&gridworld_pomdp(&grid)?)?
        }
        EnvKind::Maze => {
            let grid = random_maze(a.size, a.size, a.density, a.gamma, a.seed)?;
            let mut spec = gridworld_mdp(&grid)?;
            if a.idle_action {
                spec = with_idle_action(&spec);
            }
            mdp_to_psr(&spec)?
        }
        EnvKind::MountainCar => {
            let spec = MountainCarSpec {
                gamma: a.gamma,
                ..Default::default()
            };
            mdp_to_psr(&mountain_car(&spec)?)?
        }
    };
    write_text(&a.out, &model.to_json()?)
}

// ---------------------------------------------------------------------------
// run-dp

#[derive(Serialize)]
struct RunDpSummary {
    directions: usize,
    seed: u64,
    iterations_run: usize,
    converged: bool,
    total_points: usize,
    final_max_error_optimized: f64,
    /// Max fresh-direction Bellman error of the final set, one entry per
    /// resampled direction set (the 25-seed protocol).
    fresh_asymptotic_errors: Vec<f64>,
    fresh_count: usize,
}

fn cmd_run_dp(a: RunDpArgs) -> Result<()> {
    if a.directions == 0 || a.iterations == 0 {
        return Err(SfError::InvalidInput(
            "--directions and --iterations must be at least 1".into(),
        ));
    }
    let model = read_model(&a.model)?;
    let view = ModelView::new(&model);
    let stop_matrix = match a.stop_action {
        Some(s) => Some(stationary_matrix(&model, s)?),
        None => None,
    };
    let config = BackupConfig {
        monotone: a.monotone,
        stop_matrix,
        max_iters: a.iterations,
        convergence_tol: a.tol,
        fresh_count: a.fresh_count,
        fresh_seed: a.seed.wrapping_add(0x9e37_79b9),
        ..Default::default()
    };
    let dirs = sample_directions(a.seed, a.directions, view.d, view.k);
    let (set, trace) = run_dp(&model, &config, dirs);
    let converged = trace.len() < a.iterations;

    let mut csv = String::new();
    csv.push_str(TRACE_SCHEMA);
    csv.push('\n');
    csv.push_str("iteration,max_error_optimized,max_error_fresh,wall_time\n");
    for row in &trace {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.iteration, row.max_error_optimized, row.max_error_fresh, row.wall_time
        ));
    }
    write_text(&a.trace, &csv)?;
    write_text(&a.out, &set.to_json()?)?;

    let fresh_asymptotic_errors: Vec<f64> = (0..a.fresh_sets)
        .map(|i| {
            let probe = sample_directions(
                a.seed
                    .wrapping_add(0x5f5e_100)
                    .wrapping_add(i as u64),
                a.fresh_count.max(1),
                view.d,
                view.k,
            );
            probe
                .directions
                .iter()
                .map(|m| {
                    backup_support(&view, &set, m)
                        - assembled_support(&view, &set, &WDir::full(m))
                })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let final_err = trace
        .last()
        .map(|r| r.max_error_optimized)
        .unwrap_or(f64::NAN);
    if let Some(summary) = &a.summary {
        emit_json(
            Some(summary),
            &RunDpSummary {
                directions: a.directions,
                seed: a.seed,
                iterations_run: trace.len(),
                converged,
                total_points: set.total_points(),
                final_max_error_optimized: final_err,
                fresh_asymptotic_errors,
                fresh_count: a.fresh_count,
            },
        )?;
    }
    if a.strict && !converged {
        return Err(SfError::NonConvergence {
            iterations: trace.len(),
            delta: final_err,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bellman-error

#[derive(Serialize)]
struct BellmanReport {
    probes: usize,
    seed: u64,
    max_error: f64,
    mean_error: f64,
    errors: Vec<f64>,
}

fn cmd_bellman_error(a: BellmanErrorArgs) -> Result<()> {
    if a.probes == 0 {
        return Err(SfError::InvalidInput("--probes must be at least 1".into()));
    }
    let model = read_model(&a.model)?;
    let set = read_set(&a.set, &model)?;
    let view = ModelView::new(&model);
    let probes = sample_directions(a.seed, a.probes, view.d, view.k);
    let errors = bellman_error(&view, &set, &probes.directions);
    let max_error = errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean_error = errors.iter().sum::<f64>() / errors.len() as f64;
    emit_json(
        a.out.as_deref(),
        &BellmanReport {
            probes: a.probes,
            seed: a.seed,
            max_error,
            mean_error,
            errors,
        },
    )
}

// ---------------------------------------------------------------------------
// plan

#[derive(Serialize)]
struct PlanReport {
    reward: Vec<f64>,
    /// Value and greedy action at each basis state.
    values: Vec<f64>,
    actions: Vec<usize>,
    initial_value: f64,
    initial_action: usize,
}

fn cmd_plan(a: PlanArgs) -> Result<()> {
    let model = read_model(&a.model)?;
    let set = read_set(&a.set, &model)?;
    let view = ModelView::new(&model);
    let reward = RewardSpec::new(parse_vector(&a.reward, model.d, "--reward")?)?;
    let mut values = Vec::with_capacity(model.k);
    let mut actions = Vec::with_capacity(model.k);
    for s in 0..model.k {
        let q = basis(model.k, s);
        values.push(optimal_value(&set, &view, &reward, &q));
        actions.push(optimal_action(&set, &view, &reward, &q));
    }
    emit_json(
        a.out.as_deref(),
        &PlanReport {
            reward: reward.r.iter().copied().collect(),
            values,
            actions,
            initial_value: optimal_value(&set, &view, &reward, &model.q1),
            initial_action: optimal_action(&set, &view, &reward, &model.q1),
        },
    )
}

// ---------------------------------------------------------------------------
// imitate

#[derive(Serialize)]
struct ImitateSummary {
    target: Vec<f64>,
    mean: Vec<f64>,
    std_err: Vec<f64>,
    max_drift: f64,
    tail_bound: f64,
    rollouts: usize,
    horizon: usize,
    seed: u64,
    feasibility_tol: f64,
}

fn cmd_imitate(a: ImitateArgs) -> Result<()> {
    if a.rollouts == 0 || a.horizon == 0 {
        return Err(SfError::InvalidInput(
            "--rollouts and --horizon must be at least 1".into(),
        ));
    }
    let model = read_model(&a.model)?;
    let set = read_set(&a.set, &model)?;
    let target = match (&a.target, &a.from_policy) {
        (Some(text), None) => parse_vector(text, model.d, "--target")?,
        (None, Some(path)) => {
            let tree = PolicyTree::from_json(&fs::read_to_string(path)?)?;
            tree.check(model.num_actions, model.num_observations)?;
            successor_matrix(&model, &tree) * &model.q1
        }
        _ => {
            return Err(SfError::InvalidInput(
                "exactly one of --target and --from-policy is required".into(),
            ))
        }
    };
    let report = rollout_match(&set, &model, &target, a.horizon, a.rollouts, a.seed)?;
    if let Some(csv_path) = &a.csv {
        let mut csv = String::new();
        csv.push_str(ROLLOUT_SCHEMA);
        csv.push('\n');
        csv.push_str("rollout");
        for i in 0..model.d {
            csv.push_str(&format!(",f{i}"));
        }
        csv.push_str(",max_drift,projections\n");
        for (r, log) in report.logs.iter().enumerate() {
            csv.push_str(&r.to_string());
            for v in log.discounted_features.iter() {
                csv.push_str(&format!(",{v}"));
            }
            csv.push_str(&format!(",{},{}\n", log.max_drift, log.projections));
        }
        write_text(csv_path, &csv)?;
    }
    emit_json(
        a.out.as_deref(),
        &ImitateSummary {
            target: target.iter().copied().collect(),
            mean: report.mean.iter().copied().collect(),
            std_err: report.std_err.iter().copied().collect(),
            max_drift: report.max_drift,
            tail_bound: report.tail_bound,
            rollouts: a.rollouts,
            horizon: a.horizon,
            seed: a.seed,
            feasibility_tol: EPS_FEAS,
        },
    )
}

// ---------------------------------------------------------------------------
// oracle-compare

#[derive(Serialize)]
struct OracleReport {
    horizon: usize,
    probes: usize,
    seed: u64,
    /// gamma^H * max_a |F_a| / (1 - gamma): the finite-horizon tail bound
    /// separating the H-step exact set from the converged set.
    tail_bound: f64,
    /// Max probe gap against the MDP support recursion (MDP embeddings).
    recursion_gap: Option<f64>,
    /// Max probe gaps against enumerated trees, when within the cap.
    enumeration_gap_directions: Option<f64>,
    enumeration_gap_states: Option<f64>,
    enumerated_points: Option<usize>,
}

fn cmd_oracle_compare(a: OracleCompareArgs) -> Result<()> {
    if a.probes == 0 {
        return Err(SfError::InvalidInput("--probes must be at least 1".into()));
    }
    let model = read_model(&a.model)?;
    let set = read_set(&a.set, &model)?;
    let view = ModelView::new(&model);
    let probes = sample_directions(a.seed, a.probes, view.d, view.k);
    let mdp = as_mdp_spec(&model);
    let recursion_gap = mdp
        .as_ref()
        .map(|spec| support_gap_mdp(spec, a.horizon, &set, &model, &probes.directions));

    let enumeration = match exact_sfset(&model, a.horizon, TREE_CAP) {
        Ok(exact) => {
            let states: Vec<DVector<f64>> = (0..model.k).map(|s| basis(model.k, s)).collect();
            let report = support_gap(&exact, &set, &model, &probes.directions, &states)?;
            Some((report, exact.points.len()))
        }
        // With the recursion available, a blown enumeration cap is not fatal.
        Err(SfError::EnumerationTooLarge { approx_count, cap }) if mdp.is_some() => {
            let _ = (approx_count, cap);
            None
        }
        Err(e) => return Err(e),
    };
    let (gap_dirs, gap_states, points) = match &enumeration {
        Some((r, n)) => (
            Some(r.max_gap_directions),
            Some(r.max_gap_states),
            Some(*n),
        ),
        None => (None, None, None),
    };
    emit_json(
        a.out.as_deref(),
        &OracleReport {
            horizon: a.horizon,
            probes: a.probes,
            seed: a.seed,
            tail_bound: model.gamma.powi(a.horizon as i32) / (1.0 - model.gamma)
                * model.max_feature_norm(),
            recursion_gap,
            enumeration_gap_directions: gap_dirs,
            enumeration_gap_states: gap_states,
            enumerated_points: points,
        },
    )
}

//! Command-line front end: JSON run configurations, dispatch of the
//! commands and the files they write.
//!
//! Exit codes: `0` all asserted invariants hold, `1` an invariant failed or
//! a runtime error occurred, `2` configuration error, `3` conjugate
//! gradients did not converge, `4` degenerate form.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::cg::CgOptions;
use crate::error::{Error, Result};
use crate::experiments::{
    bc_ordering_from, eps_convergence_study, ordering_tensors, small_osc_sweep, subadditivity_mc, Check,
    EpsStudyConfig, Medium, StudyResult, SubadditivityConfig, SweepConfig, MIN_POINTS_PER_CELL,
};
use crate::forms::{estimate_stability_constant, Form, FormContext};
use crate::grid::{Boundary, Grid};
use crate::io::{csv, fmt17, study_csv, to_json, write_atomic, write_field, write_json};
use crate::solver::{
    basis_tensor, effective_tensor, effective_tensor_natural, reconstruct_fields, scaled_entry_error,
    solve_cell_problem, solve_natural, weak_residual, DenseOracle, EffectiveTensor,
};
use crate::transport::{transport_summary, voigt_tensor};

/// Configuration bundled with the crate: a 16x16 periodic Dirac medium.
pub const BUNDLED_CONFIG: &str = include_str!("../configs/dirac16.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Subcommand, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Effective tensor for the configured boundary condition.
    Tensor,
    /// Conductivities, Lorenz ratio and Wiedemann-Franz deviation.
    Transport,
    /// Voigt upper bound against the solver.
    Bounds,
    /// Small-oscillation sweep over lambda.
    SweepLambda,
    /// Convergence of the oscillating Dirichlet problem as epsilon shrinks.
    SweepEps,
    /// Ordering of the four boundary-condition tensors.
    Ordering,
    /// Subadditivity Monte Carlo in random media.
    RandomSubadd,
    /// Invariant suite on the configured (small) grid.
    Check,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Tensor => "tensor",
            Command::Transport => "transport",
            Command::Bounds => "bounds",
            Command::SweepLambda => "sweep-lambda",
            Command::SweepEps => "sweep-eps",
            Command::Ordering => "ordering",
            Command::RandomSubadd => "random-subadd",
            Command::Check => "check",
        }
    }

    fn uses_medium(self) -> bool {
        !matches!(self, Command::SweepLambda | Command::RandomSubadd)
    }
}

#[derive(Parser, Debug)]
#[command(name = "hydrohom", version, about = "Effective transport tensors of hydrodynamic electron fluids")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Option<Command>,
    /// JSON run configuration (defaults to the bundled 16x16 Dirac medium).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Relative CG residual tolerance.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// Accept media whose oscillation vanishes.
    #[arg(long, global = true)]
    pub allow_seminorm: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub dim: usize,
    pub intervals: usize,
    pub length: f64,
    pub boundary: Boundary,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { dim: 2, intervals: 16, length: 1.0, boundary: Boundary::Periodic }
    }
}

impl GridSpec {
    pub fn build(&self, boundary: Boundary) -> Result<Grid> {
        Grid::square(self.dim, self.intervals, self.length, boundary)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSpec {
    pub tol: f64,
    pub max_iter: Option<usize>,
}

impl Default for SolverSpec {
    fn default() -> Self {
        let d = CgOptions::default();
        Self { tol: d.tol, max_iter: d.max_iter }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckSpec {
    pub stability_samples: usize,
    /// Intervals of the grid used for the dense-oracle comparison.
    pub dense_intervals: usize,
    pub test_modes: usize,
}

impl Default for CheckSpec {
    fn default() -> Self {
        Self { stability_samples: 100, dense_intervals: 6, test_modes: 3 }
    }
}

fn default_t0() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub command: Option<Command>,
    pub medium: Medium,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub allow_seminorm: bool,
    #[serde(default)]
    pub seed: u64,
    /// Background temperature for the Wiedemann-Franz comparison.
    #[serde(default = "default_t0")]
    pub t0: f64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub eps_study: EpsStudyConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub subadditivity: SubadditivityConfig,
    #[serde(default)]
    pub check: CheckSpec,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Command-line flags win over file values.
    pub fn apply_flags(&mut self, cli: &Cli) {
        if let Some(c) = cli.command {
            self.command = Some(c);
        }
        if let Some(o) = &cli.out {
            self.out = Some(o.clone());
        }
        if let Some(s) = cli.seed {
            self.seed = s;
        }
        if let Some(t) = cli.tol {
            self.solver.tol = t;
        }
        self.allow_seminorm |= cli.allow_seminorm;
    }

    pub fn options(&self) -> CgOptions {
        CgOptions { tol: self.solver.tol, max_iter: self.solver.max_iter }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    /// Everything that can be checked without solving. Inconsistencies are
    /// `Config` errors; a medium with vanishing oscillation is reported as
    /// `DegenerateForm` unless the seminorm override is set.
    pub fn validate(&self) -> Result<Command> {
        let cfg = |msg: String| Error::Config(msg);
        let command = self.command.ok_or_else(|| cfg("no command given".into()))?;
        if !(self.solver.tol > 0.0 && self.solver.tol < 1.0) {
            return Err(cfg(format!("solver tolerance {} outside (0, 1)", self.solver.tol)));
        }
        if !(self.t0 > 0.0 && self.t0.is_finite()) {
            return Err(cfg(format!("temperature {} must be positive", self.t0)));
        }
        let grid = self.grid.build(self.grid.boundary).map_err(|e| cfg(e.to_string()))?;
        let in_2d = |what: &str| {
            if self.grid.dim != 2 {
                Err(cfg(format!("{what} needs a two-dimensional grid")))
            } else {
                Ok(())
            }
        };
        match command {
            Command::SweepEps => {
                in_2d("sweep-eps")?;
                let e = &self.eps_study;
                if e.points_per_cell < MIN_POINTS_PER_CELL {
                    return Err(cfg(Error::ResolutionInsufficient { points_per_cell: e.points_per_cell }.to_string()));
                }
                if e.epsilons.is_empty() || !(0.0..1.0).contains(&e.min_reduction) {
                    return Err(cfg("sweep-eps needs epsilons and a reduction in [0, 1)".into()));
                }
                for eps in &e.epsilons {
                    let inv = 1.0 / eps;
                    if !(*eps > 0.0) || (inv - inv.round()).abs() > 1e-9 * inv {
                        return Err(cfg(Error::NonIntegerScale { inverse: inv }.to_string()));
                    }
                }
            }
            Command::SweepLambda => {
                if self.sweep.lambdas.is_empty() || self.sweep.lambdas.iter().any(|l| !(*l >= 0.0)) {
                    return Err(cfg("sweep needs nonnegative lambda values".into()));
                }
                Grid::square(2, self.sweep.intervals, 1.0, Boundary::Periodic).map_err(|e| cfg(e.to_string()))?;
            }
            Command::RandomSubadd => {
                let s = &self.subadditivity;
                if s.sizes.is_empty() || s.sizes.contains(&0) || s.samples == 0 || s.points_per_cell < 2 {
                    return Err(cfg("random-subadd needs positive sizes, samples and points per cell".into()));
                }
                if !(s.smoothing_radius > 0.0 && s.smoothing_radius <= 1.0) {
                    return Err(cfg(format!("smoothing radius {} outside (0, 1]", s.smoothing_radius)));
                }
            }
            Command::Ordering | Command::Check => in_2d(command.name())?,
            _ => {}
        }
        if command == Command::Transport && self.medium.m() != 2 {
            return Err(cfg("transport needs a two-current medium".into()));
        }
        if command.uses_medium() {
            let coeffs = self.medium.coefficients(&grid, 1.0).map_err(|e| cfg(format!("medium: {e}")))?;
            FormContext::new(coeffs).allow_seminorm(self.allow_seminorm).require_definite()?;
        }
        Ok(command)
    }
}

/// Result of a run: whether every asserted invariant held.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub command: Command,
    pub passed: bool,
    pub out_dir: PathBuf,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Json(_) => 2,
        Error::NoConvergence { .. } => 3,
        Error::DegenerateForm(_) => 4,
        _ => 1,
    }
}

/// Parse flags, load and validate the configuration, run, and map the
/// result to an exit code. Diagnostics go to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run_cli(&cli) {
        Ok(o) => {
            eprintln!("{}: {} ({})", o.command.name(), if o.passed { "all checks passed" } else { "CHECKS FAILED" }, o.out_dir.display());
            if o.passed {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run_cli(cli: &Cli) -> Result<Outcome> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::from_json(BUNDLED_CONFIG)?,
    };
    cfg.apply_flags(cli);
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new().num_threads(t).build().map_err(|e| Error::Config(e.to_string()))?;
        return pool.install(|| run(&cfg));
    }
    run(&cfg)
}

pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    let command = cfg.validate()?;
    let out = cfg.out_dir();
    let passed = match command {
        Command::Tensor => run_tensor(cfg, &out)?,
        Command::Transport => run_transport(cfg, &out)?,
        Command::Bounds => run_bounds(cfg, &out)?,
        Command::SweepLambda => write_study(&out, &small_osc_sweep(&cfg.sweep, &cfg.options())?)?,
        Command::SweepEps => {
            write_study(&out, &eps_convergence_study(&cfg.medium, &cfg.eps_study, cfg.allow_seminorm, &cfg.options())?)?
        }
        Command::Ordering => {
            let t = ordering_tensors(&cfg.medium, cfg.grid.intervals, cfg.allow_seminorm, &cfg.options())?;
            write_study(&out, &bc_ordering_from(&t)?)?
        }
        Command::RandomSubadd => write_study(&out, &subadditivity_mc(cfg.seed, &cfg.subadditivity, &cfg.options())?)?,
        Command::Check => run_check(cfg, &out)?,
    };
    Ok(Outcome { command, passed, out_dir: out })
}

fn context(cfg: &RunConfig, boundary: Boundary) -> Result<FormContext> {
    cfg.medium.context(&cfg.grid.build(boundary)?, 1.0, cfg.allow_seminorm)
}

fn tensor_for(ctx: &FormContext, opts: &CgOptions) -> Result<EffectiveTensor> {
    match ctx.grid().boundary() {
        Boundary::Natural => effective_tensor_natural(ctx, opts),
        _ => effective_tensor(ctx, opts),
    }
}

#[derive(Serialize)]
struct TensorFile<'a> {
    kind: &'static str,
    grid: &'a Grid,
    m: usize,
    matrix: Vec<Vec<f64>>,
    eigenvalues: Vec<f64>,
    residuals: &'a [f64],
    iterations: &'a [usize],
}

fn tensor_file(t: &EffectiveTensor) -> TensorFile<'_> {
    let n = t.size();
    TensorFile {
        kind: t.kind.name(),
        grid: &t.grid,
        m: t.m,
        matrix: (0..n).map(|i| t.matrix[i * n..(i + 1) * n].to_vec()).collect(),
        eigenvalues: t.eigenvalues(),
        residuals: &t.residuals,
        iterations: &t.iterations,
    }
}

#[derive(Serialize)]
struct Summary<'a, T: Serialize> {
    command: &'static str,
    passed: bool,
    checks: &'a [Check],
    #[serde(flatten)]
    details: T,
}

fn write_summary<T: Serialize>(out: &Path, command: Command, checks: &[Check], details: T) -> Result<bool> {
    let passed = checks.iter().all(|c| c.passed);
    write_json(&out.join("summary.json"), &Summary { command: command.name(), passed, checks, details })?;
    Ok(passed)
}

fn checks_csv(checks: &[Check]) -> String {
    let rows: Vec<Vec<String>> = checks
        .iter()
        .map(|c| vec![c.name.clone(), fmt17(c.value), fmt17(c.threshold), c.passed.to_string()])
        .collect();
    csv(&["check", "value", "threshold", "passed"], &rows)
}

fn check(name: &str, value: f64, threshold: f64, passed: bool) -> Check {
    Check { name: name.into(), passed, value, threshold }
}

fn run_tensor(cfg: &RunConfig, out: &Path) -> Result<bool> {
    let ctx = context(cfg, cfg.grid.boundary)?;
    let opts = cfg.options();
    let t = tensor_for(&ctx, &opts)?;
    write_json(&out.join("tensor.json"), &tensor_file(&t))?;
    let size = t.size();
    for i in 0..size {
        let e = basis_tensor(size, i);
        let sol = if ctx.grid().boundary() == Boundary::Natural { solve_natural(&ctx, &e, &opts)? } else { solve_cell_problem(&ctx, &e, &opts)? };
        let header = serde_json::json!({
            "field": "potential",
            "column": i,
            "m": ctx.m(),
            "grid": ctx.grid(),
            "layout": "m blocks of node values, node (i, j) at i * ny + j",
            "residual": sol.report.residual,
        });
        write_field(&out.join("fields").join(format!("potential_{i}.bin")), &header, &sol.potential.values)?;
    }
    let eig = t.eigenvalues();
    let checks = vec![
        check("positive_definite", eig[0], 0.0, eig[0] > 0.0 || ctx.is_degenerate()),
        check("residual", t.max_residual(), cfg.solver.tol, t.max_residual() <= cfg.solver.tol),
    ];
    write_summary(out, Command::Tensor, &checks, serde_json::json!({ "kind": t.kind.name() }))
}

fn run_transport(cfg: &RunConfig, out: &Path) -> Result<bool> {
    let ctx = context(cfg, Boundary::Periodic)?;
    let t = effective_tensor(&ctx, &cfg.options())?;
    write_json(&out.join("tensor.json"), &tensor_file(&t))?;
    let s = transport_summary(&t.to_matrix(), t.dim(), cfg.t0)?;
    let finite = s.sigma.iter().chain(&s.kappa).chain(&s.kappa_tilde).all(|v| v.is_finite());
    let checks = vec![check("finite_coefficients", f64::from(u8::from(finite)), 1.0, finite)];
    write_summary(out, Command::Transport, &checks, serde_json::json!({ "transport": s }))
}

fn voigt_rows(ctx: &FormContext, a: &EffectiveTensor) -> Result<(Vec<Vec<String>>, f64)> {
    let voigt = voigt_tensor(ctx)?;
    let mut rows = Vec::new();
    let mut worst = f64::INFINITY;
    for i in 0..a.size() {
        let c = basis_tensor(a.size(), i);
        let bound = voigt[(i, i)];
        let value = a.quadratic(&c);
        worst = worst.min(bound - value);
        rows.push(vec![i.to_string(), fmt17(bound), fmt17(value), fmt17(bound - value)]);
    }
    Ok((rows, worst))
}

fn run_bounds(cfg: &RunConfig, out: &Path) -> Result<bool> {
    let boundary = if cfg.grid.boundary == Boundary::Natural { Boundary::Periodic } else { cfg.grid.boundary };
    let ctx = context(cfg, boundary)?;
    let a = effective_tensor(&ctx, &cfg.options())?;
    let (rows, worst) = voigt_rows(&ctx, &a)?;
    write_atomic(&out.join("rows.csv"), csv(&["basis", "voigt", "tensor", "gap"], &rows).as_bytes())?;
    let checks = vec![check("voigt_bound", worst, -1e-9, worst >= -1e-9)];
    write_summary(out, Command::Bounds, &checks, serde_json::json!({ "kind": a.kind.name() }))
}

#[derive(Serialize)]
struct StudySummary<'a> {
    study: &'a str,
    parameter: &'a str,
    slopes: &'a [(String, f64)],
    seeds: &'a [u64],
    resampled: usize,
    rows: usize,
}

fn write_study(out: &Path, s: &StudyResult) -> Result<bool> {
    write_atomic(&out.join("rows.csv"), study_csv(s).as_bytes())?;
    let command = match s.study.as_str() {
        "eps_convergence" => Command::SweepEps,
        "bc_ordering" => Command::Ordering,
        "small_oscillation" => Command::SweepLambda,
        _ => Command::RandomSubadd,
    };
    let details = StudySummary {
        study: &s.study,
        parameter: &s.parameter,
        slopes: &s.slopes,
        seeds: &s.seeds,
        resampled: s.resampled,
        rows: s.rows.len(),
    };
    write_summary(out, command, &s.checks, details)
}

/// The invariant suite behind `check`.
pub fn invariant_checks(cfg: &RunConfig) -> Result<(Vec<Check>, EffectiveTensor)> {
    let opts = cfg.options();
    let mut checks = Vec::new();
    let per = context(cfg, Boundary::Periodic)?;
    let size = 2 * per.m();

    let dual = [Boundary::Periodic, Boundary::Dirichlet, Boundary::Natural]
        .iter()
        .map(|b| context(cfg, *b).map(|c| c.coeffs().dual_residual()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    checks.push(check("dual_basis", dual, 1e-10, dual < 1e-10));

    // Dense oracle on a small copy of the medium.
    let mut worst_solution = 0.0f64;
    let mut worst_tensor = 0.0f64;
    for b in [Boundary::Periodic, Boundary::Dirichlet] {
        let g = Grid::square(2, cfg.check.dense_intervals, cfg.grid.length, b)?;
        let ctx = cfg.medium.context(&g, 1.0, cfg.allow_seminorm)?;
        let oracle = DenseOracle::new(&ctx)?;
        let tight = CgOptions { tol: opts.tol.min(1e-12), max_iter: opts.max_iter };
        for i in 0..size {
            let c = basis_tensor(size, i);
            let cg = solve_cell_problem(&ctx, &c, &tight)?;
            let dense = oracle.solve(&c)?;
            let scale = dense.potential.values.iter().fold(1.0f64, |a, v| a.max(v.abs()));
            let diff = cg.potential.values.iter().zip(&dense.potential.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst_solution = worst_solution.max(diff / scale);
        }
        worst_tensor = worst_tensor.max(scaled_entry_error(&effective_tensor(&ctx, &tight)?, &oracle.tensor()?));
    }
    checks.push(check("dense_solution", worst_solution, 1e-8, worst_solution < 1e-8));
    checks.push(check("dense_tensor", worst_tensor, 1e-9, worst_tensor < 1e-9));

    let tensors = ordering_tensors(&cfg.medium, cfg.grid.intervals, cfg.allow_seminorm, &opts)?;
    checks.extend(bc_ordering_from(&tensors)?.checks);
    let a = tensors.a_sharp.clone();
    let eig = a.eigenvalues();
    checks.push(check("positive_definite", eig[0], 0.0, eig[0] > 0.0));

    let (_, voigt_gap) = voigt_rows(&per, &a)?;
    checks.push(check("voigt_bound", voigt_gap, -1e-9, voigt_gap >= -1e-9));

    let mut relation = 0.0f64;
    let mut weak = 0.0f64;
    for i in 0..size {
        let c = basis_tensor(size, i);
        let sol = solve_cell_problem(&per, &c, &opts)?;
        let rec = reconstruct_fields(&per, &sol.current)?;
        let mean = rec.mean_neg_grad_psi(per.grid());
        let target = a.apply(&c);
        let norm = target.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff = mean.iter().zip(&target).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        relation = relation.max(diff / norm);
        weak = weak.max(weak_residual(&per, &rec, cfg.check.test_modes));
    }
    checks.push(check("homogenized_relation", relation, 1e-6, relation < 1e-6));
    checks.push(check("weak_residual", weak, 1e-6, weak < 1e-6));

    let coarse = estimate_stability_constant(&per, cfg.check.stability_samples, cfg.seed)?;
    let fine_grid = Grid::square(2, 2 * cfg.grid.intervals, cfg.grid.length, Boundary::Periodic)?;
    let fine = estimate_stability_constant(&cfg.medium.context(&fine_grid, 1.0, cfg.allow_seminorm)?, cfg.check.stability_samples, cfg.seed)?;
    let change = (fine.c_hat - coarse.c_hat).abs() / coarse.c_hat;
    checks.push(check("stability_constant_refinement", change, 0.25, coarse.c_hat.is_finite() && change < 0.25));

    if per.m() == 2 {
        let s = transport_summary(&a.to_matrix(), 2, cfg.t0)?;
        let finite = s.sigma.iter().chain(&s.kappa).all(|v| v.is_finite());
        checks.push(check("transport_finite", f64::from(u8::from(finite)), 1.0, finite));
    }
    Ok((checks, a))
}

fn run_check(cfg: &RunConfig, out: &Path) -> Result<bool> {
    let (checks, a) = invariant_checks(cfg)?;
    write_json(&out.join("tensor.json"), &tensor_file(&a))?;
    write_atomic(&out.join("rows.csv"), checks_csv(&checks).as_bytes())?;
    write_summary(out, Command::Check, &checks, serde_json::json!({ "seed": cfg.seed }))
}

/// The configuration echo used in documentation and tests.
pub fn config_json(cfg: &RunConfig) -> Result<String> {
    to_json(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundled() -> RunConfig {
        RunConfig::from_json(BUNDLED_CONFIG).unwrap()
    }

    #[test]
    fn bundled_config_parses_and_validates() {
        let mut c = bundled();
        c.command = Some(Command::Check);
        assert_eq!(c.validate().unwrap(), Command::Check);
        let back = RunConfig::from_json(&config_json(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let text = BUNDLED_CONFIG.replacen('{', "{\"colour\": 3,", 1);
        let err = RunConfig::from_json(&text).unwrap_err();
        assert_eq!(exit_code(&err), 2);
    }

    #[test]
    fn flat_medium_is_degenerate_unless_overridden() {
        let mut c = bundled();
        c.command = Some(Command::Tensor);
        c.medium = Medium::Dirac { gamma: crate::experiments::ScalarField::Constant { value: 0.2 }, params: Default::default() };
        let err = c.validate().unwrap_err();
        assert_eq!(exit_code(&err), 4);
        assert!(err.to_string().contains("oscillation"));
        c.allow_seminorm = true;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn bad_values_are_config_errors() {
        let mut c = bundled();
        c.command = Some(Command::SweepEps);
        c.eps_study.points_per_cell = 4;
        assert_eq!(exit_code(&c.validate().unwrap_err()), 2);
        c.eps_study.points_per_cell = 8;
        c.solver.tol = -1.0;
        assert_eq!(exit_code(&c.validate().unwrap_err()), 2);
        c.solver.tol = 1e-10;
        c.command = None;
        assert_eq!(exit_code(&c.validate().unwrap_err()), 2);
    }

    #[test]
    fn flags_override_file_values() {
        let cli = Cli::try_parse_from(["hydrohom", "bounds", "--seed", "9", "--tol", "1e-8", "--out", "x"]).unwrap();
        let mut c = bundled();
        c.apply_flags(&cli);
        assert_eq!((c.command, c.seed, c.solver.tol, c.out_dir()), (Some(Command::Bounds), 9, 1e-8, PathBuf::from("x")));
    }

    #[test]
    fn check_suite_passes_on_bundled_medium() {
        let (checks, _) = invariant_checks(&bundled()).unwrap();
        for c in &checks {
            assert!(c.passed, "{c:?}");
        }
    }
}

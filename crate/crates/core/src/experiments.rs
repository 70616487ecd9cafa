//! Numerical studies: the periodic-homogenization limit, agreement of the
//! boundary conditions, small-oscillation scaling and Monte-Carlo
//! subadditivity in random media.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cg::CgOptions;
use crate::error::{Error, Result};
use crate::fields::{
    dirac_preset, galilean_preset, scalar_preset, CoefficientSet, DiracParams, RandomFieldParams,
    SmallOscillationFamily,
};
use crate::forms::{ConstantForm, FormContext};
use crate::grid::{inner_product, Boundary, Grid, Scheme};
use crate::solver::{
    basis_tensor, effective_tensor, effective_tensor_natural, effective_tensor_natural_periodic, solve_cell_problem,
    sorted_eigenvalues, CellSolver, EffectiveTensor,
};
use crate::transport::small_oscillation_eigen_split;

/// Smallest number of grid intervals per period cell in the epsilon study.
pub const MIN_POINTS_PER_CELL: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigTerm {
    pub amplitude: f64,
    pub wavenumber: [i32; 2],
    #[serde(default)]
    pub phase: f64,
}

/// Scalar field on the unit cell, extended periodically (or, for the
/// random kind, stationary on the whole plane).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarField {
    Constant { value: f64 },
    /// `mean + sum amplitude sin(2 pi k.y + phase)`.
    Trig { mean: f64, terms: Vec<TrigTerm> },
    Random { params: RandomFieldParams },
}

impl ScalarField {
    pub fn eval(&self, y: [f64; 2], dim: usize) -> f64 {
        match self {
            ScalarField::Constant { value } => *value,
            ScalarField::Trig { mean, terms } => {
                mean + terms
                    .iter()
                    .map(|t| {
                        let k1 = if dim == 2 { t.wavenumber[1] as f64 * y[1] } else { 0.0 };
                        t.amplitude * (2.0 * PI * (t.wavenumber[0] as f64 * y[0] + k1) + t.phase).sin()
                    })
                    .sum::<f64>()
            }
            ScalarField::Random { params } => params.eval(y, dim),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ScalarField::Random { params } => params.validate(),
            ScalarField::Constant { value } if !value.is_finite() => {
                Err(Error::InvalidInput("constant field value must be finite".into()))
            }
            _ => Ok(()),
        }
    }

    /// Samples `x -> field(x / eps)`.
    pub fn sample(&self, grid: &Grid, eps: f64) -> Result<Vec<f64>> {
        self.validate()?;
        let d = grid.dim();
        Ok(grid.sample(|x| self.eval([x[0] / eps, x[1] / eps], d)))
    }
}

/// A medium description that can be sampled on any grid at any scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum Medium {
    Dirac {
        gamma: ScalarField,
        #[serde(default)]
        params: DiracParams,
    },
    Galilean {
        kappa_q: f64,
        n: ScalarField,
        s: ScalarField,
        eta: f64,
        #[serde(default)]
        zeta: f64,
    },
    Scalar {
        n: ScalarField,
        eta: f64,
        #[serde(default)]
        zeta: f64,
    },
    /// The standard two-current family `a0 + lambda a1`, `b0 + lambda b1`.
    SmallOscillation { lambda: f64, eta: f64 },
}

impl Medium {
    /// Dirac medium with `gamma = amp (sin 2 pi x1 + cos 2 pi x2)`.
    pub fn dirac_trig(amp: f64) -> Self {
        Medium::Dirac {
            gamma: ScalarField::Trig {
                mean: 0.0,
                terms: vec![
                    TrigTerm { amplitude: amp, wavenumber: [1, 0], phase: 0.0 },
                    TrigTerm { amplitude: amp, wavenumber: [0, 1], phase: 0.5 * PI },
                ],
            },
            params: DiracParams::default(),
        }
    }

    pub fn m(&self) -> usize {
        match self {
            Medium::Scalar { .. } => 1,
            _ => 2,
        }
    }

    /// Coefficients sampled at `x / eps`.
    pub fn coefficients(&self, grid: &Grid, eps: f64) -> Result<CoefficientSet> {
        match self {
            Medium::Dirac { gamma, params } => dirac_preset(grid, &gamma.sample(grid, eps)?, params),
            Medium::Galilean { kappa_q, n, s, eta, zeta } => {
                galilean_preset(grid, *kappa_q, &n.sample(grid, eps)?, &s.sample(grid, eps)?, *eta, *zeta)
            }
            Medium::Scalar { n, eta, zeta } => scalar_preset(grid, &n.sample(grid, eps)?, *eta, *zeta),
            Medium::SmallOscillation { lambda, eta } => {
                if eps != 1.0 {
                    return Err(Error::InvalidInput("the small-oscillation family is not rescalable".into()));
                }
                SmallOscillationFamily::standard(grid, *eta).at(grid, *lambda)
            }
        }
    }

    /// Form context for the medium at scale `eps` (`1` for the unscaled cell).
    pub fn context(&self, grid: &Grid, eps: f64, allow_seminorm: bool) -> Result<FormContext> {
        let coeffs = self.coefficients(grid, eps)?;
        let ctx = if eps == 1.0 { FormContext::new(coeffs) } else { FormContext::with_epsilon(coeffs, eps)? };
        Ok(ctx.allow_seminorm(allow_seminorm))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
}

impl Check {
    fn at_least(name: &str, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), passed: value >= threshold, value, threshold }
    }

    fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), passed: value <= threshold, value, threshold }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyRow {
    pub label: String,
    pub parameter: f64,
    pub values: Vec<f64>,
    /// Worst final CG residual of the solves behind this row.
    pub residual: f64,
}

/// Rows of a sweep together with fitted slopes and pass/fail checks.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyResult {
    pub study: String,
    pub parameter: String,
    pub columns: Vec<String>,
    pub rows: Vec<StudyRow>,
    pub slopes: Vec<(String, f64)>,
    pub checks: Vec<Check>,
    pub seeds: Vec<u64>,
    pub resampled: usize,
}

impl StudyResult {
    fn new(study: &str, parameter: &str, columns: Vec<String>) -> Self {
        Self {
            study: study.into(),
            parameter: parameter.into(),
            columns,
            rows: Vec::new(),
            slopes: Vec::new(),
            checks: Vec::new(),
            seeds: Vec::new(),
            resampled: 0,
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r.values[i]).collect())
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn tensor_residual(t: &EffectiveTensor) -> f64 {
    t.max_residual()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpsStudyConfig {
    pub epsilons: Vec<f64>,
    pub points_per_cell: usize,
    /// Constant current induced by the boundary data; defaults to all ones.
    pub current: Option<Vec<f64>>,
    /// Required relative error reduction per step.
    pub min_reduction: f64,
}

impl Default for EpsStudyConfig {
    fn default() -> Self {
        Self { epsilons: vec![0.5, 0.25, 0.125, 0.0625], points_per_cell: 8, current: None, min_reduction: 0.2 }
    }
}

/// Dirichlet problems on the unit square with coefficients oscillating at
/// scale `eps`, compared with the homogenized problem for the same linear
/// boundary data.
///
/// Columns: `n_cells, intervals, error, gap, iterations`. The gap is the
/// largest eigenvalue of `a_D(eps) - a_sharp`.
pub fn eps_convergence_study(
    medium: &Medium,
    cfg: &EpsStudyConfig,
    allow_seminorm: bool,
    opts: &CgOptions,
) -> Result<StudyResult> {
    if cfg.points_per_cell < MIN_POINTS_PER_CELL {
        return Err(Error::ResolutionInsufficient { points_per_cell: cfg.points_per_cell });
    }
    if cfg.epsilons.is_empty() {
        return Err(Error::InvalidInput("empty epsilon list".into()));
    }
    let mut scales = Vec::with_capacity(cfg.epsilons.len());
    for &eps in &cfg.epsilons {
        let inverse = 1.0 / eps;
        if !(eps > 0.0) || (inverse - inverse.round()).abs() > 1e-9 * inverse || inverse.round() < 1.0 {
            return Err(Error::NonIntegerScale { inverse });
        }
        scales.push(inverse.round() as usize);
    }
    scales.sort_unstable();
    scales.dedup();
    let m = medium.m();
    let size = 2 * m;
    let c = cfg.current.clone().unwrap_or_else(|| vec![1.0; size]);
    if c.len() != size {
        return Err(Error::DimensionMismatch(format!("current has {} entries, expected {size}", c.len())));
    }

    // Central differences on the cell match the interior stencil of the
    // Dirichlet grids, so the gap measures homogenization alone.
    let cell = Grid::square(2, cfg.points_per_cell, 1.0, Boundary::Periodic)?.with_scheme(Scheme::Central);
    let a_sharp = effective_tensor(&medium.context(&cell, 1.0, allow_seminorm)?, opts)?;
    let a_sharp_m = a_sharp.to_matrix();

    let rows: Vec<StudyRow> = scales
        .par_iter()
        .map(|&n_cells| -> Result<StudyRow> {
            let eps = 1.0 / n_cells as f64;
            let intervals = n_cells * cfg.points_per_cell;
            let grid = Grid::square(2, intervals, 1.0, Boundary::Dirichlet)?;
            let ctx = medium.context(&grid, eps, allow_seminorm)?;
            let fine = solve_cell_problem(&ctx, &c, opts)?;
            let hom_form = ConstantForm::new(&grid, m, &a_sharp.matrix)?;
            let hom = CellSolver::new(&hom_form, *opts).solve(&c)?;
            let diff: Vec<f64> =
                fine.potential.values.iter().zip(&hom.potential.values).map(|(a, b)| a - b).collect();
            let nn = grid.node_count();
            let mut sq = 0.0;
            for k in 0..m {
                let col = &diff[k * nn..(k + 1) * nn];
                sq += inner_product(&grid, col, col)?;
            }
            let a_d = effective_tensor(&ctx, opts)?;
            let gap = *sorted_eigenvalues(&(a_d.to_matrix() - &a_sharp_m)).last().unwrap();
            let iterations = fine.report.iterations + hom.report.iterations;
            Ok(StudyRow {
                label: format!("1/{n_cells}"),
                parameter: eps,
                values: vec![n_cells as f64, intervals as f64, sq.sqrt(), gap, iterations as f64],
                residual: fine.report.residual.max(hom.report.residual).max(tensor_residual(&a_d)),
            })
        })
        .collect::<Result<_>>()?;

    let mut out = StudyResult::new(
        "eps_convergence",
        "epsilon",
        ["n_cells", "intervals", "error", "gap", "iterations"].map(String::from).to_vec(),
    );
    out.rows = rows;
    let errors = out.column("error").unwrap();
    let worst_ratio = errors.windows(2).map(|w| w[1] / w[0]).fold(0.0, f64::max);
    let strict = errors.windows(2).all(|w| w[1] < w[0]);
    out.checks.push(Check { name: "error_strictly_decreasing".into(), passed: strict, value: worst_ratio, threshold: 1.0 });
    out.checks.push(Check::at_most("error_reduction", worst_ratio, 1.0 - cfg.min_reduction));
    let gaps = out.column("gap").unwrap();
    if gaps.len() >= 2 {
        let (first, last) = (gaps[0], *gaps.last().unwrap());
        out.checks.push(Check { name: "gap_shrinks".into(), passed: last < first, value: last, threshold: first });
    }
    if errors.len() >= 2 {
        let eps: Vec<f64> = out.rows.iter().map(|r| r.parameter).collect();
        if errors.iter().all(|e| *e > 0.0) {
            out.slopes.push(("error".into(), log_log_slope(&eps, &errors)));
        }
    }
    Ok(out)
}

/// The four effective tensors of one medium on the unit square.
#[derive(Clone, Debug)]
pub struct OrderingTensors {
    pub a_sharp: EffectiveTensor,
    pub a_dirichlet: EffectiveTensor,
    pub b_sharp: EffectiveTensor,
    pub b_natural: EffectiveTensor,
}

pub fn ordering_tensors(medium: &Medium, intervals: usize, allow_seminorm: bool, opts: &CgOptions) -> Result<OrderingTensors> {
    let make = |b| -> Result<FormContext> { medium.context(&Grid::square(2, intervals, 1.0, b)?, 1.0, allow_seminorm) };
    let per = make(Boundary::Periodic)?;
    Ok(OrderingTensors {
        a_sharp: effective_tensor(&per, opts)?,
        a_dirichlet: effective_tensor(&make(Boundary::Dirichlet)?, opts)?,
        b_sharp: effective_tensor_natural_periodic(&per, opts)?,
        b_natural: effective_tensor_natural(&make(Boundary::Natural)?, opts)?,
    })
}

/// Eigenvalues of `a_D - a_sharp`, `a_sharp - inv(b_sharp)` and
/// `inv(b_sharp) - inv(b_natural)`, one row each.
pub fn bc_ordering_check(medium: &Medium, intervals: usize, allow_seminorm: bool, opts: &CgOptions) -> Result<StudyResult> {
    let t = ordering_tensors(medium, intervals, allow_seminorm, opts)?;
    bc_ordering_from(&t)
}

pub fn bc_ordering_from(t: &OrderingTensors) -> Result<StudyResult> {
    let a_sharp = t.a_sharp.to_matrix();
    let a_d = t.a_dirichlet.to_matrix();
    let b_sharp_inv = t.b_sharp.inverse()?;
    let b_inv = t.b_natural.inverse()?;
    let size = a_sharp.nrows();
    let intervals = t.a_sharp.grid.intervals(0) as f64;
    let diffs: [(&str, DMatrix<f64>, f64); 3] = [
        ("a_dirichlet-a_sharp", &a_d - &a_sharp, t.a_dirichlet.max_residual().max(t.a_sharp.max_residual())),
        ("a_sharp-inv_b_sharp", &a_sharp - &b_sharp_inv, t.a_sharp.max_residual().max(t.b_sharp.max_residual())),
        ("inv_b_sharp-inv_b_natural", &b_sharp_inv - &b_inv, t.b_sharp.max_residual().max(t.b_natural.max_residual())),
    ];
    let mut out = StudyResult::new("bc_ordering", "intervals", (0..size).map(|i| format!("eig{i}")).collect());
    for (label, d, residual) in &diffs {
        out.rows.push(StudyRow { label: (*label).into(), parameter: intervals, values: sorted_eigenvalues(d), residual: *residual });
    }
    let min = |i: usize| out.rows[i].values[0];
    let middle = out.rows[1].values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let rel = diffs[1].1.norm() / a_sharp.norm();
    out.checks = vec![
        Check::at_least("dirichlet_above_periodic", min(0), -1e-7),
        Check::at_most("periodic_duality", middle, 1e-7),
        Check::at_most("periodic_duality_relative", rel, 1e-7),
        Check::at_least("periodic_above_natural", min(2), -1e-7),
    ];
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    pub intervals: usize,
    pub eta: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { lambdas: vec![0.2, 0.1, 0.05, 0.025], intervals: 32, eta: 0.1 }
    }
}

/// Effective tensors of the standard small-oscillation family on the
/// periodic unit square, split into the `D` small and `D (m-1)` large
/// eigenvalues.
///
/// Columns: `small0, small1, large0, large1, oscillation, oscillation/lambda^2`.
pub fn small_osc_sweep(cfg: &SweepConfig, opts: &CgOptions) -> Result<StudyResult> {
    let grid = Grid::square(2, cfg.intervals, 1.0, Boundary::Periodic)?;
    let fam = SmallOscillationFamily::standard(&grid, cfg.eta);
    let w0 = fam.w0()?;
    let mut lambdas = cfg.lambdas.clone();
    if lambdas.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::InvalidInput("lambda values must be nonnegative".into()));
    }
    lambdas.sort_by(|a, b| a.total_cmp(b));
    lambdas.dedup();
    let rows: Vec<StudyRow> = lambdas
        .par_iter()
        .map(|&lambda| -> Result<StudyRow> {
            let ctx = FormContext::new(fam.at(&grid, lambda)?).allow_seminorm(lambda == 0.0);
            let t = effective_tensor(&ctx, opts)?;
            let split = small_oscillation_eigen_split(&t.to_matrix(), &w0, 2, fam.m)?;
            let osc = ctx.oscillation().value;
            let ratio = if lambda > 0.0 { osc / (lambda * lambda) } else { f64::NAN };
            let mut values = split.small.clone();
            values.extend(&split.large);
            values.extend([osc, ratio]);
            Ok(StudyRow { label: format!("{lambda}"), parameter: lambda, values, residual: t.max_residual() })
        })
        .collect::<Result<_>>()?;
    let mut columns: Vec<String> = (0..2).map(|i| format!("small{i}")).collect();
    columns.extend((0..2 * (fam.m - 1)).map(|i| format!("large{i}")));
    columns.extend(["oscillation".to_string(), "oscillation_over_lambda2".to_string()]);
    let mut out = StudyResult::new("small_oscillation", "lambda", columns);
    out.rows = rows;

    let positive: Vec<&StudyRow> = out.rows.iter().filter(|r| r.parameter > 0.0).collect();
    if positive.len() >= 2 {
        let x: Vec<f64> = positive.iter().map(|r| r.parameter).collect();
        let n_small = 2;
        for i in 0..out.columns.len() - 2 {
            let y: Vec<f64> = positive.iter().map(|r| r.values[i].abs()).collect();
            let slope = log_log_slope(&x, &y);
            let (target, name) = if i < n_small { (2.0, "small") } else { (0.0, "large") };
            out.checks.push(Check::at_most(&format!("{name}_slope_{}", out.columns[i]), (slope - target).abs(), 0.1));
            out.slopes.push((out.columns[i].clone(), slope));
        }
        let ratios: Vec<f64> = positive.iter().map(|r| *r.values.last().unwrap()).collect();
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        let spread = ratios.iter().map(|r| (r - mean).abs()).fold(0.0, f64::max) / mean;
        out.checks.push(Check::at_most("oscillation_quadratic", spread, 0.01));
    }
    if let Some(zero) = out.rows.iter().find(|r| r.parameter == 0.0) {
        let small = zero.values[..2].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        out.checks.push(Check::at_most("small_vanish_at_zero", small, 1e-12));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubadditivityConfig {
    /// Side lengths of the squares, in units of the random cell.
    pub sizes: Vec<usize>,
    pub samples: usize,
    pub points_per_cell: usize,
    pub amplitude: f64,
    pub mean: f64,
    pub smoothing_radius: f64,
    pub current: Option<Vec<f64>>,
    pub params: DiracParams,
    /// Redraws allowed per sample when a sub-square is degenerate.
    pub max_resamples: usize,
}

impl Default for SubadditivityConfig {
    fn default() -> Self {
        Self {
            sizes: vec![1, 2, 4, 8],
            samples: 16,
            points_per_cell: 8,
            amplitude: 0.5,
            mean: 0.0,
            smoothing_radius: 0.5,
            current: None,
            params: DiracParams::default(),
            max_resamples: 4,
        }
    }
}

struct SampleOutcome {
    seed: u64,
    resampled: usize,
    /// `nu[X_N] / |X_N|` per size, or `None` when every draw was degenerate.
    per_volume: Option<Vec<f64>>,
    /// `(N, nu[X_2N], sum of nu over the 2^D copies of X_N)`.
    partitions: Vec<(usize, f64, f64)>,
    residual: f64,
}

/// Dirichlet minimal energies `nu[X_N]` of a random stationary Dirac medium
/// on `[0, N]^2`, with the partition check of every `X_2N` into four copies
/// of `X_N`.
///
/// One row per sample and size; columns `sample, seed, nu, nu_per_volume`.
pub fn subadditivity_mc(seed: u64, cfg: &SubadditivityConfig, opts: &CgOptions) -> Result<StudyResult> {
    let mut sizes = cfg.sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    if sizes.is_empty() || sizes[0] == 0 || cfg.samples == 0 {
        return Err(Error::InvalidInput("need positive sizes and at least one sample".into()));
    }
    if cfg.points_per_cell < 2 {
        return Err(Error::ResolutionInsufficient { points_per_cell: cfg.points_per_cell });
    }
    let c = cfg.current.clone().unwrap_or_else(|| basis_tensor(4, 0));
    if c.len() != 4 {
        return Err(Error::DimensionMismatch(format!("current has {} entries, expected 4", c.len())));
    }
    let largest = *sizes.last().unwrap();
    let outcomes: Vec<SampleOutcome> =
        (0..cfg.samples).into_par_iter().map(|s| run_sample(seed, s, &sizes, largest, &c, cfg, opts)).collect::<Result<_>>()?;

    let mut out = StudyResult::new("subadditivity", "size", ["sample", "seed", "nu", "nu_per_volume"].map(String::from).to_vec());
    let mut worst_excess = f64::NEG_INFINITY;
    let mut per_size: Vec<Vec<f64>> = vec![Vec::new(); sizes.len()];
    let mut degenerate = 0;
    for (s, o) in outcomes.iter().enumerate() {
        out.seeds.push(o.seed);
        out.resampled += o.resampled;
        let Some(pv) = &o.per_volume else {
            degenerate += 1;
            continue;
        };
        for (i, &n) in sizes.iter().enumerate() {
            let vol = (n * n) as f64;
            out.rows.push(StudyRow {
                label: format!("sample{s}"),
                parameter: n as f64,
                values: vec![s as f64, o.seed as f64, pv[i] * vol, pv[i]],
                residual: o.residual,
            });
            per_size[i].push(pv[i]);
        }
        for &(_, whole, parts) in &o.partitions {
            worst_excess = worst_excess.max((whole - parts) / parts.abs().max(f64::MIN_POSITIVE));
        }
    }
    out.rows.sort_by(|a, b| a.parameter.total_cmp(&b.parameter).then(a.values[0].total_cmp(&b.values[0])));
    out.checks.push(Check::at_most("all_samples_degenerate", degenerate as f64, (cfg.samples - 1) as f64));
    if worst_excess.is_finite() {
        out.checks.push(Check::at_most("partition_subadditive", worst_excess, 1e-8));
    }
    let stats: Vec<(f64, f64)> = per_size.iter().map(|v| mean_var(v)).collect();
    let live = per_size.iter().all(|v| v.len() >= 2);
    if live {
        for i in 1..sizes.len() {
            let (m0, v0) = stats[i - 1];
            let (m1, v1) = stats[i];
            let k = per_size[i].len() as f64;
            let slack = 2.0 * ((v0 + v1) / k).sqrt();
            out.checks.push(Check::at_most(&format!("mean_nonincreasing_{}", sizes[i]), m1 - m0, slack));
        }
        if let (Some(i2), Some(i8)) = (sizes.iter().position(|&n| n == 2), sizes.iter().position(|&n| n == 8)) {
            out.checks.push(Check { name: "variance_decreases".into(), passed: stats[i8].1 < stats[i2].1, value: stats[i8].1, threshold: stats[i2].1 });
        }
    }
    for (i, &n) in sizes.iter().enumerate() {
        out.slopes.push((format!("mean_{n}"), stats[i].0));
        out.slopes.push((format!("variance_{n}"), stats[i].1));
    }
    Ok(out)
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var)
}

fn draw_seed(seed: u64, sample: usize, attempt: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample as u64);
    let mut s = rng.next_u64();
    for _ in 0..attempt {
        s = rng.next_u64();
    }
    s
}

fn run_sample(
    seed: u64,
    sample: usize,
    sizes: &[usize],
    largest: usize,
    c: &[f64],
    cfg: &SubadditivityConfig,
    opts: &CgOptions,
) -> Result<SampleOutcome> {
    let big = Grid::square(2, largest * cfg.points_per_cell, largest as f64, Boundary::Dirichlet)?;
    for attempt in 0..=cfg.max_resamples {
        let s = draw_seed(seed, sample, attempt);
        let field = RandomFieldParams {
            seed: s,
            cells_per_axis: largest.max(2),
            smoothing_radius: cfg.smoothing_radius,
            amplitude: cfg.amplitude,
            mean: cfg.mean,
        };
        let gamma = crate::fields::random_stationary_field(&big, &field)?;
        // Squares at every origin needed: X_N at 0 and, when 2N is a size,
        // the three other copies inside X_2N.
        let mut squares: Vec<(usize, [usize; 2])> = Vec::new();
        for &n in sizes {
            squares.push((n, [0, 0]));
            if sizes.contains(&(2 * n)) {
                squares.extend([(n, [n, 0]), (n, [0, n]), (n, [n, n])]);
            }
        }
        let contexts: Vec<FormContext> = squares
            .iter()
            .map(|&(n, o)| -> Result<FormContext> {
                let p = cfg.points_per_cell;
                let sub = big.subgrid([o[0] * p, o[1] * p], [n * p, n * p])?;
                let g = big.restrict(&sub, &gamma);
                Ok(FormContext::new(dirac_preset(&sub, &g, &cfg.params)?))
            })
            .collect::<Result<_>>()?;
        if contexts.iter().any(|ctx| ctx.is_degenerate()) {
            continue;
        }
        let solved: Vec<(f64, f64)> = contexts
            .par_iter()
            .map(|ctx| solve_cell_problem(ctx, c, opts).map(|s| (s.report.energy, s.report.residual)))
            .collect::<Result<_>>()?;
        let nu = |n: usize, o: [usize; 2]| solved[squares.iter().position(|q| *q == (n, o)).unwrap()].0;
        let per_volume = sizes.iter().map(|&n| nu(n, [0, 0]) / (n * n) as f64).collect();
        let partitions = sizes
            .iter()
            .filter(|&&n| sizes.contains(&(2 * n)))
            .map(|&n| {
                let parts = [[0, 0], [n, 0], [0, n], [n, n]].iter().map(|&o| nu(n, o)).sum();
                (n, nu(2 * n, [0, 0]), parts)
            })
            .collect();
        let residual = solved.iter().map(|s| s.1).fold(0.0, f64::max);
        return Ok(SampleOutcome { seed: s, resampled: attempt, per_volume: Some(per_volume), partitions, residual });
    }
    Ok(SampleOutcome {
        seed: draw_seed(seed, sample, 0),
        resampled: cfg.max_resamples,
        per_volume: None,
        partitions: Vec::new(),
        residual: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> CgOptions {
        CgOptions { tol: 1e-11, max_iter: Some(20_000) }
    }

    #[test]
    fn slope_of_power_law() {
        let x = [0.2, 0.1, 0.05];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powi(2)).collect();
        assert!((log_log_slope(&x, &y) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn medium_round_trips_through_json() {
        let m = Medium::dirac_trig(0.7);
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<Medium>(&s).unwrap(), m);
        let bad = s.replacen("\"preset\"", "\"bogus\":1,\"preset\"", 1);
        assert!(serde_json::from_str::<Medium>(&bad).is_err());
    }

    #[test]
    fn trig_field_is_rescaled() {
        let f = ScalarField::Trig { mean: 1.0, terms: vec![TrigTerm { amplitude: 2.0, wavenumber: [1, 0], phase: 0.0 }] };
        let g = Grid::square(2, 8, 1.0, Boundary::Dirichlet).unwrap();
        let v = f.sample(&g, 0.5).unwrap();
        // x = 1/16 maps to y = 1/4, a crest.
        assert!((v[g.index(1, 0)] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn eps_study_rejects_coarse_cells_and_bad_scales() {
        let m = Medium::dirac_trig(0.5);
        let cfg = EpsStudyConfig { points_per_cell: 4, ..Default::default() };
        assert!(matches!(eps_convergence_study(&m, &cfg, false, &opts()), Err(Error::ResolutionInsufficient { .. })));
        let cfg = EpsStudyConfig { epsilons: vec![0.3], ..Default::default() };
        assert!(matches!(eps_convergence_study(&m, &cfg, false, &opts()), Err(Error::NonIntegerScale { .. })));
    }

    #[test]
    fn constant_medium_homogenizes_exactly() {
        let m = Medium::Dirac { gamma: ScalarField::Constant { value: 0.3 }, params: DiracParams::default() };
        let cfg = EpsStudyConfig { epsilons: vec![0.5, 0.25], ..Default::default() };
        assert!(matches!(eps_convergence_study(&m, &cfg, false, &opts()), Err(Error::DegenerateForm(_))));
        let r = eps_convergence_study(&m, &cfg, true, &opts()).unwrap();
        for e in r.column("error").unwrap() {
            assert!(e < 1e-12, "{e}");
        }
    }

    #[test]
    fn eps_study_converges_on_coarse_list() {
        let m = Medium::dirac_trig(0.5);
        let cfg = EpsStudyConfig { epsilons: vec![0.25, 0.5, 0.125], ..Default::default() };
        let r = eps_convergence_study(&m, &cfg, false, &opts()).unwrap();
        assert_eq!(r.rows.iter().map(|r| r.parameter).collect::<Vec<_>>(), vec![0.5, 0.25, 0.125]);
        assert!(r.passed(), "{:?}", r.checks);
        // Central differences on the cell make the Dirichlet tensors dominate it exactly.
        assert!(r.column("gap").unwrap().iter().all(|g| *g > 0.0));
    }

    #[test]
    fn ordering_on_coarse_grid() {
        let r = bc_ordering_check(&Medium::dirac_trig(0.5), 16, false, &opts()).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert!(r.passed(), "{:?}", r.checks);
    }

    #[test]
    fn small_oscillation_zero_row() {
        let cfg = SweepConfig { lambdas: vec![0.1, 0.0, 0.05], intervals: 16, eta: 0.1 };
        let r = small_osc_sweep(&cfg, &opts()).unwrap();
        assert_eq!(r.rows[0].parameter, 0.0);
        assert!(r.check("small_vanish_at_zero").unwrap().passed);
        assert!(r.check("oscillation_quadratic").unwrap().passed);
        let big = r.column("large0").unwrap();
        assert!((big[0] - 1.0).abs() < 1e-12, "{big:?}");
    }

    #[test]
    fn partitions_are_subadditive() {
        let cfg = SubadditivityConfig { sizes: vec![1, 2], samples: 2, points_per_cell: 6, ..Default::default() };
        let r = subadditivity_mc(11, &cfg, &opts()).unwrap();
        assert!(r.check("partition_subadditive").unwrap().passed, "{:?}", r.checks);
        assert_eq!(r.rows.len(), 4);
        assert_eq!(r.seeds.len(), 2);
    }

    #[test]
    fn flat_random_medium_is_degenerate() {
        let cfg = SubadditivityConfig { sizes: vec![1, 2], samples: 3, points_per_cell: 4, amplitude: 0.0, max_resamples: 1, ..Default::default() };
        let r = subadditivity_mc(3, &cfg, &opts()).unwrap();
        assert!(r.rows.is_empty());
        assert_eq!(r.resampled, 3);
        assert!(!r.check("all_samples_degenerate").unwrap().passed);
    }
}

//! Cell problems on stream-function unknowns, the effective tensors built
//! from their minimal energies, a dense brute-force oracle and the
//! reconstruction of velocity and thermodynamic gradients.
//!
//! Every tensor is assembled from energies only: diagonal entries are
//! minimal energies per unit volume, off-diagonal entries come from
//! polarization with the summed correctors of the two basis tensors.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cg::{axis_eigenbasis, pcg, CgOptions, CgReport, SpectralPreconditioner};
use crate::error::{Error, Result};
use crate::forms::{dot, Form, FormContext, NormalOperator};
use crate::grid::{
    axis_derivative_matrix, axis_weights, check_len, Boundary, CurrentField, Grid, Operators, PotentialField,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    ASharp,
    ADirichlet,
    BNatural,
    BSharp,
}

impl TensorKind {
    pub fn name(self) -> &'static str {
        match self {
            TensorKind::ASharp => "a_sharp",
            TensorKind::ADirichlet => "a_dirichlet",
            TensorKind::BNatural => "b_natural",
            TensorKind::BSharp => "b_sharp",
        }
    }
}

/// Symmetric `(D m) x (D m)` tensor indexed by current component `k * D + l`.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectiveTensor {
    pub kind: TensorKind,
    pub grid: Grid,
    pub m: usize,
    /// Row-major.
    pub matrix: Vec<f64>,
    /// Final relative residual of every column solve.
    pub residuals: Vec<f64>,
    pub iterations: Vec<usize>,
}

impl EffectiveTensor {
    pub fn boundary(&self) -> Boundary {
        self.grid.boundary()
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn size(&self) -> usize {
        self.grid.dim() * self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.size() + j]
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let n = self.size();
        DMatrix::from_row_slice(n, n, &self.matrix)
    }

    /// `(c, T c)`.
    pub fn quadratic(&self, c: &[f64]) -> f64 {
        dot(c, &self.apply(c))
    }

    pub fn apply(&self, c: &[f64]) -> Vec<f64> {
        let n = self.size();
        (0..n).map(|i| (0..n).map(|j| self.get(i, j) * c[j]).sum()).collect()
    }

    /// Ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        sorted_eigenvalues(&self.to_matrix())
    }

    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        self.to_matrix()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::SingularTensor(format!("{} is not positive definite", self.kind.name())))
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().fold(0.0, |a, r| a.max(*r))
    }
}

pub fn sorted_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let mut e: Vec<f64> = sym.symmetric_eigen().eigenvalues.iter().copied().collect();
    e.sort_by(f64::total_cmp);
    e
}

/// Largest `|a_ij - b_ij| / sqrt(|a_ii a_jj|)`: entrywise error on the
/// natural scale of a symmetric positive tensor, so that entries that
/// vanish by symmetry are not divided by zero.
pub fn scaled_entry_error(a: &EffectiveTensor, b: &EffectiveTensor) -> f64 {
    let n = a.size();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let scale = (a.get(i, i) * a.get(j, j)).abs().sqrt();
            worst = worst.max((a.get(i, j) - b.get(i, j)).abs() / scale);
        }
    }
    worst
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub residual: f64,
    /// `a(c + J, c + J)`.
    pub energy: f64,
    pub degenerate: bool,
}

#[derive(Clone, Debug)]
pub struct CellSolution {
    pub potential: PotentialField,
    /// Includes the constant part.
    pub current: CurrentField,
    pub report: SolveReport,
}

/// Unit tensor `e_i` of size `n`.
pub fn basis_tensor(n: usize, i: usize) -> Vec<f64> {
    let mut e = vec![0.0; n];
    e[i] = 1.0;
    e
}

/// Reusable CG solver for `min a(c + P f, c + P f)` over the unknowns of
/// the grid's boundary kind.
pub struct CellSolver<'a, F: Form + ?Sized> {
    op: NormalOperator<'a, F>,
    pre: SpectralPreconditioner,
    opts: CgOptions,
    degenerate: bool,
}

impl<'a, F: Form + ?Sized> CellSolver<'a, F> {
    pub fn new(form: &'a F, opts: CgOptions) -> Self {
        let op = NormalOperator::new(form);
        let pre = SpectralPreconditioner::new(form, op.layout());
        Self { op, pre, opts, degenerate: false }
    }

    fn flag_degenerate(mut self, degenerate: bool) -> Self {
        self.degenerate = degenerate;
        self
    }

    pub fn operator(&self) -> &NormalOperator<'a, F> {
        &self.op
    }

    fn run(&self, rhs: &[f64]) -> Result<(Vec<f64>, CgReport)> {
        let mut x = vec![0.0; self.op.len()];
        if self.op.is_empty() {
            return Ok((x, CgReport { iterations: 0, residual: 0.0 }));
        }
        let rep = pcg(|p, q| self.op.apply(p, q), |r, z| self.pre.apply(r, z), rhs, &mut x, &self.opts)?;
        self.op.layout().project_out_null(&mut x);
        Ok((x, rep))
    }

    fn package(&self, x: &[f64], background: &[f64], rep: CgReport, c: &[f64]) -> CellSolution {
        let form = self.op.form();
        let grid = form.grid();
        let m = form.m();
        let mut potential = PotentialField::zeros(grid, m);
        if !self.op.is_empty() {
            self.op.layout().scatter(x, &mut potential.values);
        }
        let mut values = self.op.lift(x);
        values.iter_mut().zip(background).for_each(|(a, b)| *a += b);
        let energy = form.energy(&values);
        CellSolution {
            potential,
            current: CurrentField { grid: grid.clone(), m, values, mean_part: c.to_vec() },
            report: SolveReport { iterations: rep.iterations, residual: rep.residual, energy, degenerate: self.degenerate },
        }
    }

    /// Minimize `a(c + J, c + J)` over admissible fluctuations `J`.
    pub fn solve(&self, c: &[f64]) -> Result<CellSolution> {
        let form = self.op.form();
        let grid = form.grid();
        check_len("constant current", c.len(), grid.dim() * form.m())?;
        let background = CurrentField::constant(grid, form.m(), c).values;
        let rhs: Vec<f64> = self.op.coupling(&background).iter().map(|v| -v).collect();
        let (x, rep) = self.run(&rhs)?;
        Ok(self.package(&x, &background, rep, c))
    }

    /// Maximize `<p, J> - a(J, J) / 2` over fluctuations `J` (no constant part).
    pub fn solve_dual(&self, p: &[f64]) -> Result<CellSolution> {
        let form = self.op.form();
        let grid = form.grid();
        let m = form.m();
        check_len("dual tensor", p.len(), grid.dim() * m)?;
        let wts = grid.weights();
        let mut load = CurrentField::constant(grid, m, p).values;
        let n = grid.node_count();
        for chunk in load.chunks_mut(n) {
            chunk.iter_mut().zip(&wts).for_each(|(v, w)| *v *= w);
        }
        let rhs = self.op.lift_transpose(&load);
        let (x, rep) = self.run(&rhs)?;
        let zero = vec![0.0; load.len()];
        Ok(self.package(&x, &zero, rep, &vec![0.0; p.len()]))
    }
}

fn require_boundary(grid: &Grid, allowed: &[Boundary], what: &str) -> Result<()> {
    if allowed.contains(&grid.boundary()) {
        return Ok(());
    }
    let names: Vec<&str> = allowed.iter().map(|b| b.name()).collect();
    Err(Error::InvalidInput(format!("{what} needs a {} grid, got {}", names.join(" or "), grid.boundary().name())))
}

/// Cell problem with constant part `c` on a periodic or Dirichlet grid.
pub fn solve_cell_problem(ctx: &FormContext, c: &[f64], opts: &CgOptions) -> Result<CellSolution> {
    ctx.require_definite()?;
    require_boundary(ctx.grid(), &[Boundary::Periodic, Boundary::Dirichlet], "the cell problem")?;
    CellSolver::new(ctx, *opts).flag_degenerate(ctx.is_degenerate()).solve(c)
}

/// Natural-boundary problem with load `p`: `a(J, J~) = <p, J~>` for all
/// fluctuations on a natural grid.
pub fn solve_natural(ctx: &FormContext, p: &[f64], opts: &CgOptions) -> Result<CellSolution> {
    ctx.require_definite()?;
    require_boundary(ctx.grid(), &[Boundary::Natural], "the natural-boundary problem")?;
    CellSolver::new(ctx, *opts).flag_degenerate(ctx.is_degenerate()).solve_dual(p)
}

/// `<p, J>` for a constant tensor `p`.
fn load(grid: &Grid, p: &[f64], j: &[f64]) -> f64 {
    let wts = grid.weights();
    let n = grid.node_count();
    p.iter()
        .zip(j.chunks(n))
        .map(|(pi, jc)| pi * jc.iter().zip(&wts).map(|(a, w)| a * w).sum::<f64>())
        .sum()
}

/// Symmetric matrix from a quadratic functional evaluated on basis vectors
/// and on pairwise sums.
fn polarize(n: usize, q: impl Fn(usize, Option<usize>) -> f64 + Sync) -> DMatrix<f64> {
    let diag: Vec<f64> = (0..n).into_par_iter().map(|i| q(i, None)).collect();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let off: Vec<f64> = pairs.par_iter().map(|&(i, j)| 0.5 * (q(i, Some(j)) - diag[i] - diag[j])).collect();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        out[(i, i)] = diag[i];
    }
    for (&(i, j), v) in pairs.iter().zip(&off) {
        out[(i, j)] = *v;
        out[(j, i)] = *v;
    }
    out
}

fn finish(kind: TensorKind, grid: &Grid, m: usize, mat: DMatrix<f64>, reports: &[CgReport], check_pd: bool) -> Result<EffectiveTensor> {
    let n = mat.nrows();
    if check_pd {
        let low = sorted_eigenvalues(&mat)[0];
        if !(low > 0.0) {
            return Err(Error::SingularTensor(format!("{} has smallest eigenvalue {low:.3e}", kind.name())));
        }
    }
    let mut matrix = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            matrix.push(mat[(i, j)]);
        }
    }
    Ok(EffectiveTensor {
        kind,
        grid: grid.clone(),
        m,
        matrix,
        residuals: reports.iter().map(|r| r.residual).collect(),
        iterations: reports.iter().map(|r| r.iterations).collect(),
    })
}

/// Tensor of minimal energies per unit volume from converged correctors.
fn tensor_from_correctors(ctx: &FormContext, kind: TensorKind, solutions: &[CellSolution]) -> Result<EffectiveTensor> {
    let grid = ctx.grid();
    let vol = grid.volume();
    let mat = polarize(solutions.len(), |i, j| match j {
        None => solutions[i].report.energy / vol,
        Some(j) => {
            let sum: Vec<f64> = solutions[i].current.values.iter().zip(&solutions[j].current.values).map(|(a, b)| a + b).collect();
            ctx.energy(&sum) / vol
        }
    });
    let reports: Vec<CgReport> = solutions.iter().map(|s| CgReport { iterations: s.report.iterations, residual: s.report.residual }).collect();
    finish(kind, grid, ctx.m(), mat, &reports, !ctx.is_degenerate())
}

/// `a_sharp` on a periodic grid, `a_D` on a Dirichlet grid.
pub fn effective_tensor(ctx: &FormContext, opts: &CgOptions) -> Result<EffectiveTensor> {
    ctx.require_definite()?;
    let grid = ctx.grid();
    require_boundary(grid, &[Boundary::Periodic, Boundary::Dirichlet], "the cell problem")?;
    let kind = if grid.boundary().is_periodic() { TensorKind::ASharp } else { TensorKind::ADirichlet };
    let size = grid.dim() * ctx.m();
    let solver = CellSolver::new(ctx, *opts).flag_degenerate(ctx.is_degenerate());
    let solutions = (0..size).into_par_iter().map(|i| solver.solve(&basis_tensor(size, i))).collect::<Result<Vec<_>>>()?;
    tensor_from_correctors(ctx, kind, &solutions)
}

/// `b` from the natural-boundary problem. The value of the dual functional
/// `<p, J> - a(J, J) / 2` is used, which equals `a(J, J) / 2` at the
/// solution and is second-order accurate in the solver error.
pub fn effective_tensor_natural(ctx: &FormContext, opts: &CgOptions) -> Result<EffectiveTensor> {
    ctx.require_definite()?;
    let grid = ctx.grid();
    require_boundary(grid, &[Boundary::Natural], "the natural-boundary tensor")?;
    let size = grid.dim() * ctx.m();
    let vol = grid.volume();
    if grid.dim() == 1 {
        // Only constant currents are divergence free, and none is excluded.
        let voigt = polarize(size, |i, j| {
            let mut c = basis_tensor(size, i);
            if let Some(j) = j {
                c[j] += 1.0;
            }
            ctx.energy(&CurrentField::constant(grid, ctx.m(), &c).values) / vol
        });
        let inv = voigt.cholesky().map(|c| c.inverse()).ok_or_else(|| Error::SingularTensor("cell tensor is not positive definite".into()))?;
        let reports = vec![CgReport { iterations: 0, residual: 0.0 }; size];
        return finish(TensorKind::BNatural, grid, ctx.m(), (&inv + inv.transpose()) * 0.5, &reports, true);
    }
    let solver = CellSolver::new(ctx, *opts).flag_degenerate(ctx.is_degenerate());
    let solutions = (0..size).into_par_iter().map(|i| solver.solve_dual(&basis_tensor(size, i))).collect::<Result<Vec<_>>>()?;
    let mat = polarize(size, |i, j| {
        let mut p = basis_tensor(size, i);
        let current: Vec<f64> = match j {
            None => solutions[i].current.values.clone(),
            Some(j) => {
                p[j] += 1.0;
                solutions[i].current.values.iter().zip(&solutions[j].current.values).map(|(a, b)| a + b).collect()
            }
        };
        (2.0 * load(grid, &p, &current) - ctx.energy(&current)) / vol
    });
    let reports: Vec<CgReport> = solutions.iter().map(|s| CgReport { iterations: s.report.iterations, residual: s.report.residual }).collect();
    finish(TensorKind::BNatural, grid, ctx.m(), mat, &reports, !ctx.is_degenerate())
}

/// Solution `(c, J)` of `a(c + J, c~ + J~) = <p, c~>` over constants and
/// periodic fluctuations jointly.
pub fn solve_natural_periodic(ctx: &FormContext, p: &[f64], opts: &CgOptions) -> Result<(Vec<f64>, CellSolution)> {
    ctx.require_definite()?;
    require_boundary(ctx.grid(), &[Boundary::Periodic], "the periodic natural problem")?;
    ExtendedSolver::new(ctx, *opts)?.solve(p)
}

struct ExtendedSolver<'a> {
    ctx: &'a FormContext,
    op: NormalOperator<'a, FormContext>,
    pre: SpectralPreconditioner,
    ecc_inv: DMatrix<f64>,
    opts: CgOptions,
}

impl<'a> ExtendedSolver<'a> {
    fn new(ctx: &'a FormContext, opts: CgOptions) -> Result<Self> {
        let grid = ctx.grid();
        let size = grid.dim() * ctx.m();
        let n = grid.node_count();
        let mut ecc = DMatrix::zeros(size, size);
        for j in 0..size {
            let cj = CurrentField::constant(grid, ctx.m(), &basis_tensor(size, j)).values;
            let mut mc = vec![0.0; cj.len()];
            ctx.apply(&cj, &mut mc);
            for i in 0..size {
                ecc[(i, j)] = mc[i * n..(i + 1) * n].iter().sum();
            }
        }
        let ecc_inv = ((&ecc + ecc.transpose()) * 0.5)
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::SingularTensor("energy of constant currents is not positive definite".into()))?;
        let op = NormalOperator::new(ctx);
        let pre = SpectralPreconditioner::new(ctx, op.layout());
        Ok(Self { ctx, op, pre, ecc_inv, opts })
    }

    fn current(&self, x: &[f64], size: usize) -> Vec<f64> {
        let grid = self.ctx.grid();
        let mut j = self.op.lift(&x[size..]);
        let c = CurrentField::constant(grid, self.ctx.m(), &x[..size]).values;
        j.iter_mut().zip(&c).for_each(|(a, b)| *a += b);
        j
    }

    fn solve(&self, p: &[f64]) -> Result<(Vec<f64>, CellSolution)> {
        let grid = self.ctx.grid();
        let size = grid.dim() * self.ctx.m();
        let n = grid.node_count();
        check_len("dual tensor", p.len(), size)?;
        let vol = grid.volume();
        let nf = self.op.len();
        let mut rhs = vec![0.0; size + nf];
        rhs[..size].iter_mut().zip(p).for_each(|(r, pi)| *r = vol * pi);
        let apply = |x: &[f64], out: &mut [f64]| {
            let j = self.current(x, size);
            let mut mj = vec![0.0; j.len()];
            self.ctx.apply(&j, &mut mj);
            for i in 0..size {
                out[i] = mj[i * n..(i + 1) * n].iter().sum();
            }
            out[size..].copy_from_slice(&self.op.lift_transpose(&mj));
        };
        let precondition = |r: &[f64], z: &mut [f64]| {
            let rc = DVector::from_column_slice(&r[..size]);
            z[..size].copy_from_slice((&self.ecc_inv * rc).as_slice());
            if nf > 0 {
                self.pre.apply(&r[size..], &mut z[size..]);
            }
        };
        let mut x = vec![0.0; size + nf];
        let rep = pcg(apply, precondition, &rhs, &mut x, &self.opts)?;
        self.op.layout().project_out_null(&mut x[size..]);
        let c = x[..size].to_vec();
        let values = self.current(&x, size);
        let energy = self.ctx.energy(&values);
        let mut potential = PotentialField::zeros(grid, self.ctx.m());
        if nf > 0 {
            self.op.layout().scatter(&x[size..], &mut potential.values);
        }
        let solution = CellSolution {
            potential,
            current: CurrentField { grid: grid.clone(), m: self.ctx.m(), values, mean_part: c.clone() },
            report: SolveReport { iterations: rep.iterations, residual: rep.residual, energy, degenerate: self.ctx.is_degenerate() },
        };
        Ok((c, solution))
    }
}

/// `b_sharp` from the joint problem over constants and periodic
/// fluctuations, through the value `2 (p, c) - a(c + J, c + J) / |X|`.
pub fn effective_tensor_natural_periodic(ctx: &FormContext, opts: &CgOptions) -> Result<EffectiveTensor> {
    ctx.require_definite()?;
    let grid = ctx.grid();
    require_boundary(grid, &[Boundary::Periodic], "the periodic natural tensor")?;
    let size = grid.dim() * ctx.m();
    let vol = grid.volume();
    let solver = ExtendedSolver::new(ctx, *opts)?;
    let solutions = (0..size).into_par_iter().map(|i| solver.solve(&basis_tensor(size, i))).collect::<Result<Vec<_>>>()?;
    let mat = polarize(size, |i, j| {
        let mut p = basis_tensor(size, i);
        let (c, current): (Vec<f64>, Vec<f64>) = match j {
            None => (solutions[i].0.clone(), solutions[i].1.current.values.clone()),
            Some(j) => {
                p[j] += 1.0;
                (
                    solutions[i].0.iter().zip(&solutions[j].0).map(|(a, b)| a + b).collect(),
                    solutions[i].1.current.values.iter().zip(&solutions[j].1.current.values).map(|(a, b)| a + b).collect(),
                )
            }
        };
        2.0 * dot(&p, &c) - ctx.energy(&current) / vol
    });
    let reports: Vec<CgReport> = solutions.iter().map(|s| CgReport { iterations: s.1.report.iterations, residual: s.1.report.residual }).collect();
    finish(TensorKind::BSharp, grid, ctx.m(), mat, &reports, !ctx.is_degenerate())
}

/// Largest problem the dense oracle accepts.
pub const DENSE_LIMIT: usize = 4096;

/// Brute force: the normal operator assembled column by column and
/// factorized, with its null space lifted by a rank-one shift per mode.
pub struct DenseOracle<'a> {
    ctx: &'a FormContext,
    op: NormalOperator<'a, FormContext>,
    matrix: DMatrix<f64>,
    factor: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

impl<'a> DenseOracle<'a> {
    pub fn new(ctx: &'a FormContext) -> Result<Self> {
        ctx.require_definite()?;
        require_boundary(ctx.grid(), &[Boundary::Periodic, Boundary::Dirichlet], "the dense oracle")?;
        let op = NormalOperator::new(ctx);
        let len = op.len();
        if len > DENSE_LIMIT {
            return Err(Error::TooLarge { dofs: len });
        }
        let columns: Vec<Vec<f64>> = (0..len)
            .into_par_iter()
            .map(|c| {
                let mut out = vec![0.0; len];
                op.apply(&basis_tensor(len, c), &mut out);
                out
            })
            .collect();
        let matrix = DMatrix::from_fn(len, len, |i, j| columns[j][i]);
        let factor = if len == 0 {
            None
        } else {
            let mut shifted = (&matrix + matrix.transpose()) * 0.5;
            let scale = (0..len).fold(0.0f64, |a, i| a.max(matrix[(i, i)]));
            for z in op.layout().null_space() {
                let zv = DVector::from_column_slice(z);
                shifted += &zv * zv.transpose() * scale;
            }
            Some(shifted.cholesky().ok_or_else(|| Error::SingularTensor("assembled normal operator is not positive definite".into()))?)
        };
        Ok(Self { ctx, op, matrix, factor })
    }

    /// The assembled normal operator.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn solve(&self, c: &[f64]) -> Result<CellSolution> {
        let grid = self.ctx.grid();
        let m = self.ctx.m();
        check_len("constant current", c.len(), grid.dim() * m)?;
        let background = CurrentField::constant(grid, m, c).values;
        let rhs: Vec<f64> = self.op.coupling(&background).iter().map(|v| -v).collect();
        let (mut x, residual) = match &self.factor {
            None => (Vec::new(), 0.0),
            Some(f) => {
                let b = DVector::from_column_slice(&rhs);
                let x = f.solve(&b);
                let r = &self.matrix * &x - &b;
                let bn = b.norm();
                (x.as_slice().to_vec(), if bn > 0.0 { r.norm() / bn } else { 0.0 })
            }
        };
        self.op.layout().project_out_null(&mut x);
        let mut potential = PotentialField::zeros(grid, m);
        if !x.is_empty() {
            self.op.layout().scatter(&x, &mut potential.values);
        }
        let mut values = self.op.lift(&x);
        values.iter_mut().zip(&background).for_each(|(a, b)| *a += b);
        let energy = self.ctx.energy(&values);
        Ok(CellSolution {
            potential,
            current: CurrentField { grid: grid.clone(), m, values, mean_part: c.to_vec() },
            report: SolveReport { iterations: 0, residual, energy, degenerate: self.ctx.is_degenerate() },
        })
    }

    pub fn tensor(&self) -> Result<EffectiveTensor> {
        let grid = self.ctx.grid();
        let size = grid.dim() * self.ctx.m();
        let kind = if grid.boundary().is_periodic() { TensorKind::ASharp } else { TensorKind::ADirichlet };
        let solutions = (0..size).map(|i| self.solve(&basis_tensor(size, i))).collect::<Result<Vec<_>>>()?;
        tensor_from_correctors(self.ctx, kind, &solutions)
    }
}

pub fn dense_oracle_tensor(ctx: &FormContext) -> Result<EffectiveTensor> {
    DenseOracle::new(ctx)?.tensor()
}

/// Velocity and thermodynamic gradient recovered from a current.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    /// `v = J u^T`, `D` node fields.
    pub velocity: Vec<f64>,
    /// `-grad psi`, laid out like a current (component `k * D + l`).
    pub neg_grad_psi: Vec<f64>,
    /// Relative distance of `-grad psi` from gradients plus constants.
    pub curl_residual: f64,
}

impl Reconstruction {
    pub fn mean_neg_grad_psi(&self, grid: &Grid) -> Vec<f64> {
        let n = grid.node_count();
        let wts = grid.weights();
        let vol: f64 = wts.iter().sum();
        self.neg_grad_psi.chunks(n).map(|c| c.iter().zip(&wts).map(|(a, w)| a * w).sum::<f64>() / vol).collect()
    }
}

/// `-grad psi = J w^T w + L(J u^T) u`, evaluated as the weighted gradient of
/// the form divided by the quadrature weights.
pub fn reconstruct_fields(ctx: &FormContext, j: &CurrentField) -> Result<Reconstruction> {
    let grid = ctx.grid();
    check_len("current", j.values.len(), ctx.current_len())?;
    if &j.grid != grid {
        return Err(Error::DimensionMismatch("current lives on a different grid".into()));
    }
    let n = grid.node_count();
    let wts = grid.weights();
    let velocity = ctx.velocity(&j.values);
    let mut g = vec![0.0; j.values.len()];
    ctx.apply(&j.values, &mut g);
    for chunk in g.chunks_mut(n) {
        chunk.iter_mut().zip(&wts).for_each(|(v, w)| *v /= w);
    }
    let curl_residual = gradient_distance(ctx.ops(), ctx.m(), &g);
    Ok(Reconstruction { velocity, neg_grad_psi: g, curl_residual })
}

/// `|g - grad phi - const| / |g|` minimized over `phi`, for each of the `m`
/// columns of a current-shaped field, by fast diagonalization of the
/// discrete Laplacian.
pub fn gradient_distance(ops: &Operators, m: usize, g: &[f64]) -> f64 {
    let grid = ops.grid();
    let d = grid.dim();
    let n = grid.node_count();
    let shape = grid.shape();
    let wts = grid.weights();
    let bases: Vec<(DMatrix<f64>, Vec<f64>)> = (0..d)
        .map(|a| {
            let nodes: Vec<usize> = (0..shape[a]).collect();
            axis_eigenbasis(&axis_derivative_matrix(grid, a), &axis_weights(grid, a), &nodes)
        })
        .collect();
    let mut num = 0.0;
    let mut den = 0.0;
    let mut tmp = vec![0.0; n];
    let mut flux = vec![0.0; n];
    for k in 0..m {
        let mut rhs = vec![0.0; n];
        for l in 0..d {
            let gl = &g[(k * d + l) * n..(k * d + l + 1) * n];
            flux.iter_mut().zip(gl).zip(&wts).for_each(|((f, v), w)| *f = v * w);
            ops.derivative_transpose(l, &flux, &mut tmp);
            rhs.iter_mut().zip(&tmp).for_each(|(r, t)| *r += t);
        }
        let x = DMatrix::from_row_slice(shape[0], shape[1], &rhs);
        let v0 = &bases[0].0;
        let mut hat = v0.tr_mul(&x);
        if d == 2 {
            hat *= &bases[1].0;
        }
        for i in 0..shape[0] {
            for jj in 0..shape[1] {
                let lam = bases[0].1[i] + if d == 2 { bases[1].1[jj] } else { 0.0 };
                hat[(i, jj)] = if lam > 0.0 { hat[(i, jj)] / lam } else { 0.0 };
            }
        }
        let mut phi = v0 * hat;
        if d == 2 {
            phi *= bases[1].0.transpose();
        }
        let phi: Vec<f64> = phi.transpose().as_slice().to_vec();
        for l in 0..d {
            let gl = &g[(k * d + l) * n..(k * d + l + 1) * n];
            ops.derivative(l, &phi, &mut tmp);
            let rem: Vec<f64> = gl.iter().zip(&tmp).map(|(a, b)| a - b).collect();
            let vol: f64 = wts.iter().sum();
            let mean = rem.iter().zip(&wts).map(|(r, w)| r * w).sum::<f64>() / vol;
            num += rem.iter().zip(&wts).map(|(r, w)| w * (r - mean) * (r - mean)).sum::<f64>();
            den += gl.iter().zip(&wts).map(|(a, w)| w * a * a).sum::<f64>();
        }
    }
    if den > 0.0 { (num / den).sqrt() } else { 0.0 }
}

/// Largest normalized `|<G a^T a + v b, grad phi>|` over the `m` columns and
/// smooth test functions `phi` with wave numbers up to `modes` (sines
/// vanishing on the boundary of bounded grids). This is the weak form of
/// the divergence-free transport equation written in terms of the
/// reconstructed fields.
pub fn weak_residual(ctx: &FormContext, rec: &Reconstruction, modes: usize) -> f64 {
    let grid = ctx.grid();
    let coeffs = ctx.coeffs();
    let (n, d, m) = (grid.node_count(), grid.dim(), ctx.m());
    let wts = grid.weights();
    // Recombined current, component k * D + l.
    let mut rebuilt = vec![0.0; d * m * n];
    for k in 0..m {
        for l in 0..d {
            let out = &mut rebuilt[(k * d + l) * n..(k * d + l + 1) * n];
            for i in 0..n {
                let mut s = rec.velocity[l * n + i] * coeffs.b(k)[i];
                for r in 0..m - 1 {
                    let ga: f64 = (0..m).map(|kp| rec.neg_grad_psi[(kp * d + l) * n + i] * coeffs.a(r, kp)[i]).sum();
                    s += ga * coeffs.a(r, k)[i];
                }
                out[i] = s;
            }
        }
    }
    let origin = grid.origin();
    let len = [grid.length(0), if d == 2 { grid.length(1) } else { 1.0 }];
    let mut tests: Vec<Vec<f64>> = Vec::new();
    let kmax = modes as i64;
    let k1_range: Vec<i64> = if d == 2 { (-kmax..=kmax).collect() } else { vec![0] };
    if grid.boundary().is_periodic() {
        for k0 in 0..=kmax {
            for &k1 in &k1_range {
                if k0 == 0 && k1 <= 0 {
                    continue;
                }
                for phase in [0.0, 0.5 * PI] {
                    tests.push(grid.sample(|x| {
                        let t = 2.0 * PI * (k0 as f64 * (x[0] - origin[0]) / len[0] + k1 as f64 * (x[1] - origin[1]) / len[1]);
                        (t + phase).sin()
                    }));
                }
            }
        }
    } else {
        let k1_top = if d == 2 { kmax } else { 1 };
        for k0 in 1..=kmax {
            for k1 in 1..=k1_top {
                tests.push(grid.sample(|x| {
                    let s0 = (PI * k0 as f64 * (x[0] - origin[0]) / len[0]).sin();
                    let s1 = if d == 2 { (PI * k1 as f64 * (x[1] - origin[1]) / len[1]).sin() } else { 1.0 };
                    s0 * s1
                }));
            }
        }
    }
    let norm = |f: &[f64]| f.iter().zip(&wts).map(|(v, w)| w * v * v).sum::<f64>();
    let ops = ctx.ops();
    let mut worst = 0.0f64;
    let mut grad = vec![vec![0.0; n]; d];
    for phi in &tests {
        for (l, gl) in grad.iter_mut().enumerate() {
            ops.derivative(l, phi, gl);
        }
        let gnorm: f64 = grad.iter().map(|g| norm(g)).sum::<f64>().sqrt();
        if gnorm == 0.0 {
            continue;
        }
        for k in 0..m {
            let mut s = 0.0;
            let mut jn = 0.0;
            for (l, gl) in grad.iter().enumerate() {
                let jc = &rebuilt[(k * d + l) * n..(k * d + l + 1) * n];
                s += jc.iter().zip(gl).zip(&wts).map(|((a, b), w)| w * a * b).sum::<f64>();
                jn += norm(jc);
            }
            if jn > 0.0 {
                worst = worst.max(s.abs() / (jn.sqrt() * gnorm));
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{dirac_preset, scalar_preset, DiracParams, SmallOscillationFamily};
    use crate::forms::random_potential;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn medium(n: usize, b: Boundary, amp: f64) -> FormContext {
        let g = Grid::square(2, n, 1.0, b).unwrap();
        let gamma = g.sample(|x| amp * ((2.0 * PI * x[0]).sin() + (2.0 * PI * x[1]).cos()));
        FormContext::new(dirac_preset(&g, &gamma, &DiracParams::default()).unwrap())
    }

    fn tight() -> CgOptions {
        CgOptions { tol: 1e-12, max_iter: Some(20_000) }
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn one_dimensional_cell_problem_is_trivial() {
        let g = Grid::square(1, 64, 1.0, Boundary::Periodic).unwrap();
        let gamma = g.sample(|x| (2.0 * PI * x[0]).sin());
        let ctx = FormContext::new(dirac_preset(&g, &gamma, &DiracParams::default()).unwrap());
        let sol = solve_cell_problem(&ctx, &[0.3, -1.0], &CgOptions::default()).unwrap();
        assert_eq!(sol.report.iterations, 0);
        assert!(sol.potential.values.is_empty());
        assert_eq!(sol.current.values, CurrentField::constant(&g, 2, &[0.3, -1.0]).values);
    }

    #[test]
    fn cg_matches_dense_oracle() {
        for b in [Boundary::Periodic, Boundary::Dirichlet] {
            let ctx = medium(6, b, 1.0);
            let oracle = DenseOracle::new(&ctx).unwrap();
            let k = oracle.matrix();
            assert!(max_diff(k.as_slice(), k.transpose().as_slice()) <= 1e-12 * k.amax());
            assert!(sorted_eigenvalues(k)[0] >= -1e-10 * k.amax());
            for i in 0..4 {
                let c = basis_tensor(4, i);
                let cg = solve_cell_problem(&ctx, &c, &tight()).unwrap();
                let dense = oracle.solve(&c).unwrap();
                let scale = dense.potential.values.iter().fold(1.0f64, |a, v| a.max(v.abs()));
                assert!(max_diff(&cg.potential.values, &dense.potential.values) < 1e-8 * scale, "{b:?} column {i}");
            }
            let t_cg = effective_tensor(&ctx, &tight()).unwrap();
            let t_dense = oracle.tensor().unwrap();
            assert!(max_diff(&t_cg.matrix, &t_dense.matrix) < 1e-9);
        }
    }

    #[test]
    fn galerkin_orthogonality_and_optimality() {
        let ctx = medium(16, Boundary::Periodic, 0.7);
        let c = [0.4, -0.2, 1.0, 0.5];
        let sol = solve_cell_problem(&ctx, &c, &tight()).unwrap();
        let op = NormalOperator::new(&ctx);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mj = {
            let mut out = vec![0.0; sol.current.values.len()];
            ctx.apply(&sol.current.values, &mut out);
            out
        };
        let scale = ctx.energy(&sol.current.values);
        for _ in 0..50 {
            let f = random_potential(ctx.grid(), 2, 3, &mut rng);
            let mut dofs = vec![0.0; op.len()];
            op.layout().gather(&f, &mut dofs);
            let dj = op.lift(&dofs);
            let djn = ctx.energy(&dj).sqrt();
            assert!(dot(&mj, &dj).abs() <= 1e-8 * djn * scale.sqrt());
            let t: f64 = rng.random_range(-0.1..0.1);
            let perturbed: Vec<f64> = sol.current.values.iter().zip(&dj).map(|(a, b)| a + t * b).collect();
            let l2: f64 = dj.iter().map(|v| v * v).sum::<f64>() * t * t;
            assert!(ctx.energy(&perturbed) >= sol.report.energy - 1e-9 * l2);
        }
    }

    #[test]
    fn corrector_is_linear_in_c() {
        let ctx = medium(16, Boundary::Dirichlet, 1.0);
        let c1 = [1.0, 0.0, -0.5, 0.25];
        let c2 = [0.0, 2.0, 0.5, 1.0];
        let (alpha, beta) = (0.7, -1.3);
        let mix: Vec<f64> = c1.iter().zip(&c2).map(|(a, b)| alpha * a + beta * b).collect();
        let s1 = solve_cell_problem(&ctx, &c1, &tight()).unwrap();
        let s2 = solve_cell_problem(&ctx, &c2, &tight()).unwrap();
        let s = solve_cell_problem(&ctx, &mix, &tight()).unwrap();
        let combo: Vec<f64> = s1.current.values.iter().zip(&s2.current.values).map(|(a, b)| alpha * a + beta * b).collect();
        let scale = s.current.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(max_diff(&combo, &s.current.values) < 1e-8 * scale);
    }

    #[test]
    fn energy_identity_and_definiteness() {
        let ctx = medium(16, Boundary::Periodic, 1.0);
        let t = effective_tensor(&ctx, &tight()).unwrap();
        assert_eq!(t.kind, TensorKind::ASharp);
        let a = t.to_matrix();
        assert!(max_diff(a.as_slice(), a.transpose().as_slice()) <= 1e-10 * a.amax());
        assert!(t.eigenvalues()[0] > 0.0);
        let c = [0.3, -0.7, 1.1, 0.2];
        let sol = solve_cell_problem(&ctx, &c, &tight()).unwrap();
        let lhs = t.quadratic(&c) * ctx.grid().volume();
        assert!((lhs - sol.report.energy).abs() < 1e-9 * sol.report.energy);
    }

    #[test]
    fn dirichlet_tensor_dominates_periodic() {
        let a_sharp = effective_tensor(&medium(16, Boundary::Periodic, 1.0), &CgOptions::default()).unwrap();
        let a_d = effective_tensor(&medium(16, Boundary::Dirichlet, 1.0), &CgOptions::default()).unwrap();
        let diff = a_d.to_matrix() - a_sharp.to_matrix();
        assert!(sorted_eigenvalues(&diff)[0] >= -1e-8);
    }

    #[test]
    fn one_dimensional_tensor_by_quadrature() {
        let g = Grid::square(1, 256, 1.0, Boundary::Periodic).unwrap();
        let gamma = g.sample(|x| (2.0 * PI * x[0]).sin());
        let p = DiracParams { eta: 1.0, ..DiracParams::default() };
        let ctx = FormContext::new(dirac_preset(&g, &gamma, &p).unwrap());
        let t = effective_tensor(&ctx, &CgOptions::default()).unwrap();
        // Independent quadrature: u' by a fourth-order periodic difference.
        let n = g.node_count();
        let h = g.spacing(0);
        let coeffs = ctx.coeffs();
        let du = |k: usize, i: usize| {
            let u = coeffs.u(k);
            let at = |o: i64| u[((i as i64 + o).rem_euclid(n as i64)) as usize];
            (8.0 * (at(1) - at(-1)) - (at(2) - at(-2))) / (12.0 * h)
        };
        for k in 0..2 {
            for kp in 0..2 {
                let q: f64 = (0..n).map(|i| du(k, i) * du(kp, i) + coeffs.w(0, k)[i] * coeffs.w(0, kp)[i]).sum::<f64>() / n as f64;
                let rel = (t.get(k, kp) - q).abs() / q.abs().max(1e-3);
                assert!(rel < 1e-5, "({k},{kp}): {} vs {q}", t.get(k, kp));
            }
        }
    }

    #[test]
    fn scalar_one_dimensional_tensor() {
        let g = Grid::square(1, 128, 1.0, Boundary::Periodic).unwrap();
        let nf = g.sample(|x| 1.5 + (2.0 * PI * x[0]).cos());
        let ctx = FormContext::new(scalar_preset(&g, &nf, 0.8, 0.2).unwrap());
        let t = effective_tensor(&ctx, &CgOptions::default()).unwrap();
        // u = 1/n, so u' = sin(2 pi x) 2 pi / n^2; nu = 1.
        let exact: f64 = (0..4096)
            .map(|i| {
                let x = (i as f64 + 0.5) / 4096.0;
                let nn = 1.5 + (2.0 * PI * x).cos();
                let du = 2.0 * PI * (2.0 * PI * x).sin() / (nn * nn);
                du * du
            })
            .sum::<f64>()
            / 4096.0;
        assert!((t.get(0, 0) - exact).abs() < 1e-8 * exact);
    }

    #[test]
    fn natural_problem_properties() {
        let ctx = medium(16, Boundary::Natural, 1.0);
        let zero = solve_natural(&ctx, &[0.0; 4], &CgOptions::default()).unwrap();
        assert_eq!(zero.report.energy, 0.0);
        let p = [0.5, -1.0, 0.25, 0.75];
        let sol = solve_natural(&ctx, &p, &tight()).unwrap();
        let e = sol.report.energy;
        let dual = -0.5 * e + load(ctx.grid(), &p, &sol.current.values);
        assert!((dual - 0.5 * e).abs() < 1e-9 * e);
        let b = effective_tensor_natural(&ctx, &tight()).unwrap();
        assert!(b.eigenvalues()[0] > 0.0);
        assert!((b.quadratic(&p) * ctx.grid().volume() - e).abs() < 1e-8 * e);
    }

    #[test]
    fn natural_periodic_inverts_cell_tensor() {
        let ctx = medium(16, Boundary::Periodic, 1.0);
        let a = effective_tensor(&ctx, &tight()).unwrap();
        let b = effective_tensor_natural_periodic(&ctx, &tight()).unwrap();
        let prod = a.to_matrix() * b.to_matrix();
        assert!((prod - DMatrix::identity(4, 4)).amax() < 1e-8);
        let (c, sol) = solve_natural_periodic(&ctx, &[0.0; 4], &tight()).unwrap();
        assert!(c.iter().all(|v| *v == 0.0) && sol.current.values.iter().all(|v| *v == 0.0));
        let p = [1.0, 0.5, -0.5, 0.2];
        let (c, sol) = solve_natural_periodic(&ctx, &p, &tight()).unwrap();
        assert!((b.quadratic(&p) - dot(&p, &c)).abs() < 1e-9 * dot(&p, &c).abs());
        assert!((sol.report.energy - ctx.grid().volume() * dot(&p, &c)).abs() < 1e-9 * sol.report.energy);
    }

    #[test]
    fn reconstruction_on_torus() {
        let ctx = medium(32, Boundary::Periodic, 1.0);
        let a = effective_tensor(&ctx, &tight()).unwrap();
        let zero = reconstruct_fields(&ctx, &CurrentField::constant(ctx.grid(), 2, &[0.0; 4])).unwrap();
        assert!(zero.velocity.iter().chain(&zero.neg_grad_psi).all(|v| *v == 0.0));
        for i in 0..4 {
            let c = basis_tensor(4, i);
            let sol = solve_cell_problem(&ctx, &c, &tight()).unwrap();
            let rec = reconstruct_fields(&ctx, &sol.current).unwrap();
            let mean = rec.mean_neg_grad_psi(ctx.grid());
            let target = a.apply(&c);
            let norm = target.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(max_diff(&mean, &target) < 1e-6 * norm);
            assert!(weak_residual(&ctx, &rec, 3) < 1e-6);
        }
    }

    #[test]
    fn gradients_have_no_curl_residual() {
        for b in [Boundary::Periodic, Boundary::Natural] {
            let g = Grid::square(2, 16, 1.0, b).unwrap();
            let ops = Operators::new(&g);
            let phi = g.sample(|x| (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1]).cos() + x[0] * x[1]);
            let mut field = vec![0.0; 2 * g.node_count()];
            let (g0, g1) = field.split_at_mut(g.node_count());
            ops.derivative(0, &phi, g0);
            ops.derivative(1, &phi, g1);
            g1.iter_mut().for_each(|v| *v += 0.3);
            assert!(gradient_distance(&ops, 1, &field) < 1e-10, "{b:?}");
            let rot = g.sample(|x| (2.0 * PI * x[1]).sin());
            let mut curl = vec![0.0; 2 * g.node_count()];
            curl[..g.node_count()].copy_from_slice(&rot);
            assert!(gradient_distance(&ops, 1, &curl) > 0.5, "{b:?}");
        }
    }

    #[test]
    fn natural_grid_rejected_by_cell_problem() {
        let ctx = medium(8, Boundary::Natural, 1.0);
        assert!(matches!(solve_cell_problem(&ctx, &[1.0, 0.0, 0.0, 0.0], &CgOptions::default()), Err(Error::InvalidInput(_))));
        let big = medium(48, Boundary::Periodic, 1.0);
        assert!(matches!(DenseOracle::new(&big), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn degenerate_limit_needs_override() {
        let g = Grid::square(2, 8, 1.0, Boundary::Periodic).unwrap();
        let fam = SmallOscillationFamily::standard(&g, 0.1);
        let ctx = FormContext::new(fam.at(&g, 0.0).unwrap());
        assert!(matches!(effective_tensor(&ctx, &CgOptions::default()), Err(Error::DegenerateForm(_))));
        let ctx = ctx.allow_seminorm(true);
        // c with c w0^T = 0 has zero energy: the constant current costs nothing.
        let w0 = fam.w0().unwrap();
        let c = [w0[1], 0.0, -w0[0], 0.0];
        let sol = solve_cell_problem(&ctx, &c, &CgOptions::default()).unwrap();
        assert!(sol.report.degenerate);
        assert!(sol.report.energy < 1e-20);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn ordering_chain_holds(amp in 0.2f64..1.2, phase in 0.0f64..1.0) {
            let n = 16;
            let make = |b| {
                let g = Grid::square(2, n, 1.0, b).unwrap();
                let gamma = g.sample(|x| amp * ((2.0 * PI * (x[0] + phase)).sin() + (2.0 * PI * x[1]).cos()));
                FormContext::new(dirac_preset(&g, &gamma, &DiracParams::default()).unwrap())
            };
            let opts = tight();
            let per = make(Boundary::Periodic);
            let a_sharp = effective_tensor(&per, &opts).unwrap().to_matrix();
            let a_d = effective_tensor(&make(Boundary::Dirichlet), &opts).unwrap().to_matrix();
            let b_sharp = effective_tensor_natural_periodic(&per, &opts).unwrap().inverse().unwrap();
            let b_nat = effective_tensor_natural(&make(Boundary::Natural), &opts).unwrap().inverse().unwrap();
            prop_assert!(sorted_eigenvalues(&(&a_d - &a_sharp))[0] >= -1e-7);
            prop_assert!((&a_sharp - &b_sharp).amax() < 1e-7 * a_sharp.amax());
            prop_assert!(sorted_eigenvalues(&(&b_sharp - &b_nat))[0] >= -1e-7);
        }
    }
}

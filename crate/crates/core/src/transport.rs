//! Physical read-out of an effective tensor for the two-current
//! (charge, heat) case: conductivity blocks, the thermal conductivity
//! measured at zero charge current, Lorenz ratio, Wiedemann-Franz
//! deviation, plus the Voigt bound, exact one-dimensional formula and the
//! eigenvalue split used by the small-oscillation studies.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::forms::{Form, FormContext};
use crate::grid::CurrentField;
use crate::solver::{sorted_eigenvalues, EffectiveTensor, TensorKind};

/// Blocks of `abar^{-1}` and the derived quantities, all `D x D` row-major.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransportSummary {
    pub dim: usize,
    pub sigma: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_tilde: Vec<f64>,
    pub kappa_tilde: Vec<f64>,
    /// `kappa_tilde - alpha_tilde sigma^{-1} alpha`.
    pub kappa: Vec<f64>,
    /// `kappa sigma^{-1}`.
    pub lorenz_matrix: Vec<f64>,
    /// Scalar Lorenz ratio in one dimension or when `kappa sigma^{-1}` is a multiple of the identity.
    pub lorenz: Option<f64>,
    pub t0: f64,
    /// Relative deviation of `kappa_tilde` from `(pi^2 T0 / 3) sigma`.
    pub wf_deviation: f64,
    /// Same with the measured `kappa`.
    pub wf_deviation_measured: f64,
}

fn check_two_currents(abar: &DMatrix<f64>, dim: usize) -> Result<()> {
    if !abar.is_square() || abar.nrows() != 2 * dim || !(dim == 1 || dim == 2) {
        return Err(Error::DimensionMismatch(format!(
            "expected a {0}x{0} tensor for two currents in {dim} dimensions, got {1}x{2}",
            2 * dim,
            abar.nrows(),
            abar.ncols()
        )));
    }
    Ok(())
}

fn block(m: &DMatrix<f64>, dim: usize, k: usize, kp: usize) -> DMatrix<f64> {
    m.view((k * dim, kp * dim), (dim, dim)).into_owned()
}

fn flat(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn invert(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone().try_inverse().ok_or_else(|| Error::SingularTensor(format!("{what} is singular")))
}

/// `(sigma, alpha, alpha_tilde, kappa_tilde)`, the blocks of `abar^{-1}`
/// partitioned by current index.
pub fn invert_to_conductivities(abar: &DMatrix<f64>, dim: usize) -> Result<[DMatrix<f64>; 4]> {
    check_two_currents(abar, dim)?;
    if sorted_eigenvalues(abar)[0] <= 0.0 {
        return Err(Error::SingularTensor("effective tensor is not positive definite".into()));
    }
    let inv = invert(abar, "effective tensor")?;
    Ok([block(&inv, dim, 0, 0), block(&inv, dim, 0, 1), block(&inv, dim, 1, 0), block(&inv, dim, 1, 1)])
}

/// Thermal conductivity at zero charge current.
pub fn measured_kappa(abar: &DMatrix<f64>, dim: usize) -> Result<DMatrix<f64>> {
    check_two_currents(abar, dim)?;
    if dim == 1 {
        let (a11, a12, a22) = (abar[(0, 0)], 0.5 * (abar[(0, 1)] + abar[(1, 0)]), abar[(1, 1)]);
        let det = a11 * a22 - a12 * a12;
        if a22 == 0.0 || det == 0.0 {
            return Err(Error::SingularTensor(format!("det = {det:e}, a22 = {a22:e}")));
        }
        return Ok(DMatrix::from_element(1, 1, (a11 - a12 * a12 / a22) / det));
    }
    let [sigma, alpha, alpha_tilde, kappa_tilde] = invert_to_conductivities(abar, dim)?;
    Ok(kappa_tilde - alpha_tilde * invert(&sigma, "sigma")? * alpha)
}

/// `det(abar) / abar_22^2` in one dimension.
pub fn lorenz_ratio(abar: &DMatrix<f64>, dim: usize) -> Result<f64> {
    check_two_currents(abar, dim)?;
    if dim != 1 {
        return Err(Error::InvalidInput("the scalar Lorenz ratio is defined for D = 1; use the Lorenz matrix".into()));
    }
    let a22 = abar[(1, 1)];
    let det = abar[(0, 0)] * a22 - abar[(0, 1)] * abar[(1, 0)];
    if a22 == 0.0 || !(det > 0.0) {
        return Err(Error::SingularTensor(format!("det = {det:e}, a22 = {a22:e}")));
    }
    Ok(det / (a22 * a22))
}

/// `|kappa_tilde - (pi^2 T0 / 3) sigma| / |kappa_tilde|` in the Frobenius norm.
pub fn wf_deviation(sigma: &DMatrix<f64>, kappa_tilde: &DMatrix<f64>, t0: f64) -> f64 {
    let diff = kappa_tilde - sigma * (PI * PI * t0 / 3.0);
    let norm = kappa_tilde.norm();
    if norm == 0.0 { diff.norm() } else { diff.norm() / norm }
}

pub fn transport_summary(abar: &DMatrix<f64>, dim: usize, t0: f64) -> Result<TransportSummary> {
    let [sigma, alpha, alpha_tilde, kappa_tilde] = invert_to_conductivities(abar, dim)?;
    let kappa = measured_kappa(abar, dim)?;
    let lorenz_matrix = &kappa * invert(&sigma, "sigma")?;
    let lorenz = if dim == 1 {
        Some(lorenz_ratio(abar, dim)?)
    } else {
        let s = lorenz_matrix.trace() / dim as f64;
        let iso = (&lorenz_matrix - DMatrix::identity(dim, dim) * s).amax() <= 1e-8 * s.abs();
        iso.then_some(s)
    };
    Ok(TransportSummary {
        dim,
        wf_deviation: wf_deviation(&sigma, &kappa_tilde, t0),
        wf_deviation_measured: wf_deviation(&sigma, &kappa, t0),
        sigma: flat(&sigma),
        alpha: flat(&alpha),
        alpha_tilde: flat(&alpha_tilde),
        kappa_tilde: flat(&kappa_tilde),
        kappa: flat(&kappa),
        lorenz_matrix: flat(&lorenz_matrix),
        lorenz,
        t0,
    })
}

/// Energy per unit volume of the constant trial current `J = c`; only `u`
/// is differentiated.
pub fn voigt_bound(ctx: &FormContext, c: &[f64]) -> Result<f64> {
    let grid = ctx.grid();
    crate::grid::check_len("constant current", c.len(), grid.dim() * ctx.m())?;
    Ok(ctx.energy(&CurrentField::constant(grid, ctx.m(), c).values) / grid.volume())
}

/// Voigt matrix: the quadratic form of [`voigt_bound`].
pub fn voigt_tensor(ctx: &FormContext) -> Result<DMatrix<f64>> {
    let size = ctx.grid().dim() * ctx.m();
    let mut diag = vec![0.0; size];
    for (i, d) in diag.iter_mut().enumerate() {
        *d = voigt_bound(ctx, &crate::solver::basis_tensor(size, i))?;
    }
    let mut out = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag.clone()));
    for i in 0..size {
        for j in i + 1..size {
            let mut c = crate::solver::basis_tensor(size, i);
            c[j] = 1.0;
            let v = 0.5 * (voigt_bound(ctx, &c)? - diag[i] - diag[j]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// `abar = <nu (u')^T u' + w^T w>` with `nu = eta + zeta`, by quadrature on
/// a one-dimensional grid.
pub fn exact_1d_tensor(ctx: &FormContext) -> Result<EffectiveTensor> {
    let grid = ctx.grid();
    if grid.dim() != 1 {
        return Err(Error::InvalidInput("the closed-form tensor needs a one-dimensional grid".into()));
    }
    ctx.require_definite()?;
    let coeffs = ctx.coeffs();
    let m = ctx.m();
    let n = grid.node_count();
    let wts = grid.weights();
    let vol: f64 = wts.iter().sum();
    let s = ctx.viscous_scale();
    let du: Vec<Vec<f64>> = (0..m)
        .map(|k| {
            let mut d = vec![0.0; n];
            ctx.ops().derivative(0, coeffs.u(k), &mut d);
            d
        })
        .collect();
    let nu: Vec<f64> = coeffs.eta(0, 0).iter().zip(coeffs.zeta()).map(|(e, z)| e + z).collect();
    let mut matrix = vec![0.0; m * m];
    for k in 0..m {
        for kp in 0..m {
            let q: f64 = (0..n)
                .map(|i| {
                    let ww: f64 = (0..m - 1).map(|r| coeffs.w(r, k)[i] * coeffs.w(r, kp)[i]).sum();
                    wts[i] * (s * nu[i] * du[k][i] * du[kp][i] + ww)
                })
                .sum();
            matrix[k * m + kp] = q / vol;
        }
    }
    let kind = if grid.boundary().is_periodic() { TensorKind::ASharp } else { TensorKind::ADirichlet };
    Ok(EffectiveTensor { kind, grid: grid.clone(), m, matrix, residuals: vec![0.0; m], iterations: vec![0; m] })
}

/// Matrix of `c -> |c w0^T|^2` for a constant `(m-1) x m` dual matrix `w0`.
pub fn constant_dual_form(w0: &[f64], dim: usize, m: usize) -> DMatrix<f64> {
    let size = dim * m;
    let mut out = DMatrix::zeros(size, size);
    for k in 0..m {
        for kp in 0..m {
            let v: f64 = (0..m - 1).map(|r| w0[r * m + k] * w0[r * m + kp]).sum();
            for l in 0..dim {
                out[(k * dim + l, kp * dim + l)] = v;
            }
        }
    }
    out
}

/// Eigenvalues of a form restricted to `{c : c w0^T = 0}` and to its
/// orthogonal complement.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EigenSplit {
    /// Complement, `D (m - 1)` values, ascending.
    pub large: Vec<f64>,
    /// Kernel of `c -> c w0^T`, `D` values, ascending.
    pub small: Vec<f64>,
}

pub fn small_oscillation_eigen_split(abar: &DMatrix<f64>, w0: &[f64], dim: usize, m: usize) -> Result<EigenSplit> {
    let size = dim * m;
    if abar.nrows() != size || abar.ncols() != size || w0.len() != (m - 1) * m {
        return Err(Error::DimensionMismatch("tensor and dual matrix do not match".into()));
    }
    // Rows of the constraint c -> c w0^T, one per (direction, dual row).
    let mut constraint = DMatrix::zeros(dim * (m - 1), size);
    for l in 0..dim {
        for r in 0..m - 1 {
            for k in 0..m {
                constraint[(l * (m - 1) + r, k * dim + l)] = w0[r * m + k];
            }
        }
    }
    let eig = (constraint.transpose() * &constraint).symmetric_eigen();
    let top = eig.eigenvalues.amax();
    let mut kernel = Vec::new();
    let mut range = Vec::new();
    for (i, v) in eig.eigenvalues.iter().enumerate() {
        let col = eig.eigenvectors.column(i).into_owned();
        if *v <= 1e-12 * top { kernel.push(col) } else { range.push(col) }
    }
    if kernel.len() != dim {
        return Err(Error::InvalidInput(format!("dual matrix has a {}-dimensional kernel, expected {dim}", kernel.len())));
    }
    let restrict = |basis: &[nalgebra::DVector<f64>]| -> Vec<f64> {
        if basis.is_empty() {
            return Vec::new();
        }
        let q = DMatrix::from_columns(basis);
        sorted_eigenvalues(&(q.transpose() * abar * &q))
    };
    Ok(EigenSplit { large: restrict(&range), small: restrict(&kernel) })
}

//! Coefficient fields `a, b, eta, zeta`, their dual bases `(u, w)`,
//! physical presets and the oscillation measure.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{check_len, Grid, Operators};

/// Largest accepted condition number of the stacked `(a; b)` matrix.
pub const DEFAULT_CONDITION_CAP: f64 = 1e12;

/// Polynomial `sum_k coeffs[k] t^k`, used for the thermodynamic maps `n(gamma)`, `s(gamma)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polynomial(pub Vec<f64>);

impl Polynomial {
    pub fn eval(&self, t: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, c| acc * t + c)
    }
}

/// All pointwise coefficients of the hydrodynamic form on one grid.
///
/// Matrix fields are stored component-major: entry `(r, k)` of `a` at node
/// `i` is `a[(r * m + k) * nodes + i]`; `eta` entry `(l, l')` sits at
/// component `l * D + l'`; `grad_b` entry `(j, l)` (derivative of `b_j`
/// along axis `l`) at component `j * D + l`.
#[derive(Clone, Debug)]
pub struct CoefficientSet {
    grid: Grid,
    m: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    grad_b: Vec<f64>,
    eta: Vec<f64>,
    zeta: Vec<f64>,
    u: Vec<f64>,
    w: Vec<f64>,
    max_condition: f64,
}

impl CoefficientSet {
    /// Build from raw fields, computing the dual basis and `grad b`.
    ///
    /// `a` holds `(m-1) m` node fields, `b` holds `m`, `eta` holds `D^2`
    /// (a symmetric matrix per node) and `zeta` one.
    pub fn new(grid: &Grid, m: usize, a: Vec<f64>, b: Vec<f64>, eta: Vec<f64>, zeta: Vec<f64>, condition_cap: f64) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidInput("number of currents m must be at least 1".into()));
        }
        let n = grid.node_count();
        let d = grid.dim();
        check_len("a", a.len(), (m - 1) * m * n)?;
        check_len("b", b.len(), m * n)?;
        check_len("eta", eta.len(), d * d * n)?;
        check_len("zeta", zeta.len(), n)?;
        if let Some(bad) = a.iter().chain(&b).chain(&eta).chain(&zeta).position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite coefficient value at flat index {bad}")));
        }
        for i in 0..n {
            let min_eig = if d == 1 {
                eta[i]
            } else {
                let (p, q, r) = (eta[i], eta[n + i], eta[3 * n + i]);
                if (q - eta[2 * n + i]).abs() > 1e-12 * (1.0 + q.abs()) {
                    return Err(Error::InvalidInput(format!("eta is not symmetric at node {i}")));
                }
                0.5 * (p + r) - (0.25 * (p - r).powi(2) + q * q).sqrt()
            };
            if min_eig <= 0.0 {
                return Err(Error::InvalidInput(format!("eta is not positive definite at node {i}")));
            }
            if zeta[i] < 0.0 {
                return Err(Error::InvalidInput(format!("zeta is negative at node {i}")));
            }
        }
        let (u, w, max_condition) = build_dual_basis(n, m, &a, &b, condition_cap)?;
        let ops = Operators::new(grid);
        let mut grad_b = vec![0.0; d * m * n];
        for j in 0..m {
            let g = ops.gradient(&b[j * n..(j + 1) * n])?;
            grad_b[j * d * n..(j + 1) * d * n].copy_from_slice(&g);
        }
        Ok(Self { grid: grid.clone(), m, a, b, grad_b, eta, zeta, u, w, max_condition })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn a(&self, r: usize, k: usize) -> &[f64] {
        self.comp(&self.a, r * self.m + k)
    }

    pub fn b(&self, k: usize) -> &[f64] {
        self.comp(&self.b, k)
    }

    pub fn u(&self, k: usize) -> &[f64] {
        self.comp(&self.u, k)
    }

    pub fn w(&self, r: usize, k: usize) -> &[f64] {
        self.comp(&self.w, r * self.m + k)
    }

    pub fn grad_b(&self, j: usize, axis: usize) -> &[f64] {
        self.comp(&self.grad_b, j * self.grid.dim() + axis)
    }

    pub fn eta(&self, l: usize, lp: usize) -> &[f64] {
        self.comp(&self.eta, l * self.grid.dim() + lp)
    }

    pub fn zeta(&self) -> &[f64] {
        &self.zeta
    }

    /// Largest condition number of the stacked `(a; b)` matrix over the grid.
    pub fn max_condition(&self) -> f64 {
        self.max_condition
    }

    fn comp<'s>(&self, v: &'s [f64], c: usize) -> &'s [f64] {
        let n = self.grid.node_count();
        &v[c * n..(c + 1) * n]
    }

    /// Weighted mean of `tr(eta) / D`.
    pub fn mean_eta_iso(&self) -> f64 {
        let d = self.grid.dim();
        let trace: Vec<f64> = (0..self.grid.node_count())
            .map(|i| (0..d).map(|l| self.eta(l, l)[i]).sum::<f64>() / d as f64)
            .collect();
        weighted_mean(&self.grid, &trace)
    }

    /// Weighted mean of `w^T w`, an `m x m` row-major matrix.
    pub fn mean_wtw(&self) -> Vec<f64> {
        let m = self.m;
        let mut out = vec![0.0; m * m];
        let n = self.grid.node_count();
        let wts = self.grid.weights();
        let vol: f64 = wts.iter().sum();
        for k in 0..m {
            for kp in 0..m {
                let mut acc = 0.0;
                for i in 0..n {
                    let mut s = 0.0;
                    for r in 0..m - 1 {
                        s += self.w(r, k)[i] * self.w(r, kp)[i];
                    }
                    acc += wts[i] * s;
                }
                out[k * m + kp] = acc / vol;
            }
        }
        out
    }

    /// Max over nodes of the residuals of `w a^T = I`, `w b^T = 0`,
    /// `u a^T = 0`, `u b^T = 1` and `a^T w + b^T u = I`, each scaled by the
    /// local size of the operands.
    pub fn dual_residual(&self) -> f64 {
        let m = self.m;
        let mut worst = 0.0f64;
        for i in 0..self.grid.node_count() {
            let a = |r: usize, k: usize| self.a(r, k)[i];
            let w = |r: usize, k: usize| self.w(r, k)[i];
            let b = |k: usize| self.b(k)[i];
            let u = |k: usize| self.u(k)[i];
            let scale = {
                let na: f64 = (0..m).map(|k| b(k).powi(2) + (0..m - 1).map(|r| a(r, k).powi(2)).sum::<f64>()).sum();
                let nw: f64 = (0..m).map(|k| u(k).powi(2) + (0..m - 1).map(|r| w(r, k).powi(2)).sum::<f64>()).sum();
                (na * nw).sqrt().max(1.0)
            };
            for r in 0..m - 1 {
                for rp in 0..m - 1 {
                    let s: f64 = (0..m).map(|k| w(r, k) * a(rp, k)).sum();
                    worst = worst.max((s - if r == rp { 1.0 } else { 0.0 }).abs() / scale);
                }
                let s: f64 = (0..m).map(|k| w(r, k) * b(k)).sum();
                worst = worst.max(s.abs() / scale);
                let s: f64 = (0..m).map(|k| u(k) * a(r, k)).sum();
                worst = worst.max(s.abs() / scale);
            }
            let s: f64 = (0..m).map(|k| u(k) * b(k)).sum();
            worst = worst.max((s - 1.0).abs() / scale);
            for k in 0..m {
                for kp in 0..m {
                    let s: f64 = (0..m - 1).map(|r| a(r, k) * w(r, kp)).sum::<f64>() + b(k) * u(kp);
                    worst = worst.max((s - if k == kp { 1.0 } else { 0.0 }).abs() / scale);
                }
            }
        }
        worst
    }

    /// Oscillation measure with `theta_samples` uniform directions (D = 2).
    pub fn oscillation(&self, theta_samples: usize) -> OscillationReport {
        oscillation(self, theta_samples)
    }
}

/// Pointwise dual basis from the stacked matrix `(a; b)`.
///
/// Returns `(u, w, max condition number)` in the same component-major layout.
pub fn build_dual_basis(nodes: usize, m: usize, a: &[f64], b: &[f64], condition_cap: f64) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let mut u = vec![0.0; m * nodes];
    let mut w = vec![0.0; (m - 1) * m * nodes];
    let mut max_cond = 0.0f64;
    for i in 0..nodes {
        let stacked = DMatrix::from_fn(m, m, |r, k| if r + 1 < m { a[(r * m + k) * nodes + i] } else { b[k * nodes + i] });
        let sv = stacked.singular_values();
        let smax = sv.max();
        let smin = sv.min();
        let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if !(cond <= condition_cap) {
            return Err(Error::SingularBasis { point: i, condition: cond });
        }
        max_cond = max_cond.max(cond);
        let inv = stacked.try_inverse().ok_or(Error::SingularBasis { point: i, condition: cond })?;
        for k in 0..m {
            for r in 0..m - 1 {
                w[(r * m + k) * nodes + i] = inv[(k, r)];
            }
            u[k * nodes + i] = inv[(k, m - 1)];
        }
    }
    Ok((u, w, max_cond))
}

fn weighted_mean(grid: &Grid, f: &[f64]) -> f64 {
    let w = grid.weights();
    let vol: f64 = w.iter().sum();
    f.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / vol
}

fn scalar_eta(grid: &Grid, eta: f64) -> Vec<f64> {
    let n = grid.node_count();
    let d = grid.dim();
    let mut out = vec![0.0; d * d * n];
    for l in 0..d {
        out[(l * d + l) * n..(l * d + l + 1) * n].iter_mut().for_each(|v| *v = eta);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiracParams {
    pub sigma_q: f64,
    pub n_of_gamma: Polynomial,
    pub s_of_gamma: Polynomial,
    pub eta: f64,
    pub zeta: f64,
    /// Lower bound required of `gamma n + s`.
    pub c0: f64,
}

impl Default for DiracParams {
    fn default() -> Self {
        Self {
            sigma_q: 1.0,
            n_of_gamma: Polynomial(vec![0.0, 1.0]),
            s_of_gamma: Polynomial(vec![1.0]),
            eta: 0.1,
            zeta: 0.0,
            c0: 1e-6,
        }
    }
}

/// Dirac fluid: `a = sigma_Q^{1/2} (-1, gamma)`, `b = (n, s)`.
pub fn dirac_preset(grid: &Grid, gamma: &[f64], p: &DiracParams) -> Result<CoefficientSet> {
    let n = grid.node_count();
    check_len("gamma", gamma.len(), n)?;
    if !(p.sigma_q > 0.0) {
        return Err(Error::InvalidInput(format!("sigma_Q must be positive, got {}", p.sigma_q)));
    }
    let nn: Vec<f64> = gamma.iter().map(|&g| p.n_of_gamma.eval(g)).collect();
    let ss: Vec<f64> = gamma.iter().map(|&g| p.s_of_gamma.eval(g)).collect();
    let min = gamma.iter().zip(nn.iter().zip(&ss)).map(|(g, (n, s))| g * n + s).fold(f64::INFINITY, f64::min);
    if !(min >= p.c0) {
        return Err(Error::DegenerateThermodynamics { min });
    }
    let sq = p.sigma_q.sqrt();
    let mut a = vec![-sq; n];
    a.extend(gamma.iter().map(|g| sq * g));
    let mut b = nn;
    b.extend(ss);
    CoefficientSet::new(grid, 2, a, b, scalar_eta(grid, p.eta), vec![p.zeta; n], DEFAULT_CONDITION_CAP)
}

/// Galilean-invariant fluid: `a = kappa_Q^{1/2} (0, 1)`, `b = (n, s)`.
pub fn galilean_preset(grid: &Grid, kappa_q: f64, n_field: &[f64], s_field: &[f64], eta: f64, zeta: f64) -> Result<CoefficientSet> {
    let n = grid.node_count();
    check_len("n", n_field.len(), n)?;
    check_len("s", s_field.len(), n)?;
    if !(kappa_q > 0.0) {
        return Err(Error::InvalidInput(format!("kappa_Q must be positive, got {kappa_q}")));
    }
    let mut a = vec![0.0; n];
    a.extend(std::iter::repeat_n(kappa_q.sqrt(), n));
    let mut b = n_field.to_vec();
    b.extend_from_slice(s_field);
    CoefficientSet::new(grid, 2, a, b, scalar_eta(grid, eta), vec![zeta; n], DEFAULT_CONDITION_CAP)
}

/// Smallest admissible `|n|` for the scalar preset.
pub const SCALAR_N_FLOOR: f64 = 1e-8;

/// Single current (`m = 1`): `a` empty, `b = (n)`, `u = 1/n`.
///
/// Fails if `n` changes sign on the grid or comes closer to zero than
/// [`SCALAR_N_FLOOR`].
pub fn scalar_preset(grid: &Grid, n_field: &[f64], eta: f64, zeta: f64) -> Result<CoefficientSet> {
    let n = grid.node_count();
    check_len("n", n_field.len(), n)?;
    let min_abs = n_field.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    let mixed = n_field.iter().any(|v| *v > 0.0) && n_field.iter().any(|v| *v < 0.0);
    if mixed || !(min_abs >= SCALAR_N_FLOOR) {
        return Err(Error::DegenerateThermodynamics { min: if mixed { 0.0 } else { min_abs } });
    }
    CoefficientSet::new(grid, 1, Vec::new(), n_field.to_vec(), scalar_eta(grid, eta), vec![zeta; n], DEFAULT_CONDITION_CAP)
}

/// Constant parts and node-sampled perturbations of `a = a0 + lambda a1`,
/// `b = b0 + lambda b1`.
#[derive(Clone, Debug)]
pub struct SmallOscillationFamily {
    pub m: usize,
    /// `(m-1) x m`, row-major.
    pub a0: Vec<f64>,
    pub b0: Vec<f64>,
    /// Component-major node fields, same layout as [`CoefficientSet`].
    pub a1: Vec<f64>,
    pub b1: Vec<f64>,
    pub eta: f64,
    pub zeta: f64,
}

impl SmallOscillationFamily {
    /// Two-current family on a 2-D torus used by the scaling studies:
    /// `a0 = (-1, 0)`, `b0 = (0, 1)`, `b1 = (sin 2 pi x1, sin 2 pi x2)`,
    /// `a1 = (0, sin 2 pi x1 + sin 2 pi x2)`.
    pub fn standard(grid: &Grid, eta: f64) -> Self {
        let n = grid.node_count();
        let s1 = grid.sample(|x| (2.0 * PI * x[0] / grid.length(0)).sin());
        let s2 = if grid.dim() == 2 { grid.sample(|x| (2.0 * PI * x[1] / grid.length(1)).sin()) } else { vec![0.0; n] };
        let mut a1 = vec![0.0; n];
        a1.extend(s1.iter().zip(&s2).map(|(p, q)| p + q));
        let mut b1 = s1;
        b1.extend(s2);
        Self { m: 2, a0: vec![-1.0, 0.0], b0: vec![0.0, 1.0], a1, b1, eta, zeta: 0.0 }
    }

    /// Dual basis `w0` of the unperturbed constants, `(m-1) x m` row-major.
    pub fn w0(&self) -> Result<Vec<f64>> {
        let (_, w, _) = build_dual_basis(1, self.m, &self.a0, &self.b0, DEFAULT_CONDITION_CAP)?;
        Ok(w)
    }

    pub fn at(&self, grid: &Grid, lambda: f64) -> Result<CoefficientSet> {
        small_oscillation_family(grid, self, lambda)
    }
}

pub fn small_oscillation_family(grid: &Grid, fam: &SmallOscillationFamily, lambda: f64) -> Result<CoefficientSet> {
    let n = grid.node_count();
    let m = fam.m;
    check_len("a0", fam.a0.len(), (m - 1) * m)?;
    check_len("b0", fam.b0.len(), m)?;
    check_len("a1", fam.a1.len(), (m - 1) * m * n)?;
    check_len("b1", fam.b1.len(), m * n)?;
    if !(lambda >= 0.0) {
        return Err(Error::InvalidInput(format!("lambda must be nonnegative, got {lambda}")));
    }
    let a: Vec<f64> = (0..(m - 1) * m * n).map(|t| fam.a0[t / n] + lambda * fam.a1[t]).collect();
    let b: Vec<f64> = (0..m * n).map(|t| fam.b0[t / n] + lambda * fam.b1[t]).collect();
    CoefficientSet::new(grid, m, a, b, scalar_eta(grid, fam.eta), vec![fam.zeta; n], DEFAULT_CONDITION_CAP)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OscillationReport {
    pub value: f64,
    /// Minimizing direction.
    pub theta: Vec<f64>,
    /// `mean((theta . grad b_j)^2)` for every component at the minimizer.
    pub per_component: Vec<f64>,
    /// Set when the value is negligible relative to the size of `b`.
    pub degenerate: bool,
}

/// Relative size below which the oscillation counts as zero.
pub const DEGENERACY_THRESHOLD: f64 = 1e-10;

pub fn oscillation(coeffs: &CoefficientSet, theta_samples: usize) -> OscillationReport {
    let grid = coeffs.grid();
    let d = grid.dim();
    let m = coeffs.m();
    // Second-moment matrices G_j = mean(grad b_j grad b_j^T).
    let gram: Vec<[f64; 4]> = (0..m)
        .map(|j| {
            let mut g = [0.0; 4];
            for l in 0..d {
                for lp in 0..d {
                    let prod: Vec<f64> = coeffs.grad_b(j, l).iter().zip(coeffs.grad_b(j, lp)).map(|(p, q)| p * q).collect();
                    g[l * 2 + lp] = weighted_mean(grid, &prod);
                }
            }
            g
        })
        .collect();
    let directions: Vec<[f64; 2]> = if d == 1 {
        vec![[1.0, 0.0], [-1.0, 0.0]]
    } else {
        let k = theta_samples.max(4);
        (0..k).map(|t| {
            let phi = 2.0 * PI * t as f64 / k as f64;
            [phi.cos(), phi.sin()]
        })
        .collect()
    };
    let quad = |g: &[f64; 4], th: &[f64; 2]| g[0] * th[0] * th[0] + 2.0 * g[1] * th[0] * th[1] + g[3] * th[1] * th[1];
    let mut best = f64::INFINITY;
    let mut best_theta = directions[0];
    for th in &directions {
        let v = gram.iter().map(|g| quad(g, th)).fold(0.0, f64::max);
        if v < best {
            best = v;
            best_theta = *th;
        }
    }
    let per_component: Vec<f64> = gram.iter().map(|g| quad(g, &best_theta)).collect();
    let b_size: f64 = (0..m)
        .map(|j| {
            let sq: Vec<f64> = coeffs.b(j).iter().map(|v| v * v).collect();
            weighted_mean(grid, &sq)
        })
        .sum::<f64>()
        .max(f64::MIN_POSITIVE);
    let scale = b_size / grid.length(0).powi(2);
    OscillationReport {
        value: best,
        theta: best_theta[..d].to_vec(),
        per_component,
        degenerate: best <= DEGENERACY_THRESHOLD * scale,
    }
}

/// Smooth stationary random field: i.i.d. uniform values on unit cells,
/// blended by a normalized `cos^2` bump reaching `0.5 + smoothing_radius`
/// from each cell centre.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomFieldParams {
    pub seed: u64,
    pub cells_per_axis: usize,
    pub smoothing_radius: f64,
    pub amplitude: f64,
    #[serde(default)]
    pub mean: f64,
}

impl RandomFieldParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.smoothing_radius > 0.0 && self.smoothing_radius <= 1.0) {
            return Err(Error::InvalidInput(format!("smoothing radius {} outside (0, 1]", self.smoothing_radius)));
        }
        if self.cells_per_axis < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 cells per axis, got {}", self.cells_per_axis)));
        }
        if !self.amplitude.is_finite() || !self.mean.is_finite() {
            return Err(Error::InvalidInput("random field amplitude and mean must be finite".into()));
        }
        Ok(())
    }

    /// Uniform value on `[-1, 1)` attached to the integer cell `cell`.
    pub fn cell_value(&self, cell: [i64; 2]) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let stream = ((cell[0] as u32 as u64) << 32) | cell[1] as u32 as u64;
        rng.set_stream(stream);
        rng.random_range(-1.0..1.0)
    }

    fn bump(&self, t: f64) -> f64 {
        let r = 0.5 + self.smoothing_radius;
        if t.abs() >= r {
            0.0
        } else {
            (0.5 * PI * t / r).cos().powi(2)
        }
    }

    /// Field value at an arbitrary point (the second coordinate is ignored in 1-D).
    pub fn eval(&self, x: [f64; 2], dim: usize) -> f64 {
        if self.amplitude == 0.0 {
            return self.mean;
        }
        let reach = 2i64;
        let base = [x[0].floor() as i64, if dim == 2 { x[1].floor() as i64 } else { 0 }];
        let range1 = if dim == 2 { -reach..=reach } else { 0..=0 };
        let mut num = 0.0;
        let mut den = 0.0;
        for d0 in -reach..=reach {
            for d1 in range1.clone() {
                let c = [base[0] + d0, base[1] + d1];
                let mut phi = self.bump(x[0] - (c[0] as f64 + 0.5));
                if dim == 2 {
                    phi *= self.bump(x[1] - (c[1] as f64 + 0.5));
                }
                if phi > 0.0 {
                    num += phi * self.cell_value(c);
                    den += phi;
                }
            }
        }
        self.mean + self.amplitude * num / den
    }
}

pub fn random_stationary_field(grid: &Grid, params: &RandomFieldParams) -> Result<Vec<f64>> {
    params.validate()?;
    Ok(grid.sample(|x| params.eval(x, grid.dim())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Boundary;
    use proptest::prelude::*;

    fn torus(n: usize) -> Grid {
        Grid::square(2, n, 1.0, Boundary::Periodic).unwrap()
    }

    #[test]
    fn dual_basis_at_dirac_point() {
        let (u, w, _) = build_dual_basis(1, 2, &[-1.0, 0.0], &[0.0, 1.0], 1e12).unwrap();
        assert_eq!(u, vec![0.0, 1.0]);
        assert_eq!(w, vec![-1.0, 0.0]);
        let (u, w, _) = build_dual_basis(1, 2, &[1.0, 0.0], &[0.0, 1.0], 1e12).unwrap();
        assert_eq!(u, vec![0.0, 1.0]);
        assert_eq!(w, vec![1.0, 0.0]);
    }

    #[test]
    fn singular_basis_reported() {
        let err = build_dual_basis(1, 2, &[1.0, 1.0], &[2.0, 2.0], 1e12).unwrap_err();
        assert!(matches!(err, Error::SingularBasis { point: 0, .. }));
    }

    proptest! {
        #[test]
        fn dual_basis_random_two_by_two(p in -2.0f64..2.0, q in -2.0f64..2.0, r in -2.0f64..2.0, s in -2.0f64..2.0) {
            let det = p * s - q * r;
            prop_assume!(det.abs() > 0.05);
            let (u, w, _) = build_dual_basis(1, 2, &[p, q], &[r, s], 1e12).unwrap();
            // Direct inverse of [[p, q], [r, s]]: columns give (w, u).
            let inv = [[s / det, -q / det], [-r / det, p / det]];
            prop_assert!((w[0] - inv[0][0]).abs() < 1e-12 * (1.0 + inv[0][0].abs()));
            prop_assert!((w[1] - inv[1][0]).abs() < 1e-12 * (1.0 + inv[1][0].abs()));
            prop_assert!((u[0] - inv[0][1]).abs() < 1e-12 * (1.0 + inv[0][1].abs()));
            prop_assert!((u[1] - inv[1][1]).abs() < 1e-12 * (1.0 + inv[1][1].abs()));
        }

        #[test]
        fn dirac_preset_matches_closed_form(amp in 0.0f64..3.0, sq in 0.2f64..4.0) {
            let g = torus(8);
            let gamma = g.sample(|x| amp * (2.0 * PI * x[0]).sin() + 0.3 * (2.0 * PI * x[1]).cos());
            let p = DiracParams { sigma_q: sq, ..DiracParams::default() };
            let c = dirac_preset(&g, &gamma, &p).unwrap();
            prop_assert!(c.dual_residual() < 1e-12);
            for i in 0..g.node_count() {
                let gm = gamma[i];
                let den = gm * gm + 1.0;
                prop_assert!((c.u(0)[i] - gm / den).abs() < 1e-12);
                prop_assert!((c.u(1)[i] - 1.0 / den).abs() < 1e-12);
                prop_assert!((c.w(0, 0)[i] + 1.0 / (sq.sqrt() * den)).abs() < 1e-12);
                prop_assert!((c.w(0, 1)[i] - gm / (sq.sqrt() * den)).abs() < 1e-12);
            }
        }

        #[test]
        fn appending_component_never_lowers_oscillation(phase in 0.0f64..1.0, k in 1usize..3) {
            let g = torus(16);
            let n = g.node_count();
            let b1 = g.sample(|x| (2.0 * PI * x[0]).sin() + 2.0);
            let b2 = g.sample(|x| (2.0 * PI * (k as f64 * x[1] + phase)).sin());
            let eta = scalar_eta(&g, 0.1);
            let one = CoefficientSet::new(&g, 1, Vec::new(), b1.clone(), eta.clone(), vec![0.0; n], 1e12).unwrap();
            // Two components; a chosen so the stacked matrix stays invertible.
            let a = [vec![1.0; n], vec![0.0; n]].concat();
            let two = CoefficientSet::new(&g, 2, a, [b1.clone(), b2.iter().map(|v| v + 3.0).collect()].concat(), eta, vec![0.0; n], 1e12).unwrap();
            prop_assert!(two.oscillation(256).value >= one.oscillation(256).value - 1e-12);
        }
    }

    #[test]
    fn dirac_degenerate_thermodynamics() {
        let g = torus(8);
        let gamma = vec![1.0; g.node_count()];
        let p = DiracParams { s_of_gamma: Polynomial(vec![-2.0]), ..DiracParams::default() };
        match dirac_preset(&g, &gamma, &p) {
            Err(Error::DegenerateThermodynamics { min }) => assert!((min + 1.0).abs() < 1e-14),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn galilean_cases() {
        let g = torus(8);
        let n = g.node_count();
        let c = galilean_preset(&g, 1.0, &vec![1.0; n], &vec![1.0; n], 0.1, 0.0).unwrap();
        assert!(c.dual_residual() < 1e-14);
        assert!(matches!(
            galilean_preset(&g, 1.0, &vec![0.0; n], &vec![1.0; n], 0.1, 0.0),
            Err(Error::SingularBasis { .. })
        ));
        // A sign change of n between nodes keeps every node invertible.
        let nf = g.sample(|x| (2.0 * PI * (x[0] + 1.0 / 16.0)).cos());
        let c = galilean_preset(&g, 1.0, &nf, &vec![1.0; n], 0.1, 0.0).unwrap();
        assert!(c.dual_residual() < 1e-10);
        // Oracle: pointwise rank via the 2x2 determinant -sqrt(kappa) n.
        assert!(nf.iter().all(|v| v.abs() > 1e-3));
    }

    #[test]
    fn scalar_cases() {
        let g = torus(16);
        let n = g.node_count();
        let c = scalar_preset(&g, &vec![1.0; n], 0.1, 0.0).unwrap();
        assert!(c.u(0).iter().all(|v| (*v - 1.0).abs() < 1e-15));
        assert!(c.oscillation(256).degenerate);
        let nf = g.sample(|x| 2.0 + (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1]).sin());
        let c = scalar_preset(&g, &nf, 0.1, 0.0).unwrap();
        let osc = c.oscillation(256);
        // Brute force: mean((theta . grad n)^2) = pi^2 for every unit theta.
        assert!((osc.value - PI * PI).abs() < 1e-9);
        assert!(!osc.degenerate);
        let cross = g.sample(|x| (2.0 * PI * (x[0] + 0.03)).sin());
        assert!(matches!(scalar_preset(&g, &cross, 0.1, 0.0), Err(Error::DegenerateThermodynamics { .. })));
    }

    #[test]
    fn oscillation_examples() {
        let g = torus(32);
        let n = g.node_count();
        let eta = scalar_eta(&g, 0.1);
        let a = [vec![1.0; n], vec![0.0; n]].concat();
        let b = [g.sample(|x| (2.0 * PI * x[0]).sin()), g.sample(|x| (2.0 * PI * x[1]).cos() + 3.0)].concat();
        let c = CoefficientSet::new(&g, 2, a.clone(), b, eta.clone(), vec![0.0; n], 1e12).unwrap();
        let osc = c.oscillation(256);
        // 2 pi^2 min_theta max(theta1^2, theta2^2) = pi^2 at theta = (1, 1)/sqrt 2.
        assert!((osc.value - PI * PI).abs() < 1e-6);
        assert!((osc.theta[0].abs() - 0.5f64.sqrt()).abs() < 1e-12);

        let b = [g.sample(|x| (2.0 * PI * x[0]).sin()), g.sample(|x| (2.0 * PI * x[0]).cos() + 3.0)].concat();
        let c = CoefficientSet::new(&g, 2, a.clone(), b, eta.clone(), vec![0.0; n], 1e12).unwrap();
        assert!(c.oscillation(256).value < 1e-20);
        assert!(c.oscillation(256).degenerate);

        let b = [vec![0.5; n], vec![2.0; n]].concat();
        let c = CoefficientSet::new(&g, 2, a, b, eta, vec![0.0; n], 1e12).unwrap();
        assert_eq!(c.oscillation(256).value, 0.0);
    }

    #[test]
    fn one_dimensional_oscillation() {
        let g = Grid::square(1, 64, 1.0, Boundary::Periodic).unwrap();
        let gamma = g.sample(|x| (2.0 * PI * x[0]).sin());
        let c = dirac_preset(&g, &gamma, &DiracParams::default()).unwrap();
        let osc = c.oscillation(256);
        // b = (gamma, 1): mean(gamma'^2) = 2 pi^2.
        assert!((osc.value - 2.0 * PI * PI).abs() < 1e-9);
        assert_eq!(osc.theta.len(), 1);
    }

    #[test]
    fn small_oscillation_scaling() {
        let g = torus(16);
        let fam = SmallOscillationFamily::standard(&g, 0.1);
        let c0 = fam.at(&g, 0.0).unwrap();
        assert_eq!(c0.oscillation(256).value, 0.0);
        let ratios: Vec<f64> = [0.2, 0.1, 0.05]
            .iter()
            .map(|&l| fam.at(&g, l).unwrap().oscillation(256).value / (l * l))
            .collect();
        for r in &ratios {
            assert!((r / ratios[0] - 1.0).abs() < 1e-10);
            assert!((r - PI * PI).abs() < 1e-9);
        }
    }

    #[test]
    fn dual_basis_first_order_in_lambda() {
        let g = torus(8);
        let fam = SmallOscillationFamily::standard(&g, 0.1);
        let (lam, h) = (0.1, 1e-4);
        let mid = fam.at(&g, lam).unwrap();
        let lo = fam.at(&g, lam - h).unwrap();
        let hi = fam.at(&g, lam + h).unwrap();
        let n = g.node_count();
        // dZ/dlambda = -Z A1 Z for Z = (a; b)^{-1}, whose columns are (w, u).
        for i in 0..n {
            let a1 = [[0.0, fam.a1[n + i]], [fam.b1[i], fam.b1[n + i]]];
            let z = [[mid.w(0, 0)[i], mid.u(0)[i]], [mid.w(0, 1)[i], mid.u(1)[i]]];
            let mut dz = [[0.0; 2]; 2];
            for r in 0..2 {
                for c in 0..2 {
                    for p in 0..2 {
                        for q in 0..2 {
                            dz[r][c] -= z[r][p] * a1[p][q] * z[q][c];
                        }
                    }
                }
            }
            for k in 0..2 {
                let fd = (hi.w(0, k)[i] - lo.w(0, k)[i]) / (2.0 * h);
                assert!((fd - dz[k][0]).abs() < 1e-6, "{fd} vs {}", dz[k][0]);
            }
        }
    }

    #[test]
    fn random_field_properties() {
        let g = Grid::square(2, 32, 4.0, Boundary::Dirichlet).unwrap();
        let p = RandomFieldParams { seed: 11, cells_per_axis: 4, smoothing_radius: 0.5, amplitude: 1.0, mean: 0.0 };
        let f1 = random_stationary_field(&g, &p).unwrap();
        let f2 = random_stationary_field(&g, &p).unwrap();
        assert_eq!(f1, f2);
        assert!(f1.iter().all(|v| v.abs() <= 1.0 + 1e-12));
        let flat = random_stationary_field(&g, &RandomFieldParams { amplitude: 0.0, ..p.clone() }).unwrap();
        assert!(flat.iter().all(|v| *v == 0.0));
        assert!(random_stationary_field(&g, &RandomFieldParams { smoothing_radius: 1.5, ..p.clone() }).is_err());
        assert!(random_stationary_field(&g, &RandomFieldParams { cells_per_axis: 1, ..p.clone() }).is_err());

        // Cell values: mean of N^2 i.i.d. U(-1, 1) within a few standard errors.
        let nc = 64i64;
        let mean: f64 = (0..nc).flat_map(|i| (0..nc).map(move |j| [i, j])).map(|c| p.cell_value(c)).sum::<f64>() / (nc * nc) as f64;
        let se = (1.0 / 3.0f64).sqrt() / nc as f64;
        assert!(mean.abs() < 4.0 * se, "{mean}");

        // Same law for two seeds: first two moments agree within Monte-Carlo error.
        let q = RandomFieldParams { seed: 12, ..p.clone() };
        let moments = |pp: &RandomFieldParams| {
            let v: Vec<f64> = (0..nc).flat_map(|i| (0..nc).map(move |j| [i, j])).map(|c| pp.cell_value(c)).collect();
            let m1 = v.iter().sum::<f64>() / v.len() as f64;
            let m2 = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
            (m1, m2)
        };
        let (a1, a2) = moments(&p);
        let (b1, b2) = moments(&q);
        assert!((a1 - b1).abs() < 6.0 * se);
        assert!((a2 - b2).abs() < 0.05);

        // Integer translation moves the field with its cells.
        let x = [1.3, 2.7];
        let y = [x[0] + 1.0, x[1]];
        let shifted = p.eval(y, 2);
        assert!(shifted.is_finite());
    }

    #[test]
    fn random_field_is_smooth() {
        let p = RandomFieldParams { seed: 5, cells_per_axis: 4, smoothing_radius: 0.5, amplitude: 1.0, mean: 0.0 };
        // Difference quotients stay bounded as the step shrinks.
        let x = [1.0, 1.37];
        let d1 = (p.eval([x[0] + 1e-4, x[1]], 2) - p.eval([x[0] - 1e-4, x[1]], 2)) / 2e-4;
        let d2 = (p.eval([x[0] + 1e-6, x[1]], 2) - p.eval([x[0] - 1e-6, x[1]], 2)) / 2e-6;
        assert!((d1 - d2).abs() < 1e-3);
    }
}

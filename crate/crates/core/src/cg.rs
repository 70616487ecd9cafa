//! Preconditioned conjugate gradients and transform-based preconditioners
//! for the normal operator on stream-function unknowns.

use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::forms::{dot, Form};
use crate::grid::{axis_derivative_matrix, axis_weights, Boundary, DofLayout};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgOptions {
    /// Target for `|r| / |b|`.
    pub tol: f64,
    /// Defaults to `50 sqrt(n)`.
    pub max_iter: Option<usize>,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: None }
    }
}

impl CgOptions {
    pub fn iteration_cap(&self, n: usize) -> usize {
        self.max_iter.unwrap_or_else(|| ((50.0 * (n as f64).sqrt()).ceil() as usize).max(1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgReport {
    pub iterations: usize,
    pub residual: f64,
}

/// Solve `A x = b` for symmetric positive (semi)definite `A`, starting from
/// the value already in `x`. All reductions run in a fixed order.
pub fn pcg(
    apply: impl Fn(&[f64], &mut [f64]),
    precondition: impl Fn(&[f64], &mut [f64]),
    b: &[f64],
    x: &mut [f64],
    opts: &CgOptions,
) -> Result<CgReport> {
    let n = b.len();
    let bnorm = dot(b, b).sqrt();
    if n == 0 || bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgReport { iterations: 0, residual: 0.0 });
    }
    let cap = opts.iteration_cap(n);
    let mut r = vec![0.0; n];
    apply(x, &mut r);
    r.iter_mut().zip(b).for_each(|(ri, bi)| *ri = bi - *ri);
    let mut z = vec![0.0; n];
    precondition(&r, &mut z);
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut rel = dot(&r, &r).sqrt() / bnorm;
    for it in 0..cap {
        if rel <= opts.tol {
            return Ok(CgReport { iterations: it, residual: rel });
        }
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) || !rz.is_finite() {
            return Err(Error::NoConvergence { iterations: it, residual: rel });
        }
        let alpha = rz / pap;
        x.iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
        r.iter_mut().zip(&ap).for_each(|(ri, api)| *ri -= alpha * api);
        rel = dot(&r, &r).sqrt() / bnorm;
        precondition(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.iter_mut().zip(&z).for_each(|(pi, zi)| *pi = zi + beta * *pi);
    }
    if rel <= opts.tol {
        return Ok(CgReport { iterations: cap, residual: rel });
    }
    Err(Error::NoConvergence { iterations: cap, residual: rel })
}

#[derive(Clone)]
enum Transform {
    Identity,
    Fourier {
        shape: [usize; 2],
        forward: [Arc<dyn Fft<f64>>; 2],
        inverse: [Arc<dyn Fft<f64>>; 2],
    },
    /// Per-axis bases: forward `Q0^T X Q1`, back `Q0 Y Q1^T`.
    Real { shape: [usize; 2], q: [DMatrix<f64>; 2] },
}

/// Block-diagonal preconditioner in a basis that nearly diagonalizes the
/// normal operator: Fourier modes on the torus, sine modes on the interior
/// block of Dirichlet grids, cosine modes on natural grids. Each mode gets
/// the inverse of the `m x m` constant-coefficient symbol of the form.
#[derive(Clone)]
pub struct SpectralPreconditioner {
    m: usize,
    modes: usize,
    transform: Transform,
    blocks: Vec<f64>,
    /// `T^T` restricted to the unknowns, entry `(r, k)` at `(r * m + k) * modes + t`.
    pointwise: Option<Vec<f64>>,
}

/// Generalized eigenbasis of `(D^T W D, W)` restricted to the `free` nodes
/// of one axis: columns `V` with `V^T W V = I` and `V^T D^T W D V = diag(lambda)`.
/// Eigenvalues below `1e-10` of the largest are reported as exact zeros.
pub(crate) fn axis_eigenbasis(derivative: &DMatrix<f64>, weight: &[f64], free: &[usize]) -> (DMatrix<f64>, Vec<f64>) {
    let n = weight.len();
    let len = free.len();
    let inv_sqrt: Vec<f64> = free.iter().map(|&i| weight[i].powf(-0.5)).collect();
    let c = DMatrix::from_fn(len, len, |a, b| {
        let s: f64 = (0..n).map(|i| derivative[(i, free[a])] * weight[i] * derivative[(i, free[b])]).sum();
        inv_sqrt[a] * s * inv_sqrt[b]
    });
    let eig = c.symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(*v));
    let lambda = eig.eigenvalues.iter().map(|v| if *v <= 1e-10 * top { 0.0 } else { *v }).collect();
    let v = DMatrix::from_fn(len, len, |i, k| inv_sqrt[i] * eig.eigenvectors[(i, k)]);
    (v, lambda)
}

fn invert_block(b: &[f64], m: usize) -> Vec<f64> {
    let mat = DMatrix::from_row_slice(m, m, b);
    let scale = b.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return vec![0.0; m * m];
    }
    // Symmetric pseudo-inverse: modes with negligible symbol are left alone.
    let eig = mat.symmetric_eigen();
    let mut out = DMatrix::zeros(m, m);
    for (idx, lam) in eig.eigenvalues.iter().enumerate() {
        if *lam > 1e-12 * scale {
            let v = eig.eigenvectors.column(idx);
            out += v * v.transpose() / *lam;
        }
    }
    let mut flat = vec![0.0; m * m];
    for r in 0..m {
        for c in 0..m {
            flat[r * m + c] = out[(r, c)];
        }
    }
    flat
}

impl SpectralPreconditioner {
    pub fn new<F: Form + ?Sized>(form: &F, layout: &DofLayout) -> Self {
        let grid = form.grid();
        let m = form.m();
        if grid.dim() == 1 || layout.is_empty() {
            return Self { m, modes: 0, transform: Transform::Identity, blocks: Vec::new(), pointwise: None };
        }
        let (transform, kappas): (Transform, [Vec<f64>; 2]) = match grid.boundary() {
            Boundary::Periodic => {
                let shape = grid.shape();
                let mut planner = FftPlanner::new();
                let forward = [planner.plan_fft_forward(shape[0]), planner.plan_fft_forward(shape[1])];
                let inverse = [planner.plan_fft_inverse(shape[0]), planner.plan_fft_inverse(shape[1])];
                let k = [grid.axis_wavenumbers(0), grid.axis_wavenumbers(1)];
                (Transform::Fourier { shape, forward, inverse }, k)
            }
            bounded => {
                let bases = [0, 1].map(|a| {
                    let iv = grid.intervals(a);
                    let free: Vec<usize> = if bounded == Boundary::Dirichlet { (2..=iv - 2).collect() } else { (0..=iv).collect() };
                    axis_eigenbasis(&axis_derivative_matrix(grid, a), &axis_weights(grid, a), &free)
                });
                let shape = [bases[0].1.len(), bases[1].1.len()];
                let k = [0, 1].map(|a| bases[a].1.iter().map(|l| l.sqrt()).collect());
                let [(v0, _), (v1, _)] = bases;
                (Transform::Real { shape, q: [v0, v1] }, k)
            }
        };
        // The real bases are mass-orthonormal, which already carries the cell volume.
        let h = if grid.boundary().is_periodic() { grid.cell_volume() } else { 1.0 };
        let modes = kappas[0].len() * kappas[1].len();
        // Spectral products alias near Nyquist on the torus, which spoils the
        // pointwise model there; the mean symbol is more robust in that case.
        let model = if grid.boundary().is_periodic() { None } else { form.pointwise_model() };
        let mu_floor = kappas
            .iter()
            .flat_map(|k| k.iter())
            .filter(|k| **k > 0.0)
            .fold(f64::INFINITY, |a, k| a.min(k * k));
        let mut blocks = Vec::with_capacity(modes * m * m);
        for k0 in &kappas[0] {
            for k1 in &kappas[1] {
                let null = *k0 == 0.0 && *k1 == 0.0;
                match &model {
                    Some(pm) => {
                        let mu = if null { mu_floor } else { k0 * k0 + k1 * k1 };
                        for a in 0..m {
                            for b in 0..m {
                                let stiff = h * (pm.zeroth[a] + pm.first[a] * mu + pm.second[a] * mu * mu);
                                blocks.push(if a == b && stiff > 0.0 { 1.0 / stiff } else { 0.0 });
                            }
                        }
                    }
                    None if null => blocks.extend(std::iter::repeat_n(0.0, m * m)),
                    None => {
                        let sym: Vec<f64> = form.symbol([*k0, *k1]).iter().map(|v| v * h).collect();
                        blocks.extend(invert_block(&sym, m));
                    }
                }
            }
        }
        let pointwise = model.map(|pm| {
            let n = grid.node_count();
            let free = layout.free_nodes();
            let mut t = vec![0.0; m * m * modes];
            for c in 0..m * m {
                for (idx, &node) in free.iter().enumerate() {
                    t[c * modes + idx] = pm.transform[c * n + node];
                }
            }
            t
        });
        Self { m, modes, transform, blocks, pointwise }
    }

    pub fn apply(&self, r: &[f64], z: &mut [f64]) {
        match &self.pointwise {
            None => self.apply_modes(r, z),
            Some(t) => {
                let (m, n) = (self.m, self.modes);
                let mut y = vec![0.0; m * n];
                for a in 0..m {
                    for k in 0..m {
                        let tc = &t[(a * m + k) * n..(a * m + k + 1) * n];
                        for i in 0..n {
                            y[a * n + i] += tc[i] * r[k * n + i];
                        }
                    }
                }
                let mut yz = vec![0.0; m * n];
                self.apply_modes(&y, &mut yz);
                z.iter_mut().for_each(|v| *v = 0.0);
                for a in 0..m {
                    for k in 0..m {
                        let tc = &t[(a * m + k) * n..(a * m + k + 1) * n];
                        for i in 0..n {
                            z[k * n + i] += tc[i] * yz[a * n + i];
                        }
                    }
                }
            }
        }
    }

    fn apply_modes(&self, r: &[f64], z: &mut [f64]) {
        let m = self.m;
        let modes = self.modes;
        match &self.transform {
            Transform::Identity => z.copy_from_slice(r),
            Transform::Fourier { shape, forward, inverse } => {
                let mut hat: Vec<Vec<Complex64>> = (0..m)
                    .map(|k| {
                        let mut buf: Vec<Complex64> = r[k * modes..(k + 1) * modes].iter().map(|v| Complex64::new(*v, 0.0)).collect();
                        fft2(&mut buf, *shape, forward);
                        buf
                    })
                    .collect();
                self.mix_complex(&mut hat);
                let scale = 1.0 / modes as f64;
                for (k, buf) in hat.iter_mut().enumerate() {
                    fft2(buf, *shape, inverse);
                    for (zi, bi) in z[k * modes..(k + 1) * modes].iter_mut().zip(buf.iter()) {
                        *zi = bi.re * scale;
                    }
                }
            }
            Transform::Real { shape, q } => {
                let mut hat: Vec<DMatrix<f64>> = (0..m)
                    .map(|k| {
                        let x = DMatrix::from_row_slice(shape[0], shape[1], &r[k * modes..(k + 1) * modes]);
                        q[0].tr_mul(&x) * &q[1]
                    })
                    .collect();
                let mut out: Vec<DMatrix<f64>> = vec![DMatrix::zeros(shape[0], shape[1]); m];
                for i in 0..shape[0] {
                    for j in 0..shape[1] {
                        let block = &self.blocks[(i * shape[1] + j) * m * m..(i * shape[1] + j + 1) * m * m];
                        for (a, o) in out.iter_mut().enumerate() {
                            o[(i, j)] = (0..m).map(|b| block[a * m + b] * hat[b][(i, j)]).sum();
                        }
                    }
                }
                for (k, o) in out.iter().enumerate() {
                    hat[k] = &q[0] * o * q[1].transpose();
                    let t = hat[k].transpose();
                    z[k * modes..(k + 1) * modes].copy_from_slice(t.as_slice());
                }
            }
        }
    }

    fn mix_complex(&self, hat: &mut [Vec<Complex64>]) {
        let m = self.m;
        let mut tmp = vec![Complex64::new(0.0, 0.0); m];
        for mode in 0..self.modes {
            let block = &self.blocks[mode * m * m..(mode + 1) * m * m];
            for (a, t) in tmp.iter_mut().enumerate() {
                *t = (0..m).map(|b| hat[b][mode] * block[a * m + b]).sum();
            }
            for (a, t) in tmp.iter().enumerate() {
                hat[a][mode] = *t;
            }
        }
    }
}

fn fft2(buf: &mut [Complex64], shape: [usize; 2], plans: &[Arc<dyn Fft<f64>>; 2]) {
    let [n0, n1] = shape;
    for row in buf.chunks_mut(n1) {
        plans[1].process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); n0];
    for j in 0..n1 {
        for i in 0..n0 {
            col[i] = buf[i * n1 + j];
        }
        plans[0].process(&mut col);
        for i in 0..n0 {
            buf[i * n1 + j] = col[i];
        }
    }
}

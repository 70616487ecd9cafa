//! Matrix-free quadratic forms on currents and the normal operator on
//! stream-function unknowns.
//!
//! A form is represented by its Euclidean gradient `M`: for component-major
//! current buffers `J`, `J~` the value is `J~ . (M J)`, quadrature weights
//! included.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fields::{CoefficientSet, OscillationReport};
use crate::grid::{check_len, perp_gradient, perp_gradient_transpose, CurrentField, DofLayout, Grid, Operators};

/// Directions used when evaluating the oscillation of a context.
pub const THETA_SAMPLES: usize = 256;

/// Share of the mean `|grad b w^T|^2` used as the preconditioner's mass term.
const MASS_WEIGHT: f64 = 0.2;

/// Symmetric nonnegative quadratic form on `D x m` currents.
pub trait Form: Sync {
    fn grid(&self) -> &Grid;
    fn ops(&self) -> &Operators;
    fn m(&self) -> usize;

    /// `out = M j`.
    fn apply(&self, j: &[f64], out: &mut [f64]);

    /// Constant-coefficient `m x m` symbol (row-major) of the form composed
    /// with `grad^perp`, at wave vector `kappa`. Only used for preconditioning.
    fn symbol(&self, kappa: [f64; 2]) -> Vec<f64>;

    /// Optional pointwise change of unknowns that nearly decouples the form;
    /// preferred over [`Form::symbol`] by the preconditioner when present.
    fn pointwise_model(&self) -> Option<PointwiseModel> {
        None
    }

    fn current_len(&self) -> usize {
        self.grid().dim() * self.m() * self.grid().node_count()
    }

    fn bilinear(&self, j: &[f64], jt: &[f64]) -> f64 {
        let mut mj = vec![0.0; j.len()];
        self.apply(j, &mut mj);
        dot(&mj, jt)
    }

    fn energy(&self, j: &[f64]) -> f64 {
        self.bilinear(j, j)
    }
}

/// Potentials written as `f = T(x) g`, with the form acting on `g_r` roughly
/// like `zeroth[r] g_r^2 + first[r] |grad g_r|^2 + second[r] |grad grad g_r|^2`.
#[derive(Clone, Debug)]
pub struct PointwiseModel {
    /// Node fields of `T^T`: entry `(r, k)` at component `r * m + k`.
    pub transform: Vec<f64>,
    pub zeroth: Vec<f64>,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

/// Fixed-order dot product.
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// The hydrodynamic form
/// `<J w^T, J~ w^T> + s (<eta grad(J u^T), grad(J~ u^T)> + <zeta div(J u^T), div(J~ u^T)>)`
/// with `s = 1`, or `s = eps^2` for the rescaled variant.
#[derive(Clone, Debug)]
pub struct FormContext {
    coeffs: CoefficientSet,
    ops: Operators,
    epsilon: Option<f64>,
    oscillation: OscillationReport,
    eta0: f64,
    allow_seminorm: bool,
    wtw: Vec<f64>,
    mean_wtw: Vec<f64>,
    mean_uu: Vec<f64>,
    mean_eta: f64,
}

impl FormContext {
    pub fn new(coeffs: CoefficientSet) -> Self {
        let ops = Operators::new(coeffs.grid());
        let oscillation = coeffs.oscillation(THETA_SAMPLES);
        let d = coeffs.grid().dim();
        let n = coeffs.grid().node_count();
        let eta0 = (0..n)
            .map(|i| {
                if d == 1 {
                    coeffs.eta(0, 0)[i]
                } else {
                    let (p, q, r) = (coeffs.eta(0, 0)[i], coeffs.eta(0, 1)[i], coeffs.eta(1, 1)[i]);
                    0.5 * (p + r) - (0.25 * (p - r).powi(2) + q * q).sqrt()
                }
            })
            .fold(f64::INFINITY, f64::min);
        let m = coeffs.m();
        let mut wtw = vec![0.0; m * m * n];
        for k in 0..m {
            for kp in 0..m {
                for i in 0..n {
                    wtw[(k * m + kp) * n + i] = (0..m - 1).map(|r| coeffs.w(r, k)[i] * coeffs.w(r, kp)[i]).sum();
                }
            }
        }
        let wts = coeffs.grid().weights();
        let vol: f64 = wts.iter().sum();
        let mut mean_uu = vec![0.0; m * m];
        for k in 0..m {
            for kp in 0..m {
                mean_uu[k * m + kp] = (0..n).map(|i| wts[i] * coeffs.u(k)[i] * coeffs.u(kp)[i]).sum::<f64>() / vol;
            }
        }
        let mean_wtw = coeffs.mean_wtw();
        let mean_eta = coeffs.mean_eta_iso();
        Self { coeffs, ops, epsilon: None, oscillation, eta0, allow_seminorm: false, wtw, mean_wtw, mean_uu, mean_eta }
    }

    /// Rescaled form: the coefficients must already be sampled at `x / eps`.
    pub fn with_epsilon(coeffs: CoefficientSet, epsilon: f64) -> Result<Self> {
        let inverse = 1.0 / epsilon;
        if !(epsilon > 0.0) || (inverse - inverse.round()).abs() > 1e-9 * inverse.max(1.0) || inverse.round() < 1.0 {
            return Err(Error::NonIntegerScale { inverse });
        }
        let mut ctx = Self::new(coeffs);
        ctx.epsilon = Some(epsilon);
        Ok(ctx)
    }

    pub fn allow_seminorm(mut self, allow: bool) -> Self {
        self.allow_seminorm = allow;
        self
    }

    pub fn coeffs(&self) -> &CoefficientSet {
        &self.coeffs
    }

    pub fn epsilon(&self) -> Option<f64> {
        self.epsilon
    }

    /// Prefactor of the viscous term.
    pub fn viscous_scale(&self) -> f64 {
        self.epsilon.map_or(1.0, |e| e * e)
    }

    pub fn oscillation(&self) -> &OscillationReport {
        &self.oscillation
    }

    pub fn eta0(&self) -> f64 {
        self.eta0
    }

    pub fn is_degenerate(&self) -> bool {
        self.oscillation.degenerate
    }

    pub fn seminorm_allowed(&self) -> bool {
        self.allow_seminorm
    }

    /// Fails on a degenerate context unless the seminorm override is set.
    pub fn require_definite(&self) -> Result<()> {
        if self.is_degenerate() && !self.allow_seminorm {
            return Err(Error::DegenerateForm(format!(
                "oscillation {:.3e} is zero; the form is only a seminorm (override with --allow-seminorm)",
                self.oscillation.value
            )));
        }
        Ok(())
    }

    /// Mean of `sum_r |grad b w_r^T|^2`.
    fn mean_grad_b_w(&self) -> f64 {
        let c = &self.coeffs;
        let grid = c.grid();
        let (n, d, m) = (grid.node_count(), grid.dim(), c.m());
        let wts = grid.weights();
        let mut total = 0.0;
        for i in 0..n {
            let mut q = 0.0;
            for r in 0..m - 1 {
                for l in 0..d {
                    let s: f64 = (0..m).map(|k| c.grad_b(k, l)[i] * c.w(r, k)[i]).sum();
                    q += s * s;
                }
            }
            total += wts[i] * q;
        }
        total / grid.volume()
    }

    /// Velocity `v = J u^T`, `D` node fields.
    pub fn velocity(&self, j: &[f64]) -> Vec<f64> {
        let grid = self.coeffs.grid();
        let (n, d, m) = (grid.node_count(), grid.dim(), self.coeffs.m());
        let mut v = vec![0.0; d * n];
        for k in 0..m {
            let uk = self.coeffs.u(k);
            for l in 0..d {
                let jc = &j[(k * d + l) * n..(k * d + l + 1) * n];
                for ((vi, ji), ui) in v[l * n..(l + 1) * n].iter_mut().zip(jc).zip(uk) {
                    *vi += ji * ui;
                }
            }
        }
        v
    }

    /// Euclidean gradient of `v -> <eta grad v, grad v> + <zeta div v, div v>` (weights included).
    pub fn viscous_gradient(&self, v: &[f64]) -> Vec<f64> {
        let grid = self.coeffs.grid();
        let (n, d) = (grid.node_count(), grid.dim());
        let wts = grid.weights();
        let mut g = vec![0.0; d * n];
        let mut deriv = vec![vec![0.0; n]; d];
        let mut flux = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        let mut div = vec![0.0; n];
        for l in 0..d {
            let vl = &v[l * n..(l + 1) * n];
            for (p, dp) in deriv.iter_mut().enumerate() {
                self.ops.derivative(p, vl, dp);
            }
            div.iter_mut().zip(&deriv[l]).for_each(|(a, b)| *a += b);
            for pp in 0..d {
                for i in 0..n {
                    let mut s = 0.0;
                    for (p, dp) in deriv.iter().enumerate() {
                        s += self.coeffs.eta(pp, p)[i] * dp[i];
                    }
                    flux[i] = wts[i] * s;
                }
                self.ops.derivative_transpose(pp, &flux, &mut tmp);
                g[l * n..(l + 1) * n].iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
            }
        }
        if self.coeffs.zeta().iter().any(|z| *z != 0.0) {
            for i in 0..n {
                flux[i] = wts[i] * self.coeffs.zeta()[i] * div[i];
            }
            for l in 0..d {
                self.ops.derivative_transpose(l, &flux, &mut tmp);
                g[l * n..(l + 1) * n].iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
            }
        }
        g
    }
}

impl Form for FormContext {
    fn grid(&self) -> &Grid {
        self.coeffs.grid()
    }

    fn ops(&self) -> &Operators {
        &self.ops
    }

    fn m(&self) -> usize {
        self.coeffs.m()
    }

    fn apply(&self, j: &[f64], out: &mut [f64]) {
        let grid = self.coeffs.grid();
        let (n, d, m) = (grid.node_count(), grid.dim(), self.coeffs.m());
        let wts = grid.weights();
        out.iter_mut().for_each(|v| *v = 0.0);
        for kp in 0..m {
            for l in 0..d {
                let o = &mut out[(kp * d + l) * n..(kp * d + l + 1) * n];
                for k in 0..m {
                    let jc = &j[(k * d + l) * n..(k * d + l + 1) * n];
                    let ww = &self.wtw[(k * m + kp) * n..(k * m + kp + 1) * n];
                    for i in 0..n {
                        o[i] += wts[i] * ww[i] * jc[i];
                    }
                }
            }
        }
        let s = self.viscous_scale();
        let g = self.viscous_gradient(&self.velocity(j));
        for k in 0..m {
            let uk = self.coeffs.u(k);
            for l in 0..d {
                let o = &mut out[(k * d + l) * n..(k * d + l + 1) * n];
                for i in 0..n {
                    o[i] += s * g[l * n + i] * uk[i];
                }
            }
        }
    }

    fn symbol(&self, kappa: [f64; 2]) -> Vec<f64> {
        let mu = kappa[0] * kappa[0] + kappa[1] * kappa[1];
        let s = self.viscous_scale() * self.mean_eta;
        self.mean_wtw.iter().zip(&self.mean_uu).map(|(w, u)| mu * w + s * mu * mu * u).collect()
    }

    /// `g = (w; u) f`, so `f = (a; b)^T g`: the `w`-rows of the current see a
    /// first-order penalty and the velocity a second-order one. The velocity
    /// potential also picks up a mass term from `grad b w^T`, which dominates
    /// on finely oscillating media.
    fn pointwise_model(&self) -> Option<PointwiseModel> {
        let m = self.coeffs.m();
        let mut transform = Vec::with_capacity(m * m * self.coeffs.grid().node_count());
        for r in 0..m - 1 {
            for k in 0..m {
                transform.extend_from_slice(self.coeffs.a(r, k));
            }
        }
        for k in 0..m {
            transform.extend_from_slice(self.coeffs.b(k));
        }
        let mut first = vec![1.0; m];
        first[m - 1] = 0.0;
        let mut second = vec![0.0; m];
        second[m - 1] = self.viscous_scale() * self.mean_eta;
        let mut zeroth = vec![0.0; m];
        zeroth[m - 1] = MASS_WEIGHT * self.mean_grad_b_w();
        Some(PointwiseModel { transform, zeroth, first, second })
    }
}

/// `<abar J, J~>` for a constant symmetric `(D m) x (D m)` tensor, indexed
/// by the current component `k * D + l`.
#[derive(Clone, Debug)]
pub struct ConstantForm {
    ops: Operators,
    m: usize,
    tensor: Vec<f64>,
}

impl ConstantForm {
    pub fn new(grid: &Grid, m: usize, tensor: &[f64]) -> Result<Self> {
        let c = grid.dim() * m;
        check_len("constant tensor", tensor.len(), c * c)?;
        Ok(Self { ops: Operators::new(grid), m, tensor: tensor.to_vec() })
    }

    pub fn tensor(&self) -> &[f64] {
        &self.tensor
    }
}

impl Form for ConstantForm {
    fn grid(&self) -> &Grid {
        self.ops.grid()
    }

    fn ops(&self) -> &Operators {
        &self.ops
    }

    fn m(&self) -> usize {
        self.m
    }

    fn apply(&self, j: &[f64], out: &mut [f64]) {
        let grid = self.ops.grid();
        let n = grid.node_count();
        let c = grid.dim() * self.m;
        let wts = grid.weights();
        for a in 0..c {
            let o = &mut out[a * n..(a + 1) * n];
            o.iter_mut().for_each(|v| *v = 0.0);
            for b in 0..c {
                let t = self.tensor[a * c + b];
                if t == 0.0 {
                    continue;
                }
                let jb = &j[b * n..(b + 1) * n];
                for i in 0..n {
                    o[i] += wts[i] * t * jb[i];
                }
            }
        }
    }

    fn symbol(&self, kappa: [f64; 2]) -> Vec<f64> {
        let d = self.ops.grid().dim();
        let m = self.m;
        let c = d * m;
        let perp = [-kappa[1], kappa[0]];
        let mut out = vec![0.0; m * m];
        for k in 0..m {
            for kp in 0..m {
                let mut s = 0.0;
                for l in 0..d {
                    for lp in 0..d {
                        s += self.tensor[(k * d + l) * c + kp * d + lp] * perp[l] * perp[lp];
                    }
                }
                out[k * m + kp] = s;
            }
        }
        out
    }
}

/// `a(J, J~)` on two current fields.
pub fn apply_form(ctx: &FormContext, j: &CurrentField, jt: &CurrentField) -> Result<f64> {
    let len = ctx.current_len();
    check_len("current", j.values.len(), len)?;
    check_len("current", jt.values.len(), len)?;
    if &j.grid != ctx.grid() || &jt.grid != ctx.grid() {
        return Err(Error::DimensionMismatch("current lives on a different grid".into()));
    }
    Ok(ctx.bilinear(&j.values, &jt.values))
}

/// Same as [`apply_form`]; the context must carry an `eps`.
pub fn apply_form_eps(ctx: &FormContext, j: &CurrentField, jt: &CurrentField) -> Result<f64> {
    if ctx.epsilon().is_none() {
        return Err(Error::InvalidInput("context has no epsilon".into()));
    }
    apply_form(ctx, j, jt)
}

/// `K = P^T M P` on the potential unknowns of a [`DofLayout`], with
/// `P f = grad^perp f`.
pub struct NormalOperator<'a, F: Form + ?Sized> {
    form: &'a F,
    layout: DofLayout,
}

impl<'a, F: Form + ?Sized> NormalOperator<'a, F> {
    pub fn new(form: &'a F) -> Self {
        let layout = DofLayout::new(form.grid(), form.m());
        Self { form, layout }
    }

    pub fn form(&self) -> &F {
        self.form
    }

    pub fn layout(&self) -> &DofLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    /// Current `P f` (no constant part).
    pub fn lift(&self, dofs: &[f64]) -> Vec<f64> {
        let grid = self.form.grid();
        let n = grid.node_count();
        let m = self.form.m();
        let mut out = vec![0.0; self.form.current_len()];
        if grid.dim() == 2 && !self.layout.is_empty() {
            let mut full = vec![0.0; m * n];
            self.layout.scatter(dofs, &mut full);
            perp_gradient(self.form.ops(), m, &full, &mut out);
        }
        out
    }

    /// `P^T y`.
    pub fn lift_transpose(&self, y: &[f64]) -> Vec<f64> {
        let grid = self.form.grid();
        let n = grid.node_count();
        let m = self.form.m();
        let mut out = vec![0.0; self.layout.len()];
        if grid.dim() == 2 && !self.layout.is_empty() {
            let mut full = vec![0.0; m * n];
            perp_gradient_transpose(self.form.ops(), m, y, &mut full);
            self.layout.gather(&full, &mut out);
        }
        out
    }

    pub fn apply(&self, dofs: &[f64], out: &mut [f64]) {
        let j = self.lift(dofs);
        let mut mj = vec![0.0; j.len()];
        self.form.apply(&j, &mut mj);
        out.copy_from_slice(&self.lift_transpose(&mj));
    }

    /// `P^T M j` for a background current.
    pub fn coupling(&self, j: &[f64]) -> Vec<f64> {
        let mut mj = vec![0.0; j.len()];
        self.form.apply(j, &mut mj);
        self.lift_transpose(&mj)
    }

    /// Gradient of `f -> a(c + P f, c + P f) / 2`: `K f + P^T M c`.
    pub fn normal_apply(&self, dofs: &[f64], c: &[f64]) -> Vec<f64> {
        let grid = self.form.grid();
        let background = CurrentField::constant(grid, self.form.m(), c).values;
        let mut out = vec![0.0; self.len()];
        self.apply(dofs, &mut out);
        let rhs = self.coupling(&background);
        out.iter_mut().zip(&rhs).for_each(|(a, b)| *a += b);
        out
    }
}

/// Band-limited random potential built from Fourier modes with wave numbers
/// up to `modes`; identical functions on every resolution of the same domain.
pub fn random_potential(grid: &Grid, m: usize, modes: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = grid.node_count();
    let mut f = vec![0.0; m * n];
    let kmax = modes as i64;
    for k in 0..m {
        let mut terms = Vec::new();
        for k1 in -kmax..=kmax {
            for k2 in 0..=kmax {
                let alpha: f64 = rng.random_range(-1.0..1.0);
                let beta: f64 = rng.random_range(-1.0..1.0);
                let decay = 1.0 / (1.0 + (k1 * k1 + k2 * k2) as f64);
                terms.push((k1 as f64, k2 as f64, alpha * decay, beta * decay));
            }
        }
        let lx = grid.length(0);
        let ly = if grid.dim() == 2 { grid.length(1) } else { 1.0 };
        let origin = grid.origin();
        for i in 0..n {
            let x = grid.position(i);
            let (px, py) = ((x[0] - origin[0]) / lx, (x[1] - origin[1]) / ly);
            let mut s = 0.0;
            for &(k1, k2, a, b) in &terms {
                let ph = 2.0 * PI * (k1 * px + k2 * py);
                s += a * ph.cos() + b * ph.sin();
            }
            f[k * n + i] = s;
        }
    }
    f
}

/// Stability quotient `O <|J|^2> / a(J, J)` with both integrals over the domain.
pub fn stability_ratio(ctx: &FormContext, j: &[f64]) -> f64 {
    let wts = ctx.grid().weights();
    let n = wts.len();
    let l2: f64 = j.chunks(n).map(|c| c.iter().zip(&wts).map(|(v, w)| w * v * v).sum::<f64>()).sum();
    ctx.oscillation().value * l2 / ctx.energy(j)
}

#[derive(Clone, Debug)]
pub struct StabilityEstimate {
    pub c_hat: f64,
    pub worst: CurrentField,
    pub ratios: Vec<f64>,
}

/// Largest stability quotient over `samples` random admissible currents
/// `J = grad^perp f + c` with band-limited `f` (masked to the unknowns of
/// the grid's boundary kind) and random constant `c`.
pub fn estimate_stability_constant(ctx: &FormContext, samples: usize, seed: u64) -> Result<StabilityEstimate> {
    if ctx.is_degenerate() {
        return Err(Error::DegenerateForm(format!("oscillation {:.3e} vanishes", ctx.oscillation().value)));
    }
    if samples == 0 {
        return Err(Error::InvalidInput("need at least one sample".into()));
    }
    let grid = ctx.grid();
    let m = ctx.m();
    let d = grid.dim();
    let normal = NormalOperator::new(ctx);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ratios = Vec::with_capacity(samples);
    let mut worst: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    for _ in 0..samples {
        let c: Vec<f64> = (0..d * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = random_potential(grid, m, 3, &mut rng);
        let mut dofs = vec![0.0; normal.len()];
        normal.layout().gather(&f, &mut dofs);
        let mut j = normal.lift(&dofs);
        let background = CurrentField::constant(grid, m, &c).values;
        j.iter_mut().zip(&background).for_each(|(a, b)| *a += b);
        let r = stability_ratio(ctx, &j);
        ratios.push(r);
        if worst.as_ref().is_none_or(|w| r > w.0) {
            worst = Some((r, j, c));
        }
    }
    let (c_hat, values, c) = worst.expect("at least one sample");
    Ok(StabilityEstimate {
        c_hat,
        worst: CurrentField { grid: grid.clone(), m, values, mean_part: c },
        ratios,
    })
}

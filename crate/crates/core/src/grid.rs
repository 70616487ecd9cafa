//! Tensor-product grids, discrete derivatives and the stream-function
//! representation of divergence-free currents.
//!
//! Periodic grids have `n` nodes per axis at `x_i = origin + i h` and use
//! Fourier differentiation (the Nyquist mode is dropped, which makes the
//! derivative matrix exactly skew-symmetric). Dirichlet and natural grids
//! have `n + 1` nodes per axis, both end points included, and use the
//! second-order summation-by-parts first derivative: centered in the
//! interior, one-sided at the two end nodes. Together with trapezoid
//! weights `H` it satisfies `H D + (H D)^T = diag(-1, 0, ..., 0, 1)`.
//!
//! All multi-component fields are stored component-major: component `c`
//! occupies `values[c * nodes .. (c + 1) * nodes]`, nodes are row-major
//! with axis 0 slowest. Currents are `D x m` tensors per node and the
//! component index is `k * D + l` (current `k`, spatial direction `l`).

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Periodic,
    Dirichlet,
    Natural,
}

impl Boundary {
    pub fn is_periodic(self) -> bool {
        matches!(self, Boundary::Periodic)
    }

    pub fn name(self) -> &'static str {
        match self {
            Boundary::Periodic => "periodic",
            Boundary::Dirichlet => "dirichlet",
            Boundary::Natural => "natural",
        }
    }
}

/// Derivative used on periodic grids. Bounded grids always use the
/// second-order summation-by-parts stencil.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    #[default]
    Spectral,
    /// `(f[i+1] - f[i-1]) / 2h`, the interior stencil of the bounded grids.
    Central,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dim: usize,
    intervals: [usize; 2],
    lengths: [f64; 2],
    origin: [f64; 2],
    boundary: Boundary,
    #[serde(default)]
    scheme: Scheme,
}

impl Grid {
    /// `intervals[i]` is the number of mesh intervals along axis `i`; only
    /// the first `dim` entries of each slice are read.
    pub fn new(dim: usize, intervals: &[usize], lengths: &[f64], boundary: Boundary) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidGrid(format!("dimension {dim} not supported (1 or 2)")));
        }
        if intervals.len() < dim || lengths.len() < dim {
            return Err(Error::InvalidGrid(format!(
                "need {dim} interval counts and lengths, got {} and {}",
                intervals.len(),
                lengths.len()
            )));
        }
        let mut n = [1usize; 2];
        let mut len = [1.0f64; 2];
        for axis in 0..dim {
            let ni = intervals[axis];
            if ni < 4 {
                return Err(Error::InvalidGrid(format!("axis {axis}: {ni} intervals, need at least 4")));
            }
            if boundary.is_periodic() && ni % 2 != 0 {
                return Err(Error::InvalidGrid(format!(
                    "axis {axis}: periodic spectral grids need an even point count, got {ni}"
                )));
            }
            let li = lengths[axis];
            if !(li.is_finite() && li > 0.0) {
                return Err(Error::InvalidGrid(format!("axis {axis}: length {li} must be positive")));
            }
            n[axis] = ni;
            len[axis] = li;
        }
        Ok(Self { dim, intervals: n, lengths: len, origin: [0.0; 2], boundary, scheme: Scheme::Spectral })
    }

    /// Square (or unit-interval) grid on `[0, length]^dim`.
    pub fn square(dim: usize, intervals: usize, length: f64, boundary: Boundary) -> Result<Self> {
        Self::new(dim, &[intervals; 2], &[length; 2], boundary)
    }

    pub fn with_origin(mut self, origin: [f64; 2]) -> Self {
        self.origin = origin;
        if self.dim == 1 {
            self.origin[1] = 0.0;
        }
        self
    }

    pub fn with_boundary(&self, boundary: Boundary) -> Result<Self> {
        let g = Self::new(self.dim, &self.intervals, &self.lengths, boundary)?;
        Ok(g.with_origin(self.origin).with_scheme(self.scheme))
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// Symbol of the periodic derivative along `axis`, in FFT order.
    pub fn axis_wavenumbers(&self, axis: usize) -> Vec<f64> {
        let n = self.nodes_along(axis);
        let k = derivative_wavenumbers(n, self.length(axis));
        match self.scheme {
            Scheme::Spectral => k,
            Scheme::Central => {
                let h = self.spacing(axis);
                k.iter().map(|k| if *k == 0.0 { 0.0 } else { (k * h).sin() / h }).collect()
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn intervals(&self, axis: usize) -> usize {
        self.intervals[axis]
    }

    pub fn length(&self, axis: usize) -> f64 {
        self.lengths[axis]
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.lengths[axis] / self.intervals[axis] as f64
    }

    /// Nodes along `axis`; 1 for axes beyond the grid dimension.
    pub fn nodes_along(&self, axis: usize) -> usize {
        if axis >= self.dim {
            1
        } else if self.boundary.is_periodic() {
            self.intervals[axis]
        } else {
            self.intervals[axis] + 1
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.nodes_along(0), self.nodes_along(1)]
    }

    pub fn node_count(&self) -> usize {
        self.nodes_along(0) * self.nodes_along(1)
    }

    /// Product of the mesh spacings.
    pub fn cell_volume(&self) -> f64 {
        (0..self.dim).map(|a| self.spacing(a)).product()
    }

    /// Lebesgue measure of the domain.
    pub fn volume(&self) -> f64 {
        (0..self.dim).map(|a| self.lengths[a]).product()
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.nodes_along(1) + j
    }

    pub fn multi_index(&self, idx: usize) -> [usize; 2] {
        let n1 = self.nodes_along(1);
        [idx / n1, idx % n1]
    }

    pub fn position(&self, idx: usize) -> [f64; 2] {
        let [i, j] = self.multi_index(idx);
        let mut x = [self.origin[0] + i as f64 * self.spacing(0), 0.0];
        if self.dim == 2 {
            x[1] = self.origin[1] + j as f64 * self.spacing(1);
        }
        x
    }

    /// Evaluate a function of position at every node.
    pub fn sample(&self, f: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
        (0..self.node_count()).map(|idx| f(self.position(idx))).collect()
    }

    fn axis_weights(&self, axis: usize) -> Vec<f64> {
        let n = self.nodes_along(axis);
        if axis >= self.dim {
            return vec![1.0];
        }
        let h = self.spacing(axis);
        let mut w = vec![h; n];
        if !self.boundary.is_periodic() {
            w[0] = 0.5 * h;
            w[n - 1] = 0.5 * h;
        }
        w
    }

    /// Quadrature weights: uniform on periodic grids, trapezoid otherwise.
    pub fn weights(&self) -> Vec<f64> {
        let w0 = self.axis_weights(0);
        let w1 = self.axis_weights(1);
        let mut w = Vec::with_capacity(self.node_count());
        for a in &w0 {
            for b in &w1 {
                w.push(a * b);
            }
        }
        w
    }

    /// True when the node touches the boundary of a bounded grid.
    pub fn is_boundary_node(&self, idx: usize) -> bool {
        if self.boundary.is_periodic() {
            return false;
        }
        let ij = self.multi_index(idx);
        (0..self.dim).any(|a| ij[a] == 0 || ij[a] == self.intervals[a])
    }

    /// The sub-grid covering the block of intervals starting at `start`
    /// with `intervals` intervals per axis. Only meaningful for bounded grids.
    pub fn subgrid(&self, start: [usize; 2], intervals: [usize; 2]) -> Result<Self> {
        if self.boundary.is_periodic() {
            return Err(Error::InvalidGrid("sub-grids are only defined for bounded grids".into()));
        }
        let mut lengths = [1.0; 2];
        let mut origin = [0.0; 2];
        for a in 0..self.dim {
            if start[a] + intervals[a] > self.intervals[a] {
                return Err(Error::InvalidGrid(format!("sub-grid exceeds axis {a}")));
            }
            lengths[a] = intervals[a] as f64 * self.spacing(a);
            origin[a] = self.origin[a] + start[a] as f64 * self.spacing(a);
        }
        Ok(Self::new(self.dim, &intervals, &lengths, self.boundary)?.with_origin(origin).with_scheme(self.scheme))
    }

    /// Copy the values of a scalar field on `self` onto `sub`, whose nodes
    /// must coincide with nodes of `self` (see [`Grid::subgrid`]).
    pub fn restrict(&self, sub: &Grid, field: &[f64]) -> Vec<f64> {
        let off: Vec<usize> = (0..2)
            .map(|a| {
                if a < self.dim {
                    ((sub.origin[a] - self.origin[a]) / self.spacing(a)).round() as usize
                } else {
                    0
                }
            })
            .collect();
        (0..sub.node_count())
            .map(|idx| {
                let [i, j] = sub.multi_index(idx);
                field[self.index(i + off[0], j + off[1])]
            })
            .collect()
    }
}

#[derive(Clone)]
struct AxisFft {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    wavenumbers: Vec<f64>,
}

impl AxisFft {
    fn new(planner: &mut FftPlanner<f64>, grid: &Grid, axis: usize) -> Self {
        let n = grid.nodes_along(axis);
        Self { forward: planner.plan_fft_forward(n), inverse: planner.plan_fft_inverse(n), wavenumbers: grid.axis_wavenumbers(axis) }
    }
}

/// Wavenumbers `2 pi k / L` in FFT order with the Nyquist entry set to zero.
pub fn derivative_wavenumbers(n: usize, length: f64) -> Vec<f64> {
    (0..n)
        .map(|k| {
            if 2 * k == n {
                0.0
            } else if 2 * k < n {
                2.0 * PI * k as f64 / length
            } else {
                2.0 * PI * (k as f64 - n as f64) / length
            }
        })
        .collect()
}

/// First-derivative operators along each axis of a grid.
#[derive(Clone)]
pub struct Operators {
    grid: Grid,
    fft: [Option<AxisFft>; 2],
}

impl std::fmt::Debug for Operators {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Operators").field("grid", &self.grid).finish()
    }
}

impl Operators {
    pub fn new(grid: &Grid) -> Self {
        let mut fft = [None, None];
        if grid.boundary().is_periodic() {
            let mut planner = FftPlanner::new();
            for (axis, slot) in fft.iter_mut().enumerate().take(grid.dim()) {
                *slot = Some(AxisFft::new(&mut planner, grid, axis));
            }
        }
        Self { grid: grid.clone(), fft }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    fn for_each_line(&self, axis: usize, input: &[f64], out: &mut [f64], mut f: impl FnMut(&[f64], &mut [f64])) {
        let [n0, n1] = self.grid.shape();
        let (len, stride, count, outer) = if axis == 0 { (n0, n1, n1, 1) } else { (n1, 1, n0, n1) };
        let mut line_in = vec![0.0; len];
        let mut line_out = vec![0.0; len];
        for l in 0..count {
            let base = l * outer;
            for t in 0..len {
                line_in[t] = input[base + t * stride];
            }
            f(&line_in, &mut line_out);
            for t in 0..len {
                out[base + t * stride] = line_out[t];
            }
        }
    }

    /// `out = D_axis input` for a scalar field.
    pub fn derivative(&self, axis: usize, input: &[f64], out: &mut [f64]) {
        assert!(axis < self.grid.dim(), "derivative along axis {axis} of a {}-D grid", self.grid.dim());
        match &self.fft[axis] {
            Some(plan) => {
                let mut buf = vec![Complex64::new(0.0, 0.0); self.grid.nodes_along(axis)];
                self.for_each_line(axis, input, out, |x, y| spectral_derivative(plan, &mut buf, x, y));
            }
            None => {
                let h = self.grid.spacing(axis);
                self.for_each_line(axis, input, out, |x, y| sbp_apply(h, x, y));
            }
        }
    }

    /// `out = D_axis^T input` (Euclidean transpose).
    pub fn derivative_transpose(&self, axis: usize, input: &[f64], out: &mut [f64]) {
        assert!(axis < self.grid.dim());
        match &self.fft[axis] {
            Some(_) => {
                self.derivative(axis, input, out);
                out.iter_mut().for_each(|v| *v = -*v);
            }
            None => {
                let h = self.grid.spacing(axis);
                self.for_each_line(axis, input, out, |x, y| sbp_transpose(h, x, y));
            }
        }
    }

    /// Gradient of a scalar field; output holds `D` components.
    pub fn gradient(&self, field: &[f64]) -> Result<Vec<f64>> {
        let n = self.grid.node_count();
        check_len("gradient input", field.len(), n)?;
        let d = self.grid.dim();
        let mut out = vec![0.0; d * n];
        for axis in 0..d {
            self.derivative(axis, field, &mut out[axis * n..(axis + 1) * n]);
        }
        Ok(out)
    }

    /// Divergence of a vector field with `D` components.
    pub fn divergence(&self, field: &[f64]) -> Result<Vec<f64>> {
        let n = self.grid.node_count();
        let d = self.grid.dim();
        check_len("divergence input", field.len(), d * n)?;
        let mut out = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        for axis in 0..d {
            self.derivative(axis, &field[axis * n..(axis + 1) * n], &mut tmp);
            out.iter_mut().zip(&tmp).for_each(|(o, t)| *o += t);
        }
        Ok(out)
    }
}

fn spectral_derivative(plan: &AxisFft, buf: &mut [Complex64], x: &[f64], y: &mut [f64]) {
    let n = x.len();
    for (b, v) in buf.iter_mut().zip(x) {
        *b = Complex64::new(*v, 0.0);
    }
    plan.forward.process(buf);
    for (b, k) in buf.iter_mut().zip(&plan.wavenumbers) {
        *b = Complex64::new(-k * b.im, k * b.re);
    }
    plan.inverse.process(buf);
    let scale = 1.0 / n as f64;
    for (o, b) in y.iter_mut().zip(buf.iter()) {
        *o = b.re * scale;
    }
}

fn sbp_apply(h: f64, f: &[f64], out: &mut [f64]) {
    let n = f.len() - 1;
    out[0] = (f[1] - f[0]) / h;
    for i in 1..n {
        out[i] = (f[i + 1] - f[i - 1]) / (2.0 * h);
    }
    out[n] = (f[n] - f[n - 1]) / h;
}

fn sbp_transpose(h: f64, y: &[f64], out: &mut [f64]) {
    let n = y.len() - 1;
    out.iter_mut().for_each(|v| *v = 0.0);
    out[0] -= y[0] / h;
    out[1] += y[0] / h;
    for i in 1..n {
        out[i + 1] += y[i] / (2.0 * h);
        out[i - 1] -= y[i] / (2.0 * h);
    }
    out[n] += y[n] / h;
    out[n - 1] -= y[n] / h;
}

/// Dense matrix of the one-dimensional derivative along `axis`.
pub(crate) fn axis_derivative_matrix(grid: &Grid, axis: usize) -> nalgebra::DMatrix<f64> {
    let line = Grid::new(1, &[grid.intervals(axis)], &[grid.length(axis)], grid.boundary()).expect("axis of a valid grid");
    let ops = Operators::new(&line);
    let n = line.node_count();
    let mut out = nalgebra::DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    let mut de = vec![0.0; n];
    for c in 0..n {
        e[c] = 1.0;
        ops.derivative(0, &e, &mut de);
        e[c] = 0.0;
        out.column_mut(c).copy_from_slice(&de);
    }
    out
}

/// One-dimensional quadrature weights along `axis`.
pub(crate) fn axis_weights(grid: &Grid, axis: usize) -> Vec<f64> {
    grid.axis_weights(axis)
}

pub(crate) fn check_len(what: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::DimensionMismatch(format!("{what}: length {got}, expected {expected}")));
    }
    Ok(())
}

/// `sum_nodes w (F, G)` for component-major fields of equal shape.
pub fn inner_product(grid: &Grid, f: &[f64], g: &[f64]) -> Result<f64> {
    let n = grid.node_count();
    if f.len() != g.len() || f.len() % n != 0 {
        return Err(Error::DimensionMismatch(format!(
            "inner product of fields with {} and {} values on {n} nodes",
            f.len(),
            g.len()
        )));
    }
    let w = grid.weights();
    let mut acc = 0.0;
    for (fc, gc) in f.chunks(n).zip(g.chunks(n)) {
        for ((a, b), wi) in fc.iter().zip(gc).zip(&w) {
            acc += wi * a * b;
        }
    }
    Ok(acc)
}

/// Stream functions: one scalar field per current column (D = 2). Empty in D = 1.
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialField {
    pub grid: Grid,
    pub m: usize,
    pub values: Vec<f64>,
}

impl PotentialField {
    pub fn zeros(grid: &Grid, m: usize) -> Self {
        let len = if grid.dim() == 2 { m * grid.node_count() } else { 0 };
        Self { grid: grid.clone(), m, values: vec![0.0; len] }
    }

    pub fn column(&self, k: usize) -> &[f64] {
        let n = self.grid.node_count();
        &self.values[k * n..(k + 1) * n]
    }
}

/// A `D x m` tensor field together with the constant part it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct CurrentField {
    pub grid: Grid,
    pub m: usize,
    pub values: Vec<f64>,
    pub mean_part: Vec<f64>,
}

impl CurrentField {
    pub fn constant(grid: &Grid, m: usize, c: &[f64]) -> Self {
        let n = grid.node_count();
        let mut values = Vec::with_capacity(c.len() * n);
        for v in c {
            values.extend(std::iter::repeat_n(*v, n));
        }
        Self { grid: grid.clone(), m, values, mean_part: c.to_vec() }
    }

    pub fn components(&self) -> usize {
        self.grid.dim() * self.m
    }

    pub fn component(&self, k: usize, l: usize) -> &[f64] {
        let n = self.grid.node_count();
        let c = k * self.grid.dim() + l;
        &self.values[c * n..(c + 1) * n]
    }

    /// Weighted spatial mean of every component.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.grid.node_count();
        let w = self.grid.weights();
        let vol: f64 = w.iter().sum();
        self.values
            .chunks(n)
            .map(|c| c.iter().zip(&w).map(|(v, wi)| v * wi).sum::<f64>() / vol)
            .collect()
    }
}

/// Apply `f -> grad^perp f` column by column into a component-major current
/// buffer (no constant part). `f` has `m` node fields.
pub(crate) fn perp_gradient(ops: &Operators, m: usize, f: &[f64], out: &mut [f64]) {
    let n = ops.grid().node_count();
    for k in 0..m {
        let fk = &f[k * n..(k + 1) * n];
        let (j1, j2) = out[2 * k * n..(2 * k + 2) * n].split_at_mut(n);
        ops.derivative(1, fk, j1);
        j1.iter_mut().for_each(|v| *v = -*v);
        ops.derivative(0, fk, j2);
    }
}

/// Euclidean transpose of [`perp_gradient`].
pub(crate) fn perp_gradient_transpose(ops: &Operators, m: usize, y: &[f64], out: &mut [f64]) {
    let n = ops.grid().node_count();
    let mut tmp = vec![0.0; n];
    for k in 0..m {
        let y1 = &y[2 * k * n..(2 * k + 1) * n];
        let y2 = &y[(2 * k + 1) * n..(2 * k + 2) * n];
        let fk = &mut out[k * n..(k + 1) * n];
        ops.derivative_transpose(0, y2, fk);
        ops.derivative_transpose(1, y1, &mut tmp);
        fk.iter_mut().zip(&tmp).for_each(|(a, b)| *a -= b);
    }
}

/// `J = grad^perp f + c` in D = 2; `J = c` in D = 1.
pub fn potential_to_current(ops: &Operators, f: &PotentialField, c: &[f64]) -> Result<CurrentField> {
    let grid = ops.grid();
    if &f.grid != grid {
        return Err(Error::DimensionMismatch("potential lives on a different grid".into()));
    }
    let d = grid.dim();
    check_len("constant part", c.len(), d * f.m)?;
    let mut out = CurrentField::constant(grid, f.m, c);
    if d == 2 {
        check_len("potential", f.values.len(), f.m * grid.node_count())?;
        let mut j = vec![0.0; 2 * f.m * grid.node_count()];
        perp_gradient(ops, f.m, &f.values, &mut j);
        out.values.iter_mut().zip(&j).for_each(|(a, b)| *a += b);
    }
    Ok(out)
}

/// Which potential nodes are unknowns for a given boundary kind.
///
/// * periodic: every node; the potentials annihilated by the spectral
///   `grad^perp` (constant and the three Nyquist sign patterns) form the
///   null space.
/// * dirichlet: nodes at least two intervals away from the boundary, so
///   the fluctuating current vanishes on the boundary nodes.
/// * natural: every node; constants form the null space.
#[derive(Clone, Debug)]
pub struct DofLayout {
    grid: Grid,
    m: usize,
    free: Vec<usize>,
    null_space: Vec<Vec<f64>>,
}

impl DofLayout {
    pub fn new(grid: &Grid, m: usize) -> Self {
        let n = grid.node_count();
        if grid.dim() == 1 {
            return Self { grid: grid.clone(), m, free: Vec::new(), null_space: Vec::new() };
        }
        let free: Vec<usize> = match grid.boundary() {
            Boundary::Periodic | Boundary::Natural => (0..n).collect(),
            Boundary::Dirichlet => (0..n)
                .filter(|&idx| {
                    let [i, j] = grid.multi_index(idx);
                    (2..=grid.intervals(0) - 2).contains(&i) && (2..=grid.intervals(1) - 2).contains(&j)
                })
                .collect(),
        };
        let per_column: Vec<Vec<f64>> = match grid.boundary() {
            Boundary::Periodic => {
                let patterns: [fn(usize, usize) -> f64; 4] = [
                    |_, _| 1.0,
                    |i, _| if i % 2 == 0 { 1.0 } else { -1.0 },
                    |_, j| if j % 2 == 0 { 1.0 } else { -1.0 },
                    |i, j| if (i + j) % 2 == 0 { 1.0 } else { -1.0 },
                ];
                patterns
                    .iter()
                    .map(|p| {
                        let v: Vec<f64> = free.iter().map(|&idx| {
                            let [i, j] = grid.multi_index(idx);
                            p(i, j)
                        })
                        .collect();
                        normalized(v)
                    })
                    .collect()
            }
            Boundary::Natural => vec![normalized(vec![1.0; free.len()])],
            Boundary::Dirichlet => Vec::new(),
        };
        let nf = free.len();
        let mut null_space = Vec::new();
        for k in 0..m {
            for z in &per_column {
                let mut v = vec![0.0; m * nf];
                v[k * nf..(k + 1) * nf].copy_from_slice(z);
                null_space.push(v);
            }
        }
        Self { grid: grid.clone(), m, free, null_space }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.free.len() * self.m
    }

    pub fn is_empty(&self) -> bool {
        self.free.is_empty()
    }

    pub fn free_nodes(&self) -> &[usize] {
        &self.free
    }

    /// Orthonormal basis of the potentials that produce no current.
    pub fn null_space(&self) -> &[Vec<f64>] {
        &self.null_space
    }

    /// Expand unknowns into full node fields (zero on constrained nodes).
    pub fn scatter(&self, dofs: &[f64], full: &mut [f64]) {
        let n = self.grid.node_count();
        let nf = self.free.len();
        full.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..self.m {
            for (t, &idx) in self.free.iter().enumerate() {
                full[k * n + idx] = dofs[k * nf + t];
            }
        }
    }

    pub fn gather(&self, full: &[f64], dofs: &mut [f64]) {
        let n = self.grid.node_count();
        let nf = self.free.len();
        for k in 0..self.m {
            for (t, &idx) in self.free.iter().enumerate() {
                dofs[k * nf + t] = full[k * n + idx];
            }
        }
    }

    /// Remove the null-space component of a vector of unknowns.
    pub fn project_out_null(&self, dofs: &mut [f64]) {
        for z in &self.null_space {
            let s: f64 = z.iter().zip(dofs.iter()).map(|(a, b)| a * b).sum();
            dofs.iter_mut().zip(z).for_each(|(d, zi)| *d -= s * zi);
        }
    }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn periodic(n: usize) -> Grid {
        Grid::square(2, n, 1.0, Boundary::Periodic).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::square(2, 3, 1.0, Boundary::Dirichlet).is_err());
        assert!(Grid::square(2, 7, 1.0, Boundary::Periodic).is_err());
        assert!(Grid::square(3, 8, 1.0, Boundary::Periodic).is_err());
        assert!(Grid::square(2, 8, 0.0, Boundary::Periodic).is_err());
        let g = Grid::square(2, 7, 2.0, Boundary::Dirichlet).unwrap();
        assert_eq!(g.shape(), [8, 8]);
        assert!((g.cell_volume() - (2.0 / 7.0f64).powi(2)).abs() < 1e-15);
    }

    #[test]
    fn gradient_of_constant_vanishes() {
        for b in [Boundary::Periodic, Boundary::Dirichlet] {
            let g = Grid::square(2, 12, 1.0, b).unwrap();
            let ops = Operators::new(&g);
            let grad = ops.gradient(&vec![3.5; g.node_count()]).unwrap();
            assert!(grad.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn spectral_gradient_of_sine() {
        let g = periodic(16);
        let ops = Operators::new(&g);
        let f = g.sample(|x| (2.0 * PI * x[0]).sin());
        let grad = ops.gradient(&f).unwrap();
        let n = g.node_count();
        for idx in 0..n {
            let x = g.position(idx);
            assert!((grad[idx] - 2.0 * PI * (2.0 * PI * x[0]).cos()).abs() < 1e-12);
            assert!(grad[n + idx].abs() < 1e-12);
        }
    }

    #[test]
    fn unit_torus_inner_products() {
        let g = periodic(16);
        let one = vec![1.0; g.node_count()];
        assert!((inner_product(&g, &one, &one).unwrap() - 1.0).abs() < 1e-14);
        let s = g.sample(|x| (2.0 * PI * x[0]).sin());
        assert!((inner_product(&g, &s, &s).unwrap() - 0.5).abs() < 1e-12);
        assert!(inner_product(&g, &s, &s[1..]).is_err());
    }

    #[test]
    fn summation_by_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // Periodic: exact adjointness.
        let g = periodic(12);
        let ops = Operators::new(&g);
        let n = g.node_count();
        let phi: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs = inner_product(&g, &ops.gradient(&phi).unwrap(), &v).unwrap()
            + inner_product(&g, &phi, &ops.divergence(&v).unwrap()).unwrap();
        assert!(lhs.abs() < 1e-12);

        // Bounded: the identity holds up to the boundary flux.
        let g = Grid::new(2, &[9, 6], &[1.0, 0.7], Boundary::Dirichlet).unwrap();
        let ops = Operators::new(&g);
        let n = g.node_count();
        let phi: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs = inner_product(&g, &ops.gradient(&phi).unwrap(), &v).unwrap()
            + inner_product(&g, &phi, &ops.divergence(&v).unwrap()).unwrap();
        let w1 = |j: usize| if j == 0 || j == g.intervals(1) { 0.5 * g.spacing(1) } else { g.spacing(1) };
        let w0 = |i: usize| if i == 0 || i == g.intervals(0) { 0.5 * g.spacing(0) } else { g.spacing(0) };
        let mut flux = 0.0;
        for j in 0..g.nodes_along(1) {
            let (a, b) = (g.index(0, j), g.index(g.intervals(0), j));
            flux += w1(j) * (phi[b] * v[b] - phi[a] * v[a]);
        }
        for i in 0..g.nodes_along(0) {
            let (a, b) = (g.index(i, 0), g.index(i, g.intervals(1)));
            flux += w0(i) * (phi[b] * v[n + b] - phi[a] * v[n + a]);
        }
        assert!((lhs - flux).abs() < 1e-12, "{lhs} vs {flux}");

        // Fields vanishing near the boundary: exact adjointness.
        let mut phi0 = phi.clone();
        for (idx, p) in phi0.iter_mut().enumerate() {
            if g.is_boundary_node(idx) {
                *p = 0.0;
            }
        }
        let lhs = inner_product(&g, &ops.gradient(&phi0).unwrap(), &v).unwrap()
            + inner_product(&g, &phi0, &ops.divergence(&v).unwrap()).unwrap();
        assert!(phi0.iter().any(|p| *p != 0.0));
        assert!(lhs.abs() < 1e-12);
    }

    #[test]
    fn transpose_matches_dense() {
        for b in [Boundary::Periodic, Boundary::Natural] {
            let g = Grid::new(2, &[6, 8], &[1.0, 1.3], b).unwrap();
            let ops = Operators::new(&g);
            let n = g.node_count();
            for axis in 0..2 {
                let mut dense = vec![0.0; n * n];
                let mut e = vec![0.0; n];
                let mut col = vec![0.0; n];
                for j in 0..n {
                    e.iter_mut().for_each(|v| *v = 0.0);
                    e[j] = 1.0;
                    ops.derivative(axis, &e, &mut col);
                    for i in 0..n {
                        dense[i * n + j] = col[i];
                    }
                }
                for i in 0..n {
                    e.iter_mut().for_each(|v| *v = 0.0);
                    e[i] = 1.0;
                    ops.derivative_transpose(axis, &e, &mut col);
                    for j in 0..n {
                        assert!((col[j] - dense[i * n + j]).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn perp_gradient_is_divergence_free() {
        let g = periodic(16);
        let ops = Operators::new(&g);
        let mut f = PotentialField::zeros(&g, 2);
        let s = g.sample(|x| (2.0 * PI * x[0]).sin());
        f.values[..g.node_count()].copy_from_slice(&s);
        let c = [0.3, -0.2, 1.0, 0.5];
        let j = potential_to_current(&ops, &f, &c).unwrap();
        let n = g.node_count();
        for idx in 0..n {
            let x = g.position(idx);
            assert!((j.component(0, 0)[idx] - 0.3).abs() < 1e-12);
            assert!((j.component(0, 1)[idx] - (-0.2 + 2.0 * PI * (2.0 * PI * x[0]).cos())).abs() < 1e-11);
        }
        for k in 0..2 {
            let mut v = j.component(k, 0).to_vec();
            v.extend_from_slice(j.component(k, 1));
            let div = ops.divergence(&v).unwrap();
            assert!(div.iter().all(|d| d.abs() < 1e-10));
        }
        let mean = j.mean();
        for (a, b) in mean.iter().zip(&c) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bounded_perp_gradient_is_exactly_divergence_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Grid::new(2, &[10, 7], &[1.0, 1.0], Boundary::Dirichlet).unwrap();
        let ops = Operators::new(&g);
        let layout = DofLayout::new(&g, 1);
        let dofs: Vec<f64> = (0..layout.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut f = PotentialField::zeros(&g, 1);
        layout.scatter(&dofs, &mut f.values);
        let j = potential_to_current(&ops, &f, &[0.0, 0.0]).unwrap();
        let div = ops.divergence(&j.values).unwrap();
        assert!(div.iter().all(|d| d.abs() < 1e-12));
        for idx in 0..g.node_count() {
            if g.is_boundary_node(idx) {
                assert_eq!(j.values[idx], 0.0);
                assert_eq!(j.values[g.node_count() + idx], 0.0);
            }
        }
        let mean = j.mean();
        assert!(mean.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn one_dimensional_current_is_constant() {
        let g = Grid::square(1, 16, 1.0, Boundary::Periodic).unwrap();
        let ops = Operators::new(&g);
        let f = PotentialField::zeros(&g, 2);
        let j = potential_to_current(&ops, &f, &[1.5, -2.0]).unwrap();
        assert!(j.component(0, 0).iter().all(|&v| v == 1.5));
        assert!(j.component(1, 0).iter().all(|&v| v == -2.0));
        assert!(DofLayout::new(&g, 2).is_empty());
    }

    #[test]
    fn null_space_produces_no_current() {
        for b in [Boundary::Periodic, Boundary::Natural] {
            let g = Grid::square(2, 8, 1.0, b).unwrap();
            let ops = Operators::new(&g);
            let layout = DofLayout::new(&g, 2);
            assert_eq!(layout.null_space().len(), if b.is_periodic() { 8 } else { 2 });
            for z in layout.null_space() {
                let mut f = PotentialField::zeros(&g, 2);
                layout.scatter(z, &mut f.values);
                let j = potential_to_current(&ops, &f, &[0.0; 4]).unwrap();
                assert!(j.values.iter().all(|v| v.abs() < 1e-10));
            }
        }
    }

    #[test]
    fn subgrid_restriction() {
        let g = Grid::square(2, 8, 2.0, Boundary::Dirichlet).unwrap();
        let sub = g.subgrid([4, 0], [4, 4]).unwrap();
        assert_eq!(sub.origin(), [1.0, 0.0]);
        let f = g.sample(|x| x[0] + 10.0 * x[1]);
        let r = g.restrict(&sub, &f);
        for (idx, v) in r.iter().enumerate() {
            let x = sub.position(idx);
            assert!((v - (x[0] + 10.0 * x[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn central_scheme_matches_the_interior_stencil() {
        let g = periodic(16).with_scheme(Scheme::Central);
        let ops = Operators::new(&g);
        let f = g.sample(|x| (2.0 * PI * x[0]).sin() * (4.0 * PI * x[1]).cos());
        let mut d = vec![0.0; f.len()];
        ops.derivative(0, &f, &mut d);
        let h = g.spacing(0);
        let n = g.nodes_along(0);
        for i in 0..n {
            for j in 0..g.nodes_along(1) {
                let fd = (f[g.index((i + 1) % n, j)] - f[g.index((i + n - 1) % n, j)]) / (2.0 * h);
                assert!((d[g.index(i, j)] - fd).abs() < 1e-12);
            }
        }
    }

}

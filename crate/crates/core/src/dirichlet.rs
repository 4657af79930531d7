//! The nonlocal Dirichlet problem `(-Delta)^theta u = 0` on `Omega`,
//! `u = f` off `Omega`, solved two ways: as a Schur complement system for
//! the fractional stiffness matrix, and as the trace of the weighted
//! harmonic extension on the half-space grid.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::energy::FracEnergyForm;
use crate::error::{Error, Result};
use crate::extension::{default_ymax, GridLayout, HalfSpaceGrid};
use crate::space::{fit_line, Space};
use crate::spectral::{check_theta, SpectralDecomposition, DEFAULT_EIGENTOLERANCE};

#[derive(Debug, Clone)]
pub struct DirichletProblem {
    space: Arc<Space>,
    dec: Arc<SpectralDecomposition>,
    form: Arc<FracEnergyForm>,
    theta: f64,
    omega: Vec<bool>,
    f: Vec<f64>,
}

impl DirichletProblem {
    pub fn new(space: Space, theta: f64, omega: Vec<bool>, f: Vec<f64>) -> Result<Self> {
        check_theta(theta)?;
        let dec = SpectralDecomposition::new(&space, DEFAULT_EIGENTOLERANCE)?;
        let form = FracEnergyForm::new(&dec, theta)?;
        Self::with_parts(Arc::new(space), Arc::new(dec), Arc::new(form), omega, f)
    }

    /// Builds a problem that reuses an existing decomposition and stiffness.
    pub fn with_parts(
        space: Arc<Space>,
        dec: Arc<SpectralDecomposition>,
        form: Arc<FracEnergyForm>,
        omega: Vec<bool>,
        f: Vec<f64>,
    ) -> Result<Self> {
        let n = space.n();
        if omega.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: omega.len(),
            });
        }
        if f.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: f.len(),
            });
        }
        if dec.n() != n || form.n() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: dec.n(),
            });
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("boundary data"));
        }
        if !omega.iter().any(|&b| b) {
            return Err(Error::InvalidProblem("domain is empty".into()));
        }
        if omega.iter().all(|&b| b) {
            return Err(Error::InvalidProblem(
                "complement of the domain is empty".into(),
            ));
        }
        Ok(Self {
            theta: form.theta,
            space,
            dec,
            form,
            omega,
            f,
        })
    }

    /// Same space, domain and exponent with new data.
    pub fn with_data(&self, f: Vec<f64>) -> Result<Self> {
        Self::with_parts(
            self.space.clone(),
            self.dec.clone(),
            self.form.clone(),
            self.omega.clone(),
            f,
        )
    }

    pub fn space(&self) -> &Space {
        &self.space
    }

    pub fn decomposition(&self) -> &SpectralDecomposition {
        &self.dec
    }

    pub fn form(&self) -> &FracEnergyForm {
        &self.form
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn omega(&self) -> &[bool] {
        &self.omega
    }

    pub fn f(&self) -> &[f64] {
        &self.f
    }

    pub fn interior(&self) -> Vec<usize> {
        (0..self.omega.len()).filter(|&x| self.omega[x]).collect()
    }

    pub fn exterior(&self) -> Vec<usize> {
        (0..self.omega.len()).filter(|&x| !self.omega[x]).collect()
    }

    /// `(min, max)` of the data on the complement of the domain.
    pub fn data_range(&self) -> (f64, f64) {
        self.exterior()
            .into_iter()
            .map(|x| self.f[x])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn data_oscillation(&self) -> f64 {
        let (lo, hi) = self.data_range();
        hi - lo
    }

    fn block(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        let k = &self.form.stiffness;
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| k[(rows[i], cols[j])])
    }
}

/// Mask of the vertices of a `rows x cols` lattice at lattice distance at
/// least `margin` from its border.
pub fn grid_interior_mask(rows: usize, cols: usize, margin: usize) -> Vec<bool> {
    let mut mask = vec![false; rows * cols];
    for r in margin..rows.saturating_sub(margin) {
        for c in margin..cols.saturating_sub(margin) {
            mask[r * cols + c] = true;
        }
    }
    mask
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Spectral,
    Extension,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Solution {
    pub route: Route,
    pub theta: f64,
    pub omega: Vec<bool>,
    pub u: Vec<f64>,
    /// `E_theta(u, u)`.
    pub energy: f64,
    /// `max_{x in Omega} |E_theta(u, e_x)|`.
    pub residual: f64,
    /// `residual / (|K|_inf |u|_inf)`.
    pub scaled_residual: f64,
    /// Solver iterations, zero for the direct solve.
    pub iterations: usize,
}

impl Solution {
    fn assemble(problem: &DirichletProblem, route: Route, u: Vec<f64>, iterations: usize) -> Self {
        let residual = residual_check(&u, problem);
        Self {
            route,
            theta: problem.theta,
            omega: problem.omega.clone(),
            energy: problem.form.energy(&u),
            scaled_residual: residual / residual_scale(problem, &u),
            residual,
            u,
            iterations,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x_index,in_domain,u\n");
        for (x, v) in self.u.iter().enumerate() {
            writeln!(out, "{x},{},{v:e}", self.omega[x]).unwrap();
        }
        out
    }
}

/// `max_{x in Omega} |(K u)(x)|`, the largest Euler-Lagrange defect
/// against the indicator test functions of the domain.
pub fn residual_check(u: &[f64], problem: &DirichletProblem) -> f64 {
    let ku = problem.form.apply(u);
    problem
        .interior()
        .into_iter()
        .map(|x| ku[x].abs())
        .fold(0.0, f64::max)
}

fn residual_scale(problem: &DirichletProblem, u: &[f64]) -> f64 {
    let k = &problem.form.stiffness;
    let knorm = k
        .row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let unorm = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (knorm * unorm).max(f64::MIN_POSITIVE)
}

/// Direct solve of `K_{Omega Omega} u_Omega = -K_{Omega, Omega^c} f`.
pub fn solve_spectral(problem: &DirichletProblem) -> Result<Solution> {
    let inner = problem.interior();
    let outer = problem.exterior();
    let kii = problem.block(&inner, &inner);
    let kio = problem.block(&inner, &outer);
    let fo = DVector::from_iterator(outer.len(), outer.iter().map(|&x| problem.f[x]));
    let rhs = -(kio * fo);
    let chol = Cholesky::new(kii).ok_or(Error::SingularSystem)?;
    let ui = chol.solve(&rhs);
    let mut u = problem.f.clone();
    for (i, &x) in inner.iter().enumerate() {
        u[x] = ui[i];
    }
    Ok(Solution::assemble(problem, Route::Spectral, u, 0))
}

/// Preconditioned conjugate gradient controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterSpec {
    /// Stop once the preconditioned residual norm falls below this
    /// fraction of its value for the zero initial guess.
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for IterSpec {
    fn default() -> Self {
        Self {
            rel_tol: 1e-12,
            max_iter: 20_000,
        }
    }
}

/// Graded grid with `cells` cells up to the default height.
pub fn default_extension_grid(problem: &DirichletProblem, cells: usize) -> Result<HalfSpaceGrid> {
    HalfSpaceGrid::new(
        problem.theta,
        default_ymax(&problem.dec),
        cells,
        GridLayout::graded_for(problem.theta),
    )
}

pub const DEFAULT_EXTENSION_CELLS: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct ExtensionSolve {
    pub solution: Solution,
    /// Field on `X x {y_j}`, column `j` at height `y_j`.
    pub field: DMatrix<f64>,
    pub pcg_residual: f64,
}

/// Operator of the discrete weighted energy on the product grid, applied
/// without assembly. Unknowns are stored column-major, `x + n j`.
struct ProductOperator<'a> {
    n: usize,
    rows: usize,
    mu: &'a DVector<f64>,
    edges: Vec<(usize, usize, f64)>,
    degree: Vec<f64>,
    weights: &'a [f64],
    stiff: Vec<f64>,
}

impl<'a> ProductOperator<'a> {
    fn new(space: &'a Space, grid: &'a HalfSpaceGrid) -> Self {
        let n = space.n();
        let mut edges = Vec::new();
        for x in 0..n {
            for z in (x + 1)..n {
                let c = space.cond()[(x, z)];
                if c > 0.0 {
                    edges.push((x, z, c));
                }
            }
        }
        let ys = grid.ys();
        let stiff = grid
            .weights()
            .iter()
            .enumerate()
            .map(|(j, w)| {
                let dy = ys[j + 1] - ys[j];
                w / (dy * dy)
            })
            .collect();
        Self {
            n,
            rows: ys.len(),
            mu: space.mu(),
            edges,
            degree: (0..n).map(|x| space.degree(x)).collect(),
            weights: grid.weights(),
            stiff,
        }
    }

    fn len(&self) -> usize {
        self.n * self.rows
    }

    fn apply(&self, u: &[f64], out: &mut [f64]) {
        let n = self.n;
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut mid = vec![0.0; n];
        let mut lap = vec![0.0; n];
        for (j, &w) in self.weights.iter().enumerate() {
            let lo = j * n;
            let hi = lo + n;
            let c = self.stiff[j];
            for x in 0..n {
                let flux = c * self.mu[x] * (u[hi + x] - u[lo + x]);
                out[lo + x] -= flux;
                out[hi + x] += flux;
                mid[x] = 0.5 * (u[lo + x] + u[hi + x]);
                lap[x] = 0.0;
            }
            for &(x, z, k) in &self.edges {
                let d = k * (mid[x] - mid[z]);
                lap[x] += d;
                lap[z] -= d;
            }
            for x in 0..n {
                let v = 0.5 * w * lap[x];
                out[lo + x] += v;
                out[hi + x] += v;
            }
        }
    }
}

/// Exact inverse of the column blocks of the product operator (one
/// tridiagonal system in `y` per vertex), by the Thomas algorithm.
struct ColumnPreconditioner {
    n: usize,
    rows: usize,
    /// `first_free[x]` is 1 when the boundary node of column `x` is fixed.
    first_free: Vec<usize>,
    upper: Vec<f64>,
    pivot: Vec<f64>,
}

impl ColumnPreconditioner {
    fn new(op: &ProductOperator<'_>, free: &[bool]) -> Self {
        let (n, rows) = (op.n, op.rows);
        let mut diag = vec![0.0; n * rows];
        let mut off = vec![0.0; n * rows];
        for (j, &w) in op.weights.iter().enumerate() {
            for x in 0..n {
                let vertical = op.stiff[j] * op.mu[x];
                let horizontal = 0.25 * w * op.degree[x];
                diag[j * n + x] += vertical + horizontal;
                diag[(j + 1) * n + x] += vertical + horizontal;
                off[j * n + x] = -vertical + horizontal;
            }
        }
        let first_free: Vec<usize> = (0..n).map(|x| usize::from(!free[x])).collect();
        let mut upper = vec![0.0; n * rows];
        let mut pivot = vec![0.0; n * rows];
        for x in 0..n {
            let start = first_free[x];
            for j in start..rows {
                let k = j * n + x;
                let p = if j == start {
                    diag[k]
                } else {
                    let kp = (j - 1) * n + x;
                    diag[k] - off[kp] * upper[kp]
                };
                pivot[k] = p;
                upper[k] = if j + 1 < rows { off[k] / p } else { 0.0 };
            }
        }
        Self {
            n,
            rows,
            first_free,
            upper,
            pivot,
        }
    }

    fn apply(&self, r: &[f64], z: &mut [f64]) {
        let n = self.n;
        for x in 0..n {
            let start = self.first_free[x];
            if start == 1 {
                z[x] = 0.0;
            }
            // forward sweep; the sub-diagonal equals upper * pivot of the row above
            for j in start..self.rows {
                let k = j * n + x;
                let prev = if j == start {
                    0.0
                } else {
                    let kp = (j - 1) * n + x;
                    self.upper[kp] * self.pivot[kp] * z[kp]
                };
                z[k] = (r[k] - prev) / self.pivot[k];
            }
            for j in (start..self.rows - 1).rev() {
                let k = j * n + x;
                z[k] -= self.upper[k] * z[k + n];
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes the discrete weighted energy with `u(x, 0) = f(x)` off the
/// domain, free boundary values on the domain (zero normal flux there) and
/// a free top row; the trace is the row `y = 0`.
pub fn solve_extension(
    problem: &DirichletProblem,
    grid: &HalfSpaceGrid,
    solver: &IterSpec,
) -> Result<Solution> {
    Ok(solve_extension_from(problem, grid, solver, None)?.solution)
}

/// As [`solve_extension`], starting from `initial` (an `n x (m+1)` field)
/// when given; its fixed entries are overwritten by the data.
pub fn solve_extension_from(
    problem: &DirichletProblem,
    grid: &HalfSpaceGrid,
    solver: &IterSpec,
    initial: Option<&DMatrix<f64>>,
) -> Result<ExtensionSolve> {
    let expected = 1.0 - 2.0 * problem.theta;
    if (grid.a() - expected).abs() > 1e-14 {
        return Err(Error::GridThetaMismatch {
            grid_a: grid.a(),
            expected,
        });
    }
    let space = problem.space();
    let n = space.n();
    let rows = grid.ys().len();
    let op = ProductOperator::new(space, grid);
    let pre = ColumnPreconditioner::new(&op, &problem.omega);
    let free: Vec<bool> = (0..op.len())
        .map(|k| k >= n || problem.omega[k])
        .collect();

    let mut u = match initial {
        Some(init) => {
            if init.nrows() != n || init.ncols() != rows {
                return Err(Error::DimensionMismatch {
                    expected: n * rows,
                    found: init.len(),
                });
            }
            init.as_slice().to_vec()
        }
        None => {
            let (lo, hi) = problem.data_range();
            let fill = 0.5 * (lo + hi);
            let column: Vec<f64> = (0..n)
                .map(|x| if problem.omega[x] { fill } else { problem.f[x] })
                .collect();
            (0..op.len()).map(|k| column[k % n]).collect()
        }
    };
    for x in problem.exterior() {
        u[x] = problem.f[x];
    }

    let mut scratch = vec![0.0; op.len()];
    let mut z = vec![0.0; op.len()];
    // reference norm: residual of the field that is zero on free nodes
    let fixed_only: Vec<f64> = (0..op.len())
        .map(|k| if free[k] { 0.0 } else { u[k] })
        .collect();
    op.apply(&fixed_only, &mut scratch);
    let b: Vec<f64> = (0..op.len())
        .map(|k| if free[k] { -scratch[k] } else { 0.0 })
        .collect();
    pre.apply(&b, &mut z);
    let reference = dot(&b, &z).max(0.0).sqrt();

    op.apply(&u, &mut scratch);
    let mut r: Vec<f64> = (0..op.len())
        .map(|k| if free[k] { -scratch[k] } else { 0.0 })
        .collect();
    pre.apply(&r, &mut z);
    let mut rz = dot(&r, &z);
    let mut p = z.clone();
    let target = solver.rel_tol * reference;
    let mut iterations = 0;
    let mut norm = rz.max(0.0).sqrt();
    while norm > target && reference > 0.0 {
        if iterations >= solver.max_iter {
            return Err(Error::IterationBudgetExceeded {
                iterations,
                residual: norm / reference,
            });
        }
        op.apply(&p, &mut scratch);
        for k in 0..op.len() {
            if !free[k] {
                scratch[k] = 0.0;
            }
        }
        let pap = dot(&p, &scratch);
        if !(pap > 0.0) {
            return Err(Error::SingularSystem);
        }
        let alpha = rz / pap;
        for k in 0..op.len() {
            u[k] += alpha * p[k];
            r[k] -= alpha * scratch[k];
        }
        pre.apply(&r, &mut z);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for k in 0..op.len() {
            p[k] = z[k] + beta * p[k];
        }
        norm = rz.max(0.0).sqrt();
        iterations += 1;
    }

    let field = DMatrix::from_vec(n, rows, u);
    let trace: Vec<f64> = field.column(0).iter().copied().collect();
    Ok(ExtensionSolve {
        solution: Solution::assemble(problem, Route::Extension, trace, iterations),
        field,
        pcg_residual: if reference > 0.0 { norm / reference } else { 0.0 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaxPrincipleReport {
    pub data_min: f64,
    pub data_max: f64,
    pub inside_min: f64,
    pub inside_max: f64,
    /// Domain vertices where `u` is smallest and largest.
    pub argmin_inside: usize,
    pub argmax_inside: usize,
    /// Complement vertices carrying the data extremes.
    pub argmin_data: usize,
    pub argmax_data: usize,
    pub tolerance: f64,
    pub holds: bool,
    /// Both bounds are strict by more than the tolerance.
    pub strict: bool,
}

fn scale_of(v: &[f64]) -> f64 {
    v.iter().fold(1.0f64, |m, x| m.max(x.abs()))
}

fn extreme(idx: &[usize], v: &[f64], larger: bool) -> (usize, f64) {
    let mut best = (idx[0], v[idx[0]]);
    for &x in &idx[1..] {
        if (larger && v[x] > best.1) || (!larger && v[x] < best.1) {
            best = (x, v[x]);
        }
    }
    best
}

pub fn maximum_principle_check(sol: &Solution, problem: &DirichletProblem) -> MaxPrincipleReport {
    let inner = problem.interior();
    let outer = problem.exterior();
    let (argmin_data, data_min) = extreme(&outer, &problem.f, false);
    let (argmax_data, data_max) = extreme(&outer, &problem.f, true);
    let (argmin_inside, inside_min) = extreme(&inner, &sol.u, false);
    let (argmax_inside, inside_max) = extreme(&inner, &sol.u, true);
    let tolerance = 1e-12 * scale_of(&problem.f).max(scale_of(&sol.u));
    MaxPrincipleReport {
        data_min,
        data_max,
        inside_min,
        inside_max,
        argmin_inside,
        argmax_inside,
        argmin_data,
        argmax_data,
        tolerance,
        holds: inside_min >= data_min - tolerance && inside_max <= data_max + tolerance,
        strict: inside_min > data_min + tolerance && inside_max < data_max - tolerance,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrongMaxCase {
    pub max_inside: f64,
    pub max_global: f64,
    pub min_inside: f64,
    pub min_global: f64,
    pub constant: bool,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrongMaxReport {
    pub cases: Vec<StrongMaxCase>,
    pub all_hold: bool,
}

/// For each solved problem: unless `u` is constant, its extremes over the
/// domain stay strictly inside its extremes over the whole space.
pub fn strong_maximum_check(family: &[(&DirichletProblem, &Solution)]) -> StrongMaxReport {
    let cases: Vec<StrongMaxCase> = family
        .iter()
        .map(|(problem, sol)| {
            let inner = problem.interior();
            let all: Vec<usize> = (0..sol.u.len()).collect();
            let max_inside = extreme(&inner, &sol.u, true).1;
            let min_inside = extreme(&inner, &sol.u, false).1;
            let max_global = extreme(&all, &sol.u, true).1;
            let min_global = extreme(&all, &sol.u, false).1;
            let tol = 1e-10 * scale_of(&sol.u);
            let constant = max_global - min_global <= tol;
            let holds =
                constant || (max_inside < max_global - tol && min_inside > min_global + tol);
            StrongMaxCase {
                max_inside,
                max_global,
                min_inside,
                min_global,
                constant,
                holds,
            }
        })
        .collect();
    StrongMaxReport {
        all_hold: cases.iter().all(|c| c.holds),
        cases,
    }
}

/// `max_B u / min_B u` on `B = B(center, radius)` with `2B` inside the domain.
pub fn harnack_quotient(
    sol: &Solution,
    problem: &DirichletProblem,
    center: usize,
    radius: f64,
) -> Result<f64> {
    let space = problem.space();
    if center >= space.n() || !(radius >= 0.0) {
        return Err(Error::InvalidParams(format!(
            "ball needs a valid center and radius, got {center}, {radius}"
        )));
    }
    if space.ball(center, 2.0 * radius).iter().any(|&z| !problem.omega[z]) {
        return Err(Error::BallNotCompactlyInside { center, radius });
    }
    let tol = 1e-12 * scale_of(&sol.u);
    if let Some((index, &value)) = sol.u.iter().enumerate().find(|(_, &v)| v < -tol) {
        return Err(Error::NegativeSolution { index, value });
    }
    let ball = space.ball(center, radius);
    let hi = ball.iter().map(|&z| sol.u[z]).fold(f64::NEG_INFINITY, f64::max);
    let lo = ball.iter().map(|&z| sol.u[z].max(0.0)).fold(f64::INFINITY, f64::min);
    Ok(if hi == lo { 1.0 } else { hi / lo })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HarnackEntry {
    pub center: usize,
    pub radius: f64,
    pub quotient: f64,
}

/// Quotients on every ball of the given radius whose double lies in the domain.
pub fn harnack_scan(sol: &Solution, problem: &DirichletProblem, radius: f64) -> Result<Vec<HarnackEntry>> {
    let mut out = Vec::new();
    for center in problem.interior() {
        match harnack_quotient(sol, problem, center, radius) {
            Ok(quotient) => out.push(HarnackEntry {
                center,
                radius,
                quotient,
            }),
            Err(Error::BallNotCompactlyInside { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HolderFit {
    /// Fitted exponent; `+inf` when every oscillation vanishes.
    pub alpha_fit: f64,
    pub r2: Option<f64>,
    /// `(ln r, ln mean oscillation)` per radius.
    pub points: Vec<(f64, f64)>,
}

/// Slope of the mean oscillation of `u` over balls `B(x, r)` contained in
/// the domain against `r`, on log scales.
pub fn holder_estimate(sol: &Solution, problem: &DirichletProblem) -> Result<HolderFit> {
    let space = problem.space();
    let n = space.n();
    let mut radii: Vec<f64> = Vec::new();
    for x in 0..n {
        for z in 0..n {
            let d = space.dist()[(x, z)];
            if d > 0.0 {
                radii.push(d);
            }
        }
    }
    radii.sort_by(f64::total_cmp);
    radii.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs());

    let mut per_radius = Vec::new();
    for &r in &radii {
        let mut total = 0.0;
        let mut count = 0usize;
        for x in problem.interior() {
            let ball = space.ball(x, r);
            if ball.iter().any(|&z| !problem.omega[z]) {
                continue;
            }
            let hi = ball.iter().map(|&z| sol.u[z]).fold(f64::NEG_INFINITY, f64::max);
            let lo = ball.iter().map(|&z| sol.u[z]).fold(f64::INFINITY, f64::min);
            total += hi - lo;
            count += 1;
        }
        if count > 0 {
            per_radius.push((r, total / count as f64));
        }
    }
    if per_radius.len() < 3 {
        return Err(Error::InsufficientScales {
            found: per_radius.len(),
        });
    }
    let tol = 1e-12 * scale_of(&sol.u);
    if per_radius.iter().all(|&(_, o)| o <= tol) {
        return Ok(HolderFit {
            alpha_fit: f64::INFINITY,
            r2: None,
            points: Vec::new(),
        });
    }
    let points: Vec<(f64, f64)> = per_radius
        .into_iter()
        .filter(|&(_, o)| o > tol)
        .map(|(r, o)| (r.ln(), o.ln()))
        .collect();
    match fit_line(&points) {
        Some((slope, _, r2)) => Ok(HolderFit {
            alpha_fit: slope,
            r2: Some(r2),
            points,
        }),
        None => Err(Error::InsufficientScales {
            found: points.len(),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniquenessReport {
    /// Smallest eigenvalue of `K_{Omega Omega}`.
    pub lambda_min: f64,
    pub positive_definite: bool,
    /// `max |trace_a - trace_b|` between extension solves from two starts.
    pub trace_gap: f64,
    pub tolerance: f64,
    pub traces_agree: bool,
}

pub fn uniqueness_check(
    problem: &DirichletProblem,
    grid: &HalfSpaceGrid,
    solver: &IterSpec,
) -> Result<UniquenessReport> {
    let inner = problem.interior();
    let kii = problem.block(&inner, &inner);
    let lambda_min = SymmetricEigen::new(kii)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);

    let plain = solve_extension_from(problem, grid, solver, None)?;
    let n = problem.space().n();
    let rows = grid.ys().len();
    let amplitude = scale_of(&problem.f);
    let shaken = DMatrix::from_fn(n, rows, |x, j| {
        plain.field[(x, j)] + amplitude * ((1 + x) as f64 * 0.7 + j as f64 * 1.3).sin()
    });
    let other = solve_extension_from(problem, grid, solver, Some(&shaken))?;
    let trace_gap = plain
        .solution
        .u
        .iter()
        .zip(&other.solution.u)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let tolerance = 1e-8 * amplitude;
    Ok(UniquenessReport {
        lambda_min,
        positive_definite: lambda_min > 0.0,
        trace_gap,
        tolerance,
        traces_agree: trace_gap <= tolerance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompetitorReport {
    pub count: usize,
    /// Smallest `E(h) - E(u)` over the competitors.
    pub min_gap: f64,
    /// Competitors with `E(h) < E(u) - 1e-12 * scale`.
    pub violations: usize,
}

/// Compares the solution energy with random feasible competitors (`h = f`
/// off the domain): half drawn freely over the data range, half as small
/// perturbations of `u`.
pub fn competitor_check(sol: &Solution, problem: &DirichletProblem, count: usize, seed: u64) -> CompetitorReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = problem.data_range();
    let spread = (hi - lo).max(1.0);
    let inner = problem.interior();
    let mut min_gap = f64::INFINITY;
    let mut violations = 0;
    for i in 0..count {
        let mut h = sol.u.clone();
        for &x in &inner {
            h[x] = if i % 2 == 0 {
                rng.gen_range(lo - spread..hi + spread)
            } else {
                sol.u[x] + 1e-3 * spread * rng.gen_range(-1.0..1.0)
            };
        }
        let eh = problem.form.energy(&h);
        let gap = eh - sol.energy;
        let scale = eh.abs().max(sol.energy.abs()).max(f64::MIN_POSITIVE);
        if gap < -1e-12 * scale {
            violations += 1;
        }
        min_gap = min_gap.min(gap);
    }
    CompetitorReport {
        count,
        min_gap,
        violations,
    }
}

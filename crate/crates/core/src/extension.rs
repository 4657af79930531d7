//! The weighted half-space `X x (0, inf)` with measure `y^a dy dmu`,
//! `a = 1 - 2 theta`, and the Poisson-type extension of boundary data.
//!
//! Each eigenmode `phi_k` extends as `g_{lambda_k}(y) phi_k(x)` where
//!
//! ```text
//! g_lambda(y) = C_a y^{1-a} int_0^inf s^{(a-3)/2} exp(-y^2/4s) exp(-lambda s) ds
//!             = C_a int_0^inf sigma^{-1-theta} exp(-1/(4 sigma) - lambda y^2 sigma) dsigma,
//! ```
//!
//! with `1/C_a = int_0^inf tau^{(a-3)/2} exp(-1/(4 tau)) dtau = 4^theta Gamma(theta)`.
//! The profile equals 1 at `y = 0` and decays like `exp(-sqrt(lambda) y)`.
//! Near the boundary `g_lambda(y) = 1 + A y^{2 theta} + B y^2 + O(y^{2+2 theta})`,
//! which is what the Dirichlet-to-Neumann stencil exploits.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::energy::frac_energy;
use crate::error::{Error, Result};
use crate::quadrature::{integrate, integrate_half_line, QuadratureSpec};
use crate::space::{fit_line, Space};
use crate::spectral::{check_len, check_theta, SpectralDecomposition};

/// Node placement along the vertical axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridLayout {
    /// `y_j = Ymax j / m`.
    Uniform,
    /// `y_j = Ymax ratio^(m - j)` for `j >= 1`, so `y_1 = Ymax ratio^(m-1)`.
    Geometric { ratio: f64 },
    /// `y_j = Ymax (j / m)^power`.
    Graded { power: f64 },
}

impl GridLayout {
    pub fn geometric() -> Self {
        GridLayout::Geometric { ratio: 0.5 }
    }

    /// Power grading matched to the `y^{2 theta}` boundary behaviour of the
    /// extension so that P1 elements converge at second order.
    pub fn graded_for(theta: f64) -> Self {
        GridLayout::Graded {
            power: (1.5 / theta).max(2.0),
        }
    }
}

/// `int_lo^hi y^a dy`.
fn cell_weight(lo: f64, hi: f64, a: f64) -> f64 {
    (hi.powf(1.0 + a) - lo.powf(1.0 + a)) / (1.0 + a)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HalfSpaceGrid {
    theta: f64,
    a: f64,
    ys: Vec<f64>,
    weights: Vec<f64>,
    ymax: f64,
    layout: GridLayout,
}

impl HalfSpaceGrid {
    /// Grid with `m` cells on `[0, ymax]`.
    pub fn new(theta: f64, ymax: f64, m: usize, layout: GridLayout) -> Result<Self> {
        check_theta(theta)?;
        if !(ymax > 0.0) || !ymax.is_finite() {
            return Err(Error::InvalidParams(format!("Ymax must be positive, got {ymax}")));
        }
        if m < 8 {
            return Err(Error::InvalidParams(format!("need at least 8 cells, got {m}")));
        }
        let ys: Vec<f64> = match layout {
            GridLayout::Uniform => (0..=m).map(|j| ymax * j as f64 / m as f64).collect(),
            GridLayout::Geometric { ratio } => {
                if !(ratio > 0.0 && ratio < 1.0) {
                    return Err(Error::InvalidParams(format!(
                        "geometric ratio must lie in (0, 1), got {ratio}"
                    )));
                }
                std::iter::once(0.0)
                    .chain((1..=m).map(|j| ymax * ratio.powi((m - j) as i32)))
                    .collect()
            }
            GridLayout::Graded { power } => {
                if !(power >= 1.0) {
                    return Err(Error::InvalidParams(format!(
                        "grading power must be >= 1, got {power}"
                    )));
                }
                (0..=m)
                    .map(|j| ymax * (j as f64 / m as f64).powf(power))
                    .collect()
            }
        };
        if ys[1] <= 0.0 || ys.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParams(
                "grid nodes are not strictly increasing".into(),
            ));
        }
        let a = 1.0 - 2.0 * theta;
        let weights = ys.windows(2).map(|w| cell_weight(w[0], w[1], a)).collect();
        Ok(Self {
            theta,
            a,
            ys,
            weights,
            ymax,
            layout,
        })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn ymax(&self) -> f64 {
        self.ymax
    }

    pub fn layout(&self) -> GridLayout {
        self.layout
    }

    pub fn cells(&self) -> usize {
        self.weights.len()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `int_0^r y^a dy` accumulated cell by cell, the last one partial.
    pub fn weight_below(&self, r: f64) -> f64 {
        let mut acc = 0.0;
        for (j, w) in self.weights.iter().enumerate() {
            let (lo, hi) = (self.ys[j], self.ys[j + 1]);
            if hi <= r {
                acc += w;
            } else {
                if lo < r {
                    acc += cell_weight(lo, r, self.a);
                }
                break;
            }
        }
        acc
    }

    fn check_theta_match(&self, theta: f64) -> Result<()> {
        let expected = 1.0 - 2.0 * theta;
        if (self.a - expected).abs() > 1e-14 {
            return Err(Error::GridThetaMismatch {
                grid_a: self.a,
                expected,
            });
        }
        Ok(())
    }
}

/// Height at which the slowest nonzero mode has decayed to `1e-8`.
pub fn default_ymax(dec: &SpectralDecomposition) -> f64 {
    8.0 * std::f64::consts::LN_10 / dec.spectral_gap().sqrt()
}

/// `d_theta = 2^{2 theta - 1} Gamma(theta) / Gamma(1 - theta)`.
pub fn dtn_constant(theta: f64) -> f64 {
    2f64.powf(2.0 * theta - 1.0) * gamma(theta) / gamma(1.0 - theta)
}

/// `C_a = 1 / (4^theta Gamma(theta))`.
pub fn normalization_constant(theta: f64) -> f64 {
    1.0 / (4f64.powf(theta) * gamma(theta))
}

/// `int_0^inf sigma^{p-1} exp(-1/(4 sigma) - beta sigma) dsigma` in the
/// variable `s = ln sigma`, where the integrand decays double
/// exponentially on both sides and the window is finite.
fn log_scale_integral(p: f64, beta: f64, quad: &QuadratureSpec) -> Result<f64> {
    const CUT: f64 = 50.0;
    // the exponent peaks near s = -ln(4 beta) / 2 once beta is large
    let peak = if beta > 0.0 { -0.5 * (4.0 * beta).ln() } else { 0.0 };
    let lo = (-(4.0 * CUT).ln()).min(peak - 10.0);
    let hi = if beta > 0.0 {
        (CUT / beta).ln().max(peak + 10.0)
    } else {
        // bare power tail exp(p s), p < 0
        CUT / -p
    };
    let r = integrate(
        |s| (p * s - 0.25 * (-s).exp() - beta * s.exp()).exp(),
        lo,
        hi,
        quad,
    )?;
    Ok(r.value)
}

/// `C_a` from its defining integral.
pub fn normalization_constant_by_quadrature(theta: f64, quad: &QuadratureSpec) -> Result<f64> {
    check_theta(theta)?;
    // tau^{(a-3)/2} = tau^{-1-theta}
    Ok(1.0 / log_scale_integral(-theta, 0.0, quad)?)
}

/// `g_lambda(y)`.
pub fn mode_profile(lambda: f64, theta: f64, y: f64, quad: &QuadratureSpec) -> Result<f64> {
    check_theta(theta)?;
    if lambda < 0.0 || y < 0.0 {
        return Err(Error::InvalidParams(format!(
            "profile needs lambda, y >= 0, got {lambda}, {y}"
        )));
    }
    let beta = lambda * y * y;
    if beta == 0.0 {
        return Ok(1.0);
    }
    let v = log_scale_integral(-theta, beta, quad)?;
    Ok((normalization_constant(theta) * v).min(1.0))
}

/// `g_lambda'(y) = -2 lambda y C_a int sigma^{-theta} exp(-1/(4 sigma) - lambda y^2 sigma) dsigma`.
pub fn mode_profile_derivative(lambda: f64, theta: f64, y: f64, quad: &QuadratureSpec) -> Result<f64> {
    check_theta(theta)?;
    if lambda < 0.0 || y <= 0.0 {
        return Err(Error::InvalidParams(format!(
            "profile derivative needs lambda >= 0, y > 0, got {lambda}, {y}"
        )));
    }
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let v = log_scale_integral(1.0 - theta, lambda * y * y, quad)?;
    Ok(-2.0 * lambda * y * normalization_constant(theta) * v)
}

/// `int_0^inf y^a (g'^2 + lambda g^2) dy` by nested quadrature.
pub fn mode_energy(
    lambda: f64,
    theta: f64,
    outer: &QuadratureSpec,
    inner: &QuadratureSpec,
) -> Result<f64> {
    check_theta(theta)?;
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let a = 1.0 - 2.0 * theta;
    // the closure cannot propagate errors, so the first one is parked here
    let failure = std::sync::Mutex::new(None);
    let r = integrate_half_line(
        |y| {
            let g = mode_profile(lambda, theta, y, inner);
            let dg = mode_profile_derivative(lambda, theta, y, inner);
            match (g, dg) {
                (Ok(g), Ok(dg)) => y.powf(a) * (dg * dg + lambda * g * g),
                (Err(e), _) | (_, Err(e)) => {
                    failure.lock().unwrap().get_or_insert(e);
                    0.0
                }
            }
        },
        outer,
    )?;
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    Ok(r.value)
}

/// Samples of `u = Pi_a f` on `X x {y_j}`; column `j` is the row `y = y_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtensionField {
    pub values: DMatrix<f64>,
    pub grid: HalfSpaceGrid,
    pub theta: f64,
}

impl ExtensionField {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn boundary(&self) -> DVector<f64> {
        self.values.column(0).into_owned()
    }

    /// CSV with columns `x_index,y,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x_index,y,value\n");
        for x in 0..self.values.nrows() {
            for (j, y) in self.grid.ys().iter().enumerate() {
                writeln!(out, "{x},{y:e},{:e}", self.values[(x, j)]).unwrap();
            }
        }
        out
    }
}

/// `u(x, y_j) = sum_k <f, phi_k>_mu g_{lambda_k}(y_j) phi_k(x)`; the row
/// `y = 0` is `f` itself.
pub fn poisson_extend(
    dec: &SpectralDecomposition,
    theta: f64,
    f: &[f64],
    grid: &HalfSpaceGrid,
    quad: &QuadratureSpec,
) -> Result<ExtensionField> {
    check_theta(theta)?;
    grid.check_theta_match(theta)?;
    check_len(f, dec.n())?;
    let coeffs = dec.coefficients(f)?;
    let ys = grid.ys();

    let profiles: Vec<Vec<f64>> = dec
        .lambdas()
        .as_slice()
        .par_iter()
        .map(|&l| {
            ys.iter()
                .map(|&y| mode_profile(l, theta, y, quad))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;

    let n = dec.n();
    let mut values = DMatrix::zeros(n, ys.len());
    values.set_column(0, &DVector::from_column_slice(f));
    for j in 1..ys.len() {
        let c = DVector::from_fn(n, |k, _| coeffs[k] * profiles[k][j]);
        values.set_column(j, &dec.synthesize(&c));
    }
    Ok(ExtensionField {
        values,
        grid: grid.clone(),
        theta,
    })
}

/// Finite-difference realizations of `-d_theta lim y^a du/dy`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DtnStencil {
    /// Flux through the first cell with its exact resistance
    /// `int_0^{y_1} y^{-a} dy`. First order only for `theta = 1/2`.
    OneSided,
    /// Fits `u(y) - u(0) = A y^{2 theta} + B y^2` through the first two
    /// rows; the flux is `2 theta A`. Second order.
    #[default]
    TwoPoint,
}

pub fn dtn_apply(u: &ExtensionField, stencil: DtnStencil) -> Result<DVector<f64>> {
    let ys = u.grid.ys();
    if ys.len() < 3 || !(ys[1] > 0.0) {
        return Err(Error::DegenerateFirstCell);
    }
    let theta = u.theta;
    let a = u.grid.a();
    let d = dtn_constant(theta);
    let (y1, y2) = (ys[1], ys[2]);
    let n = u.n();
    let out = match stencil {
        DtnStencil::OneSided => {
            let conductance = (1.0 - a) / y1.powf(1.0 - a);
            DVector::from_fn(n, |x, _| {
                -d * conductance * (u.values[(x, 1)] - u.values[(x, 0)])
            })
        }
        DtnStencil::TwoPoint => {
            let p = 2.0 * theta;
            let det = y1.powf(p) * y2 * y2 - y2.powf(p) * y1 * y1;
            if det == 0.0 || !det.is_finite() {
                return Err(Error::DegenerateFirstCell);
            }
            DVector::from_fn(n, |x, _| {
                let d1 = u.values[(x, 1)] - u.values[(x, 0)];
                let d2 = u.values[(x, 2)] - u.values[(x, 0)];
                let lead = (d1 * y2 * y2 - d2 * y1 * y1) / det;
                -d * p * lead
            })
        }
    };
    Ok(out)
}

/// Discrete weighted energy of a field and the value it approximates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExtensionEnergy {
    /// `sum_j w_j [sum_x mu (du/dy)^2 + E_X(u_mid)]` over the cells.
    pub energy: f64,
    /// `E_theta(f, f) / d_theta`, the continuum energy of `Pi_a f`.
    pub target: f64,
    /// Exact energy of `Pi_a f` above `Ymax`, summed over modes.
    pub tail: f64,
}

impl ExtensionEnergy {
    pub fn relative_error(&self) -> f64 {
        if self.target == 0.0 {
            self.energy.abs()
        } else {
            (self.energy - self.target).abs() / self.target
        }
    }
}

/// Weighted Dirichlet energy of the sampled field, with P1 interpolation in
/// `y` and the horizontal form evaluated at cell midpoints.
pub fn discrete_field_energy(values: &DMatrix<f64>, grid: &HalfSpaceGrid, space: &Space) -> f64 {
    let ys = grid.ys();
    let mu = space.mu();
    let n = values.nrows();
    let mut total = 0.0;
    for (j, w) in grid.weights().iter().enumerate() {
        let dy = ys[j + 1] - ys[j];
        let mut vertical = 0.0;
        for x in 0..n {
            let s = (values[(x, j + 1)] - values[(x, j)]) / dy;
            vertical += mu[x] * s * s;
        }
        let mid: Vec<f64> = (0..n)
            .map(|x| 0.5 * (values[(x, j)] + values[(x, j + 1)]))
            .collect();
        total += w * (vertical + space.dirichlet_form(&mid, &mid));
    }
    total
}

pub fn extension_energy(
    u: &ExtensionField,
    space: &Space,
    dec: &SpectralDecomposition,
    tail_tolerance: f64,
    quad: &QuadratureSpec,
) -> Result<ExtensionEnergy> {
    let f: Vec<f64> = u.boundary().iter().copied().collect();
    let theta = u.theta;
    let ymax = u.grid.ymax();
    let coeffs = dec.coefficients(&f)?;
    let mut tail = 0.0;
    for (&l, c) in dec.lambdas().iter().zip(coeffs.iter()) {
        if l == 0.0 || *c == 0.0 {
            continue;
        }
        // int_Y^inf y^a (g'^2 + lambda g^2) = -Y^a g(Y) g'(Y)
        let g = mode_profile(l, theta, ymax, quad)?;
        let dg = mode_profile_derivative(l, theta, ymax, quad)?;
        tail += c * c * ymax.powf(u.grid.a()) * g * dg.abs();
    }
    if tail > tail_tolerance {
        return Err(Error::TailNotConverged {
            bound: tail,
            tolerance: tail_tolerance,
        });
    }
    Ok(ExtensionEnergy {
        energy: discrete_field_energy(&u.values, &u.grid, space),
        target: frac_energy(dec, theta, &f)? / dtn_constant(theta),
        tail,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VerticalModulus {
    pub numeric: f64,
    pub exact: f64,
}

fn subset_mass(space: &Space, subset: &[usize]) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    let mut seen = vec![false; space.n()];
    let mut mass = 0.0;
    for &x in subset {
        if x >= space.n() {
            return Err(Error::InvalidParams(format!("point {x} out of range")));
        }
        if !seen[x] {
            seen[x] = true;
            mass += space.mu()[x];
        }
    }
    Ok(mass)
}

/// 2-modulus of the vertical segments `{x} x [0, h]`, `x in subset`.
///
/// Per column the discrete program `min sum w_j rho_j^2` subject to
/// `sum rho_j dy_j >= 1` has the Lagrange solution `rho_j ~ dy_j / w_j` and
/// optimum `1 / sum_j dy_j^2 / w_j`; the continuum optimum is
/// `(1 - a) / h^{1-a}` with density `rho(t) ~ t^{-a}`.
pub fn vertical_modulus(
    space: &Space,
    subset: &[usize],
    h: f64,
    theta: f64,
    cells: usize,
    layout: GridLayout,
) -> Result<VerticalModulus> {
    let mass = subset_mass(space, subset)?;
    if !(h > 0.0) {
        return Err(Error::InvalidParams(format!("height must be positive, got {h}")));
    }
    let grid = HalfSpaceGrid::new(theta, h, cells, layout)?;
    Ok(VerticalModulus {
        numeric: mass * column_modulus(&grid),
        exact: mass * (1.0 - grid.a()) / h.powf(1.0 - grid.a()),
    })
}

fn column_modulus(grid: &HalfSpaceGrid) -> f64 {
    let ys = grid.ys();
    let resistance: f64 = grid
        .weights()
        .iter()
        .enumerate()
        .map(|(j, w)| {
            let dy = ys[j + 1] - ys[j];
            dy * dy / w
        })
        .sum();
    1.0 / resistance
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModulusLimit {
    /// Richardson-extrapolated limit of the numeric modulus.
    pub limit: f64,
    pub exact: f64,
    /// `(cells, numeric)` along the refinement sequence.
    pub levels: Vec<(usize, f64)>,
}

/// Refines graded grids (`128 * 2^k` cells) and extrapolates the numeric
/// modulus with the order observed on the last three levels.
pub fn vertical_modulus_limit(
    space: &Space,
    subset: &[usize],
    h: f64,
    theta: f64,
) -> Result<ModulusLimit> {
    let layout = GridLayout::Graded {
        power: 2.0 / (2.0 * theta).min(1.0),
    };
    let mut levels = Vec::new();
    let mut exact = 0.0;
    for k in 0..7 {
        let cells = 128usize << k;
        let vm = vertical_modulus(space, subset, h, theta, cells, layout)?;
        exact = vm.exact;
        levels.push((cells, vm.numeric));
    }
    let v: Vec<f64> = levels.iter().map(|l| l.1).collect();
    let k = v.len();
    let (v0, v1, v2) = (v[k - 3], v[k - 2], v[k - 1]);
    let limit = if (v1 - v2).abs() < 1e-15 * v2.abs() {
        v2
    } else {
        let ratio = (v0 - v1) / (v1 - v2);
        if ratio > 1.0 {
            v2 - (v1 - v2) / (ratio - 1.0)
        } else {
            v2
        }
    };
    Ok(ModulusLimit {
        limit,
        exact,
        levels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CodimCheck {
    pub lhs: f64,
    pub rhs: f64,
}

/// `mu_a(B_Z((x,0), r) cap Z_+)` under the max product metric, where the
/// ball is `B_X(x, r) x (0, r)`, compared with
/// `r^{1+a} / (1+a) mu(B_X(x, r))`.
pub fn codim_ball_check(space: &Space, grid: &HalfSpaceGrid, x: usize, r: f64) -> Result<CodimCheck> {
    if r > grid.ymax() {
        return Err(Error::RadiusExceedsGrid {
            radius: r,
            ymax: grid.ymax(),
        });
    }
    if !(r >= 0.0) || x >= space.n() {
        return Err(Error::InvalidParams(format!(
            "codim check needs r >= 0 and a valid point, got r = {r}, x = {x}"
        )));
    }
    let vertical = grid.weight_below(r);
    let lhs: f64 = space
        .ball(x, r)
        .into_iter()
        .map(|z| space.mu()[z] * vertical)
        .sum();
    let a = grid.a();
    let rhs = r.powf(1.0 + a) / (1.0 + a) * space.ball_measure(x, r);
    Ok(CodimCheck { lhs, rhs })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceReport {
    /// The boundary row `u(., 0)`.
    pub trace: Vec<f64>,
    /// Radii `y_j`, finest first.
    pub radii: Vec<f64>,
    /// `max_x |avg_{B((x,0),r)} u - u(x,0)|` per radius.
    pub deviations: Vec<f64>,
    /// Log-log slope of the deviation against the radius on the finest radii.
    pub observed_rate: Option<f64>,
}

/// Boundary values together with the averaged-limit diagnostic: averages of
/// `u` over `B_X(x, r) x (0, r)` against `mu x y^a dy`, for `r = y_j`.
pub fn trace(u: &ExtensionField, space: &Space) -> TraceReport {
    let grid = &u.grid;
    let ys = grid.ys();
    let n = u.n();
    let f: Vec<f64> = u.boundary().iter().copied().collect();
    let mut radii = Vec::new();
    let mut deviations = Vec::new();
    // column integrals int_0^{y_j} u(x, y) y^a dy, trapezoidal in measure
    let mut column = vec![0.0; n];
    let mut cumulative = Vec::with_capacity(ys.len());
    cumulative.push(column.clone());
    for (j, w) in grid.weights().iter().enumerate() {
        for x in 0..n {
            column[x] += w * 0.5 * (u.values[(x, j)] + u.values[(x, j + 1)]);
        }
        cumulative.push(column.clone());
    }
    for j in 1..ys.len() {
        let r = ys[j];
        let vertical = grid.weight_below(r);
        let mut worst: f64 = 0.0;
        for x in 0..n {
            let ball = space.ball(x, r);
            let num: f64 = ball.iter().map(|&z| space.mu()[z] * cumulative[j][z]).sum();
            let den: f64 = ball.iter().map(|&z| space.mu()[z]).sum::<f64>() * vertical;
            worst = worst.max((num / den - f[x]).abs());
        }
        radii.push(r);
        deviations.push(worst);
    }
    let pts: Vec<(f64, f64)> = radii
        .iter()
        .zip(&deviations)
        .take(4)
        .filter(|(_, &d)| d > 0.0)
        .map(|(&r, &d)| (r.ln(), d.ln()))
        .collect();
    TraceReport {
        trace: f,
        observed_rate: fit_line(&pts).map(|l| l.0),
        radii,
        deviations,
    }
}

//! Besov and fractional energies.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::spectral::{check_len, check_theta, check_time, frac_power, SpectralDecomposition};
use crate::space::Space;

/// Besov energy with kernel `1 / (d(z,w)^{2 theta} mu(B(z, d(z,w))))`,
/// summed over ordered pairs `z != w` against `mu(z) mu(w)`.
pub fn besov_energy(space: &Space, theta: f64, f: &[f64]) -> Result<f64> {
    check_theta(theta)?;
    let n = space.n();
    check_len(f, n)?;
    let dist = space.dist();
    let mu = space.mu();
    let rows: Vec<f64> = (0..n)
        .map(|z| {
            let mut acc = 0.0;
            for w in 0..n {
                if w == z {
                    continue;
                }
                let diff = f[z] - f[w];
                if diff == 0.0 {
                    continue;
                }
                let d = dist[(z, w)];
                let ball = space.ball_measure(z, d);
                acc += diff * diff / (d.powf(2.0 * theta) * ball) * mu[w];
            }
            acc * mu[z]
        })
        .collect();
    Ok(pairwise_sum(&rows))
}

/// Tree reduction; its order depends only on the length of `xs`.
fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        len => {
            let (a, b) = xs.split_at(len / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// `E_theta(f, h) = sum_k lambda_k^theta <f,phi_k> <h,phi_k>`.
pub fn frac_bilinear(dec: &SpectralDecomposition, theta: f64, f: &[f64], h: &[f64]) -> Result<f64> {
    check_theta(theta)?;
    let cf = dec.coefficients(f)?;
    let ch = dec.coefficients(h)?;
    Ok(dec
        .lambdas()
        .iter()
        .zip(cf.iter().zip(ch.iter()))
        .map(|(&l, (a, b))| frac_power(l, theta) * a * b)
        .sum())
}

pub fn frac_energy(dec: &SpectralDecomposition, theta: f64, f: &[f64]) -> Result<f64> {
    frac_bilinear(dec, theta, f, f)
}

/// Matrix form of `E_theta`: `f^T K h = E_theta(f, h)` with
/// `K = M Phi diag(lambda^theta) Phi^T M`.
#[derive(Debug, Clone, PartialEq)]
pub struct FracEnergyForm {
    pub theta: f64,
    pub stiffness: DMatrix<f64>,
}

impl FracEnergyForm {
    pub fn new(dec: &SpectralDecomposition, theta: f64) -> Result<Self> {
        check_theta(theta)?;
        let kernel = dec.kernel_fn(|l| frac_power(l, theta));
        let mu = dec.mu();
        let n = dec.n();
        let stiffness = DMatrix::from_fn(n, n, |x, z| mu[x] * kernel[(x, z)] * mu[z]);
        Ok(Self { theta, stiffness })
    }

    pub fn n(&self) -> usize {
        self.stiffness.nrows()
    }

    pub fn bilinear(&self, f: &[f64], h: &[f64]) -> f64 {
        let f = DVector::from_column_slice(f);
        let h = DVector::from_column_slice(h);
        f.dot(&(&self.stiffness * h))
    }

    pub fn energy(&self, f: &[f64]) -> f64 {
        self.bilinear(f, f)
    }

    pub fn apply(&self, f: &[f64]) -> DVector<f64> {
        &self.stiffness * DVector::from_column_slice(f)
    }
}

/// `E_{theta,t}(f,f) = sum_k (1 - e^{-t lambda_k^theta}) / t <f,phi_k>^2`.
pub fn regularized_energy(dec: &SpectralDecomposition, theta: f64, t: f64, f: &[f64]) -> Result<f64> {
    check_theta(theta)?;
    check_time(t)?;
    let c = dec.coefficients(f)?;
    Ok(dec
        .lambdas()
        .iter()
        .zip(c.iter())
        .map(|(&l, ck)| -(-t * frac_power(l, theta)).exp_m1() / t * ck * ck)
        .sum())
}

/// The same energy as `(1/2t) sum_{x,y} |f(x) - f(y)|^2 q_t(x,y) mu(x) mu(y)`.
pub fn regularized_energy_double_sum(
    dec: &SpectralDecomposition,
    theta: f64,
    t: f64,
    f: &[f64],
) -> Result<f64> {
    check_len(f, dec.n())?;
    let q = dec.frac_heat_kernel(theta, t)?;
    let mu = dec.mu();
    let n = dec.n();
    let rows: Vec<f64> = (0..n)
        .map(|x| {
            let mut acc = 0.0;
            for y in 0..n {
                let d = f[x] - f[y];
                acc += d * d * q.entries[(x, y)] * mu[y];
            }
            acc * mu[x]
        })
        .collect();
    Ok(pairwise_sum(&rows) / (2.0 * t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComparabilityReport {
    pub theta: f64,
    pub n: usize,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub family_size: usize,
}

impl ComparabilityReport {
    pub fn spread(&self) -> f64 {
        self.ratio_max / self.ratio_min
    }
}

/// Extremes of `besov_energy / frac_energy` over a family of functions.
pub fn comparability_report(
    space: &Space,
    dec: &SpectralDecomposition,
    theta: f64,
    family: &[Vec<f64>],
) -> Result<ComparabilityReport> {
    check_theta(theta)?;
    if family.is_empty() {
        return Err(Error::InvalidParams("empty function family".into()));
    }
    let mut ratio_min = f64::INFINITY;
    let mut ratio_max = f64::NEG_INFINITY;
    for (index, f) in family.iter().enumerate() {
        check_len(f, space.n())?;
        if f.iter().all(|&v| v == f[0]) {
            return Err(Error::ConstantFunctionInFamily { index });
        }
        let ratio = besov_energy(space, theta, f)? / frac_energy(dec, theta, f)?;
        ratio_min = ratio_min.min(ratio);
        ratio_max = ratio_max.max(ratio);
    }
    Ok(ComparabilityReport {
        theta,
        n: space.n(),
        ratio_min,
        ratio_max,
        family_size: family.len(),
    })
}

/// Exact extremes of `besov_energy / frac_energy` over nonconstant functions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComparabilityBounds {
    pub theta: f64,
    pub lower: f64,
    pub upper: f64,
}

impl ComparabilityBounds {
    pub fn spread(&self) -> f64 {
        self.upper / self.lower
    }
}

/// Matrix of the Besov quadratic form: `f^T B f = besov_energy(f)`.
pub fn besov_matrix(space: &Space, theta: f64) -> Result<DMatrix<f64>> {
    check_theta(theta)?;
    let n = space.n();
    let dist = space.dist();
    let mu = space.mu();
    let mut b = DMatrix::zeros(n, n);
    for z in 0..n {
        for w in 0..n {
            if w == z {
                continue;
            }
            let d = dist[(z, w)];
            let c = mu[z] * mu[w] / (d.powf(2.0 * theta) * space.ball_measure(z, d));
            b[(z, z)] += c;
            b[(w, w)] += c;
            b[(z, w)] -= c;
            b[(w, z)] -= c;
        }
    }
    Ok(b)
}

/// Generalized eigenvalues of the pencil `(B, K)` on the complement of the
/// constants, where both forms vanish.
pub fn comparability_bounds(
    space: &Space,
    dec: &SpectralDecomposition,
    theta: f64,
) -> Result<ComparabilityBounds> {
    let n = space.n();
    if n < 2 {
        return Err(Error::InvalidParams("need at least two points".into()));
    }
    let b = besov_matrix(space, theta)?;
    let k = FracEnergyForm::new(dec, theta)?.stiffness;
    let mut seed = DMatrix::<f64>::identity(n, n);
    seed.column_mut(0).fill(1.0);
    let q = seed.qr().q();
    let p = q.columns(1, n - 1).into_owned();
    let kr = p.transpose() * &k * &p;
    let br = p.transpose() * b * &p;
    let chol = kr
        .cholesky()
        .ok_or_else(|| Error::InvalidParams("fractional form is not definite off constants".into()))?;
    let linv = chol
        .l()
        .try_inverse()
        .ok_or_else(|| Error::InvalidParams("singular Cholesky factor".into()))?;
    let m = &linv * br * linv.transpose();
    let m = (&m + m.transpose()) * 0.5;
    let ev = nalgebra::SymmetricEigen::new(m).eigenvalues;
    Ok(ComparabilityBounds {
        theta,
        lower: ev.min(),
        upper: ev.max(),
    })
}

//! Spectral calculus of the graph Laplacian in the `mu`-weighted inner
//! product: heat kernels, fractional powers and the subordinated kernel.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::quadrature::{integrate_half_line, QuadratureSpec};
use crate::space::Space;

pub const DEFAULT_EIGENTOLERANCE: f64 = 1e-10;

pub(crate) fn check_theta(theta: f64) -> Result<()> {
    if theta > 0.0 && theta < 1.0 {
        Ok(())
    } else {
        Err(Error::ThetaOutOfRange(theta))
    }
}

pub(crate) fn check_time(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonpositiveTime(t))
    }
}

pub(crate) fn check_len(f: &[f64], n: usize) -> Result<()> {
    if f.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: f.len(),
        });
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("function values"));
    }
    Ok(())
}

/// `Delta_X f(x) = mu(x)^-1 sum_y c(x,y) (f(y) - f(x))`.
pub fn laplacian_apply(space: &Space, f: &[f64]) -> Result<DVector<f64>> {
    let n = space.n();
    check_len(f, n)?;
    let cond = space.cond();
    Ok(DVector::from_fn(n, |x, _| {
        let mut acc = 0.0;
        for y in 0..n {
            let c = cond[(x, y)];
            if c != 0.0 {
                acc += c * (f[y] - f[x]);
            }
        }
        acc / space.mu()[x]
    }))
}

/// Eigenpairs of `-Delta_X`, eigenvectors orthonormal in `l^2(mu)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDecomposition {
    lambdas: DVector<f64>,
    phis: DMatrix<f64>,
    mu: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Heat,
    FracHeat,
}

/// Integral kernel `k(x, z)` of an operator, `(K f)(x) = sum_z k(x,z) f(z) mu(z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub entries: DMatrix<f64>,
    pub time: f64,
    pub kind: KernelKind,
}

impl KernelMatrix {
    pub fn apply(&self, f: &[f64], mu: &DVector<f64>) -> DVector<f64> {
        let weighted = DVector::from_fn(f.len(), |z, _| f[z] * mu[z]);
        &self.entries * weighted
    }

    /// Largest deviation of `sum_z k(x,z) mu(z)` from one.
    pub fn markov_error(&self, mu: &DVector<f64>) -> f64 {
        (0..self.entries.nrows())
            .map(|x| (self.entries.row(x).transpose().dot(mu) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_symmetric(&self) -> bool {
        self.entries == self.entries.transpose()
    }

    pub fn min_entry(&self) -> f64 {
        self.entries.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

impl SpectralDecomposition {
    /// Full decomposition through the symmetric matrix
    /// `M^-1/2 (D - C) M^-1/2`. Eigenvalues ascend; the zero mode is set to
    /// the exact normalized constant; other eigenvectors have their first
    /// non-negligible entry positive.
    pub fn new(space: &Space, eigentolerance: f64) -> Result<Self> {
        let n = space.n();
        let mu = space.mu().clone();
        let sqrt_mu = mu.map(f64::sqrt);
        let cond = space.cond();
        let sym = DMatrix::from_fn(n, n, |i, j| {
            let v = if i == j {
                space.degree(i)
            } else {
                -cond[(i, j)]
            };
            v / (sqrt_mu[i] * sqrt_mu[j])
        });
        let scale = sym.amax().max(1.0);
        let eig = SymmetricEigen::try_new(sym, f64::EPSILON * 0.5, 10_000 * n.max(1)).ok_or(
            Error::EigensolverNoConvergence {
                tolerance: eigentolerance,
                defect: f64::INFINITY,
            },
        )?;

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

        let mut lambdas = DVector::zeros(n);
        let mut phis = DMatrix::zeros(n, n);
        for (k, &src) in order.iter().enumerate() {
            lambdas[k] = eig.eigenvalues[src].max(0.0);
            let mut col = DVector::from_fn(n, |x, _| eig.eigenvectors[(x, src)] / sqrt_mu[x]);
            let cut = 1e-8 * col.amax();
            if let Some(first) = col.iter().copied().find(|v| v.abs() > cut) {
                if first < 0.0 {
                    col.neg_mut();
                }
            }
            phis.set_column(k, &col);
        }
        // connected graph: the kernel is exactly the constants
        lambdas[0] = 0.0;
        let c = 1.0 / space.total_mass().sqrt();
        phis.set_column(0, &DVector::from_element(n, c));

        let dec = Self { lambdas, phis, mu };
        let defect = dec.max_defect(space);
        if !(defect <= eigentolerance * scale) {
            return Err(Error::EigensolverNoConvergence {
                tolerance: eigentolerance,
                defect,
            });
        }
        Ok(dec)
    }

    /// Worst eigen-residual or orthonormality defect.
    pub fn max_defect(&self, space: &Space) -> f64 {
        let n = self.n();
        let mut worst: f64 = 0.0;
        for k in 0..n {
            let phi: Vec<f64> = self.phis.column(k).iter().copied().collect();
            let lap = laplacian_apply(space, &phi).expect("dimension checked");
            for x in 0..n {
                worst = worst.max((-lap[x] - self.lambdas[k] * phi[x]).abs());
            }
        }
        let gram = self.phis.transpose() * DMatrix::from_diagonal(&self.mu) * &self.phis;
        for j in 0..n {
            for k in 0..n {
                let target = if j == k { 1.0 } else { 0.0 };
                worst = worst.max((gram[(j, k)] - target).abs());
            }
        }
        worst
    }

    pub fn n(&self) -> usize {
        self.lambdas.len()
    }

    pub fn lambdas(&self) -> &DVector<f64> {
        &self.lambdas
    }

    pub fn phis(&self) -> &DMatrix<f64> {
        &self.phis
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn spectral_gap(&self) -> f64 {
        self.lambdas[1.min(self.n() - 1)]
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambdas[self.n() - 1]
    }

    /// Coefficients `<f, phi_k>_mu`.
    pub fn coefficients(&self, f: &[f64]) -> Result<DVector<f64>> {
        check_len(f, self.n())?;
        let weighted = DVector::from_fn(self.n(), |x, _| f[x] * self.mu[x]);
        Ok(self.phis.tr_mul(&weighted))
    }

    pub fn synthesize(&self, coeffs: &DVector<f64>) -> DVector<f64> {
        &self.phis * coeffs
    }

    /// `g(-Delta) f = sum_k g(lambda_k) <f, phi_k>_mu phi_k`.
    pub fn apply_fn(&self, f: &[f64], g: impl Fn(f64) -> f64) -> Result<DVector<f64>> {
        let mut c = self.coefficients(f)?;
        for (ck, &l) in c.iter_mut().zip(self.lambdas.iter()) {
            *ck *= g(l);
        }
        Ok(self.synthesize(&c))
    }

    /// Kernel of `g(-Delta)`: `sum_k g(lambda_k) phi_k(x) phi_k(z)`, mirrored
    /// from the upper triangle so it is exactly symmetric.
    pub fn kernel_fn(&self, g: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let n = self.n();
        let weights: Vec<f64> = self.lambdas.iter().map(|&l| g(l)).collect();
        let mut out = DMatrix::zeros(n, n);
        for x in 0..n {
            for z in x..n {
                let mut acc = 0.0;
                for (k, w) in weights.iter().enumerate() {
                    acc += w * self.phis[(x, k)] * self.phis[(z, k)];
                }
                out[(x, z)] = acc;
                out[(z, x)] = acc;
            }
        }
        out
    }

    /// `(-Delta)^s f` for any `s >= 0`, no range check.
    pub(crate) fn power_apply(&self, exponent: f64, f: &[f64]) -> Result<DVector<f64>> {
        self.apply_fn(f, |l| if l > 0.0 { l.powf(exponent) } else { 0.0 })
    }

    pub fn frac_apply(&self, theta: f64, f: &[f64]) -> Result<DVector<f64>> {
        check_theta(theta)?;
        self.power_apply(theta, f)
    }

    /// Heat kernel from the spectral sum. Accurate to round-off in absolute
    /// terms; use [`heat_kernel`] when tiny entries matter.
    pub fn heat_kernel_spectral(&self, t: f64) -> Result<KernelMatrix> {
        check_time(t)?;
        Ok(KernelMatrix {
            entries: self.kernel_fn(|l| (-l * t).exp()),
            time: t,
            kind: KernelKind::Heat,
        })
    }

    /// Kernel `q_t` of `exp(-t (-Delta)^theta)`.
    pub fn frac_heat_kernel(&self, theta: f64, t: f64) -> Result<KernelMatrix> {
        check_theta(theta)?;
        check_time(t)?;
        Ok(KernelMatrix {
            entries: self.kernel_fn(|l| (-t * frac_power(l, theta)).exp()),
            time: t,
            kind: KernelKind::FracHeat,
        })
    }

    /// Largest discrepancy, over the spectrum, between the subordination
    /// integral `int eta_t(s) exp(-lambda s) ds` and `exp(-t sqrt(lambda))`,
    /// where `eta_t` is the one-sided 1/2-stable density.
    pub fn subordination_check(&self, t: f64, quad: &QuadratureSpec) -> Result<f64> {
        check_time(t)?;
        let mut worst: f64 = 0.0;
        for &l in self.lambdas.iter() {
            let r = integrate_half_line(|s| half_stable_density(t, s) * (-l * s).exp(), quad)?;
            worst = worst.max((r.value - (-t * l.sqrt()).exp()).abs());
        }
        Ok(worst)
    }
}

pub(crate) fn frac_power(lambda: f64, theta: f64) -> f64 {
    if lambda > 0.0 {
        lambda.powf(theta)
    } else {
        0.0
    }
}

/// `eta_t^{1/2}(s) = t / (2 sqrt(pi)) s^{-3/2} exp(-t^2 / (4 s))`.
pub fn half_stable_density(t: f64, s: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    t / (2.0 * std::f64::consts::PI.sqrt()) * s.powf(-1.5) * (-t * t / (4.0 * s)).exp()
}

/// Heat kernel `p_t` computed by uniformization: with `q >= deg(x)/mu(x)`,
/// `P_t = (e^{-q tau} exp(tau (Delta + q I)))^(2^s)`, and every factor is an
/// entrywise non-negative matrix, so small entries keep full relative
/// accuracy and stay strictly positive on connected graphs.
pub fn heat_kernel(space: &Space, t: f64) -> Result<KernelMatrix> {
    check_time(t)?;
    let n = space.n();
    let mu = space.mu();
    let q = (0..n)
        .map(|x| space.degree(x) / mu[x])
        .fold(0.0, f64::max);
    let shifted = DMatrix::from_fn(n, n, |x, y| {
        if x == y {
            q - space.degree(x) / mu[x]
        } else {
            space.cond()[(x, y)] / mu[x]
        }
    });

    let mut squarings = 0u32;
    let mut tau = t;
    while q * tau > 0.5 {
        tau *= 0.5;
        squarings += 1;
    }

    let step = &shifted * tau;
    let mut term = DMatrix::<f64>::identity(n, n);
    let mut sum = term.clone();
    for k in 1..=40 {
        term = (&term * &step) / k as f64;
        sum += &term;
        if term.amax() < 1e-18 * sum.amax() {
            break;
        }
    }
    let mut transition = sum * (-q * tau).exp();
    for _ in 0..squarings {
        transition = &transition * &transition;
    }

    let mut entries = DMatrix::zeros(n, n);
    for x in 0..n {
        for z in x..n {
            let v = 0.5 * (transition[(x, z)] / mu[z] + transition[(z, x)] / mu[x]);
            entries[(x, z)] = v;
            entries[(z, x)] = v;
        }
    }
    Ok(KernelMatrix {
        entries,
        time: t,
        kind: KernelKind::Heat,
    })
}

/// Largest semigroup defect `|p_{t+s}(x,z) - sum_w p_t(x,w) p_s(w,z) mu(w)|`.
pub fn semigroup_error(space: &Space, t: f64, s: f64) -> Result<f64> {
    let pt = heat_kernel(space, t)?;
    let ps = heat_kernel(space, s)?;
    let pts = heat_kernel(space, t + s)?;
    let composed = &pt.entries * DMatrix::from_diagonal(space.mu()) * &ps.entries;
    Ok((composed - &pts.entries).amax())
}

/// Upper-bound scaling diagnostic for `q_t`: the largest values of
/// `q_t(x,y) d^{2 theta} mu(B(x,d)) / t` and of the same with `d^theta`, over
/// distinct pairs and the supplied times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FracKernelScaling {
    pub with_two_theta: f64,
    pub with_theta: f64,
}

pub fn frac_kernel_scaling(
    space: &Space,
    dec: &SpectralDecomposition,
    theta: f64,
    times: &[f64],
) -> Result<FracKernelScaling> {
    let n = space.n();
    let mut out = FracKernelScaling {
        with_two_theta: 0.0,
        with_theta: 0.0,
    };
    for &t in times {
        let q = dec.frac_heat_kernel(theta, t)?;
        for x in 0..n {
            for y in 0..n {
                if x == y {
                    continue;
                }
                let d = space.dist()[(x, y)];
                let ball = space.ball_measure(x, d);
                let base = q.entries[(x, y)] * ball / t;
                out.with_two_theta = out.with_two_theta.max(base * d.powf(2.0 * theta));
                out.with_theta = out.with_theta.max(base * d.powf(theta));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::Fixture;
    use approx::assert_abs_diff_eq;

    fn k2() -> Space {
        Fixture::Path { n: 2 }.build().unwrap()
    }

    fn p3() -> Space {
        Fixture::Path { n: 3 }.build().unwrap()
    }

    #[test]
    fn laplacian_examples() {
        let d = laplacian_apply(&k2(), &[1.0, -1.0]).unwrap();
        assert_eq!(d.as_slice(), &[-2.0, 2.0]);
        let d = laplacian_apply(&p3(), &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(d.as_slice(), &[1.0, -2.0, 1.0]);
        let d = laplacian_apply(&p3(), &[3.5; 3]).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
        assert!(matches!(
            laplacian_apply(&p3(), &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn laplacian_duality_with_dirichlet_form() {
        let s = Fixture::RandomGeometric {
            n: 12,
            radius: 0.5,
            seed: 3,
        }
        .build()
        .unwrap();
        let f: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let v: Vec<f64> = (0..12).map(|i| (i as f64 * 1.3).cos()).collect();
        let lap = laplacian_apply(&s, &f).unwrap();
        let lhs: f64 = (0..12).map(|x| v[x] * lap[x] * s.mu()[x]).sum();
        assert_abs_diff_eq!(lhs, -s.dirichlet_form(&v, &f), epsilon = 1e-12);
    }

    #[test]
    fn k2_and_p3_spectra() {
        let dec = SpectralDecomposition::new(&k2(), DEFAULT_EIGENTOLERANCE).unwrap();
        assert_abs_diff_eq!(dec.lambdas()[0], 0.0);
        assert_abs_diff_eq!(dec.lambdas()[1], 2.0, epsilon = 1e-14);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(dec.phis()[(0, 0)], r, epsilon = 1e-15);
        assert_abs_diff_eq!(dec.phis()[(1, 0)], r, epsilon = 1e-15);
        assert_abs_diff_eq!(dec.phis()[(0, 1)], r, epsilon = 1e-14);
        assert_abs_diff_eq!(dec.phis()[(1, 1)], -r, epsilon = 1e-14);

        let dec = SpectralDecomposition::new(&p3(), DEFAULT_EIGENTOLERANCE).unwrap();
        for (got, want) in dec.lambdas().iter().zip([0.0, 1.0, 3.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-13);
        }
    }

    #[test]
    fn k2_heat_kernel_closed_form() {
        let s = k2();
        let dec = SpectralDecomposition::new(&s, DEFAULT_EIGENTOLERANCE).unwrap();
        for t in [0.01f64, 0.3, 2.0] {
            let e = (-2.0 * t).exp();
            for p in [heat_kernel(&s, t).unwrap(), dec.heat_kernel_spectral(t).unwrap()] {
                assert_abs_diff_eq!(p.entries[(0, 0)], 0.5 * (1.0 + e), epsilon = 1e-14);
                assert_abs_diff_eq!(p.entries[(0, 1)], 0.5 * (1.0 - e), epsilon = 1e-14);
            }
        }
        let p = heat_kernel(&s, 50.0).unwrap();
        assert_abs_diff_eq!(p.entries[(0, 1)], 0.5, epsilon = 1e-14);
        assert_eq!(heat_kernel(&s, 0.0).unwrap_err(), Error::NonpositiveTime(0.0));
    }

    #[test]
    fn uniformized_and_spectral_heat_kernels_agree() {
        let s = Fixture::Dumbbell { clique: 4, bridge: 2 }.build().unwrap();
        let dec = SpectralDecomposition::new(&s, DEFAULT_EIGENTOLERANCE).unwrap();
        for t in [0.01, 0.5, 7.0] {
            let a = heat_kernel(&s, t).unwrap();
            let b = dec.heat_kernel_spectral(t).unwrap();
            assert!((a.entries - b.entries).amax() < 1e-13);
        }
    }

    #[test]
    fn heat_kernel_tiny_entries_stay_positive() {
        let s = Fixture::Path { n: 8 }.build().unwrap();
        let p = heat_kernel(&s, 0.01).unwrap();
        // p_t(0,7) ~ t^7 / 7!
        let leading = 0.01f64.powi(7) / 5040.0;
        assert!(p.entries[(0, 7)] > 0.0);
        assert!((p.entries[(0, 7)] / leading - 1.0).abs() < 0.05);
    }

    #[test]
    fn frac_apply_examples() {
        let s = k2();
        let dec = SpectralDecomposition::new(&s, DEFAULT_EIGENTOLERANCE).unwrap();
        let theta = 0.3;
        let out = dec.frac_apply(theta, &[1.0, -1.0]).unwrap();
        assert_abs_diff_eq!(out[0], 2f64.powf(theta), epsilon = 1e-14);
        assert_abs_diff_eq!(out[1], -(2f64.powf(theta)), epsilon = 1e-14);
        let out = dec.frac_apply(theta, &[2.0, 2.0]).unwrap();
        assert!(out.amax() < 1e-15);
        assert_eq!(
            dec.frac_apply(1.0, &[1.0, 0.0]).unwrap_err(),
            Error::ThetaOutOfRange(1.0)
        );
    }

    #[test]
    fn power_one_is_minus_laplacian() {
        let s = Fixture::Grid2d { rows: 3, cols: 4 }.build().unwrap();
        let dec = SpectralDecomposition::new(&s, DEFAULT_EIGENTOLERANCE).unwrap();
        let f: Vec<f64> = (0..12).map(|i| ((i * i) % 7) as f64).collect();
        let a = dec.power_apply(1.0, &f).unwrap();
        let b = laplacian_apply(&s, &f).unwrap();
        assert!((a + b).amax() < 1e-10);
    }

    #[test]
    fn frac_heat_kernel_k2_and_markov() {
        let s = k2();
        let dec = SpectralDecomposition::new(&s, DEFAULT_EIGENTOLERANCE).unwrap();
        let t = 0.7;
        let q = dec.frac_heat_kernel(0.5, t).unwrap();
        assert_abs_diff_eq!(
            q.entries[(0, 1)],
            0.5 * (1.0 - (-(2f64.sqrt()) * t).exp()),
            epsilon = 1e-14
        );
        let g = Fixture::Grid2d { rows: 4, cols: 4 }.build().unwrap();
        let dec = SpectralDecomposition::new(&g, DEFAULT_EIGENTOLERANCE).unwrap();
        let q = dec.frac_heat_kernel(0.3, 0.2).unwrap();
        // brute-force row sums
        for x in 0..16 {
            let row: f64 = (0..16).map(|z| q.entries[(x, z)] * g.mu()[z]).sum();
            assert!((row - 1.0).abs() < 1e-10);
        }
        assert!(q.is_symmetric());
    }

    #[test]
    fn frac_heat_kernel_small_time_is_identity() {
        let g = Fixture::Path { n: 6 }.build().unwrap();
        let dec = SpectralDecomposition::new(&g, DEFAULT_EIGENTOLERANCE).unwrap();
        let f = [1.0, -2.0, 0.5, 3.0, 0.0, 1.0];
        let mut prev = f64::INFINITY;
        for t in [1e-1, 1e-3, 1e-6] {
            let q = dec.frac_heat_kernel(0.6, t).unwrap();
            let err = (q.apply(&f, g.mu()) - DVector::from_row_slice(&f)).amax();
            assert!(err < prev);
            prev = err;
        }
        assert!(prev < 1e-5);
    }

    #[test]
    fn subordination_k2() {
        let dec = SpectralDecomposition::new(&k2(), DEFAULT_EIGENTOLERANCE).unwrap();
        let quad = QuadratureSpec::default();
        assert!(dec.subordination_check(1.0, &quad).unwrap() <= 1e-6);
        assert_eq!(
            dec.subordination_check(0.0, &quad).unwrap_err(),
            Error::NonpositiveTime(0.0)
        );
        // the density alone integrates to one
        let mass = integrate_half_line(|s| half_stable_density(0.4, s), &quad).unwrap();
        assert!((mass.value - 1.0).abs() < 1e-6);
    }

    #[test]
    fn scaling_diagnostic_is_finite() {
        let g = Fixture::Path { n: 8 }.build().unwrap();
        let dec = SpectralDecomposition::new(&g, DEFAULT_EIGENTOLERANCE).unwrap();
        let sc = frac_kernel_scaling(&g, &dec, 0.5, &[0.01, 0.1, 1.0]).unwrap();
        assert!(sc.with_two_theta.is_finite() && sc.with_two_theta > 0.0);
        assert!(sc.with_theta.is_finite() && sc.with_theta > 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn heat_kernel_properties(seed in 0u64..500, t in 0.01f64..5.0, s in 0.01f64..5.0) {
                let space = match (Fixture::RandomGeometric { n: 10, radius: 0.55, seed }).build() {
                    Ok(sp) => sp,
                    Err(_) => return Ok(()),
                };
                let p = heat_kernel(&space, t).unwrap();
                prop_assert!(p.markov_error(space.mu()) <= 1e-10);
                prop_assert!(p.is_symmetric());
                prop_assert!(p.min_entry() > 0.0);
                prop_assert!(semigroup_error(&space, t, s).unwrap() <= 1e-10);
            }
        }
    }
}

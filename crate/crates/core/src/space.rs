//! Finite metric measure spaces carrying a graph Dirichlet form.
//!
//! A [`Space`] bundles a distance matrix, a strictly positive vertex measure
//! and a symmetric conductance matrix. The conductances define the Dirichlet
//! form `E_X(f, g) = 1/2 sum c(x,y) (f(x)-f(y)) (g(x)-g(y))` and hence the
//! Laplacian, while the metric enters the Besov energy and ball statistics.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack allowed in the triangle inequality.
const METRIC_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpaceRecord", into = "SpaceRecord")]
pub struct Space {
    n: usize,
    dist: DMatrix<f64>,
    mu: DVector<f64>,
    cond: DMatrix<f64>,
}

/// Wire form of a space: `{"n":…, "dist":[[…]], "mu":[…], "cond":[[…]]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpaceRecord {
    pub n: usize,
    pub dist: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub cond: Vec<Vec<f64>>,
}

impl TryFrom<SpaceRecord> for Space {
    type Error = Error;

    fn try_from(rec: SpaceRecord) -> Result<Self> {
        let n = rec.n;
        let dist = rows_to_matrix(&rec.dist, n)?;
        let cond = rows_to_matrix(&rec.cond, n)?;
        if rec.mu.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: rec.mu.len(),
            });
        }
        Space::new(dist, DVector::from_vec(rec.mu), cond)
    }
}

impl From<Space> for SpaceRecord {
    fn from(space: Space) -> Self {
        let rows = |m: &DMatrix<f64>| {
            (0..m.nrows())
                .map(|i| m.row(i).iter().copied().collect())
                .collect()
        };
        SpaceRecord {
            n: space.n,
            dist: rows(&space.dist),
            mu: space.mu.iter().copied().collect(),
            cond: rows(&space.cond),
        }
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], n: usize) -> Result<DMatrix<f64>> {
    if rows.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: rows.len(),
        });
    }
    for row in rows {
        if row.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: row.len(),
            });
        }
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl Space {
    /// Validates and builds a space. All invariants are checked eagerly.
    pub fn new(dist: DMatrix<f64>, mu: DVector<f64>, cond: DMatrix<f64>) -> Result<Self> {
        let n = mu.len();
        for m in [&dist, &cond] {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: if m.nrows() != n { m.nrows() } else { m.ncols() },
                });
            }
        }
        if dist.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dist"));
        }
        if cond.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cond"));
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mu"));
        }
        if let Some((index, &value)) = mu.iter().enumerate().find(|(_, &m)| m <= 0.0) {
            return Err(Error::NonpositiveMeasure { index, value });
        }
        check_metric(&dist)?;
        check_conductances(&cond)?;
        let components = count_components(&cond);
        if components != 1 {
            return Err(Error::DisconnectedGraph { components });
        }
        Ok(Self { n, dist, mu, cond })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dist(&self) -> &DMatrix<f64> {
        &self.dist
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn cond(&self) -> &DMatrix<f64> {
        &self.cond
    }

    pub fn total_mass(&self) -> f64 {
        self.mu.iter().sum()
    }

    pub fn diameter(&self) -> f64 {
        self.dist.iter().copied().fold(0.0, f64::max)
    }

    pub fn min_positive_distance(&self) -> f64 {
        self.dist
            .iter()
            .copied()
            .filter(|&d| d > 0.0)
            .fold(f64::INFINITY, f64::min)
    }

    /// Weighted degree `sum_y c(x, y)`.
    pub fn degree(&self, x: usize) -> f64 {
        self.cond.row(x).iter().sum()
    }

    /// Neighbours of `x` in the conductance graph.
    pub fn neighbors(&self, x: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&y| self.cond[(x, y)] > 0.0)
    }

    /// `mu(B(x, r))` with the closed-ball convention `d(x, z) <= r`.
    pub fn ball_measure(&self, x: usize, r: f64) -> f64 {
        (0..self.n)
            .filter(|&z| self.dist[(x, z)] <= r)
            .map(|z| self.mu[z])
            .sum()
    }

    /// Points of the closed ball `B(x, r)`.
    pub fn ball(&self, x: usize, r: f64) -> Vec<usize> {
        (0..self.n).filter(|&z| self.dist[(x, z)] <= r).collect()
    }

    pub fn ball_stats(&self, center: usize, radius: f64) -> BallStats {
        BallStats {
            center,
            radius,
            mass: self.ball_measure(center, radius),
        }
    }

    /// The Dirichlet form `E_X(f, g)`.
    pub fn dirichlet_form(&self, f: &[f64], g: &[f64]) -> f64 {
        let mut acc = 0.0;
        for x in 0..self.n {
            for y in (x + 1)..self.n {
                let c = self.cond[(x, y)];
                if c != 0.0 {
                    acc += c * (f[x] - f[y]) * (g[x] - g[y]);
                }
            }
        }
        acc
    }

    /// Volume-growth diagnostics over dyadic radii.
    ///
    /// `doubling_constant` is the largest ratio `mu(B(x,2r)) / mu(B(x,r))`
    /// over centers and radii `r = r_min 2^(k-1)` up to the diameter.
    /// `b_lower`/`b_upper` are the smallest and largest per-center
    /// least-squares slopes of `log mu(B(x,r))` against `log r` over the
    /// dyadic radii whose balls do not yet exhaust the space; `None` when no
    /// center has two such radii.
    pub fn doubling_stats(&self) -> DoublingStats {
        let rmin = self.min_positive_distance();
        let diam = self.diameter();
        let total = self.total_mass();

        let mut radii = vec![0.5 * rmin];
        while *radii.last().unwrap() * 2.0 <= diam * (1.0 + METRIC_SLACK) {
            radii.push(radii.last().unwrap() * 2.0);
        }

        let mut doubling_constant: f64 = 1.0;
        let mut slopes = Vec::new();
        for x in 0..self.n {
            for &r in &radii {
                let ratio = self.ball_measure(x, 2.0 * r) / self.ball_measure(x, r);
                doubling_constant = doubling_constant.max(ratio);
            }
            let pts: Vec<(f64, f64)> = radii
                .iter()
                .skip(1)
                .map(|&r| (r, self.ball_measure(x, r)))
                .filter(|&(_, m)| m < total * (1.0 - METRIC_SLACK))
                .map(|(r, m)| (r.ln(), m.ln()))
                .collect();
            if let Some(s) = least_squares_slope(&pts) {
                slopes.push(s);
            }
        }
        let b_lower = slopes.iter().copied().reduce(f64::min);
        let b_upper = slopes.iter().copied().reduce(f64::max);
        DoublingStats {
            doubling_constant,
            b_lower,
            b_upper,
        }
    }
}

/// Slope of the least-squares line through `pts`, `None` for fewer than two
/// points or a degenerate abscissa.
pub(crate) fn least_squares_slope(pts: &[(f64, f64)]) -> Option<f64> {
    fit_line(pts).map(|(slope, _, _)| slope)
}

/// Least-squares line: (slope, intercept, r^2).
pub(crate) fn fit_line(pts: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Some((slope, my - slope * mx, r2))
}

fn check_metric(dist: &DMatrix<f64>) -> Result<()> {
    let n = dist.nrows();
    for i in 0..n {
        if dist[(i, i)] != 0.0 {
            return Err(Error::MetricViolation {
                i,
                j: i,
                k: i,
                reason: "nonzero diagonal",
            });
        }
        for j in 0..n {
            let d = dist[(i, j)];
            if d < 0.0 {
                return Err(Error::MetricViolation {
                    i,
                    j,
                    k: j,
                    reason: "negative distance",
                });
            }
            if d != dist[(j, i)] {
                return Err(Error::MetricViolation {
                    i,
                    j,
                    k: i,
                    reason: "asymmetric distance",
                });
            }
            if i != j && d == 0.0 {
                return Err(Error::MetricViolation {
                    i,
                    j,
                    k: j,
                    reason: "distinct points at distance zero",
                });
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let detour = dist[(i, k)] + dist[(k, j)];
                if dist[(i, j)] > detour * (1.0 + METRIC_SLACK) {
                    return Err(Error::MetricViolation {
                        i,
                        j,
                        k,
                        reason: "triangle inequality fails",
                    });
                }
            }
        }
    }
    Ok(())
}

fn check_conductances(cond: &DMatrix<f64>) -> Result<()> {
    let n = cond.nrows();
    for i in 0..n {
        if cond[(i, i)] != 0.0 {
            return Err(Error::InvalidConductance {
                i,
                j: i,
                reason: "nonzero diagonal",
            });
        }
        for j in 0..n {
            if cond[(i, j)] < 0.0 {
                return Err(Error::InvalidConductance {
                    i,
                    j,
                    reason: "negative conductance",
                });
            }
            if cond[(i, j)] != cond[(j, i)] {
                return Err(Error::InvalidConductance {
                    i,
                    j,
                    reason: "asymmetric conductance",
                });
            }
        }
    }
    Ok(())
}

fn count_components(cond: &DMatrix<f64>) -> usize {
    let n = cond.nrows();
    let mut seen = vec![false; n];
    let mut components = 0;
    for start in 0..n {
        if seen[start] {
            continue;
        }
        components += 1;
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(x) = queue.pop_front() {
            for y in 0..n {
                if !seen[y] && cond[(x, y)] > 0.0 {
                    seen[y] = true;
                    queue.push_back(y);
                }
            }
        }
    }
    components
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BallStats {
    pub center: usize,
    pub radius: f64,
    pub mass: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DoublingStats {
    pub doubling_constant: f64,
    pub b_lower: Option<f64>,
    pub b_upper: Option<f64>,
}

/// Canonical test spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum Fixture {
    /// Path graph on `n` vertices.
    Path { n: usize },
    /// `rows x cols` lattice with 4-neighbour edges.
    Grid2d { rows: usize, cols: usize },
    /// Two `clique`-cliques joined by a path of `bridge` edges.
    Dumbbell {
        clique: usize,
        #[serde(default = "default_bridge")]
        bridge: usize,
    },
    /// `n` uniform points in the unit square, edges within `radius`.
    RandomGeometric { n: usize, radius: f64, seed: u64 },
}

fn default_bridge() -> usize {
    1
}

impl Fixture {
    pub fn build(&self) -> Result<Space> {
        match *self {
            Fixture::Path { n } => {
                if n < 2 {
                    return Err(Error::InvalidParams(format!("path needs n >= 2, got {n}")));
                }
                let edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
                unit_graph(n, &edges)
            }
            Fixture::Grid2d { rows, cols } => {
                if rows < 2 || cols < 2 {
                    return Err(Error::InvalidParams(format!(
                        "grid2d needs rows, cols >= 2, got {rows}x{cols}"
                    )));
                }
                let idx = |r: usize, c: usize| r * cols + c;
                let mut edges = Vec::new();
                for r in 0..rows {
                    for c in 0..cols {
                        if c + 1 < cols {
                            edges.push((idx(r, c), idx(r, c + 1)));
                        }
                        if r + 1 < rows {
                            edges.push((idx(r, c), idx(r + 1, c)));
                        }
                    }
                }
                unit_graph(rows * cols, &edges)
            }
            Fixture::Dumbbell { clique, bridge } => {
                if clique < 2 || bridge < 1 {
                    return Err(Error::InvalidParams(format!(
                        "dumbbell needs clique >= 2 and bridge >= 1, got {clique}, {bridge}"
                    )));
                }
                let n = 2 * clique + bridge - 1;
                let mut edges = Vec::new();
                let second = clique + bridge - 1;
                for i in 0..clique {
                    for j in (i + 1)..clique {
                        edges.push((i, j));
                        edges.push((second + i, second + j));
                    }
                }
                // path from the last vertex of the first clique to the first of the second
                let mut prev = clique - 1;
                for step in 0..bridge {
                    let next = if step + 1 == bridge { second } else { clique + step };
                    edges.push((prev, next));
                    prev = next;
                }
                unit_graph(n, &edges)
            }
            Fixture::RandomGeometric { n, radius, seed } => {
                if n < 2 || !(radius > 0.0) || !radius.is_finite() {
                    return Err(Error::InvalidParams(format!(
                        "random_geometric needs n >= 2 and radius > 0, got {n}, {radius}"
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen(), rng.gen())).collect();
                let dist = DMatrix::from_fn(n, n, |i, j| {
                    if i == j {
                        0.0
                    } else {
                        let (a, b) = if i < j { (i, j) } else { (j, i) };
                        (pts[a].0 - pts[b].0).hypot(pts[a].1 - pts[b].1)
                    }
                });
                let cond = DMatrix::from_fn(n, n, |i, j| {
                    if i != j && dist[(i, j)] <= radius {
                        1.0
                    } else {
                        0.0
                    }
                });
                Space::new(dist, DVector::from_element(n, 1.0), cond)
            }
        }
    }
}

/// Unit conductances, unit masses and the shortest-path metric.
fn unit_graph(n: usize, edges: &[(usize, usize)]) -> Result<Space> {
    let mut cond = DMatrix::zeros(n, n);
    for &(i, j) in edges {
        cond[(i, j)] = 1.0;
        cond[(j, i)] = 1.0;
    }
    let dist = shortest_path_metric(&cond);
    Space::new(dist, DVector::from_element(n, 1.0), cond)
}

/// Hop-count metric of the graph (BFS from every vertex). Unreachable pairs
/// are left infinite and rejected later by validation.
pub fn shortest_path_metric(cond: &DMatrix<f64>) -> DMatrix<f64> {
    let n = cond.nrows();
    let mut dist = DMatrix::from_element(n, n, f64::INFINITY);
    for s in 0..n {
        dist[(s, s)] = 0.0;
        let mut queue = VecDeque::from([s]);
        while let Some(x) = queue.pop_front() {
            for y in 0..n {
                if cond[(x, y)] > 0.0 && dist[(s, y)].is_infinite() {
                    dist[(s, y)] = dist[(s, x)] + 1.0;
                    queue.push_back(y);
                }
            }
        }
    }
    dist
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k2() -> Space {
        Space::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            DVector::from_vec(vec![1.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
        )
        .unwrap()
    }

    #[test]
    fn k2_is_valid() {
        let s = k2();
        assert_eq!(s.n(), 2);
        assert_eq!(s.total_mass(), 2.0);
    }

    #[test]
    fn triangle_violation_reports_witness() {
        let dist = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0]);
        let cond = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let err = Space::new(dist, DVector::from_element(3, 1.0), cond).unwrap_err();
        assert_eq!(
            err,
            Error::MetricViolation {
                i: 0,
                j: 2,
                k: 1,
                reason: "triangle inequality fails"
            }
        );
    }

    #[test]
    fn zero_conductances_are_disconnected() {
        let dist = Fixture::Path { n: 3 }.build().unwrap().dist().clone();
        let err = Space::new(dist, DVector::from_element(3, 1.0), DMatrix::zeros(3, 3)).unwrap_err();
        assert_eq!(err, Error::DisconnectedGraph { components: 3 });
    }

    #[test]
    fn nonpositive_measure_rejected() {
        let s = k2();
        let err = Space::new(
            s.dist().clone(),
            DVector::from_vec(vec![1.0, 0.0]),
            s.cond().clone(),
        )
        .unwrap_err();
        assert_eq!(err, Error::NonpositiveMeasure { index: 1, value: 0.0 });
    }

    #[test]
    fn ball_measures() {
        let s = k2();
        assert_eq!(s.ball_measure(0, 0.5), 1.0);
        assert_eq!(s.ball_measure(0, 1.0), 2.0);
        let p3 = Fixture::Path { n: 3 }.build().unwrap();
        assert_eq!(p3.ball_measure(1, 1.0), 3.0);
        assert_eq!(p3.dist()[(0, 2)], 2.0);
    }

    #[test]
    fn k2_doubling_at_most_two() {
        let stats = k2().doubling_stats();
        assert!(stats.doubling_constant <= 2.0);
    }

    #[test]
    fn path_growth_exponent_near_one() {
        // Lattice balls hold 2r+1 (or r+1 at an end) points, so the dyadic
        // fit is biased low at small n and approaches 1 from below.
        let s32 = Fixture::Path { n: 32 }.build().unwrap().doubling_stats();
        let s256 = Fixture::Path { n: 256 }.build().unwrap().doubling_stats();
        let (lo32, hi32) = (s32.b_lower.unwrap(), s32.b_upper.unwrap());
        let (lo256, hi256) = (s256.b_lower.unwrap(), s256.b_upper.unwrap());
        assert!((hi32 - 1.0).abs() <= 0.2, "b_upper = {hi32}");
        assert!(lo32 > 0.5 && lo32 <= hi32);
        assert!((hi256 - 1.0).abs() <= 0.2 && (lo256 - 1.0).abs() <= 0.25);
        assert!(lo256 > lo32);
    }

    #[test]
    fn grid_fixture_degree_bound() {
        let g = Fixture::Grid2d { rows: 4, cols: 4 }.build().unwrap();
        assert_eq!(g.n(), 16);
        assert!((0..16).all(|x| g.neighbors(x).count() <= 4));
        assert_eq!(g.diameter(), 6.0);
    }

    #[test]
    fn dumbbell_shape() {
        let d = Fixture::Dumbbell { clique: 5, bridge: 1 }.build().unwrap();
        assert_eq!(d.n(), 10);
        assert_eq!(d.diameter(), 3.0);
        let d3 = Fixture::Dumbbell { clique: 3, bridge: 3 }.build().unwrap();
        assert_eq!(d3.n(), 8);
        assert_eq!(d3.diameter(), 5.0);
    }

    #[test]
    fn random_geometric_is_deterministic() {
        let fx = Fixture::RandomGeometric {
            n: 20,
            radius: 0.4,
            seed: 7,
        };
        assert_eq!(fx.build().unwrap(), fx.build().unwrap());
    }

    #[test]
    fn invalid_fixture_params() {
        assert!(matches!(
            Fixture::Path { n: 1 }.build(),
            Err(Error::InvalidParams(_))
        ));
        assert!(matches!(
            Fixture::Grid2d { rows: 1, cols: 4 }.build(),
            Err(Error::InvalidParams(_))
        ));
    }

    #[test]
    fn json_round_trip_and_fixture_descriptor() {
        let s = Fixture::Path { n: 4 }.build().unwrap();
        let text = serde_json::to_string(&s).unwrap();
        let back: Space = serde_json::from_str(&text).unwrap();
        assert_eq!(s, back);

        let fx: Fixture =
            serde_json::from_str(r#"{"kind":"grid2d","params":{"rows":3,"cols":2}}"#).unwrap();
        assert_eq!(fx, Fixture::Grid2d { rows: 3, cols: 2 });

        let bad = r#"{"n":2,"dist":[[0,1],[1,0]],"mu":[1,-1],"cond":[[0,1],[1,0]]}"#;
        assert!(serde_json::from_str::<Space>(bad).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ball_measure_monotone_and_saturates(seed in 0u64..200, n in 4usize..16) {
                let s = match (Fixture::RandomGeometric { n, radius: 0.6, seed }).build() {
                    Ok(s) => s,
                    Err(_) => return Ok(()),
                };
                let diam = s.diameter();
                for x in 0..n {
                    let mut prev = 0.0;
                    for k in 0..=20 {
                        let m = s.ball_measure(x, diam * k as f64 / 20.0);
                        prop_assert!(m >= prev);
                        prev = m;
                    }
                    prop_assert_eq!(s.ball_measure(x, diam), s.total_mass());
                }
            }
        }
    }
}

//! Minimal front speed `c* = min_{λ>0} k(λ)/λ`, amplitude sweeps and the
//! linear-limit extrapolation of `c*(M)/M`.

use rayon::prelude::*;

use crate::cell::{DiffusionSpec, ScalarField, VectorField};
use crate::discrete::{assemble, OperatorSpec, Scheme};
use crate::eigen::{principal_eigenvalue, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::error::{invalid, Error, Result};

pub const BRACKET: (f64, f64) = (1e-3, 1e2);
pub const SCAN_POINTS: usize = 25;
pub const GOLDEN_TOL: f64 = 1e-6;
/// Factor applied to the offending end of the bracket on the single retry.
const WIDEN: f64 = 100.0;

const INV_PHI: f64 = 0.618_033_988_749_894_8;

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedPoint {
    pub m: f64,
    pub lambda_star: f64,
    pub k: f64,
    pub c_star: f64,
    pub scheme: Scheme,
    pub resolution: Vec<usize>,
    /// The minimizer stayed on the edge of the widened bracket.
    pub at_edge: bool,
}

impl SpeedPoint {
    pub fn c_over_m(&self) -> f64 {
        self.c_star / self.m
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpeedCurve {
    pub points: Vec<SpeedPoint>,
}

impl SpeedCurve {
    pub fn new(points: Vec<SpeedPoint>) -> Result<Self> {
        if points.windows(2).any(|w| !(w[1].m > w[0].m)) {
            return invalid("amplitudes must be strictly increasing");
        }
        Ok(Self { points })
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.points.iter().map(SpeedPoint::c_over_m).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitEstimate {
    /// Reported limit: the last ratio once the differences have settled,
    /// otherwise the extrapolated value.
    pub estimate: f64,
    pub last_ratio: f64,
    /// `c*/M = α + β/M` fitted through the last two points.
    pub extrapolated: f64,
    /// `r_{j+1} − r_j` for the ratios `r_j = c*_j/M_j`.
    pub differences: Vec<f64>,
    pub monotone: bool,
}

/// Everything in a speed computation except the amplitude.
#[derive(Debug, Clone, Copy)]
pub struct SpeedProblem<'a> {
    pub diffusion: &'a DiffusionSpec,
    pub q: &'a VectorField,
    pub zeta: &'a ScalarField,
    pub direction: &'a [f64],
    pub scheme: Scheme,
    pub tol: f64,
    pub max_iter: usize,
}

impl<'a> SpeedProblem<'a> {
    pub fn new(
        diffusion: &'a DiffusionSpec,
        q: &'a VectorField,
        zeta: &'a ScalarField,
        direction: &'a [f64],
    ) -> Self {
        Self {
            diffusion,
            q,
            zeta,
            direction,
            scheme: Scheme::Upwind,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    /// Principal eigenvalue `k(λ)` at amplitude `m`.
    pub fn k(&self, m: f64, lambda: f64) -> Result<f64> {
        let map = assemble(&OperatorSpec {
            diffusion: self.diffusion,
            q: self.q,
            amplitude: m,
            zeta: self.zeta,
            direction: self.direction,
            lambda,
            scheme: self.scheme,
        })?;
        Ok(principal_eigenvalue(&map, self.tol, self.max_iter)?.k)
    }

    pub fn speed_at(&self, m: f64, lambda: f64) -> Result<f64> {
        Ok(self.k(m, lambda)? / lambda)
    }

    pub fn minimal_speed(&self, m: f64) -> Result<SpeedPoint> {
        if !(m >= 0.0 && m.is_finite()) {
            return invalid(format!("amplitude M = {m} must be nonnegative"));
        }
        let f = |lam: f64| self.speed_at(m, lam);
        let (mut lo, mut hi) = BRACKET;
        let mut scan = log_scan(&f, lo, hi)?;
        let mut j = argmin(&scan);
        if j == 0 || j == SCAN_POINTS - 1 {
            if j == 0 {
                lo /= WIDEN;
            } else {
                hi *= WIDEN;
            }
            scan = log_scan(&f, lo, hi)?;
            j = argmin(&scan);
        }
        let at_edge = j == 0 || j == SCAN_POINTS - 1;
        let (mut best_l, mut best_c) = scan[j];
        if !at_edge {
            let (l, c) = golden(f, scan[j - 1].0, scan[j + 1].0, GOLDEN_TOL)?;
            if c < best_c {
                best_l = l;
                best_c = c;
            }
        }
        Ok(SpeedPoint {
            m,
            lambda_star: best_l,
            k: best_c * best_l,
            c_star: best_c,
            scheme: self.scheme,
            resolution: self.q.cell().resolution().to_vec(),
            at_edge,
        })
    }
}

/// Log-spaced scan of `f` on `[lo, hi]`, evaluated in parallel.
pub fn log_scan(
    f: &(impl Fn(f64) -> Result<f64> + Sync),
    lo: f64,
    hi: f64,
) -> Result<Vec<(f64, f64)>> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..SCAN_POINTS)
        .into_par_iter()
        .map(|i| {
            let lam = (a + (b - a) * i as f64 / (SCAN_POINTS - 1) as f64).exp();
            f(lam).map(|v| (lam, v))
        })
        .collect()
}

fn argmin(scan: &[(f64, f64)]) -> usize {
    let mut j = 0;
    for (i, s) in scan.iter().enumerate() {
        if s.1 < scan[j].1 {
            j = i;
        }
    }
    j
}

/// Golden-section search on `[a, b]` until the interval is below `tol`
/// relative to its midpoint. Returns the best point seen.
pub fn golden(
    f: impl Fn(f64) -> Result<f64>,
    mut a: f64,
    mut b: f64,
    tol: f64,
) -> Result<(f64, f64)> {
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    while (b - a).abs() > tol * 0.5 * (a.abs() + b.abs()) {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d)?;
        }
    }
    Ok(if fc <= fd { (c, fc) } else { (d, fd) })
}

/// Upwind minimal speed with default eigen-solver settings.
pub fn minimal_speed(
    diffusion: &DiffusionSpec,
    q: &VectorField,
    zeta: &ScalarField,
    direction: &[f64],
    m: f64,
) -> Result<SpeedPoint> {
    SpeedProblem::new(diffusion, q, zeta, direction).minimal_speed(m)
}

/// A sweep that stopped at its first failing amplitude.
#[derive(Debug)]
pub struct PartialSweep {
    pub curve: SpeedCurve,
    pub error: Error,
}

/// Minimal speeds at each amplitude, computed in parallel and returned in
/// input order. On failure the points before the first failing amplitude are
/// handed back with the error.
pub fn amplitude_sweep(
    problem: &SpeedProblem,
    ms: &[f64],
) -> std::result::Result<SpeedCurve, Box<PartialSweep>> {
    let fail = |points, error| {
        Box::new(PartialSweep {
            curve: SpeedCurve { points },
            error,
        })
    };
    if ms.windows(2).any(|w| !(w[1] > w[0])) || ms.iter().any(|m| !(*m >= 0.0)) {
        return Err(fail(
            Vec::new(),
            Error::Invalid("amplitudes must be nonnegative and strictly increasing".into()),
        ));
    }
    let results: Vec<Result<SpeedPoint>> =
        ms.par_iter().map(|&m| problem.minimal_speed(m)).collect();
    let mut points = Vec::with_capacity(ms.len());
    for r in results {
        match r {
            Ok(p) => points.push(p),
            Err(e) => return Err(fail(points, e)),
        }
    }
    Ok(SpeedCurve { points })
}

/// Differences below this (relative to the last ratio) count as settled.
pub const SETTLED_TOL: f64 = 1e-6;

pub fn estimate_linear_limit(curve: &SpeedCurve) -> Result<LimitEstimate> {
    if curve.len() < 3 {
        return invalid("at least three amplitudes are needed");
    }
    if curve.points.iter().any(|p| !(p.m > 0.0)) {
        return invalid("c*/M needs M > 0");
    }
    let r = curve.ratios();
    let differences: Vec<f64> = r.windows(2).map(|w| w[1] - w[0]).collect();
    let monotone = differences.iter().all(|d| *d >= 0.0) || differences.iter().all(|d| *d <= 0.0);
    let n = curve.len();
    let (p1, p2) = (&curve.points[n - 2], &curve.points[n - 1]);
    let extrapolated = (p2.c_star - p1.c_star) / (p2.m - p1.m);
    let last_ratio = r[n - 1];
    let settled = differences[n - 2].abs() <= SETTLED_TOL * last_ratio.abs();
    Ok(LimitEstimate {
        estimate: if settled { last_ratio } else { extrapolated },
        last_ratio,
        extrapolated,
        differences,
        monotone,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::PeriodicCell;

    fn point(m: f64, c: f64) -> SpeedPoint {
        SpeedPoint {
            m,
            lambda_star: 1.0,
            k: c,
            c_star: c,
            scheme: Scheme::Upwind,
            resolution: vec![1, 1],
            at_edge: false,
        }
    }

    #[test]
    fn golden_finds_parabola_vertex() {
        let (x, fx) = golden(|x| Ok((x - 1.3) * (x - 1.3) + 2.0), 0.5, 3.0, 1e-9).unwrap();
        assert!((x - 1.3).abs() < 1e-7);
        assert!((fx - 2.0).abs() < 1e-15);
    }

    #[test]
    fn homogeneous_speeds() {
        let c = PeriodicCell::unit(2, 8).unwrap();
        let a = DiffusionSpec::identity(&c);
        let q = VectorField::zero(&c);
        for (zeta, speed, lam) in [(1.0, 2.0, 1.0), (4.0, 4.0, 2.0)] {
            let z = ScalarField::constant(&c, zeta);
            let p = minimal_speed(&a, &q, &z, &[1.0, 0.0], 0.0).unwrap();
            assert!((p.c_star - speed).abs() < 1e-5, "{p:?}");
            assert!((p.lambda_star - lam).abs() < 1e-4);
            assert!(!p.at_edge);
        }
    }

    #[test]
    fn edge_minimizer_is_flagged() {
        let c = PeriodicCell::unit(2, 4).unwrap();
        let a = DiffusionSpec::identity(&c);
        let q = VectorField::zero(&c);
        // k/λ = λ + ζ/λ has its minimum at √ζ = 1e-7, below the widened bracket
        let z = ScalarField::constant(&c, 1e-14);
        let p = minimal_speed(&a, &q, &z, &[1.0, 0.0], 0.0).unwrap();
        assert!(p.at_edge);
        assert!((p.lambda_star / 1e-5 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_curve_is_recovered() {
        let curve = SpeedCurve::new(vec![
            point(8.0, 0.3 * 8.0 + 1.7),
            point(16.0, 0.3 * 16.0 + 1.7),
            point(32.0, 0.3 * 32.0 + 1.7),
        ])
        .unwrap();
        let est = estimate_linear_limit(&curve).unwrap();
        assert!((est.extrapolated - 0.3).abs() < 1e-10);
        assert!(est.monotone);
        let flat =
            SpeedCurve::new(vec![point(1.0, 2.0), point(2.0, 2.0), point(4.0, 2.0)]).unwrap();
        let est = estimate_linear_limit(&flat).unwrap();
        assert!(est.estimate.abs() < 1e-12);
        assert!(est.differences.iter().all(|d| *d < 0.0));
    }

    #[test]
    fn non_monotone_is_flagged() {
        let curve =
            SpeedCurve::new(vec![point(1.0, 1.0), point(2.0, 3.0), point(3.0, 3.0)]).unwrap();
        assert!(!estimate_linear_limit(&curve).unwrap().monotone);
        assert!(estimate_linear_limit(
            &SpeedCurve::new(vec![point(1.0, 1.0), point(2.0, 1.0)]).unwrap()
        )
        .is_err());
        assert!(SpeedCurve::new(vec![point(2.0, 1.0), point(1.0, 1.0)]).is_err());
    }
}

//! Dirichlet energy of functions pinned to two constants on a pair of nearly
//! tangent balls, in any dimension through the axisymmetric reduction.

use crate::error::{invalid, Error, Result};
use crate::krylov;
use rayon::prelude::*;
use std::f64::consts::PI;

/// Outer cylinder `r ≤ U_RADIUS, |z| ≤ U_HALF_HEIGHT` holding both balls.
pub const U_RADIUS: f64 = 1.5;
pub const U_HALF_HEIGHT: f64 = 2.5;
pub const SOLVER_TOL: f64 = 1e-10;
pub const SOLVER_MAX_ITER: usize = 500_000;
/// Fewer cells than this across the gap is refused.
pub const MIN_CELLS_PER_GAP: usize = 4;
pub const DEFAULT_CELLS_PER_GAP: usize = 8;
const QUAD_TOL: f64 = 1e-13;

/// Surface measure of the unit sphere `S^k ⊂ R^{k+1}`.
pub fn sphere_measure(k: usize) -> f64 {
    match k {
        0 => 2.0,
        1 => 2.0 * PI,
        _ => 2.0 * PI / (k as f64 - 1.0) * sphere_measure(k - 2),
    }
}

fn check_dims(dim: usize, n: usize) -> Result<()> {
    if dim < 2 {
        return invalid("dimension must be at least 2");
    }
    if n < 2 {
        return invalid("mollification index must be at least 2");
    }
    Ok(())
}

/// `∫₀^{1−1/n} ½ r^{N−2} / (1/n + n r²/(n−1)) dr`.
pub fn radial_factor(dim: usize, n: usize) -> Result<f64> {
    check_dims(dim, n)?;
    let nf = n as f64;
    let p = (dim - 2) as i32;
    let out = quadrature::integrate(
        |r| 0.5 * r.powi(p) / (1.0 / nf + nf * r * r / (nf - 1.0)),
        0.0,
        1.0 - 1.0 / nf,
        QUAD_TOL,
    );
    Ok(out.integral)
}

/// Antiderivative values of the radial factor where they are elementary.
pub fn radial_factor_closed(dim: usize, n: usize) -> Option<f64> {
    let nf = n as f64;
    match dim {
        2 => Some(0.5 * (nf - 1.0).sqrt() * (nf * (1.0 - 1.0 / nf) / (nf - 1.0).sqrt()).atan()),
        3 => Some((nf - 1.0) / (4.0 * nf) * nf.ln()),
        _ => None,
    }
}

/// Cauchy–Schwarz lower bound on the energy of any admissible transition.
pub fn lower_bound_energy(dim: usize, n: usize, lambda: f64, mu: f64) -> Result<f64> {
    let d = lambda - mu;
    Ok(sphere_measure(dim - 2) * d * d * radial_factor(dim, n)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateEnergy {
    /// Energy of the `x_N` derivative.
    pub axial: f64,
    /// Energy of the radial derivative.
    pub radial: f64,
    pub axial_error: f64,
    pub radial_error: f64,
}

// 1 − √(1 − r²) without cancellation near 0.
fn half_gap(r: f64) -> f64 {
    r * r / (1.0 + (1.0 - r * r).max(0.0).sqrt())
}

/// `∫_ε^{1−ε} r^{N−2} / (2(1 − √(1−r²))) dr`.
pub fn axial_integral(dim: usize, eps: f64, tol: f64) -> quadrature::Output {
    let p = dim as i32 - 2;
    quadrature::integrate(|r| r.powi(p) / (2.0 * half_gap(r)), eps, 1.0 - eps, tol)
}

/// `∫_ε^{1−ε} r^N / ((1 − r²)(1 − √(1−r²))) dr`.
pub fn radial_integral(dim: usize, eps: f64, tol: f64) -> quadrature::Output {
    let p = dim as i32;
    quadrature::integrate(
        |r| r.powi(p) / ((1.0 - r) * (1.0 + r) * half_gap(r)),
        eps,
        1.0 - eps,
        tol,
    )
}

/// Energy of `u = (λ+μ)/2 + (λ−μ) x_N / (2(1 − √(1−r²)))` on the lens
/// between the unit balls, with `r` truncated to `[ε, 1−ε]`.
pub fn explicit_candidate_energy(
    dim: usize,
    lambda: f64,
    mu: f64,
    eps: f64,
) -> Result<CandidateEnergy> {
    explicit_candidate_energy_with_tol(dim, lambda, mu, eps, 1e-12)
}

pub fn explicit_candidate_energy_with_tol(
    dim: usize,
    lambda: f64,
    mu: f64,
    eps: f64,
    tol: f64,
) -> Result<CandidateEnergy> {
    if dim < 2 {
        return invalid("dimension must be at least 2");
    }
    if !(0.0..0.5).contains(&eps) {
        return invalid("truncation must lie in [0, 0.5)");
    }
    let s = sphere_measure(dim - 2) * (lambda - mu).powi(2);
    let a = axial_integral(dim, eps, tol);
    let r = radial_integral(dim, eps, tol);
    Ok(CandidateEnergy {
        axial: s * a.integral,
        radial: s / 6.0 * r.integral,
        axial_error: s * a.error_estimate,
        radial_error: s / 6.0 * r.error_estimate,
    })
}

/// Two balls of radius `radius` centred on the axis at `z = ±center`, inside
/// the cylinder `r ≤ r_max, |z| ≤ z_max`, with `u = λ` on the upper ball and
/// `u = μ` on the lower one. Natural boundary conditions elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisymmetricProblem {
    pub dim: usize,
    pub radius: f64,
    pub center: f64,
    pub r_max: f64,
    pub z_max: f64,
    pub spacing: f64,
    pub lambda: f64,
    pub mu: f64,
}

/// Solution on the upper half `z > 0`; the lower half is
/// `u(r, −z) = λ + μ − u(r, z)`.
#[derive(Debug, Clone)]
pub struct AxisymmetricSolution {
    pub dim: usize,
    pub nr: usize,
    pub nz: usize,
    pub spacing: f64,
    /// Indexed `k * nr + j` for the cell centred at `((j+½)g, (k+½)g)`.
    pub values: Vec<f64>,
    pub pinned: Vec<bool>,
    pub energy: f64,
    pub iterations: usize,
}

impl AxisymmetricSolution {
    pub fn r(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.spacing
    }
    pub fn z(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.spacing
    }
    /// Weighted volume of one cell in the column `j`, sphere factor included.
    pub fn measure(&self, j: usize) -> f64 {
        sphere_measure(self.dim - 2) * radial_measure(self.dim, j, self.spacing) * self.spacing
    }
}

// ∫_{jg}^{(j+1)g} r^{N−2} dr
fn radial_measure(dim: usize, j: usize, g: f64) -> f64 {
    let p = (dim - 1) as i32;
    let (a, b) = (j as f64, j as f64 + 1.0);
    (b.powi(p) - a.powi(p)) * g.powi(p) / p as f64
}

pub fn solve_axisymmetric(p: &AxisymmetricProblem) -> Result<AxisymmetricSolution> {
    if p.dim < 2 {
        return invalid("dimension must be at least 2");
    }
    if !(p.spacing > 0.0) || !(p.radius > 0.0) || p.center < p.radius {
        return invalid("need positive spacing and radius, and disjoint balls");
    }
    if p.radius > p.r_max || p.center + p.radius > p.z_max {
        return Err(Error::Geometry(
            "balls do not fit the outer cylinder".into(),
        ));
    }
    let g = p.spacing;
    let nr = (p.r_max / g).round() as usize;
    let nz = (p.z_max / g).round() as usize;
    let n = nr * nz;
    let s = p.lambda + p.mu;
    let r2 = p.radius * p.radius;
    let pinned: Vec<bool> = (0..n)
        .map(|i| {
            let (j, k) = (i % nr, i / nr);
            let r = (j as f64 + 0.5) * g;
            let z = (k as f64 + 0.5) * g - p.center;
            r * r + z * z < r2
        })
        .collect();
    let tz: Vec<f64> = (0..nr).map(|j| radial_measure(p.dim, j, g) / g).collect();
    let tr: Vec<f64> = (0..nr)
        .map(|j| ((j + 1) as f64 * g).powi(p.dim as i32 - 2))
        .collect();

    let mut free = vec![usize::MAX; n];
    let mut cells = Vec::new();
    for i in 0..n {
        if !pinned[i] {
            free[i] = cells.len();
            cells.push(i);
        }
    }
    let m = cells.len();
    let mut row_ptr = Vec::with_capacity(m + 1);
    let mut cols = Vec::with_capacity(4 * m);
    let mut vals = Vec::with_capacity(4 * m);
    let mut diag = vec![0.0; m];
    let mut rhs = vec![0.0; m];
    row_ptr.push(0);
    for (row, &i) in cells.iter().enumerate() {
        let (j, k) = (i % nr, i / nr);
        let mut couple = |nb: usize, t: f64, d: &mut f64, b: &mut f64| {
            if pinned[nb] {
                let t = t / boundary_fraction(p, g, nr, i, nb);
                *d += t;
                *b += t * p.lambda;
            } else {
                *d += t;
                cols.push(free[nb]);
                vals.push(-t);
            }
        };
        let (mut d, mut b) = (0.0, 0.0);
        if j > 0 {
            couple(i - 1, tr[j - 1], &mut d, &mut b);
        }
        if j + 1 < nr {
            couple(i + 1, tr[j], &mut d, &mut b);
        }
        if k + 1 < nz {
            couple(i + nr, tz[j], &mut d, &mut b);
        }
        if k > 0 {
            couple(i - nr, tz[j], &mut d, &mut b);
        } else {
            // mirror face at z = 0
            d += 2.0 * tz[j];
            b += tz[j] * s;
        }
        diag[row] = d;
        rhs[row] = b;
        row_ptr.push(cols.len());
    }

    let op = |x: &[f64], y: &mut [f64]| {
        y.par_iter_mut().enumerate().for_each(|(r, yr)| {
            let mut acc = diag[r] * x[r];
            for q in row_ptr[r]..row_ptr[r + 1] {
                acc += vals[q] * x[cols[q]];
            }
            *yr = acc;
        });
    };
    let mut x = vec![0.0; m];
    let stats = krylov::cg(op, &diag, &rhs, &mut x, SOLVER_TOL, SOLVER_MAX_ITER)?;

    let mut values = vec![p.lambda; n];
    for (row, &i) in cells.iter().enumerate() {
        values[i] = x[row];
    }
    // Faces between a free and a pinned cell carry the energy of the segment
    // from the free centre to the sphere.
    let face = |a: usize, b: usize, t: f64| {
        let du2 = (values[b] - values[a]).powi(2);
        match (pinned[a], pinned[b]) {
            (false, true) => t / boundary_fraction(p, g, nr, a, b) * du2,
            (true, false) => t / boundary_fraction(p, g, nr, b, a) * du2,
            _ => t * du2,
        }
    };
    let mut interior = 0.0;
    let mut mirror = 0.0;
    for k in 0..nz {
        for j in 0..nr {
            let i = k * nr + j;
            if j + 1 < nr {
                interior += face(i, i + 1, tr[j]);
            }
            if k + 1 < nz {
                interior += face(i, i + nr, tz[j]);
            }
            if k == 0 {
                mirror += tz[j] * (2.0 * values[i] - s).powi(2);
            }
        }
    }
    let energy = sphere_measure(p.dim - 2) * (2.0 * interior + mirror);
    Ok(AxisymmetricSolution {
        dim: p.dim,
        nr,
        nz,
        spacing: g,
        values,
        pinned,
        energy,
        iterations: stats.iterations,
    })
}

const MIN_FRACTION: f64 = 0.01;

// Fraction of the centre-to-centre segment from free cell `a` to pinned cell
// `b` that lies outside the upper ball.
fn boundary_fraction(p: &AxisymmetricProblem, g: f64, nr: usize, a: usize, b: usize) -> f64 {
    let at = |i: usize| ((i % nr) as f64 + 0.5) * g;
    let (ra, za) = (at(a), ((a / nr) as f64 + 0.5) * g - p.center);
    let (rb, zb) = (at(b), ((b / nr) as f64 + 0.5) * g - p.center);
    let (dr, dz) = (rb - ra, zb - za);
    // |P + t(Q−P)|² = R², first root in (0, 1]
    let qa = dr * dr + dz * dz;
    let qb = 2.0 * (ra * dr + za * dz);
    let qc = ra * ra + za * za - p.radius * p.radius;
    let disc = (qb * qb - 4.0 * qa * qc).max(0.0);
    let t = (-qb - disc.sqrt()) / (2.0 * qa);
    t.clamp(MIN_FRACTION, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Growth {
    Sqrt,
    Log,
    Bounded,
}

impl Growth {
    pub fn name(self) -> &'static str {
        match self {
            Growth::Sqrt => "sqrt_growth",
            Growth::Log => "log_growth",
            Growth::Bounded => "bounded",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionEnergyResult {
    pub dim: usize,
    pub n: usize,
    pub lower_bound: f64,
    pub energy: f64,
    pub lambda: f64,
    pub mu: f64,
    /// Grid cells per unit length.
    pub resolution: usize,
    pub iterations: usize,
    /// Filled in by [`classify`].
    pub classification: Option<Growth>,
}

/// Cells per unit length giving [`DEFAULT_CELLS_PER_GAP`] cells across the gap `2/n`.
pub fn default_resolution(n: usize) -> usize {
    (DEFAULT_CELLS_PER_GAP * n).div_ceil(2).max(16)
}

pub fn min_transition_energy(
    dim: usize,
    n: usize,
    resolution: usize,
) -> Result<TransitionEnergyResult> {
    min_transition_energy_with(dim, n, resolution, 1.0, 0.0)
}

/// Balls of radius `1 − 1/n` centred at `z = ±1` in the cylinder `U`.
pub fn min_transition_energy_with(
    dim: usize,
    n: usize,
    resolution: usize,
    lambda: f64,
    mu: f64,
) -> Result<TransitionEnergyResult> {
    check_dims(dim, n)?;
    let required = (MIN_CELLS_PER_GAP * n).div_ceil(2);
    if resolution < required {
        return Err(Error::UnderResolved {
            given: resolution,
            required,
        });
    }
    let sol = solve_axisymmetric(&AxisymmetricProblem {
        dim,
        radius: 1.0 - 1.0 / n as f64,
        center: 1.0,
        r_max: U_RADIUS,
        z_max: U_HALF_HEIGHT,
        spacing: 1.0 / resolution as f64,
        lambda,
        mu,
    })?;
    Ok(TransitionEnergyResult {
        dim,
        n,
        lower_bound: lower_bound_energy(dim, n, lambda, mu)?,
        energy: sol.energy,
        lambda,
        mu,
        resolution,
        iterations: sol.iterations,
        classification: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFit {
    pub growth: Growth,
    pub intercept: f64,
    pub slope: f64,
    /// `‖E − fit‖₂ / ‖E‖₂`.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrowthFit {
    pub best: Growth,
    pub fits: Vec<ModelFit>,
    pub ambiguous: bool,
}

impl GrowthFit {
    pub fn fit(&self, growth: Growth) -> &ModelFit {
        self.fits
            .iter()
            .find(|f| f.growth == growth)
            .expect("all models fitted")
    }
}

/// Two models are ambiguous when the runner-up residual is within this
/// fraction of the best one.
pub const AMBIGUITY: f64 = 0.05;

fn basis(growth: Growth, n: f64) -> f64 {
    match growth {
        Growth::Sqrt => n.sqrt(),
        Growth::Log => n.ln(),
        // approach to a finite limit at the near-contact rate
        Growth::Bounded => 1.0 / n.sqrt(),
    }
}

/// Least-squares fit of `E(n) ≈ a + b·f(n)` for `f ∈ {√n, log n, 1/√n}`.
pub fn fit_growth(ns: &[f64], energies: &[f64]) -> Result<GrowthFit> {
    if ns.len() != energies.len() || ns.len() < 4 {
        return invalid("need at least four (n, E) pairs");
    }
    if ns.iter().any(|&n| !(n > 1.0)) {
        return invalid("n must exceed 1");
    }
    let norm = energies.iter().map(|e| e * e).sum::<f64>().sqrt();
    let m = ns.len() as f64;
    let fits: Vec<ModelFit> = [Growth::Sqrt, Growth::Log, Growth::Bounded]
        .into_iter()
        .map(|growth| {
            let f: Vec<f64> = ns.iter().map(|&n| basis(growth, n)).collect();
            let fm = f.iter().sum::<f64>() / m;
            let em = energies.iter().sum::<f64>() / m;
            let sff: f64 = f.iter().map(|a| (a - fm).powi(2)).sum();
            let sfe: f64 = f
                .iter()
                .zip(energies)
                .map(|(a, e)| (a - fm) * (e - em))
                .sum();
            let slope = sfe / sff;
            let intercept = em - slope * fm;
            let res = f
                .iter()
                .zip(energies)
                .map(|(a, e)| (e - intercept - slope * a).powi(2))
                .sum::<f64>()
                .sqrt();
            ModelFit {
                growth,
                intercept,
                slope,
                residual: if norm > 0.0 { res / norm } else { 0.0 },
            }
        })
        .collect();
    let mut order: Vec<&ModelFit> = fits.iter().collect();
    order.sort_by(|a, b| a.residual.total_cmp(&b.residual));
    let ambiguous = order[1].residual <= (1.0 + AMBIGUITY) * order[0].residual;
    Ok(GrowthFit {
        best: order[0].growth,
        ambiguous,
        fits,
    })
}

pub fn growth_rate_fit(results: &[TransitionEnergyResult]) -> Result<GrowthFit> {
    if results.windows(2).any(|w| w[0].dim != w[1].dim) {
        return invalid("results mix dimensions");
    }
    let ns: Vec<f64> = results.iter().map(|r| r.n as f64).collect();
    let es: Vec<f64> = results.iter().map(|r| r.energy).collect();
    fit_growth(&ns, &es)
}

/// Fits the sequence and stamps the classification on every entry.
pub fn classify(results: &mut [TransitionEnergyResult]) -> Result<GrowthFit> {
    let fit = growth_rate_fit(results)?;
    for r in results.iter_mut() {
        r.classification = Some(fit.best);
    }
    Ok(fit)
}

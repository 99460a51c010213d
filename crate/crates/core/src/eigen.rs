//! Principal eigenvalue of the assembled operator by shifted inverse power
//! iteration on `(σ·Id − L)⁻¹`.
//!
//! The iteration starts from the all-ones vector with the default shift of
//! [`LinearMap::shift`]. For Metzler maps every positive iterate `x` gives the
//! Collatz–Wielandt bracket `min (Lx)/x ≤ k ≤ max (Lx)/x`; the shift is then
//! lowered to just above the certified upper end, which keeps the resolvent
//! positive while making the principal mode dominate much faster.

use crate::cell::ScalarField;
use crate::discrete::LinearMap;
use crate::error::{invalid, Error, Result};
use crate::krylov::{bicgstab, gmres, SolveStats};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// Relative residual demanded from each inner linear solve, raised to the
/// round-off floor when the shift sits close to the spectrum.
const INNER_TOL: f64 = 1e-13;
const INNER_MAX_ITER: usize = 20_000;
const GMRES_RESTART: usize = 60;

#[derive(Debug, Clone)]
pub struct EigenResult {
    pub k: f64,
    /// Normalized to max = 1.
    pub eigenfunction: ScalarField,
    pub iterations: usize,
    /// `‖Lφ − kφ‖∞ / ‖φ‖∞`.
    pub residual: f64,
    /// Shift in use when the iteration stopped.
    pub final_shift: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct EigenOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Allow the Collatz–Wielandt shift update (Metzler maps only).
    pub adaptive_shift: bool,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            adaptive_shift: true,
        }
    }
}

/// Solves `(σ·Id − L) x = rhs` to relative residual `tol`.
///
/// Requires `σ` above the largest row sum of a Metzler map, or above the
/// default shift otherwise, so the shifted operator is invertible with a
/// positive inverse.
pub fn solve_shifted(
    map: &LinearMap,
    sigma: f64,
    rhs: &ScalarField,
    tol: f64,
) -> Result<ScalarField> {
    map.cell().check_same(rhs.cell())?;
    let bound = if map.is_metzler() {
        map.row_sum_max()
    } else {
        map.shift()
    };
    if !(sigma > bound) {
        return invalid(format!("shift {sigma} must exceed {bound}"));
    }
    let mut x = vec![0.0; map.len()];
    shifted_solve(map, sigma, rhs.values(), &mut x, tol)?;
    ScalarField::new(map.cell(), x)
}

fn shifted_solve(
    map: &LinearMap,
    sigma: f64,
    b: &[f64],
    x: &mut [f64],
    tol: f64,
) -> Result<SolveStats> {
    let diag: Vec<f64> = map.diagonal().iter().map(|d| sigma - d).collect();
    let op = |v: &[f64], out: &mut [f64]| {
        map.apply_slice(v, out);
        for (o, vi) in out.iter_mut().zip(v) {
            *o = sigma * vi - *o;
        }
    };
    let start = x.to_vec();
    match bicgstab(op, &diag, b, x, tol, INNER_MAX_ITER) {
        Err(Error::NoConvergence { .. }) => {
            x.copy_from_slice(&start);
            gmres(op, &diag, b, x, tol, GMRES_RESTART, INNER_MAX_ITER)
        }
        other => other,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn principal_eigenvalue(map: &LinearMap, tol: f64, max_iter: usize) -> Result<EigenResult> {
    principal_eigenvalue_with(
        map,
        EigenOptions {
            tol,
            max_iter,
            ..EigenOptions::default()
        },
    )
}

pub fn principal_eigenvalue_with(map: &LinearMap, opts: EigenOptions) -> Result<EigenResult> {
    let n = map.len();
    let sigma0 = map.shift();
    let mut adaptive = opts.adaptive_shift && map.is_metzler();
    let mut phi = vec![1.0; n];
    let mut lphi = vec![0.0; n];
    map.apply_slice(&phi, &mut lphi);
    let mut k = dot(&phi, &lphi) / dot(&phi, &phi);
    let mut sigma = sigma0;
    if adaptive {
        sigma = next_shift(&phi, &lphi, sigma0);
    }
    let mut x = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let solve = |sigma: f64, x: &mut [f64]| {
            x.copy_from_slice(&phi);
            let scale = sigma - k;
            if scale.abs() > 0.0 {
                x.iter_mut().for_each(|v| *v /= scale);
            }
            let floor =
                64.0 * f64::EPSILON * (sigma.abs() + map.norm_bound()) / scale.abs().max(1e-300);
            shifted_solve(map, sigma, &phi, x, INNER_TOL.max(floor))
        };
        match solve(sigma, &mut x) {
            Ok(_) => {}
            // close shifts can stall the Krylov solver on strongly nonnormal
            // maps; the default shift is diagonally dominant
            Err(Error::NoConvergence { .. }) if sigma < sigma0 => {
                adaptive = false;
                sigma = sigma0;
                solve(sigma, &mut x)?;
            }
            Err(e) => return Err(e),
        }
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(m > 0.0) || !m.is_finite() {
            return Err(Error::LostPositivity { min: m });
        }
        for (p, v) in phi.iter_mut().zip(&x) {
            *p = v / m;
        }
        map.apply_slice(&phi, &mut lphi);
        let k_new = dot(&phi, &lphi) / dot(&phi, &phi);
        residual = phi
            .iter()
            .zip(&lphi)
            .fold(0.0f64, |r, (p, l)| r.max((l - k_new * p).abs()))
            / max_abs(&phi);
        let dk = (k_new - k).abs();
        k = k_new;
        if dk <= opts.tol * k.abs() && residual <= opts.tol {
            let min = phi.iter().cloned().fold(f64::INFINITY, f64::min);
            if !(min > 0.0) {
                return Err(Error::LostPositivity { min });
            }
            return Ok(EigenResult {
                k,
                eigenfunction: ScalarField::new(map.cell(), phi)?,
                iterations: it,
                residual,
                final_shift: sigma,
            });
        }
        if adaptive && phi.iter().all(|&p| p > 0.0) {
            sigma = next_shift(&phi, &lphi, sigma0);
        }
    }
    Err(Error::NoConvergence {
        solver: "inverse power iteration",
        iterations: opts.max_iter,
        residual,
    })
}

/// Shift just above the Collatz–Wielandt upper bound of the current iterate.
fn next_shift(phi: &[f64], lphi: &[f64], sigma0: f64) -> f64 {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (p, l) in phi.iter().zip(lphi) {
        let r = l / p;
        lo = lo.min(r);
        hi = hi.max(r);
    }
    let margin = (hi - lo).max(1e-4 * (1.0 + hi.abs()));
    (hi + margin).min(sigma0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::{
        make_flow, DiffusionSpec, FlowSpec, PeriodicCell, ShearProfile, VectorField,
    };
    use crate::discrete::{assemble, OperatorSpec, Scheme};
    use nalgebra::DMatrix;

    fn shear_map(n: usize, m: f64, lam: f64, scheme: Scheme) -> LinearMap {
        let c = PeriodicCell::unit(2, n).unwrap();
        let a = DiffusionSpec::identity(&c);
        let q = make_flow(
            &FlowSpec::Shear {
                axis: 0,
                cross_axis: 1,
                profile: ShearProfile::Sine,
                amplitude: 1.0,
            },
            &c,
        )
        .unwrap();
        let z = ScalarField::constant(&c, 1.0);
        assemble(&OperatorSpec {
            diffusion: &a,
            q: &q,
            amplitude: m,
            zeta: &z,
            direction: &[1.0, 0.0],
            lambda: lam,
            scheme,
        })
        .unwrap()
    }

    fn constant_map(lam: f64, zeta: f64) -> LinearMap {
        let c = PeriodicCell::unit(2, 16).unwrap();
        let a = DiffusionSpec::identity(&c);
        let q = VectorField::zero(&c);
        let z = ScalarField::constant(&c, zeta);
        assemble(&OperatorSpec {
            diffusion: &a,
            q: &q,
            amplitude: 0.0,
            zeta: &z,
            direction: &[1.0, 0.0],
            lambda: lam,
            scheme: Scheme::Upwind,
        })
        .unwrap()
    }

    #[test]
    fn homogeneous_eigenvalue_is_closed_form() {
        for (lam, expect) in [(1.0, 2.0), (0.5, 1.25)] {
            let r = principal_eigenvalue(&constant_map(lam, 1.0), 1e-8, 100).unwrap();
            assert!((r.k - expect).abs() < 1e-12);
            assert_eq!(r.iterations, 1);
            assert!(r
                .eigenfunction
                .values()
                .iter()
                .all(|v| (v - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn scalar_resolvent() {
        let map = constant_map(1.0, 1.0);
        let rhs = ScalarField::constant(map.cell(), 1.0);
        let x = solve_shifted(&map, 10.0, &rhs, 1e-12).unwrap();
        assert!(x.values().iter().all(|v| (v - 0.125).abs() < 1e-12));
        assert!(solve_shifted(&map, 1.0, &rhs, 1e-12).is_err());
    }

    #[test]
    fn dense_oracle_small_shear() {
        let map = shear_map(8, 4.0, 1.0, Scheme::Upwind);
        let r = principal_eigenvalue(&map, 1e-10, 10_000).unwrap();
        let oracle = spectral_abscissa(&map);
        assert!((r.k - oracle).abs() < 1e-8, "{} vs {oracle}", r.k);
        assert!(r.eigenfunction.min() > 0.0);
    }

    // Drift far above the grid's diffusion scale stalls BiCGSTAB.
    #[test]
    fn drift_dominated_map_still_converges() {
        let c = PeriodicCell::unit(2, 10).unwrap();
        let spec = FlowSpec::Shear {
            axis: 0,
            cross_axis: 1,
            profile: ShearProfile::TwoBump,
            amplitude: 1.0,
        };
        let q = make_flow(&spec, &c).unwrap();
        let map = assemble(&OperatorSpec {
            diffusion: &DiffusionSpec::identity(&c),
            q: &q,
            amplitude: 4.623813067333951,
            zeta: &ScalarField::constant(&c, 1.0),
            direction: &[1.0, 0.0],
            lambda: 97.15578646301867,
            scheme: Scheme::Upwind,
        })
        .unwrap();
        let r = principal_eigenvalue(&map, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let oracle = spectral_abscissa(&map);
        assert!(
            (r.k - oracle).abs() < 1e-8 * oracle.abs(),
            "{} vs {oracle}",
            r.k
        );
    }

    fn spectral_abscissa(map: &LinearMap) -> f64 {
        let n = map.len();
        let mut dense = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for (j, v) in map.row(i) {
                dense[(i, j)] += v;
            }
        }
        dense
            .complex_eigenvalues()
            .iter()
            .map(|z| z.re)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn large_lambda_converges_quickly() {
        let map = shear_map(32, 64.0, 100.0, Scheme::Upwind);
        let r = principal_eigenvalue(&map, 1e-8, 10_000).unwrap();
        assert!(r.iterations < 200, "{} iterations", r.iterations);
        assert!(r.residual <= 1e-8);
    }
}

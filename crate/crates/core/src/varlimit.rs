//! Large-amplitude limit of `c*/M`: the best ratio `∫(q·ẽ)w² / ∫w²` over
//! first integrals `w` of the flow satisfying `∫ζw² ≥ ∫∇w·A∇w`.
//!
//! The constrained problem is a generalized Rayleigh quotient with one
//! quadratic inequality. On a finite basis its value equals
//! `min_{ν≥0} λ_max(N + νG)` with `G = Z − K`, so the dense path bisects on
//! `ν` and then polishes with exact two-dimensional steps. Everything returned
//! is an explicit feasible `w`, hence a lower bound.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cell::{CylinderProfile, DiffusionSpec, Label, PeriodicCell, ScalarField, VectorField};
use crate::discrete;
use crate::error::{invalid, Error, Result};
use crate::h1dim::{self, AxisymmetricProblem};
use crate::krylov::{self, norm};

/// Relative size below which a velocity is treated as zero.
pub const DEFAULT_KERNEL_TOL: f64 = 1e-10;
/// Largest grid handled by the dense null-space factorization.
pub const DENSE_KERNEL_LIMIT: usize = 1000;

// Square sparse matrix in compressed rows.
#[derive(Debug, Clone)]
struct Csr {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Csr {
    fn from_rows(n: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for mut r in rows {
            r.sort_unstable_by_key(|e| e.0);
            let start = cols.len();
            for (j, v) in r {
                if cols.len() > start && *cols.last().unwrap() == j {
                    *vals.last_mut().unwrap() += v;
                } else {
                    cols.push(j);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Self {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    fn rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = (self.row_ptr[i]..self.row_ptr[i + 1])
                .map(|p| self.vals[p] * x[self.cols[p]])
                .sum();
        }
    }

    fn tmatvec(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for (i, xi) in x.iter().enumerate() {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                y[self.cols[p]] += self.vals[p] * xi;
            }
        }
    }

    fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows(), self.n);
        for i in 0..self.rows() {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                m[(i, self.cols[p])] += self.vals[p];
            }
        }
        m
    }

    fn quad(&self, x: &[f64]) -> f64 {
        let mut y = vec![0.0; self.rows()];
        self.matvec(x, &mut y);
        dot(x, &y)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Upwind discretization of `w ↦ q·∇w`.
fn advective_derivative(q: &VectorField) -> Csr {
    let cell = q.cell();
    let h = cell.spacing();
    let rows = (0..cell.len())
        .map(|i| {
            let mut r = Vec::with_capacity(2 * cell.dim() + 1);
            for k in 0..cell.dim() {
                let v = q.component(k)[i];
                if v > 0.0 {
                    r.push((i, v / h[k]));
                    r.push((cell.shift(i, k, -1), -v / h[k]));
                } else if v < 0.0 {
                    r.push((cell.shift(i, k, 1), -v / h[k]));
                    r.push((i, v / h[k]));
                }
            }
            r
        })
        .collect();
    Csr::from_rows(cell.len(), rows)
}

/// `max |q·∇w|` with the upwind derivative used for the kernel.
pub fn first_integral_residual(q: &VectorField, w: &[f64]) -> f64 {
    let d = advective_derivative(q);
    let mut y = vec![0.0; w.len()];
    d.matvec(w, &mut y);
    y.iter().fold(0.0, |a, v| a.max(v.abs()))
}

// Flat index → line id along `axis`, plus the base index of every line.
fn lines(cell: &PeriodicCell, axis: usize) -> (Vec<usize>, Vec<usize>) {
    let mut line_of = vec![usize::MAX; cell.len()];
    let mut bases = Vec::new();
    for i in 0..cell.len() {
        if cell.axis_index(i, axis) == 0 {
            line_of[i] = bases.len();
            bases.push(i);
        }
    }
    for i in 0..cell.len() {
        let b = cell.shift(i, axis, -(cell.axis_index(i, axis) as isize));
        line_of[i] = line_of[b];
    }
    (line_of, bases)
}

/// Orthogonal projector onto discrete first integrals of `q`.
#[derive(Debug, Clone)]
pub enum Projector {
    /// `q ≡ 0`: every field is a first integral.
    Identity { len: usize },
    /// Axis-aligned flow invariant along its axis: average along each line
    /// carrying flow, leave stagnant lines free.
    LineAverage {
        cell: PeriodicCell,
        axis: usize,
        line_of: Vec<usize>,
        averaged: Vec<bool>,
    },
    /// Orthonormal null-space basis from a dense factorization.
    Dense { basis: DMatrix<f64> },
    /// `w − Dᵀ(DDᵀ)⁺Dw` by conjugate gradients.
    Iterative { d: Box<DerivativeMatrix>, tol: f64 },
}

/// Opaque handle on the advective derivative used by the iterative projector.
#[derive(Debug, Clone)]
pub struct DerivativeMatrix(Csr);

impl Projector {
    pub fn len(&self) -> usize {
        match self {
            Projector::Identity { len } => *len,
            Projector::LineAverage { line_of, .. } => line_of.len(),
            Projector::Dense { basis } => basis.nrows(),
            Projector::Iterative { d, .. } => d.0.n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn apply(&self, w: &[f64]) -> Vec<f64> {
        match self {
            Projector::Identity { .. } => w.to_vec(),
            Projector::LineAverage {
                line_of, averaged, ..
            } => {
                let m = averaged.len();
                let mut sum = vec![0.0; m];
                let mut count = vec![0usize; m];
                for (i, &l) in line_of.iter().enumerate() {
                    sum[l] += w[i];
                    count[l] += 1;
                }
                line_of
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| {
                        if averaged[l] {
                            sum[l] / count[l] as f64
                        } else {
                            w[i]
                        }
                    })
                    .collect()
            }
            Projector::Dense { basis } => {
                let c = basis.tr_mul(&DVector::from_column_slice(w));
                (basis * c).as_slice().to_vec()
            }
            Projector::Iterative { d, tol } => {
                let d = &d.0;
                let mut dw = vec![0.0; d.rows()];
                d.matvec(w, &mut dw);
                let mut tmp = vec![0.0; d.n];
                let op = |x: &[f64], y: &mut [f64]| {
                    let mut t = vec![0.0; d.n];
                    d.tmatvec(x, &mut t);
                    d.matvec(&t, y);
                };
                let diag: Vec<f64> = (0..d.rows())
                    .map(|i| {
                        (d.row_ptr[i]..d.row_ptr[i + 1])
                            .map(|p| d.vals[p].powi(2))
                            .sum()
                    })
                    .collect();
                // Dw at roundoff level means w is already in the kernel;
                // below that level CG only amplifies noise.
                let dnorm = diag.iter().fold(0.0f64, |a, v| a.max(*v)).sqrt();
                let floor = 1e-13 * dnorm * norm(w);
                let bnorm = norm(&dw);
                if bnorm <= floor {
                    return w.to_vec();
                }
                let mut y = vec![0.0; d.rows()];
                // A failed solve still leaves the last iterate in `y`.
                let _ = krylov::cg(
                    op,
                    &diag,
                    &dw,
                    &mut y,
                    tol.max(floor / bnorm),
                    20 * d.rows().max(100),
                );
                d.tmatvec(&y, &mut tmp);
                w.iter().zip(&tmp).map(|(a, b)| a - b).collect()
            }
        }
    }

    /// Orthonormal basis of the range, when it is cheap to form.
    pub fn basis(&self, limit: usize) -> Option<DMatrix<f64>> {
        match self {
            Projector::Identity { len } if *len <= limit => Some(DMatrix::identity(*len, *len)),
            Projector::LineAverage {
                line_of, averaged, ..
            } => {
                let m = averaged.len();
                let mut count = vec![0usize; m];
                for &l in line_of {
                    count[l] += 1;
                }
                let mut col_of_line = vec![usize::MAX; m];
                let mut ncols = 0;
                for l in 0..m {
                    if averaged[l] {
                        col_of_line[l] = ncols;
                        ncols += 1;
                    }
                }
                let free = line_of.iter().filter(|&&l| !averaged[l]).count();
                if ncols + free > limit {
                    return None;
                }
                let mut b = DMatrix::zeros(line_of.len(), ncols + free);
                let mut next = ncols;
                for (i, &l) in line_of.iter().enumerate() {
                    if averaged[l] {
                        b[(i, col_of_line[l])] = 1.0 / (count[l] as f64).sqrt();
                    } else {
                        b[(i, next)] = 1.0;
                        next += 1;
                    }
                }
                Some(b)
            }
            Projector::Dense { basis } if basis.ncols() <= limit => Some(basis.clone()),
            _ => None,
        }
    }
}

fn axis_aligned(q: &VectorField, tol: f64) -> Option<usize> {
    let cell = q.cell();
    let qmax = q.max_norm();
    let thresh = tol * qmax;
    let active: Vec<usize> = (0..cell.dim())
        .filter(|&k| q.component(k).iter().any(|v| v.abs() > thresh))
        .collect();
    if active.len() != 1 {
        return None;
    }
    let a = active[0];
    let c = q.component(a);
    let invariant = (0..cell.len()).all(|i| (c[cell.shift(i, a, 1)] - c[i]).abs() <= thresh);
    invariant.then_some(a)
}

/// Projector onto the kernel of the upwind advective derivative.
///
/// Stagnant lines of an axis-aligned flow are averaged when no neighbouring
/// line is stagnant too: an isolated zero row (as at the zeros of a sine
/// profile) is a set of measure zero, not a region where `w` may vary.
pub fn kernel_projector(q: &VectorField, tol: f64) -> Result<Projector> {
    let cell = q.cell();
    if q.max_norm() == 0.0 {
        return Ok(Projector::Identity { len: cell.len() });
    }
    if let Some(axis) = axis_aligned(q, tol) {
        let (line_of, bases) = lines(cell, axis);
        let thresh = tol * q.max_norm();
        let zero: Vec<bool> = bases
            .iter()
            .map(|&b| q.component(axis)[b].abs() <= thresh)
            .collect();
        let averaged = bases
            .iter()
            .enumerate()
            .map(|(l, &b)| {
                if !zero[l] {
                    return true;
                }
                (0..cell.dim()).filter(|&k| k != axis).all(|k| {
                    !zero[line_of[cell.shift(b, k, 1)]] && !zero[line_of[cell.shift(b, k, -1)]]
                })
            })
            .collect();
        return Ok(Projector::LineAverage {
            cell: cell.clone(),
            axis,
            line_of,
            averaged,
        });
    }
    if cell.len() <= DENSE_KERNEL_LIMIT {
        return dense_kernel_projector(q, tol);
    }
    Ok(Projector::Iterative {
        d: Box::new(DerivativeMatrix(advective_derivative(q))),
        tol: 1e-14,
    })
}

/// Null space of the advective derivative from its singular value
/// decomposition, singular values below `tol·σ_max` counted as zero.
pub fn dense_kernel_projector(q: &VectorField, tol: f64) -> Result<Projector> {
    let d = advective_derivative(q).to_dense();
    let n = d.ncols();
    let svd = d.svd(false, true);
    let vt = svd.v_t.expect("right singular vectors requested");
    let smax = svd.singular_values.iter().fold(0.0f64, |a, v| a.max(*v));
    let cut = (tol * smax).max(f64::MIN_POSITIVE);
    let keep: Vec<usize> = (0..n).filter(|&i| svd.singular_values[i] <= cut).collect();
    if keep.is_empty() {
        return invalid("advective derivative has a trivial kernel at this tolerance");
    }
    let basis = DMatrix::from_fn(n, keep.len(), |r, c| vt[(keep[c], r)]);
    Ok(Projector::Dense { basis })
}

#[derive(Debug, Clone)]
pub struct FirstIntegralResult {
    pub w: ScalarField,
    /// `∫(q·ẽ)w² / ∫w²`.
    pub ratio: f64,
    /// `∫ζw² − ∫∇w·A∇w`.
    pub slack: f64,
    /// `max |q·∇w|`.
    pub residual: f64,
    pub feasible: bool,
    /// `min_ν λ_max(N + νG)` over the evaluated multipliers, when the dense path ran.
    pub upper_bound: Option<f64>,
    /// Supremum of `q·ẽ` over the kernel with the energy constraint dropped.
    pub unconstrained: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioOptions {
    pub starts: usize,
    pub seed: u64,
    pub ascent_steps: usize,
    /// Largest reduced basis handled with dense eigensolves.
    pub dense_limit: usize,
}

impl Default for RatioOptions {
    fn default() -> Self {
        Self {
            starts: 4,
            seed: 0,
            ascent_steps: 200,
            dense_limit: 2500,
        }
    }
}

/// Best of `R = xᵀNx / xᵀMx` subject to `xᵀGx ≥ 0` over `x = a·u + b·v`,
/// given the 2×2 Gram matrices of the pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanePoint {
    pub a: f64,
    pub b: f64,
    pub ratio: f64,
    pub constraint: f64,
}

pub fn best_in_plane(n: [[f64; 2]; 2], g: [[f64; 2]; 2], m: [[f64; 2]; 2]) -> Option<PlanePoint> {
    let l11 = m[0][0].sqrt();
    if !(l11 > 0.0) {
        return None;
    }
    let l21 = m[0][1] / l11;
    let l22sq = m[1][1] - l21 * l21;
    let scale_g = g.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    let feasible_tol = 1e-12 * scale_g.max(f64::MIN_POSITIVE);
    if l22sq <= 1e-13 * m[1][1] {
        // u and v are parallel
        let r = n[0][0] / m[0][0];
        return (g[0][0] >= -feasible_tol).then_some(PlanePoint {
            a: 1.0,
            b: 0.0,
            ratio: r,
            constraint: g[0][0],
        });
    }
    let l22 = l22sq.sqrt();
    // x = L⁻ᵀ y with M = L Lᵀ
    let back = |y0: f64, y1: f64| {
        let b = y1 / l22;
        ((y0 - l21 * b) / l11, b)
    };
    let form = |q: &[[f64; 2]; 2], a: f64, b: f64| {
        q[0][0] * a * a + 2.0 * q[0][1] * a * b + q[1][1] * b * b
    };
    let wt = |q: &[[f64; 2]; 2]| {
        let (a0, b0) = back(1.0, 0.0);
        let (a1, b1) = back(0.0, 1.0);
        let t00 = form(q, a0, b0);
        let t11 = form(q, a1, b1);
        let t01 = q[0][0] * a0 * a1 + q[0][1] * (a0 * b1 + b0 * a1) + q[1][1] * b0 * b1;
        (t00, t01, t11)
    };
    let (n00, n01, n11) = wt(&n);
    let (g00, g01, g11) = wt(&g);
    let mut angles = vec![0.5 * (2.0 * n01).atan2(n00 - n11)];
    angles.push(angles[0] + 0.5 * std::f64::consts::PI);
    let g0 = 0.5 * (g00 + g11);
    let g1 = 0.5 * (g00 - g11);
    let g2 = g01;
    let rho = g1.hypot(g2);
    if rho > 0.0 && rho >= g0.abs() {
        let phi = g2.atan2(g1);
        let t = (-g0 / rho).clamp(-1.0, 1.0).acos();
        angles.push(0.5 * (phi + t));
        angles.push(0.5 * (phi - t));
    }
    let mut best: Option<PlanePoint> = None;
    for th in angles {
        let (c, s) = (th.cos(), th.sin());
        let ratio = n00 * c * c + 2.0 * n01 * c * s + n11 * s * s;
        let con = g00 * c * c + 2.0 * g01 * c * s + g11 * s * s;
        if con < -feasible_tol {
            continue;
        }
        if best.is_none_or(|b| ratio > b.ratio) {
            let (a, b) = back(c, s);
            best = Some(PlanePoint {
                a,
                b,
                ratio,
                constraint: con,
            });
        }
    }
    best
}

fn top_eigen(m: DMatrix<f64>) -> (f64, DVector<f64>) {
    let eig = SymmetricEigen::new(m);
    let (i, &v) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty matrix");
    (v, eig.eigenvectors.column(i).into_owned())
}

struct Reduced {
    n: DMatrix<f64>,
    g: DMatrix<f64>,
}

type Gram = [[f64; 2]; 2];

impl Reduced {
    fn forms(&self, u: &DVector<f64>, v: &DVector<f64>) -> (Gram, Gram, Gram) {
        let (nu, nv) = (&self.n * u, &self.n * v);
        let (gu, gv) = (&self.g * u, &self.g * v);
        (
            [[u.dot(&nu), u.dot(&nv)], [u.dot(&nv), v.dot(&nv)]],
            [[u.dot(&gu), u.dot(&gv)], [u.dot(&gv), v.dot(&gv)]],
            [[u.dot(u), u.dot(v)], [u.dot(v), v.dot(v)]],
        )
    }

    fn ratio(&self, y: &DVector<f64>) -> f64 {
        y.dot(&(&self.n * y)) / y.dot(y)
    }

    fn constraint(&self, y: &DVector<f64>) -> f64 {
        y.dot(&(&self.g * y))
    }

    fn plane(&self, u: &DVector<f64>, v: &DVector<f64>) -> Option<(DVector<f64>, f64)> {
        let (n, g, m) = self.forms(u, v);
        let p = best_in_plane(n, g, m)?;
        let mut y = u * p.a + v * p.b;
        let norm = y.norm();
        if !(norm > 0.0) {
            return None;
        }
        y /= norm;
        Some((y, p.ratio))
    }

    /// Bisection on the multiplier, returning the best feasible vector and the
    /// smallest dual value seen.
    fn dual(&self) -> (Option<DVector<f64>>, f64) {
        let eval = |nu: f64| {
            let (t, y) = top_eigen(&self.n + &self.g * nu);
            let c = self.constraint(&y);
            (t, y, c)
        };
        let (t0, y0, c0) = eval(0.0);
        if c0 >= 0.0 {
            return (Some(y0), t0);
        }
        let mut upper = t0;
        let (mut lo, mut y_lo) = (0.0, y0);
        let mut hi = 1.0;
        let mut hit = None;
        for _ in 0..200 {
            let (t, y, c) = eval(hi);
            upper = upper.min(t);
            if c >= 0.0 {
                hit = Some(y);
                break;
            }
            lo = hi;
            y_lo = y;
            hi *= 2.0;
        }
        let Some(mut y_hi) = hit else {
            return (None, upper);
        };
        for _ in 0..200 {
            if hi - lo <= 1e-13 * hi {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let (t, y, c) = eval(mid);
            upper = upper.min(t);
            if c >= 0.0 {
                hi = mid;
                y_hi = y;
            } else {
                lo = mid;
                y_lo = y;
            }
        }
        // The top eigenvector may jump at the optimal multiplier; the two
        // sides together span the face where the constraint is tight.
        let best = match self.plane(&y_hi, &y_lo) {
            Some((y, r)) if r >= self.ratio(&y_hi) => y,
            _ => y_hi,
        };
        (Some(best), upper)
    }

    /// Exact two-dimensional steps along the gradient and along its
    /// component tangent to the constraint.
    fn ascent(&self, start: DVector<f64>, steps: usize) -> DVector<f64> {
        let mut y = start.normalize();
        let mut r = self.ratio(&y);
        let gscale = self.g.amax().max(f64::MIN_POSITIVE);
        for _ in 0..steps {
            let mut grad = &self.n * &y - &y * r;
            grad -= &y * y.dot(&grad);
            if grad.norm() <= 1e-13 * (r.abs() + self.n.amax()) {
                break;
            }
            let mut cands = vec![grad.clone()];
            let gy = &self.g * &y;
            if self.constraint(&y) <= 1e-8 * gscale && gy.norm() > 0.0 {
                let t = &grad - &gy * (grad.dot(&gy) / gy.dot(&gy));
                cands.push(t);
            }
            let mut improved = false;
            for d in cands {
                if let Some((y2, r2)) = self.plane(&y, &d) {
                    if r2 > r + 1e-15 * r.abs().max(1e-300)
                        && self.constraint(&y2) >= -1e-12 * gscale
                    {
                        y = y2;
                        r = r2;
                        improved = true;
                    }
                }
            }
            if !improved {
                break;
            }
        }
        y
    }

    fn solve(
        &self,
        constant: &DVector<f64>,
        extra: &[DVector<f64>],
        opts: &RatioOptions,
    ) -> (DVector<f64>, Option<f64>) {
        let (dual_y, upper) = self.dual();
        let m = self.n.nrows();
        let mut starts: Vec<DVector<f64>> = dual_y.into_iter().collect();
        starts.extend(extra.iter().cloned());
        let random: Vec<DVector<f64>> = (0..opts.starts)
            .into_par_iter()
            .filter_map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(s as u64));
                let r = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
                self.plane(constant, &r).map(|p| p.0)
            })
            .collect();
        starts.extend(random);
        starts.push(constant.normalize());
        let polished: Vec<DVector<f64>> = starts
            .into_par_iter()
            .map(|s| self.ascent(s, opts.ascent_steps))
            .collect();
        let gscale = self.g.amax();
        let best = polished
            .into_iter()
            .filter(|y| self.constraint(y) >= -1e-10 * gscale)
            .max_by(|a, b| self.ratio(a).total_cmp(&self.ratio(b)))
            .unwrap_or_else(|| constant.normalize());
        (best, Some(upper))
    }
}

fn stiffness_csr(diffusion: &DiffusionSpec) -> Result<Csr> {
    let map = discrete::stiffness(diffusion)?;
    let rows = (0..map.len()).map(|i| map.row(i).collect()).collect();
    Ok(Csr::from_rows(map.len(), rows))
}

fn unit_direction(e: &[f64], dim: usize) -> Result<Vec<f64>> {
    let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    if e.len() != dim || !(norm > 0.0) {
        return invalid("direction must be a nonzero vector of the cell dimension");
    }
    Ok(e.iter().map(|v| v / norm).collect())
}

fn check_inputs(q: &VectorField, zeta: &ScalarField, a: &DiffusionSpec) -> Result<()> {
    q.cell().check_same(zeta.cell())?;
    q.cell().check_same(a.cell())?;
    if zeta.min() <= 0.0 {
        return invalid("zeta must be positive");
    }
    Ok(())
}

// Normalizes, evaluates every quantity on the full grid and checks feasibility.
fn finish(
    q: &VectorField,
    zeta: &ScalarField,
    k: &Csr,
    v: &[f64],
    mut w: Vec<f64>,
    upper_bound: Option<f64>,
    unconstrained: Option<f64>,
) -> Result<FirstIntegralResult> {
    let cell = q.cell();
    let wmax = w.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let sign = if w.iter().sum::<f64>() < 0.0 {
        -1.0
    } else {
        1.0
    };
    if wmax > 0.0 {
        w.iter_mut().for_each(|x| *x *= sign / wmax);
    }
    let dv = cell.point_volume();
    let w2: f64 = w.iter().map(|x| x * x).sum();
    let num: f64 = v.iter().zip(&w).map(|(a, b)| a * b * b).sum();
    let zw: f64 = zeta.values().iter().zip(&w).map(|(z, b)| z * b * b).sum();
    let energy = k.quad(&w);
    let slack = dv * (zw - energy);
    let residual = first_integral_residual(q, &w);
    let field = ScalarField::new(cell, w)?;
    let grad = field.gradient();
    let gmax = (0..cell.len())
        .map(|i| grad.iter().map(|g| g[i] * g[i]).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let fi_tol = 1e-6 * q.max_norm() * gmax + 1e-12 * q.max_norm();
    let slack_tol = 1e-8 * dv * (zw + energy.abs());
    Ok(FirstIntegralResult {
        ratio: num / w2,
        slack,
        residual,
        feasible: slack >= -slack_tol && residual <= fi_tol,
        w: field,
        upper_bound,
        unconstrained,
    })
}

/// `(R(w), ∫ζw² − ∫∇w·A∇w)` for an arbitrary field `w`.
pub fn evaluate(
    q: &VectorField,
    zeta: &ScalarField,
    a: &DiffusionSpec,
    e: &[f64],
    w: &ScalarField,
) -> Result<(f64, f64)> {
    check_inputs(q, zeta, a)?;
    q.cell().check_same(w.cell())?;
    let cell = q.cell();
    let e = unit_direction(e, cell.dim())?;
    let k = stiffness_csr(a)?;
    let wv = w.values();
    let w2: f64 = wv.iter().map(|x| x * x).sum();
    if w2 == 0.0 {
        return invalid("w vanishes identically");
    }
    let num: f64 = (0..cell.len()).map(|i| q.dot(i, &e) * wv[i] * wv[i]).sum();
    let zw: f64 = zeta.values().iter().zip(wv).map(|(z, x)| z * x * x).sum();
    Ok((num / w2, cell.point_volume() * (zw - k.quad(wv))))
}

fn constant_result(
    q: &VectorField,
    zeta: &ScalarField,
    k: &Csr,
    v: &[f64],
) -> Result<FirstIntegralResult> {
    finish(q, zeta, k, v, vec![1.0; q.cell().len()], None, None)
}

/// Maximizes `∫(q·ẽ)w² / ∫w²` over `w = Pw` with `∫ζw² ≥ ∫∇w·A∇w`.
pub fn maximize_ratio(
    q: &VectorField,
    zeta: &ScalarField,
    a: &DiffusionSpec,
    e: &[f64],
    p: &Projector,
    opts: &RatioOptions,
) -> Result<FirstIntegralResult> {
    check_inputs(q, zeta, a)?;
    let cell = q.cell();
    if p.len() != cell.len() {
        return Err(Error::CellMismatch);
    }
    let e = unit_direction(e, cell.dim())?;
    let v: Vec<f64> = (0..cell.len()).map(|i| q.dot(i, &e)).collect();
    let k = stiffness_csr(a)?;
    if v.iter().all(|x| *x == 0.0) {
        return constant_result(q, zeta, &k, &v);
    }
    let zv = zeta.values();
    let best = match p.basis(opts.dense_limit) {
        Some(b) => {
            let m = b.ncols();
            let n = b.nrows();
            let mut kb = DMatrix::zeros(n, m);
            let mut col = vec![0.0; n];
            for c in 0..m {
                k.matvec(b.column(c).as_slice(), &mut col);
                kb.column_mut(c).copy_from_slice(&col);
            }
            let mut zb = b.clone();
            let mut vb = b.clone();
            for (i, (z, vi)) in zv.iter().zip(&v).enumerate() {
                zb.row_mut(i).scale_mut(*z);
                vb.row_mut(i).scale_mut(*vi);
            }
            let red = Reduced {
                n: b.tr_mul(&vb),
                g: b.tr_mul(&(zb - kb)),
            };
            let constant = b.tr_mul(&DVector::from_element(n, 1.0));
            let (y, upper) = red.solve(&constant, &[], opts);
            ((&b * y).as_slice().to_vec(), upper)
        }
        None => (projected_ascent(&v, zv, &k, p, opts), None),
    };
    let res = finish(q, zeta, &k, &v, best.0, best.1, None)?;
    if res.feasible && res.ratio > 0.0 {
        Ok(res)
    } else {
        constant_result(q, zeta, &k, &v)
    }
}

// Full-space version of the plane ascent for projectors without a cheap basis.
fn projected_ascent(
    v: &[f64],
    zeta: &[f64],
    k: &Csr,
    p: &Projector,
    opts: &RatioOptions,
) -> Vec<f64> {
    let n = v.len();
    let nx = |x: &[f64]| -> Vec<f64> { x.iter().zip(v).map(|(a, b)| a * b).collect() };
    let gx = |x: &[f64]| -> Vec<f64> {
        let mut kx = vec![0.0; n];
        k.matvec(x, &mut kx);
        x.iter()
            .zip(zeta)
            .zip(&kx)
            .map(|((a, z), kk)| z * a - kk)
            .collect()
    };
    let forms = |u: &[f64], w: &[f64]| {
        let (nu, nw, gu, gw) = (nx(u), nx(w), gx(u), gx(w));
        (
            [[dot(u, &nu), dot(u, &nw)], [dot(u, &nw), dot(w, &nw)]],
            [[dot(u, &gu), dot(u, &gw)], [dot(u, &gw), dot(w, &gw)]],
            [[dot(u, u), dot(u, w)], [dot(u, w), dot(w, w)]],
        )
    };
    let combine = |u: &[f64], w: &[f64], pp: PlanePoint| -> Vec<f64> {
        u.iter().zip(w).map(|(x, y)| pp.a * x + pp.b * y).collect()
    };
    let ones = p.apply(&vec![1.0; n]);
    let run = |s: usize| -> (Vec<f64>, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(s as u64));
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = p.apply(&r);
        let (nn, gg, mm) = forms(&ones, &r);
        let Some(pp) = best_in_plane(nn, gg, mm) else {
            return (ones.clone(), f64::NEG_INFINITY);
        };
        let mut y = combine(&ones, &r, pp);
        let mut ratio = pp.ratio;
        for _ in 0..opts.ascent_steps {
            let yy = dot(&y, &y);
            let ny = nx(&y);
            let grad: Vec<f64> = ny.iter().zip(&y).map(|(a, b)| a - ratio * b).collect();
            let grad = p.apply(&grad);
            let (nn, gg, mm) = forms(&y, &grad);
            match best_in_plane(nn, gg, mm) {
                Some(pp) if pp.ratio > ratio * (1.0 + 1e-12) => {
                    y = combine(&y, &grad, pp);
                    let s = (yy / dot(&y, &y)).sqrt();
                    y.iter_mut().for_each(|x| *x *= s);
                    ratio = pp.ratio;
                }
                _ => break,
            }
        }
        (y, ratio)
    };
    (0..opts.starts.max(1))
        .into_par_iter()
        .map(run)
        .collect::<Vec<_>>()
        .into_iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(y, _)| y)
        .unwrap_or(ones)
}

// Cross-section data for flows invariant along `axis`.
struct CrossSection {
    line_of: Vec<usize>,
    bases: Vec<usize>,
    /// Nodes per line.
    per_line: usize,
    stiffness: Csr,
}

impl CrossSection {
    /// Energy form `Σ t (Δw)² + Σ a_kl D_k w D_l w` on functions of the cross
    /// variables, with coefficients averaged along the axis.
    fn new(a: &DiffusionSpec, axis: usize) -> Self {
        let cell = a.cell();
        let d = cell.dim();
        let h = cell.spacing();
        let (line_of, bases) = lines(cell, axis);
        let m = bases.len();
        let per_line = cell.resolution()[axis];
        let mut abar = vec![0.0; m * d * d];
        for i in 0..cell.len() {
            let l = line_of[i];
            for k in 0..d {
                for j in 0..d {
                    abar[(l * d + k) * d + j] += a.entry(i, k, j) / per_line as f64;
                }
            }
        }
        let ab = |l: usize, k: usize, j: usize| abar[(l * d + k) * d + j];
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
        for (l, &b) in bases.iter().enumerate() {
            for k in (0..d).filter(|&k| k != axis) {
                let lp = line_of[cell.shift(b, k, 1)];
                let t = 0.5 * (ab(l, k, k) + ab(lp, k, k)) / (h[k] * h[k]);
                for (x, y) in [(l, lp), (lp, l)] {
                    rows[x].push((x, t));
                    rows[x].push((y, -t));
                }
                for j in (0..d).filter(|&j| j != axis && j != k) {
                    let akj = ab(l, k, j);
                    if akj == 0.0 {
                        continue;
                    }
                    let f = akj / (4.0 * h[k] * h[j]);
                    let gk = [
                        (line_of[cell.shift(b, k, 1)], 1.0),
                        (line_of[cell.shift(b, k, -1)], -1.0),
                    ];
                    let gj = [
                        (line_of[cell.shift(b, j, 1)], 1.0),
                        (line_of[cell.shift(b, j, -1)], -1.0),
                    ];
                    for &(x, sx) in &gk {
                        for &(y, sy) in &gj {
                            // symmetrized so the form is a symmetric matrix
                            rows[x].push((y, 0.5 * f * sx * sy));
                            rows[y].push((x, 0.5 * f * sx * sy));
                        }
                    }
                }
            }
        }
        Self {
            line_of,
            bases,
            per_line,
            stiffness: Csr::from_rows(m, rows),
        }
    }

    fn len(&self) -> usize {
        self.bases.len()
    }

    fn average(&self, f: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0; self.len()];
        for (i, &l) in self.line_of.iter().enumerate() {
            s[l] += f[i];
        }
        s.iter().map(|x| x / self.per_line as f64).collect()
    }

    fn broadcast(&self, y: &[f64]) -> Vec<f64> {
        self.line_of.iter().map(|&l| y[l]).collect()
    }
}

fn shear_axis(q: &VectorField) -> Result<Option<usize>> {
    if q.max_norm() == 0.0 {
        return Ok(None);
    }
    match axis_aligned(q, 1e-12) {
        Some(a) => Ok(Some(a)),
        None => invalid("flow is not a shear along a single axis"),
    }
}

/// The shear problem posed directly on functions of the cross variables.
pub fn shear_reduction(
    q: &VectorField,
    zeta: &ScalarField,
    a: &DiffusionSpec,
    e: &[f64],
    opts: &RatioOptions,
) -> Result<FirstIntegralResult> {
    check_inputs(q, zeta, a)?;
    let cell = q.cell();
    let e = unit_direction(e, cell.dim())?;
    let v: Vec<f64> = (0..cell.len()).map(|i| q.dot(i, &e)).collect();
    let Some(axis) = shear_axis(q)? else {
        let k = stiffness_csr(a)?;
        return constant_result(q, zeta, &k, &v);
    };
    let cs = CrossSection::new(a, axis);
    let m = cs.len();
    if m > opts.dense_limit {
        return invalid(format!(
            "cross-section of {m} points exceeds the dense limit"
        ));
    }
    let vbar = cs.average(&v);
    let zbar = cs.average(zeta.values());
    let kd = cs.stiffness.to_dense();
    let red = Reduced {
        n: DMatrix::from_diagonal(&DVector::from_vec(vbar.clone())),
        g: DMatrix::from_diagonal(&DVector::from_vec(zbar)) - kd,
    };
    let constant = DVector::from_element(m, 1.0);
    // compactly supported witness: the positive part of the profile
    let bump = DVector::from_iterator(m, vbar.iter().map(|x| x.max(0.0)));
    let extra: Vec<DVector<f64>> = red
        .plane(&constant, &bump)
        .map(|p| p.0)
        .into_iter()
        .collect();
    let (y, upper) = red.solve(&constant, &extra, opts);
    let unconstrained = vbar.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let k = stiffness_csr(a)?;
    let res = finish(
        q,
        zeta,
        &k,
        &v,
        cs.broadcast(y.as_slice()),
        upper,
        Some(unconstrained),
    )?;
    if res.feasible && res.ratio > 0.0 {
        Ok(res)
    } else {
        let mut c = constant_result(q, zeta, &k, &v)?;
        c.unconstrained = Some(unconstrained);
        Ok(c)
    }
}

/// Result of the component-constant restriction.
#[derive(Debug, Clone)]
pub struct ComponentLimit {
    pub ratio: f64,
    pub slack: f64,
    pub feasible: bool,
    /// Values on `V1` and `V2`, scaled so the larger magnitude is 1.
    pub lambda_hat: f64,
    pub mu_hat: f64,
    /// Flux of the flow through `V1`.
    pub flux_v1: f64,
    /// Minimal Dirichlet energy of a transition from `λ̂` to `μ̂`.
    pub transition_energy: f64,
    /// `∫(q·ẽ)w²` of the returned field.
    pub numerator: f64,
    /// Full-grid field for the periodic backend.
    pub w: Option<ScalarField>,
    /// Grid description: cell resolution, or `[n_r, n_z]` for the axisymmetric backend.
    pub resolution: Vec<usize>,
}

// Moments of the family w = s + d·u over the quadrature weights.
struct Family {
    mass: [[f64; 2]; 2],
    num: [[f64; 2]; 2],
    zeta: [[f64; 2]; 2],
    energy: f64,
}

impl Family {
    fn from_sums(weights: &[f64], u: &[f64], v: &[f64], zeta: &[f64], energy: f64) -> Self {
        let mut mass = [[0.0; 2]; 2];
        let mut num = [[0.0; 2]; 2];
        let mut zm = [[0.0; 2]; 2];
        for i in 0..u.len() {
            let basis = [1.0, u[i]];
            for r in 0..2 {
                for c in 0..2 {
                    let b = weights[i] * basis[r] * basis[c];
                    mass[r][c] += b;
                    num[r][c] += v[i] * b;
                    zm[r][c] += zeta[i] * b;
                }
            }
        }
        Self {
            mass,
            num,
            zeta: zm,
            energy,
        }
    }

    fn solve(&self, flux: f64, resolution: Vec<usize>) -> ComponentLimit {
        let mut g = self.zeta;
        g[1][1] -= self.energy;
        let (s, d, ratio) = match best_in_plane(self.num, g, self.mass) {
            Some(p) if p.ratio > 0.0 => (p.a, p.b, p.ratio),
            _ => (1.0, 0.0, 0.0),
        };
        let (mut lh, mut mh) = (s + 0.5 * d, s - 0.5 * d);
        let scale = lh.abs().max(mh.abs());
        let sign = if s < 0.0 { -1.0 } else { 1.0 };
        lh *= sign / scale;
        mh *= sign / scale;
        let (sn, dn) = (0.5 * (lh + mh), lh - mh);
        let quad =
            |m: &[[f64; 2]; 2]| m[0][0] * sn * sn + 2.0 * m[0][1] * sn * dn + m[1][1] * dn * dn;
        let slack = quad(&g);
        ComponentLimit {
            ratio,
            slack,
            feasible: slack >= -1e-10 * (quad(&self.zeta) + self.energy * dn * dn),
            lambda_hat: lh,
            mu_hat: mh,
            flux_v1: flux,
            transition_energy: self.energy * dn * dn,
            numerator: quad(&self.num),
            w: None,
            resolution,
        }
    }
}

/// Restricts `w` to constants `λ̂` on `V1` and `μ̂` on `V2` joined by the
/// minimal-energy transition through the exterior; the best `(λ̂, μ̂)` is then
/// an exact two-dimensional problem.
///
/// Works on the cross-section of the periodic cell, which suffices because
/// the optimum is independent of the flow axis.
pub fn component_constant_limit(
    q: &VectorField,
    zeta: &ScalarField,
    a: &DiffusionSpec,
    e: &[f64],
) -> Result<ComponentLimit> {
    check_inputs(q, zeta, a)?;
    let cell = q.cell();
    let labels = q
        .labels()
        .ok_or_else(|| Error::Invalid("flow has no V1/V2 partition".into()))?;
    if !labels.contains(&Label::V1) || !labels.contains(&Label::V2) {
        return invalid("partition must contain both V1 and V2");
    }
    let e = unit_direction(e, cell.dim())?;
    let v: Vec<f64> = (0..cell.len()).map(|i| q.dot(i, &e)).collect();
    if labels
        .iter()
        .zip(&v)
        .any(|(l, x)| *l == Label::Exterior && *x != 0.0)
    {
        return invalid("flow must vanish outside the components");
    }
    let Some(axis) = shear_axis(q)? else {
        return invalid("flow vanishes identically");
    };
    let cs = CrossSection::new(a, axis);
    for i in 0..cell.len() {
        if labels[i] != labels[cs.bases[cs.line_of[i]]] {
            return invalid("partition varies along the flow axis");
        }
    }
    let m = cs.len();
    let lab: Vec<Label> = cs.bases.iter().map(|&b| labels[b]).collect();
    // transition u = ±½ on V1/V2, harmonic outside
    let mut u: Vec<f64> = lab
        .iter()
        .map(|l| match l {
            Label::V1 => 0.5,
            Label::V2 => -0.5,
            Label::Exterior => 0.0,
        })
        .collect();
    let ext: Vec<usize> = (0..m).filter(|&l| lab[l] == Label::Exterior).collect();
    let mut pos = vec![usize::MAX; m];
    for (r, &l) in ext.iter().enumerate() {
        pos[l] = r;
    }
    let k = &cs.stiffness;
    let mut rhs = vec![0.0; ext.len()];
    let mut diag = vec![0.0; ext.len()];
    for (r, &l) in ext.iter().enumerate() {
        for p in k.row_ptr[l]..k.row_ptr[l + 1] {
            let c = k.cols[p];
            if c == l {
                diag[r] += k.vals[p];
            } else if lab[c] != Label::Exterior {
                rhs[r] -= k.vals[p] * u[c];
            }
        }
    }
    let op = |x: &[f64], y: &mut [f64]| {
        for (r, &l) in ext.iter().enumerate() {
            let mut acc = 0.0;
            for p in k.row_ptr[l]..k.row_ptr[l + 1] {
                let c = k.cols[p];
                if lab[c] == Label::Exterior {
                    acc += k.vals[p] * x[pos[c]];
                }
            }
            y[r] = acc;
        }
    };
    let mut x = vec![0.0; ext.len()];
    krylov::cg(op, &diag, &rhs, &mut x, 1e-12, 50 * ext.len().max(100))?;
    for (r, &l) in ext.iter().enumerate() {
        u[l] = x[r];
    }
    // integrals over the full cell
    let dv = cell.point_volume() * cs.per_line as f64;
    let vbar = cs.average(&v);
    let zbar = cs.average(zeta.values());
    let energy = dv * k.quad(&u);
    let weights = vec![dv; m];
    let fam = Family::from_sums(&weights, &u, &vbar, &zbar, energy);
    let flux = q.flux_v1(axis).unwrap_or(0.0);
    let mut out = fam.solve(flux, cell.resolution().to_vec());
    let (s, d) = (
        0.5 * (out.lambda_hat + out.mu_hat),
        out.lambda_hat - out.mu_hat,
    );
    let wc: Vec<f64> = u.iter().map(|x| s + d * x).collect();
    let w = cs.broadcast(&wc);
    out.numerator = cell.point_volume() * v.iter().zip(&w).map(|(a, b)| a * b * b).sum::<f64>();
    out.w = Some(ScalarField::new(cell, w)?);
    Ok(out)
}

/// Two cylinders in `R^N` reduced to an axisymmetric cross-section.
///
/// The cross-section `R^{N−1}` is cut down to the cylinder `r ≤ r_max,
/// |z| ≤ z_max` around the line through both centres, with natural
/// boundary conditions on its surface.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisymmetricCylinders {
    pub dim: usize,
    pub radius: f64,
    pub gap: f64,
    pub spacing: f64,
    pub profile: CylinderProfile,
    pub zeta: f64,
    pub r_max: f64,
    pub z_max: f64,
}

impl AxisymmetricCylinders {
    /// Radius 0.2 in a cross-section of half-width 0.5, `ζ ≡ 1`.
    pub fn new(dim: usize, gap: f64, spacing: f64) -> Self {
        Self {
            dim,
            radius: 0.2,
            gap,
            spacing,
            profile: CylinderProfile::Poiseuille,
            zeta: 1.0,
            r_max: 0.5,
            z_max: 0.5,
        }
    }
}

pub fn component_constant_limit_axisymmetric(
    spec: &AxisymmetricCylinders,
) -> Result<ComponentLimit> {
    if spec.dim < 3 {
        return invalid("axisymmetric cylinders need N >= 3");
    }
    if !(spec.zeta > 0.0) {
        return invalid("zeta must be positive");
    }
    if spec.profile == CylinderProfile::Plug {
        return Err(Error::Geometry(
            "axial profile does not vanish on the cylinder boundary".into(),
        ));
    }
    let center = spec.radius + 0.5 * spec.gap;
    let sol = h1dim::solve_axisymmetric(&AxisymmetricProblem {
        dim: spec.dim - 1,
        radius: spec.radius,
        center,
        r_max: spec.r_max,
        z_max: spec.z_max,
        spacing: spec.spacing,
        lambda: 0.5,
        mu: -0.5,
    })?;
    let (nr, nz) = (sol.nr, sol.nz);
    let rho: Vec<f64> = (0..nr * nz)
        .map(|i| {
            let (r, z) = (sol.r(i % nr), sol.z(i / nr) - center);
            (r * r + z * z).sqrt() / spec.radius
        })
        .collect();
    let meas: Vec<f64> = (0..nr * nz).map(|i| sol.measure(i % nr)).collect();
    let c = match spec.profile {
        CylinderProfile::ZeroFlux => {
            let (mut s0, mut s1) = (0.0, 0.0);
            for i in (0..nr * nz).filter(|&i| sol.pinned[i]) {
                let p = (1.0 - rho[i] * rho[i]) * meas[i];
                s0 += p;
                s1 += p * rho[i] * rho[i];
            }
            s0 / s1
        }
        _ => 0.0,
    };
    // Both halves: the lower one mirrors u → −u and v → −v.
    let mut weights = Vec::with_capacity(2 * nr * nz);
    let mut u = Vec::with_capacity(2 * nr * nz);
    let mut v = Vec::with_capacity(2 * nr * nz);
    let mut flux = 0.0;
    for i in 0..nr * nz {
        let r2 = rho[i] * rho[i];
        let vi = if sol.pinned[i] {
            (1.0 - r2) * (1.0 - c * r2)
        } else {
            0.0
        };
        flux += vi * meas[i];
        for sign in [1.0, -1.0] {
            weights.push(meas[i]);
            u.push(sign * sol.values[i]);
            v.push(sign * vi);
        }
    }
    let zeta = vec![spec.zeta; u.len()];
    let fam = Family::from_sums(&weights, &u, &v, &zeta, sol.energy);
    Ok(fam.solve(flux, vec![nr, nz]))
}

//! Assembly of the linearized operator
//!
//! `L ψ = ∇·(A∇ψ) − 2λ ẽ·A∇ψ + M q·∇ψ + [λ² ẽ·Aẽ − λ∇·(Aẽ) − λM q·ẽ + ζ] ψ`
//!
//! on periodic grid functions. Diffusion is in flux form with midpoint
//! averaged coefficients; the two drift terms are merged into
//! `b = M q − 2λ Aẽ` and discretized by the chosen scheme.

use crate::cell::{DiffusionSpec, PeriodicCell, ScalarField, VectorField};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Central,
    Upwind,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Central => "central",
            Scheme::Upwind => "upwind",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OperatorSpec<'a> {
    pub diffusion: &'a DiffusionSpec,
    pub q: &'a VectorField,
    pub amplitude: f64,
    pub zeta: &'a ScalarField,
    pub direction: &'a [f64],
    pub lambda: f64,
    pub scheme: Scheme,
}

/// Sparse (CSR) periodic operator together with the bounds the eigen-solver needs.
#[derive(Debug, Clone)]
pub struct LinearMap {
    cell: PeriodicCell,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    diag: Vec<f64>,
    norm_bound: f64,
    row_sum_max: f64,
    shift: f64,
    metzler: bool,
    scheme: Scheme,
}

fn check_direction(e: &[f64], dim: usize) -> Result<()> {
    if e.len() != dim {
        return invalid("direction has the wrong dimension");
    }
    let n: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (n - 1.0).abs() > 1e-12 {
        return invalid(format!("direction must be a unit vector (|e| = {n})"));
    }
    Ok(())
}

pub fn assemble(spec: &OperatorSpec) -> Result<LinearMap> {
    let cell = spec.q.cell();
    cell.check_same(spec.diffusion.cell())?;
    cell.check_same(spec.zeta.cell())?;
    let d = cell.dim();
    check_direction(spec.direction, d)?;
    if !(spec.lambda >= 0.0 && spec.lambda.is_finite()) {
        return invalid(format!("lambda = {} must be nonnegative", spec.lambda));
    }
    if !(spec.amplitude >= 0.0 && spec.amplitude.is_finite()) {
        return invalid(format!(
            "amplitude M = {} must be nonnegative",
            spec.amplitude
        ));
    }
    let (a, q, e, lam, m) = (
        spec.diffusion,
        spec.q,
        spec.direction,
        spec.lambda,
        spec.amplitude,
    );
    let n = cell.len();
    let h = cell.spacing();

    // s = Aẽ at every point, and its central divergence
    let s: Vec<Vec<f64>> = (0..n).map(|i| a.mul(i, e)).collect();
    let div_s: Vec<f64> = (0..n)
        .map(|i| {
            (0..d)
                .map(|k| (s[cell.shift(i, k, 1)][k] - s[cell.shift(i, k, -1)][k]) / (2.0 * h[k]))
                .sum()
        })
        .collect();

    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    let mut diag = vec![0.0; n];
    let mut entries: Vec<(usize, f64)> = Vec::with_capacity(4 * d * d + 1);
    let (mut norm_bound, mut row_sum_max) = (0.0f64, f64::NEG_INFINITY);
    let mut metzler = true;
    row_ptr.push(0);
    for i in 0..n {
        entries.clear();
        let mut c0 = 0.0;
        for k in 0..d {
            let ip = cell.shift(i, k, 1);
            let im = cell.shift(i, k, -1);
            let h2 = h[k] * h[k];
            let ap = 0.5 * (a.entry(i, k, k) + a.entry(ip, k, k)) / h2;
            let am = 0.5 * (a.entry(i, k, k) + a.entry(im, k, k)) / h2;
            entries.push((ip, ap));
            entries.push((im, am));
            c0 -= ap + am;
            for l in 0..d {
                if l == k {
                    continue;
                }
                // ∂_k (a_kl ∂_l ψ), both derivatives central
                let f = 1.0 / (4.0 * h[k] * h[l]);
                let (akp, akm) = (a.entry(ip, k, l), a.entry(im, k, l));
                if akp != 0.0 {
                    entries.push((cell.shift(ip, l, 1), f * akp));
                    entries.push((cell.shift(ip, l, -1), -f * akp));
                }
                if akm != 0.0 {
                    entries.push((cell.shift(im, l, 1), -f * akm));
                    entries.push((cell.shift(im, l, -1), f * akm));
                }
            }
            let b = m * q.component(k)[i] - 2.0 * lam * s[i][k];
            match spec.scheme {
                Scheme::Central => {
                    entries.push((ip, b / (2.0 * h[k])));
                    entries.push((im, -b / (2.0 * h[k])));
                }
                Scheme::Upwind => {
                    if b > 0.0 {
                        entries.push((ip, b / h[k]));
                        c0 -= b / h[k];
                    } else if b < 0.0 {
                        entries.push((im, -b / h[k]));
                        c0 += b / h[k];
                    }
                }
            }
        }
        let ese: f64 = e.iter().zip(&s[i]).map(|(x, y)| x * y).sum();
        let bracket =
            lam * lam * ese - lam * div_s[i] - lam * m * q.dot(i, e) + spec.zeta.values()[i];
        entries.push((i, c0 + bracket));

        entries.sort_unstable_by_key(|&(j, _)| j);
        let start = cols.len();
        for &(j, v) in entries.iter() {
            if cols.len() > start && *cols.last().unwrap() == j {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(j);
                vals.push(v);
            }
        }
        let mut abs_sum = 0.0;
        let mut sum = 0.0;
        for p in start..cols.len() {
            let v = vals[p];
            abs_sum += v.abs();
            sum += v;
            if cols[p] == i {
                diag[i] = v;
            } else if v < -1e-12 * (1.0 / h[0] / h[0]) {
                metzler = false;
            }
        }
        norm_bound = norm_bound.max(abs_sum);
        row_sum_max = row_sum_max.max(sum);
        row_ptr.push(cols.len());
    }

    let max_div = div_s.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let shift = lam * lam * a.alpha2() + lam * (max_div + m * q.max_norm()) + spec.zeta.max() + 1.0;
    Ok(LinearMap {
        cell: cell.clone(),
        row_ptr,
        cols,
        vals,
        diag,
        norm_bound,
        row_sum_max,
        shift,
        metzler,
        scheme: spec.scheme,
    })
}

impl LinearMap {
    pub fn cell(&self) -> &PeriodicCell {
        &self.cell
    }
    pub fn len(&self) -> usize {
        self.diag.len()
    }
    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }
    pub fn diagonal(&self) -> &[f64] {
        &self.diag
    }
    /// Largest absolute row sum, an upper bound on the operator norm.
    pub fn norm_bound(&self) -> f64 {
        self.norm_bound
    }
    /// Largest row sum; bounds the spectral abscissa when the map is Metzler.
    pub fn row_sum_max(&self) -> f64 {
        self.row_sum_max
    }
    /// The default resolvent shift `λ²α₂ + λ(max|∇·(Aẽ)| + M·max|q|) + max ζ + 1`.
    pub fn shift(&self) -> f64 {
        self.shift
    }
    /// True when every off-diagonal coupling is nonnegative.
    pub fn is_metzler(&self) -> bool {
        self.metzler
    }
    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn apply_slice(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[p] * x[self.cols[p]];
            }
            *yi = acc;
        }
    }

    pub fn apply(&self, psi: &ScalarField) -> Result<ScalarField> {
        self.cell.check_same(psi.cell())?;
        let mut y = vec![0.0; self.len()];
        self.apply_slice(psi.values(), &mut y);
        ScalarField::new(&self.cell, y)
    }

    /// Row `i` as `(column, value)` pairs.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |p| (self.cols[p], self.vals[p]))
    }
}

pub fn apply(map: &LinearMap, psi: &ScalarField) -> Result<ScalarField> {
    map.apply(psi)
}

/// Symmetric stiffness `−∇·(A∇·)` in the same flux form, used for Dirichlet energies.
pub fn stiffness(diffusion: &DiffusionSpec) -> Result<LinearMap> {
    let cell = diffusion.cell();
    let q = VectorField::zero(cell);
    let zeta = ScalarField::constant(cell, 0.0);
    let mut e = vec![0.0; cell.dim()];
    e[0] = 1.0;
    let mut map = assemble(&OperatorSpec {
        diffusion,
        q: &q,
        amplitude: 0.0,
        zeta: &zeta,
        direction: &e,
        lambda: 0.0,
        scheme: Scheme::Central,
    })?;
    for v in map.vals.iter_mut() {
        *v = -*v;
    }
    for v in map.diag.iter_mut() {
        *v = -*v;
    }
    Ok(map)
}

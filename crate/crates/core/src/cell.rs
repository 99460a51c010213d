//! Periodic cell, grid-sampled fields and the built-in incompressible flows.
//!
//! Grid points sit at `x = j·h` on every axis, axis 0 varies fastest in the
//! flat index, and all index arithmetic wraps.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicCell {
    dim: usize,
    periods: Vec<f64>,
    n: Vec<usize>,
    h: Vec<f64>,
    strides: Vec<usize>,
    len: usize,
}

pub fn build_cell(dim: usize, periods: &[f64], resolution: &[usize]) -> Result<PeriodicCell> {
    PeriodicCell::new(dim, periods, resolution)
}

impl PeriodicCell {
    pub fn new(dim: usize, periods: &[f64], resolution: &[usize]) -> Result<Self> {
        if dim < 2 {
            return invalid(format!("dimension {dim} < 2"));
        }
        if periods.len() != dim || resolution.len() != dim {
            return invalid(format!(
                "dimension {dim} but {} periods and {} grid counts",
                periods.len(),
                resolution.len()
            ));
        }
        if periods.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return invalid("periods must be positive");
        }
        if resolution.contains(&0) {
            return invalid("grid counts must be positive");
        }
        let mut strides = Vec::with_capacity(dim);
        let mut len = 1usize;
        for &n in resolution {
            strides.push(len);
            len = len
                .checked_mul(n)
                .ok_or_else(|| Error::Invalid("grid too large".into()))?;
        }
        let h = periods
            .iter()
            .zip(resolution)
            .map(|(l, &n)| l / n as f64)
            .collect();
        Ok(Self {
            dim,
            periods: periods.to_vec(),
            n: resolution.to_vec(),
            h,
            strides,
            len,
        })
    }

    /// Unit torus `[0,1]^dim` with `n` points per axis.
    pub fn unit(dim: usize, n: usize) -> Result<Self> {
        Self::new(dim, &vec![1.0; dim], &vec![n; dim])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn periods(&self) -> &[f64] {
        &self.periods
    }
    pub fn resolution(&self) -> &[usize] {
        &self.n
    }
    pub fn spacing(&self) -> &[f64] {
        &self.h
    }
    pub fn len(&self) -> usize {
        self.len
    }
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Volume of the whole cell.
    pub fn volume(&self) -> f64 {
        self.periods.iter().product()
    }

    /// Quadrature weight of one grid point.
    pub fn point_volume(&self) -> f64 {
        self.h.iter().product()
    }

    pub fn index(&self, multi: &[usize]) -> usize {
        multi
            .iter()
            .zip(&self.strides)
            .zip(&self.n)
            .map(|((&j, &s), &n)| (j % n) * s)
            .sum()
    }

    pub fn multi_index(&self, idx: usize, out: &mut [usize]) {
        for a in 0..self.dim {
            out[a] = (idx / self.strides[a]) % self.n[a];
        }
    }

    pub fn axis_index(&self, idx: usize, axis: usize) -> usize {
        (idx / self.strides[axis]) % self.n[axis]
    }

    /// Neighbour of `idx` shifted by `offset` points along `axis`, wrapped.
    pub fn shift(&self, idx: usize, axis: usize, offset: isize) -> usize {
        let n = self.n[axis] as isize;
        let j = self.axis_index(idx, axis) as isize;
        let k = (j + offset).rem_euclid(n);
        (idx as isize + (k - j) * self.strides[axis] as isize) as usize
    }

    pub fn coord(&self, idx: usize, axis: usize) -> f64 {
        self.axis_index(idx, axis) as f64 * self.h[axis]
    }

    pub fn position(&self, idx: usize) -> Vec<f64> {
        (0..self.dim).map(|a| self.coord(idx, a)).collect()
    }

    pub fn sample(&self, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let mut x = vec![0.0; self.dim];
        (0..self.len)
            .map(|i| {
                for (a, xa) in x.iter_mut().enumerate() {
                    *xa = self.coord(i, a);
                }
                f(&x)
            })
            .collect()
    }

    pub(crate) fn check_same(&self, other: &PeriodicCell) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::CellMismatch)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    cell: PeriodicCell,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(cell: &PeriodicCell, values: Vec<f64>) -> Result<Self> {
        if values.len() != cell.len() {
            return invalid(format!(
                "{} values for a cell of {} points",
                values.len(),
                cell.len()
            ));
        }
        Ok(Self {
            cell: cell.clone(),
            values,
        })
    }

    pub fn constant(cell: &PeriodicCell, c: f64) -> Self {
        Self {
            cell: cell.clone(),
            values: vec![c; cell.len()],
        }
    }

    pub fn from_fn(cell: &PeriodicCell, f: impl Fn(&[f64]) -> f64) -> Self {
        Self {
            cell: cell.clone(),
            values: cell.sample(f),
        }
    }

    pub fn cell(&self) -> &PeriodicCell {
        &self.cell
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell.point_volume()
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Central-difference gradient, one vector per axis.
    pub fn gradient(&self) -> Vec<Vec<f64>> {
        central_gradient(&self.cell, &self.values)
    }
}

pub(crate) fn central_gradient(cell: &PeriodicCell, v: &[f64]) -> Vec<Vec<f64>> {
    (0..cell.dim())
        .map(|a| {
            let inv = 0.5 / cell.spacing()[a];
            (0..cell.len())
                .map(|i| (v[cell.shift(i, a, 1)] - v[cell.shift(i, a, -1)]) * inv)
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    V1,
    V2,
    Exterior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    cell: PeriodicCell,
    comps: Vec<Vec<f64>>,
    divergence_free: bool,
    div_tol: f64,
    labels: Option<Vec<Label>>,
}

pub const STREAM_DIV_TOL: f64 = 1e-10;
pub const DEFAULT_DIV_TOL: f64 = 1e-8;
pub const ZERO_AVERAGE_TOL: f64 = 1e-10;

impl VectorField {
    /// Wraps raw components without any flags.
    pub fn new(cell: &PeriodicCell, comps: Vec<Vec<f64>>) -> Result<Self> {
        if comps.len() != cell.dim() || comps.iter().any(|c| c.len() != cell.len()) {
            return invalid("vector field shape does not match the cell");
        }
        Ok(Self {
            cell: cell.clone(),
            comps,
            divergence_free: false,
            div_tol: DEFAULT_DIV_TOL,
            labels: None,
        })
    }

    pub fn zero(cell: &PeriodicCell) -> Self {
        Self {
            cell: cell.clone(),
            comps: vec![vec![0.0; cell.len()]; cell.dim()],
            divergence_free: true,
            div_tol: STREAM_DIV_TOL,
            labels: None,
        }
    }

    /// Flags the field divergence-free after checking the discrete divergence.
    pub fn assert_divergence_free(mut self, tol: f64) -> Result<Self> {
        let d = max_divergence(&self);
        if d > tol {
            return invalid(format!("discrete divergence {d:.3e} exceeds {tol:.3e}"));
        }
        self.divergence_free = true;
        self.div_tol = tol;
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != self.cell.len() {
            return invalid("label count does not match the cell");
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn cell(&self) -> &PeriodicCell {
        &self.cell
    }
    pub fn component(&self, a: usize) -> &[f64] {
        &self.comps[a]
    }
    pub fn components(&self) -> &[Vec<f64>] {
        &self.comps
    }
    pub fn is_divergence_free(&self) -> bool {
        self.divergence_free
    }
    pub fn divergence_tolerance(&self) -> f64 {
        self.div_tol
    }
    pub fn labels(&self) -> Option<&[Label]> {
        self.labels.as_deref()
    }

    pub fn at(&self, idx: usize) -> Vec<f64> {
        self.comps.iter().map(|c| c[idx]).collect()
    }

    pub fn dot(&self, idx: usize, e: &[f64]) -> f64 {
        self.comps.iter().zip(e).map(|(c, ea)| c[idx] * ea).sum()
    }

    /// Largest Euclidean norm over the grid.
    pub fn max_norm(&self) -> f64 {
        (0..self.cell.len())
            .map(|i| self.comps.iter().map(|c| c[i] * c[i]).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        for c in &mut out.comps {
            for v in c.iter_mut() {
                *v *= s;
            }
        }
        out
    }

    /// Flux of component `axis` through the `V1` cylinder, i.e. `∫_{V1∩C} q_axis`.
    pub fn flux_v1(&self, axis: usize) -> Option<f64> {
        let labels = self.labels.as_ref()?;
        let s: f64 = labels
            .iter()
            .zip(&self.comps[axis])
            .filter(|(l, _)| **l == Label::V1)
            .map(|(_, v)| v)
            .sum();
        Some(s * self.cell.point_volume())
    }
}

pub fn divergence(q: &VectorField) -> ScalarField {
    let cell = q.cell();
    let mut div = vec![0.0; cell.len()];
    for a in 0..cell.dim() {
        let c = q.component(a);
        let inv = 0.5 / cell.spacing()[a];
        for (i, d) in div.iter_mut().enumerate() {
            *d += (c[cell.shift(i, a, 1)] - c[cell.shift(i, a, -1)]) * inv;
        }
    }
    ScalarField {
        cell: cell.clone(),
        values: div,
    }
}

pub fn max_divergence(q: &VectorField) -> f64 {
    divergence(q).max_abs()
}

/// Per-component cell averages of `q`.
pub fn check_zero_average(q: &VectorField) -> Vec<f64> {
    q.components()
        .iter()
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

/// Symmetric diffusion matrix field with declared ellipticity bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSpec {
    cell: PeriodicCell,
    mats: Vec<f64>,
    alpha1: f64,
    alpha2: f64,
}

impl DiffusionSpec {
    pub fn isotropic(cell: &PeriodicCell, a: f64) -> Result<Self> {
        Self::diagonal(cell, &vec![a; cell.dim()])
    }

    pub fn identity(cell: &PeriodicCell) -> Self {
        Self::isotropic(cell, 1.0).expect("identity is elliptic")
    }

    pub fn diagonal(cell: &PeriodicCell, diag: &[f64]) -> Result<Self> {
        if diag.len() != cell.dim() {
            return invalid("diagonal length does not match the dimension");
        }
        let lo = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = diag.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Self::from_fn(cell, lo, hi, |_| {
            let d = diag.len();
            let mut m = vec![0.0; d * d];
            for (a, v) in diag.iter().enumerate() {
                m[a * d + a] = *v;
            }
            m
        })
    }

    /// Samples `f` (row-major `N×N`) at every grid point and validates symmetry
    /// and that every eigenvalue lies in `[alpha1, alpha2]`.
    pub fn from_fn(
        cell: &PeriodicCell,
        alpha1: f64,
        alpha2: f64,
        f: impl Fn(&[f64]) -> Vec<f64>,
    ) -> Result<Self> {
        let d = cell.dim();
        if !(alpha1 > 0.0 && alpha1 <= alpha2) {
            return invalid(format!(
                "ellipticity bounds {alpha1} <= {alpha2} must be positive"
            ));
        }
        let mut mats = Vec::with_capacity(cell.len() * d * d);
        let mut x = vec![0.0; d];
        for i in 0..cell.len() {
            for (a, xa) in x.iter_mut().enumerate() {
                *xa = cell.coord(i, a);
            }
            let m = f(&x);
            if m.len() != d * d {
                return invalid("diffusion matrix has the wrong size");
            }
            for a in 0..d {
                for b in 0..a {
                    if m[a * d + b] != m[b * d + a] {
                        return invalid("diffusion matrix is not symmetric");
                    }
                }
            }
            let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, &m)).eigenvalues;
            let slack = 1e-12 * alpha2;
            if eig
                .iter()
                .any(|&e| e < alpha1 - slack || e > alpha2 + slack)
            {
                return invalid("diffusion matrix outside the declared ellipticity bounds");
            }
            mats.extend_from_slice(&m);
        }
        Ok(Self {
            cell: cell.clone(),
            mats,
            alpha1,
            alpha2,
        })
    }

    pub fn cell(&self) -> &PeriodicCell {
        &self.cell
    }
    pub fn alpha1(&self) -> f64 {
        self.alpha1
    }
    pub fn alpha2(&self) -> f64 {
        self.alpha2
    }

    pub fn entry(&self, idx: usize, a: usize, b: usize) -> f64 {
        let d = self.cell.dim();
        self.mats[idx * d * d + a * d + b]
    }

    pub fn is_diagonal(&self) -> bool {
        let d = self.cell.dim();
        self.mats
            .chunks(d * d)
            .all(|m| (0..d).all(|a| (0..d).all(|b| a == b || m[a * d + b] == 0.0)))
    }

    /// `A(x)·v` at grid point `idx`.
    pub fn mul(&self, idx: usize, v: &[f64]) -> Vec<f64> {
        let d = self.cell.dim();
        (0..d)
            .map(|a| (0..d).map(|b| self.entry(idx, a, b) * v[b]).sum())
            .collect()
    }
}

/// ζ = f_u(x, 0), the only part of the nonlinearity that enters any computation.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearitySpec {
    pub zeta: ScalarField,
    pub name: Option<String>,
}

impl NonlinearitySpec {
    pub fn new(zeta: ScalarField, name: Option<String>) -> Result<Self> {
        if zeta.values().iter().any(|&z| !(z > 0.0)) {
            return invalid("zeta must be strictly positive");
        }
        Ok(Self { zeta, name })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShearProfile {
    /// `sin(2π x_c / L_c)`.
    Sine,
    /// Two Gaussian bumps of opposite sign at a quarter and three quarters of the period.
    TwoBump,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CylinderProfile {
    /// `1 − (r/R)²`.
    Poiseuille,
    /// `(1 − ρ²)(1 − cρ²)` with `c` set so the discrete flux vanishes.
    ZeroFlux,
    /// Constant 1; does not vanish on the boundary and is rejected.
    Plug,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FlowSpec {
    Zero,
    Shear {
        axis: usize,
        cross_axis: usize,
        profile: ShearProfile,
        amplitude: f64,
    },
    /// `q = amplitude · ∇⊥(sin 2πx₁ sin 2πx₂)` on a 2D cell.
    Cellular {
        amplitude: f64,
    },
    /// Two cylinders along `axis` separated along the last other axis.
    TwoCylinder {
        axis: usize,
        radius: f64,
        gap: f64,
        profile: CylinderProfile,
    },
    Custom {
        components: Vec<Vec<f64>>,
        labels: Option<Vec<Label>>,
    },
}

/// Geometry of the two-cylinder flow: centres in the cross-section.
#[derive(Debug, Clone, PartialEq)]
pub struct CylinderGeometry {
    pub axis: usize,
    pub separation_axis: usize,
    pub radius: f64,
    pub gap: f64,
    pub center_v1: Vec<f64>,
    pub center_v2: Vec<f64>,
}

impl CylinderGeometry {
    pub fn new(cell: &PeriodicCell, axis: usize, radius: f64, gap: f64) -> Result<Self> {
        let d = cell.dim();
        if axis >= d {
            return invalid("cylinder axis out of range");
        }
        if !(radius > 0.0) || !(gap >= 0.0) {
            return invalid("cylinder radius must be positive and gap nonnegative");
        }
        let sep = if axis == d - 1 { d - 2 } else { d - 1 };
        let l = cell.periods();
        if 4.0 * radius + gap > l[sep] + 1e-12 {
            return Err(Error::Geometry(format!(
                "4R + h = {} exceeds the period {}",
                4.0 * radius + gap,
                l[sep]
            )));
        }
        for a in 0..d {
            if a != axis && a != sep && 2.0 * radius > l[a] + 1e-12 {
                return Err(Error::Geometry(format!(
                    "2R exceeds the period along axis {a}"
                )));
            }
        }
        let mut c1: Vec<f64> = l.iter().map(|p| 0.5 * p).collect();
        let mut c2 = c1.clone();
        c1[sep] += radius + 0.5 * gap;
        c2[sep] -= radius + 0.5 * gap;
        c1[axis] = 0.0;
        c2[axis] = 0.0;
        Ok(Self {
            axis,
            separation_axis: sep,
            radius,
            gap,
            center_v1: c1,
            center_v2: c2,
        })
    }

    /// Cross-sectional distance from `x` to the axis of each cylinder, using the
    /// minimum-image convention.
    pub fn radii(&self, x: &[f64], periods: &[f64]) -> (f64, f64) {
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for a in 0..x.len() {
            if a == self.axis {
                continue;
            }
            let d1 = min_image(x[a] - self.center_v1[a], periods[a]);
            let d2 = min_image(x[a] - self.center_v2[a], periods[a]);
            s1 += d1 * d1;
            s2 += d2 * d2;
        }
        (s1.sqrt(), s2.sqrt())
    }
}

fn min_image(d: f64, l: f64) -> f64 {
    d - l * (d / l).round()
}

pub fn make_flow(spec: &FlowSpec, cell: &PeriodicCell) -> Result<VectorField> {
    let d = cell.dim();
    match spec {
        FlowSpec::Zero => Ok(VectorField::zero(cell)),
        FlowSpec::Shear {
            axis,
            cross_axis,
            profile,
            amplitude,
        } => {
            let (axis, cross) = (*axis, *cross_axis);
            if axis >= d || cross >= d || axis == cross {
                return invalid("shear axes must be distinct and in range");
            }
            let l = cell.periods()[cross];
            let prof = *profile;
            let mut comps = vec![vec![0.0; cell.len()]; d];
            comps[axis] = cell.sample(|x| amplitude * shear_value(prof, x[cross] / l));
            VectorField::new(cell, comps)?.assert_divergence_free(STREAM_DIV_TOL)
        }
        FlowSpec::Cellular { amplitude } => {
            if d != 2 {
                return invalid("cellular flow is two-dimensional");
            }
            let (l1, l2) = (cell.periods()[0], cell.periods()[1]);
            let (k1, k2) = (2.0 * PI / l1, 2.0 * PI / l2);
            // q = ∇⊥ψ = (−∂₂ψ, ∂₁ψ), ψ = sin(k₁x₁) sin(k₂x₂)
            let q1 = cell.sample(|x| -amplitude * k2 * (k1 * x[0]).sin() * (k2 * x[1]).cos());
            let q2 = cell.sample(|x| amplitude * k1 * (k1 * x[0]).cos() * (k2 * x[1]).sin());
            let tol = if (cell.spacing()[0] - cell.spacing()[1]).abs() < 1e-15 {
                STREAM_DIV_TOL
            } else {
                DEFAULT_DIV_TOL
            };
            VectorField::new(cell, vec![q1, q2])?.assert_divergence_free(tol)
        }
        FlowSpec::TwoCylinder {
            axis,
            radius,
            gap,
            profile,
        } => two_cylinder(cell, *axis, *radius, *gap, *profile),
        FlowSpec::Custom { components, labels } => {
            let q = VectorField::new(cell, components.clone())?;
            let q = match labels {
                Some(l) => q.with_labels(l.clone())?,
                None => q,
            };
            if max_divergence(&q) <= DEFAULT_DIV_TOL {
                q.assert_divergence_free(DEFAULT_DIV_TOL)
            } else {
                Ok(q)
            }
        }
    }
}

pub fn shear_value(profile: ShearProfile, s: f64) -> f64 {
    match profile {
        ShearProfile::Sine => (2.0 * PI * s).sin(),
        ShearProfile::TwoBump => {
            let w = 0.08;
            let bump = |c: f64| {
                let t = min_image(s - c, 1.0) / w;
                (-t * t).exp()
            };
            bump(0.25) - bump(0.75)
        }
    }
}

fn two_cylinder(
    cell: &PeriodicCell,
    axis: usize,
    radius: f64,
    gap: f64,
    profile: CylinderProfile,
) -> Result<VectorField> {
    let geom = CylinderGeometry::new(cell, axis, radius, gap)?;
    if profile == CylinderProfile::Plug {
        return Err(Error::Geometry(
            "axial profile does not vanish on the cylinder boundary".into(),
        ));
    }
    let periods = cell.periods().to_vec();
    let mut labels = vec![Label::Exterior; cell.len()];
    let mut rho = vec![0.0; cell.len()];
    let mut x = vec![0.0; cell.dim()];
    for i in 0..cell.len() {
        for (a, xa) in x.iter_mut().enumerate() {
            *xa = cell.coord(i, a);
        }
        let (r1, r2) = geom.radii(&x, &periods);
        if r1 < radius {
            labels[i] = Label::V1;
            rho[i] = r1 / radius;
        } else if r2 < radius {
            labels[i] = Label::V2;
            rho[i] = r2 / radius;
        }
    }
    let c = match profile {
        CylinderProfile::ZeroFlux => {
            let (mut s0, mut s1) = (0.0, 0.0);
            for (l, r) in labels.iter().zip(&rho) {
                if *l == Label::V1 {
                    let p = 1.0 - r * r;
                    s0 += p;
                    s1 += p * r * r;
                }
            }
            s0 / s1
        }
        _ => 0.0,
    };
    let mut comps = vec![vec![0.0; cell.len()]; cell.dim()];
    for i in 0..cell.len() {
        let r2 = rho[i] * rho[i];
        let v = (1.0 - r2) * (1.0 - c * r2);
        comps[axis][i] = match labels[i] {
            Label::V1 => v,
            Label::V2 => -v,
            Label::Exterior => 0.0,
        };
    }
    VectorField::new(cell, comps)?
        .with_labels(labels)?
        .assert_divergence_free(STREAM_DIV_TOL)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceIdentity {
    pub lhs: f64,
    pub rhs: f64,
    /// max |q·∇w| measured before accepting `w`.
    pub first_integral_residual: f64,
}

/// Default first-integral tolerance `1e-6·max|q|·max|∇w|`.
pub fn first_integral_tolerance(q: &VectorField, grad_w: &[Vec<f64>]) -> f64 {
    let gmax = (0..q.cell().len())
        .map(|i| grad_w.iter().map(|g| g[i] * g[i]).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    1e-6 * q.max_norm() * gmax + 1e-14
}

pub fn advective_residual(q: &VectorField, grad_w: &[Vec<f64>]) -> f64 {
    (0..q.cell().len())
        .map(|i| {
            q.components()
                .iter()
                .zip(grad_w)
                .map(|(c, g)| c[i] * g[i])
                .sum::<f64>()
                .abs()
        })
        .fold(0.0, f64::max)
}

/// `∫_C (q·e_i) w²` against `L_i ∫_{x_i=0} (q·e_i) w²`.
pub fn slice_identity(q: &VectorField, w: &ScalarField, axis: usize) -> Result<SliceIdentity> {
    let cell = q.cell();
    cell.check_same(w.cell())?;
    if axis >= cell.dim() {
        return invalid("slice axis out of range");
    }
    let grad = w.gradient();
    let residual = advective_residual(q, &grad);
    let tolerance = first_integral_tolerance(q, &grad);
    if residual > tolerance {
        return Err(Error::NotFirstIntegral {
            residual,
            tolerance,
        });
    }
    let qa = q.component(axis);
    let wv = w.values();
    let dv = cell.point_volume();
    let mut lhs = 0.0;
    let mut slice = 0.0;
    for i in 0..cell.len() {
        let t = qa[i] * wv[i] * wv[i];
        lhs += t;
        if cell.axis_index(i, axis) == 0 {
            slice += t;
        }
    }
    Ok(SliceIdentity {
        lhs: lhs * dv,
        rhs: cell.periods()[axis] * slice * dv / cell.spacing()[axis],
        first_integral_residual: residual,
    })
}

/// One CSV row per grid point: index tuple, coordinates, then the named columns.
pub fn write_fields_csv(
    out: &mut impl Write,
    cell: &PeriodicCell,
    columns: &[(&str, &[f64])],
) -> std::io::Result<()> {
    let d = cell.dim();
    let mut header: Vec<String> = (1..=d).map(|a| format!("i{a}")).collect();
    header.extend((1..=d).map(|a| format!("x{a}")));
    header.extend(columns.iter().map(|(n, _)| n.to_string()));
    writeln!(out, "{}", header.join(","))?;
    let mut mi = vec![0; d];
    for i in 0..cell.len() {
        cell.multi_index(i, &mut mi);
        let mut row: Vec<String> = mi.iter().map(|j| j.to_string()).collect();
        row.extend((0..d).map(|a| cell.coord(i, a).to_string()));
        row.extend(columns.iter().map(|(_, v)| v[i].to_string()));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_spacing_and_size() {
        let c = build_cell(2, &[1.0, 1.0], &[32, 32]).unwrap();
        assert_eq!(c.spacing(), &[1.0 / 32.0, 1.0 / 32.0]);
        assert_eq!(build_cell(3, &[1.0; 3], &[24; 3]).unwrap().len(), 13824);
        assert_eq!(build_cell(5, &[1.0; 5], &[8; 5]).unwrap().len(), 32768);
    }

    #[test]
    fn cell_rejects_bad_input() {
        assert!(build_cell(2, &[1.0], &[4, 4]).is_err());
        assert!(build_cell(2, &[1.0, -1.0], &[4, 4]).is_err());
        assert!(build_cell(2, &[1.0, 1.0], &[4, 0]).is_err());
        assert!(build_cell(1, &[1.0], &[4]).is_err());
    }

    #[test]
    fn shift_wraps() {
        let c = build_cell(2, &[1.0, 2.0], &[4, 5]).unwrap();
        let i = c.index(&[0, 4]);
        assert_eq!(c.shift(i, 0, -1), c.index(&[3, 4]));
        assert_eq!(c.shift(i, 1, 1), c.index(&[0, 0]));
        assert_eq!(c.shift(i, 1, -6), c.index(&[0, 3]));
    }

    #[test]
    fn cellular_is_discretely_divergence_free() {
        let c = PeriodicCell::unit(2, 48).unwrap();
        let q = make_flow(&FlowSpec::Cellular { amplitude: 1.0 }, &c).unwrap();
        assert!(max_divergence(&q) <= 1e-12);
        assert!(q.is_divergence_free());
    }

    #[test]
    fn shear_average_vanishes() {
        let c = PeriodicCell::unit(2, 32).unwrap();
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
        for a in check_zero_average(&q) {
            assert!(a.abs() <= 1e-14);
        }
    }

    #[test]
    fn constant_field_is_flagged() {
        let c = PeriodicCell::unit(2, 8).unwrap();
        let q = VectorField::new(&c, vec![vec![1.0; 64], vec![0.0; 64]]).unwrap();
        assert_eq!(check_zero_average(&q)[0], 1.0);
    }

    #[test]
    fn two_cylinder_flux_and_labels() {
        let c = build_cell(3, &[1.0; 3], &[4, 128, 128]).unwrap();
        let q = make_flow(
            &FlowSpec::TwoCylinder {
                axis: 0,
                radius: 0.2,
                gap: 0.1,
                profile: CylinderProfile::Poiseuille,
            },
            &c,
        )
        .unwrap();
        let flux = q.flux_v1(0).unwrap();
        let exact = PI * 0.04 / 2.0;
        assert!((flux - exact).abs() < 2e-4, "{flux} vs {exact}");
        for a in check_zero_average(&q) {
            assert!(a.abs() <= 1e-12);
        }
        let labels = q.labels().unwrap();
        for i in 0..c.len() {
            if labels[i] == Label::Exterior {
                assert!(q.at(i).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn cylinder_overflow_and_plug_rejected() {
        let c = PeriodicCell::unit(3, 16).unwrap();
        let big = FlowSpec::TwoCylinder {
            axis: 0,
            radius: 0.3,
            gap: 0.0,
            profile: CylinderProfile::Poiseuille,
        };
        assert!(matches!(make_flow(&big, &c), Err(Error::Geometry(_))));
        let plug = FlowSpec::TwoCylinder {
            axis: 0,
            radius: 0.2,
            gap: 0.0,
            profile: CylinderProfile::Plug,
        };
        assert!(matches!(make_flow(&plug, &c), Err(Error::Geometry(_))));
    }

    #[test]
    fn diffusion_validation() {
        let c = PeriodicCell::unit(2, 4).unwrap();
        assert!(DiffusionSpec::from_fn(&c, 0.5, 2.0, |_| vec![1.0, 0.2, 0.1, 1.0]).is_err());
        assert!(DiffusionSpec::from_fn(&c, 0.5, 2.0, |_| vec![1.0, 0.2, 0.2, 1.0]).is_ok());
        assert!(DiffusionSpec::from_fn(&c, 0.5, 1.0, |_| vec![1.0, 0.2, 0.2, 1.0]).is_err());
    }

    #[test]
    fn zeta_must_be_positive() {
        let c = PeriodicCell::unit(2, 4).unwrap();
        assert!(NonlinearitySpec::new(ScalarField::constant(&c, 0.0), None).is_err());
        assert!(NonlinearitySpec::new(ScalarField::constant(&c, 1.0), None).is_ok());
    }

    #[test]
    fn slice_identity_trivial_and_shear() {
        let c = PeriodicCell::unit(2, 32).unwrap();
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
        let one = ScalarField::constant(&c, 1.0);
        let s = slice_identity(&q, &one, 0).unwrap();
        assert!(s.lhs.abs() < 1e-14 && s.rhs.abs() < 1e-14);
        let w = ScalarField::from_fn(&c, |x| (2.0 * PI * x[1]).cos());
        let s = slice_identity(&q, &w, 0).unwrap();
        assert!(s.lhs.abs() < 1e-14 && s.rhs.abs() < 1e-14);
        let bad = ScalarField::from_fn(&c, |x| (2.0 * PI * x[0]).cos());
        assert!(matches!(
            slice_identity(&q, &bad, 0),
            Err(Error::NotFirstIntegral { .. })
        ));
    }
}

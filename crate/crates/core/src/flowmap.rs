//! Streamlines of `q`, volume preservation, transport of first integrals and
//! the planar stream function.

use rayon::prelude::*;

use crate::cell::{ScalarField, VectorField};
use crate::error::{invalid, Error, Result};

/// A velocity field on `R^N`, possibly periodic.
pub trait Velocity: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64], out: &mut [f64]);
    /// Periods used to wrap positions; `None` for fields on all of `R^N`.
    fn periods(&self) -> Option<&[f64]>;
}

/// A scalar function carried along trajectories.
pub trait Scalar: Sync {
    fn eval(&self, x: &[f64]) -> f64;
}

// Multilinear interpolation of grid values at `x`, periodic in every axis.
fn interpolate(cell: &crate::cell::PeriodicCell, values: &[f64], x: &[f64]) -> f64 {
    let d = cell.dim();
    let n = cell.resolution();
    let h = cell.spacing();
    let mut base = vec![0usize; d];
    let mut frac = vec![0.0; d];
    for a in 0..d {
        let s = (x[a] / h[a]).rem_euclid(n[a] as f64);
        let f = s.floor();
        base[a] = (f as usize) % n[a];
        frac[a] = s - f;
    }
    let mut acc = 0.0;
    let mut idx = vec![0usize; d];
    for corner in 0..(1usize << d) {
        let mut weight = 1.0;
        for a in 0..d {
            if corner >> a & 1 == 1 {
                idx[a] = (base[a] + 1) % n[a];
                weight *= frac[a];
            } else {
                idx[a] = base[a];
                weight *= 1.0 - frac[a];
            }
        }
        if weight != 0.0 {
            acc += weight * values[cell.index(&idx)];
        }
    }
    acc
}

impl Velocity for VectorField {
    fn dim(&self) -> usize {
        self.cell().dim()
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        for (a, o) in out.iter_mut().enumerate() {
            *o = interpolate(self.cell(), self.component(a), x);
        }
    }
    fn periods(&self) -> Option<&[f64]> {
        Some(self.cell().periods())
    }
}

impl Scalar for ScalarField {
    fn eval(&self, x: &[f64]) -> f64 {
        interpolate(self.cell(), self.values(), x)
    }
}

/// Velocity given by a closure.
pub struct Analytic<F> {
    dim: usize,
    periods: Option<Vec<f64>>,
    f: F,
}

impl<F: Fn(&[f64], &mut [f64]) + Sync> Analytic<F> {
    pub fn new(dim: usize, periods: Option<Vec<f64>>, f: F) -> Self {
        Self { dim, periods, f }
    }
}

impl<F: Fn(&[f64], &mut [f64]) + Sync> Velocity for Analytic<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }
    fn periods(&self) -> Option<&[f64]> {
        self.periods.as_deref()
    }
}

/// Scalar given by a closure.
pub struct AnalyticScalar<F>(pub F);

impl<F: Fn(&[f64]) -> f64 + Sync> Scalar for AnalyticScalar<F> {
    fn eval(&self, x: &[f64]) -> f64 {
        (self.0)(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrace {
    pub seed: Vec<f64>,
    pub dt: f64,
    pub times: Vec<f64>,
    pub unwrapped: Vec<Vec<f64>>,
    pub wrapped: Vec<Vec<f64>>,
    /// `w` along the trajectory when a scalar was attached.
    pub w: Option<Vec<f64>>,
}

fn rk4_step(q: &dyn Velocity, x: &mut [f64], dt: f64, k: &mut [Vec<f64>; 4], tmp: &mut [f64]) {
    let d = x.len();
    q.eval(x, &mut k[0]);
    for a in 0..d {
        tmp[a] = x[a] + 0.5 * dt * k[0][a];
    }
    q.eval(tmp, &mut k[1]);
    for a in 0..d {
        tmp[a] = x[a] + 0.5 * dt * k[1][a];
    }
    q.eval(tmp, &mut k[2]);
    for a in 0..d {
        tmp[a] = x[a] + dt * k[2][a];
    }
    q.eval(tmp, &mut k[3]);
    for a in 0..d {
        x[a] += dt / 6.0 * (k[0][a] + 2.0 * k[1][a] + 2.0 * k[2][a] + k[3][a]);
    }
}

// Step sizes covering [0, t]: equal steps of `dt`, the last one shortened.
fn steps(t: f64, dt: f64) -> Vec<f64> {
    let full = (t / dt * (1.0 + 1e-12)).floor() as usize;
    let mut s = vec![dt; full];
    let rest = t - full as f64 * dt;
    if rest > 1e-12 * dt {
        s.push(rest);
    }
    s
}

fn check(q: &dyn Velocity, x0: &[f64], t: f64, dt: f64) -> Result<()> {
    if x0.len() != q.dim() {
        return invalid("seed dimension does not match the flow");
    }
    if !(dt > 0.0) || !(t >= 0.0) || !t.is_finite() {
        return invalid("need dt > 0 and a finite t >= 0");
    }
    Ok(())
}

/// Position at time `t` of the point starting at `x0` (unwrapped).
pub fn flow_map(q: &dyn Velocity, x0: &[f64], t: f64, dt: f64) -> Result<Vec<f64>> {
    check(q, x0, t, dt)?;
    let d = x0.len();
    let mut x = x0.to_vec();
    let mut k = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    let mut tmp = vec![0.0; d];
    for h in steps(t, dt) {
        rk4_step(q, &mut x, h, &mut k, &mut tmp);
    }
    Ok(x)
}

fn wrap(x: &[f64], periods: Option<&[f64]>) -> Vec<f64> {
    match periods {
        Some(p) => x.iter().zip(p).map(|(v, l)| v.rem_euclid(*l)).collect(),
        None => x.to_vec(),
    }
}

pub fn integrate_streamline(q: &dyn Velocity, x0: &[f64], t: f64, dt: f64) -> Result<FlowTrace> {
    integrate_streamline_with(q, x0, t, dt, None)
}

/// Classical fourth-order Runge–Kutta with every step recorded.
pub fn integrate_streamline_with(
    q: &dyn Velocity,
    x0: &[f64],
    t: f64,
    dt: f64,
    w: Option<&dyn Scalar>,
) -> Result<FlowTrace> {
    check(q, x0, t, dt)?;
    let d = x0.len();
    let mut x = x0.to_vec();
    let mut k = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    let mut tmp = vec![0.0; d];
    let mut times = vec![0.0];
    let mut unwrapped = vec![x.clone()];
    let mut now = 0.0;
    for h in steps(t, dt) {
        rk4_step(q, &mut x, h, &mut k, &mut tmp);
        now += h;
        times.push(now);
        unwrapped.push(x.clone());
    }
    let wrapped = unwrapped.iter().map(|p| wrap(p, q.periods())).collect();
    let wv = w.map(|w| unwrapped.iter().map(|p| w.eval(p)).collect());
    Ok(FlowTrace {
        seed: x0.to_vec(),
        dt,
        times,
        unwrapped,
        wrapped,
        w: wv,
    })
}

/// First return of a planar orbit around `center`: the time at which the
/// winding angle reaches `2π`, refined by bisection, and the distance from
/// the seed at that time.
pub fn first_return(
    q: &dyn Velocity,
    x0: &[f64],
    center: &[f64],
    dt: f64,
    t_max: f64,
) -> Result<(f64, f64)> {
    check(q, x0, t_max, dt)?;
    if q.dim() != 2 {
        return invalid("first return is planar");
    }
    let angle = |x: &[f64]| (x[1] - center[1]).atan2(x[0] - center[0]);
    let mut x = x0.to_vec();
    let mut k = [vec![0.0; 2], vec![0.0; 2], vec![0.0; 2], vec![0.0; 2]];
    let mut tmp = vec![0.0; 2];
    let (mut wind, mut prev, mut t) = (0.0, angle(x0), 0.0);
    while t < t_max {
        let before = x.clone();
        rk4_step(q, &mut x, dt, &mut k, &mut tmp);
        let a = angle(&x);
        let mut da = a - prev;
        da -= 2.0 * std::f64::consts::PI * (da / (2.0 * std::f64::consts::PI)).round();
        let total = wind + da;
        if total.abs() >= 2.0 * std::f64::consts::PI {
            // bisect the sub-step at which the winding completes
            let target = 2.0 * std::f64::consts::PI * total.signum();
            let (mut lo, mut hi) = (0.0, dt);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                let mut y = before.clone();
                rk4_step(q, &mut y, mid, &mut k, &mut tmp);
                let mut dm = angle(&y) - prev;
                dm -= 2.0 * std::f64::consts::PI * (dm / (2.0 * std::f64::consts::PI)).round();
                if (wind + dm - target) * target.signum() >= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let tau = 0.5 * (lo + hi);
            let mut y = before;
            rk4_step(q, &mut y, tau, &mut k, &mut tmp);
            let dist = ((y[0] - x0[0]).powi(2) + (y[1] - x0[1]).powi(2)).sqrt();
            return Ok((t + tau, dist));
        }
        wind = total;
        prev = a;
        t += dt;
    }
    Err(Error::NoConvergence {
        solver: "first return",
        iterations: (t_max / dt) as usize,
        residual: wind,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeCheck {
    /// `|vol(Φ_t(R)) − vol(R)| / vol(R)`.
    pub deviation: f64,
    pub samples: usize,
    pub refined: bool,
    /// Sampling still looked too coarse after one refinement.
    pub flagged: bool,
}

// Shoelace area of a closed polygon.
fn polygon_area(p: &[Vec<f64>]) -> f64 {
    let n = p.len();
    0.5 * (0..n)
        .map(|i| {
            let j = (i + 1) % n;
            p[i][0] * p[j][1] - p[j][0] * p[i][1]
        })
        .sum::<f64>()
}

// Area with the chord error removed: the polygon error is quadratic in the
// spacing, so compare against every other vertex.
fn extrapolated_area(p: &[Vec<f64>]) -> f64 {
    let coarse: Vec<Vec<f64>> = p.iter().step_by(2).cloned().collect();
    (4.0 * polygon_area(p) - polygon_area(&coarse)) / 3.0
}

fn sample_polygon(vertices: &[[f64; 2]], per_edge: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(vertices.len() * per_edge);
    for (i, a) in vertices.iter().enumerate() {
        let b = vertices[(i + 1) % vertices.len()];
        for s in 0..per_edge {
            let t = s as f64 / per_edge as f64;
            out.push(vec![a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    out
}

fn max_gap(p: &[Vec<f64>]) -> f64 {
    (0..p.len())
        .map(|i| {
            let j = (i + 1) % p.len();
            ((p[i][0] - p[j][0]).powi(2) + (p[i][1] - p[j][1]).powi(2)).sqrt()
        })
        .fold(0.0, f64::max)
}

/// Advects a dense sampling of the boundary of a convex polygon and compares
/// the enclosed areas. `per_edge` must be even.
pub fn volume_preservation_check(
    q: &dyn Velocity,
    vertices: &[[f64; 2]],
    t: f64,
    dt: f64,
    per_edge: usize,
) -> Result<VolumeCheck> {
    if q.dim() != 2 || vertices.len() < 3 {
        return invalid("need a planar flow and a polygon with at least three vertices");
    }
    if per_edge < 2 || per_edge % 2 == 1 {
        return invalid("per_edge must be even and at least 2");
    }
    let mut per_edge = per_edge;
    let mut refined = false;
    loop {
        let pts = sample_polygon(vertices, per_edge);
        let spacing = max_gap(&pts);
        let a0 = polygon_area(&pts);
        let moved: Vec<Vec<f64>> = pts
            .par_iter()
            .map(|p| flow_map(q, p, t, dt))
            .collect::<Result<_>>()?;
        // Boundary stretched far beyond the sampling: the polygon may fold.
        let coarse = max_gap(&moved) > 20.0 * spacing;
        if coarse && !refined {
            per_edge *= 4;
            refined = true;
            continue;
        }
        let a1 = extrapolated_area(&moved);
        return Ok(VolumeCheck {
            deviation: ((a1 - a0) / a0).abs(),
            samples: pts.len(),
            refined,
            flagged: coarse,
        });
    }
}

// Nodes of the six faces of a box, each an (m+1)² grid oriented outward.
fn sample_box(lo: &[f64; 3], hi: &[f64; 3], m: usize) -> Vec<Vec<Vec<f64>>> {
    let mut faces = Vec::with_capacity(6);
    for k in 0..3 {
        let (a, b) = ((k + 1) % 3, (k + 2) % 3);
        for side in [lo[k], hi[k]] {
            // e_a × e_b = e_k, so swap the directions on the low side
            let (u, v) = if side == hi[k] { (a, b) } else { (b, a) };
            let mut nodes = Vec::with_capacity((m + 1) * (m + 1));
            for i in 0..=m {
                for j in 0..=m {
                    let mut x = vec![0.0; 3];
                    x[k] = side;
                    x[u] = lo[u] + (hi[u] - lo[u]) * i as f64 / m as f64;
                    x[v] = lo[v] + (hi[v] - lo[v]) * j as f64 / m as f64;
                    nodes.push(x);
                }
            }
            faces.push(nodes);
        }
    }
    faces
}

// Enclosed volume Σ det(a, b, c)/6 over the triangles, with every `stride`-th node.
fn surface_volume(faces: &[Vec<Vec<f64>>], m: usize, stride: usize) -> f64 {
    let det = |a: &[f64], b: &[f64], c: &[f64]| {
        a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
            + a[2] * (b[0] * c[1] - b[1] * c[0])
    };
    let at = |i: usize, j: usize| i * (m + 1) + j;
    let mut vol = 0.0;
    for f in faces {
        for i in (0..m).step_by(stride) {
            for j in (0..m).step_by(stride) {
                let (p00, p10) = (&f[at(i, j)], &f[at(i + stride, j)]);
                let (p11, p01) = (&f[at(i + stride, j + stride)], &f[at(i, j + stride)]);
                vol += det(p00, p10, p11) + det(p00, p11, p01);
            }
        }
    }
    vol / 6.0
}

fn max_edge(faces: &[Vec<Vec<f64>>], m: usize) -> f64 {
    let dist = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let at = |i: usize, j: usize| i * (m + 1) + j;
    let mut worst = 0.0f64;
    for f in faces {
        for i in 0..m {
            for j in 0..m {
                worst = worst.max(dist(&f[at(i, j)], &f[at(i + 1, j)]));
                worst = worst.max(dist(&f[at(i, j)], &f[at(i, j + 1)]));
            }
        }
    }
    worst
}

/// Three-dimensional counterpart of [`volume_preservation_check`] for an
/// axis-aligned box seed: the advected surface is triangulated and its
/// volume taken from the divergence theorem. `per_edge` must be even.
pub fn volume_preservation_check_box(
    q: &dyn Velocity,
    lo: [f64; 3],
    hi: [f64; 3],
    t: f64,
    dt: f64,
    per_edge: usize,
) -> Result<VolumeCheck> {
    if q.dim() != 3 || (0..3).any(|k| !(hi[k] > lo[k])) {
        return invalid("need a three-dimensional flow and a nondegenerate box");
    }
    if per_edge < 2 || per_edge % 2 == 1 {
        return invalid("per_edge must be even and at least 2");
    }
    let mut m = per_edge;
    let mut refined = false;
    loop {
        let faces = sample_box(&lo, &hi, m);
        let spacing = max_edge(&faces, m);
        let v0 = (0..3).map(|k| hi[k] - lo[k]).product::<f64>();
        let moved: Vec<Vec<Vec<f64>>> = faces
            .par_iter()
            .map(|f| {
                f.iter()
                    .map(|p| flow_map(q, p, t, dt))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let coarse = max_edge(&moved, m) > 20.0 * spacing;
        if coarse && !refined {
            m *= 4;
            refined = true;
            continue;
        }
        let v1 = (4.0 * surface_volume(&moved, m, 1) - surface_volume(&moved, m, 2)) / 3.0;
        return Ok(VolumeCheck {
            deviation: ((v1 - v0) / v0).abs(),
            samples: 6 * (m + 1) * (m + 1),
            refined,
            flagged: coarse,
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Drift {
    pub per_seed: Vec<f64>,
    pub max: f64,
}

/// `max_t |w(Φ_t x) − w(x)|` for every seed.
pub fn first_integral_conservation(
    q: &dyn Velocity,
    w: &dyn Scalar,
    seeds: &[Vec<f64>],
    t: f64,
    dt: f64,
) -> Result<Drift> {
    let per_seed = seeds
        .par_iter()
        .map(|s| {
            let tr = integrate_streamline_with(q, s, t, dt, Some(w))?;
            let wv = tr.w.expect("scalar attached");
            Ok(wv.iter().map(|v| (v - wv[0]).abs()).fold(0.0, f64::max))
        })
        .collect::<Result<Vec<f64>>>()?;
    let max = per_seed.iter().cloned().fold(0.0, f64::max);
    Ok(Drift { per_seed, max })
}

pub const CIRCULATION_TOL: f64 = 1e-8;

// ∫ over each interval [x_i, x_{i+1}] of periodic samples, fourth order.
fn interval_integrals(f: &[f64], h: f64) -> Vec<f64> {
    let n = f.len();
    (0..n)
        .map(|i| {
            let at = |k: isize| f[(i as isize + k).rem_euclid(n as isize) as usize];
            h * (-at(-1) + 13.0 * at(0) + 13.0 * at(1) - at(2)) / 24.0
        })
        .collect()
}

/// Recovers `φ` with `q = ∇⊥φ = (−∂₂φ, ∂₁φ)`, normalized to zero mean.
pub fn stream_function_2d(q: &VectorField) -> Result<ScalarField> {
    let cell = q.cell();
    if cell.dim() != 2 {
        return invalid("stream function needs a planar flow");
    }
    let (n1, n2) = (cell.resolution()[0], cell.resolution()[1]);
    let (h1, h2) = (cell.spacing()[0], cell.spacing()[1]);
    let at = |comp: usize, i: usize, j: usize| q.component(comp)[cell.index(&[i, j])];
    let tol =
        CIRCULATION_TOL * (q.max_norm() * cell.periods()[0].max(cell.periods()[1])).max(1e-300);

    let mut worst = 0.0f64;
    let mut rows = Vec::with_capacity(n2);
    for j in 0..n2 {
        let line: Vec<f64> = (0..n1).map(|i| at(1, i, j)).collect();
        let seg = interval_integrals(&line, h1);
        worst = worst.max(seg.iter().sum::<f64>().abs());
        rows.push(seg);
    }
    let mut cols = Vec::with_capacity(n1);
    for i in 0..n1 {
        let line: Vec<f64> = (0..n2).map(|j| -at(0, i, j)).collect();
        let seg = interval_integrals(&line, h2);
        worst = worst.max(seg.iter().sum::<f64>().abs());
        cols.push(seg);
    }
    if worst > tol {
        return Err(Error::Circulation { circulation: worst });
    }
    let mut phi = vec![0.0; cell.len()];
    let mut base = 0.0;
    for i in 0..n1 {
        let mut v = base;
        for j in 0..n2 {
            phi[cell.index(&[i, j])] = v;
            v += cols[i][j];
        }
        base += rows[0][i];
    }
    let mean = phi.iter().sum::<f64>() / phi.len() as f64;
    phi.iter_mut().for_each(|v| *v -= mean);
    ScalarField::new(cell, phi)
}

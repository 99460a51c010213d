//! Jacobi-preconditioned Krylov solvers for matrix-free operators.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct SolveStats {
    pub iterations: usize,
    /// `‖b − A x‖₂ / ‖b‖₂` recomputed from scratch at exit.
    pub relative_residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn true_residual(op: &impl Fn(&[f64], &mut [f64]), b: &[f64], x: &[f64], r: &mut [f64]) -> f64 {
    op(x, r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    norm(r)
}

/// BiCGSTAB with restarts on breakdown. `diag` is the diagonal of the operator.
pub fn bicgstab(
    op: impl Fn(&[f64], &mut [f64]),
    diag: &[f64],
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> Result<SolveStats> {
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveStats {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let inv: Vec<f64> = diag.iter().map(|d| 1.0 / d).collect();
    let mut r = vec![0.0; n];
    let mut rhat = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut iters = 0;
    let mut rel = true_residual(&op, b, x, &mut r) / bnorm;
    let mut last = x.to_vec();
    while iters < max_iter {
        if rel <= tol {
            return Ok(SolveStats {
                iterations: iters,
                relative_residual: rel,
            });
        }
        rhat.copy_from_slice(&r);
        p.iter_mut().for_each(|e| *e = 0.0);
        v.iter_mut().for_each(|e| *e = 0.0);
        let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
        loop {
            iters += 1;
            let rho_new = dot(&rhat, &r);
            if rho_new.abs() < 1e-300 || omega == 0.0 {
                break;
            }
            let beta = (rho_new / rho) * (alpha / omega);
            rho = rho_new;
            for i in 0..n {
                p[i] = r[i] + beta * (p[i] - omega * v[i]);
                y[i] = inv[i] * p[i];
            }
            op(&y, &mut v);
            let rv = dot(&rhat, &v);
            if rv == 0.0 {
                break;
            }
            alpha = rho / rv;
            for i in 0..n {
                s[i] = r[i] - alpha * v[i];
            }
            if norm(&s) / bnorm <= 0.1 * tol {
                for i in 0..n {
                    x[i] += alpha * y[i];
                }
                break;
            }
            for i in 0..n {
                z[i] = inv[i] * s[i];
            }
            op(&z, &mut t);
            let tt = dot(&t, &t);
            omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
            for i in 0..n {
                x[i] += alpha * y[i] + omega * z[i];
                r[i] = s[i] - omega * t[i];
            }
            if norm(&r) / bnorm <= 0.1 * tol || iters >= max_iter {
                break;
            }
        }
        let new_rel = true_residual(&op, b, x, &mut r) / bnorm;
        if !new_rel.is_finite() {
            x.copy_from_slice(&last);
            break;
        }
        rel = new_rel;
        last.copy_from_slice(x);
    }
    if rel <= tol {
        Ok(SolveStats {
            iterations: iters,
            relative_residual: rel,
        })
    } else {
        Err(Error::NoConvergence {
            solver: "bicgstab",
            iterations: iters,
            residual: rel,
        })
    }
}

/// Restarted GMRES(`restart`) with right Jacobi preconditioning.
pub fn gmres(
    op: impl Fn(&[f64], &mut [f64]),
    diag: &[f64],
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    restart: usize,
    max_iter: usize,
) -> Result<SolveStats> {
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveStats {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let inv: Vec<f64> = diag
        .iter()
        .map(|&d| if d != 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let m = restart.max(1);
    let mut r = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut iters = 0;
    let mut rel = true_residual(&op, b, x, &mut r) / bnorm;
    while iters < max_iter && rel > tol {
        let beta = norm(&r);
        let mut basis: Vec<Vec<f64>> = vec![r.iter().map(|v| v / beta).collect()];
        // Hessenberg columns, reduced by Givens rotations as they arrive
        let mut h: Vec<Vec<f64>> = Vec::with_capacity(m);
        let (mut cs, mut sn): (Vec<f64>, Vec<f64>) = (Vec::with_capacity(m), Vec::with_capacity(m));
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k = 0;
        while k < m && iters < max_iter {
            iters += 1;
            for i in 0..n {
                z[i] = inv[i] * basis[k][i];
            }
            op(&z, &mut w);
            let mut col = vec![0.0; k + 2];
            for (j, v) in basis.iter().enumerate() {
                col[j] = dot(&w, v);
                for i in 0..n {
                    w[i] -= col[j] * v[i];
                }
            }
            col[k + 1] = norm(&w);
            for j in 0..k {
                let t = cs[j] * col[j] + sn[j] * col[j + 1];
                col[j + 1] = -sn[j] * col[j] + cs[j] * col[j + 1];
                col[j] = t;
            }
            let d = col[k].hypot(col[k + 1]);
            let (c, s) = if d > 0.0 {
                (col[k] / d, col[k + 1] / d)
            } else {
                (1.0, 0.0)
            };
            let next = col[k + 1];
            col[k] = d;
            col[k + 1] = 0.0;
            g[k + 1] = -s * g[k];
            g[k] *= c;
            cs.push(c);
            sn.push(s);
            h.push(col);
            k += 1;
            if (g[k].abs() / bnorm) <= 0.1 * tol || next == 0.0 {
                break;
            }
            basis.push(w.iter().map(|v| v / next).collect());
        }
        let mut y = vec![0.0; k];
        for i in (0..k).rev() {
            let acc: f64 = (i + 1..k).map(|j| h[j][i] * y[j]).sum();
            y[i] = (g[i] - acc) / h[i][i];
        }
        for (j, yj) in y.iter().enumerate() {
            for i in 0..n {
                x[i] += yj * inv[i] * basis[j][i];
            }
        }
        rel = true_residual(&op, b, x, &mut r) / bnorm;
        if !rel.is_finite() {
            break;
        }
    }
    if rel <= tol {
        Ok(SolveStats {
            iterations: iters,
            relative_residual: rel,
        })
    } else {
        Err(Error::NoConvergence {
            solver: "gmres",
            iterations: iters,
            residual: rel,
        })
    }
}

/// Preconditioned conjugate gradients for symmetric positive (semi)definite
/// operators with a consistent right-hand side.
pub fn cg(
    op: impl Fn(&[f64], &mut [f64]),
    diag: &[f64],
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> Result<SolveStats> {
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveStats {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let inv: Vec<f64> = diag
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let mut r = vec![0.0; n];
    true_residual(&op, b, x, &mut r);
    let mut z: Vec<f64> = r.iter().zip(&inv).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut iters = 0;
    while iters < max_iter {
        if norm(&r) / bnorm <= tol {
            break;
        }
        iters += 1;
        op(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
            z[i] = inv[i] * r[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let rel = true_residual(&op, b, x, &mut r) / bnorm;
    if rel <= tol * 10.0 {
        Ok(SolveStats {
            iterations: iters,
            relative_residual: rel,
        })
    } else {
        Err(Error::NoConvergence {
            solver: "cg",
            iterations: iters,
            residual: rel,
        })
    }
}

//! Conjugate gradients over an abstract symmetric positive-definite operator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, norm, Vector};

/// A symmetric positive-definite linear map known only through its action.
pub trait SpdOperator {
    fn dim(&self) -> usize;

    /// Writes `A v` into `out`. Both slices have length [`SpdOperator::dim`].
    fn apply_into(&self, v: &[f64], out: &mut [f64]);
}

impl<T: SpdOperator + ?Sized> SpdOperator for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn apply_into(&self, v: &[f64], out: &mut [f64]) {
        (**self).apply_into(v, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CgConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Iteration cap; `None` means `10 * N`.
    pub max_iters: Option<usize>,
    pub record_energy: bool,
}

impl Default for CgConfig {
    fn default() -> Self {
        CgConfig {
            rel_tol: 1e-10,
            abs_tol: 1e-14,
            max_iters: None,
            record_energy: false,
        }
    }
}

impl CgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.rel_tol.is_finite()) {
            return Err(Error::Config(format!("cg.rel_tol must be > 0, got {}", self.rel_tol)));
        }
        if !(self.abs_tol >= 0.0 && self.abs_tol.is_finite()) {
            return Err(Error::Config(format!("cg.abs_tol must be >= 0, got {}", self.abs_tol)));
        }
        if self.max_iters == Some(0) {
            return Err(Error::Config("cg.max_iters must be >= 1".into()));
        }
        Ok(())
    }

    pub fn max_iters_for(&self, n: usize) -> usize {
        self.max_iters.unwrap_or(10 * n.max(1))
    }

    /// Residual norm at which a solve with right-hand side norm `b_norm`
    /// counts as converged.
    pub fn threshold(&self, b_norm: f64) -> f64 {
        (self.rel_tol * b_norm).max(self.abs_tol)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgReport {
    pub iterations: usize,
    /// Norm of the recurrence residual at the returned iterate.
    pub final_residual_norm: f64,
    pub converged: bool,
    /// `E(x_k) = x_k.A x_k / 2 - b.x_k` for the starting point and every
    /// iteration, when requested. Evaluated directly at `x0`, then updated by
    /// the exact change along each step.
    pub energy_trace: Option<Vec<f64>>,
}

fn quadratic_energy(op: &impl SpdOperator, x: &[f64], b: &[f64], scratch: &mut [f64]) -> f64 {
    op.apply_into(x, scratch);
    0.5 * dot(x, scratch) - dot(b, x)
}

/// Solves `A x = b` by unpreconditioned conjugate gradients.
///
/// Stops when the recurrence residual drops to `max(rel_tol * |b|, abs_tol)`.
/// Running out of iterations is not an error: the iterate with the smallest
/// residual seen is returned with `converged = false`.
pub fn cg_solve(op: &impl SpdOperator, b: &Vector, cfg: &CgConfig, x0: Option<&Vector>) -> Result<(Vector, CgReport)> {
    cfg.validate()?;
    let n = op.dim();
    if b.len() != n {
        return Err(Error::shape("cg_solve rhs", n, b.len()));
    }
    let b = b.as_slice();
    let mut x = match x0 {
        Some(x0) if x0.len() != n => return Err(Error::shape("cg_solve x0", n, x0.len())),
        Some(x0) => x0.as_slice().to_vec(),
        None => vec![0.0; n],
    };

    let threshold = cfg.threshold(norm(b));
    let max_iters = cfg.max_iters_for(n);

    let mut ap = vec![0.0; n];
    let mut r = b.to_vec();
    if x0.is_some() {
        op.apply_into(&x, &mut ap);
        axpy(-1.0, &ap, &mut r);
    }
    let mut p = r.clone();
    let mut rs = dot(&r, &r);

    let mut trace = cfg.record_energy.then(Vec::new);
    if let Some(t) = trace.as_mut() {
        t.push(quadratic_energy(op, &x, b, &mut ap));
    }

    let mut best_x: Option<Vec<f64>> = None;
    let mut best_res = rs.sqrt();
    if best_res <= threshold {
        return Ok((
            Vector::new(x).map_err(|_| numeric(0, "non-finite starting point"))?,
            CgReport {
                iterations: 0,
                final_residual_norm: best_res,
                converged: true,
                energy_trace: trace,
            },
        ));
    }

    for k in 1..=max_iters {
        op.apply_into(&p, &mut ap);
        let curvature = dot(&p, &ap);
        if !curvature.is_finite() {
            return Err(numeric(k, "non-finite curvature p.Ap"));
        }
        if curvature <= 0.0 {
            return Err(numeric(
                k,
                &format!("non-positive curvature p.Ap = {curvature:e}; operator is not positive definite"),
            ));
        }
        let alpha = rs / curvature;
        if let Some(t) = trace.as_mut() {
            // exact change of the quadratic along the step, accumulated so
            // that rounding is relative to the step rather than to E itself
            let last = *t.last().expect("trace starts with E(x0)");
            t.push(last - alpha * dot(&p, &r) + 0.5 * alpha * alpha * curvature);
        }
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        let rs_next = dot(&r, &r);
        if !rs_next.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(numeric(k, "NaN or infinity in iterate"));
        }
        let res = rs_next.sqrt();
        if res <= threshold {
            return Ok((
                Vector::from_vec_unchecked(x),
                CgReport {
                    iterations: k,
                    final_residual_norm: res,
                    converged: true,
                    energy_trace: trace,
                },
            ));
        }
        if res < best_res {
            best_res = res;
            best_x = None;
        } else if best_x.is_none() {
            // residual went up: remember the previous iterate
            let mut prev = x.clone();
            axpy(-alpha, &p, &mut prev);
            best_x = Some(prev);
        }

        let beta = rs_next / rs;
        rs = rs_next;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
    }

    let x = best_x.unwrap_or(x);
    Ok((
        Vector::from_vec_unchecked(x),
        CgReport {
            iterations: max_iters,
            final_residual_norm: best_res,
            converged: false,
            energy_trace: trace,
        },
    ))
}

fn numeric(iteration: usize, message: &str) -> Error {
    Error::Numeric {
        iteration,
        message: message.to_string(),
    }
}

/// An operator backed by an explicit dense row-major matrix.
#[derive(Debug, Clone)]
pub struct DenseOperator<'a> {
    n: usize,
    data: &'a [f64],
}

impl<'a> DenseOperator<'a> {
    pub fn new(m: &'a crate::tensor::Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::shape(
                "DenseOperator",
                "square matrix",
                format!("{:?}", m.shape()),
            ));
        }
        Ok(DenseOperator {
            n: m.rows(),
            data: m.as_slice(),
        })
    }
}

impl SpdOperator for DenseOperator<'_> {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply_into(&self, v: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(&self.data[i * self.n..(i + 1) * self.n], v);
        }
    }
}

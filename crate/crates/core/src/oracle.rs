//! Brute-force reference implementations.
//!
//! Everything here is deliberately naive: explicit `N x N` systems, a dense
//! Cholesky solve, the Kronecker/commutation-matrix form of the embedding
//! gradient evaluated by index arithmetic, and central finite differences.
//! They exist to check the matrix-free layer and are guarded against sizes
//! where they would be unreasonable.

use crate::cg::CgConfig;
use crate::error::{Error, Result};
use crate::layer::{EmbeddingMatrix, GcrfLayer};
use crate::synth::LabeledSample;
use crate::tensor::{dot, Matrix, Vector};
use crate::train::{sample_loss_and_grad, ToyModel, WeightGradients};

pub const MAX_DENSE_VARIABLES: usize = 4096;
pub const MAX_KRONECKER_VARIABLES: usize = 50;
pub const MAX_NAIVE_VARIABLES: usize = 40;
pub const MAX_NAIVE_EMBED_DIM: usize = 6;
pub const MAX_DENSE_PERMUTATION: usize = 2500;
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Solver settings for the finite-difference probes. Differencing divides
/// solver error by the step, so probes run far tighter than the layer default.
pub const FD_PROBE_CG: CgConfig = CgConfig {
    rel_tol: 1e-14,
    abs_tol: 0.0,
    max_iters: None,
    record_energy: false,
};

/// An explicitly assembled system `M x = B` with `M = A + lambda I`.
#[derive(Debug, Clone)]
pub struct ExplicitSystem {
    matrix: Matrix,
    unary: Vector,
}

impl ExplicitSystem {
    pub fn new(matrix: Matrix, unary: Vector) -> Result<Self> {
        let (r, c) = matrix.shape();
        if r != c {
            return Err(Error::shape("ExplicitSystem", "square matrix", format!("{r}x{c}")));
        }
        if unary.len() != r {
            return Err(Error::shape("ExplicitSystem unary", r, unary.len()));
        }
        let asym = matrix.max_abs_diff(&matrix.transpose())?;
        if asym > 1e-12 * matrix.max_abs().max(1.0) {
            return Err(Error::Oracle(format!(
                "system matrix is not symmetric (max |M - M^T| = {asym:e})"
            )));
        }
        Ok(ExplicitSystem { matrix, unary })
    }

    /// `A + lambda I` for an arbitrary symmetric pairwise matrix `A`.
    pub fn from_pairwise(pairwise: &Matrix, lambda: f64, unary: Vector) -> Result<Self> {
        let mut m = pairwise.clone();
        let n = m.rows();
        if m.cols() != n {
            return Err(Error::shape(
                "from_pairwise",
                "square matrix",
                format!("{:?}", m.shape()),
            ));
        }
        for i in 0..n {
            m.as_mut_slice()[i * n + i] += lambda;
        }
        ExplicitSystem::new(m, unary)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn unary(&self) -> &Vector {
        &self.unary
    }
}

/// `M = E^T E + lambda I` as an explicit `N x N` matrix.
pub fn assemble_dense(embeddings: &EmbeddingMatrix, lambda: f64) -> Result<Matrix> {
    let n = embeddings.variables();
    if n > MAX_DENSE_VARIABLES {
        return Err(Error::TooLarge {
            what: "dense system",
            size: n,
            limit: MAX_DENSE_VARIABLES,
        });
    }
    let columns: Vec<Vec<f64>> = (0..n).map(|j| embeddings.matrix().column(j)).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let mut v = dot(&columns[i], &columns[j]);
            if i == j {
                v += lambda;
            }
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    Matrix::new(n, n, out)
}

/// Cholesky factorization and triangular solves.
pub fn direct_solve(sys: &ExplicitSystem) -> Result<Vector> {
    let n = sys.matrix.rows();
    let a = sys.matrix.as_slice();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d.is_nan() || d <= 0.0 {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    let b = sys.unary.as_slice();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s = b[i] - dot(&l[i * n..i * n + i], &y[..i]);
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Vector::new(x)
}

/// The commutation matrix `T_{m,n}` with `T vec(M) = vec(M^T)` for every
/// `m x n` matrix `M`, where `vec` stacks columns. Stored as an index map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PermutationMatrix {
    m: usize,
    n: usize,
}

impl PermutationMatrix {
    pub fn new(m: usize, n: usize) -> Self {
        PermutationMatrix { m, n }
    }

    pub fn size(&self) -> usize {
        self.m * self.n
    }

    /// Column holding the single 1 of row `s`: `(T v)[s] = v[source(s)]`.
    #[inline]
    pub fn source(&self, s: usize) -> usize {
        // s indexes vec(M^T): M^T is n x m, so s = i * n + j addresses M[i][j]
        let (i, j) = (s / self.n, s % self.n);
        j * self.m + i
    }

    /// Row holding the single 1 of column `k`; the inverse of [`Self::source`].
    #[inline]
    pub fn target(&self, k: usize) -> usize {
        let (j, i) = (k / self.m, k % self.m);
        i * self.n + j
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.size() {
            return Err(Error::shape("PermutationMatrix::apply", self.size(), v.len()));
        }
        Ok((0..self.size()).map(|s| v[self.source(s)]).collect())
    }

    pub fn to_dense(&self) -> Result<Matrix> {
        let size = self.size();
        if size > MAX_DENSE_PERMUTATION {
            return Err(Error::TooLarge {
                what: "dense permutation matrix",
                size,
                limit: MAX_DENSE_PERMUTATION,
            });
        }
        let mut m = Matrix::zeros(size, size);
        for s in 0..size {
            m.as_mut_slice()[s * size + self.source(s)] = 1.0;
        }
        Ok(m)
    }
}

/// Column-stacking vectorization.
pub fn vec_columns(m: &Matrix) -> Vec<f64> {
    (0..m.cols()).flat_map(|c| m.column(c)).collect()
}

/// `dL/dA` for an explicit pairwise matrix: entries `-g_i x_j`.
pub fn dlda_kronecker(g: &Vector, x: &Vector) -> Result<Matrix> {
    let n = g.len();
    if x.len() != n {
        return Err(Error::shape("dlda_kronecker", n, x.len()));
    }
    if n > MAX_KRONECKER_VARIABLES {
        return Err(Error::TooLarge {
            what: "Kronecker gradient",
            size: n,
            limit: MAX_KRONECKER_VARIABLES,
        });
    }
    Matrix::from_fn(n, n, |i, j| -g[i] * x[j])
}

/// The embedding gradient evaluated literally as
/// `-(g kron x)^T ((I kron E^T) + (E^T kron I) T_{D,N})`, one entry at a time
/// from Kronecker index arithmetic, then reshaped from `vec` to `D x N`.
pub fn dlda_embedding_naive(embeddings: &EmbeddingMatrix, g: &Vector, x: &Vector) -> Result<Matrix> {
    let d = embeddings.embed_dim();
    let n = embeddings.variables();
    if g.len() != n || x.len() != n {
        return Err(Error::shape(
            "dlda_embedding_naive",
            n,
            format!("{} / {}", g.len(), x.len()),
        ));
    }
    if n > MAX_NAIVE_VARIABLES || d > MAX_NAIVE_EMBED_DIM {
        return Err(Error::TooLarge {
            what: "naive Kronecker embedding gradient (N*D)",
            size: n * d,
            limit: MAX_NAIVE_VARIABLES * MAX_NAIVE_EMBED_DIM,
        });
    }
    let e = embeddings.matrix();
    // E^T[a][b] = E[b][a], an N x D matrix
    let et = |a: usize, b: usize| e.get(b, a);
    let ident = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };

    // (I_N kron E^T): (N*N) x (N*D); row a*N + b, column c*D + dd
    let left = |q: usize, k: usize| {
        let (a, b) = (q / n, q % n);
        let (c, dd) = (k / d, k % d);
        ident(a, c) * et(b, dd)
    };
    // (E^T kron I_N): (N*N) x (D*N); row a*N + b, column c*N + dd
    let right = |q: usize, k: usize| {
        let (a, b) = (q / n, q % n);
        let (c, dd) = (k / n, k % n);
        et(a, c) * ident(b, dd)
    };
    let t = PermutationMatrix::new(d, n);

    let row: Vec<f64> = (0..n * n).map(|q| -g[q / n] * x[q % n]).collect();
    let mut out = Matrix::zeros(d, n);
    for k in 0..d * n {
        let permuted = t.target(k);
        let mut acc = 0.0;
        for (q, &r) in row.iter().enumerate() {
            if r != 0.0 {
                acc += r * (left(q, k) + right(q, permuted));
            }
        }
        // k indexes vec(dL/dE): column k / D, row k % D
        out.as_mut_slice()[(k % d) * n + k / d] = acc;
    }
    Ok(out)
}

/// Central differences of `f` with respect to every entry of `params`.
pub fn central_differences(params: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Oracle(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut probe = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let plus = f(&probe)?;
        probe[i] = params[i] - step;
        let minus = f(&probe)?;
        probe[i] = params[i];
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

fn probe_forward(layer: &GcrfLayer, unary: &Vector) -> Result<Vector> {
    let (x, report) = layer.forward(unary)?;
    if !report.converged {
        return Err(Error::Oracle(format!(
            "probe solve did not converge (residual {:e} after {} iterations)",
            report.final_residual_norm, report.iterations
        )));
    }
    Ok(x)
}

/// Central differences of the probe loss `dL/dx . forward(B)` over every
/// embedding entry.
pub fn finite_diff_embedding_grad(layer: &GcrfLayer, unary: &Vector, dl_dx: &Vector, step: f64) -> Result<Matrix> {
    let base = layer.clone().with_cg_config(FD_PROBE_CG)?;
    let e = layer.embeddings().matrix();
    let (rows, cols) = e.shape();
    let grad = central_differences(e.as_slice(), step, |p| {
        let m = Matrix::new(rows, cols, p.to_vec())?;
        let probe = base.clone().with_embeddings(m.into())?;
        Ok(dl_dx.dot(&probe_forward(&probe, unary)?))
    })?;
    Matrix::new(rows, cols, grad)
}

/// Central differences of the probe loss over every unary entry.
pub fn finite_diff_unary_grad(layer: &GcrfLayer, unary: &Vector, dl_dx: &Vector, step: f64) -> Result<Vector> {
    let base = layer.clone().with_cg_config(FD_PROBE_CG)?;
    let grad = central_differences(unary.as_slice(), step, |p| {
        Ok(dl_dx.dot(&probe_forward(&base, &Vector::new(p.to_vec())?)?))
    })?;
    Vector::new(grad)
}

/// Central differences of the mean cross-entropy of `sample` with respect to
/// every weight of `model`.
pub fn finite_diff_model_grads(
    model: &ToyModel,
    sample: &LabeledSample,
    lambda: f64,
    step: f64,
) -> Result<WeightGradients> {
    let loss = |m: &ToyModel| -> Result<f64> { Ok(sample_loss_and_grad(m, sample, lambda, &FD_PROBE_CG)?.0.loss) };
    let d_unary = {
        let (rows, cols) = model.w_unary.shape();
        let grad = central_differences(model.w_unary.as_slice(), step, |p| {
            let mut probe = model.clone();
            probe.w_unary = Matrix::new(rows, cols, p.to_vec())?;
            loss(&probe)
        })?;
        Matrix::new(rows, cols, grad)?
    };
    let mut d_embed = Vec::with_capacity(model.w_embed.len());
    for (l, w) in model.w_embed.iter().enumerate() {
        let (rows, cols) = w.shape();
        let grad = central_differences(w.as_slice(), step, |p| {
            let mut probe = model.clone();
            probe.w_embed[l] = Matrix::new(rows, cols, p.to_vec())?;
            loss(&probe)
        })?;
        d_embed.push(Matrix::new(rows, cols, grad)?);
    }
    Ok(WeightGradients { d_unary, d_embed })
}

/// `max |a - b| / max(|a|_max, |b|_max)`, or 0 when both are zero.
pub fn normwise_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Largest entry-wise `|a - b| / max(|a|, |b|)` over entries where either
/// magnitude exceeds `floor`.
pub fn entrywise_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .filter(|(x, y)| x.abs() > floor || y.abs() > floor)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()))
        .fold(0.0, f64::max)
}

//! Randomized verification of the layer against the brute-force oracles.

use rand::Rng;

use crate::cg::CgConfig;
use crate::config::GradCheckConfig;
use crate::error::{Error, Result};
use crate::layer::{embedding_gradient, EmbeddingMatrix, GcrfLayer};
use crate::oracle::{
    assemble_dense, direct_solve, dlda_embedding_naive, dlda_kronecker, entrywise_rel_err, finite_diff_embedding_grad,
    finite_diff_unary_grad, normwise_rel_err, vec_columns, ExplicitSystem, PermutationMatrix,
};
use crate::synth::{random_embeddings, random_vector, sample_rng};
use crate::tensor::{Dims, Matrix, Vector};

/// Entries of magnitude at or below this are excluded from finite-difference
/// comparisons.
pub const FD_MAGNITUDE_FLOOR: f64 = 1e-6;

pub const TOL_OPERATOR: f64 = 1e-12;
pub const TOL_SOLVER: f64 = 1e-8;
pub const TOL_NAIVE: f64 = 1e-10;
pub const TOL_FINITE_DIFF: f64 = 1e-5;
pub const TOL_CONTRACTION: f64 = 1e-12;
pub const TOL_SCALAR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn pass(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{}",
            self.name,
            self.max_rel_err,
            self.tolerance,
            self.pass()
        )
    }
}

pub const CHECK_CSV_HEADER: &str = "name,max_rel_err,tolerance,pass";

/// Errors of one random instance against every oracle.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InstanceErrors {
    pub operator_vs_dense: f64,
    pub cg_vs_direct: f64,
    /// `|op(g) - dL/dx|` divided by the CG convergence threshold.
    pub unary_residual_ratio: f64,
    pub embedding_vs_naive: f64,
    pub embedding_vs_fd: f64,
    pub unary_vs_fd: f64,
    pub kronecker_contraction: f64,
    pub permutation: f64,
}

/// Embedding gradient as computed by the layer, or a deliberately broken
/// variant that drops the `-(E x) g^T` term (negative control).
fn candidate_embedding_gradient(e: &EmbeddingMatrix, g: &Vector, x: &Vector, sabotage: bool) -> Matrix {
    if !sabotage {
        return embedding_gradient(e, g, x);
    }
    let eg = e.project(g.as_slice());
    Matrix::from_fn(e.embed_dim(), e.variables(), |d, j| -eg[d] * x[j]).expect("finite")
}

/// Builds a random instance (`N(0, 1/N)` embeddings, standard normal unaries
/// and upstream gradient) and compares the layer with every oracle.
pub fn check_instance(
    dims: Dims,
    lambda: f64,
    cg: &CgConfig,
    fd_step: f64,
    rng: &mut impl Rng,
    sabotage: bool,
) -> Result<InstanceErrors> {
    let n = dims.variables();
    let embeddings = random_embeddings(dims.embed_dim, n, rng);
    let unary = random_vector(n, rng);
    let dl_dx = random_vector(n, rng);
    let probe = random_vector(n, rng);
    let layer = GcrfLayer::new(embeddings.clone(), lambda, dims, *cg)?;

    let dense = assemble_dense(&embeddings, lambda)?;
    let applied = layer.operator_apply(&probe)?;
    let reference = dense.matvec(&probe)?;
    let operator_vs_dense = normwise_rel_err(applied.as_slice(), reference.as_slice());

    let (x, fwd) = layer.forward(&unary)?;
    if !fwd.converged {
        return Err(Error::Oracle("forward solve did not converge".into()));
    }
    let direct = direct_solve(&ExplicitSystem::new(dense, unary.clone())?)?;
    let cg_vs_direct = diff_norm(&x, &direct) / direct.norm().max(f64::MIN_POSITIVE);

    let (grads, _) = layer.backward(&x, &dl_dx)?;
    let g = &grads.d_unary;
    let residual = layer.operator_apply(g)?.add_scaled(-1.0, &dl_dx)?.norm();
    let unary_residual_ratio = residual / cg.threshold(dl_dx.norm());

    let efficient = candidate_embedding_gradient(&embeddings, g, &x, sabotage);
    let naive = dlda_embedding_naive(&embeddings, g, &x)?;
    let embedding_vs_naive = normwise_rel_err(efficient.as_slice(), naive.as_slice());

    let fd = finite_diff_embedding_grad(&layer, &unary, &dl_dx, fd_step)?;
    let embedding_vs_fd = entrywise_rel_err(efficient.as_slice(), fd.as_slice(), FD_MAGNITUDE_FLOOR);
    let fd_unary = finite_diff_unary_grad(&layer, &unary, &dl_dx, fd_step)?;
    let unary_vs_fd = entrywise_rel_err(g.as_slice(), fd_unary.as_slice(), FD_MAGNITUDE_FLOOR);

    // E (G + G^T) with G the explicit dL/dA
    let gk = dlda_kronecker(g, &x)?;
    let sym = Matrix::from_fn(n, n, |i, j| gk.get(i, j) + gk.get(j, i))?;
    let contracted = embeddings.matrix().matmul(&sym)?;
    let kronecker_contraction = normwise_rel_err(contracted.as_slice(), efficient.as_slice());

    let t = PermutationMatrix::new(dims.embed_dim, n);
    let transposed = t.apply(&vec_columns(embeddings.matrix()))?;
    let permutation = if transposed == vec_columns(&embeddings.matrix().transpose()) {
        0.0
    } else {
        1.0
    };

    Ok(InstanceErrors {
        operator_vs_dense,
        cg_vs_direct,
        unary_residual_ratio,
        embedding_vs_naive,
        embedding_vs_fd,
        unary_vs_fd,
        kronecker_contraction,
        permutation,
    })
}

fn diff_norm(a: &Vector, b: &Vector) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Scalar instance `E = [2], lambda = 1, B = 10, dL/dx = 5`, whose closed
/// form is `x = 2, g = 1, dL/dE = -8`. Returns the worst relative error.
pub fn scalar_closed_form(cg: &CgConfig, sabotage: bool) -> Result<f64> {
    let dims = Dims::new(1, 1, 1)?;
    let e = EmbeddingMatrix::new(Matrix::new(1, 1, vec![2.0])?);
    let layer = GcrfLayer::new(e.clone(), 1.0, dims, *cg)?;
    let (x, _) = layer.forward(&Vector::new(vec![10.0])?)?;
    let (grads, _) = layer.backward(&x, &Vector::new(vec![5.0])?)?;
    let de = candidate_embedding_gradient(&e, &grads.d_unary, &x, sabotage);
    let rel = |got: f64, want: f64| (got - want).abs() / want.abs();
    Ok(rel(x[0], 2.0)
        .max(rel(grads.d_unary[0], 1.0))
        .max(rel(de.get(0, 0), -8.0)))
}

/// Runs the full suite and returns one aggregated result per check.
pub fn run_suite(cfg: &GradCheckConfig, lambda: f64, cg: &CgConfig, sabotage: bool) -> Result<Vec<CheckResult>> {
    let dims = Dims::new(cfg.pixels, cfg.labels, cfg.embed_dim)?;
    let mut worst = InstanceErrors::default();
    for i in 0..cfg.instances {
        let mut rng = sample_rng(cfg.seed, i as u64);
        let e = check_instance(dims, lambda, cg, cfg.fd_step, &mut rng, sabotage)?;
        worst.operator_vs_dense = worst.operator_vs_dense.max(e.operator_vs_dense);
        worst.cg_vs_direct = worst.cg_vs_direct.max(e.cg_vs_direct);
        worst.unary_residual_ratio = worst.unary_residual_ratio.max(e.unary_residual_ratio);
        worst.embedding_vs_naive = worst.embedding_vs_naive.max(e.embedding_vs_naive);
        worst.embedding_vs_fd = worst.embedding_vs_fd.max(e.embedding_vs_fd);
        worst.unary_vs_fd = worst.unary_vs_fd.max(e.unary_vs_fd);
        worst.kronecker_contraction = worst.kronecker_contraction.max(e.kronecker_contraction);
        worst.permutation = worst.permutation.max(e.permutation);
    }
    let check = |name, max_rel_err, tolerance| CheckResult {
        name,
        max_rel_err,
        tolerance,
    };
    Ok(vec![
        check("scalar_closed_form", scalar_closed_form(cg, sabotage)?, TOL_SCALAR),
        check("operator_vs_dense", worst.operator_vs_dense, TOL_OPERATOR),
        check("cg_vs_direct", worst.cg_vs_direct, TOL_SOLVER),
        check("unary_grad_residual", worst.unary_residual_ratio, 1.0),
        check("embedding_grad_vs_naive", worst.embedding_vs_naive, TOL_NAIVE),
        check("embedding_grad_vs_fd", worst.embedding_vs_fd, TOL_FINITE_DIFF),
        check("unary_grad_vs_fd", worst.unary_vs_fd, TOL_FINITE_DIFF),
        check("kronecker_contraction", worst.kronecker_contraction, TOL_CONTRACTION),
        check("permutation_transpose", worst.permutation, 0.0),
    ])
}

//! The fully-connected low-rank Gaussian CRF layer.
//!
//! Pairwise terms are `A = E^T E` for a `D x N` embedding matrix `E`, whose
//! column `j` embeds variable `j`. Inference minimizes
//! `x.(E^T E + lambda I) x / 2 - B.x`, which amounts to solving
//! `(E^T E + lambda I) x = B`. The operator is only ever applied as two
//! `D x N` products plus a diagonal term; no `N x N` buffer is allocated here.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cg::{cg_solve, CgConfig, CgReport, SpdOperator};
use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, read_matrix, write_matrix, Dims, Matrix, Vector};

/// `D x N` matrix of per-variable embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(Matrix);

impl EmbeddingMatrix {
    pub fn new(m: Matrix) -> Self {
        EmbeddingMatrix(m)
    }

    pub fn zeros(dims: &Dims) -> Self {
        EmbeddingMatrix(Matrix::zeros(dims.embed_dim, dims.variables()))
    }

    #[inline]
    pub fn embed_dim(&self) -> usize {
        self.0.rows()
    }

    #[inline]
    pub fn variables(&self) -> usize {
        self.0.cols()
    }

    #[inline]
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// `E v` (length `D`).
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.embed_dim()];
        self.0.matvec_into(v, &mut out);
        out
    }
}

impl From<Matrix> for EmbeddingMatrix {
    fn from(m: Matrix) -> Self {
        EmbeddingMatrix(m)
    }
}

/// Gradients of a loss with respect to the layer inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    /// `dL/dB`
    pub d_unary: Vector,
    /// `dL/dE`, `D x N`
    pub d_embeddings: Matrix,
}

#[derive(Debug, Clone)]
pub struct GcrfLayer {
    embeddings: EmbeddingMatrix,
    lambda: f64,
    dims: Dims,
    cg: CgConfig,
}

impl GcrfLayer {
    pub fn new(embeddings: EmbeddingMatrix, lambda: f64, dims: Dims, cg: CgConfig) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
        }
        cg.validate()?;
        let expected = (dims.embed_dim, dims.variables());
        if embeddings.0.shape() != expected {
            return Err(Error::shape(
                "GcrfLayer embeddings",
                format!("{expected:?}"),
                format!("{:?}", embeddings.0.shape()),
            ));
        }
        Ok(GcrfLayer {
            embeddings,
            lambda,
            dims,
            cg,
        })
    }

    /// Layer with no pairwise terms: `x = B / lambda`.
    pub fn unary_only(dims: Dims, lambda: f64, cg: CgConfig) -> Result<Self> {
        GcrfLayer::new(EmbeddingMatrix::zeros(&dims), lambda, dims, cg)
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn cg_config(&self) -> &CgConfig {
        &self.cg
    }

    pub fn with_cg_config(mut self, cg: CgConfig) -> Result<Self> {
        cg.validate()?;
        self.cg = cg;
        Ok(self)
    }

    pub fn with_embeddings(self, embeddings: EmbeddingMatrix) -> Result<Self> {
        GcrfLayer::new(embeddings, self.lambda, self.dims, self.cg)
    }

    fn check_len(&self, context: &'static str, v: &Vector) -> Result<()> {
        if v.len() != self.dims.variables() {
            return Err(Error::shape(context, self.dims.variables(), v.len()));
        }
        Ok(())
    }

    /// `(E^T E + lambda I) v`
    pub fn operator_apply(&self, v: &Vector) -> Result<Vector> {
        self.check_len("operator_apply", v)?;
        let mut out = vec![0.0; v.len()];
        self.apply_into(v.as_slice(), &mut out);
        Vector::new(out).map_err(|_| Error::Numeric {
            iteration: 0,
            message: "operator produced a non-finite value".into(),
        })
    }

    /// `x.(E^T E + lambda I) x / 2 - B.x`, evaluated as
    /// `(|E x|^2 + lambda |x|^2) / 2 - B.x`.
    pub fn energy(&self, x: &Vector, unary: &Vector) -> Result<f64> {
        self.check_len("energy x", x)?;
        self.check_len("energy unary", unary)?;
        let ex = self.embeddings.project(x.as_slice());
        Ok(0.5 * (dot(&ex, &ex) + self.lambda * x.dot(x)) - unary.dot(x))
    }

    /// Minimizes the energy for unary scores `unary`.
    pub fn forward(&self, unary: &Vector) -> Result<(Vector, CgReport)> {
        self.check_len("forward", unary)?;
        cg_solve(self, unary, &self.cg, None)
    }

    /// Back-propagates `dl_dx` through the layer.
    ///
    /// `x` must be the forward solution for the current parameters. The unary
    /// gradient `g` solves `(E^T E + lambda I) g = dL/dx`; the embedding
    /// gradient is `-(E g) x^T - (E x) g^T`.
    pub fn backward(&self, x: &Vector, dl_dx: &Vector) -> Result<(LayerGradients, CgReport)> {
        self.check_len("backward x", x)?;
        self.check_len("backward dL/dx", dl_dx)?;
        let (g, report) = cg_solve(self, dl_dx, &self.cg, None)?;
        let d_embeddings = embedding_gradient(&self.embeddings, &g, x);
        Ok((
            LayerGradients {
                d_unary: g,
                d_embeddings,
            },
            report,
        ))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_matrix(dir.join(EMBEDDINGS_FILE), self.embeddings.matrix())?;
        let meta = LayerMeta {
            pixels: self.dims.pixels,
            labels: self.dims.labels,
            embed_dim: self.dims.embed_dim,
            lambda: self.lambda,
            cg: self.cg,
        };
        let path = dir.join(LAYER_META_FILE);
        fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(LAYER_META_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: LayerMeta = serde_json::from_str(&text)?;
        let dims = Dims::new(meta.pixels, meta.labels, meta.embed_dim)?;
        let embeddings = read_matrix(dir.join(EMBEDDINGS_FILE))?;
        GcrfLayer::new(embeddings.into(), meta.lambda, dims, meta.cg)
    }
}

pub const EMBEDDINGS_FILE: &str = "embeddings.txt";
pub const LAYER_META_FILE: &str = "layer.json";

/// On-disk layer metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerMeta {
    #[serde(rename = "P")]
    pub pixels: usize,
    #[serde(rename = "L")]
    pub labels: usize,
    #[serde(rename = "D")]
    pub embed_dim: usize,
    pub lambda: f64,
    pub cg: CgConfig,
}

impl SpdOperator for GcrfLayer {
    fn dim(&self) -> usize {
        self.dims.variables()
    }

    fn apply_into(&self, v: &[f64], out: &mut [f64]) {
        let e = self.embeddings.matrix();
        let ev = self.embeddings.project(v);
        for (o, vi) in out.iter_mut().zip(v) {
            *o = self.lambda * vi;
        }
        e.matvec_t_acc(&ev, out);
    }
}

/// `dL/dE = -(E g) x^T - (E x) g^T`, built from two rank-one outer products.
pub fn embedding_gradient(embeddings: &EmbeddingMatrix, g: &Vector, x: &Vector) -> Matrix {
    let eg = embeddings.project(g.as_slice());
    let ex = embeddings.project(x.as_slice());
    let n = embeddings.variables();
    let mut out = Matrix::zeros(embeddings.embed_dim(), n);
    for (d, row) in out.as_mut_slice().chunks_exact_mut(n).enumerate() {
        axpy(-eg[d], x.as_slice(), row);
        axpy(-ex[d], g.as_slice(), row);
    }
    out
}

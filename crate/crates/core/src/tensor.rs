//! Dense containers, the pixel-label flattening convention and the
//! whitespace matrix text format.
//!
//! Variables are flattened label-major within a pixel: variable `p * L + l`
//! holds the score of label `l` at pixel `p`, so the `L` scores of one pixel
//! form a contiguous slice.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Problem dimensions: `P` pixels, `L` labels, `N = P * L` variables and
/// embedding dimension `D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub pixels: usize,
    pub labels: usize,
    pub embed_dim: usize,
}

impl Dims {
    pub fn new(pixels: usize, labels: usize, embed_dim: usize) -> Result<Self> {
        if pixels == 0 || labels == 0 || embed_dim == 0 {
            return Err(Error::Config(format!(
                "dimensions must be positive (P={pixels}, L={labels}, D={embed_dim})"
            )));
        }
        pixels
            .checked_mul(labels)
            .ok_or_else(|| Error::Config("P*L overflows".into()))?;
        Ok(Dims {
            pixels,
            labels,
            embed_dim,
        })
    }

    /// Number of pixel-label variables `N = P * L`.
    #[inline]
    pub fn variables(&self) -> usize {
        self.pixels * self.labels
    }

    /// Index of the variable for label `l` at pixel `p`.
    pub fn flat_index(&self, p: usize, l: usize) -> Result<usize> {
        flat_index(p, l, self)
    }

    /// Inverse of [`Dims::flat_index`].
    pub fn unflatten(&self, i: usize) -> Result<(usize, usize)> {
        if i >= self.variables() {
            return Err(Error::Index {
                what: "variable",
                index: i,
                bound: self.variables(),
            });
        }
        Ok((i / self.labels, i % self.labels))
    }
}

pub fn flat_index(p: usize, l: usize, dims: &Dims) -> Result<usize> {
    if p >= dims.pixels {
        return Err(Error::Index {
            what: "pixel",
            index: p,
            bound: dims.pixels,
        });
    }
    if l >= dims.labels {
        return Err(Error::Index {
            what: "label",
            index: l,
            bound: dims.labels,
        });
    }
    Ok(p * dims.labels + l)
}

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(position) => Err(Error::NonFinite {
            position,
            value: data[position],
        }),
        None => Ok(()),
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Dense vector of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        check_finite(&data)?;
        Ok(Vector { data })
    }

    pub fn zeros(len: usize) -> Self {
        Vector { data: vec![0.0; len] }
    }

    pub fn from_fn(len: usize, f: impl FnMut(usize) -> f64) -> Result<Self> {
        Vector::new((0..len).map(f).collect())
    }

    /// Wraps values already known to be finite.
    pub(crate) fn from_vec_unchecked(data: Vec<f64>) -> Self {
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Vector { data }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `self + alpha * other`
    pub fn add_scaled(&self, alpha: f64, other: &Vector) -> Result<Vector> {
        if self.len() != other.len() {
            return Err(Error::shape("add_scaled", self.len(), other.len()));
        }
        let mut out = self.data.clone();
        axpy(alpha, &other.data, &mut out);
        Vector::new(out)
    }

    pub fn to_row_matrix(&self) -> Matrix {
        Matrix {
            rows: 1,
            cols: self.len(),
            data: self.data.clone(),
        }
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

/// Dense row-major matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        check_finite(&data)?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix::new(rows, cols, data)
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for in-place updates. Callers keep entries finite.
    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Matrix::from_vec_unchecked(self.cols, self.rows, out)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute entry-wise difference.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "max_abs_diff",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// `self * v`, writing into `out` (length `rows`).
    pub(crate) fn matvec_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), v);
        }
    }

    /// `out += self^T * u` (length `cols`), streaming over rows.
    pub(crate) fn matvec_t_acc(&self, u: &[f64], out: &mut [f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            if ur != 0.0 {
                axpy(ur, self.row(r), out);
            }
        }
    }

    pub fn matvec(&self, v: &Vector) -> Result<Vector> {
        if v.len() != self.cols {
            return Err(Error::shape("matvec", self.cols, v.len()));
        }
        let mut out = vec![0.0; self.rows];
        self.matvec_into(v.as_slice(), &mut out);
        Vector::new(out)
    }

    pub fn matvec_t(&self, u: &Vector) -> Result<Vector> {
        if u.len() != self.rows {
            return Err(Error::shape("matvec_t", self.rows, u.len()));
        }
        let mut out = vec![0.0; self.cols];
        self.matvec_t_acc(u.as_slice(), &mut out);
        Vector::new(out)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", format!("{} rows", self.cols), other.rows));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        for r in 0..self.rows {
            let dst = &mut out[r * other.cols..(r + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a != 0.0 {
                    axpy(a, other.row(k), dst);
                }
            }
        }
        Matrix::new(self.rows, other.cols, out)
    }
}

/// Serializes `m` in the whitespace text format: a `rows cols` header line,
/// then one line per row. Values use the shortest representation that
/// parses back to the identical `f64`.
pub fn format_matrix(m: &Matrix) -> String {
    let mut s = String::with_capacity(m.data.len() * 20 + 16);
    let _ = writeln!(s, "{} {}", m.rows, m.cols);
    for r in 0..m.rows {
        let mut first = true;
        for v in m.row(r) {
            if !first {
                s.push(' ');
            }
            first = false;
            let _ = write!(s, "{v:?}");
        }
        s.push('\n');
    }
    s
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_matrix(m)).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix(&text, path)
}

/// Parses the whitespace text format. `origin` only labels diagnostics.
pub fn parse_matrix(text: &str, origin: impl AsRef<Path>) -> Result<Matrix> {
    let origin = origin.as_ref();
    let err = |line: usize, message: String| Error::Format {
        path: origin.to_path_buf(),
        line,
        message,
    };

    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (header_line, header) = lines
        .by_ref()
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| err(1, "empty file, expected `rows cols` header".into()))?;
    let dims: Vec<&str> = header.split_whitespace().collect();
    if dims.len() != 2 {
        return Err(err(
            header_line,
            format!("header must be `rows cols`, found {} tokens", dims.len()),
        ));
    }
    let parse_dim = |tok: &str| {
        tok.parse::<usize>()
            .map_err(|_| err(header_line, format!("invalid dimension `{tok}`")))
    };
    let rows = parse_dim(dims[0])?;
    let cols = parse_dim(dims[1])?;
    let expected = rows
        .checked_mul(cols)
        .ok_or_else(|| err(header_line, "rows*cols overflows".into()))?;

    let mut data = Vec::with_capacity(expected);
    let mut last_line = header_line;
    for (n, line) in lines {
        for tok in line.split_whitespace() {
            last_line = n;
            if data.len() == expected {
                return Err(err(
                    n,
                    format!("extra value `{tok}`: header declares {expected} values"),
                ));
            }
            let v: f64 = tok.parse().map_err(|_| err(n, format!("unparsable value `{tok}`")))?;
            if !v.is_finite() {
                return Err(err(n, format!("non-finite value `{tok}`")));
            }
            data.push(v);
        }
    }
    if data.len() != expected {
        return Err(err(
            last_line,
            format!("expected {expected} values for {rows}x{cols}, found {}", data.len()),
        ));
    }
    Ok(Matrix { rows, cols, data })
}

/// Writes a vector as a `1 x len` matrix.
pub fn write_vector(path: impl AsRef<Path>, v: &Vector) -> Result<()> {
    write_matrix(path, &v.to_row_matrix())
}

/// Reads a vector stored as either a `1 x len` or a `len x 1` matrix.
pub fn read_vector(path: impl AsRef<Path>) -> Result<Vector> {
    let path = path.as_ref();
    let m = read_matrix(path)?;
    matrix_to_vector(m).map_err(|m| Error::Format {
        path: path.to_path_buf(),
        line: 1,
        message: format!("expected a 1xN or Nx1 matrix, found {}x{}", m.rows, m.cols),
    })
}

fn matrix_to_vector(m: Matrix) -> std::result::Result<Vector, Matrix> {
    if m.rows == 1 || m.cols == 1 {
        Ok(Vector { data: m.data })
    } else {
        Err(m)
    }
}

//! Static skeleton graphs and their spectral machinery.
//!
//! Everything here works on small dense `f64` matrices. The propagation
//! matrices fed into the network are built once per skeleton and converted
//! to the training precision afterwards.
//!
//! Two Laplacian variants coexist:
//!
//! | function                 | matrix                          |
//! |--------------------------|---------------------------------|
//! | [`laplacian_standard`]   | `I - D^{-1/2} A D^{-1/2}`       |
//! | [`laplacian_paper`]      | `I + D^{-1/2} A D^{-1/2}`       |
//!
//! The `+` form is the renormalized first-order filter that the graph
//! modules use. The `-` form has the textbook spectrum in `[0, 2]` and is
//! what [`spectral_filter_oracle`] diagonalizes.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{NasError, Result};

/// Largest Chebyshev order available to the graph modules.
pub const MAX_CHEBYSHEV_ORDER: usize = 4;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(NasError::structural("ragged rows"));
        }
        Ok(Matrix { rows: r, cols: c, data: rows.concat() })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NasError::structural(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Matrix::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(NasError::structural(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|x| x * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(NasError::structural("matrix shapes differ"));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.is_square() && self.max_abs_diff(&self.transpose()) <= tol
    }

    /// Row-major permutation `P M Pᵀ` where row `i` of the result is row
    /// `perm[i]` of `self`.
    pub fn permute(&self, perm: &[usize]) -> Matrix {
        let n = self.rows;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                out[(i, j)] = self[(perm[i], perm[j])];
            }
        }
        out
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Nonnegative, symmetric `n × n` adjacency of an undirected graph.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyMatrix(Matrix);

impl AdjacencyMatrix {
    /// Wraps an arbitrary weighted adjacency; only nonnegativity and
    /// squareness are enforced.
    pub fn from_matrix(m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(NasError::structural("adjacency must be square"));
        }
        if m.as_slice().iter().any(|&x| !(x >= 0.0)) {
            return Err(NasError::argument("adjacency entries must be nonnegative"));
        }
        Ok(AdjacencyMatrix(m))
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn degrees(&self) -> Vec<f64> {
        (0..self.n()).map(|i| self.0.row(i).iter().sum()).collect()
    }

    /// Number of undirected edges (nonzero entries above the diagonal).
    pub fn edge_count(&self) -> usize {
        let n = self.n();
        (0..n).map(|i| (i + 1..n).filter(|&j| self.0[(i, j)] != 0.0).count()).sum()
    }
}

/// Builds the 0/1 adjacency of an undirected skeleton. Repeated edges are
/// idempotent.
pub fn build_skeleton_adjacency(edges: &[(usize, usize)], n: usize) -> Result<AdjacencyMatrix> {
    let mut m = Matrix::zeros(n, n);
    for &(i, j) in edges {
        if i >= n || j >= n {
            return Err(NasError::structural(format!("edge ({i}, {j}) out of range for {n} nodes")));
        }
        if i == j {
            return Err(NasError::structural(format!("self edge at node {i}")));
        }
        m[(i, j)] = 1.0;
        m[(j, i)] = 1.0;
    }
    Ok(AdjacencyMatrix(m))
}

/// A Laplacian-like symmetric operator on the skeleton nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedLaplacian(Matrix);

impl NormalizedLaplacian {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    /// Wraps a symmetric matrix so arbitrary operators can be pushed through
    /// the oracle in tests.
    pub fn from_symmetric(m: Matrix) -> Result<Self> {
        if !m.is_symmetric(1e-12) {
            return Err(NasError::structural("laplacian must be symmetric"));
        }
        Ok(NormalizedLaplacian(m))
    }
}

/// `D^{-1/2} A D^{-1/2}` with `D_ii^{-1/2} := 0` on isolated nodes.
fn normalized_adjacency(a: &AdjacencyMatrix) -> Matrix {
    let inv_sqrt: Vec<f64> =
        a.degrees().into_iter().map(|d| if d > 0.0 { d.sqrt().recip() } else { 0.0 }).collect();
    let n = a.n();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = inv_sqrt[i] * a.matrix()[(i, j)] * inv_sqrt[j];
        }
    }
    out
}

/// `I + D^{-1/2} A D^{-1/2}`, the renormalized operator used by every
/// static graph module.
pub fn laplacian_paper(a: &AdjacencyMatrix) -> NormalizedLaplacian {
    let n = a.n();
    NormalizedLaplacian(Matrix::identity(n).add(&normalized_adjacency(a)).expect("same shape"))
}

/// `I - D^{-1/2} A D^{-1/2}`, the textbook symmetric normalized Laplacian.
pub fn laplacian_standard(a: &AdjacencyMatrix) -> NormalizedLaplacian {
    let n = a.n();
    NormalizedLaplacian(Matrix::identity(n).sub(&normalized_adjacency(a)).expect("same shape"))
}

/// `2L/λ_max - I`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledLaplacian {
    matrix: Matrix,
    lambda_max: f64,
}

impl ScaledLaplacian {
    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }
}

pub fn rescale(l: &NormalizedLaplacian, lambda_max: f64) -> Result<ScaledLaplacian> {
    if !(lambda_max > 0.0) || !lambda_max.is_finite() {
        return Err(NasError::argument(format!("lambda_max must be positive, got {lambda_max}")));
    }
    let n = l.n();
    let matrix = l.0.scale(2.0 / lambda_max).sub(&Matrix::identity(n))?;
    Ok(ScaledLaplacian { matrix, lambda_max })
}

/// How the spectral bound used by [`rescale`] is obtained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaMax {
    Fixed(f64),
    /// Largest-magnitude eigenvalue by power iteration.
    PowerIteration { iterations: usize },
}

impl Default for LambdaMax {
    fn default() -> Self {
        LambdaMax::Fixed(2.0)
    }
}

impl LambdaMax {
    pub fn resolve(self, l: &NormalizedLaplacian) -> f64 {
        match self {
            LambdaMax::Fixed(v) => v,
            LambdaMax::PowerIteration { iterations } => estimate_lambda_max(l, iterations),
        }
    }
}

/// Power iteration on a symmetric matrix; returns the dominant eigenvalue's
/// magnitude (0 for the zero matrix).
pub fn estimate_lambda_max(l: &NormalizedLaplacian, iterations: usize) -> f64 {
    let n = l.n();
    if n == 0 {
        return 0.0;
    }
    // A slightly irregular start vector avoids orthogonality to the top
    // eigenvector on symmetric graphs.
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * (i as f64 + 1.0).sqrt()).collect();
    let mut estimate = 0.0;
    for _ in 0..iterations.max(1) {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let w: Vec<f64> = (0..n).map(|i| l.0.row(i).iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        estimate = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>().abs();
        v = w;
    }
    estimate
}

/// `T_0 … T_R` evaluated at a scaled Laplacian.
#[derive(Clone, Debug)]
pub struct ChebyshevTerms {
    terms: Vec<Matrix>,
}

impl ChebyshevTerms {
    pub fn order(&self) -> usize {
        self.terms.len() - 1
    }

    pub fn term(&self, r: usize) -> &Matrix {
        &self.terms[r]
    }

    pub fn terms(&self) -> &[Matrix] {
        &self.terms
    }

    /// `Σ_r coeffs[r] · T_r · X`.
    pub fn filter(&self, coeffs: &[f64], x: &Matrix) -> Result<Matrix> {
        if coeffs.len() > self.terms.len() {
            return Err(NasError::argument(format!(
                "{} coefficients for order {}",
                coeffs.len(),
                self.order()
            )));
        }
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for (c, t) in coeffs.iter().zip(&self.terms) {
            out = out.add(&t.matmul(x)?.scale(*c))?;
        }
        Ok(out)
    }
}

/// Three-term recursion `T_r = 2 L̂ T_{r-1} - T_{r-2}`.
pub fn chebyshev_terms(lhat: &ScaledLaplacian, order: usize) -> Result<ChebyshevTerms> {
    if order > MAX_CHEBYSHEV_ORDER {
        return Err(NasError::argument(format!(
            "chebyshev order {order} exceeds the search-space bound {MAX_CHEBYSHEV_ORDER}"
        )));
    }
    let n = lhat.matrix.rows();
    let mut terms = vec![Matrix::identity(n)];
    if order >= 1 {
        terms.push(lhat.matrix.clone());
    }
    for r in 2..=order {
        let next = lhat.matrix.matmul(&terms[r - 1])?.scale(2.0).sub(&terms[r - 2])?;
        terms.push(next);
    }
    Ok(ChebyshevTerms { terms })
}

/// Scalar Chebyshev polynomial of the first kind from its closed forms.
pub fn chebyshev_scalar(r: usize, x: f64) -> f64 {
    let r = r as f64;
    if x.abs() <= 1.0 {
        (r * x.acos()).cos()
    } else {
        let sign = if x < 0.0 && (r as u64) % 2 == 1 { -1.0 } else { 1.0 };
        sign * (r * x.abs().acosh()).cosh()
    }
}

/// Reference spectral filter: diagonalizes `L`, maps each eigenvalue
/// through `λ̂ = 2λ/λ_max - 1` and `g(λ̂) = Σ coeffs[r] T_r(λ̂)`, and applies
/// `U g(Λ) Uᵀ X`. Meant for graphs of at most 64 nodes.
pub fn spectral_filter_oracle(
    l: &NormalizedLaplacian,
    lambda_max: f64,
    coeffs: &[f64],
    x: &Matrix,
) -> Result<Matrix> {
    let n = l.n();
    if n > 64 {
        return Err(NasError::argument(format!("oracle limited to 64 nodes, got {n}")));
    }
    if x.rows() != n {
        return Err(NasError::structural(format!("signal has {} rows for {n} nodes", x.rows())));
    }
    if !(lambda_max > 0.0) {
        return Err(NasError::argument("lambda_max must be positive"));
    }
    let dm = DMatrix::from_row_slice(n, n, l.matrix().as_slice());
    let eig = SymmetricEigen::try_new(dm, 1e-14, 10_000)
        .ok_or_else(|| NasError::Numerical("eigendecomposition did not converge".into()))?;
    let gains: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&lam| {
            let scaled = 2.0 * lam / lambda_max - 1.0;
            coeffs.iter().enumerate().map(|(r, c)| c * chebyshev_scalar(r, scaled)).sum()
        })
        .collect();
    let u = &eig.eigenvectors;
    let xm = DMatrix::from_row_slice(x.rows(), x.cols(), x.as_slice());
    let spectral = u.transpose() * xm;
    let mut scaled = spectral;
    for (i, g) in gains.iter().enumerate() {
        scaled.row_mut(i).scale_mut(*g);
    }
    let y = u * scaled;
    let mut out = Matrix::zeros(n, x.cols());
    for i in 0..n {
        for j in 0..x.cols() {
            out[(i, j)] = y[(i, j)];
        }
    }
    Ok(out)
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn symmetric_eigenvalues(m: &Matrix) -> Result<Vec<f64>> {
    let dm = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    let eig = SymmetricEigen::try_new(dm, 1e-14, 10_000)
        .ok_or_else(|| NasError::Numerical("eigendecomposition did not converge".into()))?;
    let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    values.sort_by(f64::total_cmp);
    Ok(values)
}

/// Scales every row to sum to one; an all-zero row becomes uniform `1/n`.
/// Inputs are expected to be entrywise nonnegative already.
pub fn row_normalize(m: &Matrix) -> Matrix {
    debug_assert!(m.as_slice().iter().all(|&x| x >= 0.0), "row_normalize expects nonnegative input");
    let mut out = m.clone();
    let cols = m.cols();
    for i in 0..m.rows() {
        let sum: f64 = m.row(i).iter().sum();
        let row = &mut out.data[i * cols..(i + 1) * cols];
        if sum > 0.0 {
            row.iter_mut().for_each(|x| *x /= sum);
        } else {
            row.iter_mut().for_each(|x| *x = 1.0 / cols as f64);
        }
    }
    out
}

/// Built-in skeleton topologies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkeletonPreset {
    /// Kinect v2 layout with 25 joints.
    Ntu25,
    /// Five joints in a chain: head, neck, shoulder, elbow, hand.
    ToyChain5,
}

// 1-based joint pairs of the Kinect v2 skeleton.
const NTU25_EDGES: [(usize, usize); 24] = [
    (1, 2), (2, 21), (3, 21), (4, 3), (5, 21), (6, 5), (7, 6), (8, 7),
    (9, 21), (10, 9), (11, 10), (12, 11), (13, 1), (14, 13), (15, 14), (16, 15),
    (17, 1), (18, 17), (19, 18), (20, 19), (22, 23), (23, 8), (24, 25), (25, 12),
];

impl SkeletonPreset {
    pub fn joints(self) -> usize {
        match self {
            SkeletonPreset::Ntu25 => 25,
            SkeletonPreset::ToyChain5 => 5,
        }
    }

    pub fn edges(self) -> Vec<(usize, usize)> {
        match self {
            SkeletonPreset::Ntu25 => NTU25_EDGES.iter().map(|&(a, b)| (a - 1, b - 1)).collect(),
            SkeletonPreset::ToyChain5 => vec![(0, 1), (1, 2), (2, 3), (3, 4)],
        }
    }

    /// Root joint used when orienting the tree for bone vectors.
    pub fn root(self) -> usize {
        match self {
            SkeletonPreset::Ntu25 => 20,
            SkeletonPreset::ToyChain5 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SkeletonPreset::Ntu25 => "ntu25",
            SkeletonPreset::ToyChain5 => "toy5",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "ntu25" => Some(SkeletonPreset::Ntu25),
            "toy5" => Some(SkeletonPreset::ToyChain5),
            _ => None,
        }
    }

    pub fn adjacency(self) -> AdjacencyMatrix {
        build_skeleton_adjacency(&self.edges(), self.joints()).expect("preset edges are valid")
    }
}

/// Parses a plain-text edge list: one `i j` pair per line. Blank lines and
/// lines starting with `#` are skipped.
pub fn parse_edge_list(text: &str) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let mut next = || -> Result<usize> {
            parts
                .next()
                .ok_or_else(|| NasError::Parse(format!("line {}: expected two node indices", lineno + 1)))?
                .parse::<usize>()
                .map_err(|e| NasError::Parse(format!("line {}: {e}", lineno + 1)))
        };
        let (i, j) = (next()?, next()?);
        if parts.next().is_some() {
            return Err(NasError::Parse(format!("line {}: trailing tokens", lineno + 1)));
        }
        edges.push((i, j));
    }
    Ok(edges)
}

pub fn format_edge_list(edges: &[(usize, usize)]) -> String {
    let mut s = String::new();
    for (i, j) in edges {
        let _ = writeln!(s, "{i} {j}");
    }
    s
}

pub fn read_edge_list(path: &Path) -> Result<Vec<(usize, usize)>> {
    parse_edge_list(&std::fs::read_to_string(path)?)
}

/// Adjacency imported from an edge-list file.
pub fn load_adjacency(path: &Path, n: usize) -> Result<AdjacencyMatrix> {
    build_skeleton_adjacency(&read_edge_list(path)?, n)
}

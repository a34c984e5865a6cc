//! Small numerical kernels shared across the crate: nonnegative least squares,
//! Gauss–Legendre quadrature, and a sparse least-squares solver with sign
//! constraints used by dual recovery.

use nalgebra::{DMatrix, DVector};

/// Dense column vector used throughout the crate.
pub type Vector = DVector<f64>;
/// Dense matrix used throughout the crate.
pub type Matrix = DMatrix<f64>;

/// Result of a nonnegative least-squares solve.
#[derive(Debug, Clone)]
pub struct NnlsSolution {
    /// Minimizer, componentwise nonnegative.
    pub x: Vector,
    /// Euclidean norm of `A x - b` at the minimizer.
    pub residual: f64,
}

/// Solves `min ‖A x − b‖` subject to `x ≥ 0` with the Lawson–Hanson active-set method.
pub fn nnls(a: &Matrix, b: &Vector) -> NnlsSolution {
    let (m, n) = a.shape();
    assert_eq!(m, b.len(), "nnls: dimension mismatch");
    let mut x = Vector::zeros(n);
    if n == 0 {
        return NnlsSolution { x, residual: b.norm() };
    }
    let scale = a.iter().fold(0.0_f64, |acc, v| acc.max(v.abs())).max(1.0);
    let tol = 10.0 * f64::EPSILON * scale * (m.max(n) as f64) * (1.0 + b.norm());
    let mut passive = vec![false; n];
    let mut blocked = vec![false; n];
    let max_outer = 3 * n + 10;

    for _ in 0..max_outer {
        let w = a.transpose() * (b - a * &x);
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if !passive[j] && !blocked[j] && w[j] > tol && best.map_or(true, |(_, v)| w[j] > v) {
                best = Some((j, w[j]));
            }
        }
        let Some((enter, _)) = best else { break };
        passive[enter] = true;

        let mut first = true;
        loop {
            let z = solve_on_support(a, b, &passive);
            if first && z[enter] <= tol {
                // Numerically dependent column: keep it out to avoid cycling.
                passive[enter] = false;
                blocked[enter] = true;
                break;
            }
            if first {
                blocked.iter_mut().for_each(|flag| *flag = false);
            }
            first = false;
            if (0..n).all(|j| !passive[j] || z[j] > 0.0) {
                x = z;
                break;
            }
            let mut alpha = f64::INFINITY;
            for j in 0..n {
                if passive[j] && z[j] <= 0.0 {
                    let denom = x[j] - z[j];
                    if denom > 0.0 {
                        alpha = alpha.min(x[j] / denom);
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            x = &x + (z - &x) * alpha;
            for j in 0..n {
                if passive[j] && x[j] <= tol {
                    passive[j] = false;
                    x[j] = 0.0;
                }
            }
        }
    }
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let residual = (a * &x - b).norm();
    NnlsSolution { x, residual }
}

fn solve_on_support(a: &Matrix, b: &Vector, support: &[bool]) -> Vector {
    let idx: Vec<usize> = (0..support.len()).filter(|&j| support[j]).collect();
    let mut z = Vector::zeros(support.len());
    if idx.is_empty() {
        return z;
    }
    let sub = a.select_columns(&idx);
    let sol = least_squares(&sub, b);
    for (pos, &j) in idx.iter().enumerate() {
        z[j] = sol[pos];
    }
    z
}

/// Minimum-norm least-squares solution of `A x ≈ b` via the SVD.
pub fn least_squares(a: &Matrix, b: &Vector) -> Vector {
    let (m, n) = a.shape();
    if n == 0 {
        return Vector::zeros(0);
    }
    if m == 0 {
        return Vector::zeros(n);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0_f64, |acc, v| acc.max(*v));
    let eps = smax * 1e-13 * (m.max(n) as f64);
    svd.solve(b, eps).unwrap_or_else(|_| Vector::zeros(n))
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(points: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(points >= 1, "quadrature needs at least one point");
    let n = points;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, z);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let nf = n as f64;
    let dp = nf * (z * p1 - p0) / (z * z - 1.0);
    (p1, dp)
}

/// Fixed quadrature rule that integrates over arbitrary intervals.
#[derive(Debug, Clone)]
pub struct Quadrature {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl Quadrature {
    /// Gauss–Legendre rule with the given number of points.
    pub fn gauss(points: usize) -> Self {
        let (nodes, weights) = gauss_legendre(points);
        Self { nodes, weights }
    }

    /// Number of nodes per interval.
    pub fn points(&self) -> usize {
        self.nodes.len()
    }

    /// Nodes and weights mapped to `[a, b]`.
    pub fn on(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes.iter().zip(&self.weights).map(move |(x, w)| (mid + half * x, half * w))
    }

    /// Integral of a scalar function over `[a, b]`.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        self.on(a, b).map(|(t, w)| w * f(t)).sum()
    }

    /// Integral of a vector-valued function over `[a, b]`.
    pub fn integrate_vec<F: FnMut(f64) -> Vector>(&self, a: f64, b: f64, dim: usize, mut f: F) -> Vector {
        let mut acc = Vector::zeros(dim);
        for (t, w) in self.on(a, b) {
            acc += f(t) * w;
        }
        acc
    }
}

/// Sparse matrix in compressed-row form, assembled from triplets.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds the matrix from `(row, col, value)` entries; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut entries: Vec<(usize, usize, f64)>) -> Self {
        entries.retain(|e| e.2 != 0.0);
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            assert!(r < rows && c < cols, "sparse entry out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self { rows, cols, row_ptr, col_idx, values }
    }

    /// Number of rows.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of columns.
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Computes `A x`.
    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows];
        for (r, out) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for idx in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[idx] * x[self.col_idx[idx]];
            }
            *out = acc;
        }
        y
    }

    /// Computes `Aᵀ y`.
    pub fn mul_transpose(&self, y: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.cols];
        for (r, yr) in y.iter().enumerate() {
            if *yr == 0.0 {
                continue;
            }
            for idx in self.row_ptr[r]..self.row_ptr[r + 1] {
                x[self.col_idx[idx]] += self.values[idx] * yr;
            }
        }
        x
    }
}

/// Sign restriction on a least-squares variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarSign {
    /// Unrestricted.
    Free,
    /// Restricted to `x ≥ 0`.
    Nonnegative,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate-gradient least squares restricted to the columns flagged in `active`.
fn cgls(a: &SparseMatrix, b: &[f64], active: &[bool], start: &[f64], max_iters: usize) -> Vec<f64> {
    let mask = |v: &mut Vec<f64>| {
        for (vi, on) in v.iter_mut().zip(active) {
            if !on {
                *vi = 0.0;
            }
        }
    };
    let mut x = start.to_vec();
    mask(&mut x);
    let ax = a.mul(&x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut s = a.mul_transpose(&r);
    mask(&mut s);
    let mut p = s.clone();
    let mut gamma = dot(&s, &s);
    let atb = {
        let mut v = a.mul_transpose(b);
        mask(&mut v);
        dot(&v, &v).sqrt()
    };
    let stop = 1e-15 * (1.0 + atb);
    for _ in 0..max_iters {
        if gamma.sqrt() <= stop {
            break;
        }
        let q = a.mul(&p);
        let qq = dot(&q, &q);
        if qq <= 0.0 {
            break;
        }
        let alpha = gamma / qq;
        for (xi, pi) in x.iter_mut().zip(&p) {
            *xi += alpha * pi;
        }
        for (ri, qi) in r.iter_mut().zip(&q) {
            *ri -= alpha * qi;
        }
        s = a.mul_transpose(&r);
        mask(&mut s);
        let gamma_new = dot(&s, &s);
        let beta = gamma_new / gamma;
        gamma = gamma_new;
        for (pi, si) in p.iter_mut().zip(&s) {
            *pi = si + beta * *pi;
        }
    }
    x
}

/// Least squares `min ‖A x − b‖` with per-variable sign restrictions.
///
/// Variables flagged nonnegative are handled by an outer active-set loop that
/// pins violating variables at zero and releases pinned variables whose
/// gradient points into the feasible side; each inner problem is solved by
/// conjugate-gradient least squares on the remaining columns.
pub fn sign_constrained_least_squares(a: &SparseMatrix, b: &[f64], signs: &[VarSign], max_outer: usize) -> Vec<f64> {
    let n = a.cols();
    assert_eq!(signs.len(), n);
    let inner_iters = (4 * n).max(200);
    let mut active = vec![true; n];
    let mut x = vec![0.0; n];
    for _ in 0..max_outer.max(1) {
        x = cgls(a, b, &active, &x, inner_iters);
        let negatives: Vec<usize> = (0..n)
            .filter(|&j| active[j] && signs[j] == VarSign::Nonnegative && x[j] < 0.0)
            .collect();
        if !negatives.is_empty() {
            for j in negatives {
                active[j] = false;
                x[j] = 0.0;
            }
            continue;
        }
        let ax = a.mul(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let g = a.mul_transpose(&r);
        let scale = 1e-10 * (1.0 + dot(b, b).sqrt());
        let release = (0..n)
            .filter(|&j| !active[j] && g[j] > scale)
            .max_by(|&i, &j| g[i].partial_cmp(&g[j]).unwrap_or(std::cmp::Ordering::Equal));
        match release {
            Some(j) => active[j] = true,
            None => break,
        }
    }
    for j in 0..n {
        if signs[j] == VarSign::Nonnegative && x[j] < 0.0 {
            x[j] = 0.0;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nnls_recovers_nonnegative_combination() {
        let a = Matrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = Vector::from_vec(vec![2.0, 3.0, 5.0]);
        let sol = nnls(&a, &b);
        assert!((sol.x[0] - 2.0).abs() < 1e-12);
        assert!((sol.x[1] - 3.0).abs() < 1e-12);
        assert!(sol.residual < 1e-12);
    }

    #[test]
    fn nnls_clips_negative_direction() {
        let a = Matrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let b = Vector::from_vec(vec![-1.0, 2.0]);
        let sol = nnls(&a, &b);
        assert_eq!(sol.x[0], 0.0);
        assert!((sol.residual - 5.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn nnls_handles_dependent_columns() {
        let a = Matrix::from_row_slice(2, 3, &[1.0, 2.0, -1.0, 0.0, 0.0, 0.0]);
        let b = Vector::from_vec(vec![4.0, 0.0]);
        let sol = nnls(&a, &b);
        assert!(sol.residual < 1e-10);
        assert!(sol.x.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let q = Quadrature::gauss(4);
        let exact = |p: i32| (2.0_f64.powi(p + 1) - 0.0) / (p as f64 + 1.0);
        for p in 0..8 {
            let val = q.integrate(0.0, 2.0, |t| t.powi(p));
            assert!((val - exact(p)).abs() < 1e-12 * exact(p).max(1.0), "degree {p}");
        }
        let w: f64 = gauss_legendre(8).1.iter().sum();
        assert!((w - 2.0).abs() < 1e-14);
    }

    #[test]
    fn sparse_least_squares_respects_signs() {
        // minimize (x0 + 1)^2 + (x1 - 2)^2 with x0 >= 0, x1 free.
        let a = SparseMatrix::from_triplets(2, 2, vec![(0, 0, 1.0), (1, 1, 1.0)]);
        let x = sign_constrained_least_squares(&a, &[-1.0, 2.0], &[VarSign::Nonnegative, VarSign::Free], 20);
        assert_eq!(x[0], 0.0);
        assert!((x[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn sparse_transpose_product_matches_dense() {
        let a = SparseMatrix::from_triplets(2, 3, vec![(0, 0, 1.0), (0, 2, 2.0), (1, 1, -3.0), (1, 1, 1.0)]);
        assert_eq!(a.mul(&[1.0, 1.0, 1.0]), vec![3.0, -2.0]);
        assert_eq!(a.mul_transpose(&[1.0, 2.0]), vec![1.0, -4.0, 2.0]);
    }
}

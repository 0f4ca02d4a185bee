//! Deterministic dense linear algebra and statistics primitives.
//!
//! Everything here is 64-bit floating point with a fixed left-to-right
//! summation order and no fused operations, so that two runs over the same
//! inputs produce bit-identical results. That property is load-bearing: the
//! prefill-equivalence tests upstream assert equality with tolerance zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::persona::Direction;

// ---------------------------------------------------------------------------
// Vector
// ---------------------------------------------------------------------------

/// Dense real vector. The dimension is implicit in the data length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Vector { data }
    }

    pub fn zeros(dim: usize) -> Self {
        Vector { data: vec![0.0; dim] }
    }

    pub fn ones(dim: usize) -> Self {
        Vector { data: vec![1.0; dim] }
    }

    /// Basis vector with a single 1.0 at `index`.
    pub fn basis(dim: usize, index: usize) -> Self {
        let mut v = Self::zeros(dim);
        v.data[index] = 1.0;
        v
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize) -> f64 {
        self.data[i]
    }

    pub fn set(&mut self, i: usize, value: f64) {
        self.data[i] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Euclidean norm, accumulated left to right.
    pub fn norm(&self) -> f64 {
        let mut acc = 0.0;
        for &x in &self.data {
            acc += x * x;
        }
        acc.sqrt()
    }

    /// In-place `self += c * other`. Dims must already match.
    pub fn axpy(&mut self, c: f64, other: &Vector) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += c * b;
        }
    }

    /// In-place elementwise add.
    pub fn add_assign(&mut self, other: &Vector) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scaled(&self, c: f64) -> Vector {
        Vector::new(self.data.iter().map(|&x| c * x).collect())
    }

    /// Returns `self / ‖self‖`, or an error for (near-)zero norm.
    pub fn normalized(&self) -> Result<Vector> {
        let n = self.norm();
        if n <= 0.0 || !n.is_finite() {
            return Err(Error::ZeroNorm);
        }
        Ok(self.scaled(1.0 / n))
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Vector::new(data)
    }
}

// ---------------------------------------------------------------------------
// Mat
// ---------------------------------------------------------------------------

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in &rows {
            if row.len() != c {
                return Err(Error::DimMismatch { left: row.len(), right: c });
            }
            data.extend_from_slice(row);
        }
        Ok(Mat { rows: r, cols: c, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `y = M x`, each row reduced left to right.
    pub fn matvec(&self, x: &Vector) -> Vector {
        debug_assert_eq!(self.cols, x.dim());
        let xs = x.as_slice();
        let mut out = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for (m, v) in row.iter().zip(xs.iter()) {
                acc += m * v;
            }
            out.push(acc);
        }
        Vector::new(out)
    }

    /// `y = Mᵀ x`, column reductions walked top to bottom.
    pub fn tmatvec(&self, x: &Vector) -> Vector {
        debug_assert_eq!(self.rows, x.dim());
        let xs = x.as_slice();
        let mut out = Vec::with_capacity(self.cols);
        for c in 0..self.cols {
            let mut acc = 0.0;
            for r in 0..self.rows {
                acc += self.data[r * self.cols + c] * xs[r];
            }
            out.push(acc);
        }
        Vector::new(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        let mut acc = 0.0;
        for &x in &self.data {
            acc += x * x;
        }
        acc.sqrt()
    }
}

// ---------------------------------------------------------------------------
// Scalar operations
// ---------------------------------------------------------------------------

/// Inner product with exact left-to-right summation order.
pub fn dot(a: &Vector, b: &Vector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch { left: a.dim(), right: b.dim() });
    }
    let mut acc = 0.0;
    for (x, y) in a.as_slice().iter().zip(b.as_slice().iter()) {
        acc += x * y;
    }
    Ok(acc)
}

/// Signed salience of feature `d` in state `v`: the projection of `v` onto
/// the unit direction.
pub fn project(v: &Vector, d: &Direction) -> Result<f64> {
    dot(v, d.unit())
}

/// Cosine similarity. Errors on zero-norm input.
pub fn cosine(a: &Vector, b: &Vector) -> Result<f64> {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(dot(a, b)? / (na * nb))
}

/// Numerically stable softmax (max subtraction). Always defined on finite
/// input; the output is positive and sums to 1.
pub fn softmax(v: &Vector) -> Vector {
    let xs = v.as_slice();
    if xs.is_empty() {
        return Vector::zeros(0);
    }
    let mut max = f64::NEG_INFINITY;
    for &x in xs {
        if x > max {
            max = x;
        }
    }
    let mut exps = Vec::with_capacity(xs.len());
    let mut sum = 0.0;
    for &x in xs {
        let e = (x - max).exp();
        exps.push(e);
        sum += e;
    }
    for e in &mut exps {
        *e /= sum;
    }
    Vector::new(exps)
}

/// RMS normalization: `vᵢ · gainᵢ / sqrt(mean(v²) + ε)` with ε = 1e-6.
pub fn rms_norm(v: &Vector, gain: &Vector) -> Result<Vector> {
    if v.dim() != gain.dim() {
        return Err(Error::DimMismatch { left: v.dim(), right: gain.dim() });
    }
    const EPS: f64 = 1e-6;
    let xs = v.as_slice();
    let mut acc = 0.0;
    for &x in xs {
        acc += x * x;
    }
    let denom = (acc / xs.len() as f64 + EPS).sqrt();
    let out = xs
        .iter()
        .zip(gain.as_slice().iter())
        .map(|(&x, &g)| x * g / denom)
        .collect();
    Ok(Vector::new(out))
}

/// Deterministic argmax; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &x) in xs.iter().enumerate() {
        if x > best_val {
            best_val = x;
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

/// Result of a principal component analysis.
///
/// Components are orthonormal, in descending eigenvalue order, and
/// sign-fixed so the largest-magnitude entry of each component is positive.
/// `variance_fraction[i]` is λᵢ divided by the total variance (the trace of
/// the covariance), so fractions over the top-k components sum to at most 1.
#[derive(Debug, Clone)]
pub struct PcaResult {
    pub components: Vec<Vector>,
    pub eigenvalues: Vec<f64>,
    pub variance_fraction: Vec<f64>,
    pub mean: Vector,
}

impl PcaResult {
    /// Smallest k such that the cumulative variance fraction reaches `target`.
    /// Returns `components.len()` if the stored components never reach it.
    pub fn k_for_cumulative(&self, target: f64) -> usize {
        let mut cum = 0.0;
        for (i, f) in self.variance_fraction.iter().enumerate() {
            cum += f;
            if cum >= target {
                return i + 1;
            }
        }
        self.variance_fraction.len()
    }
}

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_TOL: f64 = 1e-10;

/// PCA of `points` via mean-centered sample covariance and cyclic Jacobi
/// rotations, returning the top `k` components.
pub fn pca(points: &[Vector], k: usize) -> Result<PcaResult> {
    if points.len() < 2 {
        return Err(Error::TooFewPoints { need: 2, got: points.len() });
    }
    let dim = points[0].dim();
    for p in points {
        if p.dim() != dim {
            return Err(Error::DimMismatch { left: p.dim(), right: dim });
        }
    }
    if k > dim {
        return Err(Error::InvalidArg(format!("k = {k} exceeds dimension {dim}")));
    }

    let n = points.len();
    let mut mean = Vector::zeros(dim);
    for p in points {
        mean.add_assign(p);
    }
    for m in mean.as_mut_slice() {
        *m /= n as f64;
    }

    // Sample covariance (divides by n − 1).
    let mut cov = Mat::zeros(dim, dim);
    for p in points {
        let mut centered = p.clone();
        centered.axpy(-1.0, &mean);
        let c = centered.as_slice();
        for i in 0..dim {
            for j in 0..dim {
                let v = cov.get(i, j) + c[i] * c[j];
                cov.set(i, j, v);
            }
        }
    }
    let scale = 1.0 / (n as f64 - 1.0);
    for v in cov.data_mut() {
        *v *= scale;
    }

    let (eigenvalues, eigenvectors) = jacobi_eigen(&cov)?;

    // Total variance from all eigenvalues, clamped at zero against roundoff.
    let clamped: Vec<f64> = eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    let mut total = 0.0;
    for &l in &clamped {
        total += l;
    }

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| clamped[b].partial_cmp(&clamped[a]).unwrap().then(a.cmp(&b)));

    let mut components = Vec::with_capacity(k);
    let mut eigvals = Vec::with_capacity(k);
    let mut fractions = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let mut comp: Vec<f64> = (0..dim).map(|r| eigenvectors.get(r, idx)).collect();
        fix_sign(&mut comp);
        components.push(Vector::new(comp));
        eigvals.push(clamped[idx]);
        fractions.push(if total > 0.0 { clamped[idx] / total } else { 0.0 });
    }

    Ok(PcaResult { components, eigenvalues: eigvals, variance_fraction: fractions, mean })
}

/// Sign convention: the largest-magnitude entry of the component is positive.
/// Ties resolve to the first such entry.
fn fix_sign(comp: &mut [f64]) {
    let mut idx = 0;
    let mut best = 0.0;
    for (i, &x) in comp.iter().enumerate() {
        if x.abs() > best {
            best = x.abs();
            idx = i;
        }
    }
    if comp[idx] < 0.0 {
        for x in comp.iter_mut() {
            *x = -*x;
        }
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvector matrix with eigenvectors in columns).
pub fn jacobi_eigen(m: &Mat) -> Result<(Vec<f64>, Mat)> {
    if m.rows != m.cols {
        return Err(Error::DimMismatch { left: m.rows, right: m.cols });
    }
    let n = m.rows;
    let mut a = m.clone();
    let mut v = Mat::identity(n);

    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a.get(p, q) * a.get(p, q);
            }
        }
        if (2.0 * off).sqrt() <= JACOBI_TOL {
            let eigenvalues = (0..n).map(|i| a.get(i, i)).collect();
            return Ok((eigenvalues, v));
        }

        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                // Rotate rows/columns p and q of A.
                for i in 0..n {
                    let aip = a.get(i, p);
                    let aiq = a.get(i, q);
                    a.set(i, p, c * aip - s * aiq);
                    a.set(i, q, s * aip + c * aiq);
                }
                for i in 0..n {
                    let api = a.get(p, i);
                    let aqi = a.get(q, i);
                    a.set(p, i, c * api - s * aqi);
                    a.set(q, i, s * api + c * aqi);
                }
                // Accumulate the rotation into the eigenvector matrix.
                for i in 0..n {
                    let vip = v.get(i, p);
                    let viq = v.get(i, q);
                    v.set(i, p, c * vip - s * viq);
                    v.set(i, q, s * vip + c * viq);
                }
            }
        }
    }

    Err(Error::NoConvergence { sweeps: JACOBI_MAX_SWEEPS })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn direction(data: Vec<f64>) -> Direction {
        Direction::new("test", 0, Vector::new(data)).unwrap()
    }

    // Independent scalar-loop oracle for inner products, kept separate from
    // the implementation on purpose.
    fn dot_oracle(a: &[f64], b: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..a.len() {
            acc += a[i] * b[i];
        }
        acc
    }

    #[test]
    fn dot_orthogonal_and_self() {
        let a = Vector::new(vec![1.0, 0.0]);
        let b = Vector::new(vec![0.0, 1.0]);
        assert_eq!(dot(&a, &b).unwrap(), 0.0);
        let c = Vector::new(vec![2.0, 3.0]);
        assert_eq!(dot(&c, &c).unwrap(), 13.0);
    }

    #[test]
    fn dot_matches_scalar_loop_oracle() {
        let a: Vec<f64> = vec![0.3, -1.2, 4.5, 0.01, -7.9, 2.2, 0.0, 5.5];
        let b: Vec<f64> = vec![1.1, 0.4, -0.9, 3.3, 0.5, -2.0, 8.8, -0.1];
        let expected = dot_oracle(&a, &b);
        assert_eq!(dot(&Vector::new(a), &Vector::new(b)).unwrap(), expected);
    }

    #[test]
    fn dot_dim_mismatch() {
        let a = Vector::zeros(3);
        let b = Vector::zeros(4);
        assert!(matches!(dot(&a, &b), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn project_unit_self_and_zero() {
        let d = direction(vec![0.0, 3.0, 4.0]);
        assert!((project(d.unit(), &d).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(project(&Vector::zeros(3), &d).unwrap(), 0.0);
    }

    #[test]
    fn project_gram_schmidt_component() {
        // v = 3·d + w with w ⊥ d constructed by Gram–Schmidt.
        let d = direction(vec![1.0, 2.0, -1.0, 0.5]);
        let raw = Vector::new(vec![0.7, -0.3, 1.9, 2.4]);
        let along = dot(&raw, d.unit()).unwrap();
        let mut w = raw.clone();
        w.axpy(-along, d.unit());
        let mut v = d.unit().scaled(3.0);
        v.add_assign(&w);
        assert!((project(&v, &d).unwrap() - 3.0).abs() < 1e-10);
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let out = softmax(&Vector::new(vec![5.5, 5.5, 5.5]));
        for i in 0..3 {
            assert!((out.get(i) - 1.0 / 3.0).abs() < 1e-15);
        }
        let out = softmax(&Vector::new(vec![1000.0, 0.0]));
        assert!(out.get(0) > 1.0 - 1e-12);
        assert!(out.get(1) < 1e-12);
        assert!(out.as_slice().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn softmax_closed_form_log_inputs() {
        // softmax([ln 1, ln 2, ln 3]) = [1/6, 2/6, 3/6].
        let out = softmax(&Vector::new(vec![1f64.ln(), 2f64.ln(), 3f64.ln()]));
        assert!((out.get(0) - 1.0 / 6.0).abs() < 1e-14);
        assert!((out.get(1) - 2.0 / 6.0).abs() < 1e-14);
        assert!((out.get(2) - 3.0 / 6.0).abs() < 1e-14);
    }

    #[test]
    fn rms_norm_zero_and_unit() {
        let z = rms_norm(&Vector::zeros(4), &Vector::ones(4)).unwrap();
        assert_eq!(z.as_slice(), &[0.0; 4]);
        let u = rms_norm(&Vector::ones(4), &Vector::ones(4)).unwrap();
        for i in 0..4 {
            assert!((u.get(i) - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn rms_norm_matches_scalar_oracle() {
        let xs = vec![0.4, -2.2, 3.1, 0.0, 1.5, -0.7, 2.9, -1.1];
        let gain = vec![1.0, 0.5, 2.0, 1.0, -1.0, 1.0, 0.25, 3.0];
        // Scalar oracle, written out longhand.
        let mut ss = 0.0;
        for &x in &xs {
            ss += x * x;
        }
        let denom = (ss / 8.0 + 1e-6).sqrt();
        let expected: Vec<f64> = xs.iter().zip(gain.iter()).map(|(&x, &g)| x * g / denom).collect();
        let got = rms_norm(&Vector::new(xs), &Vector::new(gain)).unwrap();
        assert_eq!(got.as_slice(), expected.as_slice());
    }

    #[test]
    fn cosine_basic() {
        let v = Vector::new(vec![0.3, -1.0, 2.0]);
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine(&v, &v.scaled(-2.0)).unwrap() + 1.0).abs() < 1e-12);
        let a = Vector::new(vec![1.0, 0.0]);
        let b = Vector::new(vec![1.0, 1.0]);
        assert!((cosine(&a, &b).unwrap() - 2f64.sqrt() / 2.0).abs() < 1e-12);
        assert!(matches!(cosine(&a, &Vector::zeros(2)), Err(Error::ZeroNorm)));
    }

    #[test]
    fn pca_line_through_origin() {
        let u = Vector::new(vec![3.0, 4.0]).normalized().unwrap();
        let points: Vec<Vector> = [-2.0, -1.0, 0.5, 1.5, 3.0]
            .iter()
            .map(|&t| u.scaled(t))
            .collect();
        let res = pca(&points, 2).unwrap();
        let c = cosine(&res.components[0], &u).unwrap();
        assert!(c.abs() > 1.0 - 1e-10);
        assert!((res.variance_fraction[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pca_hand_covariance_two_dim() {
        // Cloud {(1,0), (−1,0), (0,½), (0,−½)}: covariance diag(2/3, 1/6),
        // fractions 0.8 / 0.2, PC1 = (1, 0).
        let points = vec![
            Vector::new(vec![1.0, 0.0]),
            Vector::new(vec![-1.0, 0.0]),
            Vector::new(vec![0.0, 0.5]),
            Vector::new(vec![0.0, -0.5]),
        ];
        let res = pca(&points, 2).unwrap();
        assert!((res.variance_fraction[0] - 0.8).abs() < 1e-12);
        assert!((res.variance_fraction[1] - 0.2).abs() < 1e-12);
        assert!((res.components[0].get(0).abs() - 1.0).abs() < 1e-10);
        assert!(res.components[0].get(0) > 0.0, "sign convention");
    }

    #[test]
    fn pca_too_few_points() {
        let points = vec![Vector::zeros(3)];
        assert!(matches!(pca(&points, 1), Err(Error::TooFewPoints { .. })));
    }

    #[test]
    fn pca_components_orthonormal_and_ordered() {
        // Deterministic pseudo-random cloud.
        let mut points = Vec::new();
        let mut x: u64 = 0x9E3779B97F4A7C15;
        let mut next = || {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for _ in 0..40 {
            points.push(Vector::new((0..6).map(|_| next()).collect()));
        }
        let res = pca(&points, 6).unwrap();
        for i in 0..6 {
            assert!((res.components[i].norm() - 1.0).abs() < 1e-8);
            for j in (i + 1)..6 {
                let d = dot(&res.components[i], &res.components[j]).unwrap();
                assert!(d.abs() < 1e-8, "components {i},{j} not orthogonal: {d}");
            }
        }
        for w in res.eigenvalues.windows(2) {
            assert!(w[0] >= w[1] - 1e-12, "eigenvalues not descending");
        }

        // Covariance reconstruction from all components matches the sample
        // covariance to 1e-8 relative Frobenius error.
        let n = points.len();
        let dim = 6;
        let mut mean = Vector::zeros(dim);
        for p in &points {
            mean.add_assign(p);
        }
        for m in mean.as_mut_slice() {
            *m /= n as f64;
        }
        let mut cov = Mat::zeros(dim, dim);
        for p in &points {
            let mut c = p.clone();
            c.axpy(-1.0, &mean);
            for i in 0..dim {
                for j in 0..dim {
                    cov.set(i, j, cov.get(i, j) + c.get(i) * c.get(j) / (n as f64 - 1.0));
                }
            }
        }
        let mut recon = Mat::zeros(dim, dim);
        for (comp, &lambda) in res.components.iter().zip(res.eigenvalues.iter()) {
            for i in 0..dim {
                for j in 0..dim {
                    recon.set(i, j, recon.get(i, j) + lambda * comp.get(i) * comp.get(j));
                }
            }
        }
        let mut diff = 0.0;
        for i in 0..dim {
            for j in 0..dim {
                let d = recon.get(i, j) - cov.get(i, j);
                diff += d * d;
            }
        }
        assert!(diff.sqrt() / cov.frobenius_norm() < 1e-8);
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[-1.0]), 0);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_permutes(xs in proptest::collection::vec(-50.0f64..50.0, 1..12), shift in 0usize..12) {
            let out = softmax(&Vector::new(xs.clone()));
            let sum: f64 = out.as_slice().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);

            // Permutation equivariance: rotating the input rotates the output.
            let k = shift % xs.len();
            let mut rotated = xs.clone();
            rotated.rotate_left(k);
            let out_rot = softmax(&Vector::new(rotated));
            for i in 0..xs.len() {
                prop_assert!((out_rot.get(i) - out.get((i + k) % xs.len())).abs() < 1e-12);
            }
        }

        #[test]
        fn project_is_linear_along_direction(
            base in proptest::collection::vec(-10.0f64..10.0, 5),
            dir in proptest::collection::vec(-10.0f64..10.0, 5),
            c in -100.0f64..100.0,
        ) {
            let v = Vector::new(base);
            let d_raw = Vector::new(dir);
            prop_assume!(d_raw.norm() > 1e-6);
            let d = Direction::new("p", 0, d_raw).unwrap();
            let p0 = project(&v, &d).unwrap();
            let mut shifted = v.clone();
            shifted.axpy(c, d.unit());
            let p1 = project(&shifted, &d).unwrap();
            prop_assert!((p1 - (p0 + c)).abs() < 1e-10 * (1.0 + p0.abs() + c.abs()));
        }
    }
}

//! Symmetric positive-definite tensors and the conductivity/metric
//! correspondence g = (det sigma)^(1/(n-2)) sigma^(-1).

use nalgebra::{DMatrix, DVector};

use crate::error::MetricError;

/// Symmetric n x n tensor. Only the upper triangle is stored, so symmetry
/// holds exactly by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SymTensor {
    n: usize,
    /// Row-major upper triangle: (0,0), (0,1), ..., (0,n-1), (1,1), ...
    upper: Vec<f64>,
}

impl SymTensor {
    pub fn zeros(n: usize) -> Self {
        Self { n, upper: vec![0.0; n * (n + 1) / 2] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n);
        for i in 0..n {
            t.set(i, i, 1.0);
        }
        t
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut t = Self::zeros(diag.len());
        for (i, &d) in diag.iter().enumerate() {
            t.set(i, i, d);
        }
        t
    }

    /// Builds from a row-major upper triangle, length n(n+1)/2.
    pub fn from_upper(n: usize, upper: Vec<f64>) -> Self {
        assert_eq!(upper.len(), n * (n + 1) / 2, "upper triangle length mismatch");
        Self { n, upper }
    }

    /// Builds from a full matrix, averaging the off-diagonal pairs.
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        assert_eq!(m.nrows(), m.ncols());
        let n = m.nrows();
        let mut t = Self::zeros(n);
        for i in 0..n {
            for j in i..n {
                t.set(i, j, 0.5 * (m[(i, j)] + m[(j, i)]));
            }
        }
        t
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn upper_triangle(&self) -> &[f64] {
        &self.upper
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        let (r, c) = if i <= j { (i, j) } else { (j, i) };
        // offset of row r in a row-major upper triangle
        r * self.n - r * (r + 1) / 2 + c
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.upper[self.idx(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        let k = self.idx(i, j);
        self.upper[k] = value;
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let n = self.n;
        DMatrix::from_fn(n, n, |i, j| self.get(i, j))
    }

    /// Quadratic form v^T g v.
    pub fn quadratic(&self, v: &DVector<f64>) -> f64 {
        self.bilinear(v, v)
    }

    /// Bilinear form a^T g b.
    pub fn bilinear(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                acc += a[i] * self.get(i, j) * b[j];
            }
        }
        acc
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self
            .to_matrix()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }

    pub fn is_spd(&self) -> bool {
        self.to_matrix().cholesky().is_some()
    }

    /// True when the spectrum lies in [1/lambda, lambda].
    pub fn spectrum_within(&self, lambda: f64) -> bool {
        let ev = self.eigenvalues();
        let lo = ev.first().copied().unwrap_or(0.0);
        let hi = ev.last().copied().unwrap_or(0.0);
        lo >= 1.0 / lambda - 1e-12 && hi <= lambda + 1e-12
    }

    pub fn determinant(&self) -> f64 {
        self.to_matrix().determinant()
    }

    pub fn try_inverse(&self) -> Option<SymTensor> {
        self.to_matrix().try_inverse().map(|m| Self::from_matrix(&m))
    }

    pub fn scale(&self, s: f64) -> SymTensor {
        Self { n: self.n, upper: self.upper.iter().map(|v| v * s).collect() }
    }

    /// Congruence transform Q g Q^T for an orthogonal Q (rotation of the
    /// quadratic form into the frame whose axes are the rows of Q^T).
    pub fn rotate(&self, q: &DMatrix<f64>) -> SymTensor {
        let m = q * self.to_matrix() * q.transpose();
        Self::from_matrix(&m)
    }

    pub fn max_abs_diff(&self, other: &SymTensor) -> f64 {
        assert_eq!(self.n, other.n);
        self.upper
            .iter()
            .zip(&other.upper)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Metric associated to a conductivity: g = (det sigma)^(1/(n-2)) sigma^(-1).
pub fn g_from_sigma(sigma: &SymTensor) -> Result<SymTensor, MetricError> {
    let n = sigma.dim();
    if n < 3 {
        return Err(MetricError::DimensionTooSmall { n });
    }
    if !sigma.is_spd() {
        return Err(MetricError::NotSpd);
    }
    let det = sigma.determinant();
    let inv = sigma.try_inverse().ok_or(MetricError::NotSpd)?;
    Ok(inv.scale(det.powf(1.0 / (n as f64 - 2.0))))
}

/// Inverse of [`g_from_sigma`]: sigma = (det g)^(1/2) g^(-1), valid because
/// det g = (det sigma)^(2/(n-2)).
pub fn sigma_from_g(g: &SymTensor) -> Result<SymTensor, MetricError> {
    let n = g.dim();
    if n < 3 {
        return Err(MetricError::DimensionTooSmall { n });
    }
    if !g.is_spd() {
        return Err(MetricError::NotSpd);
    }
    let det = g.determinant();
    let inv = g.try_inverse().ok_or(MetricError::NotSpd)?;
    Ok(inv.scale(det.sqrt()))
}

/// Random SPD tensor with eigenvalues in [0.1, 10]; shared by tests in
/// several modules.
#[cfg(test)]
pub(crate) fn random_spd(n: usize, seed: u64) -> SymTensor {
    use rand::prelude::*;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let q = a.qr().q();
    let diag: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..10.0)).collect();
    let d = DMatrix::from_diagonal(&DVector::from_vec(diag));
    SymTensor::from_matrix(&(&q * d * q.transpose()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn identity_maps_to_identity() {
        let g = g_from_sigma(&SymTensor::identity(3)).unwrap();
        assert_eq!(g.max_abs_diff(&SymTensor::identity(3)), 0.0);
    }

    #[test]
    fn diagonal_example() {
        // det sigma = 36, sigma^{-1} = diag(1, 1/4, 1/9)
        let sigma = SymTensor::from_diagonal(&[1.0, 4.0, 9.0]);
        let g = g_from_sigma(&sigma).unwrap();
        let expected = SymTensor::from_diagonal(&[36.0, 9.0, 4.0]);
        assert!(g.max_abs_diff(&expected) < 1e-12);

        // det g = 1296, sqrt = 36, times g^{-1}
        let back = sigma_from_g(&expected).unwrap();
        assert!(back.max_abs_diff(&sigma) < 1e-12);
    }

    #[test]
    fn dimension_two_rejected() {
        let sigma = SymTensor::identity(2);
        assert!(matches!(
            g_from_sigma(&sigma),
            Err(MetricError::DimensionTooSmall { n: 2 })
        ));
        assert!(matches!(
            sigma_from_g(&sigma),
            Err(MetricError::DimensionTooSmall { n: 2 })
        ));
    }

    #[test]
    fn non_spd_rejected() {
        let sigma = SymTensor::from_diagonal(&[1.0, -1.0, 1.0]);
        assert!(matches!(g_from_sigma(&sigma), Err(MetricError::NotSpd)));
    }

    #[test]
    fn quadratic_form_matches_matrix() {
        let mut t = SymTensor::identity(3);
        t.set(0, 1, 0.5);
        t.set(1, 2, -0.25);
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let m = t.to_matrix();
        assert_abs_diff_eq!(t.quadratic(&v), (v.transpose() * m * &v)[(0, 0)], epsilon = 1e-14);
    }

    proptest! {
        #[test]
        fn round_trip_sigma_g_sigma(seed in 0u64..500, n in 3usize..6) {
            let sigma = random_spd(n, seed);
            let g = g_from_sigma(&sigma).unwrap();
            let back = sigma_from_g(&g).unwrap();
            let scale = sigma.upper_triangle().iter().fold(1.0f64, |m, v| m.max(v.abs()));
            prop_assert!(back.max_abs_diff(&sigma) < 1e-12 * scale.max(1.0) * 10.0);
            let g2 = g_from_sigma(&back).unwrap();
            let gscale = g.upper_triangle().iter().fold(1.0f64, |m, v| m.max(v.abs()));
            prop_assert!(g2.max_abs_diff(&g) < 1e-12 * gscale.max(1.0) * 10.0);
        }
    }
}

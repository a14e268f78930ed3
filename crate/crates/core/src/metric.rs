//! Tangential restrictions of a metric to tangent planes and the exact
//! reconstruction of the full metric from its restrictions to three
//! admissibly tilted planes.

use nalgebra::{DMatrix, DVector};

use crate::error::MetricError;
use crate::geometry::{GammaBranch, GammaTriple};
use crate::tensor::SymTensor;
use crate::{EPS_DET, TAU_CONSIST};

/// Restriction of a symmetric tensor to a plane: the (n-1) x (n-1) matrix
/// of bilinear evaluations on an orthonormal basis of the plane.
#[derive(Debug, Clone)]
pub struct TangentialForm {
    pub basis: Vec<DVector<f64>>,
    pub matrix: DMatrix<f64>,
}

impl TangentialForm {
    /// Dimension of the ambient space.
    pub fn ambient_dim(&self) -> usize {
        self.basis[0].len()
    }

    fn coords_of(&self, d: &DVector<f64>) -> Result<DVector<f64>, MetricError> {
        let k = self.basis.len();
        let mut coords = DVector::zeros(k);
        let mut residual = d.clone();
        for (i, b) in self.basis.iter().enumerate() {
            coords[i] = b.dot(d);
            residual -= b * coords[i];
        }
        if residual.norm() > 1e-9 * d.norm().max(1.0) {
            return Err(MetricError::DirectionOutsidePlane { residual: residual.norm() });
        }
        Ok(coords)
    }

    /// g(d, d) for an ambient direction d lying in the plane.
    pub fn evaluate(&self, d: &DVector<f64>) -> Result<f64, MetricError> {
        self.bilinear(d, d)
    }

    /// g(a, b) for ambient directions a, b lying in the plane.
    pub fn bilinear(&self, a: &DVector<f64>, b: &DVector<f64>) -> Result<f64, MetricError> {
        let ca = self.coords_of(a)?;
        let cb = self.coords_of(b)?;
        Ok((ca.transpose() * &self.matrix * cb)[(0, 0)])
    }

    /// Largest entrywise deviation from another form on the same basis.
    pub fn max_abs_diff(&self, other: &TangentialForm) -> f64 {
        (&self.matrix - &other.matrix).abs().max()
    }
}

/// Restricts g to the plane spanned by an orthonormal basis.
pub fn tangential_form(
    g: &SymTensor,
    basis: &[DVector<f64>],
) -> Result<TangentialForm, MetricError> {
    for (i, a) in basis.iter().enumerate() {
        for (j, b) in basis.iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            let dev = (a.dot(b) - target).abs();
            if dev > 1e-10 {
                return Err(MetricError::NonOrthonormalBasis { deviation: dev });
            }
        }
    }
    let k = basis.len();
    let matrix = DMatrix::from_fn(k, k, |i, j| g.bilinear(&basis[i], &basis[j]));
    Ok(TangentialForm { basis: basis.to_vec(), matrix })
}

fn axis(n: usize, i: usize) -> DVector<f64> {
    let mut e = DVector::zeros(n);
    e[i] = 1.0;
    e
}

/// Orthonormal bases (in canonical coordinates) of the three tangent
/// planes determined by a gamma triple:
///   plane 1 = span(e_1, ..., e_{n-1}),
///   plane 2 = span(e_1, ..., e_{n-2}, (e_{n-1} + g1 e_n)/sqrt(1+g1^2)),
///   plane 3 = span(e_1, ..., e_{n-3}, e_{n-2} + g3 e_n, e_{n-1} + g2 e_n),
/// the last Gram-Schmidt-orthonormalized (its natural spanning vectors are
/// not orthogonal when g2 g3 != 0).
pub fn canonical_plane_bases(
    gammas: &GammaTriple,
    n: usize,
) -> [Vec<DVector<f64>>; 3] {
    let (g1, g2, g3) = (gammas.gamma1, gammas.gamma2, gammas.gamma3);

    let pi1: Vec<DVector<f64>> = (0..n - 1).map(|i| axis(n, i)).collect();

    let mut pi2: Vec<DVector<f64>> = (0..n - 2).map(|i| axis(n, i)).collect();
    let mut u = axis(n, n - 2) + g1 * axis(n, n - 1);
    u /= u.norm();
    pi2.push(u);

    let mut pi3: Vec<DVector<f64>> = (0..n.saturating_sub(3)).map(|i| axis(n, i)).collect();
    let mut d1 = axis(n, n - 3) + g3 * axis(n, n - 1);
    d1 /= d1.norm();
    let mut d2 = axis(n, n - 2) + g2 * axis(n, n - 1);
    d2 -= &d1 * d1.dot(&d2);
    d2 /= d2.norm();
    pi3.push(d1);
    pi3.push(d2);

    [pi1, pi2, pi3]
}

/// Reconstructs the full symmetric tensor (in canonical coordinates) from
/// its tangential forms on the three canonical planes.
///
/// Steps: the in-plane block g_ij (i, j <= n-1) is read from plane 1; the
/// entries g_{n,i} (i <= n-2) from plane-2 cross terms; three scalar
/// equations in (g_{n-1,n}, g_{n,n}) come from the tilted diagonal entries,
/// forming the system A G = b with A = (2, g1; 0, g3^2; 2 g2, g2^2). The
/// 2x2 block matching the gamma branch must be well conditioned; when the
/// full 3x2 system is consistent it is solved in least squares to average
/// measurement noise.
pub fn assemble_g(
    forms: &[TangentialForm; 3],
    gammas: &GammaTriple,
) -> Result<SymTensor, MetricError> {
    assemble_g_with_tolerance(forms, gammas, TAU_CONSIST)
}

/// [`assemble_g`] with an explicit consistency tolerance. Exact forms agree
/// to rounding and use the strict default; probe-estimated forms carry
/// O(10%) directional bias and need a proportionally looser gate.
pub fn assemble_g_with_tolerance(
    forms: &[TangentialForm; 3],
    gammas: &GammaTriple,
    tau_consist: f64,
) -> Result<SymTensor, MetricError> {
    let n = forms[0].ambient_dim();
    let (g1, g2, g3) = (gammas.gamma1, gammas.gamma2, gammas.gamma3);
    if GammaTriple::admissible(g1, g2, g3).is_none() {
        return Err(MetricError::InadmissibleGammas { gamma1: g1, gamma2: g2, gamma3: g3 });
    }

    let mut g = SymTensor::zeros(n);

    // In-plane block from plane 1.
    for i in 0..n - 1 {
        for j in i..n - 1 {
            g.set(i, j, forms[0].bilinear(&axis(n, i), &axis(n, j))?);
        }
    }

    // g_{n,i}, i <= n-2, from plane-2 cross terms:
    // g(e_i, u) = (g_{n-1,i} + g1 g_{n,i}) / sqrt(1+g1^2).
    let s1 = (1.0 + g1 * g1).sqrt();
    let u = (axis(n, n - 2) + g1 * axis(n, n - 1)) / s1;
    for i in 0..n - 2 {
        let val = forms[1].bilinear(&axis(n, i), &u)?;
        g.set(n - 1, i, (s1 * val - g.get(n - 2, i)) / g1);
    }

    // Three scalar equations for G = (g_{n-1,n}, g_{n,n}).
    // From plane 2:  (1+g1^2) g(u,u) - g_{n-1,n-1} = g1 (2 g_{n-1,n} + g1 g_{n,n}).
    let quu = forms[1].evaluate(&u)?;
    let b1 = ((1.0 + g1 * g1) * quu - g.get(n - 2, n - 2)) / g1;

    // From plane 3 along (e_{n-2} + g3 e_n)/|.|:
    // (1+g3^2) q - g_{n-2,n-2} - 2 g3 g_{n-2,n} = g3^2 g_{n,n}.
    let mut d1 = axis(n, n - 3) + g3 * axis(n, n - 1);
    d1 /= d1.norm();
    let q1 = forms[2].evaluate(&d1)?;
    let b2 = (1.0 + g3 * g3) * q1 - g.get(n - 3, n - 3) - 2.0 * g3 * g.get(n - 3, n - 1);

    // From plane 3 along (e_{n-1} + g2 e_n)/|.|:
    // (1+g2^2) q - g_{n-1,n-1} = 2 g2 g_{n-1,n} + g2^2 g_{n,n}.
    let mut d2 = axis(n, n - 2) + g2 * axis(n, n - 1);
    d2 /= d2.norm();
    let q2 = forms[2].evaluate(&d2)?;
    let b3 = (1.0 + g2 * g2) * q2 - g.get(n - 2, n - 2);

    let a = DMatrix::from_row_slice(3, 2, &[2.0, g1, 0.0, g3 * g3, 2.0 * g2, g2 * g2]);
    let b = DVector::from_vec(vec![b1, b2, b3]);

    // Branch block must be invertible at tolerance eps_det; prefer the
    // better conditioned block when both qualify.
    let det_a1 = 2.0 * g3 * g3;
    let det_a2 = 2.0 * g2 * (g2 - g1);
    let det = match gammas.branch {
        GammaBranch::A1 if det_a2.abs() > det_a1.abs() && det_a2.abs() >= EPS_DET => det_a2,
        GammaBranch::A1 => det_a1,
        GammaBranch::A2 if det_a1.abs() > det_a2.abs() && det_a1.abs() >= EPS_DET => det_a1,
        GammaBranch::A2 => det_a2,
    };
    if det.abs() < EPS_DET {
        return Err(MetricError::IllConditionedAssembly { det: det.abs() });
    }

    // Least-squares over all three rows; reject if the over-determined
    // system is inconsistent beyond tau_consist (corrupted inputs).
    let svd = a.clone().svd(true, true);
    let sol = svd.solve(&b, EPS_DET).expect("svd solve");
    let residual = (&a * &sol - &b).norm();
    let scale = b.norm().max(sol.norm()).max(1.0);
    if residual > tau_consist * scale {
        return Err(MetricError::InconsistentForms { residual: residual / scale });
    }

    g.set(n - 2, n - 1, sol[0]);
    g.set(n - 1, n - 1, sol[1]);
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn identity_restricts_to_identity() {
        let g = SymTensor::identity(3);
        let basis = vec![axis(3, 0), axis(3, 1)];
        let f = tangential_form(&g, &basis).unwrap();
        assert!((f.matrix.clone() - DMatrix::identity(2, 2)).abs().max() < 1e-15);
    }

    #[test]
    fn diagonal_reads_off_coordinates() {
        let g = SymTensor::from_diagonal(&[2.0, 3.0, 5.0]);
        let f = tangential_form(&g, &[axis(3, 0), axis(3, 1)]).unwrap();
        assert_abs_diff_eq!(f.matrix[(0, 0)], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(f.matrix[(1, 1)], 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(f.matrix[(0, 1)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn tilted_direction_averages_entries() {
        let g = SymTensor::from_diagonal(&[2.0, 3.0, 5.0]);
        let mut v = axis(3, 1) + axis(3, 2);
        v /= v.norm();
        let f = tangential_form(&g, &[axis(3, 0), v.clone()]).unwrap();
        assert_abs_diff_eq!(f.matrix[(1, 1)], 4.0, epsilon = 1e-14);
        assert_abs_diff_eq!(f.evaluate(&v).unwrap(), 4.0, epsilon = 1e-14);
    }

    #[test]
    fn non_orthonormal_basis_rejected() {
        let g = SymTensor::identity(3);
        let basis = vec![axis(3, 0), axis(3, 0)];
        assert!(matches!(
            tangential_form(&g, &basis),
            Err(MetricError::NonOrthonormalBasis { .. })
        ));
    }

    #[test]
    fn direction_outside_plane_rejected() {
        let g = SymTensor::identity(3);
        let f = tangential_form(&g, &[axis(3, 0), axis(3, 1)]).unwrap();
        assert!(matches!(
            f.evaluate(&axis(3, 2)),
            Err(MetricError::DirectionOutsidePlane { .. })
        ));
    }

    fn forms_for(g: &SymTensor, gammas: &GammaTriple) -> [TangentialForm; 3] {
        let n = g.dim();
        let [p1, p2, p3] = canonical_plane_bases(gammas, n);
        [
            tangential_form(g, &p1).unwrap(),
            tangential_form(g, &p2).unwrap(),
            tangential_form(g, &p3).unwrap(),
        ]
    }

    #[test]
    fn identity_assembles_to_identity() {
        let gammas = GammaTriple::from_values(3, 0.7, 0.2, 0.4).unwrap();
        let g = SymTensor::identity(3);
        let rec = assemble_g(&forms_for(&g, &gammas), &gammas).unwrap();
        assert!(rec.max_abs_diff(&g) < 1e-12);
    }

    #[test]
    fn worked_example_round_trip() {
        let g = SymTensor::from_matrix(&DMatrix::from_row_slice(
            3,
            3,
            &[2.0, 0.3, 0.1, 0.3, 1.5, 0.2, 0.1, 0.2, 1.0],
        ));
        let gammas = GammaTriple::from_values(3, 0.7, 0.2, 0.4).unwrap();
        let rec = assemble_g(&forms_for(&g, &gammas), &gammas).unwrap();
        assert!(rec.max_abs_diff(&g) < 1e-10);
    }

    #[test]
    fn branch_a2_round_trip() {
        let g = SymTensor::from_matrix(&DMatrix::from_row_slice(
            3,
            3,
            &[2.0, 0.3, 0.1, 0.3, 1.5, 0.2, 0.1, 0.2, 1.0],
        ));
        let gammas = GammaTriple::from_values(3, 0.5, 0.2, 0.0).unwrap();
        assert_eq!(gammas.branch, GammaBranch::A2);
        let rec = assemble_g(&forms_for(&g, &gammas), &gammas).unwrap();
        assert!(rec.max_abs_diff(&g) < 1e-10);
    }

    #[test]
    fn equal_gamma12_with_zero_gamma3_rejected() {
        assert!(GammaTriple::from_values(3, 0.5, 0.5, 0.0).is_err());
    }

    #[test]
    fn block_determinants_match_closed_forms() {
        for &(g1, g2, g3) in &[(0.7, 0.2, 0.4), (0.5, -0.3, 0.9), (1.2, 0.8, 0.05)] {
            let a = DMatrix::from_row_slice(3, 2, &[2.0, g1, 0.0, g3 * g3, 2.0 * g2, g2 * g2]);
            let a1 = DMatrix::from_row_slice(2, 2, &[a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]]);
            let a2 = DMatrix::from_row_slice(2, 2, &[a[(0, 0)], a[(0, 1)], a[(2, 0)], a[(2, 1)]]);
            assert_abs_diff_eq!(a1.determinant(), 2.0 * g3 * g3, epsilon = 1e-14);
            assert_abs_diff_eq!(a2.determinant(), 2.0 * g2 * (g2 - g1), epsilon = 1e-14);
        }
    }

    #[test]
    fn corrupted_forms_detected() {
        let g = SymTensor::from_diagonal(&[2.0, 1.5, 1.0]);
        let gammas = GammaTriple::from_values(3, 0.7, 0.3, 0.4).unwrap();
        let mut forms = forms_for(&g, &gammas);
        // Corrupt the plane-3 form only: the three rows of the G system can
        // no longer agree.
        forms[2].matrix[(1, 1)] += 0.05;
        assert!(matches!(
            assemble_g(&forms, &gammas),
            Err(MetricError::InconsistentForms { .. })
        ));
    }

    #[test]
    fn small_perturbations_stay_conditioned() {
        // Noise of size delta on the forms moves the result by at most
        // kappa(A_branch) * delta * c(n) with a modest constant c.
        let g = SymTensor::from_matrix(&DMatrix::from_row_slice(
            3,
            3,
            &[2.0, 0.3, 0.1, 0.3, 1.5, 0.2, 0.1, 0.2, 1.0],
        ));
        let gammas = GammaTriple::from_values(3, 0.7, 0.2, 0.4).unwrap();
        let delta = 1e-8;
        let a1 = DMatrix::from_row_slice(2, 2, &[2.0, 0.7, 0.0, 0.16]);
        let svd = a1.svd(false, false);
        let kappa = svd.singular_values.max() / svd.singular_values.min();

        let mut forms = forms_for(&g, &gammas);
        for f in forms.iter_mut() {
            for v in f.matrix.iter_mut() {
                *v += delta;
            }
        }
        let rec = assemble_g(&forms, &gammas).unwrap();
        assert!(rec.max_abs_diff(&g) <= kappa * delta * 100.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn assemble_inverts_restriction(seed in 0u64..1000, n in 3usize..6,
                                        g1 in 0.05f64..1.5, g2 in -1.0f64..1.0,
                                        g3 in 0.0f64..1.0) {
            // Keep gammas comfortably admissible.
            prop_assume!(g1.abs().min(g3.abs().max(g2.abs() * (g1 - g2).abs())) >= 0.05);
            let sigma = crate::tensor::random_spd(n, seed);
            let gammas = GammaTriple::from_values(n, g1, g2, g3).unwrap();
            let forms = forms_for(&sigma, &gammas);
            let rec = assemble_g(&forms, &gammas).unwrap();
            let scale = sigma.upper_triangle().iter().fold(1.0f64, |m, v| m.max(v.abs()));
            prop_assert!(rec.max_abs_diff(&sigma) < 1e-10 * scale);
        }
    }
}

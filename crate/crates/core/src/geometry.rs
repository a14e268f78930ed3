//! Layered domains bounded below by a curved graph, tangent frames on the
//! graph, non-flatness witnesses, and the gamma parameters read off from
//! three witness normals in canonical coordinates.

use nalgebra::{DMatrix, DVector};

use crate::error::GeometryError;
use crate::EPS_FLAT;

/// Analytic family for a graph x_n = phi(x').
#[derive(Debug, Clone, PartialEq)]
pub enum InterfaceKind {
    /// phi(x') = c0 + sum_i c_{i} x_i, coefficients [c0, c1, ..., c_{n-1}].
    Plane,
    /// phi(x') = c0 + c1 |x'|^2, coefficients [c0, c1].
    Paraboloid,
    /// Even radial polynomial phi(x') = sum_k c_k |x'|^(2k), coefficients
    /// [c0, c1, c2, ...].
    Polynomial,
}

/// Graph x_n = phi(x') over the disc |x'| <= R in R^(n-1), embedded in R^n.
#[derive(Debug, Clone)]
pub struct InterfaceGraph {
    pub kind: InterfaceKind,
    pub coefficients: Vec<f64>,
    /// Graph domain radius R.
    pub radius: f64,
    /// Ambient dimension n (the graph lives in R^n, x' in R^(n-1)).
    pub dim: usize,
}

impl InterfaceGraph {
    pub fn plane(dim: usize, coefficients: Vec<f64>) -> Self {
        Self { kind: InterfaceKind::Plane, coefficients, radius: f64::INFINITY, dim }
    }

    pub fn horizontal_plane(dim: usize, height: f64, radius: f64) -> Self {
        let mut coefficients = vec![0.0; dim];
        coefficients[0] = height;
        Self { kind: InterfaceKind::Plane, coefficients, radius, dim }
    }

    pub fn paraboloid(dim: usize, offset: f64, curvature: f64, radius: f64) -> Self {
        Self { kind: InterfaceKind::Paraboloid, coefficients: vec![offset, curvature], radius, dim }
    }

    pub fn polynomial(dim: usize, coefficients: Vec<f64>, radius: f64) -> Self {
        Self { kind: InterfaceKind::Polynomial, coefficients, radius, dim }
    }

    fn check_domain(&self, xp: &[f64]) -> Result<(), GeometryError> {
        assert_eq!(xp.len(), self.dim - 1, "x' must have n-1 components");
        let r2: f64 = xp.iter().map(|v| v * v).sum();
        if r2.sqrt() > self.radius * (1.0 + 1e-12) {
            return Err(GeometryError::OutsideGraphDomain { r: r2.sqrt(), radius: self.radius });
        }
        Ok(())
    }

    /// Height phi(x').
    pub fn eval(&self, xp: &[f64]) -> Result<f64, GeometryError> {
        self.check_domain(xp)?;
        let r2: f64 = xp.iter().map(|v| v * v).sum();
        Ok(match self.kind {
            InterfaceKind::Plane => {
                self.coefficients[0]
                    + xp.iter()
                        .zip(self.coefficients.iter().skip(1))
                        .map(|(x, c)| x * c)
                        .sum::<f64>()
            }
            InterfaceKind::Paraboloid => self.coefficients[0] + self.coefficients[1] * r2,
            InterfaceKind::Polynomial => self
                .coefficients
                .iter()
                .enumerate()
                .map(|(k, c)| c * r2.powi(k as i32))
                .sum(),
        })
    }

    /// Exact gradient of phi with respect to x'.
    pub fn grad(&self, xp: &[f64]) -> Result<Vec<f64>, GeometryError> {
        self.check_domain(xp)?;
        let r2: f64 = xp.iter().map(|v| v * v).sum();
        Ok(match self.kind {
            InterfaceKind::Plane => self.coefficients[1..].to_vec(),
            InterfaceKind::Paraboloid => {
                xp.iter().map(|x| 2.0 * self.coefficients[1] * x).collect()
            }
            InterfaceKind::Polynomial => {
                // d/dx_i sum c_k r2^k = x_i * sum 2 k c_k r2^(k-1)
                let radial: f64 = self
                    .coefficients
                    .iter()
                    .enumerate()
                    .skip(1)
                    .map(|(k, c)| 2.0 * k as f64 * c * r2.powi(k as i32 - 1))
                    .sum();
                xp.iter().map(|x| x * radial).collect()
            }
        })
    }
}

/// Orthonormal tangent frame at a graph point, with the outward normal of
/// the region above the graph (the normal points downward).
#[derive(Debug, Clone)]
pub struct TangentFrame {
    pub point: DVector<f64>,
    pub tangents: Vec<DVector<f64>>,
    pub normal: DVector<f64>,
}

impl TangentFrame {
    /// Max deviation of the Gram matrix of (tangents..., normal) from I.
    pub fn orthonormality_residual(&self) -> f64 {
        let n = self.normal.len();
        let mut vecs: Vec<&DVector<f64>> = self.tangents.iter().collect();
        vecs.push(&self.normal);
        let mut worst = 0.0f64;
        for (i, a) in vecs.iter().enumerate() {
            for (j, b) in vecs.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((a.dot(b) - target).abs());
            }
        }
        assert_eq!(vecs.len(), n);
        worst
    }
}

/// Tangent frame of a graph at parameter x'. The raw tangents
/// (e_i + d_i phi e_n) are orthonormalized by Gram-Schmidt; for a
/// horizontal plane this reproduces (e_1, ..., e_{n-1}) exactly.
pub fn tangent_frame_at(
    interface: &InterfaceGraph,
    xp: &[f64],
) -> Result<TangentFrame, GeometryError> {
    let n = interface.dim;
    let z = interface.eval(xp)?;
    let grad = interface.grad(xp)?;

    let mut point = DVector::zeros(n);
    for (i, &x) in xp.iter().enumerate() {
        point[i] = x;
    }
    point[n - 1] = z;

    // Outward normal of {x_n > phi(x')} is (grad phi, -1)/|.|.
    let mut normal = DVector::zeros(n);
    for (i, &gi) in grad.iter().enumerate() {
        normal[i] = gi;
    }
    normal[n - 1] = -1.0;
    normal /= normal.norm();

    let mut tangents: Vec<DVector<f64>> = Vec::with_capacity(n - 1);
    for i in 0..n - 1 {
        let mut t = DVector::zeros(n);
        t[i] = 1.0;
        t[n - 1] = grad[i];
        // Gram-Schmidt against the normal and the accepted tangents.
        t -= &normal * normal.dot(&t);
        for prev in &tangents {
            t -= prev * prev.dot(&t);
        }
        t /= t.norm();
        tangents.push(t);
    }

    Ok(TangentFrame { point, tangents, normal })
}

/// Three surface points whose pairwise normal products all fall below
/// 1 - eps_flat, preferring the triple that maximizes the minimum deficit.
#[derive(Debug, Clone)]
pub struct WitnessTriple {
    pub frames: [TangentFrame; 3],
    /// min over pairs of (1 - nu_i . nu_j).
    pub deficit: f64,
}

/// Searches a uniform grid on the graph domain for a non-flatness witness
/// triple. Exhaustive over at most ~200 grid candidates (the grid is
/// strided down when finer), which is ample for the analytic families here.
pub fn nonflat_witnesses(
    interface: &InterfaceGraph,
    grid: usize,
) -> Result<WitnessTriple, GeometryError> {
    assert_eq!(interface.dim, 3, "witness search is implemented for n = 3");
    let r = interface.radius;
    assert!(r.is_finite(), "witness search needs a bounded graph domain");

    let mut candidates: Vec<TangentFrame> = Vec::new();
    for i in 0..grid {
        for j in 0..grid {
            let x = -r + 2.0 * r * i as f64 / (grid - 1) as f64;
            let y = -r + 2.0 * r * j as f64 / (grid - 1) as f64;
            if x * x + y * y <= r * r {
                candidates.push(tangent_frame_at(interface, &[x, y])?);
            }
        }
    }
    // Cap the exhaustive triple search.
    let stride = candidates.len().div_ceil(200);
    let pool: Vec<&TangentFrame> = candidates.iter().step_by(stride).collect();

    let mut best: Option<(f64, [usize; 3])> = None;
    for a in 0..pool.len() {
        for b in a + 1..pool.len() {
            let dab = 1.0 - pool[a].normal.dot(&pool[b].normal);
            if dab < best.as_ref().map_or(EPS_FLAT, |(d, _)| *d) {
                continue;
            }
            for c in b + 1..pool.len() {
                let dac = 1.0 - pool[a].normal.dot(&pool[c].normal);
                let dbc = 1.0 - pool[b].normal.dot(&pool[c].normal);
                let deficit = dab.min(dac).min(dbc);
                if best.as_ref().is_none_or(|(d, _)| deficit > *d) && deficit >= EPS_FLAT {
                    best = Some((deficit, [a, b, c]));
                }
            }
        }
    }
    match best {
        Some((deficit, [a, b, c])) => Ok(WitnessTriple {
            frames: [pool[a].clone(), pool[b].clone(), pool[c].clone()],
            deficit,
        }),
        None => Err(GeometryError::FlatInterface),
    }
}

/// Branch of the 2x2 block used to invert for (g_{n-1,n}, g_{n,n}).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaBranch {
    /// Rows (2 gamma1; 0 gamma3^2), det = 2 gamma3^2.
    A1,
    /// Rows (2 gamma1; 2 gamma2 gamma2^2), det = 2 gamma2 (gamma2 - gamma1).
    A2,
}

/// Gamma parameters of a witness triple in canonical coordinates, together
/// with the orthogonal map that takes physical to canonical coordinates.
#[derive(Debug, Clone)]
pub struct GammaTriple {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub branch: GammaBranch,
    /// Orthogonal Q with x_canonical = Q x_physical; nu(y1) maps to -e_n,
    /// nu(y2) to (-e_n + gamma1 e_{n-1})/sqrt(1+gamma1^2), nu(y3) to
    /// (-e_n + gamma2 e_{n-1} + gamma3 e_{n-2})/sqrt(1+gamma2^2+gamma3^2).
    pub to_canonical: DMatrix<f64>,
}

impl GammaTriple {
    /// Admissibility: (gamma1 != 0 and gamma3 != 0) or (gamma1 != 0,
    /// gamma3 = 0, gamma2 != 0, gamma1 != gamma2), with "!= 0" meaning
    /// magnitude >= eps_flat.
    pub fn admissible(gamma1: f64, gamma2: f64, gamma3: f64) -> Option<GammaBranch> {
        if gamma1.abs() < EPS_FLAT {
            return None;
        }
        if gamma3.abs() >= EPS_FLAT {
            Some(GammaBranch::A1)
        } else if gamma2.abs() >= EPS_FLAT && (gamma1 - gamma2).abs() >= EPS_FLAT {
            Some(GammaBranch::A2)
        } else {
            None
        }
    }

    /// Constructs directly from gamma values in already-canonical
    /// coordinates (to_canonical = I). Used by tests and synthetic probes.
    pub fn from_values(n: usize, gamma1: f64, gamma2: f64, gamma3: f64) -> Result<Self, GeometryError> {
        let branch = Self::admissible(gamma1, gamma2, gamma3)
            .ok_or(GeometryError::InadmissibleGammas { gamma1, gamma2, gamma3 })?;
        Ok(Self { gamma1, gamma2, gamma3, branch, to_canonical: DMatrix::identity(n, n) })
    }
}

/// Rotation in the plane span{a, b} taking unit vector a to unit vector b,
/// acting as the identity on the orthogonal complement.
fn rotation_taking(a: &DVector<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    let n = a.len();
    let c = a.dot(b);
    let mut v = b - a * c;
    let s = v.norm();
    if s < 1e-14 {
        if c > 0.0 {
            return DMatrix::identity(n, n);
        }
        // b = -a: rotate by pi in a plane containing a.
        let mut w = DVector::zeros(n);
        let k = (0..n).min_by(|&i, &j| a[i].abs().total_cmp(&a[j].abs())).unwrap();
        w[k] = 1.0;
        w -= a * a.dot(&w);
        w /= w.norm();
        // Rotation by pi in span{a, w}: -1 on the plane, +1 elsewhere.
        return DMatrix::identity(n, n) - 2.0 * a * a.transpose() - 2.0 * &w * w.transpose();
    }
    v /= s;
    let mut q = DMatrix::identity(n, n);
    // q = I + (c-1)(aa^T + vv^T) + s(va^T - av^T)
    q += (c - 1.0) * (a * a.transpose() + &v * v.transpose());
    q += s * (&v * a.transpose() - a * v.transpose());
    q
}

/// Reads the gamma parameters from three tangent frames on the same
/// interface. Rotates so nu(y1) = -e_n, aligns the tangential part of
/// nu(y2) with e_{n-1}, then the residual tangential part of nu(y3) with
/// e_{n-2}; the gammas are the resulting normal components.
pub fn gammas_from_frames(
    f1: &TangentFrame,
    f2: &TangentFrame,
    f3: &TangentFrame,
) -> Result<GammaTriple, GeometryError> {
    let n = f1.normal.len();
    let mut en = DVector::zeros(n);
    en[n - 1] = 1.0;

    // Step 1: nu(y1) -> -e_n.
    let q1 = rotation_taking(&f1.normal, &(-&en));
    let w2 = &q1 * &f2.normal;
    let w3 = &q1 * &f3.normal;

    let inadmissible = || GeometryError::InadmissibleGammas {
        gamma1: f64::NAN,
        gamma2: f64::NAN,
        gamma3: f64::NAN,
    };

    // nu(y2) must still point into the lower half-space for the canonical
    // form (-e_n + gamma1 e_{n-1})/sqrt(1+gamma1^2) to exist.
    if w2[n - 1] >= -1e-9 || w3[n - 1] >= -1e-9 {
        return Err(inadmissible());
    }

    // Step 2: align the tangential part of nu(y2) with +/- e_{n-1},
    // picking the sign nearest the current direction. The antipodal
    // rotation (target opposite the source) is not unique and can disturb
    // other axes, so it must never be selected; the sign is carried by
    // gamma1 instead, which every downstream use supports.
    let mut t2 = w2.clone();
    t2[n - 1] = 0.0;
    let t2_norm = t2.norm();
    let (q2, gamma1) = if t2_norm < 1e-14 {
        (DMatrix::identity(n, n), 0.0)
    } else {
        let that = &t2 / t2_norm;
        let sign = if that[n - 2] < 0.0 { -1.0 } else { 1.0 };
        let mut en1 = DVector::zeros(n);
        en1[n - 2] = sign;
        (rotation_taking(&that, &en1), sign * t2_norm / (-w2[n - 1]))
    };
    let w3 = &q2 * w3;

    // Step 3: gamma2 from the e_{n-1} component of nu(y3); align the
    // residual with +/- e_{n-2}, same sign rule as step 2.
    let gamma2 = w3[n - 2] / (-w3[n - 1]);
    let mut r3 = w3.clone();
    r3[n - 1] = 0.0;
    r3[n - 2] = 0.0;
    let r3_norm = r3.norm();
    let (q3, gamma3) = if r3_norm < 1e-14 {
        (DMatrix::identity(n, n), 0.0)
    } else {
        let rhat = &r3 / r3_norm;
        let sign = if rhat[n - 3] < 0.0 { -1.0 } else { 1.0 };
        let mut en2 = DVector::zeros(n);
        en2[n - 3] = sign;
        (rotation_taking(&rhat, &en2), sign * r3_norm / (-w3[n - 1]))
    };

    let branch = GammaTriple::admissible(gamma1, gamma2, gamma3)
        .ok_or(GeometryError::InadmissibleGammas { gamma1, gamma2, gamma3 })?;
    Ok(GammaTriple { gamma1, gamma2, gamma3, branch, to_canonical: q3 * q2 * q1 })
}

/// Disc on the accessible boundary graph where fluxes may be applied.
#[derive(Debug, Clone)]
pub struct SigmaPatch {
    pub center: Vec<f64>,
    pub radius: f64,
}

/// Box-bounded domain above an accessible boundary graph phi_0, split into
/// N layers by the ordered graphs phi_0 < phi_1 < ... < phi_{N-1} < z_max.
/// Layer j (1-based) lies between phi_{j-1} and phi_j; layer N between
/// phi_{N-1} and the box top.
#[derive(Debug, Clone)]
pub struct LayeredDomain {
    /// Horizontal half-width R of the box [-R, R]^(n-1) x [z_min, z_max].
    pub half_width: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub interfaces: Vec<InterfaceGraph>,
    pub sigma_patch: SigmaPatch,
}

impl LayeredDomain {
    pub fn layer_count(&self) -> usize {
        self.interfaces.len()
    }

    pub fn dim(&self) -> usize {
        self.interfaces[0].dim
    }

    /// Accessible boundary graph phi_0.
    pub fn accessible(&self) -> &InterfaceGraph {
        &self.interfaces[0]
    }

    /// Layer index (1-based) containing the point (x', z); points below
    /// phi_0 or above z_max are reported as layer 0 / N+1 respectively.
    pub fn layer_of(&self, xp: &[f64], z: f64) -> Result<usize, GeometryError> {
        for (k, phi) in self.interfaces.iter().enumerate() {
            if z < phi.eval(xp)? {
                return Ok(k);
            }
        }
        Ok(if z <= self.z_max { self.interfaces.len() } else { self.interfaces.len() + 1 })
    }
}

/// Validates and assembles a layered domain. Ordering and emptiness are
/// checked on a uniform sampling grid over the box cross-section.
pub fn build_layered_domain(
    half_width: f64,
    z_min: f64,
    z_max: f64,
    interfaces: Vec<InterfaceGraph>,
    sigma_patch: SigmaPatch,
    grid: usize,
) -> Result<LayeredDomain, GeometryError> {
    assert!(!interfaces.is_empty(), "at least the accessible boundary graph is required");
    let n = interfaces[0].dim;
    assert!(interfaces.iter().all(|i| i.dim == n), "mixed interface dimensions");
    assert_eq!(n, 3, "layered domains are meshed in n = 3 only");

    let sc_norm: f64 = sigma_patch.center.iter().map(|v| v * v).sum::<f64>().sqrt();
    let acc_r = interfaces[0].radius;
    if sc_norm + sigma_patch.radius > acc_r.min(half_width) + 1e-12 {
        return Err(GeometryError::SigmaOutsideGraph {
            extent: sc_norm + sigma_patch.radius,
            radius: acc_r.min(half_width),
        });
    }

    // Ordering is required over the common graph domain |x'| <= min R.
    let min_radius = interfaces.iter().map(|i| i.radius).fold(f64::INFINITY, f64::min);
    for i in 0..grid {
        for j in 0..grid {
            let x = -half_width + 2.0 * half_width * i as f64 / (grid - 1) as f64;
            let y = -half_width + 2.0 * half_width * j as f64 / (grid - 1) as f64;
            let xp = [x, y];
            if xp.iter().map(|v| v * v).sum::<f64>().sqrt() > min_radius {
                continue;
            }
            let mut prev = interfaces[0].eval(&xp)?;
            if prev < z_min - 1e-12 {
                return Err(GeometryError::OrderingViolation {
                    lower: z_min,
                    upper: prev,
                    at: xp.to_vec(),
                });
            }
            for phi in &interfaces[1..] {
                let cur = phi.eval(&xp)?;
                if cur <= prev {
                    return Err(GeometryError::OrderingViolation {
                        lower: prev,
                        upper: cur,
                        at: xp.to_vec(),
                    });
                }
                prev = cur;
            }
            if prev >= z_max {
                return Err(GeometryError::EmptyLayer { index: interfaces.len() });
            }
        }
    }

    Ok(LayeredDomain { half_width, z_min, z_max, interfaces, sigma_patch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit_box_domain(interfaces: Vec<InterfaceGraph>) -> Result<LayeredDomain, GeometryError> {
        let patch = SigmaPatch { center: vec![0.0, 0.0], radius: 0.3 };
        build_layered_domain(0.5, 0.0, 1.0, interfaces, patch, 17)
    }

    #[test]
    fn plane_interface_splits_unit_box() {
        let dom = unit_box_domain(vec![
            InterfaceGraph::horizontal_plane(3, 0.0, 0.75),
            InterfaceGraph::horizontal_plane(3, 0.5, 0.75),
        ])
        .unwrap();
        assert_eq!(dom.layer_count(), 2);
        assert_eq!(dom.layer_of(&[0.1, 0.1], 0.25).unwrap(), 1);
        assert_eq!(dom.layer_of(&[0.1, 0.1], 0.75).unwrap(), 2);
    }

    #[test]
    fn paraboloid_under_plane_is_valid() {
        // max of 0.5 + 0.2|x'|^2 over |x'| <= 1 is 0.7 < 0.9
        let patch = SigmaPatch { center: vec![0.0, 0.0], radius: 0.3 };
        let dom = build_layered_domain(
            1.0,
            0.0,
            1.0,
            vec![
                InterfaceGraph::horizontal_plane(3, 0.0, 1.5),
                InterfaceGraph::paraboloid(3, 0.5, 0.2, 1.0),
                InterfaceGraph::horizontal_plane(3, 0.9, 1.0),
            ],
            patch,
            33,
        );
        assert!(dom.is_ok());
    }

    #[test]
    fn crossing_interfaces_rejected() {
        // 0.5 + |x'|^2 exceeds 0.8 for |x'| > sqrt(0.3) ~ 0.548
        let patch = SigmaPatch { center: vec![0.0, 0.0], radius: 0.3 };
        let dom = build_layered_domain(
            1.0,
            0.0,
            1.0,
            vec![
                InterfaceGraph::horizontal_plane(3, 0.0, 1.5),
                InterfaceGraph::paraboloid(3, 0.5, 1.0, 1.5),
                InterfaceGraph::horizontal_plane(3, 0.8, 1.5),
            ],
            patch,
            33,
        );
        assert!(matches!(dom, Err(GeometryError::OrderingViolation { .. })));
    }

    #[test]
    fn sigma_patch_must_fit_in_graph_domain() {
        let patch = SigmaPatch { center: vec![0.4, 0.0], radius: 0.3 };
        let dom = build_layered_domain(
            0.5,
            0.0,
            1.0,
            vec![InterfaceGraph::horizontal_plane(3, 0.0, 0.5)],
            patch,
            9,
        );
        assert!(matches!(dom, Err(GeometryError::SigmaOutsideGraph { .. })));
    }

    #[test]
    fn plane_frame_is_coordinate_frame() {
        let plane = InterfaceGraph::horizontal_plane(3, 0.0, 1.0);
        let f = tangent_frame_at(&plane, &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(f.normal[2], -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(f.tangents[0][0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(f.tangents[1][1], 1.0, epsilon = 1e-15);
        assert!(f.orthonormality_residual() <= 1e-12);
    }

    #[test]
    fn paraboloid_normal_matches_gradient_formula() {
        let p = InterfaceGraph::paraboloid(3, 0.0, 0.2, 2.0);
        let f = tangent_frame_at(&p, &[1.0, 0.0]).unwrap();
        // nu proportional to (0.4, 0, -1)/sqrt(1.16)
        let s = 1.16f64.sqrt();
        assert_abs_diff_eq!(f.normal[0], 0.4 / s, epsilon = 1e-14);
        assert_abs_diff_eq!(f.normal[1], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(f.normal[2], -1.0 / s, epsilon = 1e-14);
        assert!(f.orthonormality_residual() <= 1e-12);
    }

    #[test]
    fn frames_orthonormal_across_graph_families() {
        let cases = [
            InterfaceGraph::paraboloid(3, 0.1, 0.35, 1.0),
            InterfaceGraph::polynomial(3, vec![0.2, 0.1, -0.05], 1.0),
            InterfaceGraph::plane(3, vec![0.0, 0.3, -0.2]),
        ];
        for g in &cases {
            for &xp in &[[0.0, 0.0], [0.5, -0.3], [-0.7, 0.1]] {
                let f = tangent_frame_at(g, &xp).unwrap();
                assert!(f.orthonormality_residual() <= 1e-12);
            }
        }
    }

    #[test]
    fn outside_domain_rejected() {
        let p = InterfaceGraph::paraboloid(3, 0.0, 0.2, 1.0);
        assert!(matches!(
            tangent_frame_at(&p, &[1.5, 0.0]),
            Err(GeometryError::OutsideGraphDomain { .. })
        ));
    }

    #[test]
    fn plane_has_no_witnesses() {
        let plane = InterfaceGraph::horizontal_plane(3, 0.3, 1.0);
        assert!(matches!(nonflat_witnesses(&plane, 17), Err(GeometryError::FlatInterface)));
    }

    #[test]
    fn paraboloid_has_witnesses() {
        let p = InterfaceGraph::paraboloid(3, 0.0, 0.2, 1.0);
        let w = nonflat_witnesses(&p, 33).unwrap();
        assert!(w.deficit >= EPS_FLAT);
        for f in &w.frames {
            assert!(f.orthonormality_residual() <= 1e-12);
        }
    }

    #[test]
    fn shallow_paraboloids_still_witness() {
        for curv in [0.05, 0.1, 0.5] {
            let p = InterfaceGraph::paraboloid(3, 0.0, curv, 1.0);
            assert!(nonflat_witnesses(&p, 33).is_ok(), "curvature {curv}");
        }
    }

    #[test]
    fn gammas_read_off_in_canonical_position() {
        // Frames already canonical: nu1 = -e3, nu2 = (-e3 + 0.7 e2)/sqrt(1.49),
        // nu3 = (-e3 + 0.2 e2 + 0.4 e1)/sqrt(1.20).
        let f1 = frame_with_normal(&[0.0, 0.0, -1.0]);
        let f2 = frame_with_normal(&[0.0, 0.7, -1.0]);
        let f3 = frame_with_normal(&[0.4, 0.2, -1.0]);
        let g = gammas_from_frames(&f1, &f2, &f3).unwrap();
        assert_abs_diff_eq!(g.gamma1, 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(g.gamma2, 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(g.gamma3, 0.4, epsilon = 1e-12);
        assert_eq!(g.branch, GammaBranch::A1);
    }

    #[test]
    fn equal_normals_inadmissible() {
        let f1 = frame_with_normal(&[0.0, 0.0, -1.0]);
        let f3 = frame_with_normal(&[0.4, 0.2, -1.0]);
        assert!(matches!(
            gammas_from_frames(&f1, &f1.clone(), &f3),
            Err(GeometryError::InadmissibleGammas { .. })
        ));
    }

    #[test]
    fn gamma3_zero_needs_distinct_gamma2() {
        // gamma3 = 0 and gamma2 = gamma1 = 0.5 violates condition A2.
        let f1 = frame_with_normal(&[0.0, 0.0, -1.0]);
        let f2 = frame_with_normal(&[0.0, 0.5, -1.0]);
        let f3 = frame_with_normal(&[0.0, 0.5, -1.0]);
        assert!(matches!(
            gammas_from_frames(&f1, &f2, &f3),
            Err(GeometryError::InadmissibleGammas { .. })
        ));
    }

    #[test]
    fn gamma3_zero_branch_a2() {
        let f1 = frame_with_normal(&[0.0, 0.0, -1.0]);
        let f2 = frame_with_normal(&[0.0, 0.5, -1.0]);
        let f3 = frame_with_normal(&[0.0, 0.2, -1.0]);
        let g = gammas_from_frames(&f1, &f2, &f3).unwrap();
        assert_eq!(g.branch, GammaBranch::A2);
        assert_abs_diff_eq!(g.gamma2, 0.2, epsilon = 1e-12);
    }

    #[test]
    fn gammas_rotation_equivariant() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let f1 = frame_with_normal(&[0.0, 0.0, -1.0]);
        let f2 = frame_with_normal(&[0.1, 0.7, -1.0]);
        let f3 = frame_with_normal(&[0.4, 0.2, -1.0]);
        let base = gammas_from_frames(&f1, &f2, &f3).unwrap();
        for _ in 0..20 {
            let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let q = a.qr().q();
            let rot = |f: &TangentFrame| TangentFrame {
                point: &q * &f.point,
                tangents: f.tangents.iter().map(|t| &q * t).collect(),
                normal: &q * &f.normal,
            };
            let g = gammas_from_frames(&rot(&f1), &rot(&f2), &rot(&f3)).unwrap();
            // Rotation-invariant quantities: the signs of gamma1 and gamma2
            // are a coordinate convention (the +/- e axis nearest the
            // tangential residual), but they flip together, and |gamma3| is
            // intrinsic.
            assert_abs_diff_eq!(g.gamma1.abs(), base.gamma1.abs(), epsilon = 1e-10);
            assert_abs_diff_eq!(
                g.gamma2 / g.gamma1,
                base.gamma2 / base.gamma1,
                epsilon = 1e-10
            );
            assert_abs_diff_eq!(g.gamma3.abs(), base.gamma3.abs(), epsilon = 1e-10);
        }
    }

    #[test]
    fn to_canonical_maps_normals_to_canonical_form() {
        let f1 = frame_with_normal(&[0.3, -0.1, -1.0]);
        let f2 = frame_with_normal(&[0.1, 0.7, -1.0]);
        let f3 = frame_with_normal(&[0.5, 0.2, -1.0]);
        let g = gammas_from_frames(&f1, &f2, &f3).unwrap();
        let q = &g.to_canonical;

        let w1 = q * &f1.normal;
        assert_abs_diff_eq!(w1[2], -1.0, epsilon = 1e-12);

        let w2 = q * &f2.normal;
        let s2 = (1.0 + g.gamma1 * g.gamma1).sqrt();
        assert_abs_diff_eq!(w2[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w2[1], g.gamma1 / s2, epsilon = 1e-12);
        assert_abs_diff_eq!(w2[2], -1.0 / s2, epsilon = 1e-12);

        let w3 = q * &f3.normal;
        let s3 = (1.0 + g.gamma2 * g.gamma2 + g.gamma3 * g.gamma3).sqrt();
        assert_abs_diff_eq!(w3[0], g.gamma3 / s3, epsilon = 1e-12);
        assert_abs_diff_eq!(w3[1], g.gamma2 / s3, epsilon = 1e-12);
        assert_abs_diff_eq!(w3[2], -1.0 / s3, epsilon = 1e-12);
    }

    fn frame_with_normal(raw: &[f64]) -> TangentFrame {
        let mut normal = DVector::from_row_slice(raw);
        normal /= normal.norm();
        let n = raw.len();
        let mut tangents: Vec<DVector<f64>> = Vec::new();
        for i in 0..n - 1 {
            let mut t = DVector::zeros(n);
            t[i] = 1.0;
            t -= &normal * normal.dot(&t);
            for prev in &tangents {
                t -= prev * prev.dot(&t);
            }
            t /= t.norm();
            tangents.push(t);
        }
        TangentFrame { point: DVector::zeros(n), tangents, normal }
    }
}

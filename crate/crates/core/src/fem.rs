//! P1 Galerkin solver for the Neumann problem
//! -div(sigma grad u) + q u = 0, sigma grad u . nu = psi on the boundary,
//! with element-wise constant coefficients. Gradients of linear elements
//! are constant, so all element integrals are exact; the system is SPD as
//! long as q > 0 somewhere, and one sparse Cholesky factorization serves
//! every right-hand side.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};
use nalgebra::Matrix3;

use crate::error::FemError;
use crate::mesh::Mesh;
use crate::tensor::SymTensor;

/// Per-layer conductivity tensors and potentials, with the global
/// ellipticity bound lambda.
#[derive(Debug, Clone)]
pub struct CoefficientField {
    pub sigmas: Vec<SymTensor>,
    pub qs: Vec<f64>,
    pub lambda: f64,
}

impl CoefficientField {
    pub fn new(sigmas: Vec<SymTensor>, qs: Vec<f64>, lambda: f64) -> Result<Self, FemError> {
        assert_eq!(sigmas.len(), qs.len());
        for (k, s) in sigmas.iter().enumerate() {
            if !s.is_spd() || !s.spectrum_within(lambda) {
                return Err(FemError::NotElliptic { layer: k + 1 });
            }
        }
        if qs.iter().any(|&q| q < 0.0) || qs.iter().all(|&q| q == 0.0) {
            return Err(FemError::NotCoercive);
        }
        Ok(Self { sigmas, qs, lambda })
    }

    pub fn layer_count(&self) -> usize {
        self.sigmas.len()
    }
}

/// Neumann flux density over the accessible patch: coefficients with
/// respect to the boundary hat basis, zero elsewhere.
#[derive(Debug, Clone)]
pub struct BoundaryFlux {
    /// (node id, density) pairs; node ids must be Sigma nodes.
    pub coeffs: Vec<(usize, f64)>,
}

/// Assembled stiffness-plus-reaction operator with its factorization and
/// the boundary mass matrix used for the duality pairing.
pub struct DiscreteSystem {
    pub mesh: Mesh,
    pub matrix: SparseColMat<usize, f64>,
    pub boundary_mass: SparseColMat<usize, f64>,
    llt: Llt<usize, f64>,
    sigma_nodes: Vec<usize>,
}

/// Constant gradients of the four barycentric functions on a tetrahedron,
/// plus its volume.
pub fn element_gradients(mesh: &Mesh, t: usize) -> ([[f64; 3]; 4], f64) {
    let [a, b, c, d] = mesh.tets[t];
    let p0 = mesh.vertices[a];
    let p1 = mesh.vertices[b];
    let p2 = mesh.vertices[c];
    let p3 = mesh.vertices[d];
    let j = Matrix3::from_columns(&[
        nalgebra::Vector3::new(p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]),
        nalgebra::Vector3::new(p2[0] - p0[0], p2[1] - p0[1], p2[2] - p0[2]),
        nalgebra::Vector3::new(p3[0] - p0[0], p3[1] - p0[1], p3[2] - p0[2]),
    ]);
    let vol = j.determinant() / 6.0;
    let jinv_t = j.try_inverse().expect("nondegenerate element").transpose();
    let mut grads = [[0.0; 3]; 4];
    for i in 0..3 {
        let g = jinv_t.column(i);
        grads[i + 1] = [g[0], g[1], g[2]];
        for k in 0..3 {
            grads[0][k] -= g[k];
        }
    }
    (grads, vol)
}

/// Gradient of a nodal field on element t (constant per element).
pub fn field_gradient(mesh: &Mesh, t: usize, u: &[f64]) -> [f64; 3] {
    let (grads, _) = element_gradients(mesh, t);
    let mut g = [0.0; 3];
    for (i, &v) in mesh.tets[t].iter().enumerate() {
        for k in 0..3 {
            g[k] += u[v] * grads[i][k];
        }
    }
    g
}

/// Exact integral of the product of two nodal P1 fields over element t,
/// via the consistent mass matrix (vol/20)(1 + delta_ij).
pub fn element_mass_pair(mesh: &Mesh, t: usize, u: &[f64], v: &[f64]) -> f64 {
    let vol = mesh.signed_volume(t);
    let idx = mesh.tets[t];
    let (mut su, mut sv, mut dot) = (0.0, 0.0, 0.0);
    for &i in &idx {
        su += u[i];
        sv += v[i];
        dot += u[i] * v[i];
    }
    vol / 20.0 * (su * sv + dot)
}

fn stiffness_triplets(
    mesh: &Mesh,
    coeffs: &CoefficientField,
) -> Result<Vec<Triplet<usize, usize, f64>>, FemError> {
    if mesh.layer_count() != coeffs.layer_count() {
        return Err(FemError::LabelMismatch {
            labels: mesh.layer_count(),
            layers: coeffs.layer_count(),
        });
    }
    let mut triplets = Vec::with_capacity(mesh.element_count() * 16);
    for t in 0..mesh.element_count() {
        let label = mesh.labels[t];
        let sigma = &coeffs.sigmas[label];
        let q = coeffs.qs[label];
        let (grads, vol) = element_gradients(mesh, t);
        if vol <= 0.0 {
            return Err(FemError::DegenerateElement { element: t, volume: vol });
        }
        let idx = mesh.tets[t];
        // sigma grad applied once per local basis function.
        let mut sg = [[0.0; 3]; 4];
        for i in 0..4 {
            for r in 0..3 {
                for c in 0..3 {
                    sg[i][r] += sigma.get(r, c) * grads[i][c];
                }
            }
        }
        for i in 0..4 {
            for j in 0..4 {
                let stiff: f64 = (0..3).map(|k| sg[i][k] * grads[j][k]).sum::<f64>() * vol;
                let mass = q * vol / 20.0 * if i == j { 2.0 } else { 1.0 };
                triplets.push(Triplet::new(idx[i], idx[j], stiff + mass));
            }
        }
    }
    Ok(triplets)
}

fn boundary_mass_triplets(mesh: &Mesh) -> Vec<Triplet<usize, usize, f64>> {
    let mut triplets = Vec::with_capacity(mesh.boundary_faces.len() * 9);
    for f in &mesh.boundary_faces {
        let [a, b, c] = f.verts;
        let area = crate::mesh::face_area(&mesh.vertices[a], &mesh.vertices[b], &mesh.vertices[c]);
        for &i in &f.verts {
            for &j in &f.verts {
                let w = area / 12.0 * if i == j { 2.0 } else { 1.0 };
                triplets.push(Triplet::new(i, j, w));
            }
        }
    }
    triplets
}

/// Assembles the bilinear form a(u,v) = int sigma grad u . grad v + q u v
/// and factorizes it (sparse Cholesky).
pub fn assemble(mesh: &Mesh, coeffs: &CoefficientField) -> Result<DiscreteSystem, FemError> {
    let n = mesh.vertex_count();
    let triplets = stiffness_triplets(mesh, coeffs)?;
    let matrix: SparseColMat<usize, f64> =
        SparseColMat::try_new_from_triplets(n, n, &triplets).expect("valid triplets");
    let symbolic = SymbolicLlt::try_new(matrix.symbolic(), Side::Lower)
        .map_err(|_| FemError::FactorizationFailure)?;
    let llt = Llt::try_new_with_symbolic(symbolic, matrix.as_ref(), Side::Lower)
        .map_err(|_| FemError::FactorizationFailure)?;

    let bm = boundary_mass_triplets(mesh);
    let boundary_mass: SparseColMat<usize, f64> =
        SparseColMat::try_new_from_triplets(n, n, &bm).expect("valid triplets");

    Ok(DiscreteSystem {
        mesh: mesh.clone(),
        matrix,
        boundary_mass,
        llt,
        sigma_nodes: mesh.sigma_nodes(),
    })
}

impl DiscreteSystem {
    pub fn node_count(&self) -> usize {
        self.mesh.vertex_count()
    }

    pub fn sigma_nodes(&self) -> &[usize] {
        &self.sigma_nodes
    }

    /// b = B psi for a nodal boundary density psi (dense over all nodes).
    pub fn apply_boundary_mass(&self, density: &[f64]) -> Vec<f64> {
        spmv(&self.boundary_mass, density)
    }

    /// K u for a nodal vector.
    pub fn apply_operator(&self, u: &[f64]) -> Vec<f64> {
        spmv(&self.matrix, u)
    }

    /// Energy a(u, v) = u^T K v.
    pub fn energy(&self, u: &[f64], v: &[f64]) -> f64 {
        self.apply_operator(v).iter().zip(u).map(|(kv, ui)| kv * ui).sum()
    }

    /// Duality pairing <psi, f> = psi^T B f for a boundary density psi and
    /// a nodal trace f.
    pub fn boundary_pairing(&self, density: &[f64], trace: &[f64]) -> f64 {
        self.apply_boundary_mass(trace).iter().zip(density).map(|(bf, d)| bf * d).sum()
    }

    /// Solves K u = rhs against the cached factorization.
    pub fn solve_rhs(&self, rhs: &[f64]) -> Vec<f64> {
        self.solve_rhs_batch(std::slice::from_ref(&rhs.to_vec())).pop().unwrap()
    }

    /// Solves K u = rhs for many right-hand sides in one call; the blocked
    /// triangular solves amortize factor traversal across columns.
    pub fn solve_rhs_batch(&self, rhs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = self.node_count();
        let mut b = Mat::<f64>::zeros(n, rhs.len());
        for (j, col) in rhs.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                b[(i, j)] = v;
            }
        }
        let x = self.llt.solve(&b);
        (0..rhs.len()).map(|j| x.col_as_slice(j).to_vec()).collect()
    }
}

/// Solves the discrete Neumann problem for a flux supported on the
/// accessible patch; returns the nodal solution.
pub fn solve_neumann(system: &DiscreteSystem, flux: &BoundaryFlux) -> Result<Vec<f64>, FemError> {
    let n = system.node_count();
    let mut density = vec![0.0; n];
    for &(node, v) in &flux.coeffs {
        if system.sigma_nodes.binary_search(&node).is_err() {
            return Err(FemError::FluxOffBoundary);
        }
        density[node] = v;
    }
    let rhs = system.apply_boundary_mass(&density);
    Ok(system.solve_rhs(&rhs))
}

/// Restriction of a nodal vector to the Sigma nodes, in node-id order.
pub fn boundary_trace(u: &[f64], mesh: &Mesh) -> Vec<f64> {
    mesh.sigma_nodes().iter().map(|&v| u[v]).collect()
}

fn spmv(m: &SparseColMat<usize, f64>, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; m.nrows()];
    for j in 0..m.ncols() {
        let xj = x[j];
        if xj == 0.0 {
            continue;
        }
        for (i, v) in m.row_idx_of_col(j).zip(m.val_of_col(j)) {
            y[i] += v * xj;
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_layered_domain, InterfaceGraph, LayeredDomain, SigmaPatch};
    use crate::mesh::generate_mesh;
    use approx::assert_abs_diff_eq;

    fn unit_cube(sigma_radius: f64) -> LayeredDomain {
        build_layered_domain(
            0.5,
            0.0,
            1.0,
            vec![
                InterfaceGraph::horizontal_plane(3, 0.0, 1.0),
                InterfaceGraph::horizontal_plane(3, 0.5, 1.0),
            ],
            SigmaPatch { center: vec![0.0, 0.0], radius: sigma_radius },
            9,
        )
        .unwrap()
    }

    fn iso(c: f64) -> SymTensor {
        SymTensor::from_diagonal(&[c, c, c])
    }

    #[test]
    fn reference_element_matrices() {
        // One tetrahedron (0,0,0),(1,0,0),(0,1,0),(0,0,1), sigma = I, q = 1:
        // stiffness K00 = 1/2, K0i = -1/6, Kij = delta_ij/6 (i,j >= 1);
        // mass diag = 1/60, off-diagonal = 1/120.
        let mesh = Mesh {
            vertices: vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 1.0],
            ],
            tets: vec![[0, 1, 2, 3]],
            labels: vec![0],
            boundary_faces: vec![],
            h: 1.0,
            parents: (0..4).map(|v| (v, v)).collect(),
        };
        let coeffs = CoefficientField::new(vec![iso(1.0)], vec![1.0], 10.0).unwrap();
        let triplets = stiffness_triplets(&mesh, &coeffs).unwrap();
        let mut k = [[0.0; 4]; 4];
        for t in &triplets {
            k[t.row][t.col] += t.val;
        }
        let mass = |i: usize, j: usize| if i == j { 1.0 / 60.0 } else { 1.0 / 120.0 };
        assert_abs_diff_eq!(k[0][0], 0.5 + mass(0, 0), epsilon = 1e-14);
        for i in 1..4 {
            assert_abs_diff_eq!(k[0][i], -1.0 / 6.0 + mass(0, i), epsilon = 1e-14);
            for j in 1..4 {
                let stiff = if i == j { 1.0 / 6.0 } else { 0.0 };
                assert_abs_diff_eq!(k[i][j], stiff + mass(i, j), epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn zero_potential_everywhere_rejected() {
        assert!(matches!(
            CoefficientField::new(vec![iso(1.0), iso(2.0)], vec![0.0, 0.0], 10.0),
            Err(FemError::NotCoercive)
        ));
    }

    #[test]
    fn ellipticity_bound_enforced() {
        assert!(matches!(
            CoefficientField::new(vec![iso(1.0), iso(20.0)], vec![1.0, 1.0], 10.0),
            Err(FemError::NotElliptic { layer: 2 })
        ));
    }

    #[test]
    fn assembled_matrix_symmetric() {
        let mesh = generate_mesh(&unit_cube(0.4), 0.25).unwrap();
        let coeffs =
            CoefficientField::new(vec![iso(1.0), iso(2.0)], vec![0.5, 1.0], 10.0).unwrap();
        let triplets = stiffness_triplets(&mesh, &coeffs).unwrap();
        use std::collections::HashMap;
        let mut k: HashMap<(usize, usize), f64> = HashMap::new();
        for t in &triplets {
            *k.entry((t.row, t.col)).or_insert(0.0) += t.val;
        }
        for (&(i, j), &v) in &k {
            assert_eq!(v, k[&(j, i)], "K[{i},{j}] != K[{j},{i}]");
        }
    }

    #[test]
    fn zero_flux_gives_zero_solution() {
        let mesh = generate_mesh(&unit_cube(0.4), 0.25).unwrap();
        let coeffs =
            CoefficientField::new(vec![iso(1.0), iso(2.0)], vec![1.0, 1.0], 10.0).unwrap();
        let sys = assemble(&mesh, &coeffs).unwrap();
        let u = solve_neumann(&sys, &BoundaryFlux { coeffs: vec![] }).unwrap();
        assert!(u.iter().all(|&v| v.abs() < 1e-14));
    }

    #[test]
    fn flux_outside_sigma_rejected() {
        let mesh = generate_mesh(&unit_cube(0.2), 0.25).unwrap();
        let coeffs = CoefficientField::new(vec![iso(1.0), iso(1.0)], vec![1.0, 1.0], 10.0).unwrap();
        let sys = assemble(&mesh, &coeffs).unwrap();
        // A top-corner node is certainly not on Sigma.
        let off = mesh.vertex_count() - 1;
        assert!(matches!(
            solve_neumann(&sys, &BoundaryFlux { coeffs: vec![(off, 1.0)] }),
            Err(FemError::FluxOffBoundary)
        ));
    }

    #[test]
    fn energy_identity_holds() {
        // a(u, u) = <psi, u> for the discrete solution (Galerkin).
        let mesh = generate_mesh(&unit_cube(0.4), 0.125).unwrap();
        let coeffs =
            CoefficientField::new(vec![iso(1.0), iso(3.0)], vec![0.2, 1.0], 10.0).unwrap();
        let sys = assemble(&mesh, &coeffs).unwrap();
        let node = sys.sigma_nodes()[sys.sigma_nodes().len() / 2];
        let flux = BoundaryFlux { coeffs: vec![(node, 1.0)] };
        let u = solve_neumann(&sys, &flux).unwrap();

        let mut density = vec![0.0; u.len()];
        density[node] = 1.0;
        let a_uu = sys.energy(&u, &u);
        let pairing = sys.boundary_pairing(&density, &u);
        assert!(a_uu > 0.0);
        assert!((a_uu - pairing).abs() <= 1e-9 * a_uu.abs());
    }

    #[test]
    fn galerkin_residual_small() {
        let mesh = generate_mesh(&unit_cube(0.4), 0.25).unwrap();
        let coeffs =
            CoefficientField::new(vec![iso(2.0), iso(1.0)], vec![1.0, 0.5], 10.0).unwrap();
        let sys = assemble(&mesh, &coeffs).unwrap();
        let node = sys.sigma_nodes()[0];
        let flux = BoundaryFlux { coeffs: vec![(node, 1.0)] };
        let u = solve_neumann(&sys, &flux).unwrap();
        let mut density = vec![0.0; u.len()];
        density[node] = 1.0;
        let b = sys.apply_boundary_mass(&density);
        let ku = sys.apply_operator(&u);
        let res: f64 = ku.iter().zip(&b).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let bn: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(res <= 1e-10 * bn.max(1e-300), "residual {res} vs |b| {bn}");
    }

    /// Manufactured solution u* = cosh(sqrt(c) z) solves
    /// -div(grad u) + c u = 0 on the cube; its conormal flux vanishes on
    /// the bottom and side walls and is the constant sqrt(c) sinh(sqrt(c))
    /// on the top, so the discrete right-hand side is exact.
    fn manufactured_l2_error(h: f64) -> f64 {
        let c = 1.0f64;
        let dom = build_layered_domain(
            0.5,
            0.0,
            1.0,
            vec![InterfaceGraph::horizontal_plane(3, 0.0, 1.0)],
            SigmaPatch { center: vec![0.0, 0.0], radius: 0.45 },
            9,
        )
        .unwrap();
        let mesh = generate_mesh(&dom, h).unwrap();
        let coeffs = CoefficientField::new(vec![iso(1.0)], vec![c], 10.0).unwrap();
        let sys = assemble(&mesh, &coeffs).unwrap();

        let rc = c.sqrt();
        let psi_top = rc * rc.sinh();
        let mut rhs = vec![0.0; mesh.vertex_count()];
        for f in &mesh.boundary_faces {
            if f.verts.iter().all(|&v| (mesh.vertices[v][2] - 1.0).abs() < 1e-12) {
                let area = crate::mesh::face_area(
                    &mesh.vertices[f.verts[0]],
                    &mesh.vertices[f.verts[1]],
                    &mesh.vertices[f.verts[2]],
                );
                for &v in &f.verts {
                    rhs[v] += psi_top * area / 3.0;
                }
            }
        }
        let u = sys.solve_rhs(&rhs);

        let exact: Vec<f64> = mesh.vertices.iter().map(|p| (rc * p[2]).cosh()).collect();
        let diff: Vec<f64> = u.iter().zip(&exact).map(|(a, b)| a - b).collect();
        (0..mesh.element_count())
            .map(|t| element_mass_pair(&mesh, t, &diff, &diff))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn manufactured_solution_converges_quadratically() {
        let e1 = manufactured_l2_error(0.25);
        let e2 = manufactured_l2_error(0.125);
        let rate = e1 / e2;
        assert!(
            (3.2..=4.8).contains(&rate),
            "refinement error ratio {rate} (errors {e1:.3e}, {e2:.3e})"
        );
    }
}

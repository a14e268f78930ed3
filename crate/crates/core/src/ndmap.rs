//! Discrete local Neumann-to-Dirichlet map on the accessible patch, the
//! Alessandrini identity, and the quadruple-difference kernel built from
//! unit-integral hat fluxes.

use std::io::{BufRead, Write};

use nalgebra::DMatrix;

use crate::error::NdError;
use crate::fem::{solve_neumann, BoundaryFlux, CoefficientField, DiscreteSystem};
use crate::mesh::Mesh;
use crate::parallel::par_map_indexed;

/// One unit-integral hat flux per accessible-patch node.
#[derive(Debug, Clone)]
pub struct FluxBasis {
    /// Sorted Sigma node ids.
    pub nodes: Vec<usize>,
    /// Normalizations: flux i is weights[i] * hat(nodes[i]), scaled so the
    /// boundary integral is exactly one.
    pub weights: Vec<f64>,
    pub coords: Vec<[f64; 3]>,
}

impl FluxBasis {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn flux(&self, i: usize) -> BoundaryFlux {
        BoundaryFlux { coeffs: vec![(self.nodes[i], self.weights[i])] }
    }

    /// Index of a mesh node in the basis.
    pub fn index_of(&self, node: usize) -> Result<usize, NdError> {
        self.nodes.binary_search(&node).map_err(|_| NdError::NodeOutsideBasis { node })
    }
}

/// Builds the hat-flux basis over the Sigma nodes of a mesh. The integral
/// of the hat at node i over the boundary is its boundary-mass row sum, so
/// the stored weight is its reciprocal.
pub fn flux_basis(system: &DiscreteSystem) -> Result<FluxBasis, NdError> {
    let nodes = system.sigma_nodes().to_vec();
    if nodes.is_empty() {
        return Err(NdError::EmptySigma);
    }
    let n = system.node_count();
    let ones = vec![1.0; n];
    let row_sums = system.apply_boundary_mass(&ones);
    let weights = nodes.iter().map(|&v| 1.0 / row_sums[v]).collect();
    let coords = nodes.iter().map(|&v| system.mesh.vertices[v]).collect();
    Ok(FluxBasis { nodes, weights, coords })
}

/// The N-D map over a flux basis: entries Lambda_ij = <psi_i, u_j> with
/// u_j the Neumann solution for psi_j.
#[derive(Debug, Clone, PartialEq)]
pub struct NdMatrix {
    pub nodes: Vec<usize>,
    pub coords: Vec<[f64; 3]>,
    pub entries: DMatrix<f64>,
}

impl NdMatrix {
    pub fn dim(&self) -> usize {
        self.nodes.len()
    }

    pub fn symmetry_defect(&self) -> f64 {
        let d = (&self.entries - self.entries.transpose()).abs().max();
        d / self.entries.abs().max().max(1e-300)
    }

    /// <psi_a, Lambda psi_b> for basis coefficient vectors a, b.
    pub fn pairing(&self, a: &[f64], b: &[f64]) -> f64 {
        let m = self.dim();
        let mut acc = 0.0;
        for i in 0..m {
            if a[i] == 0.0 {
                continue;
            }
            for j in 0..m {
                acc += a[i] * self.entries[(i, j)] * b[j];
            }
        }
        acc
    }

    pub fn frobenius_distance(&self, other: &NdMatrix) -> f64 {
        (&self.entries - &other.entries).norm()
    }
}

/// Assembles the N-D matrix: one Neumann solve per basis flux against the
/// shared factorization (columns in parallel), then boundary pairings.
pub fn assemble_nd(system: &DiscreteSystem, basis: &FluxBasis) -> Result<NdMatrix, NdError> {
    let m = basis.len();
    let columns = par_map_indexed(m, |j| {
        let u = solve_neumann(system, &basis.flux(j)).expect("basis flux is on Sigma");
        let bu = system.apply_boundary_mass(&u);
        (0..m).map(|i| basis.weights[i] * bu[basis.nodes[i]]).collect::<Vec<f64>>()
    });
    let mut entries = DMatrix::zeros(m, m);
    for (j, col) in columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            entries[(i, j)] = v;
        }
    }
    Ok(NdMatrix { nodes: basis.nodes.clone(), coords: basis.coords.clone(), entries })
}

/// Assembles only the requested columns of the N-D matrix (all other
/// entries stay zero). Kernel probing reads entries in the columns of the
/// pole and the two far reference nodes only, so three solves suffice per
/// probe site instead of one per basis function.
pub fn assemble_nd_columns(
    system: &DiscreteSystem,
    basis: &FluxBasis,
    cols: &[usize],
) -> Result<NdMatrix, NdError> {
    let m = basis.len();
    for &j in cols {
        if j >= m {
            return Err(NdError::NodeOutsideBasis { node: j });
        }
    }
    let columns = par_map_indexed(cols.len(), |k| {
        let j = cols[k];
        let u = solve_neumann(system, &basis.flux(j)).expect("basis flux is on Sigma");
        let bu = system.apply_boundary_mass(&u);
        (0..m).map(|i| basis.weights[i] * bu[basis.nodes[i]]).collect::<Vec<f64>>()
    });
    let mut entries = DMatrix::zeros(m, m);
    for (k, col) in columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            entries[(i, cols[k])] = v;
        }
    }
    Ok(NdMatrix { nodes: basis.nodes.clone(), coords: basis.coords.clone(), entries })
}

/// N-D matrix of a coarse flux basis measured on a refined mesh: each
/// coarse hat is expressed exactly as a combination of fine hats through
/// the refinement ancestry (one level). This manufactures boundary data on
/// a mesh the inversion never sees while keeping the basis comparable
/// entry by entry.
pub fn assemble_nd_projected(
    fine_system: &DiscreteSystem,
    coarse_mesh: &Mesh,
    coarse_basis: &FluxBasis,
) -> Result<NdMatrix, NdError> {
    let m = coarse_basis.len();
    let densities = coarse_hat_densities(fine_system, coarse_mesh, coarse_basis)?;

    // Batched fine solves, in chunks to bound the dense block size.
    let n = fine_system.node_count();
    let mut entries = DMatrix::zeros(m, m);
    for chunk in (0..m).collect::<Vec<_>>().chunks(64) {
        let rhs: Vec<Vec<f64>> = chunk
            .iter()
            .map(|&j| {
                let mut d = vec![0.0; n];
                for &(f, v) in &densities[j] {
                    d[f] = v;
                }
                fine_system.apply_boundary_mass(&d)
            })
            .collect();
        let sols = fine_system.solve_rhs_batch(&rhs);
        for (&j, u) in chunk.iter().zip(&sols) {
            let bu = fine_system.apply_boundary_mass(u);
            for i in 0..m {
                entries[(i, j)] =
                    densities[i].iter().map(|&(f, v)| v * bu[f]).sum::<f64>();
            }
        }
    }
    Ok(NdMatrix {
        nodes: coarse_basis.nodes.clone(),
        coords: coarse_basis.coords.clone(),
        entries,
    })
}

/// Sparse fine-mesh nodal values of each normalized coarse hat density
/// w_i hat_i: 1 at the coarse node, 1/2 at the midpoints of coarse edges
/// containing it (the coarse hat is piecewise linear, hence exactly
/// representable on the nested refinement).
fn coarse_hat_densities(
    fine_system: &DiscreteSystem,
    coarse_mesh: &Mesh,
    coarse_basis: &FluxBasis,
) -> Result<Vec<Vec<(usize, f64)>>, NdError> {
    let fine = &fine_system.mesh;
    if fine.parents.len() != fine.vertex_count()
        || coarse_mesh.vertex_count() > fine.vertex_count()
    {
        return Err(NdError::MeshMismatch);
    }
    let mut densities: Vec<Vec<(usize, f64)>> = coarse_basis
        .nodes
        .iter()
        .zip(&coarse_basis.weights)
        .map(|(&v, &w)| vec![(v, w)])
        .collect();
    for (f, &(a, b)) in fine.parents.iter().enumerate() {
        if a == b {
            continue;
        }
        for &parent in &[a, b] {
            if let Ok(i) = coarse_basis.index_of(parent) {
                densities[i].push((f, 0.5 * coarse_basis.weights[i]));
            }
        }
    }
    Ok(densities)
}

/// Both sides of the Alessandrini identity for flux coefficient vectors
/// psi1, psi2 over the shared basis:
///   lhs = <psi1, (Lambda2 - Lambda1) psi2>,
///   rhs = int (sigma1 - sigma2) grad u1 . grad u2 + (q1 - q2) u1 u2,
/// with u1 solved under coefficients 1 and u2 under coefficients 2.
#[allow(clippy::too_many_arguments)]
pub fn alessandrini_gap(
    sys1: &DiscreteSystem,
    sys2: &DiscreteSystem,
    lambda1: &NdMatrix,
    lambda2: &NdMatrix,
    basis: &FluxBasis,
    psi1: &[f64],
    psi2: &[f64],
    coeffs1: &CoefficientField,
    coeffs2: &CoefficientField,
) -> Result<(f64, f64), NdError> {
    if sys1.node_count() != sys2.node_count() || lambda1.nodes != lambda2.nodes {
        return Err(NdError::MeshMismatch);
    }
    let m = basis.len();
    let mut gap = 0.0;
    for i in 0..m {
        for j in 0..m {
            gap += psi1[i] * (lambda2.entries[(i, j)] - lambda1.entries[(i, j)]) * psi2[j];
        }
    }

    let combine = |psi: &[f64]| BoundaryFlux {
        coeffs: (0..m)
            .filter(|&i| psi[i] != 0.0)
            .map(|i| (basis.nodes[i], psi[i] * basis.weights[i]))
            .collect(),
    };
    let u1 = solve_neumann(sys1, &combine(psi1))?;
    let u2 = solve_neumann(sys2, &combine(psi2))?;

    let mesh = &sys1.mesh;
    let mut rhs = 0.0;
    for t in 0..mesh.element_count() {
        let label = mesh.labels[t];
        let g1 = crate::fem::field_gradient(mesh, t, &u1);
        let g2 = crate::fem::field_gradient(mesh, t, &u2);
        let vol = mesh.signed_volume(t);
        let mut grad_term = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                grad_term +=
                    (coeffs1.sigmas[label].get(r, c) - coeffs2.sigmas[label].get(r, c))
                        * g1[r]
                        * g2[c];
            }
        }
        rhs += grad_term * vol
            + (coeffs1.qs[label] - coeffs2.qs[label])
                * crate::fem::element_mass_pair(mesh, t, &u1, &u2);
    }
    Ok((gap, rhs))
}

/// Quadruple-difference kernel
/// K(x, y, w, z) = L(x,y) - L(x,w) - L(z,y) + L(z,w)
/// over basis indices; the four nodes must be distinct.
pub fn k_kernel(
    lambda: &NdMatrix,
    x: usize,
    y: usize,
    w: usize,
    z: usize,
) -> Result<f64, NdError> {
    let ids = [x, y, w, z];
    for &i in &ids {
        if i >= lambda.dim() {
            return Err(NdError::NodeOutsideBasis { node: i });
        }
    }
    for a in 0..4 {
        for b in a + 1..4 {
            if ids[a] == ids[b] {
                return Err(NdError::CoincidingPoints);
            }
        }
    }
    Ok(k_kernel_unchecked(lambda, x, y, w, z))
}

/// Kernel combination without the distinctness check; used for telescoping
/// self-tests where arguments intentionally coincide.
pub fn k_kernel_unchecked(lambda: &NdMatrix, x: usize, y: usize, w: usize, z: usize) -> f64 {
    let l = &lambda.entries;
    l[(x, y)] - l[(x, w)] - l[(z, y)] + l[(z, w)]
}

/// Writes the N-D matrix as CSV: a basis block (index, node id, x, y, z)
/// then the dense matrix, floats printed with enough digits to round-trip
/// bit-exactly.
pub fn write_csv<W: Write>(lambda: &NdMatrix, mut out: W) -> std::io::Result<()> {
    writeln!(out, "# nd-matrix v1")?;
    writeln!(out, "# basis: index,node,x,y,z")?;
    for (i, (&node, c)) in lambda.nodes.iter().zip(&lambda.coords).enumerate() {
        writeln!(out, "basis,{i},{node},{:.17e},{:.17e},{:.17e}", c[0], c[1], c[2])?;
    }
    let m = lambda.dim();
    for i in 0..m {
        let row: Vec<String> = (0..m).map(|j| format!("{:.17e}", lambda.entries[(i, j)])).collect();
        writeln!(out, "row,{i},{}", row.join(","))?;
    }
    Ok(())
}

/// Reads the CSV form written by [`write_csv`].
pub fn read_csv<R: BufRead>(input: R) -> Result<NdMatrix, NdError> {
    let bad = |msg: &str| NdError::MalformedFile(msg.to_string());
    let mut nodes = Vec::new();
    let mut coords = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in input.lines() {
        let line = line.map_err(|e| bad(&e.to_string()))?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        match fields[0] {
            "basis" => {
                if fields.len() != 6 {
                    return Err(bad("basis line needs 6 fields"));
                }
                nodes.push(fields[2].parse::<usize>().map_err(|e| bad(&e.to_string()))?);
                let mut c = [0.0; 3];
                for k in 0..3 {
                    c[k] = fields[3 + k].parse::<f64>().map_err(|e| bad(&e.to_string()))?;
                }
                coords.push(c);
            }
            "row" => {
                let vals: Result<Vec<f64>, _> =
                    fields[2..].iter().map(|s| s.parse::<f64>()).collect();
                rows.push(vals.map_err(|e| bad(&e.to_string()))?);
            }
            other => return Err(bad(&format!("unknown record `{other}`"))),
        }
    }
    let m = nodes.len();
    if rows.len() != m || rows.iter().any(|r| r.len() != m) {
        return Err(bad("matrix block does not match basis size"));
    }
    let entries = DMatrix::from_fn(m, m, |i, j| rows[i][j]);
    Ok(NdMatrix { nodes, coords, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::assemble;
    use crate::geometry::{build_layered_domain, InterfaceGraph, LayeredDomain, SigmaPatch};
    use crate::mesh::generate_mesh;
    use crate::tensor::SymTensor;
    use approx::assert_abs_diff_eq;

    fn cube(sigma_radius: f64) -> LayeredDomain {
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

    fn iso_field(c1: f64, c2: f64, q1: f64, q2: f64) -> CoefficientField {
        CoefficientField::new(
            vec![
                SymTensor::from_diagonal(&[c1, c1, c1]),
                SymTensor::from_diagonal(&[c2, c2, c2]),
            ],
            vec![q1, q2],
            100.0,
        )
        .unwrap()
    }

    #[test]
    fn basis_fluxes_have_unit_integral() {
        let mesh = generate_mesh(&cube(0.4), 0.125).unwrap();
        let sys = assemble(&mesh, &iso_field(1.0, 2.0, 1.0, 1.0)).unwrap();
        let basis = flux_basis(&sys).unwrap();
        assert!(basis.len() > 0);
        // Independent integral: sum over faces of area/3 per hat vertex.
        for (i, &node) in basis.nodes.iter().enumerate() {
            let mut integral = 0.0;
            for f in &mesh.boundary_faces {
                if f.verts.contains(&node) {
                    integral += crate::mesh::face_area(
                        &mesh.vertices[f.verts[0]],
                        &mesh.vertices[f.verts[1]],
                        &mesh.vertices[f.verts[2]],
                    ) / 3.0;
                }
            }
            assert_abs_diff_eq!(basis.weights[i] * integral, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn empty_sigma_rejected() {
        let mesh = generate_mesh(&cube(0.01), 0.25).unwrap();
        let sys = assemble(&mesh, &iso_field(1.0, 1.0, 1.0, 1.0)).unwrap();
        assert!(matches!(flux_basis(&sys), Err(NdError::EmptySigma)));
    }

    #[test]
    fn nd_matrix_symmetric_and_positive() {
        let mesh = generate_mesh(&cube(0.4), 0.25).unwrap();
        let sys = assemble(&mesh, &iso_field(1.0, 2.0, 0.5, 1.0)).unwrap();
        let basis = flux_basis(&sys).unwrap();
        let lambda = assemble_nd(&sys, &basis).unwrap();
        assert!(lambda.symmetry_defect() <= 1e-10);
        for i in 0..lambda.dim() {
            assert!(lambda.entries[(i, i)] > 0.0);
        }
        // Positive definiteness of the full matrix.
        let half = (&lambda.entries + lambda.entries.transpose()) * 0.5;
        assert!(half.cholesky().is_some());
    }

    #[test]
    fn doubling_q_decreases_the_map() {
        let mesh = generate_mesh(&cube(0.4), 0.25).unwrap();
        let sys1 = assemble(&mesh, &iso_field(1.0, 2.0, 0.5, 1.0)).unwrap();
        let sys2 = assemble(&mesh, &iso_field(1.0, 2.0, 1.0, 2.0)).unwrap();
        let basis = flux_basis(&sys1).unwrap();
        let l1 = assemble_nd(&sys1, &basis).unwrap();
        let l2 = assemble_nd(&sys2, &basis).unwrap();
        for i in 0..basis.len() {
            let mut e = vec![0.0; basis.len()];
            e[i] = 1.0;
            assert!(l2.pairing(&e, &e) < l1.pairing(&e, &e));
        }
    }

    #[test]
    fn alessandrini_identity_zero_for_equal_fields() {
        let mesh = generate_mesh(&cube(0.4), 0.25).unwrap();
        let coeffs = iso_field(1.0, 2.0, 0.5, 1.0);
        let sys = assemble(&mesh, &coeffs).unwrap();
        let basis = flux_basis(&sys).unwrap();
        let lambda = assemble_nd(&sys, &basis).unwrap();
        let mut p1 = vec![0.0; basis.len()];
        let mut p2 = vec![0.0; basis.len()];
        p1[0] = 1.0;
        p2[basis.len() / 2] = 1.0;
        let (lhs, rhs) =
            alessandrini_gap(&sys, &sys, &lambda, &lambda, &basis, &p1, &p2, &coeffs, &coeffs)
                .unwrap();
        assert!(lhs.abs() < 1e-10);
        assert!(rhs.abs() < 1e-10);
    }

    #[test]
    fn alessandrini_identity_exact_for_perturbed_fields() {
        let mesh = generate_mesh(&cube(0.4), 0.25).unwrap();
        let c1 = iso_field(1.0, 2.0, 0.5, 1.0);
        let c2 = iso_field(1.0, 2.2, 0.5, 1.3);
        let sys1 = assemble(&mesh, &c1).unwrap();
        let sys2 = assemble(&mesh, &c2).unwrap();
        let basis = flux_basis(&sys1).unwrap();
        let l1 = assemble_nd(&sys1, &basis).unwrap();
        let l2 = assemble_nd(&sys2, &basis).unwrap();
        let mut p1 = vec![0.0; basis.len()];
        let mut p2 = vec![0.0; basis.len()];
        p1[1] = 1.0;
        p1[3] = -0.5;
        p2[2] = 2.0;
        let (lhs, rhs) =
            alessandrini_gap(&sys1, &sys2, &l1, &l2, &basis, &p1, &p2, &c1, &c2).unwrap();
        assert!(
            (lhs - rhs).abs() <= 1e-8 * rhs.abs().max(1e-300),
            "lhs {lhs:.16e} rhs {rhs:.16e}"
        );

        // Swapping the roles negates both sides.
        let (lhs_s, rhs_s) =
            alessandrini_gap(&sys2, &sys1, &l2, &l1, &basis, &p1, &p2, &c2, &c1).unwrap();
        assert_abs_diff_eq!(lhs_s, -lhs, epsilon = 1e-12 * lhs.abs().max(1.0));
        assert_abs_diff_eq!(rhs_s, -rhs, epsilon = 1e-10 * rhs.abs().max(1.0));
    }

    #[test]
    fn kernel_telescopes_and_inherits_symmetry() {
        let mesh = generate_mesh(&cube(0.4), 0.25).unwrap();
        let sys = assemble(&mesh, &iso_field(1.0, 2.0, 0.5, 1.0)).unwrap();
        let basis = flux_basis(&sys).unwrap();
        let lambda = assemble_nd(&sys, &basis).unwrap();
        // Coinciding first/third arguments telescope to zero.
        assert_eq!(k_kernel_unchecked(&lambda, 0, 1, 2, 0), 0.0);
        assert_eq!(k_kernel_unchecked(&lambda, 0, 1, 1, 2), 0.0);
        assert!(matches!(k_kernel(&lambda, 0, 1, 2, 0), Err(NdError::CoincidingPoints)));

        let k1 = k_kernel(&lambda, 0, 1, 2, 3).unwrap();
        let k2 = k_kernel(&lambda, 1, 0, 3, 2).unwrap();
        assert!((k1 - k2).abs() <= 1e-10 * k1.abs().max(1e-300));
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let mesh = generate_mesh(&cube(0.4), 0.25).unwrap();
        let sys = assemble(&mesh, &iso_field(1.3, 2.7, 0.9, 1.1)).unwrap();
        let basis = flux_basis(&sys).unwrap();
        let lambda = assemble_nd(&sys, &basis).unwrap();
        let mut buf = Vec::new();
        write_csv(&lambda, &mut buf).unwrap();
        let back = read_csv(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(lambda, back);
    }

    #[test]
    fn projected_map_matches_direct_map_on_flat_data() {
        // For sigma = I, q = const the projected coarse-basis map on the
        // fine mesh approximates the coarse map (they differ by the
        // discretization gap, which must be small but nonzero).
        let mesh = generate_mesh(&cube(0.4), 0.25).unwrap();
        let fine = crate::mesh::refine(&mesh).unwrap();
        let coeffs = iso_field(1.0, 1.0, 1.0, 1.0);
        let sys = assemble(&mesh, &coeffs).unwrap();
        let fine_sys = assemble(&fine, &coeffs).unwrap();
        let basis = flux_basis(&sys).unwrap();
        let direct = assemble_nd(&sys, &basis).unwrap();
        let projected = assemble_nd_projected(&fine_sys, &mesh, &basis).unwrap();
        assert_eq!(direct.nodes, projected.nodes);
        let rel = direct.frobenius_distance(&projected) / direct.entries.norm();
        assert!(rel > 0.0, "meshes differ, so must the maps");
        assert!(rel < 0.05, "relative gap {rel}");
    }
}

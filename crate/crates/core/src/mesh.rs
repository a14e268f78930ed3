//! Structured tetrahedral meshes of layered domains. Each grid cell is
//! split into six tetrahedra sharing the main diagonal (Kuhn split), and
//! vertex sheets are warped vertically so every interface coincides with a
//! vertex sheet; coefficients stay element-wise constant exactly. Uniform
//! red refinement produces an exactly nested fine mesh, which the recovery
//! pipeline uses to manufacture data off the inversion mesh.

use std::collections::HashMap;

use crate::error::FemError;
use crate::geometry::LayeredDomain;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaceTag {
    /// Accessible patch on the bottom graph where fluxes are applied.
    Sigma,
    /// The rest of the boundary.
    Delta,
}

#[derive(Debug, Clone)]
pub struct BoundaryFace {
    pub verts: [usize; 3],
    pub tag: FaceTag,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    /// Positively oriented vertex index 4-tuples.
    pub tets: Vec<[usize; 4]>,
    /// 0-based layer index per element.
    pub labels: Vec<usize>,
    pub boundary_faces: Vec<BoundaryFace>,
    /// Target edge length used to build the mesh.
    pub h: f64,
    /// Refinement ancestry: vertex v interpolates vertices parents[v].0 and
    /// parents[v].1 with equal weights (a == b for original vertices).
    pub parents: Vec<(usize, usize)>,
}

impl Mesh {
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn element_count(&self) -> usize {
        self.tets.len()
    }

    pub fn layer_count(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }

    /// Sorted node ids that belong to at least one Sigma face.
    pub fn sigma_nodes(&self) -> Vec<usize> {
        let mut nodes: Vec<usize> = self
            .boundary_faces
            .iter()
            .filter(|f| f.tag == FaceTag::Sigma)
            .flat_map(|f| f.verts)
            .collect();
        nodes.sort_unstable();
        nodes.dedup();
        nodes
    }

    pub fn signed_volume(&self, t: usize) -> f64 {
        let [a, b, c, d] = self.tets[t];
        signed_volume(
            &self.vertices[a],
            &self.vertices[b],
            &self.vertices[c],
            &self.vertices[d],
        )
    }

    pub fn centroid(&self, t: usize) -> [f64; 3] {
        let mut c = [0.0; 3];
        for &v in &self.tets[t] {
            for k in 0..3 {
                c[k] += self.vertices[v][k] / 4.0;
            }
        }
        c
    }
}

pub fn signed_volume(a: &[f64; 3], b: &[f64; 3], c: &[f64; 3], d: &[f64; 3]) -> f64 {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let w = [d[0] - a[0], d[1] - a[1], d[2] - a[2]];
    (u[0] * (v[1] * w[2] - v[2] * w[1]) - u[1] * (v[0] * w[2] - v[2] * w[0])
        + u[2] * (v[0] * w[1] - v[1] * w[0]))
        / 6.0
}

pub fn face_area(a: &[f64; 3], b: &[f64; 3], c: &[f64; 3]) -> f64 {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let n = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    0.5 * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt()
}

/// The six Kuhn tetrahedra of a cell, as paths 000 -> 111 adding one axis
/// at a time; every tet contains the main diagonal, so neighboring cells
/// triangulate shared faces identically.
const KUHN_PERMS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

/// Builds the structured conforming mesh of a layered domain with target
/// edge length h. Every interface becomes a vertex sheet; each layer gets
/// at least two element sheets.
pub fn generate_mesh(domain: &LayeredDomain, h: f64) -> Result<Mesh, FemError> {
    assert!(h > 0.0);
    let r = domain.half_width;
    let nx = ((2.0 * r / h).round() as usize).max(1);
    let xs: Vec<f64> = (0..=nx).map(|i| -r + 2.0 * r * i as f64 / nx as f64).collect();

    let n_layers = domain.layer_count();

    // Layer thickness statistics over the grid; phi_N := z_max.
    let mut min_th = vec![f64::INFINITY; n_layers];
    let mut sum_th = vec![0.0; n_layers];
    for &x in &xs {
        for &y in &xs {
            let xp = [x, y];
            let mut prev = eval_phi(domain, 0, &xp)?;
            for k in 1..=n_layers {
                let cur = if k < n_layers { eval_phi(domain, k, &xp)? } else { domain.z_max };
                let t = cur - prev;
                min_th[k - 1] = min_th[k - 1].min(t);
                sum_th[k - 1] += t;
                prev = cur;
            }
        }
    }
    let cols = xs.len() * xs.len();
    let mut sheets = Vec::with_capacity(n_layers);
    for k in 0..n_layers {
        if min_th[k] < 2.0 * h {
            return Err(FemError::LayerTooThin { layer: k + 1, thickness: min_th[k], h });
        }
        let mean = sum_th[k] / cols as f64;
        sheets.push(((mean / h).round() as usize).max(2));
    }
    let nz: usize = sheets.iter().sum();
    // Cumulative sheet index at the top of each layer.
    let mut cum = vec![0usize];
    for &m in &sheets {
        cum.push(cum.last().unwrap() + m);
    }

    // Vertices: column-major over (i, j), levels innermost — deterministic.
    let vid = |i: usize, j: usize, l: usize| l + (nz + 1) * (j + (nx + 1) * i);
    let mut vertices = vec![[0.0; 3]; (nx + 1) * (nx + 1) * (nz + 1)];
    for (i, &x) in xs.iter().enumerate() {
        for (j, &y) in xs.iter().enumerate() {
            let xp = [x, y];
            let mut levels = Vec::with_capacity(nz + 1);
            let mut lo = eval_phi(domain, 0, &xp)?;
            levels.push(lo);
            for k in 0..n_layers {
                let hi = if k + 1 < n_layers { eval_phi(domain, k + 1, &xp)? } else { domain.z_max };
                for s in 1..=sheets[k] {
                    levels.push(lo + (hi - lo) * s as f64 / sheets[k] as f64);
                }
                lo = hi;
            }
            for (l, &z) in levels.iter().enumerate() {
                vertices[vid(i, j, l)] = [x, y, z];
            }
        }
    }

    // Elements: six Kuhn tets per cell. Cell levels [l, l+1) in layer k
    // exactly when cum[k] <= l < cum[k+1].
    let layer_of_level = |l: usize| cum.iter().position(|&c| l < c).unwrap() - 1;
    let mut tets = Vec::with_capacity(nx * nx * nz * 6);
    let mut labels = Vec::with_capacity(nx * nx * nz * 6);
    for i in 0..nx {
        for j in 0..nx {
            for l in 0..nz {
                let corner = |dx: usize, dy: usize, dz: usize| vid(i + dx, j + dy, l + dz);
                let label = layer_of_level(l); // 0-based layer index
                for perm in &KUHN_PERMS {
                    let mut d = [0usize; 3];
                    let mut tet = [corner(0, 0, 0), 0, 0, corner(1, 1, 1)];
                    d[perm[0]] = 1;
                    tet[1] = corner(d[0], d[1], d[2]);
                    d[perm[1]] = 1;
                    tet[2] = corner(d[0], d[1], d[2]);
                    tets.push(orient(&vertices, tet)?);
                    labels.push(label);
                }
            }
        }
    }

    // Sigma vertex flags: on the bottom sheet and inside the flux disc.
    let patch = &domain.sigma_patch;
    let mut on_sigma = vec![false; vertices.len()];
    for i in 0..=nx {
        for j in 0..=nx {
            let v = vid(i, j, 0);
            let dx = vertices[v][0] - patch.center[0];
            let dy = vertices[v][1] - patch.center[1];
            on_sigma[v] = (dx * dx + dy * dy).sqrt() <= patch.radius + 1e-12;
        }
    }

    let boundary_faces = collect_boundary_faces(&tets, &on_sigma);
    let parents = (0..vertices.len()).map(|v| (v, v)).collect();
    Ok(Mesh { vertices, tets, labels, boundary_faces, h, parents })
}

fn eval_phi(domain: &LayeredDomain, k: usize, xp: &[f64; 2]) -> Result<f64, FemError> {
    Ok(domain.interfaces[k].eval(xp)?)
}

fn orient(vertices: &[[f64; 3]], mut tet: [usize; 4]) -> Result<[usize; 4], FemError> {
    let vol = signed_volume(
        &vertices[tet[0]],
        &vertices[tet[1]],
        &vertices[tet[2]],
        &vertices[tet[3]],
    );
    if vol.abs() < 1e-14 {
        return Err(FemError::DegenerateElement { element: 0, volume: vol });
    }
    if vol < 0.0 {
        tet.swap(2, 3);
    }
    Ok(tet)
}

/// Boundary faces are those shared by exactly one element; a face is Sigma
/// when all three vertices carry the Sigma flag.
fn collect_boundary_faces(tets: &[[usize; 4]], on_sigma: &[bool]) -> Vec<BoundaryFace> {
    let mut counts: HashMap<[usize; 3], usize> = HashMap::new();
    for tet in tets {
        for f in tet_faces(tet) {
            *counts.entry(sorted3(f)).or_insert(0) += 1;
        }
    }
    let mut faces: Vec<BoundaryFace> = counts
        .into_iter()
        .filter(|&(_, c)| c == 1)
        .map(|(verts, _)| {
            let tag = if verts.iter().all(|&v| on_sigma[v]) { FaceTag::Sigma } else { FaceTag::Delta };
            BoundaryFace { verts, tag }
        })
        .collect();
    faces.sort_by_key(|f| f.verts);
    faces
}

fn tet_faces(t: &[usize; 4]) -> [[usize; 3]; 4] {
    [
        [t[0], t[1], t[2]],
        [t[0], t[1], t[3]],
        [t[0], t[2], t[3]],
        [t[1], t[2], t[3]],
    ]
}

fn sorted3(mut f: [usize; 3]) -> [usize; 3] {
    f.sort_unstable();
    f
}

/// Uniform red refinement: each tetrahedron splits into eight through its
/// edge midpoints (four corner tets plus a diagonally split octahedron).
/// The result is exactly nested: original vertices keep their indices and
/// every new vertex is the midpoint of a recorded parent pair.
pub fn refine(mesh: &Mesh) -> Result<Mesh, FemError> {
    let mut vertices = mesh.vertices.clone();
    let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut parents: Vec<(usize, usize)> = (0..vertices.len()).map(|v| (v, v)).collect();
    let mut mid = |a: usize, b: usize, vertices: &mut Vec<[f64; 3]>, parents: &mut Vec<(usize, usize)>| {
        let key = if a < b { (a, b) } else { (b, a) };
        *midpoint.entry(key).or_insert_with(|| {
            let pa = vertices[a];
            let pb = vertices[b];
            vertices.push([
                0.5 * (pa[0] + pb[0]),
                0.5 * (pa[1] + pb[1]),
                0.5 * (pa[2] + pb[2]),
            ]);
            parents.push(key);
            vertices.len() - 1
        })
    };

    let mut tets = Vec::with_capacity(mesh.tets.len() * 8);
    let mut labels = Vec::with_capacity(mesh.tets.len() * 8);
    for (t, tet) in mesh.tets.iter().enumerate() {
        let [v0, v1, v2, v3] = *tet;
        let m01 = mid(v0, v1, &mut vertices, &mut parents);
        let m02 = mid(v0, v2, &mut vertices, &mut parents);
        let m03 = mid(v0, v3, &mut vertices, &mut parents);
        let m12 = mid(v1, v2, &mut vertices, &mut parents);
        let m13 = mid(v1, v3, &mut vertices, &mut parents);
        let m23 = mid(v2, v3, &mut vertices, &mut parents);
        let children = [
            [v0, m01, m02, m03],
            [m01, v1, m12, m13],
            [m02, m12, v2, m23],
            [m03, m13, m23, v3],
            [m01, m02, m03, m13],
            [m01, m02, m12, m13],
            [m02, m03, m13, m23],
            [m02, m12, m13, m23],
        ];
        for child in children {
            tets.push(orient(&vertices, child)?);
            labels.push(mesh.labels[t]);
        }
    }

    // Sigma membership propagates to midpoints of Sigma-Sigma boundary
    // edges: boundary faces are planar, so those midpoints stay on Sigma.
    let mut on_sigma = vec![false; vertices.len()];
    for f in &mesh.boundary_faces {
        if f.tag == FaceTag::Sigma {
            for &v in &f.verts {
                on_sigma[v] = true;
            }
        }
    }
    for (v, &(a, b)) in parents.iter().enumerate() {
        if a != b && on_sigma[a] && on_sigma[b] {
            on_sigma[v] = true;
        }
    }

    let boundary_faces = collect_boundary_faces(&tets, &on_sigma);
    Ok(Mesh { vertices, tets, labels, boundary_faces, h: mesh.h / 2.0, parents })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_layered_domain, InterfaceGraph, SigmaPatch};
    use approx::assert_abs_diff_eq;

    fn unit_cube_two_layers() -> LayeredDomain {
        build_layered_domain(
            0.5,
            0.0,
            1.0,
            vec![
                InterfaceGraph::horizontal_plane(3, 0.0, 1.0),
                InterfaceGraph::horizontal_plane(3, 0.5, 1.0),
            ],
            SigmaPatch { center: vec![0.0, 0.0], radius: 0.4 },
            9,
        )
        .unwrap()
    }

    #[test]
    fn unit_cube_plane_interface_counts() {
        let mesh = generate_mesh(&unit_cube_two_layers(), 0.25).unwrap();
        assert_eq!(mesh.element_count(), 384); // 4x4x4 cells, 6 tets each
        let below = mesh.labels.iter().filter(|&&l| l == 0).count();
        assert_eq!(below, 192);
        assert_eq!(mesh.labels.len() - below, 192);
    }

    #[test]
    fn volumes_positive_and_sum_to_box() {
        let mesh = generate_mesh(&unit_cube_two_layers(), 0.25).unwrap();
        let mut total = 0.0;
        for t in 0..mesh.element_count() {
            let v = mesh.signed_volume(t);
            assert!(v > 0.0);
            total += v;
        }
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn paraboloid_interface_labels_by_centroid_sign() {
        let dom = build_layered_domain(
            0.5,
            0.0,
            1.0,
            vec![
                InterfaceGraph::horizontal_plane(3, 0.0, 1.0),
                InterfaceGraph::paraboloid(3, 0.45, 0.2, 1.0),
            ],
            SigmaPatch { center: vec![0.0, 0.0], radius: 0.4 },
            9,
        )
        .unwrap();
        let mesh = generate_mesh(&dom, 0.1).unwrap();
        for t in 0..mesh.element_count() {
            let c = mesh.centroid(t);
            let phi = dom.interfaces[1].eval(&[c[0], c[1]]).unwrap();
            let expect = if c[2] < phi { 0 } else { 1 };
            assert_eq!(mesh.labels[t], expect, "element {t} centroid {c:?}");
        }
    }

    #[test]
    fn thin_layer_rejected() {
        let dom = unit_cube_two_layers();
        assert!(matches!(
            generate_mesh(&dom, 0.3),
            Err(FemError::LayerTooThin { .. })
        ));
    }

    #[test]
    fn boundary_faces_close_the_cube() {
        let mesh = generate_mesh(&unit_cube_two_layers(), 0.25).unwrap();
        let area: f64 = mesh
            .boundary_faces
            .iter()
            .map(|f| {
                face_area(
                    &mesh.vertices[f.verts[0]],
                    &mesh.vertices[f.verts[1]],
                    &mesh.vertices[f.verts[2]],
                )
            })
            .sum();
        assert_abs_diff_eq!(area, 6.0, epsilon = 1e-12);
    }

    #[test]
    fn sigma_faces_lie_in_flux_disc_on_bottom() {
        let mesh = generate_mesh(&unit_cube_two_layers(), 0.125).unwrap();
        let sigma_count = mesh
            .boundary_faces
            .iter()
            .filter(|f| f.tag == FaceTag::Sigma)
            .count();
        assert!(sigma_count > 0);
        for f in &mesh.boundary_faces {
            if f.tag == FaceTag::Sigma {
                for &v in &f.verts {
                    let p = mesh.vertices[v];
                    assert_abs_diff_eq!(p[2], 0.0, epsilon = 1e-10);
                    assert!((p[0] * p[0] + p[1] * p[1]).sqrt() <= 0.4 + 1e-10);
                }
            }
        }
    }

    #[test]
    fn refinement_is_nested_and_volume_preserving() {
        let coarse = generate_mesh(&unit_cube_two_layers(), 0.25).unwrap();
        let fine = refine(&coarse).unwrap();
        assert_eq!(fine.element_count(), coarse.element_count() * 8);

        // Original vertices keep indices; midpoints average their parents.
        for v in 0..coarse.vertex_count() {
            assert_eq!(fine.vertices[v], coarse.vertices[v]);
            assert_eq!(fine.parents[v], (v, v));
        }
        for v in coarse.vertex_count()..fine.vertex_count() {
            let (a, b) = fine.parents[v];
            for k in 0..3 {
                assert_abs_diff_eq!(
                    fine.vertices[v][k],
                    0.5 * (fine.vertices[a][k] + fine.vertices[b][k]),
                    epsilon = 1e-15
                );
            }
        }

        let vol = |m: &Mesh| (0..m.element_count()).map(|t| m.signed_volume(t)).sum::<f64>();
        assert_abs_diff_eq!(vol(&fine), vol(&coarse), epsilon = 1e-12);
        for t in 0..fine.element_count() {
            assert!(fine.signed_volume(t) > 0.0);
        }
    }

    #[test]
    fn refinement_quadruples_sigma_faces() {
        let coarse = generate_mesh(&unit_cube_two_layers(), 0.25).unwrap();
        let fine = refine(&coarse).unwrap();
        let count = |m: &Mesh| m.boundary_faces.iter().filter(|f| f.tag == FaceTag::Sigma).count();
        assert_eq!(count(&fine), 4 * count(&coarse));
    }
}

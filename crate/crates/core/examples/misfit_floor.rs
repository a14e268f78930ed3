//! Measures the discretization gap between the inversion-mesh N-D response
//! and the same coefficients measured on a one-level-refined mesh, both
//! tested against smooth polynomial flux profiles interpolated into the
//! hat basis. The squared relative gap is the floor no coefficient fit can
//! undercut.
//!
//! Usage: misfit_floor <h> [half_width] [patch_radius] [degree]

use std::time::Instant;

use layerlab_core::fem::{assemble, solve_neumann, BoundaryFlux, CoefficientField};
use layerlab_core::geometry::{build_layered_domain, InterfaceGraph, SigmaPatch};
use layerlab_core::mesh::{generate_mesh, refine};
use layerlab_core::ndmap::flux_basis;
use layerlab_core::tensor::SymTensor;
use nalgebra::DMatrix;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let h: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.15);
    let half_width: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2.6);
    let patch_radius: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2.2);
    let degree: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(4);

    let domain = build_layered_domain(
        half_width,
        -0.1,
        2.0,
        vec![
            InterfaceGraph::polynomial(3, vec![0.0, 0.12, -0.008], half_width * 1.8),
            InterfaceGraph::polynomial(3, vec![1.1, -0.04, 0.0], half_width * 1.8),
        ],
        SigmaPatch { center: vec![0.0, 0.0], radius: patch_radius },
        33,
    )
    .unwrap();

    let c = 30.0f64.to_radians();
    let q_rot = DMatrix::from_row_slice(
        3,
        3,
        &[1.0, 0.0, 0.0, 0.0, c.cos(), -c.sin(), 0.0, c.sin(), c.cos()],
    );
    let sigma2 = SymTensor::from_diagonal(&[2.0, 2.0, 0.5]).rotate(&q_rot);
    let coeffs = CoefficientField::new(
        vec![SymTensor::identity(3), sigma2],
        vec![0.2, 1.0],
        100.0,
    )
    .unwrap();

    let t0 = Instant::now();
    let mesh = generate_mesh(&domain, h).unwrap();
    println!("coarse mesh: {} vertices, {} tets", mesh.vertex_count(), mesh.element_count());
    let sys = assemble(&mesh, &coeffs).unwrap();
    let basis = flux_basis(&sys).unwrap();
    println!("basis size {} ({:.1?})", basis.len(), t0.elapsed());

    // Smooth profiles: normalized monomials (x/R)^i (y/R)^j, i + j <= degree,
    // evaluated at patch nodes and divided by the hat weights so the nodal
    // density interpolates the profile.
    let mut profiles: Vec<Vec<f64>> = Vec::new();
    for i in 0..=degree {
        for j in 0..=(degree - i) {
            let mut a: Vec<f64> = basis
                .coords
                .iter()
                .map(|p| (p[0] / patch_radius).powi(i as i32) * (p[1] / patch_radius).powi(j as i32))
                .collect();
            let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in &mut a {
                *v /= norm;
            }
            profiles.push(a);
        }
    }
    let m = profiles.len();
    println!("{m} smooth profiles (degree {degree})");

    // Gram matrix of one system against the profiles.
    let gram = |sysx: &layerlab_core::fem::DiscreteSystem| -> DMatrix<f64> {
        let mut g = DMatrix::zeros(m, m);
        for (jcol, aj) in profiles.iter().enumerate() {
            let flux = BoundaryFlux {
                coeffs: basis.nodes.iter().zip(aj).map(|(&n, &v)| (n, v)).collect(),
            };
            let u = solve_neumann(sysx, &flux).unwrap();
            let bu = sysx.apply_boundary_mass(&u);
            for (irow, ai) in profiles.iter().enumerate() {
                g[(irow, jcol)] =
                    basis.nodes.iter().zip(ai).map(|(&n, &v)| v * bu[n]).sum::<f64>();
            }
        }
        g
    };

    let t1 = Instant::now();
    let coarse = gram(&sys);
    println!("coarse gram ({:.1?})", t1.elapsed());

    let t2 = Instant::now();
    let fine = refine(&mesh).unwrap();
    println!("fine mesh: {} vertices", fine.vertex_count());
    let fine_sys = assemble(&fine, &coeffs).unwrap();
    println!("fine factorized ({:.1?})", t2.elapsed());
    // Coarse nodes keep their ids under refinement; the coarse nodal
    // density is piecewise linear, so its fine-mesh nodal values are the
    // originals plus edge-midpoint averages.
    let t3 = Instant::now();
    let mut gf = DMatrix::zeros(m, m);
    let expand = |a: &Vec<f64>| -> Vec<f64> {
        let mut d = vec![0.0; fine.vertex_count()];
        for (&n, &v) in basis.nodes.iter().zip(a) {
            d[n] = v;
        }
        for (f, &(p, q)) in fine.parents.iter().enumerate() {
            if p != q {
                d[f] = 0.5 * (d[p] + d[q]);
            }
        }
        d
    };
    for (jcol, aj) in profiles.iter().enumerate() {
        let d = expand(aj);
        let rhs = fine_sys.apply_boundary_mass(&d);
        let u = fine_sys.solve_rhs(&rhs);
        let bu = fine_sys.apply_boundary_mass(&u);
        for (irow, ai) in profiles.iter().enumerate() {
            let di = expand(ai);
            gf[(irow, jcol)] = di.iter().zip(&bu).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    println!("fine gram ({:.1?})", t3.elapsed());

    let rel = (&coarse - &gf).norm() / gf.norm();
    println!("relative Frobenius gap = {rel:.4e},  J floor = {:.4e}", rel * rel);
}

//! Calibration run for the kernel probe on the flat isotropic patch: the
//! half-space Neumann kernel is 1/(2 pi r), so the fitted exponent should
//! be near -1 and the fitted amplitude near 1/(2 pi). Run with an optional
//! mesh size argument: `cargo run --release --example probe_calibration -- 0.05`.

use std::time::Instant;

use nalgebra::DVector;

use layerlab_core::fem::{assemble, CoefficientField};
use layerlab_core::geometry::{build_layered_domain, InterfaceGraph, SigmaPatch};
use layerlab_core::mesh::generate_mesh;
use layerlab_core::ndmap::{assemble_nd_columns, flux_basis};
use layerlab_core::probe::{dimensional_constant, fit_leading, probe_direction, ProbeConfig};
use layerlab_core::tensor::SymTensor;

fn nearest(coords: &[[f64; 3]], p: [f64; 3]) -> usize {
    let d2 = |c: &[f64; 3]| {
        (c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2) + (c[2] - p[2]).powi(2)
    };
    (0..coords.len()).min_by(|&a, &b| d2(&coords[a]).total_cmp(&d2(&coords[b]))).unwrap()
}

fn main() {
    let h: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let q: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.01);

    let t0 = Instant::now();
    let half_width: f64 =
        std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(2.8);
    let depth: f64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let domain = build_layered_domain(
        half_width,
        0.0,
        depth,
        vec![InterfaceGraph::horizontal_plane(3, 0.0, 2.0 * half_width)],
        SigmaPatch { center: vec![0.0, 0.0], radius: 2.1 },
        33,
    )
    .unwrap();
    let mesh = generate_mesh(&domain, h).unwrap();
    println!(
        "mesh: h = {h}, {} vertices, {} tets ({:.1?})",
        mesh.vertex_count(),
        mesh.tets.len(),
        t0.elapsed()
    );

    let coeffs = CoefficientField::new(vec![SymTensor::identity(3)], vec![q], 10.0).unwrap();
    let t1 = Instant::now();
    let system = assemble(&mesh, &coeffs).unwrap();
    println!("assembled + factorized ({:.1?})", t1.elapsed());

    let basis = flux_basis(&system).unwrap();
    println!("flux basis: {} nodes", basis.len());

    // Pole and far references near the rim of the patch, pairwise > 3.2.
    let pole = nearest(&basis.coords, [0.0, 1.9, 0.0]);
    let far_w = nearest(&basis.coords, [-1.7, -1.0, 0.0]);
    let far_z = nearest(&basis.coords, [1.7, -1.0, 0.0]);
    println!(
        "pole {:?} w {:?} z {:?}",
        basis.coords[pole], basis.coords[far_w], basis.coords[far_z]
    );

    let t2 = Instant::now();
    let lambda = assemble_nd_columns(&system, &basis, &[pole, far_w, far_z]).unwrap();
    println!("3 N-D columns ({:.1?})", t2.elapsed());

    // The criterion-5 window [4h, 16h] at h = 0.05; keep the same absolute
    // window when running coarser smoke tests.
    let m = 6;
    let (r_lo, r_hi) = (0.2f64, 0.8f64);
    let radii: Vec<f64> =
        (0..m).map(|i| r_lo * (r_hi / r_lo).powf(i as f64 / (m - 1) as f64)).collect();
    let cfg = ProbeConfig::default();
    let dir_arg: f64 = std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let dir = DVector::from_row_slice(&[dir_arg.cos(), dir_arg.sin(), 0.0]);
    let series = probe_direction(&lambda, mesh.h, None, pole, &dir, &radii, far_w, far_z, &cfg).unwrap();
    println!("calibration_warning: {}", series.calibration_warning);
    for (r, v) in series.radii.iter().zip(&series.values) {
        let oracle = 1.0 / (2.0 * std::f64::consts::PI * r);
        println!("  r = {r:.4}  kappa = {v:.6}  halfspace = {oracle:.6}  ratio = {:.4}", v / oracle);
    }

    match fit_leading(&series, 3) {
        Ok(est) => {
            let c3 = dimensional_constant(3).unwrap();
            let amplitude = 2.0 * c3 * est.g_value.powf(-0.5);
            println!(
                "fit: ghat = {:.5}  p = {:.4}  residual = {:.3e}  offset = {:.4e}",
                est.g_value, est.exponent, est.residual, est.offset
            );
            println!(
                "amplitude = {:.6} vs 1/(2pi) = {:.6}  (rel err {:.3})",
                amplitude,
                2.0 * c3,
                (amplitude - 2.0 * c3).abs() / (2.0 * c3)
            );
        }
        Err(e) => println!("fit failed: {e}"),
    }
    println!("total {:.1?}", t0.elapsed());
}

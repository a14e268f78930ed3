//! End-to-end layer-stripping calibration on the 2-layer reference
//! configuration: synthetic data on the refined mesh, stage-1 probe, full
//! strip_all, and truth comparison.
//!
//! Usage: strip_calibration [h] [c_min] [cap] [sep] [witness_r] [degree]

use std::time::Instant;

use layerlab_core::fem::{assemble, CoefficientField};
use layerlab_core::geometry::{build_layered_domain, InterfaceGraph, SigmaPatch};
use layerlab_core::mesh::{generate_mesh, refine};
use layerlab_core::ndmap::{assemble_nd_projected, flux_basis};
use layerlab_core::probe::ProbeConfig;
use layerlab_core::reconstruct::{strip_all, RecoveryOptions};
use layerlab_core::tensor::SymTensor;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let get = |i: usize, d: f64| args.get(i).map(|s| s.parse().unwrap()).unwrap_or(d);
    let h = get(1, 0.025);
    let c_min = get(2, 2.5);
    let cap = get(3, 0.6);
    let sep = get(4, 2.0);
    let witness_r = get(5, 0.3);
    let degree = get(6, 4.0) as usize;

    let domain = build_layered_domain(
        0.5,
        -0.02,
        0.48,
        vec![
            InterfaceGraph::polynomial(3, vec![0.0, 0.35], 1.0),
            InterfaceGraph::polynomial(3, vec![0.22, 0.2], 1.0),
        ],
        SigmaPatch { center: vec![0.0, 0.0], radius: 0.42 },
        33,
    )
    .unwrap();

    let c = 30.0f64.to_radians();
    let rot = nalgebra::DMatrix::from_row_slice(
        3,
        3,
        &[1.0, 0.0, 0.0, 0.0, c.cos(), -c.sin(), 0.0, c.sin(), c.cos()],
    );
    let truth = CoefficientField::new(
        vec![SymTensor::identity(3), SymTensor::from_diagonal(&[2.0, 2.0, 0.5]).rotate(&rot)],
        vec![0.2, 1.0],
        100.0,
    )
    .unwrap();

    let t0 = Instant::now();
    let mesh = generate_mesh(&domain, h).unwrap();
    println!("inversion mesh: {} vertices, {} tets", mesh.vertex_count(), mesh.element_count());
    let sys = assemble(&mesh, &truth).unwrap();
    let basis = flux_basis(&sys).unwrap();
    println!("basis size {} ({:.1?})", basis.len(), t0.elapsed());

    let t1 = Instant::now();
    let fine = refine(&mesh).unwrap();
    println!("data mesh: {} vertices", fine.vertex_count());
    let fine_sys = assemble(&fine, &truth).unwrap();
    println!("data factorized ({:.1?})", t1.elapsed());
    let t2 = Instant::now();
    let lambda_star = assemble_nd_projected(&fine_sys, &mesh, &basis).unwrap();
    drop(fine_sys);
    println!("data N-D assembled ({:.1?})", t2.elapsed());

    let opts = RecoveryOptions {
        probe: ProbeConfig {
            c_min,
            c_max: 1e9, // the cap fraction governs the upper end
            num_radii: 10,
            separation_factor: sep,
            r_cap_fraction: cap,
            tau_consist: 0.5,
            lambda_bound: 100.0,
        },
        witnesses: [
            [witness_r, 0.0],
            [witness_r * (-0.5), witness_r * 0.8660],
            [witness_r * (-0.5), witness_r * (-0.8660)],
        ],
        profile_degree: degree,
        q_max: 4.0,
        ..RecoveryOptions::default()
    };

    let t3 = Instant::now();
    match strip_all(&lambda_star, &domain, &mesh, &opts) {
        Ok(report) => {
            report.write_text(std::io::stdout()).unwrap();
            println!("strip_all took {:.1?}", t3.elapsed());
            for k in 0..2 {
                let scale = (0..3)
                    .flat_map(|i| (0..3).map(move |j| (i, j)))
                    .map(|(i, j)| truth.sigmas[k].get(i, j).abs())
                    .fold(0.0f64, f64::max);
                let err = report.sigmas[k].max_abs_diff(&truth.sigmas[k]) / scale;
                let qerr = (report.qs[k] - truth.qs[k]).abs() / truth.qs[k];
                println!(
                    "layer {}: sigma rel err {:.4} ({}), q rel err {:.4} ({})",
                    k + 1,
                    err,
                    if err <= 0.05 { "PASS <=5%" } else { "FAIL" },
                    qerr,
                    if qerr <= 0.08 { "PASS <=8%" } else { "FAIL" },
                );
            }
            println!(
                "final misfit {:.3e} ({})",
                report.final_misfit,
                if report.final_misfit < 1e-6 { "PASS <1e-6" } else { "FAIL" }
            );
        }
        Err(e) => println!("strip_all failed after {:.1?}: {e}", t3.elapsed()),
    }
}

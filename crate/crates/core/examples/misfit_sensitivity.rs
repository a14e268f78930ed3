//! Per-parameter misfit sensitivity at the truth on the 2-layer reference:
//! how much the profile-Gram misfit moves when one coefficient is
//! perturbed by its acceptance-gate amount, compared to the
//! discretization floor. Caches the synthetic N-D matrix on disk so the
//! expensive fine-mesh solves run once.
//!
//! Usage: misfit_sensitivity [h] [degree]

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::time::Instant;

use nalgebra::DMatrix;

use layerlab_core::fem::{assemble, CoefficientField};
use layerlab_core::geometry::{build_layered_domain, InterfaceGraph, LayeredDomain, SigmaPatch};
use layerlab_core::mesh::{generate_mesh, refine, Mesh};
use layerlab_core::ndmap::{self, assemble_nd_projected, flux_basis, NdMatrix};
use layerlab_core::reconstruct::FitProblem;
use layerlab_core::tensor::SymTensor;

fn reference() -> (LayeredDomain, CoefficientField) {
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
    (domain, truth)
}

fn cached_nd(domain: &LayeredDomain, truth: &CoefficientField, mesh: &Mesh, h: f64) -> NdMatrix {
    let _ = domain;
    let path = format!("/tmp/nd_cache_reference_h{h}.csv");
    if let Ok(f) = File::open(&path) {
        println!("reloading cached data from {path}");
        return ndmap::read_csv(BufReader::new(f)).unwrap();
    }
    let sys = assemble(mesh, truth).unwrap();
    let basis = flux_basis(&sys).unwrap();
    let t = Instant::now();
    let fine = refine(mesh).unwrap();
    let fine_sys = assemble(&fine, truth).unwrap();
    let nd = assemble_nd_projected(&fine_sys, mesh, &basis).unwrap();
    println!("data generated in {:.1?}", t.elapsed());
    ndmap::write_csv(&nd, BufWriter::new(File::create(&path).unwrap())).unwrap();
    nd
}

/// Relative Frobenius misfit and its diagonally weighted counterpart
/// (entries normalized by the data's profile self-energies).
fn both_misfits(g: &DMatrix<f64>, data: &DMatrix<f64>) -> (f64, f64) {
    let plain = (g - data).norm_squared() / data.norm_squared();
    let m = data.nrows();
    let d: Vec<f64> = (0..m).map(|k| 1.0 / data[(k, k)].abs().sqrt()).collect();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..m {
        for j in 0..m {
            let w = d[i] * d[j];
            num += (w * (g[(i, j)] - data[(i, j)])).powi(2);
            den += (w * data[(i, j)]).powi(2);
        }
    }
    (plain, num / den)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let get = |i: usize, d: f64| args.get(i).map(|s| s.parse().unwrap()).unwrap_or(d);
    let h = get(1, 0.025);
    let degree = get(2, 4.0) as usize;

    let (domain, truth) = reference();
    let mesh = generate_mesh(&domain, h).unwrap();
    println!("mesh: {} vertices at h = {h}, degree {degree}", mesh.vertex_count());
    let nd = cached_nd(&domain, &truth, &mesh, h);

    let fit = FitProblem::new(&mesh, &nd, &domain.sigma_patch, degree, 100.0).unwrap();
    println!("{} profiles", fit.profile_count());

    let g0 = fit.gram(&truth).unwrap();
    let (m0p, m0w) = both_misfits(&g0, fit.data());
    println!("floor: plain {m0p:.3e}   weighted {m0w:.3e}");

    // Gate-sized perturbations: each sigma diagonal scaled by 1.05, each
    // off-diagonal shifted by 5% of the layer's largest entry, q by 1.08.
    let labels = ["s11", "s12", "s13", "s22", "s23", "s33", "q"];
    for layer in 0..truth.layer_count() {
        let scale = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| truth.sigmas[layer].get(i, j).abs())
            .fold(0.0f64, f64::max);
        for p in 0..7 {
            let mut sigmas = truth.sigmas.clone();
            let mut qs = truth.qs.clone();
            if p == 6 {
                qs[layer] *= 1.08;
            } else {
                let mut upper = sigmas[layer].upper_triangle().to_vec();
                upper[p] += 0.05 * scale;
                sigmas[layer] = SymTensor::from_upper(3, upper);
            }
            let c = CoefficientField::new(sigmas, qs, truth.lambda).unwrap();
            let g = fit.gram(&c).unwrap();
            let (mp, mw) = both_misfits(&g, fit.data());
            println!(
                "layer {} {}: plain {:.3e} ({:6.1}x floor)   weighted {:.3e} ({:6.1}x floor)",
                layer + 1,
                labels[p],
                mp,
                mp / m0p,
                mw,
                mw / m0w,
            );
        }
    }
}

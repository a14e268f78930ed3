//! Command-line driver for the layered-domain recovery laboratory.
//!
//! Every subcommand reads one TOML experiment configuration, writes its
//! artifacts into an output directory, and finishes by writing a MANIFEST
//! with a sha256 content hash per artifact. All numeric output is printed
//! with round-trippable precision, so a rerun with the same configuration
//! and seed reproduces every artifact byte for byte.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use layerlab_core::config::ExperimentConfig;
use layerlab_core::fem::{assemble, solve_neumann, BoundaryFlux, CoefficientField};
use layerlab_core::geometry::{
    build_layered_domain, InterfaceGraph, InterfaceKind, LayeredDomain, SigmaPatch,
};
use layerlab_core::mesh::{generate_mesh, refine, Mesh};
use layerlab_core::ndmap::{self, assemble_nd, assemble_nd_projected, flux_basis, NdMatrix};
use layerlab_core::probe::recover_boundary_g;
use layerlab_core::reconstruct::{
    strip_all, verify_claim_propagation, verify_partition_merge, RecoveryReport,
};
use layerlab_core::tensor::SymTensor;

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "layerlab", version, about = "Layered-domain forward simulation and recovery")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the configuration's `output`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Random seed (overrides the configuration's `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the parallel solver stages (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Progress and diagnostic chatter on stderr.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one Neumann problem for the configured coefficients and
    /// export the solution (VTK volume field plus boundary-trace CSV).
    Forward,
    /// Synthesize the local N-D matrix on a refined mesh, projected onto
    /// the inversion mesh's flux basis, and write it as CSV.
    Ndmap,
    /// Recover the boundary metric and conductivity by kernel probing and
    /// write the directional-fit report.
    Probe,
    /// Run the full layer-stripping recovery and write the per-layer
    /// coefficient report.
    Recover,
    /// Run the structural property suites (symmetry, round-trips,
    /// partition merge, propagation) and report pass/fail per suite.
    Verify,
    /// Re-check an output directory: manifest hashes plus a summary of any
    /// recovery and N-D artifacts found.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_workers(&cli);
    let result = match cli.command {
        Command::Forward => Ctx::load(&cli).and_then(cmd_forward),
        Command::Ndmap => Ctx::load(&cli).and_then(cmd_ndmap),
        Command::Probe => Ctx::load(&cli).and_then(cmd_probe),
        Command::Recover => Ctx::load(&cli).and_then(cmd_recover),
        Command::Verify => Ctx::load(&cli).and_then(cmd_verify),
        Command::Report => cmd_report(&cli),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(feature = "parallel")]
fn configure_workers(cli: &Cli) {
    if let Some(w) = cli.workers {
        if w > 0 {
            // Ignore the error from a second initialization; the pool is
            // process-global and first configuration wins.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn configure_workers(cli: &Cli) {
    if cli.workers.is_some() {
        eprintln!("note: built without the `parallel` feature; --workers has no effect");
    }
}

/// Everything a subcommand needs: the validated configuration, the
/// resolved output directory and seed, and the configuration file's hash
/// for the manifest.
struct Ctx {
    cfg: ExperimentConfig,
    config_hash: String,
    out: PathBuf,
    seed: u64,
    verbose: bool,
}

impl Ctx {
    fn load(cli: &Cli) -> Result<Self> {
        let path = cli
            .config
            .as_ref()
            .ok_or("--config <file> is required for this subcommand")?;
        let text = fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let cfg = ExperimentConfig::from_toml(&text)?;
        let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output));
        let seed = cli.seed.unwrap_or(cfg.seed);
        Ok(Ctx { config_hash: sha256_hex(text.as_bytes()), cfg, out, seed, verbose: cli.verbose })
    }

    fn chat(&self, msg: &str) {
        if self.verbose {
            eprintln!("{msg}");
        }
    }

    fn domain(&self) -> Result<LayeredDomain> {
        Ok(self.cfg.to_domain()?)
    }

    fn coefficients(&self) -> Result<CoefficientField> {
        Ok(self.cfg.to_coefficients()?)
    }

    fn mesh(&self, domain: &LayeredDomain) -> Result<Mesh> {
        let mesh = generate_mesh(domain, self.cfg.mesh.h)?;
        self.chat(&format!(
            "inversion mesh: {} vertices, {} elements at h = {}",
            mesh.vertex_count(),
            mesh.element_count(),
            mesh.h
        ));
        Ok(mesh)
    }

    /// Synthetic data: the N-D matrix of the configured coefficients,
    /// solved on a `refinement`-times refined mesh and projected onto the
    /// inversion mesh's hat-flux basis.
    fn synthesize_nd(&self, mesh: &Mesh, coeffs: &CoefficientField) -> Result<NdMatrix> {
        let mut fine = mesh.clone();
        for _ in 0..self.cfg.mesh.refinement {
            fine = refine(&fine)?;
        }
        self.chat(&format!(
            "data mesh: {} vertices after {} refinement(s)",
            fine.vertex_count(),
            self.cfg.mesh.refinement
        ));
        let coarse_system = assemble(mesh, coeffs)?;
        let basis = flux_basis(&coarse_system)?;
        let fine_system = assemble(&fine, coeffs)?;
        Ok(assemble_nd_projected(&fine_system, mesh, &basis)?)
    }

    /// The N-D matrix from `nd.csv` in the output directory when present
    /// (bit-exact reload), otherwise synthesized fresh.
    fn load_or_synthesize_nd(&self, mesh: &Mesh, coeffs: &CoefficientField) -> Result<(NdMatrix, bool)> {
        let path = self.out.join("nd.csv");
        if path.is_file() {
            self.chat(&format!("reloading N-D data from {}", path.display()));
            let file = fs::File::open(&path)?;
            return Ok((ndmap::read_csv(BufReader::new(file))?, false));
        }
        Ok((self.synthesize_nd(mesh, coeffs)?, true))
    }
}

/// Collects artifacts and writes the content-hash manifest.
struct Artifacts {
    dir: PathBuf,
    entries: Vec<(String, String)>,
}

impl Artifacts {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Artifacts { dir: dir.to_path_buf(), entries: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.entries.push((name.to_string(), sha256_hex(bytes)));
        Ok(())
    }

    fn finish(mut self, seed: u64, config_hash: &str) -> Result<()> {
        self.entries.sort();
        let mut text = String::from("# layerlab manifest v1\n");
        text.push_str(&format!("seed,{seed}\n"));
        text.push_str(&format!("config,{config_hash}\n"));
        for (name, hash) in &self.entries {
            text.push_str(&format!("file,{name},{hash}\n"));
        }
        fs::write(self.dir.join("MANIFEST"), text)?;
        Ok(())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-element scalar from per-layer values via the element labels.
fn per_element(mesh: &Mesh, per_layer: &[f64]) -> Vec<f64> {
    mesh.labels.iter().map(|&l| per_layer[l]).collect()
}

fn cmd_forward(ctx: Ctx) -> Result<ExitCode> {
    let domain = ctx.domain()?;
    let coeffs = ctx.coefficients()?;
    let mesh = ctx.mesh(&domain)?;
    let system = assemble(&mesh, &coeffs)?;

    // Unit-integral flux with constant density over the accessible patch.
    let nodes = system.sigma_nodes().to_vec();
    let mut density = vec![0.0; system.node_count()];
    for &v in &nodes {
        density[v] = 1.0;
    }
    let scale = 1.0 / system.boundary_pairing(&density, &vec![1.0; system.node_count()]);
    let flux = BoundaryFlux { coeffs: nodes.iter().map(|&v| (v, scale)).collect() };
    let u = solve_neumann(&system, &flux)?;

    let mut arts = Artifacts::create(&ctx.out)?;
    let qs = per_element(&mesh, &coeffs.qs);
    let traces: Vec<f64> = coeffs.sigmas.iter().map(|s| s.get(0, 0) + s.get(1, 1) + s.get(2, 2)).collect();
    let sig = per_element(&mesh, &traces);
    let mut vtk = Vec::new();
    layerlab_core::vtk::write_vtk(
        &mesh,
        &[("u", &u)],
        &[("q", &qs), ("sigma_trace", &sig)],
        &mut vtk,
    )?;
    arts.write("forward.vtk", &vtk)?;

    let mut csv = String::from("# boundary trace v1\nnode,x,y,z,u\n");
    for &v in &nodes {
        let p = mesh.vertices[v];
        csv.push_str(&format!("{v},{:.17e},{:.17e},{:.17e},{:.17e}\n", p[0], p[1], p[2], u[v]));
    }
    arts.write("trace.csv", csv.as_bytes())?;
    arts.finish(ctx.seed, &ctx.config_hash)?;

    let umax = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let umin = u.iter().cloned().fold(f64::INFINITY, f64::min);
    println!(
        "forward: {} nodes, trace range [{umin:.6e}, {umax:.6e}], artifacts in {}",
        mesh.vertex_count(),
        ctx.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_ndmap(ctx: Ctx) -> Result<ExitCode> {
    let domain = ctx.domain()?;
    let coeffs = ctx.coefficients()?;
    let mesh = ctx.mesh(&domain)?;
    let nd = ctx.synthesize_nd(&mesh, &coeffs)?;

    let mut arts = Artifacts::create(&ctx.out)?;
    let mut csv = Vec::new();
    ndmap::write_csv(&nd, &mut csv)?;
    arts.write("nd.csv", &csv)?;
    arts.finish(ctx.seed, &ctx.config_hash)?;

    println!(
        "ndmap: {} x {} matrix, symmetry defect {:.3e}, artifacts in {}",
        nd.dim(),
        nd.dim(),
        nd.symmetry_defect(),
        ctx.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_probe(ctx: Ctx) -> Result<ExitCode> {
    let domain = ctx.domain()?;
    let coeffs = ctx.coefficients()?;
    let mesh = ctx.mesh(&domain)?;
    let (nd, fresh) = ctx.load_or_synthesize_nd(&mesh, &coeffs)?;

    let witnesses = ctx.cfg.to_witnesses(&domain)?;
    let probe_cfg = ctx.cfg.to_probe_config();
    let rec = recover_boundary_g(&nd, mesh.h, &domain, &witnesses, &probe_cfg)?;

    let mut arts = Artifacts::create(&ctx.out)?;
    if fresh {
        let mut csv = Vec::new();
        ndmap::write_csv(&nd, &mut csv)?;
        arts.write("nd.csv", &csv)?;
    }
    let mut csv = String::from("# boundary probe v1\nrecord,i,j,value\n");
    for i in 0..3 {
        for j in i..3 {
            csv.push_str(&format!("g,{},{},{:.17e}\n", i + 1, j + 1, rec.g.get(i, j)));
            csv.push_str(&format!("sigma,{},{},{:.17e}\n", i + 1, j + 1, rec.sigma.get(i, j)));
        }
    }
    for (k, g) in [rec.gammas.gamma1, rec.gammas.gamma2, rec.gammas.gamma3].iter().enumerate() {
        csv.push_str(&format!("gamma,{},0,{:.17e}\n", k + 1, g));
    }
    csv.push_str("# directional fits: direction,dx,dy,dz then fit,g_value,exponent,residual\n");
    for e in &rec.estimates {
        csv.push_str(&format!(
            "direction,{:.17e},{:.17e},{:.17e}\nfit,{:.17e},{:.17e},{:.17e}\n",
            e.direction[0], e.direction[1], e.direction[2], e.g_value, e.exponent, e.residual
        ));
    }
    arts.write("probe.csv", csv.as_bytes())?;
    arts.finish(ctx.seed, &ctx.config_hash)?;

    println!("probe: recovered boundary conductivity");
    for r in 0..3 {
        println!(
            "  [{:>12.6} {:>12.6} {:>12.6}]",
            rec.sigma.get(r, 0),
            rec.sigma.get(r, 1),
            rec.sigma.get(r, 2)
        );
    }
    let truth = &coeffs.sigmas[0];
    let num = rec.sigma.max_abs_diff(truth);
    let den = (0..3)
        .flat_map(|i| (0..3).map(move |j| (i, j)))
        .map(|(i, j)| truth.get(i, j).abs())
        .fold(0.0f64, f64::max);
    println!("  max entry deviation from configured layer 1: {:.3e} ({:.2}%)", num, 100.0 * num / den);
    Ok(ExitCode::SUCCESS)
}

/// Deterministic recovery summary: the timing fields are deliberately
/// omitted so reruns reproduce the artifact byte for byte.
fn recovery_text(report: &RecoveryReport) -> String {
    let mut s = String::from("layer-stripping recovery\n");
    s.push_str(&format!("final misfit {:.17e}\n", report.final_misfit));
    for (k, (sig, q)) in report.sigmas.iter().zip(&report.qs).enumerate() {
        s.push_str(&format!("layer {}: q = {:.17e}\n", k + 1, q));
        for r in 0..3 {
            s.push_str(&format!(
                "  sigma [{:.17e} {:.17e} {:.17e}]\n",
                sig.get(r, 0),
                sig.get(r, 1),
                sig.get(r, 2)
            ));
        }
    }
    for st in &report.stages {
        s.push_str(&format!("stage {}: misfit {:.17e}\n", st.layer, st.misfit));
    }
    for &k in &report.jump_degenerate {
        s.push_str(&format!("jump-degenerate interface between layers {} and {}\n", k, k + 1));
    }
    s
}

fn cmd_recover(ctx: Ctx) -> Result<ExitCode> {
    let domain = ctx.domain()?;
    let coeffs = ctx.coefficients()?;
    let mesh = ctx.mesh(&domain)?;
    let (nd, fresh) = ctx.load_or_synthesize_nd(&mesh, &coeffs)?;

    let opts = ctx.cfg.to_recovery_options(&domain)?;
    ctx.chat("running layer-stripping recovery");
    let report = strip_all(&nd, &domain, &mesh, &opts)?;

    let mut arts = Artifacts::create(&ctx.out)?;
    if fresh {
        let mut csv = Vec::new();
        ndmap::write_csv(&nd, &mut csv)?;
        arts.write("nd.csv", &csv)?;
    }
    let mut csv = Vec::new();
    report.write_csv(Some(&coeffs), &mut csv)?;
    arts.write("recovery.csv", &csv)?;
    arts.write("recovery.txt", recovery_text(&report).as_bytes())?;

    let q_rec = per_element(&mesh, &report.qs);
    let trace_rec: Vec<f64> = report
        .sigmas
        .iter()
        .map(|s| s.get(0, 0) + s.get(1, 1) + s.get(2, 2))
        .collect();
    let sig_rec = per_element(&mesh, &trace_rec);
    let mut vtk = Vec::new();
    layerlab_core::vtk::write_vtk(
        &mesh,
        &[],
        &[("q_recovered", &q_rec), ("sigma_trace_recovered", &sig_rec)],
        &mut vtk,
    )?;
    arts.write("recovery.vtk", &vtk)?;
    arts.finish(ctx.seed, &ctx.config_hash)?;

    // Timings go to the console only, never into artifacts.
    let mut text = Vec::new();
    report.write_text(&mut text)?;
    print!("{}", String::from_utf8_lossy(&text));
    for (k, (sig, q)) in report.sigmas.iter().zip(&report.qs).enumerate() {
        let ts = &coeffs.sigmas[k];
        let den = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| ts.get(i, j).abs())
            .fold(0.0f64, f64::max);
        println!(
            "  layer {}: sigma error {:.2}%, q error {:.2}%",
            k + 1,
            100.0 * sig.max_abs_diff(ts) / den,
            100.0 * (q - coeffs.qs[k]).abs() / coeffs.qs[k].abs().max(1e-300)
        );
    }
    println!("recover: artifacts in {}", ctx.out.display());
    Ok(ExitCode::SUCCESS)
}

/// One verification suite outcome.
fn suite(name: &str, ok: bool, detail: &str, failures: &mut usize) {
    if !ok {
        *failures += 1;
    }
    println!("verify {name}: {} ({detail})", if ok { "pass" } else { "FAIL" });
}

/// Maximum height of an interface graph over its domain, sampled on a
/// coarse grid clipped to the box.
fn graph_max(interface: &InterfaceGraph, half_width: f64) -> f64 {
    let mut zmax = f64::NEG_INFINITY;
    let n = 17;
    for i in 0..n {
        for j in 0..n {
            let x = -half_width + 2.0 * half_width * i as f64 / (n - 1) as f64;
            let y = -half_width + 2.0 * half_width * j as f64 / (n - 1) as f64;
            if let Ok(z) = interface.eval(&[x, y]) {
                zmax = zmax.max(z);
            }
        }
    }
    zmax
}

fn cmd_verify(ctx: Ctx) -> Result<ExitCode> {
    let domain = ctx.domain()?;
    let coeffs = ctx.coefficients()?;
    let mesh = ctx.mesh(&domain)?;
    let mut failures = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);

    // Suite 1: the direct N-D matrix is symmetric and positive definite.
    let system = assemble(&mesh, &coeffs)?;
    let basis = flux_basis(&system)?;
    let nd = assemble_nd(&system, &basis)?;
    let sym = nd.symmetry_defect();
    suite("nd-symmetry", sym < 1e-10, &format!("relative defect {sym:.3e}"), &mut failures);
    let symm = (&nd.entries + nd.entries.transpose()) * 0.5;
    let min_eig = symm
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    suite(
        "nd-positivity",
        min_eig > -1e-12 * nd.entries.norm(),
        &format!("min eigenvalue {min_eig:.3e}"),
        &mut failures,
    );

    // Suite 2: CSV round-trip is bit-exact.
    let mut csv = Vec::new();
    ndmap::write_csv(&nd, &mut csv)?;
    let back = ndmap::read_csv(BufReader::new(&csv[..]))?;
    suite("nd-csv-roundtrip", back == nd, "bitwise equality after reload", &mut failures);

    // Suite 3: unknown configuration keys are rejected.
    let bogus = "unknown_key_for_rejection_check = 1\n[domain]\nhalf_width = 1.0";
    let rejected = ExperimentConfig::from_toml(bogus).is_err();
    suite("config-strictness", rejected, "unknown top-level key rejected", &mut failures);

    // Suite 4: splitting a layer without changing coefficient values
    // leaves the N-D map exactly unchanged.
    let gap = merge_gap(&domain, &coeffs, ctx.cfg.mesh.h)?;
    suite("partition-merge", gap == 0.0, &format!("gap {gap:.3e}"), &mut failures);

    // Suite 5: perturbing only the deepest layer moves both the outer map
    // and the truncated inner map, while a perturbed first layer is
    // rejected as a prefix mismatch.
    let n = domain.layer_count();
    if n >= 2 {
        let mut sigmas = coeffs.sigmas.clone();
        let mut qs = coeffs.qs.clone();
        let bump = 1.0 + 0.2 * rng.random::<f64>();
        let mut upper = sigmas[n - 1].upper_triangle().to_vec();
        upper[0] *= bump;
        upper[3] *= bump;
        upper[5] *= bump;
        sigmas[n - 1] = SymTensor::from_upper(3, upper);
        qs[n - 1] *= 1.0 + 0.5 * rng.random::<f64>();
        let perturbed = CoefficientField::new(sigmas, qs, coeffs.lambda)?;
        let inner_patch = SigmaPatch {
            center: domain.sigma_patch.center.clone(),
            radius: domain.sigma_patch.radius,
        };
        let (outer, inner) = verify_claim_propagation(
            &coeffs,
            &perturbed,
            &domain,
            ctx.cfg.mesh.h,
            n - 1,
            &inner_patch,
        )?;
        suite(
            "claim-propagation",
            outer > 0.0 && inner > 0.0,
            &format!("outer gap {outer:.3e}, inner gap {inner:.3e}"),
            &mut failures,
        );

        let mut sigmas = coeffs.sigmas.clone();
        let mut upper = sigmas[0].upper_triangle().to_vec();
        upper[0] *= 1.5;
        upper[3] *= 1.5;
        upper[5] *= 1.5;
        sigmas[0] = SymTensor::from_upper(3, upper);
        let first = CoefficientField::new(sigmas, coeffs.qs.clone(), coeffs.lambda)?;
        let mismatch = verify_claim_propagation(
            &coeffs,
            &first,
            &domain,
            ctx.cfg.mesh.h,
            n - 1,
            &inner_patch,
        );
        suite(
            "prefix-mismatch",
            mismatch.is_err(),
            "shallow-layer disagreement rejected",
            &mut failures,
        );
    } else {
        println!("verify claim-propagation: skipped (needs at least two layers)");
    }

    if failures == 0 {
        println!("verify: all suites pass");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("verify: {failures} suite(s) FAILED");
        Ok(ExitCode::FAILURE)
    }
}

/// Gap between the N-D map of the configured partition and of the same
/// coefficients on a refinement that splits the deepest layer with a
/// horizontal plane.
fn merge_gap(domain: &LayeredDomain, coeffs: &CoefficientField, h: f64) -> Result<f64> {
    let last_top = graph_max(domain.interfaces.last().unwrap(), domain.half_width);
    let z_split = 0.5 * (last_top + domain.z_max);
    // The split halves the deepest layer; keep at least two mesh sheets in
    // each half.
    let h = h.min((domain.z_max - z_split) / 2.5);
    let split = InterfaceGraph {
        kind: InterfaceKind::Plane,
        coefficients: vec![z_split, 0.0, 0.0],
        radius: 4.0 * domain.half_width,
        dim: 3,
    };
    let mut interfaces = domain.interfaces.clone();
    interfaces.push(split);
    let refined = build_layered_domain(
        domain.half_width,
        domain.z_min,
        domain.z_max,
        interfaces,
        domain.sigma_patch.clone(),
        33,
    )?;
    let n = coeffs.layer_count();
    let mut sigmas = coeffs.sigmas.clone();
    let mut qs = coeffs.qs.clone();
    sigmas.push(sigmas[n - 1].clone());
    qs.push(qs[n - 1]);
    let refined_coeffs = CoefficientField::new(sigmas, qs, coeffs.lambda)?;
    Ok(verify_partition_merge(coeffs, &refined_coeffs, domain, &refined, h)?)
}

fn cmd_report(cli: &Cli) -> Result<ExitCode> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let manifest_path = out.join("MANIFEST");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| format!("cannot read {}: {e}", manifest_path.display()))?;
    let mut failures = 0usize;
    for line in text.lines() {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        match fields[0] {
            "seed" => println!("report: seed {}", fields[1]),
            "config" => println!("report: config hash {}", &fields[1][..16.min(fields[1].len())]),
            "file" if fields.len() == 3 => {
                let path = out.join(fields[1]);
                let status = match fs::read(&path) {
                    Ok(bytes) if sha256_hex(&bytes) == fields[2] => "ok",
                    Ok(_) => {
                        failures += 1;
                        "HASH MISMATCH"
                    }
                    Err(_) => {
                        failures += 1;
                        "MISSING"
                    }
                };
                println!("report: {} {}", fields[1], status);
            }
            other => {
                failures += 1;
                println!("report: malformed manifest record `{other}`");
            }
        }
    }

    let recovery = out.join("recovery.csv");
    if recovery.is_file() {
        println!("report: recovery summary");
        for line in fs::read_to_string(&recovery)?.lines() {
            if line.starts_with('#') || line.starts_with("layer,") {
                if let Some(m) = line.strip_prefix("# final_misfit,") {
                    println!("  final misfit {}", m);
                }
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() == 4 && !f[3].is_empty() {
                let (rec, tru): (f64, f64) = (f[2].parse()?, f[3].parse()?);
                if f[1] == "q" || f[1] == "sigma11" {
                    println!(
                        "  layer {} {}: recovered {:.6}, truth {:.6}, error {:.2}%",
                        f[0],
                        f[1],
                        rec,
                        tru,
                        100.0 * (rec - tru).abs() / tru.abs().max(1e-300)
                    );
                }
            }
        }
    }
    let ndfile = out.join("nd.csv");
    if ndfile.is_file() {
        let nd = ndmap::read_csv(BufReader::new(fs::File::open(&ndfile)?))?;
        println!(
            "report: nd.csv {} x {} matrix, symmetry defect {:.3e}",
            nd.dim(),
            nd.dim(),
            nd.symmetry_defect()
        );
    }

    if failures == 0 {
        println!("report: all artifacts verified");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("report: {failures} artifact problem(s)");
        Ok(ExitCode::FAILURE)
    }
}

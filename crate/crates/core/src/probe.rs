//! Estimation of the Neumann kernel's boundary singularity from the local
//! N-D matrix. Near a boundary pole y the quadruple-difference kernel
//! behaves like 2 C_n (g(y) d . d)^((2-n)/2) r^(2-n) along a tangent
//! direction d at distance r, plus smooth contamination from the far
//! reference points; fitting the power law with a constant offset recovers
//! the tangential quadratic form of g, and three admissibly tilted tangent
//! planes determine all of g.

use std::io::Write;

use nalgebra::DVector;

use crate::error::ProbeError;
use crate::geometry::{
    gammas_from_frames, tangent_frame_at, GammaTriple, InterfaceGraph, LayeredDomain, TangentFrame,
};
use crate::metric::{assemble_g_with_tolerance, TangentialForm};
use crate::ndmap::{k_kernel, NdMatrix};
use crate::tensor::{sigma_from_g, SymTensor};
use crate::{Error, TAU_FIT};

/// Probe calibration knobs. Radii run in [c_min h, min(c_max h, R/4)] with
/// `num_radii` logarithmic samples, and the far reference points must be
/// `separation_factor * r_max` apart from the pole and each other.
#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub c_min: f64,
    pub c_max: f64,
    pub num_radii: usize,
    pub separation_factor: f64,
    /// Cap on r_max as a fraction of the patch radius.
    pub r_cap_fraction: f64,
    /// Consistency gate for the three-plane assembly of probe-estimated
    /// forms; much looser than the exact-algebra default because the
    /// directional estimates carry discretization bias.
    pub tau_consist: f64,
    /// Ellipticity bound the recovered conductivity must satisfy.
    pub lambda_bound: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            c_min: 4.0,
            c_max: 16.0,
            num_radii: 6,
            separation_factor: 4.0,
            r_cap_fraction: 0.25,
            tau_consist: 0.5,
            lambda_bound: 100.0,
        }
    }
}

/// C_n = 1 / (n (n-2) omega_n), omega_n the unit-ball volume.
pub fn dimensional_constant(n: usize) -> Result<f64, ProbeError> {
    if n < 3 {
        return Err(ProbeError::DimensionTooSmall { n });
    }
    // omega_n = pi^(n/2) / Gamma(n/2 + 1), by recurrence from Gamma(1) = 1
    // or Gamma(1/2) = sqrt(pi).
    let mut gamma;
    let mut arg;
    if n % 2 == 0 {
        gamma = 1.0;
        arg = 1.0;
    } else {
        gamma = std::f64::consts::PI.sqrt();
        arg = 0.5;
    }
    let target = n as f64 / 2.0 + 1.0;
    while arg < target - 0.25 {
        gamma *= arg;
        arg += 1.0;
    }
    let omega = std::f64::consts::PI.powf(n as f64 / 2.0) / gamma;
    Ok(1.0 / (n as f64 * (n as f64 - 2.0) * omega))
}

/// Kernel values along a tangent ray from a pole node.
#[derive(Debug, Clone)]
pub struct ProbeSeries {
    /// Basis indices of the pole and the far reference points.
    pub pole: usize,
    pub far_w: usize,
    pub far_z: usize,
    /// Unit tangent direction at the pole (physical coordinates).
    pub direction: DVector<f64>,
    /// Requested schedule radii.
    pub nominal_radii: Vec<f64>,
    /// Actual chord distances |x_m - y| after nearest-node projection.
    pub radii: Vec<f64>,
    /// Actual unit chords (x_m - y)/|x_m - y|; node snapping bends them
    /// away from the nominal direction by O(h/r).
    pub chords: Vec<DVector<f64>>,
    pub values: Vec<f64>,
    /// Set when the requested schedule dips below the mollification scale.
    pub calibration_warning: bool,
}

/// Fitted leading-order behavior along one direction.
#[derive(Debug, Clone)]
pub struct DirectionalEstimate {
    pub direction: DVector<f64>,
    /// Estimate of g(y) d . d.
    pub g_value: f64,
    pub exponent: f64,
    pub residual: f64,
    pub offset: f64,
}

fn dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Nearest basis node to a point, optionally excluding some indices.
fn nearest_node(coords: &[[f64; 3]], p: &[f64; 3], exclude: &[usize]) -> usize {
    let mut best = usize::MAX;
    let mut best_d = f64::INFINITY;
    for (i, c) in coords.iter().enumerate() {
        if exclude.contains(&i) {
            continue;
        }
        let d = dist3(c, p);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Samples K(x_m, y, w, z) at nearest-node projections of y + r_m d.
///
/// When the accessible graph is supplied, the tangent-ray target is first
/// projected back onto the surface (same planar coordinates, graph height),
/// so that the nearest-node snap stays within the mesh tolerance even where
/// curvature pulls the patch away from the tangent plane quadratically.
/// `mesh_h` is the mesh size used both for the projection tolerance and the
/// mollification-regime warning.
#[allow(clippy::too_many_arguments)]
pub fn probe_direction(
    lambda: &NdMatrix,
    mesh_h: f64,
    interface: Option<&InterfaceGraph>,
    pole: usize,
    direction: &DVector<f64>,
    radii: &[f64],
    far_w: usize,
    far_z: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeSeries, ProbeError> {
    let y = lambda.coords[pole];
    let w = lambda.coords[far_w];
    let z = lambda.coords[far_z];
    let r_max = radii.iter().cloned().fold(0.0, f64::max);
    let required = cfg.separation_factor * r_max;
    for (a, b) in [(y, w), (y, z), (w, z)] {
        let sep = dist3(&a, &b);
        if sep < required {
            return Err(ProbeError::PointsTooClose { separation: sep, required });
        }
    }

    let mut out_r = Vec::with_capacity(radii.len());
    let mut out_c = Vec::with_capacity(radii.len());
    let mut out_v = Vec::with_capacity(radii.len());
    let mut last_node = usize::MAX;
    for &r in radii {
        let mut target = [
            y[0] + r * direction[0],
            y[1] + r * direction[1],
            y[2] + r * direction[2],
        ];
        if let Some(graph) = interface {
            match graph.eval(&[target[0], target[1]]) {
                Ok(zs) => target[2] = zs,
                Err(_) => return Err(ProbeError::ProbeLeavesSigma { radius: r }),
            }
        }
        let x = nearest_node(&lambda.coords, &target, &[pole, far_w, far_z]);
        if dist3(&lambda.coords[x], &target) > 2.0 * mesh_h {
            return Err(ProbeError::ProbeLeavesSigma { radius: r });
        }
        if x == last_node {
            continue; // adjacent schedule radii snapped to the same node
        }
        last_node = x;
        let c = lambda.coords[x];
        let chord = DVector::from_row_slice(&[c[0] - y[0], c[1] - y[1], c[2] - y[2]]);
        let len = chord.norm();
        out_r.push(len);
        out_c.push(chord / len);
        out_v.push(k_kernel(lambda, x, pole, far_w, far_z)?);
    }
    let calibration_warning = radii.iter().all(|&r| r < cfg.c_min * mesh_h);
    Ok(ProbeSeries {
        pole,
        far_w,
        far_z,
        direction: direction.clone(),
        nominal_radii: radii.to_vec(),
        radii: out_r,
        chords: out_c,
        values: out_v,
        calibration_warning,
    })
}

/// Enforces the sampling precondition: at least four distinct samples
/// spanning a factor of four in radius. The span is taken over the
/// requested schedule when available, since node snapping may compress
/// the realized chords slightly.
fn check_span(series: &ProbeSeries) -> Result<(), ProbeError> {
    let m = series.radii.len();
    let span = if m > 1 {
        let nominal = if series.nominal_radii.len() > 1 {
            series.nominal_radii[series.nominal_radii.len() - 1] / series.nominal_radii[0]
        } else {
            0.0
        };
        nominal.max(series.radii[m - 1] / series.radii[0])
    } else {
        0.0
    };
    if m < 4 || span < 4.0 - 1e-9 {
        return Err(ProbeError::ScheduleTooNarrow { count: m, span });
    }
    Ok(())
}

/// Weighted least squares of (A, B) in kappa ~ A r^p + B for fixed p,
/// weights 1/kappa^2. Returns (A, B, relative residual).
fn profile_fit(radii: &[f64], values: &[f64], p: f64) -> (f64, f64, f64) {
    let m = radii.len();
    let mut s = [[0.0f64; 2]; 2];
    let mut rhs = [0.0f64; 2];
    let weights: Vec<f64> = values.iter().map(|&v| 1.0 / v.abs().max(1e-300).powi(2)).collect();
    for i in 0..m {
        let basis = [radii[i].powf(p), 1.0];
        for a in 0..2 {
            for b in 0..2 {
                s[a][b] += weights[i] * basis[a] * basis[b];
            }
            rhs[a] += weights[i] * basis[a] * values[i];
        }
    }
    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    let (a, b) = if det.abs() < 1e-300 {
        (0.0, rhs[1] / s[1][1].max(1e-300))
    } else {
        (
            (rhs[0] * s[1][1] - rhs[1] * s[0][1]) / det,
            (rhs[1] * s[0][0] - rhs[0] * s[1][0]) / det,
        )
    };
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..m {
        let fit = a * radii[i].powf(p) + b;
        num += weights[i] * (values[i] - fit).powi(2);
        den += weights[i] * values[i].powi(2);
    }
    (a, b, (num / den.max(1e-300)).sqrt())
}

/// Fits kappa(r) = A r^p + B and converts the amplitude into the
/// quadratic-form value: A = 2 C_n ghat^((2-n)/2), so
/// ghat = (A / (2 C_n))^(2/(2-n)). The offset B absorbs the smooth far
/// contamination of the quadruple kernel.
pub fn fit_leading(series: &ProbeSeries, n: usize) -> Result<DirectionalEstimate, ProbeError> {
    check_span(series)?;
    let cn = dimensional_constant(n)?;
    let p_star = 2.0 - n as f64;

    // Golden-section minimization of the profiled residual over the
    // exponent window, then read the linear parameters at the optimum.
    let obj = |p: f64| profile_fit(&series.radii, &series.values, p).2;
    let (mut lo, mut hi) = (p_star - 0.5, p_star + 0.5);
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let mut f1 = obj(x1);
    let mut f2 = obj(x2);
    for _ in 0..200 {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = obj(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = obj(x2);
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    let p = 0.5 * (lo + hi);
    let (a, b, residual) = profile_fit(&series.radii, &series.values, p);

    // Validity gates: dominant, positive singular part with the right
    // exponent and a small relative misfit.
    let r1 = series.radii[0];
    let singular_fraction = (a * r1.powf(p)).abs() / ((a * r1.powf(p)).abs() + b.abs()).max(1e-300);
    if residual > TAU_FIT
        || (p - p_star).abs() > 0.3
        || a <= 0.0
        || singular_fraction < 0.5
        || !residual.is_finite()
    {
        return Err(ProbeError::BadFit { residual, exponent: p });
    }
    let g_value = (a / (2.0 * cn)).powf(2.0 / (2.0 - n as f64));
    Ok(DirectionalEstimate {
        direction: series.direction.clone(),
        g_value,
        exponent: p,
        residual,
        offset: b,
    })
}

/// Logarithmic probe radii in
/// [c_min h, min(c_max h, r_cap_fraction * patch_radius)].
pub fn probe_schedule(h: f64, patch_radius: f64, cfg: &ProbeConfig) -> Result<Vec<f64>, ProbeError> {
    let r_min = cfg.c_min * h;
    let r_max = (cfg.c_max * h).min(patch_radius * cfg.r_cap_fraction);
    if r_min >= r_max || cfg.num_radii < 4 {
        return Err(ProbeError::ScheduleTooNarrow { count: cfg.num_radii, span: r_max / r_min });
    }
    let m = cfg.num_radii;
    Ok((0..m)
        .map(|i| r_min * (r_max / r_min).powf(i as f64 / (m - 1) as f64))
        .collect())
}

/// Everything recovered at the boundary: the metric, the conductivity, the
/// gammas used, and the per-direction fits for reporting.
#[derive(Debug, Clone)]
pub struct BoundaryRecovery {
    pub g: SymTensor,
    pub sigma: SymTensor,
    pub gammas: GammaTriple,
    pub estimates: Vec<DirectionalEstimate>,
    pub poles: [usize; 3],
}

/// Picks two far reference nodes for a pole by maximizing the smallest of
/// the three pairwise separations (an equilateral-ish triple), searched
/// over a strided candidate subset for determinism at bounded cost.
fn select_far_nodes(coords: &[[f64; 3]], pole: usize) -> (usize, usize) {
    let y = coords[pole];
    let stride = (coords.len() / 400).max(1);
    let cand: Vec<usize> = (0..coords.len()).step_by(stride).filter(|&i| i != pole).collect();
    let mut best = (pole, pole, -1.0);
    for (a, &w) in cand.iter().enumerate() {
        let dyw = dist3(&coords[w], &y);
        if dyw <= best.2 {
            continue;
        }
        for &z in &cand[a + 1..] {
            let m = dyw.min(dist3(&coords[z], &y)).min(dist3(&coords[z], &coords[w]));
            if m > best.2 {
                best = (w, z, m);
            }
        }
    }
    (best.0, best.1)
}

/// Snaps the witnesses to basis nodes and returns the set of N-D columns
/// the recovery will read (poles plus their far reference nodes). Assembling
/// only these columns makes boundary recovery a handful of Neumann solves
/// instead of one per basis function.
pub fn probe_columns(
    coords: &[[f64; 3]],
    interface: &InterfaceGraph,
    witness_xps: &[[f64; 2]; 3],
) -> Result<Vec<usize>, ProbeError> {
    let mut cols = Vec::new();
    for xp in witness_xps {
        let zk = interface.eval(xp)?;
        let pole = nearest_node(coords, &[xp[0], xp[1], zk], &[]);
        let (w, z) = select_far_nodes(coords, pole);
        cols.extend([pole, w, z]);
    }
    cols.sort_unstable();
    cols.dedup();
    Ok(cols)
}

/// One kernel sample prepared for the joint pole fit: chord length,
/// unit tangential chord coordinates in the (v1, v2) basis, in-plane
/// displacement components, and the measured kernel value.
struct PoleSample {
    r: f64,
    u: [f64; 2],
    t: [f64; 2],
    kappa: f64,
}

/// Clamps the symmetric 2x2 matrix [m11 m12; m12 m22] to be positive
/// definite by flooring its eigenvalues at a small fraction of the
/// largest one.
fn clamp_spd2(m: &mut [f64; 3]) {
    let (m11, m22, m12) = (m[0], m[1], m[2]);
    let half_tr = 0.5 * (m11 + m22);
    let disc = (0.25 * (m11 - m22).powi(2) + m12 * m12).sqrt();
    let (lo, hi) = (half_tr - disc, half_tr + disc);
    let floor = 1e-4 * hi.abs().max(1e-12);
    if lo >= floor {
        return;
    }
    // Eigenvector for hi; rebuild with the low eigenvalue floored.
    let (c, s) = if m12.abs() > 1e-300 {
        let t = (hi - m11) / m12;
        let n = (1.0 + t * t).sqrt();
        (1.0 / n, t / n)
    } else if m11 >= m22 {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let lo = floor;
    let hi = hi.max(floor);
    m[0] = hi * c * c + lo * s * s;
    m[1] = hi * s * s + lo * c * c;
    m[2] = (hi - lo) * c * s;
}

/// Joint Gauss-Newton fit of the full 2x2 tangential form at one pole from
/// the samples of all three directional series. Each sample uses its
/// *actual* chord: node snapping bends chords away from the nominal ray by
/// O(h/r), which smears directions enough to bias per-direction fits when
/// the form is anisotropic. The model is
///
///   kappa = 2 C_3 (u' M u)^(-1/2) (1/r + c h^2/r^3)
///           + b0 + b1 t1 + b2 t2 + b3 t1^2 + b4 t1 t2 + b5 t2^2,
///
/// with u the unit tangential chord in (v1, v2) coordinates and (t1, t2)
/// the in-plane displacement. The quadratic background absorbs the smooth
/// far-point and reflection contamination to second order in position,
/// and the fitted h^2/r^3 term absorbs the discrete kernel's mollification
/// excess near the pole, which decays like (h/r)^2 relative to the leading
/// singularity and would otherwise leak into the amplitude.
/// Returns ((m11, m22, m12), relative residual, constant offset).
pub fn fit_pole_form(
    series: &[ProbeSeries],
    v1: &DVector<f64>,
    v2: &DVector<f64>,
    mesh_h: f64,
) -> Result<([f64; 3], f64, f64), ProbeError> {
    let c3 = dimensional_constant(3)?;
    let g11 = v1.dot(v1);
    let g12 = v1.dot(v2);
    let g22 = v2.dot(v2);
    let gram_det = g11 * g22 - g12 * g12;

    let mut samples = Vec::new();
    for s in series {
        check_span(s)?;
        for ((r, chord), kappa) in s.radii.iter().zip(&s.chords).zip(&s.values) {
            // Tangential coordinates of the chord via the Gram system,
            // normalized so u names a unit vector in physical space.
            let (b1, b2) = (chord.dot(v1), chord.dot(v2));
            let alpha = (b1 * g22 - b2 * g12) / gram_det;
            let beta = (b2 * g11 - b1 * g12) / gram_det;
            let len = (alpha * alpha * g11 + 2.0 * alpha * beta * g12 + beta * beta * g22).sqrt();
            samples.push(PoleSample {
                r: *r,
                u: [alpha / len, beta / len],
                t: [r * b1, r * b2],
                kappa: *kappa,
            });
        }
    }

    // Initialize from fixed-exponent per-ray fits: each ray's amplitude
    // gives ghat_k ~ u_k' M u_k along its mean chord, a linear system for
    // the three entries of M.
    let mut ata = nalgebra::Matrix3::<f64>::zeros();
    let mut atb = nalgebra::Vector3::<f64>::zeros();
    let mut init_b = 0.0;
    for s in series {
        let (a, b, _) = profile_fit(&s.radii, &s.values, -1.0);
        if a <= 0.0 {
            return Err(ProbeError::BadFit { residual: f64::INFINITY, exponent: -1.0 });
        }
        let ghat = (a / (2.0 * c3)).powi(-2);
        init_b += b / series.len() as f64;
        // Mean unit chord of the ray in (v1, v2) coordinates.
        let (mut mu1, mut mu2) = (0.0, 0.0);
        let count = s.chords.len() as f64;
        for chord in &s.chords {
            let (b1, b2) = (chord.dot(v1), chord.dot(v2));
            mu1 += (b1 * g22 - b2 * g12) / gram_det / count;
            mu2 += (b2 * g11 - b1 * g12) / gram_det / count;
        }
        let len = (mu1 * mu1 * g11 + 2.0 * mu1 * mu2 * g12 + mu2 * mu2 * g22).sqrt();
        let u = [mu1 / len, mu2 / len];
        let row = nalgebra::Vector3::new(u[0] * u[0], u[1] * u[1], 2.0 * u[0] * u[1]);
        ata += row * row.transpose();
        atb += row * ghat;
    }
    let init = ata
        .lu()
        .solve(&atb)
        .unwrap_or_else(|| nalgebra::Vector3::new(atb[0], atb[1], 0.0));
    let mut m = [init[0], init[1], init[2]];
    clamp_spd2(&mut m);
    let mut theta = [m[0], m[1], m[2], init_b, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];

    let mut weights: Vec<f64> =
        samples.iter().map(|s| 1.0 / s.kappa.abs().max(1e-300).powi(2)).collect();
    let h2 = mesh_h * mesh_h;
    let background = |theta: &[f64; 10], t: &[f64; 2]| -> f64 {
        theta[3]
            + theta[4] * t[0]
            + theta[5] * t[1]
            + theta[6] * t[0] * t[0]
            + theta[7] * t[0] * t[1]
            + theta[8] * t[1] * t[1]
    };
    let cost = |theta: &[f64; 10], weights: &[f64]| -> f64 {
        let mut num = 0.0;
        for (s, w) in samples.iter().zip(weights) {
            let q = theta[0] * s.u[0] * s.u[0]
                + 2.0 * theta[2] * s.u[0] * s.u[1]
                + theta[1] * s.u[1] * s.u[1];
            if q <= 0.0 {
                return f64::INFINITY;
            }
            let shape = 1.0 / s.r + theta[9] * h2 / (s.r * s.r * s.r);
            let model = 2.0 * c3 * shape / q.sqrt() + background(theta, &s.t);
            num += w * (model - s.kappa).powi(2);
        }
        num
    };

    let mut current = cost(&theta, &weights);
    // Outer robust rounds: Gauss-Newton to convergence, then Huber
    // reweighting against the median absolute relative residual, so a
    // single mesh-irregular sample cannot steer the amplitude.
    for round in 0..3 {
        if round > 0 {
            let mut rel: Vec<f64> = samples
                .iter()
                .map(|s| {
                    let q = theta[0] * s.u[0] * s.u[0]
                        + 2.0 * theta[2] * s.u[0] * s.u[1]
                        + theta[1] * s.u[1] * s.u[1];
                    let shape = 1.0 / s.r + theta[9] * h2 / (s.r * s.r * s.r);
                    let model = 2.0 * c3 * shape / q.sqrt() + background(&theta, &s.t);
                    ((model - s.kappa) / s.kappa.abs().max(1e-300)).abs()
                })
                .collect();
            let mut sorted = rel.clone();
            sorted.sort_by(f64::total_cmp);
            let scale = (1.4826 * sorted[sorted.len() / 2]).max(1e-12);
            for ((w, s), r) in weights.iter_mut().zip(&samples).zip(rel.drain(..)) {
                let huber = (1.345 * scale / r.max(1e-300)).min(1.0);
                *w = huber * huber / s.kappa.abs().max(1e-300).powi(2);
            }
            current = cost(&theta, &weights);
        }
    let mut damping = 1e-3;
    for _ in 0..60 {
        // Weighted normal equations for the Levenberg step.
        let mut jtj = nalgebra::DMatrix::<f64>::zeros(10, 10);
        let mut jtr = DVector::<f64>::zeros(10);
        for (s, w) in samples.iter().zip(&weights) {
            let q = theta[0] * s.u[0] * s.u[0]
                + 2.0 * theta[2] * s.u[0] * s.u[1]
                + theta[1] * s.u[1] * s.u[1];
            let shape = 1.0 / s.r + theta[9] * h2 / (s.r * s.r * s.r);
            let model = 2.0 * c3 * shape / q.sqrt() + background(&theta, &s.t);
            let dsing = -c3 * shape / q.powf(1.5);
            let row = [
                dsing * s.u[0] * s.u[0],
                dsing * s.u[1] * s.u[1],
                dsing * 2.0 * s.u[0] * s.u[1],
                1.0,
                s.t[0],
                s.t[1],
                s.t[0] * s.t[0],
                s.t[0] * s.t[1],
                s.t[1] * s.t[1],
                2.0 * c3 * h2 / (q.sqrt() * s.r * s.r * s.r),
            ];
            let res = model - s.kappa;
            for a in 0..10 {
                for b in 0..10 {
                    jtj[(a, b)] += w * row[a] * row[b];
                }
                jtr[a] += w * row[a] * res;
            }
        }
        let mut improved = false;
        for _ in 0..8 {
            let mut lhs = jtj.clone();
            for a in 0..10 {
                lhs[(a, a)] += damping * jtj[(a, a)].max(1e-12);
            }
            let Some(step) = lhs.lu().solve(&(-&jtr)) else {
                damping *= 10.0;
                continue;
            };
            let mut trial = theta;
            for a in 0..10 {
                trial[a] += step[a];
            }
            let mut mt = [trial[0], trial[1], trial[2]];
            clamp_spd2(&mut mt);
            trial[0] = mt[0];
            trial[1] = mt[1];
            trial[2] = mt[2];
            let c = cost(&trial, &weights);
            if c < current {
                let rel_step = step.norm()
                    / (1e-12 + theta.iter().map(|x| x * x).sum::<f64>().sqrt());
                theta = trial;
                current = c;
                damping = (damping * 0.3).max(1e-12);
                improved = true;
                if rel_step < 1e-12 {
                    break;
                }
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            break;
        }
    }
    }

    let den: f64 = samples
        .iter()
        .zip(&weights)
        .map(|(s, w)| w * s.kappa * s.kappa)
        .sum::<f64>()
        .max(1e-300);
    let residual = (current / den).sqrt();
    let m = [theta[0], theta[1], theta[2]];
    let det = m[0] * m[1] - m[2] * m[2];
    if !residual.is_finite() || residual > TAU_FIT || m[0] <= 0.0 || det <= 0.0 {
        return Err(ProbeError::BadFit { residual, exponent: -1.0 });
    }
    Ok((m, residual, theta[3]))
}

/// Probes three tangential directions at a pole and jointly fits the 2x2
/// tangential form of g in the (v1, v2) basis from all samples at once.
#[allow(clippy::too_many_arguments)]
fn tangential_form_at(
    lambda: &NdMatrix,
    mesh_h: f64,
    interface: &InterfaceGraph,
    pole: usize,
    frame: &TangentFrame,
    inward: &DVector<f64>,
    radii: &[f64],
    cfg: &ProbeConfig,
    estimates: &mut Vec<DirectionalEstimate>,
) -> Result<(DVector<f64>, DVector<f64>, [f64; 3]), ProbeError> {
    let (w, z) = select_far_nodes(&lambda.coords, pole);
    // Quadratic forms are sign-invariant and the fit reads each sample's
    // actual chord, so every ray may be flipped independently toward the
    // patch interior to keep its probe points inside the patch. Six rays
    // at 30-degree spacing cost nothing extra (the same three N-D columns
    // serve every ray) and average out mesh-irregularity noise.
    let orient = |t: &DVector<f64>| if t.dot(inward) < 0.0 { -t } else { t.clone() };
    let v1 = frame.tangents[0].clone();
    let v2 = frame.tangents[1].clone();
    let rays: Vec<(DVector<f64>, [f64; 2])> = (0..6)
        .map(|k| {
            let a = k as f64 * std::f64::consts::PI / 6.0;
            let (c, s) = (a.cos(), a.sin());
            (orient(&(&v1 * c + &v2 * s)), [c, s])
        })
        .collect();
    let mut series = Vec::with_capacity(rays.len());
    for (d, _) in &rays {
        series.push(probe_direction(lambda, mesh_h, Some(interface), pole, d, radii, w, z, cfg)?);
    }
    let (m, residual, offset) = fit_pole_form(&series, &v1, &v2, mesh_h)?;
    // Report the fitted form evaluated on the nominal directions.
    for (s, (_, u)) in series.iter().zip(&rays) {
        let g_value = m[0] * u[0] * u[0] + 2.0 * m[2] * u[0] * u[1] + m[1] * u[1] * u[1];
        estimates.push(DirectionalEstimate {
            direction: s.direction.clone(),
            g_value,
            exponent: -1.0,
            residual,
            offset,
        });
    }
    Ok((v1, v2, m))
}

/// Recovers the constant boundary metric and conductivity near the
/// accessible patch from three witness locations (graph coordinates).
/// Witnesses are snapped to the nearest flux-basis nodes; the probes are
/// evaluated purely on N-D matrix entries.
pub fn recover_boundary_g(
    lambda: &NdMatrix,
    mesh_h: f64,
    domain: &LayeredDomain,
    witness_xps: &[[f64; 2]; 3],
    cfg: &ProbeConfig,
) -> Result<BoundaryRecovery, ProbeError> {
    let interface = domain.accessible();
    let radii = probe_schedule(mesh_h, domain.sigma_patch.radius, cfg)?;

    // Snap witnesses to basis nodes and rebuild exact frames there.
    let mut poles = [0usize; 3];
    let mut frames: Vec<TangentFrame> = Vec::with_capacity(3);
    for (k, xp) in witness_xps.iter().enumerate() {
        let zk = interface.eval(xp)?;
        let pole = nearest_node(&lambda.coords, &[xp[0], xp[1], zk], &[]);
        poles[k] = pole;
        let snapped = [lambda.coords[pole][0], lambda.coords[pole][1]];
        frames.push(tangent_frame_at(interface, &snapped)?);
    }
    let gammas = gammas_from_frames(&frames[0], &frames[1], &frames[2])?;
    let q = &gammas.to_canonical;

    let center = &domain.sigma_patch.center;
    let center_z = interface.eval(center)?;

    let mut estimates = Vec::with_capacity(9);
    let mut forms: Vec<TangentialForm> = Vec::with_capacity(3);
    for (k, frame) in frames.iter().enumerate() {
        let p = lambda.coords[poles[k]];
        let inward = DVector::from_row_slice(&[
            center[0] - p[0],
            center[1] - p[1],
            center_z - p[2],
        ]);
        let (v1, v2, m) = tangential_form_at(
            lambda,
            mesh_h,
            interface,
            poles[k],
            frame,
            &inward,
            &radii,
            cfg,
            &mut estimates,
        )?;
        // Express the plane basis in canonical coordinates so the forms
        // live on the canonical planes that the assembly expects.
        let basis = vec![q * v1, q * v2];
        let matrix = nalgebra::DMatrix::from_row_slice(2, 2, &[m[0], m[2], m[2], m[1]]);
        forms.push(TangentialForm { basis, matrix });
    }

    let forms: [TangentialForm; 3] = [forms[0].clone(), forms[1].clone(), forms[2].clone()];
    let g_canonical = assemble_g_with_tolerance(&forms, &gammas, cfg.tau_consist)?;
    let g = g_canonical.rotate(&q.transpose());
    let sigma = sigma_from_g(&g)?;
    if !sigma.spectrum_within(cfg.lambda_bound) {
        return Err(ProbeError::AnisotropyOutOfRange { lambda: cfg.lambda_bound });
    }
    Ok(BoundaryRecovery { g, sigma, gammas, estimates, poles })
}

/// CSV report of directional fits for offline plotting.
pub fn write_probe_report<W: Write>(
    series: &[ProbeSeries],
    estimates: &[DirectionalEstimate],
    mut out: W,
) -> Result<(), Error> {
    writeln!(out, "# probe report v1")?;
    writeln!(out, "series,pole,far_w,far_z,dx,dy,dz,radii,values")?;
    for (i, s) in series.iter().enumerate() {
        let radii: Vec<String> = s.radii.iter().map(|r| format!("{r:.17e}")).collect();
        let values: Vec<String> = s.values.iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(
            out,
            "series,{i},{},{},{},{:.17e},{:.17e},{:.17e},{},{}",
            s.pole,
            s.far_w,
            s.far_z,
            s.direction[0],
            s.direction[1],
            s.direction[2],
            radii.join(";"),
            values.join(";"),
        )?;
    }
    writeln!(out, "estimate,dx,dy,dz,g_value,exponent,residual,offset")?;
    for e in estimates {
        writeln!(
            out,
            "estimate,{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            e.direction[0], e.direction[1], e.direction[2], e.g_value, e.exponent, e.residual, e.offset
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn dimensional_constants_match_closed_forms() {
        use std::f64::consts::PI;
        assert_abs_diff_eq!(dimensional_constant(3).unwrap(), 1.0 / (4.0 * PI), epsilon = 1e-15);
        assert_abs_diff_eq!(
            dimensional_constant(4).unwrap(),
            1.0 / (4.0 * PI * PI),
            epsilon = 1e-15
        );
        // n = 5: omega_5 = 8 pi^2 / 15, C_5 = 1/(15 * 8 pi^2 / 15) = 1/(8 pi^2)
        assert_abs_diff_eq!(
            dimensional_constant(5).unwrap(),
            1.0 / (8.0 * PI * PI),
            epsilon = 1e-15
        );
        assert!(matches!(dimensional_constant(2), Err(ProbeError::DimensionTooSmall { n: 2 })));
    }

    fn model_series(radii: Vec<f64>, a: f64, p: f64, b: f64) -> ProbeSeries {
        let values = radii.iter().map(|&r| a * r.powf(p) + b).collect();
        let direction = DVector::from_row_slice(&[1.0, 0.0, 0.0]);
        ProbeSeries {
            pole: 0,
            far_w: 1,
            far_z: 2,
            chords: radii.iter().map(|_| direction.clone()).collect(),
            direction,
            nominal_radii: radii.clone(),
            radii,
            values,
            calibration_warning: false,
        }
    }

    fn log_radii(lo: f64, hi: f64, m: usize) -> Vec<f64> {
        (0..m).map(|i| lo * (hi / lo).powf(i as f64 / (m - 1) as f64)).collect()
    }

    #[test]
    fn fit_inverts_exact_model() {
        let cn = dimensional_constant(3).unwrap();
        let a = 2.0 * cn * 2.5f64.powf(-0.5);
        let series = model_series(log_radii(0.05, 0.4, 6), a, -1.0, 0.0);
        let est = fit_leading(&series, 3).unwrap();
        assert_abs_diff_eq!(est.g_value, 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(est.exponent, -1.0, epsilon = 1e-12);
        assert!(est.residual < 1e-12);
    }

    #[test]
    fn fit_handles_constant_offset_exactly() {
        let cn = dimensional_constant(3).unwrap();
        let a = 2.0 * cn * 0.8f64.powf(-0.5);
        let series = model_series(log_radii(0.05, 0.4, 6), a, -1.0, 0.3 * a);
        let est = fit_leading(&series, 3).unwrap();
        assert_abs_diff_eq!(est.g_value, 0.8, epsilon = 1e-10);
        assert_abs_diff_eq!(est.offset, 0.3 * a, epsilon = 1e-10 * a);
    }

    #[test]
    fn fit_tolerates_remainder_term() {
        // kappa = A r^-1 + c r^(-1 + alpha), alpha = 0.5, small c: the
        // estimate must stay within 2 percent.
        let cn = dimensional_constant(3).unwrap();
        let truth = 1.7f64;
        let a = 2.0 * cn * truth.powf(-0.5);
        let radii = log_radii(0.05, 0.4, 6);
        let c = 0.02 * a;
        let mut series = model_series(radii.clone(), a, -1.0, 0.0);
        for (v, &r) in series.values.iter_mut().zip(&radii) {
            *v += c * r.powf(-0.5);
        }
        let est = fit_leading(&series, 3).unwrap();
        assert!(
            (est.g_value - truth).abs() / truth < 0.02,
            "ghat {} vs {}",
            est.g_value,
            truth
        );
    }

    #[test]
    fn constant_series_rejected() {
        let series = model_series(log_radii(0.05, 0.4, 6), 0.0, -1.0, 1.0);
        assert!(matches!(fit_leading(&series, 3), Err(ProbeError::BadFit { .. })));
    }

    #[test]
    fn narrow_schedule_rejected() {
        let cn = dimensional_constant(3).unwrap();
        let a = 2.0 * cn;
        let series = model_series(log_radii(0.1, 0.2, 6), a, -1.0, 0.0);
        assert!(matches!(
            fit_leading(&series, 3),
            Err(ProbeError::ScheduleTooNarrow { .. })
        ));
        let series = model_series(log_radii(0.05, 0.4, 3), a, -1.0, 0.0);
        assert!(matches!(
            fit_leading(&series, 3),
            Err(ProbeError::ScheduleTooNarrow { count: 3, .. })
        ));
    }

    #[test]
    fn polarization_recovers_off_diagonal_exactly() {
        // With exact directional values of a known g, the polarization
        // combination returns g12 identically.
        let g = crate::tensor::random_spd(3, 42);
        let v1 = DVector::from_row_slice(&[1.0, 0.0, 0.0]);
        let v2 = DVector::from_row_slice(&[0.0, 1.0, 0.0]);
        let mixed = (&v1 + &v2) / 2.0f64.sqrt();
        let m11 = g.quadratic(&v1);
        let m22 = g.quadratic(&v2);
        let m12 = g.quadratic(&mixed) - 0.5 * (m11 + m22);
        assert_abs_diff_eq!(m12, g.get(0, 1), epsilon = 1e-12);
    }

    #[test]
    fn joint_pole_fit_inverts_bent_chords() {
        // Exact model data with chords bent away from the nominal rays by
        // angles comparable to node-snapping error; the joint fit must
        // still invert the 2x2 form to near machine precision.
        let c3 = dimensional_constant(3).unwrap();
        let m_true = [3.0, 1.2, 0.7];
        let (b0, b1, b2) = (0.04, -0.02, 0.015);
        let v1 = DVector::from_row_slice(&[1.0, 0.0, 0.0]);
        let v2 = DVector::from_row_slice(&[0.0, 1.0, 0.0]);
        let radii = log_radii(0.15, 0.6, 6);
        let base_angles = [0.0f64, std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_4];
        let mut series = Vec::new();
        for (k, &phi0) in base_angles.iter().enumerate() {
            let mut chords = Vec::new();
            let mut values = Vec::new();
            for (i, &r) in radii.iter().enumerate() {
                let phi = phi0 + 0.2 * ((i + k) as f64 * 1.7).sin() * 0.05 / r;
                let u = [phi.cos(), phi.sin()];
                chords.push(DVector::from_row_slice(&[u[0], u[1], 0.0]));
                let q = m_true[0] * u[0] * u[0]
                    + 2.0 * m_true[2] * u[0] * u[1]
                    + m_true[1] * u[1] * u[1];
                values.push(2.0 * c3 / (q.sqrt() * r) + b0 + b1 * r * u[0] + b2 * r * u[1]);
            }
            series.push(ProbeSeries {
                pole: 0,
                far_w: 1,
                far_z: 2,
                direction: DVector::from_row_slice(&[phi0.cos(), phi0.sin(), 0.0]),
                nominal_radii: radii.clone(),
                radii: radii.clone(),
                chords,
                values,
                calibration_warning: false,
            });
        }
        let (m, residual, offset) = fit_pole_form(&series, &v1, &v2, 0.05).unwrap();
        assert!(residual < 1e-8, "residual {residual}");
        assert_abs_diff_eq!(offset, b0, epsilon = 1e-6);
        for (got, want) in m.iter().zip(&m_true) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-6);
        }
    }

    #[test]
    fn schedule_respects_window() {
        let cfg = ProbeConfig::default();
        let radii = probe_schedule(0.05, 4.0, &cfg).unwrap();
        assert_eq!(radii.len(), 6);
        assert_abs_diff_eq!(radii[0], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(radii[5], 0.8, epsilon = 1e-12);
        // Patch too small for the window.
        assert!(matches!(
            probe_schedule(0.05, 0.5, &cfg),
            Err(ProbeError::ScheduleTooNarrow { .. })
        ));
    }
}

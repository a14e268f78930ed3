//! Experiment configuration: a single TOML document describing the domain,
//! the coefficient truth, the mesh, the probe, and the recovery optimizer.
//! Unknown keys are rejected outright — a silently ignored typo in a
//! coefficient entry would invalidate an entire acceptance run.

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::fem::CoefficientField;
use crate::geometry::{
    build_layered_domain, nonflat_witnesses, InterfaceGraph, LayeredDomain, SigmaPatch,
};
use crate::probe::ProbeConfig;
use crate::reconstruct::RecoveryOptions;
use crate::tensor::SymTensor;

/// Top-level experiment configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Random seed; every pipeline stage derives its determinism from it.
    #[serde(default)]
    pub seed: u64,
    /// Output directory for artifacts (overridable on the command line).
    #[serde(default = "default_output")]
    pub output: String,
    pub domain: DomainSection,
    pub coefficients: CoefficientsSection,
    pub mesh: MeshSection,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub recovery: RecoverySection,
    #[serde(default)]
    pub tolerances: ToleranceSection,
}

fn default_output() -> String {
    "out".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    pub half_width: f64,
    pub z_min: f64,
    pub z_max: f64,
    /// Accessible boundary graph first, then the layer interfaces in
    /// increasing height.
    pub interfaces: Vec<InterfaceSpec>,
    pub sigma: PatchSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterfaceSpec {
    /// "plane" (c0 + c1 x + c2 y), "paraboloid" (c0 + c1 r^2) or
    /// "polynomial" (even radial polynomial in r^2).
    pub kind: String,
    pub coefficients: Vec<f64>,
    /// Graph domain radius; planes may omit it.
    #[serde(default)]
    pub radius: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientsSection {
    /// Global ellipticity bound: all sigma spectra stay in [1/lambda, lambda].
    pub lambda: f64,
    pub layer: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    /// Upper triangle of sigma, row-major: [s11, s12, s13, s22, s23, s33].
    pub sigma: [f64; 6],
    pub q: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSection {
    pub h: f64,
    /// Uniform refinement levels applied to the inversion mesh when
    /// generating synthetic data (>= 1 avoids the inverse crime).
    #[serde(default = "default_refinement")]
    pub refinement: u32,
}

fn default_refinement() -> u32 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub c_min: f64,
    pub c_max: f64,
    pub num_radii: usize,
    pub separation_factor: f64,
    pub r_cap_fraction: f64,
    pub lambda_bound: f64,
    /// Explicit witness locations (graph coordinates), or omitted for the
    /// automatic non-flatness search.
    pub witnesses: Option<[[f64; 2]; 3]>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let p = ProbeConfig::default();
        Self {
            c_min: p.c_min,
            c_max: p.c_max,
            num_radii: p.num_radii,
            separation_factor: p.separation_factor,
            r_cap_fraction: p.r_cap_fraction,
            lambda_bound: p.lambda_bound,
            witnesses: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoverySection {
    pub profile_degree: usize,
    pub q_max: f64,
    pub fd_step: f64,
    pub max_stage_iters: usize,
    pub max_joint_iters: usize,
    pub stall_limit: usize,
    pub target_misfit: f64,
    pub jump_tol: f64,
}

impl Default for RecoverySection {
    fn default() -> Self {
        let o = RecoveryOptions::default();
        Self {
            profile_degree: o.profile_degree,
            q_max: o.q_max,
            fd_step: o.fd_step,
            max_stage_iters: o.max_stage_iters,
            max_joint_iters: o.max_joint_iters,
            stall_limit: o.stall_limit,
            target_misfit: o.target_misfit,
            jump_tol: o.jump_tol,
        }
    }
}

/// Every cross-module tolerance, surfaced with its library default.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToleranceSection {
    pub eps_flat: f64,
    pub eps_det: f64,
    pub tau_consist: f64,
    pub tau_fit: f64,
    /// Consistency tolerance for probe-derived tangential forms (these
    /// carry directional fit bias well above the algebraic tau_consist).
    pub tau_consist_probe: f64,
}

impl Default for ToleranceSection {
    fn default() -> Self {
        Self {
            eps_flat: crate::EPS_FLAT,
            eps_det: crate::EPS_DET,
            tau_consist: crate::TAU_CONSIST,
            tau_fit: crate::TAU_FIT,
            tau_consist_probe: 0.5,
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Structural checks beyond what the type system can express; errors
    /// carry the offending field path.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let field = |f: &str, m: &str| {
            Err(ConfigError::Field { field: f.to_string(), message: m.to_string() })
        };
        if self.domain.interfaces.is_empty() {
            return field("domain.interfaces", "at least the accessible boundary is required");
        }
        for (i, spec) in self.domain.interfaces.iter().enumerate() {
            let path = format!("domain.interfaces[{i}]");
            match spec.kind.as_str() {
                "plane" => {}
                "paraboloid" | "polynomial" => {
                    if spec.radius.is_none() {
                        return field(&format!("{path}.radius"), "curved graphs need a radius");
                    }
                }
                other => {
                    return field(
                        &format!("{path}.kind"),
                        &format!("unknown kind `{other}` (plane, paraboloid, polynomial)"),
                    )
                }
            }
            if spec.coefficients.is_empty() {
                return field(&format!("{path}.coefficients"), "must not be empty");
            }
        }
        if self.domain.sigma.radius <= 0.0 {
            return field("domain.sigma.radius", "must be positive");
        }
        if self.coefficients.layer.len() != self.domain.interfaces.len() {
            return field(
                "coefficients.layer",
                &format!(
                    "{} layers configured but the domain has {} (one per interface)",
                    self.coefficients.layer.len(),
                    self.domain.interfaces.len()
                ),
            );
        }
        if self.coefficients.lambda <= 1.0 {
            return field("coefficients.lambda", "ellipticity bound must exceed 1");
        }
        for (i, l) in self.coefficients.layer.iter().enumerate() {
            if l.q < 0.0 {
                return field(&format!("coefficients.layer[{i}].q"), "must be non-negative");
            }
        }
        if self.coefficients.layer.iter().all(|l| l.q == 0.0) {
            return field("coefficients.layer", "at least one layer needs q > 0");
        }
        if self.mesh.h <= 0.0 {
            return field("mesh.h", "must be positive");
        }
        if self.mesh.refinement == 0 {
            return field(
                "mesh.refinement",
                "data must be generated on a strictly finer mesh (refinement >= 1)",
            );
        }
        if self.probe.num_radii < 4 {
            return field("probe.num_radii", "the singularity fit needs at least 4 radii");
        }
        if self.recovery.q_max <= 0.0 {
            return field("recovery.q_max", "must be positive");
        }
        Ok(())
    }

    pub fn to_domain(&self) -> Result<LayeredDomain, ConfigError> {
        let interfaces = self
            .domain
            .interfaces
            .iter()
            .map(|s| {
                let r = s.radius.unwrap_or(f64::INFINITY);
                match s.kind.as_str() {
                    "plane" => {
                        let mut c = s.coefficients.clone();
                        c.resize(3, 0.0);
                        let mut g = InterfaceGraph::plane(3, c);
                        g.radius = r;
                        g
                    }
                    "paraboloid" => {
                        InterfaceGraph::paraboloid(3, s.coefficients[0], s.coefficients[1], r)
                    }
                    _ => InterfaceGraph::polynomial(3, s.coefficients.clone(), r),
                }
            })
            .collect();
        build_layered_domain(
            self.domain.half_width,
            self.domain.z_min,
            self.domain.z_max,
            interfaces,
            SigmaPatch {
                center: self.domain.sigma.center.to_vec(),
                radius: self.domain.sigma.radius,
            },
            33,
        )
        .map_err(|e| ConfigError::Field { field: "domain".into(), message: e.to_string() })
    }

    pub fn to_coefficients(&self) -> Result<CoefficientField, ConfigError> {
        let sigmas = self
            .coefficients
            .layer
            .iter()
            .map(|l| SymTensor::from_upper(3, l.sigma.to_vec()))
            .collect();
        let qs = self.coefficients.layer.iter().map(|l| l.q).collect();
        CoefficientField::new(sigmas, qs, self.coefficients.lambda)
            .map_err(|e| ConfigError::Field { field: "coefficients".into(), message: e.to_string() })
    }

    pub fn to_probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            c_min: self.probe.c_min,
            c_max: self.probe.c_max,
            num_radii: self.probe.num_radii,
            separation_factor: self.probe.separation_factor,
            r_cap_fraction: self.probe.r_cap_fraction,
            tau_consist: self.tolerances.tau_consist_probe,
            lambda_bound: self.probe.lambda_bound,
        }
    }

    /// Witness locations: the configured triple, or the planar coordinates
    /// of the automatic non-flatness search.
    pub fn to_witnesses(&self, domain: &LayeredDomain) -> Result<[[f64; 2]; 3], ConfigError> {
        if let Some(w) = self.probe.witnesses {
            return Ok(w);
        }
        let triple = nonflat_witnesses(domain.accessible(), 21).map_err(|e| ConfigError::Field {
            field: "probe.witnesses".into(),
            message: format!("automatic search failed: {e}"),
        })?;
        let mut w = [[0.0; 2]; 3];
        for (k, f) in triple.frames.iter().enumerate() {
            w[k] = [f.point[0], f.point[1]];
        }
        Ok(w)
    }

    pub fn to_recovery_options(&self, domain: &LayeredDomain) -> Result<RecoveryOptions, ConfigError> {
        Ok(RecoveryOptions {
            probe: self.to_probe_config(),
            witnesses: self.to_witnesses(domain)?,
            profile_degree: self.recovery.profile_degree,
            q_max: self.recovery.q_max,
            lambda: self.coefficients.lambda,
            fd_step: self.recovery.fd_step,
            max_stage_iters: self.recovery.max_stage_iters,
            max_joint_iters: self.recovery.max_joint_iters,
            stall_limit: self.recovery.stall_limit,
            target_misfit: self.recovery.target_misfit,
            jump_tol: self.recovery.jump_tol,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const REFERENCE: &str = r#"
        seed = 7
        [domain]
        half_width = 0.5
        z_min = -0.02
        z_max = 0.48
        interfaces = [
            { kind = "polynomial", coefficients = [0.0, 0.35], radius = 1.0 },
            { kind = "polynomial", coefficients = [0.22, 0.2], radius = 1.0 },
        ]
        sigma = { center = [0.0, 0.0], radius = 0.42 }

        [coefficients]
        lambda = 100.0
        [[coefficients.layer]]
        sigma = [1.0, 0.0, 0.0, 1.0, 0.0, 1.0]
        q = 0.2
        [[coefficients.layer]]
        sigma = [2.0, 0.0, 0.0, 1.625, 0.6495, 0.875]
        q = 1.0

        [mesh]
        h = 0.025
    "#;

    #[test]
    fn reference_config_parses_and_builds() {
        let cfg = ExperimentConfig::from_toml(REFERENCE).unwrap();
        assert_eq!(cfg.seed, 7);
        let domain = cfg.to_domain().unwrap();
        assert_eq!(domain.layer_count(), 2);
        let coeffs = cfg.to_coefficients().unwrap();
        assert_eq!(coeffs.layer_count(), 2);
        // Defaults surface library tolerances.
        assert_eq!(cfg.tolerances.tau_fit, crate::TAU_FIT);
        assert_eq!(cfg.probe.c_min, ProbeConfig::default().c_min);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = REFERENCE.replace("seed = 7", "seed = 7\nsped = 9");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("sped"), "{err}");
    }

    #[test]
    fn unknown_nested_key_rejected() {
        let text = REFERENCE.replace("h = 0.025", "h = 0.025\nrefinemnt = 2");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn layer_count_mismatch_reported_with_path() {
        let text = REFERENCE.replace(
            "[[coefficients.layer]]\n        sigma = [1.0, 0.0, 0.0, 1.0, 0.0, 1.0]\n        q = 0.2\n",
            "",
        );
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("coefficients.layer"), "{err}");
    }

    #[test]
    fn bad_interface_kind_reported_with_path() {
        let text = REFERENCE.replace("\"polynomial\", coefficients = [0.22", "\"wavy\", coefficients = [0.22");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("interfaces[1]"), "{err}");
    }

    #[test]
    fn zero_refinement_rejected() {
        let text = REFERENCE.replace("h = 0.025", "h = 0.025\nrefinement = 0");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("refinement"), "{err}");
    }
}

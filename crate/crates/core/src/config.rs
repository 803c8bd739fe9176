//! Scenario files: strict TOML, unknown keys rejected.
//!
//! ```toml
//! [model]
//! kind = "circular"
//! omega = 1.0
//!
//! [simulate]
//! t1 = 0.0
//! t2 = 3.141592653589793
//! positions = [[0.0, 0.0, 0.0]]
//! ```

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{IntegratorOptions, Method, Region3};
use crate::ensemble::{EnsembleSpec, HistogramSpec, SamplerOptions, SamplingRegion};
use crate::spinor::C64;
use crate::transversality::{CompactBox, TransversalityOptions};
use crate::wavefunction::{
    four_waves, Branch, CircularExample, GaussianPacket, PlaneWave, PlaneWaveSpec, QuadratureSpec, SumModel,
    Superposition, WaveFunctionModel,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid value for `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("scenario has no [{0}] section")]
    Missing(&'static str),
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub model: ModelConfig,
    pub perturbation: Option<PerturbationConfig>,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    pub simulate: Option<SimulateConfig>,
    pub ensemble: Option<EnsembleConfig>,
    pub sigma: Option<SigmaConfig>,
    pub perturb: Option<PerturbConfig>,
    pub validate: Option<ValidateConfig>,
    pub output: Option<OutputConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveConfig {
    pub k: [f64; 3],
    pub branch: u8,
    /// `[re, im]`.
    #[serde(default = "unit_amplitude")]
    pub amplitude: [f64; 2],
}

fn unit_amplitude() -> [f64; 2] {
    [1.0, 0.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    PlaneWave {
        mass: f64,
        k: [f64; 3],
        branch: u8,
        #[serde(default = "unit_amplitude")]
        amplitude: [f64; 2],
    },
    Superposition {
        mass: f64,
        waves: Vec<WaveConfig>,
    },
    Circular {
        omega: f64,
    },
    GaussianPacket {
        mass: f64,
        center: [f64; 3],
        width: f64,
        branch: u8,
        #[serde(default = "default_nodes")]
        nodes_per_axis: usize,
        /// Half-width of the momentum cube in units of `width`.
        #[serde(default = "default_radius_in_widths")]
        radius_in_widths: f64,
    },
}

fn default_nodes() -> usize {
    9
}

fn default_radius_in_widths() -> f64 {
    2.0
}

/// Adds the four reference waves with seeded complex Gaussian coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    pub amplitude: f64,
    #[serde(default = "unit")]
    pub k: f64,
    pub seed: u64,
}

fn unit() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl From<RegionConfig> for Region3 {
    fn from(r: RegionConfig) -> Self {
        Region3 { lo: r.lo, hi: r.hi }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodConfig {
    Dopri5,
    Rk4,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorConfig {
    pub method: MethodConfig,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_step: Option<f64>,
    pub rk4_step: Option<f64>,
    pub psi_floor: f64,
    pub speed_event_epsilon: f64,
    pub max_samples: usize,
    pub domain: Option<RegionConfig>,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        let d = IntegratorOptions::default();
        IntegratorConfig {
            method: MethodConfig::Dopri5,
            rel_tol: d.rel_tol,
            abs_tol: d.abs_tol,
            max_step: None,
            rk4_step: None,
            psi_floor: d.psi_floor,
            speed_event_epsilon: d.speed_event_epsilon,
            max_samples: d.max_samples,
            domain: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub t1: f64,
    pub t2: f64,
    pub positions: Vec<[f64; 3]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramConfig {
    pub bins: [usize; 3],
    #[serde(default = "default_sub_resolution")]
    pub sub_resolution: usize,
    /// Defaults to the sampling region.
    pub region: Option<RegionConfig>,
}

fn default_sub_resolution() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub t1: f64,
    pub t2: f64,
    pub n: usize,
    pub seed: u64,
    pub region: RegionConfig,
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    pub histogram: Option<HistogramConfig>,
    #[serde(default = "default_scan")]
    pub scan_resolution: usize,
    #[serde(default = "default_envelope")]
    pub envelope_factor: f64,
    /// Dump one row per trajectory to `ensemble_endpoints.csv`.
    #[serde(default)]
    pub write_endpoints_csv: bool,
}

fn default_epsilons() -> Vec<f64> {
    vec![1e-1, 1e-2, 1e-3, 1e-4]
}

fn default_scan() -> usize {
    SamplerOptions::default().scan_resolution
}

fn default_envelope() -> f64 {
    SamplerOptions::default().envelope_factor
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaConfig {
    pub t: [f64; 2],
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    #[serde(default = "default_resolution")]
    pub resolution: [usize; 4],
    #[serde(default)]
    pub tolerances: SigmaTolerances,
    #[serde(default)]
    pub write_points_csv: bool,
}

fn default_resolution() -> [usize; 4] {
    [17; 4]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SigmaTolerances {
    pub newton_tol: f64,
    pub max_iter: usize,
    pub margin_tol: f64,
    pub degenerate_tol: f64,
    pub degenerate_fraction: f64,
    pub seed_safety: f64,
    pub dedup_tol: f64,
    pub max_reported_points: usize,
}

impl Default for SigmaTolerances {
    fn default() -> Self {
        let d = TransversalityOptions::default();
        SigmaTolerances {
            newton_tol: d.newton_tol,
            max_iter: d.max_iter,
            margin_tol: d.margin_tol,
            degenerate_tol: d.degenerate_tol,
            degenerate_fraction: d.degenerate_fraction,
            seed_safety: d.seed_safety,
            dedup_tol: d.dedup_tol,
            max_reported_points: d.max_reported_points,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbConfig {
    pub amplitude: f64,
    pub trials: usize,
    #[serde(default = "unit")]
    pub k: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateConfig {
    pub seed: u64,
    #[serde(default = "default_sweep")]
    pub samples: usize,
}

fn default_sweep() -> usize {
    100_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
}

fn branch(field: &str, b: u8) -> Result<Branch, ConfigError> {
    Branch::try_from(b).map_err(|_| invalid(field, format!("branch must be 1 or 2, got {b}")))
}

fn finite(field: &str, xs: &[f64]) -> Result<(), ConfigError> {
    match xs.iter().find(|x| !x.is_finite()) {
        Some(x) => Err(invalid(field, format!("must be finite, got {x}"))),
        None => Ok(()),
    }
}

fn positive(field: &str, x: f64) -> Result<(), ConfigError> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be positive, got {x}")))
    }
}

fn region(field: &str, r: &RegionConfig) -> Result<(), ConfigError> {
    finite(field, &r.lo)?;
    finite(field, &r.hi)?;
    if (0..3).any(|a| r.lo[a] >= r.hi[a]) {
        return Err(invalid(field, "need lo < hi on every axis"));
    }
    Ok(())
}

fn model_error(field: &str, e: impl std::fmt::Display) -> ConfigError {
    invalid(field, e.to_string())
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, Vec<u8>), ConfigError> {
        let bytes = std::fs::read(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let text = String::from_utf8(bytes.clone()).map_err(|e| invalid("file", e.to_string()))?;
        Ok((Self::parse(&text)?, bytes))
    }

    /// Range checks beyond what the schema enforces. Building the model is
    /// part of validation so bad physics parameters surface as config errors.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.build_model()?;
        self.integrator_options()?;
        if let Some(p) = &self.perturbation {
            if !(p.amplitude >= 0.0 && p.amplitude.is_finite()) {
                return Err(invalid("perturbation.amplitude", "must be >= 0"));
            }
            positive("perturbation.k", p.k)?;
        }
        if let Some(s) = &self.simulate {
            finite("simulate.t1", &[s.t1, s.t2])?;
            if s.positions.is_empty() {
                return Err(invalid("simulate.positions", "needs at least one position"));
            }
            for q in &s.positions {
                finite("simulate.positions", q)?;
            }
        }
        if self.ensemble.is_some() {
            self.ensemble_spec()?;
        }
        if self.sigma.is_some() {
            self.sigma_box()?;
        }
        if let Some(p) = &self.perturb {
            if !(p.amplitude >= 0.0 && p.amplitude.is_finite()) {
                return Err(invalid("perturb.amplitude", "must be >= 0"));
            }
            positive("perturb.k", p.k)?;
            if p.trials == 0 {
                return Err(invalid("perturb.trials", "must be >= 1"));
            }
            if self.sigma.is_none() {
                return Err(invalid("perturb", "needs a [sigma] section for the box"));
            }
        }
        if let Some(v) = &self.validate {
            if v.samples == 0 {
                return Err(invalid("validate.samples", "must be >= 1"));
            }
        }
        Ok(())
    }

    /// The base model without the optional perturbation.
    pub fn build_base_model(&self) -> Result<Arc<dyn WaveFunctionModel>, ConfigError> {
        let amp = |a: [f64; 2]| C64::new(a[0], a[1]);
        Ok(match &self.model {
            ModelConfig::PlaneWave {
                mass,
                k,
                branch: b,
                amplitude,
            } => {
                finite("model.k", k)?;
                let spec = PlaneWaveSpec {
                    k: *k,
                    branch: branch("model.branch", *b)?,
                    amplitude: amp(*amplitude),
                };
                Arc::new(PlaneWave::new(*mass, spec).map_err(|e| model_error("model", e))?)
            }
            ModelConfig::Superposition { mass, waves } => {
                if waves.is_empty() {
                    return Err(invalid("model.waves", "needs at least one wave"));
                }
                let specs = waves
                    .iter()
                    .map(|w| {
                        finite("model.waves.k", &w.k)?;
                        Ok(PlaneWaveSpec {
                            k: w.k,
                            branch: branch("model.waves.branch", w.branch)?,
                            amplitude: amp(w.amplitude),
                        })
                    })
                    .collect::<Result<Vec<_>, ConfigError>>()?;
                Arc::new(Superposition::new(*mass, &specs).map_err(|e| model_error("model", e))?)
            }
            ModelConfig::Circular { omega } => {
                Arc::new(CircularExample::new(*omega).map_err(|e| model_error("model.omega", e))?)
            }
            ModelConfig::GaussianPacket {
                mass,
                center,
                width,
                branch: b,
                nodes_per_axis,
                radius_in_widths,
            } => {
                finite("model.center", center)?;
                positive("model.width", *width)?;
                positive("model.radius_in_widths", *radius_in_widths)?;
                let quad = QuadratureSpec {
                    nodes_per_axis: *nodes_per_axis,
                    radius: radius_in_widths * width,
                    max_total_nodes: QuadratureSpec::DEFAULT_MAX_TOTAL_NODES,
                };
                let packet = GaussianPacket::build(*mass, *center, *width, branch("model.branch", *b)?, quad)
                    .map_err(|e| model_error("model", e))?;
                Arc::new(packet)
            }
        })
    }

    /// The model every subcommand except `perturb` runs on.
    pub fn build_model(&self) -> Result<Arc<dyn WaveFunctionModel>, ConfigError> {
        let base = self.build_base_model()?;
        let Some(p) = &self.perturbation else {
            return Ok(base);
        };
        let waves = four_waves(base.mass(), p.k).map_err(|e| model_error("perturbation.k", e))?;
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let specs: Vec<PlaneWaveSpec> = waves
            .iter()
            .map(|w| {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                PlaneWaveSpec {
                    amplitude: C64::new(re, im) * (p.amplitude * std::f64::consts::FRAC_1_SQRT_2),
                    ..*w.spec()
                }
            })
            .collect();
        let delta: Arc<dyn WaveFunctionModel> =
            Arc::new(Superposition::new(base.mass(), &specs).map_err(|e| model_error("perturbation", e))?);
        Ok(Arc::new(SumModel::new(vec![base, delta]).map_err(|e| model_error("perturbation", e))?))
    }

    pub fn integrator_options(&self) -> Result<IntegratorOptions, ConfigError> {
        let c = &self.integrator;
        let method = match c.method {
            MethodConfig::Dopri5 => {
                if c.rk4_step.is_some() {
                    return Err(invalid("integrator.rk4_step", "only valid with method = \"rk4\""));
                }
                Method::Dopri5
            }
            MethodConfig::Rk4 => Method::Rk4 {
                step: c.rk4_step.ok_or_else(|| invalid("integrator.rk4_step", "required with method = \"rk4\""))?,
            },
        };
        if let Some(d) = &c.domain {
            region("integrator.domain", d)?;
        }
        let opts = IntegratorOptions {
            rel_tol: c.rel_tol,
            abs_tol: c.abs_tol,
            max_step: c.max_step.unwrap_or(f64::INFINITY),
            psi_floor: c.psi_floor,
            speed_event_epsilon: c.speed_event_epsilon,
            max_samples: c.max_samples,
            method,
            domain: c.domain.map(Region3::from),
        };
        opts.validate().map_err(|e| invalid("integrator", e.to_string()))?;
        Ok(opts)
    }

    pub fn ensemble_spec(&self) -> Result<(EnsembleSpec, SamplerOptions), ConfigError> {
        let e = self.ensemble.as_ref().ok_or(ConfigError::Missing("ensemble"))?;
        finite("ensemble.t1", &[e.t1, e.t2])?;
        if e.t1 > e.t2 {
            return Err(invalid("ensemble.t2", "must be >= t1"));
        }
        if e.n == 0 {
            return Err(invalid("ensemble.n", "must be >= 1"));
        }
        region("ensemble.region", &e.region)?;
        if let Some(x) = e.epsilons.iter().find(|x| !(**x > 0.0 && **x < 1.0)) {
            return Err(invalid("ensemble.epsilons", format!("each must lie in (0, 1), got {x}")));
        }
        if e.scan_resolution < 2 {
            return Err(invalid("ensemble.scan_resolution", "must be >= 2"));
        }
        if !(e.envelope_factor >= 1.0 && e.envelope_factor.is_finite()) {
            return Err(invalid("ensemble.envelope_factor", "must be >= 1"));
        }
        let histogram = match &e.histogram {
            Some(h) => {
                if h.bins.iter().any(|b| *b == 0) || h.sub_resolution == 0 {
                    return Err(invalid("ensemble.histogram", "bins and sub_resolution must be >= 1"));
                }
                let r = h.region.unwrap_or(e.region);
                region("ensemble.histogram.region", &r)?;
                Some(HistogramSpec {
                    region: r.into(),
                    bins: h.bins,
                    sub_resolution: h.sub_resolution,
                })
            }
            None => None,
        };
        let spec = EnsembleSpec {
            t1: e.t1,
            t2: e.t2,
            region: SamplingRegion {
                region: e.region.into(),
                n: e.n,
                seed: e.seed,
            },
            epsilons: e.epsilons.clone(),
            histogram,
        };
        let sampler = SamplerOptions {
            scan_resolution: e.scan_resolution,
            envelope_factor: e.envelope_factor,
            ..SamplerOptions::default()
        };
        Ok((spec, sampler))
    }

    pub fn sigma_box(&self) -> Result<(CompactBox, TransversalityOptions, bool), ConfigError> {
        let s = self.sigma.as_ref().ok_or(ConfigError::Missing("sigma"))?;
        let bx = CompactBox {
            t: s.t,
            lo: s.lo,
            hi: s.hi,
            resolution: s.resolution,
        };
        bx.validate().map_err(|e| invalid("sigma", e.to_string()))?;
        let t = &s.tolerances;
        let opts = TransversalityOptions {
            newton_tol: t.newton_tol,
            max_iter: t.max_iter,
            margin_tol: t.margin_tol,
            degenerate_tol: t.degenerate_tol,
            degenerate_fraction: t.degenerate_fraction,
            seed_safety: t.seed_safety,
            dedup_tol: t.dedup_tol,
            psi_floor: self.integrator.psi_floor,
            max_reported_points: t.max_reported_points,
        };
        opts.validate().map_err(|e| invalid("sigma.tolerances", e.to_string()))?;
        Ok((bx, opts, s.write_points_csv))
    }
}

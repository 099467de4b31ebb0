//! Run-file loading and the reproducibility manifest.
//!
//! The run file is sectioned TOML. Frequencies are written as Hz-over-2π for
//! readability and converted to angular units on load; times are seconds and
//! fluxes are in units of Φ0 throughout. Unknown keys anywhere are an error.
//! `idle_flux`, when omitted, is resolved from the device spectrum as the
//! ZZ-free bias between the idle region and the first crossing.

use crate::calibration::OrbitConfig;
use crate::cmaes::ParamRange;
use crate::cryoscope::CryoscopeSetup;
use crate::device::{zz_zero_crossing, DeviceError, DeviceParams};
use crate::pulse::{PulseError, PulseFamily, PulseParams};
use crate::signal::{DistortionChain, FirFilter, IirStage, SignalError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {err}")]
    Io { path: String, err: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("bad config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Pulse(#[from] PulseError),
}

// ---------------------------------------------------------------------------
// resolved configuration

/// Fully resolved run configuration: physical units, concrete defaults, and
/// the idle bias filled in. This is what the manifest embeds, so re-running
/// from a manifest skips raw-file resolution entirely.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub device: DeviceParams,
    /// Flux-line model; `None` means an undistorted line where optional and
    /// the reference four-stage line for the subcommands that study one.
    pub chain: Option<DistortionChain>,
    pub pulse: PulseSection,
    pub orbit: OrbitConfig,
    pub optimizer: OptimizerSection,
    pub cryoscope: CryoscopeSection,
    pub spectrum: SpectrumSection,
    pub leakage: LeakageSection,
    pub rb: RbSection,
    pub stress: StressSection,
    pub scaling: ScalingSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PulseSection {
    pub family: PulseFamily,
    /// Harmonic / node count for the variable-length families.
    pub shape_terms: usize,
    /// Explicit initial physical parameter vector, if given.
    pub initial: Option<Vec<f64>>,
    /// Explicit search-space ranges, if given.
    pub ranges: Option<Vec<ParamRange>>,
    /// Template width / rise used when seeding from scratch.
    pub template_width: f64,
    pub template_rise: f64,
    /// Amplitude window scanned by the coarse conditional-phase seed.
    pub seed_window: (f64, f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerSection {
    pub population: Option<usize>,
    pub max_evolutions: usize,
    pub termination_window: usize,
    pub termination_tol: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CryoscopeSection {
    pub setup: CryoscopeSetup,
    pub n_long: usize,
    pub n_short: usize,
    pub fir_taps: Option<usize>,
    /// Spectrum-table nodes backing the phase observable.
    pub table_nodes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumSection {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeakageSection {
    pub width_lo: f64,
    pub width_hi: f64,
    pub width_points: usize,
    pub amp_lo: f64,
    pub amp_hi: f64,
    pub amp_points: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RbSection {
    pub ns: Vec<u32>,
    pub interleave: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StressSection {
    pub ns: Vec<u32>,
    pub predistort: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingSection {
    pub functions: Vec<String>,
    pub dims: Vec<usize>,
    pub seeds: usize,
    /// Noise level; `None` uses the per-dimension default rule.
    pub noise: Option<f64>,
    pub max_generations: usize,
    pub spread: f64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            err: e.to_string(),
        })?;
        RunConfig::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<RunConfig, ConfigError> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        raw.resolve()
    }

    /// All-defaults configuration (what an empty run file resolves to).
    pub fn default_config() -> RunConfig {
        RunConfig::from_toml_str("").expect("empty config must resolve")
    }

    /// Reference flux line when none is configured.
    pub fn chain_or_reference(&self) -> DistortionChain {
        self.chain.clone().unwrap_or_else(|| DistortionChain::flux_line_default(self.orbit.dt))
    }

    /// Canonical serialized form; field order is fixed by the struct, so the
    /// bytes are stable for hashing.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        let mut out = String::with_capacity(64);
        for b in digest {
            use std::fmt::Write;
            write!(out, "{b:02x}").unwrap();
        }
        out
    }
}

// ---------------------------------------------------------------------------
// raw (on-disk) layer

fn hz(v: f64) -> f64 {
    crate::TWO_PI * v
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    output: Option<PathBuf>,
    device: Option<RawDevice>,
    chain: Option<RawChain>,
    pulse: Option<RawPulse>,
    orbit: Option<RawOrbit>,
    optimizer: Option<RawOptimizer>,
    cryoscope: Option<RawCryoscope>,
    spectrum: Option<RawSpectrum>,
    leakage: Option<RawLeakage>,
    rb: Option<RawRb>,
    stress: Option<RawStress>,
    scaling: Option<RawScaling>,
}

/// Device parameters with every frequency as Hz-over-2π.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDevice {
    omega1: Option<f64>,
    omega2: Option<f64>,
    alpha1: Option<f64>,
    alpha2: Option<f64>,
    alpha_c: Option<f64>,
    g1c: Option<f64>,
    g2c: Option<f64>,
    g12: Option<f64>,
    omega_c_max: Option<f64>,
    omega_c_min: Option<f64>,
    n_qubit_levels: Option<usize>,
    n_coupler_levels: Option<usize>,
    dimension_cap: Option<usize>,
}

impl RawDevice {
    fn resolve(self) -> DeviceParams {
        let mut d = DeviceParams::default();
        let freq = [
            (self.omega1, &mut d.omega1),
            (self.omega2, &mut d.omega2),
            (self.alpha1, &mut d.alpha1),
            (self.alpha2, &mut d.alpha2),
            (self.alpha_c, &mut d.alpha_c),
            (self.g1c, &mut d.g1c),
            (self.g2c, &mut d.g2c),
            (self.g12, &mut d.g12),
            (self.omega_c_max, &mut d.omega_c_max),
            (self.omega_c_min, &mut d.omega_c_min),
        ];
        for (raw, field) in freq {
            if let Some(v) = raw {
                *field = hz(v);
            }
        }
        if let Some(v) = self.n_qubit_levels {
            d.n_qubit_levels = v;
        }
        if let Some(v) = self.n_coupler_levels {
            d.n_coupler_levels = v;
        }
        if let Some(v) = self.dimension_cap {
            d.dimension_cap = v;
        }
        d
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStage {
    amplitude: f64,
    /// Seconds.
    tau: f64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawChain {
    /// Use the built-in reference four-stage line.
    default_line: Option<bool>,
    /// Sample period; defaults to the orbit AWG period.
    dt: Option<f64>,
    stages: Option<Vec<RawStage>>,
    fir_taps: Option<Vec<f64>>,
}

impl RawChain {
    fn resolve(self, fallback_dt: f64) -> Result<DistortionChain, ConfigError> {
        let dt = self.dt.unwrap_or(fallback_dt);
        if !(dt > 0.0) {
            return Err(ConfigError::Invalid("chain dt must be positive".into()));
        }
        let use_default = self.default_line.unwrap_or(false);
        if use_default && (self.stages.is_some() || self.fir_taps.is_some()) {
            return Err(ConfigError::Invalid(
                "chain: default_line and explicit stages/fir are mutually exclusive".into(),
            ));
        }
        let chain = if use_default {
            DistortionChain::flux_line_default(dt)
        } else {
            let stages = self
                .stages
                .unwrap_or_default()
                .into_iter()
                .map(|s| IirStage { amplitude: s.amplitude, tau: s.tau })
                .collect();
            let fir = self.fir_taps.map(|taps| FirFilter { taps, dt });
            DistortionChain { stages, fir, dt }
        };
        chain.validate()?;
        Ok(chain)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRange {
    lower: f64,
    upper: f64,
    initial: f64,
    spread: f64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPulse {
    family: Option<String>,
    shape_terms: Option<usize>,
    initial: Option<Vec<f64>>,
    range: Option<Vec<RawRange>>,
    template_width: Option<f64>,
    template_rise: Option<f64>,
    seed_window: Option<[f64; 2]>,
}

fn parse_family(s: &str) -> Result<PulseFamily, ConfigError> {
    match s {
        "gaussian-square" | "gaussian_square" => Ok(PulseFamily::GaussianSquare),
        "fourier" => Ok(PulseFamily::Fourier),
        "picos" => Ok(PulseFamily::Picos),
        other => Err(ConfigError::Invalid(format!(
            "unknown pulse family {other:?}; expected gaussian-square, fourier, or picos"
        ))),
    }
}

impl RawPulse {
    fn resolve(self) -> Result<PulseSection, ConfigError> {
        let family = match self.family.as_deref() {
            Some(s) => parse_family(s)?,
            None => PulseFamily::Fourier,
        };
        // five harmonics put the Fourier vector at nine parameters
        let shape_terms = self.shape_terms.unwrap_or(match family {
            PulseFamily::GaussianSquare => 0,
            PulseFamily::Fourier => 5,
            PulseFamily::Picos => 8,
        });
        let ranges = self
            .range
            .map(|rs| {
                rs.into_iter()
                    .map(|r| ParamRange {
                        lower: r.lower,
                        upper: r.upper,
                        initial: r.initial,
                        spread: r.spread,
                    })
                    .collect::<Vec<_>>()
            })
            .filter(|v: &Vec<ParamRange>| !v.is_empty());
        let section = PulseSection {
            family,
            shape_terms,
            initial: self.initial,
            ranges,
            template_width: self.template_width.unwrap_or(50e-9),
            template_rise: self.template_rise.unwrap_or(8e-9),
            seed_window: self.seed_window.map(|w| (w[0], w[1])).unwrap_or((0.04, 0.15)),
        };
        if let Some(init) = &section.initial {
            // validates both the vector length and the physical ranges
            PulseParams::from_vector(family, shape_terms, init)?.validate()?;
        }
        if !(section.seed_window.0 > 0.0 && section.seed_window.0 < section.seed_window.1) {
            return Err(ConfigError::Invalid("pulse seed_window must be an increasing positive pair".into()));
        }
        Ok(section)
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOrbit {
    sequences: Option<usize>,
    shots: Option<u32>,
    threshold: Option<f64>,
    n0: Option<u32>,
    sq_depolarizing: Option<f64>,
    cz_depolarizing: Option<f64>,
    readout_error: Option<f64>,
    dt: Option<f64>,
    buffer_after: Option<f64>,
    substeps: Option<usize>,
    idle_flux: Option<f64>,
}

impl RawOrbit {
    fn resolve(self, device: &DeviceParams) -> Result<OrbitConfig, ConfigError> {
        let mut o = OrbitConfig::default();
        if let Some(v) = self.sequences {
            o.sequences = v;
        }
        if let Some(v) = self.shots {
            o.shots = v;
        }
        if let Some(v) = self.threshold {
            o.threshold = v;
        }
        if let Some(v) = self.n0 {
            o.n0 = v;
        }
        if let Some(v) = self.sq_depolarizing {
            o.sq_depolarizing = v;
        }
        if let Some(v) = self.cz_depolarizing {
            o.cz_depolarizing = v;
        }
        if let Some(v) = self.readout_error {
            o.readout_error = v;
        }
        if let Some(v) = self.dt {
            o.dt = v;
        }
        if let Some(v) = self.buffer_after {
            o.buffer_after = v;
        }
        if let Some(v) = self.substeps {
            o.substeps = v;
        }
        o.idle_flux = match self.idle_flux {
            Some(v) => v,
            // ZZ-free bias between the idle plateau and the first crossing
            None => zz_zero_crossing(device, 0.25, 0.40)?.flux,
        };
        o.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(o)
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptimizer {
    population: Option<usize>,
    max_evolutions: Option<usize>,
    termination_window: Option<usize>,
    termination_tol: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCryoscope {
    amplitude: Option<f64>,
    t_max: Option<f64>,
    /// Trace spacing; defaults to the chain sample period so fitted FIR taps
    /// land on the predistortion grid.
    spacing: Option<f64>,
    theta_points: Option<usize>,
    frame_detuning: Option<f64>,
    contrast_floor: Option<f64>,
    n_long: Option<usize>,
    n_short: Option<usize>,
    fir_taps: Option<usize>,
    table_nodes: Option<usize>,
}

impl RawCryoscope {
    fn resolve(self, idle_flux: f64, chain_dt: f64) -> Result<CryoscopeSection, ConfigError> {
        let mut setup = CryoscopeSetup { idle_flux, ..CryoscopeSetup::default() };
        if let Some(v) = self.amplitude {
            setup.amplitude = v;
        }
        if let Some(v) = self.t_max {
            setup.t_max = v;
        }
        setup.spacing = self.spacing.unwrap_or(chain_dt);
        if let Some(v) = self.theta_points {
            setup.theta_points = v;
        }
        if let Some(v) = self.frame_detuning {
            setup.frame_detuning = v;
        }
        if let Some(v) = self.contrast_floor {
            setup.contrast_floor = v;
        }
        setup.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(CryoscopeSection {
            setup,
            n_long: self.n_long.unwrap_or(2),
            n_short: self.n_short.unwrap_or(2),
            fir_taps: self.fir_taps,
            table_nodes: self.table_nodes.unwrap_or(700),
        })
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpectrum {
    lo: Option<f64>,
    hi: Option<f64>,
    points: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLeakage {
    width_lo: Option<f64>,
    width_hi: Option<f64>,
    width_points: Option<usize>,
    amp_lo: Option<f64>,
    amp_hi: Option<f64>,
    amp_points: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRb {
    ns: Option<Vec<u32>>,
    interleave: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStress {
    ns: Option<Vec<u32>>,
    predistort: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScaling {
    functions: Option<Vec<String>>,
    dims: Option<Vec<usize>>,
    seeds: Option<usize>,
    noise: Option<f64>,
    max_generations: Option<usize>,
    spread: Option<f64>,
}

impl RawConfig {
    fn resolve(self) -> Result<RunConfig, ConfigError> {
        let device = self.device.unwrap_or_default().resolve();
        device.validate()?;
        let orbit = self.orbit.unwrap_or_default().resolve(&device)?;
        let chain = match self.chain {
            Some(c) => Some(c.resolve(orbit.dt)?),
            None => None,
        };
        let chain_dt = chain.as_ref().map(|c| c.dt).unwrap_or(orbit.dt);
        let pulse = self.pulse.unwrap_or_default().resolve()?;
        let opt = self.optimizer.unwrap_or_default();
        let optimizer = OptimizerSection {
            population: opt.population,
            max_evolutions: opt.max_evolutions.unwrap_or(150),
            termination_window: opt.termination_window.unwrap_or(12),
            termination_tol: opt.termination_tol,
        };
        if optimizer.max_evolutions == 0 {
            return Err(ConfigError::Invalid("optimizer.max_evolutions must be positive".into()));
        }
        let cryoscope =
            self.cryoscope.unwrap_or_default().resolve(orbit.idle_flux, chain_dt)?;
        let rs = self.spectrum.unwrap_or_default();
        let spectrum = SpectrumSection {
            lo: rs.lo.unwrap_or(0.0),
            hi: rs.hi.unwrap_or(0.5),
            points: rs.points.unwrap_or(401),
        };
        if !(spectrum.lo < spectrum.hi) || spectrum.points < 2 {
            return Err(ConfigError::Invalid("spectrum grid needs lo < hi and at least 2 points".into()));
        }
        let rl = self.leakage.unwrap_or_default();
        let leakage = LeakageSection {
            width_lo: rl.width_lo.unwrap_or(30e-9),
            width_hi: rl.width_hi.unwrap_or(90e-9),
            width_points: rl.width_points.unwrap_or(13),
            amp_lo: rl.amp_lo.unwrap_or(0.05),
            amp_hi: rl.amp_hi.unwrap_or(0.18),
            amp_points: rl.amp_points.unwrap_or(13),
        };
        if !(leakage.width_lo > 0.0 && leakage.width_lo <= leakage.width_hi)
            || leakage.width_points < 1
            || leakage.amp_points < 1
            || !(leakage.amp_lo <= leakage.amp_hi)
        {
            return Err(ConfigError::Invalid("bad leakage grid".into()));
        }
        let rrb = self.rb.unwrap_or_default();
        let rb = RbSection {
            ns: rrb.ns.unwrap_or_else(|| vec![2, 4, 6, 8, 12, 16]),
            interleave: rrb.interleave.unwrap_or(1).max(1),
        };
        if rb.ns.is_empty() {
            return Err(ConfigError::Invalid("rb.ns must not be empty".into()));
        }
        let rst = self.stress.unwrap_or_default();
        let stress = StressSection {
            ns: rst.ns.unwrap_or_else(|| vec![2, 4, 6, 8]),
            predistort: rst.predistort.unwrap_or(false),
        };
        if stress.ns.is_empty() {
            return Err(ConfigError::Invalid("stress.ns must not be empty".into()));
        }
        let rsc = self.scaling.unwrap_or_default();
        let scaling = ScalingSection {
            functions: rsc.functions.unwrap_or_else(|| vec!["sphere".into(), "rosenbrock".into()]),
            dims: rsc.dims.unwrap_or_else(|| vec![1, 2, 4, 8, 16, 32]),
            seeds: rsc.seeds.unwrap_or(10),
            noise: rsc.noise,
            max_generations: rsc.max_generations.unwrap_or(20_000),
            spread: rsc.spread.unwrap_or(1.0),
        };
        if scaling.functions.is_empty() || scaling.dims.is_empty() || scaling.seeds == 0 {
            return Err(ConfigError::Invalid("scaling needs functions, dims, and seeds".into()));
        }
        for name in &scaling.functions {
            if crate::scaling::TestFunctionKind::parse(name).is_none() {
                return Err(ConfigError::Invalid(format!("unknown scaling function {name:?}")));
            }
        }
        Ok(RunConfig {
            seed: self.seed.unwrap_or(0),
            output: self.output.unwrap_or_else(|| PathBuf::from("runs")),
            device,
            chain,
            pulse,
            orbit,
            optimizer,
            cryoscope,
            spectrum,
            leakage,
            rb,
            stress,
            scaling,
        })
    }
}

// ---------------------------------------------------------------------------
// manifest

/// Reproducibility record written next to every run's artifacts. Embeds the
/// resolved configuration so `--manifest` re-runs need nothing else.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    pub package: String,
    pub subcommand: String,
    pub seed: u64,
    pub config_hash: String,
    pub artifacts: Vec<String>,
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(subcommand: &str, config: &RunConfig, artifacts: Vec<String>) -> Manifest {
        Manifest {
            schema: SCHEMA_VERSION,
            package: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
            subcommand: subcommand.to_string(),
            seed: config.seed,
            config_hash: config.hash(),
            artifacts,
            config: config.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Manifest, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            err: e.to_string(),
        })?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if m.schema != SCHEMA_VERSION {
            return Err(ConfigError::Invalid(format!(
                "manifest schema {} unsupported (expected {})",
                m.schema, SCHEMA_VERSION
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            err: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_resolves_to_defaults() {
        let cfg = RunConfig::default_config();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.pulse.family, PulseFamily::Fourier);
        assert_eq!(cfg.pulse.shape_terms, 5);
        assert!(cfg.chain.is_none());
        assert_eq!(cfg.optimizer.max_evolutions, 150);
        // the resolved idle bias is the ZZ-free point of the default device
        assert!((cfg.orbit.idle_flux - 0.33145).abs() < 5e-4, "idle {}", cfg.orbit.idle_flux);
    }

    #[test]
    fn frequencies_are_read_as_hz_over_2pi() {
        let cfg = RunConfig::from_toml_str("[device]\nomega1 = 4.0e9\n").unwrap();
        assert!((cfg.device.omega1 - crate::TWO_PI * 4.0e9).abs() < 1.0);
        // untouched fields keep the angular defaults
        assert_eq!(cfg.device.omega2, DeviceParams::default().omega2);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for text in [
            "unknown_top = 1\n",
            "[device]\nfrequency = 4e9\n",
            "[orbit]\nshotss = 10\n",
            "[pulse]\nfamilies = \"fourier\"\n",
            "[chain]\ntaus = []\n",
            "[scaling]\nsigma = 0.1\n",
        ] {
            assert!(
                matches!(RunConfig::from_toml_str(text), Err(ConfigError::Parse(_))),
                "accepted {text:?}"
            );
        }
    }

    #[test]
    fn chain_section_builds_the_requested_line() {
        let cfg = RunConfig::from_toml_str(
            "[chain]\ndefault_line = true\n",
        )
        .unwrap();
        let chain = cfg.chain.unwrap();
        assert_eq!(chain.stages.len(), 4);
        assert_eq!(chain.dt, cfg.orbit.dt);

        let cfg = RunConfig::from_toml_str(
            "[chain]\ndt = 1e-9\n[[chain.stages]]\namplitude = -0.1\ntau = 50e-9\n",
        )
        .unwrap();
        let chain = cfg.chain.unwrap();
        assert_eq!(chain.stages.len(), 1);
        assert_eq!(chain.dt, 1e-9);
        assert!(chain.fir.is_none());
    }

    #[test]
    fn default_line_conflicts_with_explicit_stages() {
        let r = RunConfig::from_toml_str(
            "[chain]\ndefault_line = true\n[[chain.stages]]\namplitude = -0.1\ntau = 5e-8\n",
        );
        assert!(matches!(r, Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn explicit_idle_flux_skips_the_spectrum_solve() {
        let cfg = RunConfig::from_toml_str("[orbit]\nidle_flux = 0.3\n").unwrap();
        assert_eq!(cfg.orbit.idle_flux, 0.3);
    }

    #[test]
    fn bad_pulse_vector_length_is_rejected() {
        let r = RunConfig::from_toml_str(
            "[pulse]\nfamily = \"fourier\"\nshape_terms = 5\ninitial = [0.1, 50e-9]\n",
        );
        assert!(r.is_err());
    }

    #[test]
    fn cryoscope_spacing_defaults_to_the_chain_grid() {
        let cfg = RunConfig::from_toml_str("[chain]\ndefault_line = true\ndt = 5e-10\n").unwrap();
        assert_eq!(cfg.cryoscope.setup.spacing, 5e-10);
        assert_eq!(cfg.cryoscope.setup.idle_flux, cfg.orbit.idle_flux);
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = RunConfig::default_config();
        let b = RunConfig::default_config();
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig::from_toml_str("seed = 9\n").unwrap();
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn manifest_round_trips_through_json() {
        let cfg = RunConfig::from_toml_str("seed = 3\n[chain]\ndefault_line = true\n").unwrap();
        let m = Manifest::new("spectrum", &cfg, vec!["spectrum.csv".into()]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let back = Manifest::load(&path).unwrap();
        assert_eq!(back.subcommand, "spectrum");
        assert_eq!(back.seed, 3);
        assert_eq!(back.config_hash, cfg.hash());
        assert_eq!(back.config.hash(), cfg.hash());
        assert_eq!(back.artifacts, vec!["spectrum.csv".to_string()]);
    }

    #[test]
    fn unknown_scaling_function_is_rejected() {
        let r = RunConfig::from_toml_str("[scaling]\nfunctions = [\"cubic\"]\n");
        assert!(matches!(r, Err(ConfigError::Invalid(_))));
    }
}

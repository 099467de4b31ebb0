//! Command-line entry point: one binary, nine experiment subcommands, CSV
//! and JSON artifacts, and a manifest that makes every run reproducible.
//!
//! All artifacts land in the output directory (config `output`, overridden
//! by `--out`). Every run finishes by writing `manifest.json` — config hash,
//! seed, package version, artifact list, and the full resolved configuration
//! — and re-running with `--manifest` regenerates the artifacts byte for
//! byte. CSV columns carry frequencies as Hz-over-2π, matching the run-file
//! convention; times are seconds and fluxes are in units of Φ0.

use crate::calibration::{
    coarse_cz_seed, consecutive_cz_stress, run_optimization, split_rng, CalibrationConfig,
    DeviceOrbitEvaluator, TimingModel,
};
use crate::cmaes::{ParamRange, SearchSpace};
use crate::config::{Manifest, RunConfig};
use crate::cryoscope::{identify_line, LineIdentification};
use crate::device::{labeled_spectrum, Label, SpectrumTable};
use crate::parallel::Parallelism;
use crate::propagator::{apply_virtual_z, extract_gate, leakage_map, propagate};
use crate::pulse::{
    FourierParams, GaussianSquareParams, PicosParams, PulseFamily, PulseParams,
    MAX_FLUX_AMPLITUDE,
};
use crate::rb::{fit_decay, irb_gate_error, rb_survivals, DecayFit};
use crate::scaling::{
    fit_power_law, median_k_by_dimension, run_sweep, ConvergenceConfig, PowerLawFit,
    TestFunctionKind,
};
use crate::signal::{
    apply_chain, apply_predistortion, invert_chain, DistortionChain, FirFilter, IirStage,
};
use anyhow::{anyhow, bail, Context as _};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

const RB_DOMAIN: u64 = 11;

#[derive(Parser, Debug)]
#[command(
    name = "czcal",
    version,
    about = "Two-qubit CZ calibration workbench: device spectrum, pulse optimization, \
             flux-line identification, and randomized benchmarking on a simulated device"
)]
struct Cli {
    /// Run configuration (TOML). Omitted: built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Re-run the exact configuration embedded in a manifest.
    #[arg(long, global = true, value_name = "FILE", conflicts_with = "config")]
    manifest: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads: 0 = all cores, 1 = sequential. Default: all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Conditional shift and labeled energies vs coupler flux.
    Spectrum {
        /// Flux grid size override.
        #[arg(long)]
        points: Option<usize>,
    },
    /// Retained |10⟩/|11⟩ population over a width × amplitude pulse grid.
    LeakageMap,
    /// Propagate one pulse and report gate metrics.
    GateReport {
        /// Calibrated pulse JSON (a `best.json` or a bare pulse record).
        #[arg(long, value_name = "FILE")]
        pulse_file: Option<PathBuf>,
        /// Predistort through the inverse of the configured line.
        #[arg(long)]
        predistort: bool,
    },
    /// Closed-loop pulse calibration against the simulated device.
    Optimize {
        /// Pulse family override: gaussian-square, fourier, or picos.
        #[arg(long)]
        pulse: Option<String>,
        #[arg(long)]
        max_evolutions: Option<usize>,
    },
    /// Identify the flux line from simulated Ramsey phase traces.
    Cryoscope {
        /// Probe step amplitude override (Φ0).
        #[arg(long)]
        amplitude: Option<f64>,
    },
    /// Build the inverse filter and verify the corrected step response.
    Predistort {
        /// Line coefficients from `cryoscope` (default: invert the
        /// configured line exactly).
        #[arg(long, value_name = "FILE")]
        coefficients: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        pulse_file: Option<PathBuf>,
    },
    /// Reference + interleaved randomized benchmarking of the CZ.
    Rb {
        #[arg(long, value_name = "FILE")]
        pulse_file: Option<PathBuf>,
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long)]
        shots: Option<u32>,
    },
    /// Line-memory stress test: one CZ per slot vs two back-to-back.
    Stress {
        #[arg(long, value_name = "FILE")]
        pulse_file: Option<PathBuf>,
        /// Predistort the line (exactly, or with --coefficients).
        #[arg(long)]
        predistort: bool,
        /// Fitted line coefficients to build the inverse from.
        #[arg(long, value_name = "FILE")]
        coefficients: Option<PathBuf>,
    },
    /// Optimizer convergence scaling on noisy benchmark functions.
    Scaling {
        /// Benchmark function override (repeatable).
        #[arg(long = "function", value_name = "NAME")]
        functions: Vec<String>,
        #[arg(long)]
        seeds: Option<usize>,
        /// Fixed noise level (default: per-dimension rule).
        #[arg(long)]
        noise: Option<f64>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Spectrum { .. } => "spectrum",
            Command::LeakageMap => "leakage-map",
            Command::GateReport { .. } => "gate-report",
            Command::Optimize { .. } => "optimize",
            Command::Cryoscope { .. } => "cryoscope",
            Command::Predistort { .. } => "predistort",
            Command::Rb { .. } => "rb",
            Command::Stress { .. } => "stress",
            Command::Scaling { .. } => "scaling",
        }
    }
}

/// Parse and run; returns the process exit code.
pub fn main_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match (&cli.manifest, &cli.config) {
        (Some(path), _) => {
            let m = Manifest::load(path)?;
            if m.subcommand != cli.cmd.name() {
                bail!(
                    "manifest records a {:?} run; this invocation is {:?}",
                    m.subcommand,
                    cli.cmd.name()
                );
            }
            m.config
        }
        (None, Some(path)) => RunConfig::load(path)?,
        (None, None) => RunConfig::default_config(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let par = match cli.threads {
        None => Parallelism::default(),
        Some(n) => Parallelism::with_threads(n),
    };
    // --out redirects the artifacts but never enters the config (or its
    // hash), so a redirected re-run stays byte-identical
    let dir = cli.out.clone().unwrap_or_else(|| cfg.output.clone());
    fs::create_dir_all(&dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))?;

    let mut artifacts = match &cli.cmd {
        Command::Spectrum { points } => cmd_spectrum(&cfg, *points, &dir, &par)?,
        Command::LeakageMap => cmd_leakage(&cfg, &dir, &par)?,
        Command::GateReport { pulse_file, predistort } => {
            cmd_gate_report(&cfg, pulse_file.as_deref(), *predistort, &dir)?
        }
        Command::Optimize { pulse, max_evolutions } => {
            let mut cfg = cfg.clone();
            if let Some(name) = pulse {
                override_family(&mut cfg, name)?;
            }
            if let Some(n) = max_evolutions {
                cfg.optimizer.max_evolutions = *n;
            }
            let arts = cmd_optimize(&cfg, &dir, &par)?;
            // the overrides are part of the physics, so the manifest must
            // record the overridden configuration
            let m = Manifest::new("optimize", &cfg, sorted(arts.clone()));
            m.save(&dir.join("manifest.json"))?;
            println!("wrote {} artifacts to {}", arts.len() + 1, dir.display());
            return Ok(());
        }
        Command::Cryoscope { amplitude } => {
            let mut cfg = cfg.clone();
            if let Some(a) = amplitude {
                cfg.cryoscope.setup.amplitude = *a;
            }
            let arts = cmd_cryoscope(&cfg, &dir, &par)?;
            let m = Manifest::new("cryoscope", &cfg, sorted(arts.clone()));
            m.save(&dir.join("manifest.json"))?;
            println!("wrote {} artifacts to {}", arts.len() + 1, dir.display());
            return Ok(());
        }
        Command::Predistort { coefficients, pulse_file } => {
            cmd_predistort(&cfg, coefficients.as_deref(), pulse_file.as_deref(), &dir)?
        }
        Command::Rb { pulse_file, sequences, shots } => {
            let mut cfg = cfg.clone();
            if let Some(m) = sequences {
                cfg.orbit.sequences = *m;
            }
            if let Some(s) = shots {
                cfg.orbit.shots = *s;
            }
            let arts = cmd_rb(&cfg, pulse_file.as_deref(), &dir)?;
            let m = Manifest::new("rb", &cfg, sorted(arts.clone()));
            m.save(&dir.join("manifest.json"))?;
            println!("wrote {} artifacts to {}", arts.len() + 1, dir.display());
            return Ok(());
        }
        Command::Stress { pulse_file, predistort, coefficients } => {
            let mut cfg = cfg.clone();
            if *predistort {
                cfg.stress.predistort = true;
            }
            let arts =
                cmd_stress(&cfg, pulse_file.as_deref(), coefficients.as_deref(), &dir)?;
            let m = Manifest::new("stress", &cfg, sorted(arts.clone()));
            m.save(&dir.join("manifest.json"))?;
            println!("wrote {} artifacts to {}", arts.len() + 1, dir.display());
            return Ok(());
        }
        Command::Scaling { functions, seeds, noise } => {
            let mut cfg = cfg.clone();
            if !functions.is_empty() {
                cfg.scaling.functions = functions.clone();
            }
            if let Some(s) = seeds {
                cfg.scaling.seeds = *s;
            }
            if let Some(n) = noise {
                cfg.scaling.noise = Some(*n);
            }
            let arts = cmd_scaling(&cfg, &dir, &par)?;
            let m = Manifest::new("scaling", &cfg, sorted(arts.clone()));
            m.save(&dir.join("manifest.json"))?;
            println!("wrote {} artifacts to {}", arts.len() + 1, dir.display());
            return Ok(());
        }
    };
    artifacts.sort();
    let manifest = Manifest::new(cli.cmd.name(), &cfg, artifacts.clone());
    manifest.save(&dir.join("manifest.json"))?;
    println!("wrote {} artifacts to {}", artifacts.len() + 1, dir.display());
    Ok(())
}

fn sorted(mut v: Vec<String>) -> Vec<String> {
    v.sort();
    v
}

fn override_family(cfg: &mut RunConfig, name: &str) -> anyhow::Result<()> {
    let family = match name {
        "gaussian-square" | "gaussian_square" => PulseFamily::GaussianSquare,
        "fourier" => PulseFamily::Fourier,
        "picos" => PulseFamily::Picos,
        other => bail!("unknown pulse family {other:?}"),
    };
    if family != cfg.pulse.family {
        // the configured vector and ranges describe the old family's layout
        cfg.pulse.family = family;
        cfg.pulse.initial = None;
        cfg.pulse.ranges = None;
        cfg.pulse.shape_terms = match family {
            PulseFamily::GaussianSquare => 0,
            PulseFamily::Fourier => 5,
            PulseFamily::Picos => 8,
        };
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// artifact helpers

fn write_csv<T: Serialize>(
    dir: &Path,
    name: &str,
    rows: impl IntoIterator<Item = T>,
    artifacts: &mut Vec<String>,
) -> anyhow::Result<()> {
    let path = dir.join(name);
    let mut w = csv::Writer::from_path(&path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    artifacts.push(name.to_string());
    Ok(())
}

fn write_json<T: Serialize>(
    dir: &Path,
    name: &str,
    value: &T,
    artifacts: &mut Vec<String>,
) -> anyhow::Result<()> {
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value)?;
    fs::write(&path, text + "\n").with_context(|| format!("cannot write {}", path.display()))?;
    artifacts.push(name.to_string());
    Ok(())
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

// ---------------------------------------------------------------------------
// pulse resolution

/// Initial pulse from the config: explicit vector, explicit ranges, or a
/// coarse conditional-phase seed cast into the configured family.
fn resolve_pulse(cfg: &RunConfig) -> anyhow::Result<PulseParams> {
    let ps = &cfg.pulse;
    if let Some(v) = &ps.initial {
        return Ok(PulseParams::from_vector(ps.family, ps.shape_terms, v)?);
    }
    if let Some(ranges) = &ps.ranges {
        let v: Vec<f64> = ranges.iter().map(|r| r.initial).collect();
        return Ok(PulseParams::from_vector(ps.family, ps.shape_terms, &v)?);
    }
    let template = PulseParams::GaussianSquare(GaussianSquareParams {
        amplitude: 0.08,
        width: ps.template_width,
        rise_time: ps.template_rise,
        phi1: 0.0,
        phi2: 0.0,
    });
    let seeded = coarse_cz_seed(
        &cfg.device,
        &template,
        &cfg.orbit,
        ps.seed_window.0,
        ps.seed_window.1,
    )?;
    Ok(cast_family(&seeded, ps.family, ps.shape_terms))
}

/// Re-express a seeded Gaussian-square pulse in another family with the same
/// peak amplitude, width, and virtual-Z phases. The envelope area changes,
/// so the conditional phase lands near — not at — π; the optimizer owns the
/// rest of the distance.
fn cast_family(seed: &PulseParams, family: PulseFamily, shape_terms: usize) -> PulseParams {
    let v = seed.parameter_vector();
    let (amplitude, width, phi1, phi2) = (v[0], v[1], v[3], v[4]);
    match family {
        PulseFamily::GaussianSquare => seed.clone(),
        PulseFamily::Fourier => {
            let mut lambdas = vec![0.0; shape_terms.max(1)];
            lambdas[0] = 1.0;
            PulseParams::Fourier(FourierParams { amplitude, width, lambdas, phi1, phi2 })
        }
        PulseFamily::Picos => PulseParams::Picos(PicosParams {
            nodes: vec![1.0; shape_terms.max(1)],
            amplitude,
            width,
            phi1,
            phi2,
        }),
    }
}

/// Default optimization windows around an initial pulse.
fn default_space(initial: &PulseParams) -> anyhow::Result<SearchSpace> {
    let v = initial.parameter_vector();
    let amp_range = |a: f64| {
        let lo = (0.6 * a).min(a - 0.01);
        let hi = (1.35 * a).max(a + 0.01).min(MAX_FLUX_AMPLITUDE);
        ParamRange { lower: lo, upper: hi, initial: a, spread: (0.05 * a.abs()).max(2e-3) }
    };
    let width_range = |w: f64| ParamRange {
        lower: (w - 15e-9).max(10e-9),
        upper: w + 15e-9,
        initial: w,
        spread: 2e-9,
    };
    let phase_range = |p: f64| ParamRange { lower: p - 0.6, upper: p + 0.6, initial: p, spread: 0.15 };
    let ranges = match initial {
        PulseParams::GaussianSquare(p) => vec![
            amp_range(v[0]),
            width_range(v[1]),
            ParamRange {
                lower: (p.rise_time - 4e-9).max(2e-9),
                upper: p.rise_time + 4e-9,
                initial: p.rise_time,
                spread: 0.5e-9,
            },
            phase_range(v[3]),
            phase_range(v[4]),
        ],
        PulseParams::Fourier(p) => {
            let mut r = vec![amp_range(p.amplitude), width_range(p.width)];
            for (i, &l) in p.lambdas.iter().enumerate() {
                r.push(if i == 0 {
                    // the envelope is peak-normalized, so the fundamental only
                    // sets the scale of the other harmonics
                    ParamRange { lower: 0.4, upper: 1.6, initial: l, spread: 0.1 }
                } else {
                    ParamRange {
                        lower: (l - 0.5).min(-0.5),
                        upper: (l + 0.5).max(0.5),
                        initial: l,
                        spread: 0.08,
                    }
                });
            }
            r.push(phase_range(p.phi1));
            r.push(phase_range(p.phi2));
            r
        }
        PulseParams::Picos(p) => {
            let mut r: Vec<ParamRange> = p
                .nodes
                .iter()
                .map(|&y| ParamRange {
                    lower: (y - 0.7).min(0.3),
                    upper: (y + 0.7).max(1.3),
                    initial: y,
                    spread: 0.08,
                })
                .collect();
            r.push(amp_range(p.amplitude));
            r.push(width_range(p.width));
            r.push(phase_range(p.phi1));
            r.push(phase_range(p.phi2));
            r
        }
    };
    Ok(SearchSpace::new(ranges)?)
}

/// Load a calibrated pulse from `best.json` (or a bare pulse record).
fn load_pulse_file(path: &Path) -> anyhow::Result<PulseParams> {
    #[derive(Deserialize)]
    struct WithPulse {
        pulse: PulseParams,
    }
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read pulse file {}", path.display()))?;
    if let Ok(w) = serde_json::from_str::<WithPulse>(&text) {
        return Ok(w.pulse);
    }
    serde_json::from_str::<PulseParams>(&text)
        .map_err(|e| anyhow!("{} is neither a best.json nor a pulse record: {e}", path.display()))
}

fn pulse_for(cfg: &RunConfig, file: Option<&Path>) -> anyhow::Result<PulseParams> {
    match file {
        Some(p) => load_pulse_file(p),
        None => resolve_pulse(cfg),
    }
}

// ---------------------------------------------------------------------------
// subcommands

#[derive(Serialize)]
struct SpectrumRow {
    flux: f64,
    /// Coupler frequency, Hz-over-2π.
    omega_c: f64,
    e01: f64,
    e10: f64,
    e11: f64,
    /// Conditional shift ξ, Hz-over-2π.
    xi: f64,
}

fn cmd_spectrum(
    cfg: &RunConfig,
    points: Option<usize>,
    dir: &Path,
    par: &Parallelism,
) -> anyhow::Result<Vec<String>> {
    let sec = &cfg.spectrum;
    let fluxes = linspace(sec.lo, sec.hi, points.unwrap_or(sec.points));
    let dev = cfg.device.clone();
    let rows: Vec<Option<SpectrumRow>> = par.map(fluxes.len(), |i| {
        let flux = fluxes[i];
        // level crossings can defeat the labeler at isolated fluxes; those
        // points are dropped rather than failing the sweep
        let Ok(s) = labeled_spectrum(&dev, flux, None) else {
            return None;
        };
        let e = |n1: u8, n2: u8| {
            s.energy(&dev, Label { nc: 0, n1, n2 }) / crate::TWO_PI
        };
        Some(SpectrumRow {
            flux,
            omega_c: dev.coupler_frequency(flux) / crate::TWO_PI,
            e01: e(0, 1),
            e10: e(1, 0),
            e11: e(1, 1),
            xi: s.conditional_shift(&dev) / crate::TWO_PI,
        })
    });
    let dropped = rows.iter().filter(|r| r.is_none()).count();
    if dropped > 0 {
        eprintln!("spectrum: {dropped} of {} flux points were unlabeled and dropped", fluxes.len());
    }
    let mut artifacts = Vec::new();
    write_csv(dir, "spectrum.csv", rows.into_iter().flatten(), &mut artifacts)?;
    Ok(artifacts)
}

#[derive(Serialize)]
struct LeakageRow {
    width: f64,
    amplitude: f64,
    p10: f64,
    p11: f64,
    phi_zz: f64,
}

fn cmd_leakage(cfg: &RunConfig, dir: &Path, par: &Parallelism) -> anyhow::Result<Vec<String>> {
    let sec = &cfg.leakage;
    let widths = linspace(sec.width_lo, sec.width_hi, sec.width_points);
    let amps = linspace(sec.amp_lo, sec.amp_hi, sec.amp_points);
    let template = PulseParams::GaussianSquare(GaussianSquareParams {
        amplitude: 0.08,
        width: cfg.pulse.template_width,
        rise_time: cfg.pulse.template_rise,
        phi1: 0.0,
        phi2: 0.0,
    });
    let points = leakage_map(
        &cfg.device,
        &template,
        &widths,
        &amps,
        cfg.orbit.idle_flux,
        cfg.orbit.dt,
        cfg.orbit.substeps,
        par,
    )?;
    let mut artifacts = Vec::new();
    write_csv(
        dir,
        "leakage_map.csv",
        points.iter().map(|p| LeakageRow {
            width: p.width,
            amplitude: p.amplitude,
            p10: p.p10,
            p11: p.p11,
            phi_zz: p.phi_zz,
        }),
        &mut artifacts,
    )?;
    Ok(artifacts)
}

#[derive(Serialize)]
struct GateReport {
    family: PulseFamily,
    params: Vec<f64>,
    duration: f64,
    fidelity_cz: f64,
    infidelity: f64,
    phi_zz: f64,
    phase_error: f64,
    phi1_acc: f64,
    phi2_acc: f64,
    leakage: [f64; 4],
    through_chain: bool,
    predistorted: bool,
}

fn cmd_gate_report(
    cfg: &RunConfig,
    pulse_file: Option<&Path>,
    predistort: bool,
    dir: &Path,
) -> anyhow::Result<Vec<String>> {
    let pulse = pulse_for(cfg, pulse_file)?;
    let wf = pulse.sample(cfg.orbit.dt, cfg.orbit.buffer_after)?;
    let mut delivered = wf.clone();
    if predistort {
        let chain = cfg
            .chain
            .as_ref()
            .ok_or_else(|| anyhow!("--predistort needs a configured chain"))?;
        delivered = apply_predistortion(&delivered, &invert_chain(chain)?)?;
    }
    if let Some(chain) = &cfg.chain {
        delivered = apply_chain(&delivered, chain)?;
    }
    let u = propagate(&cfg.device, &delivered, cfg.orbit.idle_flux, cfg.orbit.substeps)?;
    let g = extract_gate(&u, &cfg.device, cfg.orbit.idle_flux, delivered.duration())?;
    let (phi1, phi2) = pulse.virtual_z();
    let g = apply_virtual_z(&g, phi1, phi2);
    let report = GateReport {
        family: pulse.family(),
        params: pulse.parameter_vector(),
        duration: delivered.duration(),
        fidelity_cz: g.fidelity_cz,
        infidelity: 1.0 - g.fidelity_cz,
        phi_zz: g.phi_zz,
        phase_error: (g.phi_zz.abs() - std::f64::consts::PI).abs(),
        phi1_acc: g.phi1_acc,
        phi2_acc: g.phi2_acc,
        leakage: g.leakage,
        through_chain: cfg.chain.is_some(),
        predistorted: predistort,
    };
    let mut artifacts = Vec::new();
    write_json(dir, "gate_report.json", &report, &mut artifacts)?;
    Ok(artifacts)
}

#[derive(Serialize)]
struct EvolutionRow {
    evolution: usize,
    n: u32,
    seq_hash: u64,
    mean_cost: f64,
    min_cost: f64,
    normalized_mean: f64,
    sigma: f64,
    failures: usize,
    sq_per_seq: f64,
    cz_per_seq: f64,
    seconds: f64,
}

#[derive(Serialize)]
struct BestReport {
    family: PulseFamily,
    shape_terms: usize,
    best_cost: f64,
    best_evolution: usize,
    final_n: u32,
    terminated: bool,
    synthetic_seconds: f64,
    best_params: Vec<f64>,
    pulse: PulseParams,
}

fn cmd_optimize(cfg: &RunConfig, dir: &Path, par: &Parallelism) -> anyhow::Result<Vec<String>> {
    let space = match &cfg.pulse.ranges {
        Some(r) => SearchSpace::new(r.clone())?,
        None => default_space(&resolve_pulse(cfg)?)?,
    };
    let cal = CalibrationConfig {
        orbit: cfg.orbit.clone(),
        family: cfg.pulse.family,
        shape_terms: cfg.pulse.shape_terms,
        space,
        population: cfg.optimizer.population,
        max_evolutions: cfg.optimizer.max_evolutions,
        termination_window: cfg.optimizer.termination_window,
        termination_tol: cfg.optimizer.termination_tol,
        timing: TimingModel::default(),
        seed: cfg.seed,
    };
    let outcome = run_optimization(&cfg.device, cfg.chain.as_ref(), &cal, par)?;
    let mut artifacts = Vec::new();
    write_csv(
        dir,
        "evolutions.csv",
        outcome.evolutions.iter().map(|e| EvolutionRow {
            evolution: e.evolution,
            n: e.n,
            seq_hash: e.seq_hash,
            mean_cost: e.mean_cost,
            min_cost: e.min_cost,
            normalized_mean: e.normalized_mean,
            sigma: e.sigma,
            failures: e.failures,
            sq_per_seq: e.sq_per_seq,
            cz_per_seq: e.cz_per_seq,
            seconds: e.seconds,
        }),
        &mut artifacts,
    )?;
    let best = BestReport {
        family: cfg.pulse.family,
        shape_terms: cfg.pulse.shape_terms,
        best_cost: outcome.best_cost,
        best_evolution: outcome.best_evolution,
        final_n: outcome.final_n,
        terminated: outcome.terminated,
        synthetic_seconds: outcome.synthetic_seconds,
        best_params: outcome.best_params.clone(),
        pulse: outcome.best_pulse(cfg.pulse.family, cfg.pulse.shape_terms)?,
    };
    write_json(dir, "best.json", &best, &mut artifacts)?;
    let path = dir.join("checkpoint.json");
    fs::write(&path, outcome.checkpoint.clone() + "\n")
        .with_context(|| format!("cannot write {}", path.display()))?;
    artifacts.push("checkpoint.json".into());
    Ok(artifacts)
}

/// Identified line model: what `cryoscope` writes and `predistort` consumes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LineCoefficients {
    /// Sample period the stages were identified at.
    pub dt: f64,
    pub stages: Vec<IirStage>,
    pub fir: Option<FirFilter>,
    pub residual_rms: f64,
    /// Stage index pairs whose time constants collapsed together.
    pub tau_collapsed: Vec<(usize, usize)>,
}

impl LineCoefficients {
    pub fn to_chain(&self) -> DistortionChain {
        DistortionChain { stages: self.stages.clone(), fir: self.fir.clone(), dt: self.dt }
    }
}

#[derive(Serialize)]
struct TraceRow {
    t_p: f64,
    phase: f64,
}

#[derive(Serialize)]
struct ResponseRow {
    time: f64,
    value: f64,
}

fn spectrum_table_for(cfg: &RunConfig) -> anyhow::Result<SpectrumTable> {
    let setup = &cfg.cryoscope.setup;
    let reach_lo = setup.idle_flux + setup.amplitude * -0.3;
    let reach_hi = setup.idle_flux + setup.amplitude * 2.9;
    let lo = reach_lo.min(reach_hi).min(setup.idle_flux) - 0.002;
    let hi = reach_lo.max(reach_hi).max(setup.idle_flux) + 0.002;
    Ok(SpectrumTable::build(&cfg.device, lo, hi, cfg.cryoscope.table_nodes)?)
}

fn cmd_cryoscope(cfg: &RunConfig, dir: &Path, par: &Parallelism) -> anyhow::Result<Vec<String>> {
    let chain = cfg.chain_or_reference();
    if cfg.chain.is_none() {
        eprintln!("cryoscope: no chain configured; identifying the reference flux line");
    }
    let table = spectrum_table_for(cfg)?;
    let id: LineIdentification = identify_line(
        &table,
        &chain,
        &cfg.cryoscope.setup,
        cfg.cryoscope.n_long,
        cfg.cryoscope.n_short,
        cfg.cryoscope.fir_taps,
        par,
    )?;
    let mut artifacts = Vec::new();
    write_csv(
        dir,
        "trace.csv",
        id.trace
            .t_p
            .iter()
            .zip(&id.trace.phases)
            .map(|(&t_p, &phase)| TraceRow { t_p, phase }),
        &mut artifacts,
    )?;
    write_csv(
        dir,
        "response.csv",
        id.response
            .times
            .iter()
            .zip(&id.response.values)
            .map(|(&time, &value)| ResponseRow { time, value }),
        &mut artifacts,
    )?;
    let coeffs = LineCoefficients {
        dt: chain.dt,
        stages: id.fit.stages.clone(),
        fir: id.fir.clone(),
        residual_rms: id.fit.residual_rms,
        tau_collapsed: id.fit.tau_collapsed.clone(),
    };
    write_json(dir, "line_fit.json", &coeffs, &mut artifacts)?;
    Ok(artifacts)
}

#[derive(Serialize)]
struct StepRow {
    time: f64,
    uncorrected: f64,
    corrected: f64,
}

#[derive(Serialize)]
struct WaveformRow {
    time: f64,
    target: f64,
    predistorted: f64,
}

#[derive(Serialize)]
struct PredistortReport {
    /// "fitted" when built from cryoscope coefficients, "configured" when
    /// the line model itself was inverted.
    source: String,
    stages: Vec<IirStage>,
    settle: f64,
    max_step_error_uncorrected: f64,
    max_step_error_corrected: f64,
}

fn cmd_predistort(
    cfg: &RunConfig,
    coefficients: Option<&Path>,
    pulse_file: Option<&Path>,
    dir: &Path,
) -> anyhow::Result<Vec<String>> {
    let truth = cfg.chain_or_reference();
    let (fitted, source) = match coefficients {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read coefficients {}", path.display()))?;
            let c: LineCoefficients = serde_json::from_str(&text)
                .with_context(|| format!("bad coefficient file {}", path.display()))?;
            (c.to_chain(), "fitted".to_string())
        }
        None => (truth.clone(), "configured".to_string()),
    };
    let pre = invert_chain(&fitted)?;

    let settle = 60e-9;
    let horizon = 2e-6_f64.max(8.0 * truth.stages.iter().fold(0.0, |m, s| s.tau.max(m)));
    let n = (horizon / truth.dt).ceil() as usize;
    let step = vec![1.0; n];
    let uncorrected = truth.apply_slice(&step, n);
    let corrected = truth.apply_slice(&pre.apply_slice(&step, n), n);
    let mut artifacts = Vec::new();
    write_csv(
        dir,
        "step_response.csv",
        (0..n).map(|k| StepRow {
            time: k as f64 * truth.dt,
            uncorrected: uncorrected[k],
            corrected: corrected[k],
        }),
        &mut artifacts,
    )?;
    let err_after = |y: &[f64]| {
        (0..n)
            .filter(|&k| k as f64 * truth.dt >= settle)
            .map(|k| (y[k] - 1.0).abs())
            .fold(0.0f64, f64::max)
    };
    let report = PredistortReport {
        source,
        stages: fitted.stages.clone(),
        settle,
        max_step_error_uncorrected: err_after(&uncorrected),
        max_step_error_corrected: err_after(&corrected),
    };
    write_json(dir, "predistort_report.json", &report, &mut artifacts)?;

    let pulse = pulse_for(cfg, pulse_file)?;
    let wf = pulse.sample(fitted.dt, cfg.orbit.buffer_after)?;
    let shaped = apply_predistortion(&wf, &pre)?;
    write_csv(
        dir,
        "waveform.csv",
        wf.samples.iter().zip(&shaped.samples).enumerate().map(|(k, (&t, &p))| WaveformRow {
            time: k as f64 * fitted.dt,
            target: t,
            predistorted: p,
        }),
        &mut artifacts,
    )?;
    Ok(artifacts)
}

#[derive(Serialize)]
struct RbRow {
    n: u32,
    reference: f64,
    interleaved: f64,
}

#[derive(Serialize)]
struct RbReport {
    interleave: u32,
    reference: DecayFit,
    interleaved: DecayFit,
    epsilon_cz: f64,
}

fn cmd_rb(cfg: &RunConfig, pulse_file: Option<&Path>, dir: &Path) -> anyhow::Result<Vec<String>> {
    let pulse = pulse_for(cfg, pulse_file)?;
    let eval =
        DeviceOrbitEvaluator::with_line(&cfg.device, cfg.chain.as_ref(), None, &pulse, &cfg.orbit)?;
    let ns = &cfg.rb.ns;
    let mut rng = split_rng(cfg.seed, &[RB_DOMAIN]);
    let m = cfg.orbit.sequences;
    let shots = cfg.orbit.shots;
    let ref_data = rb_survivals(&eval, ns, m, shots, 0, &mut rng)?;
    let int_data = rb_survivals(&eval, ns, m, shots, cfg.rb.interleave, &mut rng)?;
    let reference = fit_decay(&ref_data)?;
    let interleaved = fit_decay(&int_data)?;
    let epsilon_cz = irb_gate_error(&reference, &interleaved, 4, cfg.rb.interleave)?;
    let mut artifacts = Vec::new();
    write_csv(
        dir,
        "rb.csv",
        ns.iter().enumerate().map(|(i, &n)| RbRow {
            n,
            reference: ref_data[i].1,
            interleaved: int_data[i].1,
        }),
        &mut artifacts,
    )?;
    write_json(
        dir,
        "rb.json",
        &RbReport { interleave: cfg.rb.interleave, reference, interleaved, epsilon_cz },
        &mut artifacts,
    )?;
    Ok(artifacts)
}

#[derive(Serialize)]
struct IrbSummary {
    reference: DecayFit,
    interleaved: DecayFit,
    epsilon_cz: f64,
}

#[derive(Serialize)]
struct StressJson {
    predistorted: bool,
    ns: Vec<u32>,
    single: IrbSummary,
    pair: IrbSummary,
    ratio: f64,
}

fn cmd_stress(
    cfg: &RunConfig,
    pulse_file: Option<&Path>,
    coefficients: Option<&Path>,
    dir: &Path,
) -> anyhow::Result<Vec<String>> {
    let pulse = pulse_for(cfg, pulse_file)?;
    let chain = cfg.chain_or_reference();
    if cfg.chain.is_none() {
        eprintln!("stress: no chain configured; using the reference flux line");
    }
    let pre = if cfg.stress.predistort {
        let fitted = match coefficients {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("cannot read coefficients {}", path.display()))?;
                let c: LineCoefficients = serde_json::from_str(&text)?;
                c.to_chain()
            }
            None => chain.clone(),
        };
        Some(invert_chain(&fitted)?)
    } else {
        None
    };
    let report = consecutive_cz_stress(
        &cfg.device,
        &pulse,
        Some(&chain),
        pre.as_ref(),
        &cfg.orbit,
        &cfg.stress.ns,
        cfg.seed,
    )?;
    let sum = |r: &crate::rb::IrbResult| IrbSummary {
        reference: r.reference.clone(),
        interleaved: r.interleaved.clone(),
        epsilon_cz: r.epsilon_cz,
    };
    let mut artifacts = Vec::new();
    write_json(
        dir,
        "stress.json",
        &StressJson {
            predistorted: cfg.stress.predistort,
            ns: cfg.stress.ns.clone(),
            single: sum(&report.single),
            pair: sum(&report.pair),
            ratio: report.ratio,
        },
        &mut artifacts,
    )?;
    Ok(artifacts)
}

#[derive(Serialize)]
struct ScalingFitSummary {
    function: TestFunctionKind,
    fit: Option<PowerLawFit>,
    error: Option<String>,
    censored_dropped: usize,
    points: Vec<(usize, f64)>,
}

fn cmd_scaling(cfg: &RunConfig, dir: &Path, par: &Parallelism) -> anyhow::Result<Vec<String>> {
    let sec = &cfg.scaling;
    let conv = ConvergenceConfig {
        max_generations: sec.max_generations,
        spread: sec.spread,
        population: None,
    };
    let mut cells = Vec::new();
    let mut fits = Vec::new();
    for name in &sec.functions {
        let kind = TestFunctionKind::parse(name)
            .ok_or_else(|| anyhow!("unknown scaling function {name:?}"))?;
        let sweep = run_sweep(kind, &sec.dims, sec.seeds, sec.noise, &conv, cfg.seed, par)?;
        let (points, dropped) = median_k_by_dimension(&sweep);
        if dropped > 0 {
            eprintln!(
                "scaling: {kind}: {dropped} censored cells excluded from the medians"
            );
        }
        let fit = fit_power_law(&points);
        fits.push(ScalingFitSummary {
            function: kind,
            fit: fit.as_ref().ok().copied(),
            error: fit.err().map(|e| e.to_string()),
            censored_dropped: dropped,
            points,
        });
        cells.extend(sweep);
    }
    let mut artifacts = Vec::new();
    write_csv(dir, "scaling.csv", cells, &mut artifacts)?;
    write_json(dir, "scaling_fit.json", &fits, &mut artifacts)?;
    Ok(artifacts)
}

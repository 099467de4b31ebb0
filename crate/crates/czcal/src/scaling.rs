//! Convergence scaling of the evolutionary optimizer on standard noisy
//! benchmark functions, and the power-law fit of evolution count against
//! search-space dimension.
//!
//! A sweep runs the optimizer on one benchmark at several dimensions and
//! seeds, records the first evolution at which the population's cost spread
//! drops below the injected noise variance, and fits the median counts to
//! k = c·D^ν + k₁ with k₁ pinned by the one-dimensional measurement.

use crate::calibration::split_rng;
use crate::cmaes::{CmaEs, CmaesError};
use crate::parallel::Parallelism;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

/// Seed-path domain tag for sweep cells; keeps the stream disjoint from the
/// calibration domains when one master seed drives both.
const DOMAIN_SCALING: u64 = 4;

#[derive(Debug, Error)]
pub enum ScalingError {
    #[error("bad scaling setup: {0}")]
    Setup(String),
    #[error("power-law fit needs a D=1 anchor and two larger dimensions")]
    NotEnoughPoints,
    #[error(transparent)]
    Cmaes(#[from] CmaesError),
}

/// The six benchmark families. Parsed from / printed as kebab-case names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestFunctionKind {
    Sphere,
    Rastrigin,
    Rosenbrock,
    Griewank,
    StyblinskiTang,
    Polynomial,
}

impl TestFunctionKind {
    pub const ALL: [TestFunctionKind; 6] = [
        TestFunctionKind::Sphere,
        TestFunctionKind::Rastrigin,
        TestFunctionKind::Rosenbrock,
        TestFunctionKind::Griewank,
        TestFunctionKind::StyblinskiTang,
        TestFunctionKind::Polynomial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TestFunctionKind::Sphere => "sphere",
            TestFunctionKind::Rastrigin => "rastrigin",
            TestFunctionKind::Rosenbrock => "rosenbrock",
            TestFunctionKind::Griewank => "griewank",
            TestFunctionKind::StyblinskiTang => "styblinski-tang",
            TestFunctionKind::Polynomial => "polynomial",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for TestFunctionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A benchmark instance: family, dimension, and additive Gaussian noise
/// level applied to every evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestFunction {
    pub kind: TestFunctionKind,
    pub dimension: usize,
    pub noise: f64,
}

impl TestFunction {
    pub fn new(kind: TestFunctionKind, dimension: usize, noise: f64) -> Result<Self, ScalingError> {
        if dimension == 0 {
            return Err(ScalingError::Setup("dimension must be at least 1".into()));
        }
        if !noise.is_finite() || noise < 0.0 {
            return Err(ScalingError::Setup(format!("noise must be finite and >= 0, got {noise}")));
        }
        Ok(TestFunction { kind, dimension, noise })
    }

    /// Noise-free objective value.
    pub fn value(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dimension, "argument dimension mismatch");
        match self.kind {
            TestFunctionKind::Sphere => x.iter().map(|v| v * v).sum(),
            TestFunctionKind::Rastrigin => {
                10.0 * x.len() as f64
                    + x.iter()
                        .map(|v| v * v - 10.0 * (2.0 * std::f64::consts::PI * v).cos())
                        .sum::<f64>()
            }
            TestFunctionKind::Rosenbrock => {
                if x.len() == 1 {
                    // degenerate one-dimensional case: the valley term vanishes,
                    // leaving the quadratic pull toward x = 1
                    (1.0 - x[0]).powi(2)
                } else {
                    x.windows(2)
                        .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
                        .sum()
                }
            }
            TestFunctionKind::Griewank => {
                let sum: f64 = x.iter().map(|v| v * v).sum::<f64>() / 4000.0;
                let prod: f64 = x
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (v / ((i + 1) as f64).sqrt()).cos())
                    .product();
                1.0 + sum - prod
            }
            TestFunctionKind::StyblinskiTang => {
                0.5 * x.iter().map(|v| v.powi(4) - 16.0 * v * v + 5.0 * v).sum::<f64>()
            }
            // the "polynomial" benchmark: separable quartic-plus-quadratic bowl
            TestFunctionKind::Polynomial => x.iter().map(|v| v.powi(4) + v * v).sum(),
        }
    }

    /// Global optimum location and value.
    pub fn optimum(&self) -> (Vec<f64>, f64) {
        let coord = match self.kind {
            TestFunctionKind::Rosenbrock => 1.0,
            TestFunctionKind::StyblinskiTang => -2.903_534_046_2,
            _ => 0.0,
        };
        let loc = vec![coord; self.dimension];
        let val = self.value(&loc);
        (loc, val)
    }

    /// Canonical search start, off the optimum in every coordinate.
    pub fn start(&self) -> Vec<f64> {
        let coord = match self.kind {
            TestFunctionKind::Rosenbrock => -1.0,
            TestFunctionKind::StyblinskiTang => 0.0,
            _ => 2.0,
        };
        vec![coord; self.dimension]
    }

    /// One noisy evaluation: value plus `noise`-scaled standard normal draw.
    /// Zero noise performs no draw, so noise-free runs leave `rng` untouched.
    pub fn evaluate(&self, x: &[f64], rng: &mut impl Rng) -> f64 {
        let v = self.value(x);
        if self.noise == 0.0 {
            v
        } else {
            let z: f64 = rng.sample(StandardNormal);
            v + self.noise * z
        }
    }

    /// Default noise level: 1e-2 of the objective's spread over the initial
    /// sampling distribution N(start, spread²·I), estimated from a fixed
    /// internal sample so the default is reproducible.
    pub fn default_noise(kind: TestFunctionKind, dimension: usize, spread: f64) -> f64 {
        let probe = TestFunction { kind, dimension, noise: 0.0 };
        let start = probe.start();
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0x5ca1_1a6_d01);
        const SAMPLES: usize = 128;
        let mut vals = Vec::with_capacity(SAMPLES);
        for _ in 0..SAMPLES {
            let x: Vec<f64> = start
                .iter()
                .map(|&s| s + spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            vals.push(probe.value(&x));
        }
        let mean = vals.iter().sum::<f64>() / SAMPLES as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (SAMPLES - 1) as f64;
        1e-2 * var.sqrt()
    }
}

/// Budget and initial sampling for a convergence run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergenceConfig {
    /// Censoring budget in evolutions.
    pub max_generations: usize,
    /// Initial per-coordinate sampling spread.
    pub spread: f64,
    /// Population override; `None` uses the 4 + 4·ln D rule.
    pub population: Option<usize>,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig { max_generations: 5000, spread: 1.0, population: None }
    }
}

impl ConvergenceConfig {
    pub fn validate(&self) -> Result<(), ScalingError> {
        if self.max_generations == 0 {
            return Err(ScalingError::Setup("max_generations must be at least 1".into()));
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return Err(ScalingError::Setup(format!("spread must be positive, got {}", self.spread)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RunOutcome {
    /// First evolution whose population cost variance fell below the noise
    /// variance, or the budget if that never happened.
    pub k_max: usize,
    /// True when the budget ran out before the spread collapsed.
    pub censored: bool,
    /// Best (lowest) noisy cost seen over the whole run.
    pub best_cost: f64,
}

/// Runs the optimizer until the sample variance of the population's costs
/// drops below the injected noise variance, and reports that evolution
/// index (1-based). With zero noise the threshold is unreachable and the
/// run always censors at the budget.
pub fn run_until_converged(
    f: &TestFunction,
    cfg: &ConvergenceConfig,
    rng: &mut impl Rng,
) -> Result<RunOutcome, ScalingError> {
    cfg.validate()?;
    let probe = TestFunction::new(f.kind, f.dimension, f.noise)?;
    let spreads = vec![cfg.spread; probe.dimension];
    let mut es = CmaEs::new(&probe.start(), &spreads, cfg.population)?;
    let noise_var = probe.noise * probe.noise;
    let mut best = f64::INFINITY;
    for k in 1..=cfg.max_generations {
        let candidates = es.ask(rng);
        let costs: Vec<f64> = candidates.iter().map(|c| probe.evaluate(c, rng)).collect();
        for &c in &costs {
            best = best.min(c);
        }
        es.tell(&candidates, &costs)?;
        let n = costs.len() as f64;
        let mean = costs.iter().sum::<f64>() / n;
        let var = costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
        if var < noise_var {
            return Ok(RunOutcome { k_max: k, censored: false, best_cost: best });
        }
    }
    Ok(RunOutcome { k_max: cfg.max_generations, censored: true, best_cost: best })
}

/// One (function, dimension, seed) sweep cell.
#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub function: TestFunctionKind,
    pub dimension: usize,
    pub seed: u64,
    pub k_max: usize,
    pub censored: bool,
}

/// Runs the full (dimension × seed) grid for one benchmark. `noise` of
/// `None` picks the per-dimension default level. Cells are independent and
/// split across `par`.
pub fn run_sweep(
    kind: TestFunctionKind,
    dims: &[usize],
    seeds_per_dim: usize,
    noise: Option<f64>,
    cfg: &ConvergenceConfig,
    master_seed: u64,
    par: &Parallelism,
) -> Result<Vec<SweepCell>, ScalingError> {
    cfg.validate()?;
    if dims.is_empty() || seeds_per_dim == 0 {
        return Err(ScalingError::Setup("sweep needs at least one dimension and one seed".into()));
    }
    let mut cells = Vec::with_capacity(dims.len() * seeds_per_dim);
    for &d in dims {
        for s in 0..seeds_per_dim as u64 {
            cells.push((d, s));
        }
    }
    let kind_tag = kind.name().bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    let results = par.map(cells.len(), |i| {
        let (d, s) = cells[i];
        let sigma = noise.unwrap_or_else(|| TestFunction::default_noise(kind, d, cfg.spread));
        let f = TestFunction::new(kind, d, sigma)?;
        let mut rng = split_rng(master_seed, &[DOMAIN_SCALING, kind_tag, d as u64, s]);
        let out = run_until_converged(&f, cfg, &mut rng)?;
        Ok(SweepCell { function: kind, dimension: d, seed: s, k_max: out.k_max, censored: out.censored })
    });
    results.into_iter().collect()
}

/// Per-dimension medians of `k_max` over seeds, censored cells dropped.
/// Returns the (D, median) points sorted by D and the number of censored
/// cells that were excluded.
pub fn median_k_by_dimension(cells: &[SweepCell]) -> (Vec<(usize, f64)>, usize) {
    let mut by_dim: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut dropped = 0usize;
    for c in cells {
        if c.censored {
            dropped += 1;
        } else {
            by_dim.entry(c.dimension).or_default().push(c.k_max as f64);
        }
    }
    let points = by_dim.into_iter().map(|(d, mut ks)| (d, median(&mut ks))).collect();
    (points, dropped)
}

fn median(vals: &mut [f64]) -> f64 {
    vals.sort_by(f64::total_cmp);
    let n = vals.len();
    if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    }
}

/// Result of fitting k = c·D^ν + k₁ with the D=1 anchor.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PowerLawFit {
    pub c: f64,
    pub nu: f64,
    pub k_1: f64,
    /// Root-mean-square misfit over the input points, in evolutions.
    pub residual_rms: f64,
}

impl PowerLawFit {
    pub fn model(&self, d: usize) -> f64 {
        self.c * (d as f64).powf(self.nu) + self.k_1
    }
}

/// Least-squares fit of k = c·D^ν + k₁ to (D, k) points. The offset is
/// anchored so the model passes through the D=1 measurement exactly:
/// k₁ = k(1) − c, leaving a two-parameter fit of c·(D^ν − 1) to the excess
/// over k(1). Requires a D=1 point and at least two distinct larger D.
pub fn fit_power_law(points: &[(usize, f64)]) -> Result<PowerLawFit, ScalingError> {
    let mut anchors: Vec<f64> = points.iter().filter(|p| p.0 == 1).map(|p| p.1).collect();
    let rest: Vec<(f64, f64)> =
        points.iter().filter(|p| p.0 > 1).map(|&(d, k)| (d as f64, k)).collect();
    let distinct = {
        let mut ds: Vec<usize> = points.iter().filter(|p| p.0 > 1).map(|p| p.0).collect();
        ds.sort_unstable();
        ds.dedup();
        ds.len()
    };
    if anchors.is_empty() || distinct < 2 {
        return Err(ScalingError::NotEnoughPoints);
    }
    let k1v = median(&mut anchors);

    // closed-form amplitude at fixed exponent; SSE over the D>1 points
    let solve = |nu: f64| -> (f64, f64) {
        let mut num = 0.0;
        let mut den = 0.0;
        for &(d, k) in &rest {
            let b = d.powf(nu) - 1.0;
            num += b * (k - k1v);
            den += b * b;
        }
        let c = if den > 0.0 { num / den } else { 0.0 };
        let sse: f64 =
            rest.iter().map(|&(d, k)| (k - k1v - c * (d.powf(nu) - 1.0)).powi(2)).sum();
        (sse, c)
    };

    // coarse grid pins the basin, golden-section polishes the exponent
    let (lo, hi) = (0.02_f64, 5.0_f64);
    let grid = 400;
    let mut best_i = 0;
    let mut best_sse = f64::INFINITY;
    for i in 0..=grid {
        let nu = lo + (hi - lo) * i as f64 / grid as f64;
        let (sse, _) = solve(nu);
        if sse < best_sse {
            best_sse = sse;
            best_i = i;
        }
    }
    let step = (hi - lo) / grid as f64;
    let mut a = (lo + step * best_i as f64 - step).max(lo);
    let mut b = (lo + step * best_i as f64 + step).min(hi);
    let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - phi * (b - a);
    let mut x2 = a + phi * (b - a);
    let mut f1 = solve(x1).0;
    let mut f2 = solve(x2).0;
    for _ in 0..80 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = solve(x1).0;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = solve(x2).0;
        }
    }
    let nu = 0.5 * (a + b);
    let (_, c) = solve(nu);
    let fit = PowerLawFit { c, nu, k_1: k1v - c, residual_rms: 0.0 };
    let sse: f64 = points.iter().map(|&(d, k)| (fit.model(d) - k).powi(2)).sum();
    Ok(PowerLawFit { residual_rms: (sse / points.len() as f64).sqrt(), ..fit })
}

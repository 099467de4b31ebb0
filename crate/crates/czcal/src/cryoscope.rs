//! Flux-line step-response identification through qubit phase measurements,
//! plus exponential-IIR / FIR model fits of the reconstructed response.
//!
//! The tunable coupler has no readout of its own, so the flux it actually
//! receives is probed through Q1: hybridization with the coupler pulls Q1's
//! eigenfrequency, and a Ramsey-style fringe turns that pull into a phase.
//! Sweeping the nominal pulse length t_p and differentiating the fitted
//! phase with respect to t_p reads out the step response of the distortion
//! chain, which is inverted through an amplitude calibration and fitted with
//! the same exponential-stage model `signal` uses for predistortion.
//!
//! Protocol convention: the fringe closes at the nominal pulse end (total
//! interval = t_p, margin zero). By causality the samples delivered before
//! t_p are those of an infinite step, so dφ/dt_p equals the frequency pull
//! at the instantaneous step-response value and the amplitude calibration
//! inverts it exactly. Closing the fringe at a fixed late time instead folds
//! the falling-edge tail into the phase; to first order in the pull's local
//! slope that contribution cancels the plateau growth sample for sample,
//! leaving the response visible only through the sensor's curvature.
//!
//! The phase itself is the adiabatic integral of the labeled Q1
//! eigenfrequency over the delivered waveform. Non-adiabatic corrections at
//! the step edge are below the resolution set by the smoothing window and
//! are not modeled.

use crate::device::{DeviceError, Label, SpectrumTable};
use crate::fit::{self, wrap_angle, FitError};
use crate::parallel::Parallelism;
use crate::signal::{DistortionChain, FirFilter, IirStage, Section, SignalError};
use crate::C64;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default Savitzky-Golay window length (seconds); features shorter than
/// this are not resolved.
pub const SG_WINDOW: f64 = 10e-9;
/// Default Savitzky-Golay polynomial order.
pub const SG_ORDER: usize = 3;
/// RMS flatness of the corrected step above which the exponential fit is
/// reported as failed.
pub const RESIDUAL_TOL: f64 = 0.02;

/// Fit boundary between the two exponential passes: stages with tails
/// slower than this are fit first, on the late part of the trace alone.
const LONG_SPLIT: f64 = 200e-9;
/// Reconstruction samples earlier than this are excluded from fits; the
/// smoothing window makes them systematically unreliable.
const EDGE_SKIP: f64 = 10e-9;

#[derive(Debug, Error)]
pub enum CryoscopeError {
    #[error("bad cryoscope setup: {0}")]
    Setup(String),
    #[error("fringe contrast {0:.3} below floor {1:.3}")]
    LowContrast(f64, f64),
    #[error("derivative grid {0:.3e} s is too coarse to resolve the response (max 2 ns)")]
    GridTooCoarse(f64),
    #[error("calibration shifts are not strictly monotone over the scanned amplitudes")]
    NotMonotone,
    #[error("exponential fit residual {residual:.3e} exceeds {tol:.1e}")]
    FitResidual { residual: f64, tol: f64 },
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Fit(#[from] FitError),
}

/// Protocol settings for one cryoscope run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CryoscopeSetup {
    /// Nominal step amplitude, as a coupler flux offset from idle.
    pub amplitude: f64,
    /// Coupler idle flux the pulse is referenced to.
    pub idle_flux: f64,
    /// Longest probed pulse length.
    pub t_max: f64,
    /// Pulse-length grid spacing; must be a multiple of the chain sample
    /// time and at most 2 ns for the reconstruction to accept the trace.
    pub spacing: f64,
    /// Number of final-rotation axis angles, linearly spaced over [0, 2π].
    pub theta_points: usize,
    /// Detuning of the drive frame from the idle qubit frequency (rad/s).
    /// Enters every phase as detuning × t_p and cancels out of the
    /// reconstruction because the calibration is measured the same way.
    pub frame_detuning: f64,
    /// Minimum acceptable fringe amplitude (ideal contrast is 0.5).
    pub contrast_floor: f64,
}

impl Default for CryoscopeSetup {
    fn default() -> Self {
        CryoscopeSetup {
            amplitude: 0.04,
            idle_flux: 0.33145,
            t_max: 2.5e-6,
            spacing: 1e-9,
            theta_points: 9,
            frame_detuning: 0.0,
            contrast_floor: 0.2,
        }
    }
}

impl CryoscopeSetup {
    pub fn validate(&self) -> Result<(), CryoscopeError> {
        if !(self.t_max > 0.0 && self.spacing > 0.0 && self.spacing <= self.t_max) {
            return Err(CryoscopeError::Setup("need 0 < spacing <= t_max".into()));
        }
        if self.theta_points < 3 {
            return Err(CryoscopeError::Setup("need at least 3 fringe angles".into()));
        }
        if !(self.contrast_floor >= 0.0 && self.contrast_floor < 0.5) {
            return Err(CryoscopeError::Setup("contrast floor must lie in [0, 0.5)".into()));
        }
        if !(self.amplitude.is_finite() && self.frame_detuning.is_finite()) {
            return Err(CryoscopeError::Setup("amplitude and detuning must be finite".into()));
        }
        Ok(())
    }
}

/// Measured trace: fitted fringe phase per probed pulse length.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CryoscopeTrace {
    /// Probed nominal pulse lengths (uniform grid from 0).
    pub t_p: Vec<f64>,
    /// Fitted fringe phases, wrapped to (-π, π].
    pub phases: Vec<f64>,
    /// Nominal step amplitude the trace was taken at.
    pub amplitude: f64,
    /// Sample time of the waveform generator the pulses were built on.
    pub dt: f64,
}

/// Normalized step response reconstructed from a trace. Samples sit on a
/// uniform grid; the first point is half a grid step after the pulse start
/// because the derivative is taken centrally.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructedResponse {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

/// Q1 eigenfrequency pull (rad/s) at `idle_flux + offset`, relative to idle,
/// from the labeled spectrum.
pub fn q1_pull(table: &SpectrumTable, idle_flux: f64, offset: f64) -> f64 {
    let one = Label { n1: 1, n2: 0, nc: 0 };
    let zero = Label { n1: 0, n2: 0, nc: 0 };
    let q1 = |phi: f64| table.energy(one, phi) - table.energy(zero, phi);
    q1(idle_flux + offset) - q1(idle_flux)
}

fn theta_grid(n: usize) -> Vec<f64> {
    (0..n).map(|k| k as f64 * std::f64::consts::TAU / (n - 1) as f64).collect()
}

/// Ground-state population after the fringe sequence: X90, free phase φ on
/// |1⟩, then a π/2 rotation about the equatorial axis at angle θ.
fn fringe_population(phi: f64, theta: f64) -> f64 {
    let i = C64::new(0.0, 1.0);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let c0 = C64::new(s, 0.0);
    let c1 = -i * s * (-i * phi).exp();
    // exp(-i π/4 (X cosθ + Y sinθ)) has first row (1, -i e^{-iθ})/√2
    let out0 = s * c0 + (-i * s * (-i * theta).exp()) * c1;
    out0.norm_sqr()
}

/// Phase accumulated against the idle frame up to the nominal pulse end:
/// the adiabatic integral of the Q1 pull over the delivered samples, plus
/// the frame detuning contribution.
fn accumulated_phase(
    table: &SpectrumTable,
    chain: &DistortionChain,
    setup: &CryoscopeSetup,
    amplitude: f64,
    t_p: f64,
) -> f64 {
    let dt = chain.dt;
    let n_p = (t_p / dt).round() as usize;
    let mut phi = setup.frame_detuning * n_p as f64 * dt;
    if n_p > 0 && amplitude != 0.0 {
        let delivered = chain.apply_slice(&vec![amplitude; n_p], n_p);
        let one = Label { n1: 1, n2: 0, nc: 0 };
        let zero = Label { n1: 0, n2: 0, nc: 0 };
        let q1 = |phi: f64| table.energy(one, phi) - table.energy(zero, phi);
        let base = q1(setup.idle_flux);
        for &a in &delivered {
            phi += (q1(setup.idle_flux + a) - base) * dt;
        }
    }
    phi
}

/// One cryoscope point: prepare Q1 on the equator, play the distorted step
/// of nominal length `t_p`, close the fringe with π/2 rotations about
/// `theta_points` axis angles, fit the populations to a cosine and return
/// the extracted phase (wrapped).
pub fn simulate_ramsey_phase(
    table: &SpectrumTable,
    chain: &DistortionChain,
    setup: &CryoscopeSetup,
    amplitude: f64,
    t_p: f64,
) -> Result<f64, CryoscopeError> {
    setup.validate()?;
    let phi = accumulated_phase(table, chain, setup, amplitude, t_p);
    let thetas = theta_grid(setup.theta_points);
    let pops: Vec<f64> = thetas.iter().map(|&th| fringe_population(phi, th)).collect();
    let (amp, psi, _) = fit::cosine_fit(&thetas, &pops)?;
    if amp < setup.contrast_floor {
        return Err(CryoscopeError::LowContrast(amp, setup.contrast_floor));
    }
    // P(θ) = ½ − ½cos(θ + φ) = ½ + ½cos(θ − (π − φ)), so ψ = π − φ
    Ok(wrap_angle(std::f64::consts::PI - psi))
}

/// Sweep the pulse length from 0 to `t_max` and record the fringe phase at
/// every point. Points are independent and run under `par`.
pub fn simulate_trace(
    table: &SpectrumTable,
    chain: &DistortionChain,
    setup: &CryoscopeSetup,
    par: &Parallelism,
) -> Result<CryoscopeTrace, CryoscopeError> {
    setup.validate()?;
    chain.validate()?;
    let step = (setup.spacing / chain.dt).round();
    if step < 1.0 || (setup.spacing - step * chain.dt).abs() > 1e-9 * chain.dt {
        return Err(CryoscopeError::Setup(
            "trace spacing must be a positive multiple of the chain sample time".into(),
        ));
    }
    let n = (setup.t_max / setup.spacing).floor() as usize;
    let t_p: Vec<f64> = (0..=n).map(|k| k as f64 * setup.spacing).collect();
    let phases: Result<Vec<f64>, CryoscopeError> = par
        .map(t_p.len(), |k| simulate_ramsey_phase(table, chain, setup, setup.amplitude, t_p[k]))
        .into_iter()
        .collect();
    Ok(CryoscopeTrace { t_p, phases: phases?, amplitude: setup.amplitude, dt: chain.dt })
}

/// Monotone tabulated map between nominal flux amplitude and the measured
/// long-pulse phase slope (the frequency pull, plus any frame detuning).
/// Interpolation is monotonicity-preserving cubic Hermite, so the inverse
/// is single-valued over the scanned range.
#[derive(Debug, Clone)]
pub struct AmplitudeCalibration {
    amps: Vec<f64>,
    shifts: Vec<f64>,
    tangents: Vec<f64>,
}

impl AmplitudeCalibration {
    /// Build from scanned (amplitude, shift) pairs. Shifts must be strictly
    /// monotone in amplitude.
    pub fn from_points(amps: &[f64], shifts: &[f64]) -> Result<Self, CryoscopeError> {
        if amps.len() != shifts.len() || amps.len() < 4 {
            return Err(CryoscopeError::Setup("need at least 4 calibration points".into()));
        }
        let mut idx: Vec<usize> = (0..amps.len()).collect();
        idx.sort_by(|&a, &b| amps[a].total_cmp(&amps[b]));
        let xs: Vec<f64> = idx.iter().map(|&i| amps[i]).collect();
        let ys: Vec<f64> = idx.iter().map(|&i| shifts[i]).collect();
        if xs.windows(2).any(|w| w[1] - w[0] <= 0.0) {
            return Err(CryoscopeError::Setup("calibration amplitudes must be distinct".into()));
        }
        let dir = (ys[ys.len() - 1] - ys[0]).signum();
        if dir == 0.0 || ys.windows(2).any(|w| (w[1] - w[0]) * dir <= 0.0) {
            return Err(CryoscopeError::NotMonotone);
        }
        let tangents = monotone_tangents(&xs, &ys);
        Ok(AmplitudeCalibration { amps: xs, shifts: ys, tangents })
    }

    pub fn amplitude_range(&self) -> (f64, f64) {
        (self.amps[0], *self.amps.last().unwrap())
    }

    /// Shift at amplitude `a` (clamped to the scanned range).
    pub fn forward(&self, a: f64) -> f64 {
        let n = self.amps.len();
        let x = a.clamp(self.amps[0], self.amps[n - 1]);
        let i = self.amps.partition_point(|&v| v <= x).clamp(1, n - 1) - 1;
        let h = self.amps[i + 1] - self.amps[i];
        let t = (x - self.amps[i]) / h;
        let (t2, t3) = (t * t, t * t * t);
        (2.0 * t3 - 3.0 * t2 + 1.0) * self.shifts[i]
            + (t3 - 2.0 * t2 + t) * h * self.tangents[i]
            + (-2.0 * t3 + 3.0 * t2) * self.shifts[i + 1]
            + (t3 - t2) * h * self.tangents[i + 1]
    }

    /// Amplitude whose shift equals `shift` (clamped to the scanned shift
    /// range; out-of-range queries stick to the nearest end).
    pub fn invert(&self, shift: f64) -> f64 {
        let (mut lo, mut hi) = self.amplitude_range();
        let increasing = self.shifts[self.shifts.len() - 1] > self.shifts[0];
        let (smin, smax) = if increasing {
            (self.shifts[0], self.shifts[self.shifts.len() - 1])
        } else {
            (self.shifts[self.shifts.len() - 1], self.shifts[0])
        };
        let target = shift.clamp(smin, smax);
        for _ in 0..64 {
            let mid = 0.5 * (lo + hi);
            let v = self.forward(mid);
            if (v < target) == increasing {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Fritsch-Butland tangents: monotone on monotone data.
fn monotone_tangents(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    let d: Vec<f64> = ys.windows(2).zip(&h).map(|(w, &hi)| (w[1] - w[0]) / hi).collect();
    let mut m = vec![0.0; n];
    for i in 1..n - 1 {
        if d[i - 1] * d[i] > 0.0 {
            let w1 = 2.0 * h[i] + h[i - 1];
            let w2 = h[i] + 2.0 * h[i - 1];
            m[i] = (w1 + w2) / (w1 / d[i - 1] + w2 / d[i]);
        }
    }
    let end = |d0: f64, d1: f64, h0: f64, h1: f64| {
        let mut t = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if t * d0 <= 0.0 {
            t = 0.0;
        } else if d0 * d1 <= 0.0 && t.abs() > 3.0 * d0.abs() {
            t = 3.0 * d0;
        }
        t
    };
    m[0] = end(d[0], d[1], h[0], h[1]);
    m[n - 1] = end(d[n - 2], d[n - 3], h[n - 2], h[n - 3]);
    m
}

/// Phase slope at one nominal amplitude, from pulses long enough for the
/// line to settle: the window starts at 80% of `t_max` (at least 300 ns).
fn measured_shift(
    table: &SpectrumTable,
    chain: &DistortionChain,
    setup: &CryoscopeSetup,
    amplitude: f64,
) -> Result<f64, CryoscopeError> {
    let start = (0.8 * setup.t_max).max(3.2e-7);
    let t_ps: Vec<f64> = (0..12).map(|k| start + k as f64 * setup.spacing).collect();
    let mut phases = Vec::with_capacity(t_ps.len());
    for &t_p in &t_ps {
        phases.push(simulate_ramsey_phase(table, chain, setup, amplitude, t_p)?);
    }
    Ok(slope(&t_ps, &unwrap_phases(&phases)))
}

/// Measure the settled phase slope at each nominal amplitude and tabulate
/// the monotone amplitude → shift map.
pub fn calibrate_amplitude(
    table: &SpectrumTable,
    chain: &DistortionChain,
    setup: &CryoscopeSetup,
    amplitudes: &[f64],
    par: &Parallelism,
) -> Result<AmplitudeCalibration, CryoscopeError> {
    setup.validate()?;
    chain.validate()?;
    let shifts: Result<Vec<f64>, CryoscopeError> = par
        .map(amplitudes.len(), |i| measured_shift(table, chain, setup, amplitudes[i]))
        .into_iter()
        .collect();
    AmplitudeCalibration::from_points(amplitudes, &shifts?)
}

fn unwrap_phases(phases: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(phases.len());
    let mut prev = phases[0];
    out.push(prev);
    for &p in &phases[1..] {
        prev += wrap_angle(p - prev);
        out.push(prev);
    }
    out
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let xm = xs.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(ys).map(|(&x, &y)| (x - xm) * (y - ym)).sum();
    let den: f64 = xs.iter().map(|&x| (x - xm) * (x - xm)).sum();
    num / den
}

fn grid_spacing(times: &[f64]) -> Result<f64, CryoscopeError> {
    if times.len() < 2 {
        return Err(CryoscopeError::Setup("grid too short".into()));
    }
    let h = times[1] - times[0];
    if h <= 0.0 || times.windows(2).any(|w| (w[1] - w[0] - h).abs() > 1e-6 * h) {
        return Err(CryoscopeError::Setup("grid must be uniform".into()));
    }
    Ok(h)
}

/// Turn a trace into the normalized step response: unwrap, central
/// difference, Savitzky-Golay smoothing, inversion through the amplitude
/// calibration, then normalization by the long-time value.
///
/// The derivative at grid point k averages the pull over the two adjacent
/// pulse-length bins, so the reconstructed samples are reported at
/// t_p[k] − dt/2 and the endpoints (one-sided derivatives) are dropped.
pub fn reconstruct_response(
    trace: &CryoscopeTrace,
    cal: &AmplitudeCalibration,
    sg_window: f64,
    sg_order: usize,
) -> Result<ReconstructedResponse, CryoscopeError> {
    let n = trace.t_p.len();
    if n < 8 {
        return Err(CryoscopeError::Setup("trace too short to differentiate".into()));
    }
    let h = grid_spacing(&trace.t_p)?;
    if h > 2e-9 * (1.0 + 1e-9) {
        return Err(CryoscopeError::GridTooCoarse(h));
    }
    if trace.phases.iter().any(|p| !p.is_finite()) {
        return Err(CryoscopeError::Setup("trace phases must be finite".into()));
    }
    let u = unwrap_phases(&trace.phases);
    let deriv: Vec<f64> = (1..n - 1).map(|i| (u[i + 1] - u[i - 1]) / (2.0 * h)).collect();
    let m = (((sg_window / h - 1.0) / 2.0).floor().max(1.0)) as usize;
    if 2 * m < sg_order {
        return Err(CryoscopeError::Setup("smoothing window shorter than its polynomial order".into()));
    }
    let smooth = fit::savitzky_golay_smooth(&deriv, m, sg_order);
    let amps: Vec<f64> = smooth.iter().map(|&d| cal.invert(d)).collect();
    let tail_n = (amps.len() / 10).max(4).min(amps.len());
    let tail = amps[amps.len() - tail_n..].iter().sum::<f64>() / tail_n as f64;
    if tail.abs() < 1e-12 {
        return Err(CryoscopeError::Setup("long-time response is zero; cannot normalize".into()));
    }
    let times: Vec<f64> = (1..n - 1).map(|i| trace.t_p[i] - 0.5 * trace.dt).collect();
    let values = amps.iter().map(|&a| a / tail).collect();
    Ok(ReconstructedResponse { times, values })
}

/// Result of the exponential-stage fit.
#[derive(Debug, Clone)]
pub struct ExponentialFit {
    /// Fitted stages, sorted by descending time constant.
    pub stages: Vec<IirStage>,
    /// RMS flatness of the corrected step over the fit range.
    pub residual_rms: f64,
    /// Index pairs (into `stages`) whose time constants agree within 10% —
    /// a sign the decomposition is degenerate there.
    pub tau_collapsed: Vec<(usize, usize)>,
}

/// Fit `n_long + n_short` exponential stages to a reconstructed response.
///
/// Two-pass initialization: slow stages are fit on t > 200 ns, divided out,
/// then fast stages are fit on the remainder. A joint refinement then
/// minimizes the actual figure of merit — flatness of the response after
/// applying the exact discrete inverses of the candidate stages — which is
/// also what predistortion built from the result will achieve on the line.
pub fn fit_exponentials(
    resp: &ReconstructedResponse,
    n_long: usize,
    n_short: usize,
) -> Result<ExponentialFit, CryoscopeError> {
    let n = resp.values.len();
    if n < 32 {
        return Err(CryoscopeError::Setup("response too short to fit".into()));
    }
    if n_long + n_short == 0 {
        return Err(CryoscopeError::Setup("need at least one stage".into()));
    }
    let h = grid_spacing(&resp.times)?;
    let t = &resp.times;
    let r = &resp.values;
    let skip = t.iter().position(|&ti| ti >= EDGE_SKIP).unwrap_or(n - 1).max(1);

    // pass 1: slow stages on the late trace
    let late: Vec<usize> = (0..n).filter(|&i| t[i] > LONG_SPLIT).collect();
    let long_stages = if n_long > 0 && late.len() >= 2 * n_long + 4 {
        let ts: Vec<f64> = late.iter().map(|&i| t[i]).collect();
        let vs: Vec<f64> = late.iter().map(|&i| r[i]).collect();
        vp_exponentials(&ts, &vs, n_long, 1.1 * LONG_SPLIT, 8e-6)
    } else {
        vec![IirStage { amplitude: 0.0, tau: 1e-6 }; n_long]
    };

    // divide the slow model out and fit the fast stages on what is left
    let divided: Vec<f64> = t
        .iter()
        .zip(r)
        .map(|(&ti, &ri)| {
            let model: f64 =
                long_stages.iter().map(|s| 1.0 + s.amplitude * (-ti / s.tau).exp()).product();
            ri / model
        })
        .collect();
    let early: Vec<usize> =
        (skip..n).filter(|&i| t[i] <= 2.5 * LONG_SPLIT).collect();
    let short_stages = if n_short > 0 && early.len() >= 2 * n_short + 4 {
        let ts: Vec<f64> = early.iter().map(|&i| t[i]).collect();
        let vs: Vec<f64> = early.iter().map(|&i| divided[i]).collect();
        vp_exponentials(&ts, &vs, n_short, (2.0 * h).max(3e-9), 1.2 * LONG_SPLIT)
    } else {
        vec![IirStage { amplitude: 0.0, tau: 30e-9 }; n_short]
    };

    // joint refinement against the corrected-step flatness
    let pack = |stages: &[IirStage]| {
        let mut x = Vec::with_capacity(2 * stages.len());
        for s in stages {
            x.push(s.amplitude.clamp(-0.9, 3.0));
            x.push(s.tau.clamp(0.5 * h, 2e-5).ln());
        }
        x
    };
    let x0: Vec<f64> =
        pack(&long_stages.iter().chain(&short_stages).cloned().collect::<Vec<_>>());
    let steps: Vec<f64> =
        x0.iter().enumerate().map(|(k, _)| if k % 2 == 0 { 0.02 } else { 0.15 }).collect();
    let objective = |p: &[f64]| corrected_flatness(r, h, p, skip);
    let budget = 1200 * (n_long + n_short);
    let (best, _) = fit::nelder_mead(&objective, &x0, &steps, budget);
    let refined = unpack_stages(&best)
        .ok_or_else(|| CryoscopeError::Setup("refined stages left the valid domain".into()))?;

    // the refined cascade can land in a pole-zero-cancellation chain: an
    // exactly equivalent factorization where ghost stages carry large
    // mutually-canceling amplitudes. Re-pair zeros to poles (same transfer
    // function) in the most amplitude-concentrated way, then re-polish.
    let repaired = repair_stages(&refined, h);
    let x1 = pack(&repaired);
    let polish_steps: Vec<f64> =
        x1.iter().enumerate().map(|(k, _)| if k % 2 == 0 { 0.005 } else { 0.05 }).collect();
    let (best, _) = fit::nelder_mead(&objective, &x1, &polish_steps, budget / 2);
    let residual = corrected_flatness(r, h, &best, skip);
    if residual > RESIDUAL_TOL {
        return Err(CryoscopeError::FitResidual { residual, tol: RESIDUAL_TOL });
    }
    let polished = unpack_stages(&best)
        .ok_or_else(|| CryoscopeError::Setup("refined stages left the valid domain".into()))?;
    let mut stages = repair_stages(&polished, h);
    stages.sort_by(|a, b| b.tau.total_cmp(&a.tau));
    let mut tau_collapsed = Vec::new();
    for i in 0..stages.len() {
        for j in i + 1..stages.len() {
            if stages[i].tau - stages[j].tau <= 0.10 * stages[i].tau {
                tau_collapsed.push((i, j));
            }
        }
    }
    Ok(ExponentialFit { stages, residual_rms: residual, tau_collapsed })
}

/// Re-factor a cascade into the most amplitude-concentrated equivalent.
///
/// A cascade of first-order stages is a rational function determined by its
/// pole and zero multisets alone; which zero sits in a section with which
/// pole is a free choice. Local optimizers exploit that freedom and return
/// cancellation chains (zero of one stage on the pole of another) whose
/// stage amplitudes are large but whose product is a much simpler system.
/// Trying every zero→pole assignment and keeping the one with the smallest
/// Σ√|A| concentrates the response onto the fewest stages without changing
/// the transfer function at all.
fn repair_stages(stages: &[IirStage], dt: f64) -> Vec<IirStage> {
    let n = stages.len();
    if n <= 1 || n > 6 {
        return stages.to_vec();
    }
    let poles: Vec<f64> = stages.iter().map(|s| (-dt / s.tau).exp()).collect();
    let zeros: Vec<f64> = poles
        .iter()
        .zip(stages)
        .map(|(&a, s)| (a + s.amplitude) / (1.0 + s.amplitude))
        .collect();
    let build = |perm: &[usize]| -> Option<(f64, Vec<IirStage>)> {
        let mut score = 0.0;
        let mut out = Vec::with_capacity(n);
        for (j, &p) in perm.iter().enumerate() {
            let (z, a) = (zeros[j], poles[p]);
            if z >= 1.0 || a <= 0.0 {
                return None;
            }
            let amp = (z - a) / (1.0 - z);
            let tau = -dt / a.ln();
            if !(amp.is_finite() && 1.0 + amp > 0.02 && (1e-10..1e-4).contains(&tau)) {
                return None;
            }
            score += amp.abs().sqrt();
            out.push(IirStage { amplitude: amp, tau });
        }
        Some((score, out))
    };
    let mut best = build(&(0..n).collect::<Vec<_>>());
    let mut perm: Vec<usize> = (0..n).collect();
    // Heap's algorithm over all assignments
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            if let Some(cand) = build(&perm) {
                if best.as_ref().is_none_or(|b| cand.0 < b.0) {
                    best = Some(cand);
                }
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    match best {
        Some((_, s)) => s,
        None => stages.to_vec(),
    }
}

fn unpack_stages(p: &[f64]) -> Option<Vec<IirStage>> {
    let mut stages = Vec::with_capacity(p.len() / 2);
    for c in p.chunks(2) {
        let (a, tau) = (c[0], c[1].exp());
        if !(a.is_finite() && 1.0 + a > 0.02 && tau.is_finite() && (1e-10..1e-4).contains(&tau)) {
            return None;
        }
        stages.push(IirStage { amplitude: a, tau });
    }
    Some(stages)
}

/// RMS deviation from flat of the response corrected by the candidate
/// stages' exact discrete inverses, normalized by its own tail. The tail
/// normalization frees the fit from errors in the reconstruction's
/// long-time value (traces shorter than a few times the slowest tail).
fn corrected_flatness(r: &[f64], h: f64, p: &[f64], skip: usize) -> f64 {
    let Some(stages) = unpack_stages(p) else {
        return 1e6 + p.iter().map(|v| v.abs()).sum::<f64>();
    };
    let mut y = r.to_vec();
    for s in &stages {
        let Ok(inv) = Section::from_stage(s, h).inverse() else {
            return 1e6;
        };
        y = inv.apply_slice(&y, y.len());
    }
    let tail_n = (y.len() / 10).max(4);
    let tail = y[y.len() - tail_n..].iter().sum::<f64>() / tail_n as f64;
    if tail.abs() < 0.2 {
        return 1e6;
    }
    let mut acc = 0.0;
    for &v in &y[skip..] {
        let e = v / tail - 1.0;
        acc += e * e;
    }
    (acc / (y.len() - skip) as f64).sqrt()
}

/// Variable-projection fit of `1 + Σ A_i e^{-t/τ_i}`: simplex over the time
/// constants with the amplitudes solved linearly at every step.
fn vp_exponentials(
    times: &[f64],
    values: &[f64],
    n: usize,
    tau_lo: f64,
    tau_hi: f64,
) -> Vec<IirStage> {
    let x0: Vec<f64> = (0..n)
        .map(|i| {
            let f = (i as f64 + 0.5) / n as f64;
            (tau_lo.ln() * (1.0 - f) + tau_hi.ln() * f).min((0.25 * tau_hi).ln())
        })
        .collect();
    let objective = |lt: &[f64]| {
        let mut penalty = 0.0;
        for &l in lt {
            if l < tau_lo.ln() {
                penalty += 1.0 + (tau_lo.ln() - l);
            }
            if l > tau_hi.ln() {
                penalty += 1.0 + (l - tau_hi.ln());
            }
        }
        if penalty > 0.0 {
            return 1e3 * penalty;
        }
        exp_residual(times, values, lt).0
    };
    let steps = vec![0.3; n];
    let (best, _) = fit::nelder_mead(objective, &x0, &steps, 400 * n);
    let (_, stages) = exp_residual(times, values, &best);
    if stages.len() == n {
        stages
    } else {
        // degenerate data; hand the refinement inert stages on the start grid
        x0.iter().map(|&l| IirStage { amplitude: 0.0, tau: l.exp() }).collect()
    }
}

fn exp_design(times: &[f64], ln_taus: &[f64]) -> DMatrix<f64> {
    let n = times.len();
    let mut a = DMatrix::zeros(n, ln_taus.len() + 1);
    for i in 0..n {
        a[(i, 0)] = 1.0;
        for (j, &lt) in ln_taus.iter().enumerate() {
            a[(i, j + 1)] = (-times[i] / lt.exp()).exp();
        }
    }
    a
}

/// Inner linear solve for the VP fit: returns (rms, stages) at fixed τ's.
fn exp_residual(times: &[f64], values: &[f64], ln_taus: &[f64]) -> (f64, Vec<IirStage>) {
    let a = exp_design(times, ln_taus);
    let y = DVector::from_column_slice(values);
    let Ok(c) = fit::linear_least_squares(&a, &y) else {
        return (f64::INFINITY, Vec::new());
    };
    if c[0].abs() < 0.1 {
        return (f64::INFINITY, Vec::new());
    }
    let resid = (&a * &c - &y).norm() / (times.len() as f64).sqrt();
    let stages = ln_taus
        .iter()
        .enumerate()
        .map(|(j, &lt)| IirStage { amplitude: (c[j + 1] / c[0]).clamp(-0.9, 3.0), tau: lt.exp() })
        .collect();
    (resid, stages)
}


/// Step response left after correcting `resp` with the exact inverses of
/// `stages`, renormalized by its own tail.
pub fn iir_corrected_response(
    resp: &ReconstructedResponse,
    stages: &[IirStage],
) -> Result<ReconstructedResponse, CryoscopeError> {
    let h = grid_spacing(&resp.times)?;
    let mut y = resp.values.clone();
    for s in stages {
        s.validate()?;
        let inv = Section::from_stage(s, h).inverse()?;
        y = inv.apply_slice(&y, y.len());
    }
    let tail_n = (y.len() / 10).max(4).min(y.len());
    let tail = y[y.len() - tail_n..].iter().sum::<f64>() / tail_n as f64;
    if tail.abs() < 1e-12 {
        return Err(CryoscopeError::Setup("corrected response has no tail to normalize by".into()));
    }
    for v in &mut y {
        *v /= tail;
    }
    Ok(ReconstructedResponse { times: resp.times.clone(), values: y })
}

/// Least-squares FIR taps flattening the first `taps` samples of a residual
/// (IIR-corrected) step response. The system is square, so what remains on
/// those samples after correction is numerical noise.
pub fn fit_fir(residual: &ReconstructedResponse, taps: usize) -> Result<FirFilter, CryoscopeError> {
    let n = residual.values.len();
    if taps == 0 || taps > n {
        return Err(CryoscopeError::Setup(format!(
            "tap count must lie in [1, {n}], got {taps}"
        )));
    }
    let h = grid_spacing(&residual.times)?;
    let mut a = DMatrix::zeros(taps, taps);
    for k in 0..taps {
        for j in 0..=k {
            a[(k, j)] = residual.values[k - j];
        }
    }
    let y = DVector::from_element(taps, 1.0);
    let w = fit::linear_least_squares(&a, &y)?;
    Ok(FirFilter { taps: w.iter().copied().collect(), dt: h })
}

/// Everything one identification run produces.
#[derive(Debug, Clone)]
pub struct LineIdentification {
    pub trace: CryoscopeTrace,
    pub calibration: AmplitudeCalibration,
    pub response: ReconstructedResponse,
    pub fit: ExponentialFit,
    pub fir: Option<FirFilter>,
}

/// Relative span of the calibration scan around the probe amplitude: wide
/// enough to cover the instantaneous overshoot of any stage combination the
/// fit model itself allows.
const CAL_SPAN: (f64, f64) = (-0.2, 2.8);
const CAL_POINTS: usize = 31;

/// Full pipeline: trace → amplitude calibration → reconstruction →
/// exponential fit → optional FIR on the remainder.
///
/// The spectrum table must cover `idle_flux + amplitude × [-0.2, 2.8]`.
pub fn identify_line(
    table: &SpectrumTable,
    chain: &DistortionChain,
    setup: &CryoscopeSetup,
    n_long: usize,
    n_short: usize,
    fir_taps: Option<usize>,
    par: &Parallelism,
) -> Result<LineIdentification, CryoscopeError> {
    if setup.amplitude == 0.0 {
        return Err(CryoscopeError::Setup("identification needs a nonzero probe amplitude".into()));
    }
    let trace = simulate_trace(table, chain, setup, par)?;
    let amps: Vec<f64> = (0..CAL_POINTS)
        .map(|i| {
            let f = i as f64 / (CAL_POINTS - 1) as f64;
            setup.amplitude * (CAL_SPAN.0 + (CAL_SPAN.1 - CAL_SPAN.0) * f)
        })
        .collect();
    let calibration = calibrate_amplitude(table, chain, setup, &amps, par)?;
    let response = reconstruct_response(&trace, &calibration, SG_WINDOW, SG_ORDER)?;
    let fit = fit_exponentials(&response, n_long, n_short)?;
    let fir = match fir_taps {
        Some(m) => Some(fit_fir(&iir_corrected_response(&response, &fit.stages)?, m)?),
        None => None,
    };
    Ok(LineIdentification { trace, calibration, response, fit, fir })
}

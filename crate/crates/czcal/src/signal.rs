//! Flux-line distortion model and its inverse (predistortion).
//!
//! The line is modeled as a cascade of first-order exponential stages, each
//! with unit-step response 1 + A·e^{-t/τ}, optionally followed by an FIR
//! filter. Stages are discretized by matching the step response at sample
//! instants, so fitted (A, τ) pairs are honored exactly on the grid. The
//! printed product-over-exponentials form is not LTI as written; per standard
//! cryoscope practice the cascade is the operative model, and for small |A|
//! the two agree to first order.

use crate::pulse::Waveform;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("invalid stage: {0}")]
    InvalidStage(String),
    #[error("inverse stage is unstable (pole magnitude {0:.6} >= 1)")]
    UnstableInverse(f64),
    #[error("FIR inversion residual {residual:.3e} exceeds {tol:.1e}")]
    FirResidual { residual: f64, tol: f64 },
    #[error("granularity must be a positive multiple of dt (got grain {grain:.3e}, dt {dt:.3e})")]
    BadGrain { grain: f64, dt: f64 },
    #[error("waveform dt {got:.3e} does not match chain dt {want:.3e}")]
    SampleRate { got: f64, want: f64 },
}

/// One exponential stage: unit-step response 1 + A·e^{-t/τ}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IirStage {
    pub amplitude: f64,
    pub tau: f64,
}

impl IirStage {
    pub fn validate(&self) -> Result<(), SignalError> {
        if !(self.amplitude.is_finite() && 1.0 + self.amplitude > 0.0) {
            return Err(SignalError::InvalidStage(format!(
                "need 1 + A > 0, got A = {}",
                self.amplitude
            )));
        }
        if !(self.tau > 0.0) {
            return Err(SignalError::InvalidStage(format!("need tau > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Causal FIR filter y[n] = Σ_m taps[m]·x[n-m] with zero-padded history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirFilter {
    pub taps: Vec<f64>,
    pub dt: f64,
}

impl FirFilter {
    pub fn identity(dt: f64) -> FirFilter {
        FirFilter { taps: vec![1.0], dt }
    }

    pub fn apply_slice(&self, x: &[f64], out_len: usize) -> Vec<f64> {
        let mut y = vec![0.0; out_len];
        for (n, yn) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (m, &l) in self.taps.iter().enumerate() {
                if m > n {
                    break;
                }
                if n - m < x.len() {
                    acc += l * x[n - m];
                }
            }
            *yn = acc;
        }
        y
    }

    /// Truncated impulse response of 1/L(z) by recursive deconvolution.
    /// Valid only when the result actually reproduces a delta; the residual
    /// check rejects unstable (non-minimum-phase) tap sets.
    pub fn inverse(&self, len: usize, tol: f64) -> Result<FirFilter, SignalError> {
        let l = &self.taps;
        if l.is_empty() || l[0] == 0.0 {
            return Err(SignalError::InvalidStage("FIR leading tap must be nonzero".into()));
        }
        let len = len.max(l.len());
        let mut g = vec![0.0; len];
        g[0] = 1.0 / l[0];
        for n in 1..len {
            let mut acc = 0.0;
            for m in 1..l.len().min(n + 1) {
                acc += l[m] * g[n - m];
            }
            g[n] = -acc / l[0];
        }
        // residual of l * g against the unit impulse over the full product
        let mut residual = 0.0f64;
        for n in 1..(len + l.len() - 1) {
            let mut acc = 0.0;
            for m in 0..l.len() {
                if n >= m && n - m < len {
                    acc += l[m] * g[n - m];
                }
            }
            residual = residual.max(acc.abs());
        }
        if residual > tol {
            return Err(SignalError::FirResidual { residual, tol });
        }
        Ok(FirFilter { taps: g, dt: self.dt })
    }
}

/// First-order rational section y[n] = b0·x[n] + b1·x[n-1] + pole·y[n-1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub b0: f64,
    pub b1: f64,
    pub pole: f64,
}

impl Section {
    /// Step-invariant discretization of an exponential stage: with
    /// a = e^{-dt/τ}, the recursion (1+A) - (a+A)z⁻¹ over 1 - a·z⁻¹ has
    /// unit-step response exactly 1 + A·aᵏ.
    pub fn from_stage(s: &IirStage, dt: f64) -> Section {
        let a = (-dt / s.tau).exp();
        Section { b0: 1.0 + s.amplitude, b1: -(a + s.amplitude), pole: a }
    }

    /// Exact rational inverse; errors when its pole leaves the unit circle.
    pub fn inverse(&self) -> Result<Section, SignalError> {
        let pole = -self.b1 / self.b0;
        if !(pole.abs() < 1.0) {
            return Err(SignalError::UnstableInverse(pole.abs()));
        }
        Ok(Section { b0: 1.0 / self.b0, b1: -self.pole / self.b0, pole })
    }

    pub fn apply_slice(&self, x: &[f64], out_len: usize) -> Vec<f64> {
        let mut y = vec![0.0; out_len];
        let mut x_prev = 0.0;
        let mut y_prev = 0.0;
        for (n, yn) in y.iter_mut().enumerate() {
            let xn = if n < x.len() { x[n] } else { 0.0 };
            // grouped so the A = 0 stage is an exact identity
            let v = self.b0 * xn + (self.b1 * x_prev + self.pole * y_prev);
            *yn = v;
            x_prev = xn;
            y_prev = v;
        }
        y
    }
}

/// Forward model of the flux line: exponential stages in order, then FIR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionChain {
    pub stages: Vec<IirStage>,
    pub fir: Option<FirFilter>,
    pub dt: f64,
}

impl DistortionChain {
    pub fn identity(dt: f64) -> DistortionChain {
        DistortionChain { stages: Vec::new(), fir: None, dt }
    }

    /// Four-stage exponential model of the flux control line as identified on
    /// the reference device: two long-tail stages (cabling skin effect) and
    /// two fast stages (packaging and on-chip response).
    pub fn flux_line_default(dt: f64) -> DistortionChain {
        let ns = 1e-9;
        DistortionChain {
            stages: vec![
                IirStage { amplitude: -0.021, tau: 846.0 * ns },
                IirStage { amplitude: -0.012, tau: 151.0 * ns },
                IirStage { amplitude: -0.393, tau: 36.0 * ns },
                IirStage { amplitude: 0.595, tau: 21.6 * ns },
            ],
            fir: None,
            dt,
        }
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        for s in &self.stages {
            s.validate()?;
        }
        Ok(())
    }

    pub fn sections(&self) -> Vec<Section> {
        self.stages.iter().map(|s| Section::from_stage(s, self.dt)).collect()
    }

    pub fn apply_slice(&self, x: &[f64], out_len: usize) -> Vec<f64> {
        let mut y = x.to_vec();
        y.resize(out_len.max(x.len()), 0.0);
        for sec in self.sections() {
            y = sec.apply_slice(&y, out_len);
        }
        if let Some(fir) = &self.fir {
            y = fir.apply_slice(&y, out_len);
        }
        y.truncate(out_len);
        y
    }
}

/// Inverse (predistortion) filter, optionally with the additive correction
/// held at a coarser update granularity to mimic the waveform generator's
/// correction clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predistortion {
    pub sections: Vec<Section>,
    pub fir: Option<FirFilter>,
    pub dt: f64,
    /// Correction update period in samples; 1 = every sample (exact).
    pub grain_samples: usize,
}

impl Predistortion {
    pub fn apply_slice(&self, x: &[f64], out_len: usize) -> Vec<f64> {
        let mut y = x.to_vec();
        y.resize(out_len.max(x.len()), 0.0);
        for sec in &self.sections {
            y = sec.apply_slice(&y, out_len);
        }
        if let Some(fir) = &self.fir {
            y = fir.apply_slice(&y, out_len);
        }
        y.truncate(out_len);
        if self.grain_samples > 1 {
            // zero-order hold on the correction: the baseline waveform passes
            // through at full rate, the filter correction updates per block
            let g = self.grain_samples;
            let mut held = vec![0.0; out_len];
            for n in 0..out_len {
                let xb = {
                    let b = (n / g) * g;
                    let corr = y[b] - if b < x.len() { x[b] } else { 0.0 };
                    corr
                };
                held[n] = (if n < x.len() { x[n] } else { 0.0 }) + xb;
            }
            return held;
        }
        y
    }
}

pub const FIR_INVERSE_TOL: f64 = 1e-6;

/// Build the exact predistortion for a chain: per-stage rational inverses in
/// reverse order, then the truncated FIR inverse.
pub fn invert_chain(c: &DistortionChain) -> Result<Predistortion, SignalError> {
    c.validate()?;
    let mut sections = Vec::with_capacity(c.stages.len());
    for sec in c.sections().iter().rev() {
        sections.push(sec.inverse()?);
    }
    let fir = match &c.fir {
        Some(f) => Some(f.inverse((4 * f.taps.len()).max(64), FIR_INVERSE_TOL)?),
        None => None,
    };
    Ok(Predistortion { sections, fir, dt: c.dt, grain_samples: 1 })
}

/// Constrain a predistortion's correction updates to `grain` seconds.
pub fn emulate_granularity(pre: &Predistortion, grain: f64) -> Result<Predistortion, SignalError> {
    let ratio = grain / pre.dt;
    let n = ratio.round();
    if !(grain > 0.0) || n < 1.0 || (ratio - n).abs() > 1e-9 {
        return Err(SignalError::BadGrain { grain, dt: pre.dt });
    }
    Ok(Predistortion { grain_samples: n as usize, ..pre.clone() })
}

fn check_rate(x: &Waveform, dt: f64) -> Result<(), SignalError> {
    if (x.dt - dt).abs() > 1e-15 * dt.max(x.dt) {
        return Err(SignalError::SampleRate { got: x.dt, want: dt });
    }
    Ok(())
}

/// Push a waveform through one exponential stage.
pub fn apply_stage(x: &Waveform, s: &IirStage) -> Result<Waveform, SignalError> {
    s.validate()?;
    let sec = Section::from_stage(s, x.dt);
    Ok(Waveform {
        samples: sec.apply_slice(&x.samples, x.samples.len()),
        dt: x.dt,
        buffer_after: x.buffer_after,
    })
}

/// Push a waveform through an FIR filter (output truncated to input length).
pub fn apply_fir(x: &Waveform, f: &FirFilter) -> Result<Waveform, SignalError> {
    check_rate(x, f.dt)?;
    Ok(Waveform {
        samples: f.apply_slice(&x.samples, x.samples.len()),
        dt: x.dt,
        buffer_after: x.buffer_after,
    })
}

/// Push a waveform through the full chain.
pub fn apply_chain(x: &Waveform, c: &DistortionChain) -> Result<Waveform, SignalError> {
    check_rate(x, c.dt)?;
    c.validate()?;
    Ok(Waveform {
        samples: c.apply_slice(&x.samples, x.samples.len()),
        dt: x.dt,
        buffer_after: x.buffer_after,
    })
}

/// Push a waveform through a predistortion filter.
pub fn apply_predistortion(x: &Waveform, p: &Predistortion) -> Result<Waveform, SignalError> {
    check_rate(x, p.dt)?;
    Ok(Waveform {
        samples: p.apply_slice(&x.samples, x.samples.len()),
        dt: x.dt,
        buffer_after: x.buffer_after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    const DT: f64 = 0.5e-9;

    fn unit_step(n: usize) -> Vec<f64> {
        vec![1.0; n]
    }

    fn random_wave(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_amplitude_stage_is_identity() {
        let s = IirStage { amplitude: 0.0, tau: 30e-9 };
        let sec = Section::from_stage(&s, DT);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_wave(&mut rng, 400);
        let y = sec.apply_slice(&x, x.len());
        assert_eq!(x, y);
    }

    #[test]
    fn step_response_matches_closed_form() {
        let s = IirStage { amplitude: 0.595, tau: 21.6e-9 };
        let sec = Section::from_stage(&s, DT);
        let y = sec.apply_slice(&unit_step(400), 400);
        for (k, &yk) in y.iter().enumerate() {
            let expect = 1.0 + s.amplitude * (-(k as f64) * DT / s.tau).exp();
            assert_abs_diff_eq!(yk, expect, epsilon = 1e-12);
        }
        // sample at k·dt = τ, on a stage whose τ is a grid multiple
        let s2 = IirStage { amplitude: -0.25, tau: 20e-9 };
        let y2 = Section::from_stage(&s2, DT).apply_slice(&unit_step(100), 100);
        assert_abs_diff_eq!(y2[40], 1.0 + s2.amplitude / std::f64::consts::E, epsilon = 1e-12);
        // fast stage at 60 ns: 1 + 0.595·e^{-60/21.6} = 1.036995
        let k60 = (60e-9 / DT).round() as usize;
        assert_abs_diff_eq!(y[k60], 1.036995, epsilon = 1e-5);
    }

    #[test]
    fn fir_identity_and_delay() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_wave(&mut rng, 128);
        let ident = FirFilter { taps: vec![1.0, 0.0, 0.0], dt: DT };
        assert_eq!(ident.apply_slice(&x, x.len()), x);
        let delay = FirFilter { taps: vec![0.0, 1.0], dt: DT };
        let y = delay.apply_slice(&x, x.len());
        assert_eq!(&y[1..], &x[..x.len() - 1]);
        assert_eq!(y[0], 0.0);
    }

    #[test]
    fn fir_matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_wave(&mut rng, 200);
        let taps: Vec<f64> = (0..72).map(|_| rng.random_range(-0.5..0.5)).collect();
        let f = FirFilter { taps: taps.clone(), dt: DT };
        let y = f.apply_slice(&x, x.len());
        // independent direct-sum oracle
        for n in 0..x.len() {
            let mut acc = 0.0;
            for m in 0..=n.min(taps.len() - 1) {
                acc += taps[m] * x[n - m];
            }
            assert_abs_diff_eq!(y[n], acc, epsilon = 1e-12);
        }
    }

    #[test]
    fn chain_is_linear_and_time_invariant() {
        let c = DistortionChain::flux_line_default(DT);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_wave(&mut rng, 300);
        let y = random_wave(&mut rng, 300);
        let (a, b) = (1.7, -0.4);
        let mixed: Vec<f64> = x.iter().zip(&y).map(|(&u, &v)| a * u + b * v).collect();
        let lhs = c.apply_slice(&mixed, 300);
        let fx = c.apply_slice(&x, 300);
        let fy = c.apply_slice(&y, 300);
        for n in 0..300 {
            assert_abs_diff_eq!(lhs[n], a * fx[n] + b * fy[n], epsilon = 1e-12);
        }
        // time invariance: shift by 7 samples
        let mut shifted = vec![0.0; 7];
        shifted.extend_from_slice(&x);
        let ys = c.apply_slice(&shifted, 307);
        let y0 = c.apply_slice(&x, 300);
        assert_eq!(&ys[7..], &y0[..]);
        assert!(ys[..7].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stage_order_is_irrelevant() {
        let s1 = IirStage { amplitude: -0.393, tau: 36e-9 };
        let s2 = IirStage { amplitude: 0.595, tau: 21.6e-9 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_wave(&mut rng, 500);
        let a = Section::from_stage(&s1, DT);
        let b = Section::from_stage(&s2, DT);
        let ab = b.apply_slice(&a.apply_slice(&x, 500), 500);
        let ba = a.apply_slice(&b.apply_slice(&x, 500), 500);
        let peak = x.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        for n in 0..500 {
            assert_abs_diff_eq!(ab[n], ba[n], epsilon = 1e-10 * peak);
        }
    }

    #[test]
    fn empty_chain_is_identity() {
        let c = DistortionChain::identity(DT);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_wave(&mut rng, 64);
        assert_eq!(c.apply_slice(&x, 64), x);
    }

    #[test]
    fn full_chain_step_settles_to_unity() {
        let c = DistortionChain::flux_line_default(DT);
        let t_settle = 10.0 * 846e-9;
        let n = (t_settle / DT) as usize + 200;
        let y = c.apply_slice(&unit_step(n), n);
        for (k, &yk) in y.iter().enumerate().skip((t_settle / DT) as usize) {
            assert!((yk - 1.0).abs() < 1e-3, "sample {k} = {yk}");
        }
    }

    #[test]
    fn single_stage_roundtrip_is_machine_exact() {
        let s = IirStage { amplitude: 0.595, tau: 21.6e-9 };
        let sec = Section::from_stage(&s, DT);
        let inv = sec.inverse().unwrap();
        let y = sec.apply_slice(&inv.apply_slice(&unit_step(500), 500), 500);
        for &v in &y {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn chain_roundtrip_on_random_waveforms() {
        let mut c = DistortionChain::flux_line_default(DT);
        // include an FIR with taps concentrated near a delta so it is
        // comfortably invertible, as calibrated FIR corrections are
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut taps = vec![0.0; 72];
        taps[0] = 1.0;
        for t in taps.iter_mut().skip(1) {
            *t = rng.random_range(-0.004..0.004);
        }
        c.fir = Some(FirFilter { taps, dt: DT });
        let pre = invert_chain(&c).unwrap();
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let x = random_wave(&mut rng, 256);
            let sent = pre.apply_slice(&x, 256);
            let recv = c.apply_slice(&sent, 256);
            let peak = x.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
            for n in 0..256 {
                worst = worst.max((recv[n] - x[n]).abs() / peak);
            }
        }
        assert!(worst < 1e-6, "round-trip error {worst}");
    }

    #[test]
    fn inverse_rejects_unstable_stage() {
        // 1 + A < 0 fails validation
        let c = DistortionChain {
            stages: vec![IirStage { amplitude: -1.5, tau: 50e-9 }],
            fir: None,
            dt: DT,
        };
        assert!(invert_chain(&c).is_err());
        // a stage whose inverse pole leaves the unit circle fails too:
        // a + A < -(1+A) requires strongly negative A at long dt
        let c2 = DistortionChain {
            stages: vec![IirStage { amplitude: -0.95, tau: 1e-9 }],
            fir: None,
            dt: 20e-9,
        };
        assert!(matches!(invert_chain(&c2), Err(SignalError::UnstableInverse(_))));
    }

    #[test]
    fn fir_inverse_reproduces_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut taps = vec![0.0; 72];
        taps[0] = 0.9;
        for t in taps.iter_mut().skip(1) {
            *t = rng.random_range(-0.003..0.003);
        }
        let f = FirFilter { taps, dt: DT };
        let g = f.inverse(288, FIR_INVERSE_TOL).unwrap();
        let mut delta = vec![0.0; 400];
        delta[0] = 1.0;
        let through = f.apply_slice(&g.apply_slice(&delta, 400), 400);
        assert_abs_diff_eq!(through[0], 1.0, epsilon = 1e-9);
        for &v in &through[1..360] {
            assert!(v.abs() < 1e-6);
        }
        // non-minimum-phase taps are rejected
        let bad = FirFilter { taps: vec![0.3, 1.0], dt: DT };
        assert!(bad.inverse(128, FIR_INVERSE_TOL).is_err());
    }

    #[test]
    fn roundtrip_step_quality_matches_correction_spec() {
        let c = DistortionChain::flux_line_default(DT);
        let pre = invert_chain(&c).unwrap();
        let n = 4000;
        let y = c.apply_slice(&pre.apply_slice(&unit_step(n), n), n);
        let k60 = (60e-9 / DT).round() as usize;
        for (k, &v) in y.iter().enumerate() {
            let tol = if k >= k60 { 0.005 } else { 0.02 };
            assert!((v - 1.0).abs() < tol, "sample {k} deviates by {}", (v - 1.0).abs());
        }
    }

    #[test]
    fn granular_correction_roundtrip_stays_bounded() {
        let c = DistortionChain::flux_line_default(DT);
        let pre = invert_chain(&c).unwrap();
        let g = emulate_granularity(&pre, 4e-9).unwrap();
        assert_eq!(g.grain_samples, 8);
        let n = 4000;
        let y = c.apply_slice(&g.apply_slice(&unit_step(n), n), n);
        let k60 = (60e-9 / DT).round() as usize;
        let mut worst = 0.0f64;
        for &v in &y[k60..] {
            worst = worst.max((v - 1.0).abs());
        }
        assert!(worst < 0.02, "granular round-trip error {worst} after 60 ns");
        // grain = dt leaves the filter unchanged
        let same = emulate_granularity(&pre, DT).unwrap();
        assert_eq!(same.grain_samples, 1);
        // invalid grains
        assert!(emulate_granularity(&pre, 0.0).is_err());
        assert!(emulate_granularity(&pre, 1.3 * DT).is_err());
    }
}

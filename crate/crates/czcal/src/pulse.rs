//! Flux pulse parametrizations and their sampling onto the AWG grid.
//!
//! All waveforms are flux *offsets* from the idle point, in units of Φ0.
//! Three families: a Gaussian-square pulse (erf rise/fall around a flat top),
//! a peak-normalized Fourier series (sum of 1-cos harmonics), and a
//! piecewise-linear node basis with zero-ramped ends. Every sampler is a
//! pointwise evaluation of the underlying continuous function on the grid
//! t = k·dt, so refining dt only inserts samples.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PulseError {
    #[error("invalid pulse parameters: {0}")]
    Invalid(String),
    #[error("parameter vector length {got} does not match family ({want})")]
    VectorLength { got: usize, want: usize },
}

/// Flux amplitudes beyond half a flux quantum fold back on the coupler
/// dispersion; reject them outright.
pub const MAX_FLUX_AMPLITUDE: f64 = 0.5;

/// Rise/fall grid margin in units of τR. 4.5 puts the truncated erf tails
/// below 1e-9 of the amplitude at the first and last samples.
pub const RISE_MARGIN: f64 = 4.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSquareParams {
    /// Flat-top flux offset Φf.
    pub amplitude: f64,
    /// Flat-top width w (s).
    pub width: f64,
    /// Rise time τR (s).
    pub rise_time: f64,
    pub phi1: f64,
    pub phi2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierParams {
    /// Peak flux offset A; the envelope is normalized to this value.
    pub amplitude: f64,
    /// Pulse width w (s).
    pub width: f64,
    /// Harmonic weights λ_n for (1 - cos(2πnt/w)), n = 1..
    pub lambdas: Vec<f64>,
    pub phi1: f64,
    pub phi2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicosParams {
    /// Node values Y_i, scaled by `amplitude`; nodes sit at t = (i+½)·w/N.
    pub nodes: Vec<f64>,
    pub amplitude: f64,
    pub width: f64,
    pub phi1: f64,
    pub phi2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum PulseParams {
    GaussianSquare(GaussianSquareParams),
    Fourier(FourierParams),
    Picos(PicosParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PulseFamily {
    GaussianSquare,
    Fourier,
    Picos,
}

/// Sampled flux waveform. `samples` include any appended buffer zeros;
/// `buffer_after` records how much of the tail is buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub dt: f64,
    pub buffer_after: f64,
}

impl Waveform {
    /// Time span from first to last sample.
    pub fn duration(&self) -> f64 {
        (self.samples.len().saturating_sub(1)) as f64 * self.dt
    }

    pub fn max_abs(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, &s| m.max(s.abs()))
    }

    /// Back-to-back concatenation (the consecutive-pulse stress case).
    pub fn concat(&self, other: &Waveform) -> Waveform {
        assert_eq!(self.dt, other.dt, "sample rates differ");
        let mut samples = self.samples.clone();
        samples.extend_from_slice(&other.samples);
        Waveform { samples, dt: self.dt, buffer_after: other.buffer_after }
    }
}

fn check(cond: bool, msg: &str) -> Result<(), PulseError> {
    if cond {
        Ok(())
    } else {
        Err(PulseError::Invalid(msg.into()))
    }
}

fn check_common(amplitude: f64, width: f64, phi1: f64, phi2: f64) -> Result<(), PulseError> {
    check(amplitude.is_finite() && width.is_finite(), "non-finite parameter")?;
    check(amplitude.abs() <= MAX_FLUX_AMPLITUDE, "|amplitude| exceeds 0.5 Φ0")?;
    check(width > 0.0, "width must be positive")?;
    check(phi1.is_finite() && phi2.is_finite(), "non-finite virtual-Z angle")
}

impl GaussianSquareParams {
    pub fn validate(&self) -> Result<(), PulseError> {
        check_common(self.amplitude, self.width, self.phi1, self.phi2)?;
        check(self.rise_time > 0.0, "rise_time must be positive")
    }

    /// Continuous pulse value at time t measured from the pulse center.
    pub fn value(&self, t: f64) -> f64 {
        let erf_step = |x: f64| 0.5 * (1.0 + erf(x / self.rise_time));
        self.amplitude * erf_step(t + 0.5 * self.width) * erf_step(-t + 0.5 * self.width)
    }
}

impl FourierParams {
    pub fn validate(&self) -> Result<(), PulseError> {
        check_common(self.amplitude, self.width, self.phi1, self.phi2)?;
        check(!self.lambdas.is_empty(), "need at least one harmonic")?;
        check(self.lambdas.iter().all(|l| l.is_finite()), "non-finite harmonic weight")?;
        check(self.lambdas.iter().any(|&l| l != 0.0), "all-zero harmonics: normalization undefined")?;
        check(self.envelope_peak() > 1e-9 * self.lambdas.iter().map(|l| l.abs()).sum::<f64>(),
              "envelope peak vanishes: normalization undefined")
    }

    /// Unnormalized envelope Σ λ_n (1 - cos(2πnt/w)) on [0, w], 0 outside.
    pub fn envelope(&self, t: f64) -> f64 {
        if t <= 0.0 || t >= self.width {
            return 0.0;
        }
        let base = crate::TWO_PI * t / self.width;
        self.lambdas
            .iter()
            .enumerate()
            .map(|(i, &l)| l * (1.0 - ((i + 1) as f64 * base).cos()))
            .sum()
    }

    /// Envelope maximum over [0, w]: dense scan plus golden-section polish.
    pub fn envelope_peak(&self) -> f64 {
        let n = 2048;
        let mut best = (0.0f64, 0.0f64); // (value, t)
        for k in 1..n {
            let t = self.width * k as f64 / n as f64;
            let v = self.envelope(t);
            if v > best.0 {
                best = (v, t);
            }
        }
        let cell = self.width / n as f64;
        let (mut a, mut b) = (best.1 - cell, best.1 + cell);
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let (mut c, mut d) = (b - inv_phi * (b - a), a + inv_phi * (b - a));
        let (mut fc, mut fd) = (self.envelope(c), self.envelope(d));
        while b - a > 1e-13 * self.width {
            if fc > fd {
                b = d;
                d = c;
                fd = fc;
                c = b - inv_phi * (b - a);
                fc = self.envelope(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + inv_phi * (b - a);
                fd = self.envelope(d);
            }
        }
        self.envelope(0.5 * (a + b)).max(best.0)
    }

    /// Normalized pulse value: peak exactly `amplitude`.
    pub fn value(&self, t: f64, peak: f64) -> f64 {
        self.amplitude * self.envelope(t) / peak
    }
}

impl PicosParams {
    pub fn validate(&self) -> Result<(), PulseError> {
        check_common(self.amplitude, self.width, self.phi1, self.phi2)?;
        check(!self.nodes.is_empty(), "need at least one node")?;
        check(self.nodes.iter().all(|y| y.is_finite()), "non-finite node")?;
        let peak = self.nodes.iter().fold(0.0f64, |m, &y| m.max(y.abs()));
        check(
            (self.amplitude * peak).abs() <= MAX_FLUX_AMPLITUDE,
            "peak node flux exceeds 0.5 Φ0",
        )
    }

    pub fn node_time(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.width / self.nodes.len() as f64
    }

    /// Piecewise-linear interpolation through the nodes, ramping from zero at
    /// t = 0 and back to zero at t = w.
    pub fn value(&self, t: f64) -> f64 {
        if t <= 0.0 || t >= self.width {
            return 0.0;
        }
        let n = self.nodes.len();
        // Knot list: (0, 0), (t_i, A·Y_i)…, (w, 0).
        let (t0, y0, t1, y1);
        let first = self.node_time(0);
        let last = self.node_time(n - 1);
        if t <= first {
            (t0, y0, t1, y1) = (0.0, 0.0, first, self.nodes[0]);
        } else if t >= last {
            (t0, y0, t1, y1) = (last, self.nodes[n - 1], self.width, 0.0);
        } else {
            let i = ((t / self.width * n as f64) - 0.5).floor() as usize;
            let i = i.min(n - 2);
            (t0, y0, t1, y1) = (self.node_time(i), self.nodes[i], self.node_time(i + 1), self.nodes[i + 1]);
        }
        let f = (t - t0) / (t1 - t0);
        self.amplitude * (y0 + f * (y1 - y0))
    }
}

impl PulseParams {
    pub fn family(&self) -> PulseFamily {
        match self {
            PulseParams::GaussianSquare(_) => PulseFamily::GaussianSquare,
            PulseParams::Fourier(_) => PulseFamily::Fourier,
            PulseParams::Picos(_) => PulseFamily::Picos,
        }
    }

    pub fn validate(&self) -> Result<(), PulseError> {
        match self {
            PulseParams::GaussianSquare(p) => p.validate(),
            PulseParams::Fourier(p) => p.validate(),
            PulseParams::Picos(p) => p.validate(),
        }
    }

    pub fn width(&self) -> f64 {
        match self {
            PulseParams::GaussianSquare(p) => p.width,
            PulseParams::Fourier(p) => p.width,
            PulseParams::Picos(p) => p.width,
        }
    }

    pub fn virtual_z(&self) -> (f64, f64) {
        match self {
            PulseParams::GaussianSquare(p) => (p.phi1, p.phi2),
            PulseParams::Fourier(p) => (p.phi1, p.phi2),
            PulseParams::Picos(p) => (p.phi1, p.phi2),
        }
    }

    pub fn set_virtual_z(&mut self, phi1: f64, phi2: f64) {
        match self {
            PulseParams::GaussianSquare(p) => {
                p.phi1 = phi1;
                p.phi2 = phi2;
            }
            PulseParams::Fourier(p) => {
                p.phi1 = phi1;
                p.phi2 = phi2;
            }
            PulseParams::Picos(p) => {
                p.phi1 = phi1;
                p.phi2 = phi2;
            }
        }
    }

    /// Copy with the width and amplitude replaced; used by parameter sweeps
    /// that scan a template shape over a (w, A) grid.
    pub fn with_width_amplitude(&self, width: f64, amplitude: f64) -> PulseParams {
        let mut p = self.clone();
        match &mut p {
            PulseParams::GaussianSquare(g) => {
                g.width = width;
                g.amplitude = amplitude;
            }
            PulseParams::Fourier(f) => {
                f.width = width;
                f.amplitude = amplitude;
            }
            PulseParams::Picos(pp) => {
                pp.width = width;
                pp.amplitude = amplitude;
            }
        }
        p
    }

    /// Flat optimization vector. Orderings (virtual-Z angles always last):
    /// Gaussian-square `[Φf, w, τR, φ1, φ2]`; Fourier `[A, w, λ…, φ1, φ2]`;
    /// PiCoS `[Y…, A, w, φ1, φ2]`.
    pub fn parameter_vector(&self) -> Vec<f64> {
        match self {
            PulseParams::GaussianSquare(p) => {
                vec![p.amplitude, p.width, p.rise_time, p.phi1, p.phi2]
            }
            PulseParams::Fourier(p) => {
                let mut v = vec![p.amplitude, p.width];
                v.extend_from_slice(&p.lambdas);
                v.push(p.phi1);
                v.push(p.phi2);
                v
            }
            PulseParams::Picos(p) => {
                let mut v = p.nodes.clone();
                v.extend_from_slice(&[p.amplitude, p.width, p.phi1, p.phi2]);
                v
            }
        }
    }

    /// Inverse of [`parameter_vector`]; `shape_terms` is the harmonic/node
    /// count for the variable-length families (ignored for Gaussian-square).
    pub fn from_vector(
        family: PulseFamily,
        shape_terms: usize,
        v: &[f64],
    ) -> Result<PulseParams, PulseError> {
        match family {
            PulseFamily::GaussianSquare => {
                if v.len() != 5 {
                    return Err(PulseError::VectorLength { got: v.len(), want: 5 });
                }
                Ok(PulseParams::GaussianSquare(GaussianSquareParams {
                    amplitude: v[0],
                    width: v[1],
                    rise_time: v[2],
                    phi1: v[3],
                    phi2: v[4],
                }))
            }
            PulseFamily::Fourier => {
                let want = shape_terms + 4;
                if v.len() != want {
                    return Err(PulseError::VectorLength { got: v.len(), want });
                }
                Ok(PulseParams::Fourier(FourierParams {
                    amplitude: v[0],
                    width: v[1],
                    lambdas: v[2..2 + shape_terms].to_vec(),
                    phi1: v[2 + shape_terms],
                    phi2: v[3 + shape_terms],
                }))
            }
            PulseFamily::Picos => {
                let want = shape_terms + 4;
                if v.len() != want {
                    return Err(PulseError::VectorLength { got: v.len(), want });
                }
                Ok(PulseParams::Picos(PicosParams {
                    nodes: v[..shape_terms].to_vec(),
                    amplitude: v[shape_terms],
                    width: v[shape_terms + 1],
                    phi1: v[shape_terms + 2],
                    phi2: v[shape_terms + 3],
                }))
            }
        }
    }

    /// Sample onto the AWG grid t = k·dt with `buffer_after` seconds of
    /// appended zeros.
    pub fn sample(&self, dt: f64, buffer_after: f64) -> Result<Waveform, PulseError> {
        self.validate()?;
        check(dt > 0.0 && buffer_after >= 0.0, "bad sampling grid")?;
        let samples = match self {
            PulseParams::GaussianSquare(p) => {
                // Symmetric grid out to ±(w/2 + RISE_MARGIN·τR), snapped to dt.
                let half = 0.5 * p.width + RISE_MARGIN * p.rise_time;
                let n_half = (half / dt).ceil() as usize;
                (0..=2 * n_half)
                    .map(|k| p.value((k as f64 - n_half as f64) * dt))
                    .collect::<Vec<f64>>()
            }
            PulseParams::Fourier(p) => {
                let peak = p.envelope_peak();
                grid_over_width(p.width, dt).map(|t| p.value(t, peak)).collect()
            }
            PulseParams::Picos(p) => {
                grid_over_width(p.width, dt).map(|t| p.value(t)).collect()
            }
        };
        let n_buf = (buffer_after / dt).round() as usize;
        let mut samples = samples;
        samples.extend(std::iter::repeat(0.0).take(n_buf));
        Ok(Waveform { samples, dt, buffer_after: n_buf as f64 * dt })
    }
}

/// Grid t = k·dt covering [0, w] plus one terminating sample at or beyond w,
/// so sampled pulses always end on an exact zero.
fn grid_over_width(width: f64, dt: f64) -> impl Iterator<Item = f64> {
    let n = (width / dt).ceil() as usize;
    (0..=n.max(1)).map(move |k| k as f64 * dt)
}

/// Error function (libm's musl port, accurate to ~1 ulp; erf(0) == 0 exactly,
/// which the flat-top identities below rely on).
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn gs() -> GaussianSquareParams {
        GaussianSquareParams {
            amplitude: 0.12,
            width: 60e-9,
            rise_time: 3e-9,
            phi1: 0.1,
            phi2: -0.2,
        }
    }

    #[test]
    fn gaussian_square_center_is_flat() {
        // w/τR = 20: center value within [0.999999, 1] of the amplitude.
        let p = gs();
        let r = p.value(0.0) / p.amplitude;
        assert!(r > 0.999999 && r <= 1.0, "center ratio {r}");
    }

    #[test]
    fn gaussian_square_half_amplitude_at_edges() {
        let p = gs();
        let expect = p.amplitude * 0.5 * (1.0 + erf(p.width / p.rise_time)) * 0.5;
        assert_relative_eq!(p.value(0.5 * p.width), expect, max_relative = 1e-12);
        assert_relative_eq!(p.value(-0.5 * p.width), expect, max_relative = 1e-12);
        // and that is a half-amplitude point to good accuracy
        assert_abs_diff_eq!(p.value(0.5 * p.width) / p.amplitude, 0.5, epsilon = 1e-6);
    }

    #[test]
    fn sampled_ends_below_threshold() {
        for params in [
            PulseParams::GaussianSquare(gs()),
            PulseParams::Fourier(FourierParams {
                amplitude: 0.1,
                width: 61.3e-9,
                lambdas: vec![1.0, 0.3, -0.1, 0.05, 0.0],
                phi1: 0.0,
                phi2: 0.0,
            }),
            PulseParams::Picos(PicosParams {
                nodes: vec![0.2, 0.5, 0.9, 1.0, 0.7],
                amplitude: 0.11,
                width: 47e-9,
                phi1: 0.0,
                phi2: 0.0,
            }),
        ] {
            let wf = params.sample(0.5e-9, 0.0).unwrap();
            let amp = wf.max_abs();
            assert!(wf.samples[0].abs() < 1e-9 * amp, "first sample too large");
            assert!(wf.samples.last().unwrap().abs() < 1e-9 * amp, "last sample too large");
        }
    }

    #[test]
    fn fourier_single_lobe_peak_exact() {
        let p = FourierParams {
            amplitude: 0.13,
            width: 60e-9,
            lambdas: vec![1.0, 0.0, 0.0, 0.0, 0.0],
            phi1: 0.0,
            phi2: 0.0,
        };
        let peak = p.envelope_peak();
        assert_relative_eq!(peak, 2.0, max_relative = 1e-10);
        assert_relative_eq!(p.value(0.5 * p.width, peak), p.amplitude, max_relative = 1e-12);
    }

    #[test]
    fn fourier_peak_matches_brute_force() {
        let p = FourierParams {
            amplitude: 1.0,
            width: 1.0,
            lambdas: vec![1.0, 1.0, 0.0, 0.0, 0.0],
            phi1: 0.0,
            phi2: 0.0,
        };
        // Independent dense-grid maximization.
        let n = 1 << 21;
        let mut brute = (0.0f64, 0.0f64);
        for k in 1..n {
            let t = k as f64 / n as f64;
            let v = p.envelope(t);
            if v > brute.0 {
                brute = (v, t);
            }
        }
        let peak = p.envelope_peak();
        assert_abs_diff_eq!(peak, brute.0, epsilon = 1e-6);
        // location: compare the polished argmax against the brute cell
        let mut t_polished = 0.0;
        let mut best = 0.0;
        for k in 1..4096 {
            let t = k as f64 / 4096.0;
            if p.envelope(t) > best {
                best = p.envelope(t);
                t_polished = t;
            }
        }
        assert_abs_diff_eq!(t_polished, brute.1, epsilon = 1e-3);
    }

    #[test]
    fn fourier_all_zero_rejected() {
        let p = FourierParams {
            amplitude: 0.1,
            width: 60e-9,
            lambdas: vec![0.0; 5],
            phi1: 0.0,
            phi2: 0.0,
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn picos_nodes_exact() {
        let p = PicosParams {
            nodes: (0..17).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0).collect(),
            amplitude: 0.09,
            width: 55e-9,
            phi1: 0.0,
            phi2: 0.0,
        };
        for i in 0..p.nodes.len() {
            let t = p.node_time(i);
            assert_relative_eq!(p.value(t), p.amplitude * p.nodes[i], max_relative = 1e-12);
        }
        assert_eq!(p.value(0.0), 0.0);
        assert_eq!(p.value(p.width), 0.0);
    }

    #[test]
    fn parameter_vector_roundtrip_exact() {
        let cases = vec![
            PulseParams::GaussianSquare(gs()),
            PulseParams::Fourier(FourierParams {
                amplitude: 0.13,
                width: 60e-9,
                lambdas: vec![1.0, -0.2, 0.07, 0.3, -0.9],
                phi1: 1.3,
                phi2: -2.2,
            }),
            PulseParams::Picos(PicosParams {
                nodes: (0..17).map(|i| (i as f64).sin()).collect(),
                amplitude: 0.08,
                width: 48e-9,
                phi1: 0.4,
                phi2: 0.5,
            }),
        ];
        for p in cases {
            let v = p.parameter_vector();
            let shape = match &p {
                PulseParams::Fourier(f) => f.lambdas.len(),
                PulseParams::Picos(pp) => pp.nodes.len(),
                _ => 0,
            };
            if matches!(p, PulseParams::Fourier(_)) {
                assert_eq!(v.len(), shape + 4);
            }
            let back = PulseParams::from_vector(p.family(), shape, &v).unwrap();
            assert_eq!(p, back, "round trip changed parameters");
            assert_eq!(v, back.parameter_vector(), "vector not bitwise stable");
        }
    }

    #[test]
    fn default_fourier_vector_is_nine_long() {
        let p = PulseParams::Fourier(FourierParams {
            amplitude: 0.1,
            width: 60e-9,
            lambdas: vec![1.0, 0.0, 0.0, 0.0, 0.0],
            phi1: 0.0,
            phi2: 0.0,
        });
        assert_eq!(p.parameter_vector().len(), 9);
    }

    #[test]
    fn decimation_agrees_on_common_grid() {
        let p = PulseParams::Fourier(FourierParams {
            amplitude: 0.1,
            width: 60.7e-9,
            lambdas: vec![1.0, 0.4, -0.2, 0.0, 0.1],
            phi1: 0.0,
            phi2: 0.0,
        });
        let coarse = p.sample(0.5e-9, 0.0).unwrap();
        let fine = p.sample(0.25e-9, 0.0).unwrap();
        for (k, &v) in coarse.samples.iter().enumerate() {
            if 2 * k < fine.samples.len() {
                assert_abs_diff_eq!(v, fine.samples[2 * k], epsilon = 1e-12);
            }
        }
        // Gaussian-square grids are symmetric around the center; compare via
        // continuous evaluation instead of index alignment.
        let g = gs();
        let wf = PulseParams::GaussianSquare(g).sample(0.5e-9, 0.0).unwrap();
        let n_half = (wf.samples.len() - 1) / 2;
        for (k, &v) in wf.samples.iter().enumerate() {
            let t = (k as f64 - n_half as f64) * 0.5e-9;
            assert_abs_diff_eq!(v, g.value(t), epsilon = 1e-15);
        }
    }

    #[test]
    fn span_matches_width_within_one_sample() {
        for (w, dt) in [(60e-9, 0.5e-9), (59.3e-9, 0.5e-9), (47.77e-9, 0.4e-9)] {
            let p = PulseParams::Fourier(FourierParams {
                amplitude: 0.1,
                width: w,
                lambdas: vec![1.0],
                phi1: 0.0,
                phi2: 0.0,
            });
            let wf = p.sample(dt, 10e-9).unwrap();
            let span = wf.duration() - wf.buffer_after;
            assert!(span >= w - 1e-15 && span < w + dt, "span {span} vs width {w}");
        }
    }

    #[test]
    fn buffer_zeros_appended() {
        let p = PulseParams::GaussianSquare(gs());
        let no_buf = p.sample(0.5e-9, 0.0).unwrap();
        let buffered = p.sample(0.5e-9, 8e-9).unwrap();
        assert_eq!(buffered.samples.len(), no_buf.samples.len() + 16);
        assert!(buffered.samples[no_buf.samples.len()..].iter().all(|&s| s == 0.0));
    }

    #[test]
    fn erf_reference_values() {
        assert_eq!(erf(0.0), 0.0);
        assert_abs_diff_eq!(erf(1.0), 0.8427007929497149, epsilon = 1e-15);
        assert_abs_diff_eq!(erf(-1.0), -0.8427007929497149, epsilon = 1e-15);
        assert_abs_diff_eq!(erf(2.0), 0.9953222650189527, epsilon = 1e-15);
        assert!(erf(6.0) > 1.0 - 1e-12);
    }
}

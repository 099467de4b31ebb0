//! ORBIT cost evaluation and the closed calibration loop.
//!
//! A candidate waveform is scored by playing random two-qubit Clifford
//! sequences on the full device model: every CZ slot runs the candidate's
//! flux pulse through the distortion chain and the 36-level Schrödinger
//! propagator, single-qubit gates are ideal rotations between the dressed
//! idle eigenstates, and the cost is E = 1 − ⟨P(qubit-0 ground)⟩ over M
//! sequences with binomial shot sampling. Leakage therefore shows up as
//! "not ground" exactly as it would in hardware.
//!
//! The loop itself is plain (μ/μ_w, λ) CMA-ES over the pulse parameter
//! vector, with the sequence length N ratcheted up by one every time the
//! mean cost of an evolution drops below the threshold, which re-aims the
//! cost at the gate error scale the current pulse has reached.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clifford::{CliffordGroup, Gate};
use crate::cmaes::{should_terminate, CmaEs, CmaesError, SearchSpace};
use crate::device::{labeled_spectrum, DeviceError, DeviceParams, Label};
use crate::parallel::Parallelism;
use crate::propagator::{adiabatic_phase, extract_gate, propagate, PropagatorError};
use crate::pulse::{PulseError, PulseFamily, PulseParams, Waveform};
use crate::rb::{
    build_rb_sequences, run_irb, sampled_survival, IrbResult, RbBackend, RbError, RbSequence,
};
use crate::signal::{
    apply_chain, apply_predistortion, DistortionChain, Predistortion, SignalError,
};

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Pulse(#[from] PulseError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Propagator(#[from] PropagatorError),
    #[error(transparent)]
    Optimizer(#[from] CmaesError),
    #[error(transparent)]
    Rb(#[from] RbError),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

// ---------------------------------------------------------------------------
// deterministic stream splitting

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for a coordinate path under one root seed. Every
/// consumer of randomness derives its stream from (seed, path), so results
/// do not depend on evaluation order or thread scheduling.
pub fn split_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut z = splitmix(seed);
    for &p in path {
        z = splitmix(z ^ p);
    }
    ChaCha8Rng::seed_from_u64(z)
}

// Stream domains under the root seed.
const DOMAIN_SHOTS: u64 = 0;
const DOMAIN_SEQUENCES: u64 = 1;
const DOMAIN_ASK: u64 = 2;
const DOMAIN_STRESS: u64 = 3;

// ---------------------------------------------------------------------------
// configuration

/// Parameters of one ORBIT cost evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrbitConfig {
    /// Random sequences per cost value.
    pub sequences: usize,
    /// Binomial shots per sequence.
    pub shots: u32,
    /// Mean-cost threshold that triggers the sequence-length ratchet.
    pub threshold: f64,
    /// Starting sequence length.
    pub n0: u32,
    /// Depolarizing strength λ applied after every single-qubit gate
    /// (F_SQ = 1 − λ/2); zero keeps the pure-state fast path.
    pub sq_depolarizing: f64,
    /// Depolarizing strength λ applied after every CZ (F_CZ = 1 − 3λ/4).
    pub cz_depolarizing: f64,
    /// Symmetric readout assignment error.
    pub readout_error: f64,
    /// AWG sample period in seconds.
    pub dt: f64,
    /// Zero-padding appended after each pulse, seconds.
    pub buffer_after: f64,
    /// Propagator substeps per sample interval.
    pub substeps: usize,
    /// Flux bias the device idles at between pulses.
    pub idle_flux: f64,
}

impl Default for OrbitConfig {
    fn default() -> Self {
        OrbitConfig {
            sequences: 80,
            shots: 128,
            threshold: 0.2,
            n0: 2,
            sq_depolarizing: 0.0,
            cz_depolarizing: 0.0,
            readout_error: 0.0,
            dt: 0.5e-9,
            buffer_after: 0.0,
            substeps: 10,
            // ZZ-free bias of the default device; the config layer resolves
            // it from the spectrum when loading a run file.
            idle_flux: 0.33145,
        }
    }
}

impl OrbitConfig {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        let bad = |m: &str| Err(CalibrationError::Invalid(m.into()));
        if self.sequences < 1 {
            return bad("need at least one sequence");
        }
        if self.shots < 1 {
            return bad("need at least one shot");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        if self.n0 < 1 {
            return bad("n0 must be at least 1");
        }
        for (v, name) in [
            (self.sq_depolarizing, "sq_depolarizing"),
            (self.cz_depolarizing, "cz_depolarizing"),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if !(0.0..=0.5).contains(&self.readout_error) {
            return bad("readout_error must lie in [0, 0.5]");
        }
        if !(self.dt > 0.0) || self.buffer_after < 0.0 {
            return bad("bad sampling grid");
        }
        if self.substeps < 1 {
            return bad("substeps must be at least 1");
        }
        if !self.idle_flux.is_finite() {
            return bad("idle_flux must be finite");
        }
        Ok(())
    }

    /// One-sigma shot noise of the mean cost, the natural resolution limit
    /// of a single evaluation (binomial worst case p = 1/2).
    pub fn cost_noise_sigma(&self) -> f64 {
        (0.25 / (self.shots as f64 * self.sequences as f64)).sqrt()
    }
}

// ---------------------------------------------------------------------------
// device-backed sequence evaluator

/// Sequence simulator with the candidate CZ realized on the full device.
///
/// Gates act on the labeled idle eigenbasis, so the state vector directly
/// stores dressed-level amplitudes: SQ gates are exact 2×2 blocks between
/// the n_q ∈ {0, 1} labels, the CZ is the propagated waveform folded into
/// that frame (all 36 levels, leakage included), and measurement reads the
/// total qubit-0 ground population.
pub struct DeviceOrbitEvaluator {
    dim: usize,
    /// Label-frame CZ with the virtual-Z correction folded in.
    cz: DMatrix<C64>,
    /// Gate realized from two back-to-back pulses through the same line;
    /// differs from cz² exactly by the line's memory across the boundary.
    cz_pair: Option<DMatrix<C64>>,
    /// Index pairs (n_q = 0, n_q = 1) at fixed other labels, per qubit.
    sq_pairs: [Vec<(usize, usize)>; 2],
    /// Label indices with qubit 0 in its ground state.
    ground_idx: Vec<usize>,
    sq_depolarizing: f64,
    cz_depolarizing: f64,
    readout_error: f64,
}

/// Send a pulse down the line: predistortion first (it runs in the AWG),
/// then the physical distortion chain.
fn deliver(
    wf: &Waveform,
    pre: Option<&Predistortion>,
    chain: Option<&DistortionChain>,
) -> Result<Waveform, SignalError> {
    let sent = match pre {
        Some(p) => apply_predistortion(wf, p)?,
        None => wf.clone(),
    };
    match chain {
        Some(c) => apply_chain(&sent, c),
        None => Ok(sent),
    }
}

/// Propagate a delivered waveform and express it in the rotating labeled
/// eigenframe of the idle device, with virtual-Z phases (φ1, φ2) applied.
fn realize_label_gate(
    dev: &DeviceParams,
    wf: &Waveform,
    idle_flux: f64,
    substeps: usize,
    vz: (f64, f64),
) -> Result<DMatrix<C64>, CalibrationError> {
    let u = propagate(dev, wf, idle_flux, substeps)?;
    let spec = labeled_spectrum(dev, idle_flux, None)?;
    let dim = dev.dim();
    let mut basis = DMatrix::<C64>::zeros(dim, dim);
    for idx in 0..dim {
        basis.set_column(idx, &spec.vector(dev, dev.label_of(idx)));
    }
    let mut g = basis.ad_mul(&(u * &basis));
    let t = wf.duration();
    for a in 0..dim {
        let label = dev.label_of(a);
        // frame unwind plus the virtual-Z ladder phase per excitation
        let phase = spec.energy(dev, label) * t
            + vz.0 * label.n1 as f64
            + vz.1 * label.n2 as f64;
        let row = C64::from_polar(1.0, phase);
        for b in 0..dim {
            g[(a, b)] *= row;
        }
    }
    Ok(g)
}

impl DeviceOrbitEvaluator {
    /// Evaluator for the plain ORBIT cost (no interleaved pairs).
    pub fn new(
        dev: &DeviceParams,
        chain: Option<&DistortionChain>,
        pulse: &PulseParams,
        cfg: &OrbitConfig,
    ) -> Result<Self, CalibrationError> {
        Self::build(dev, chain, None, pulse, cfg, false)
    }

    /// Evaluator that also realizes the two-pulse gate needed when sequences
    /// interleave CZ pairs (the line keeps its state across the boundary).
    pub fn with_line(
        dev: &DeviceParams,
        chain: Option<&DistortionChain>,
        pre: Option<&Predistortion>,
        pulse: &PulseParams,
        cfg: &OrbitConfig,
    ) -> Result<Self, CalibrationError> {
        Self::build(dev, chain, pre, pulse, cfg, true)
    }

    fn build(
        dev: &DeviceParams,
        chain: Option<&DistortionChain>,
        pre: Option<&Predistortion>,
        pulse: &PulseParams,
        cfg: &OrbitConfig,
        with_pair: bool,
    ) -> Result<Self, CalibrationError> {
        cfg.validate()?;
        let vz = pulse.virtual_z();
        let wf = pulse.sample(cfg.dt, cfg.buffer_after)?;
        let single = deliver(&wf, pre, chain)?;
        let cz = realize_label_gate(dev, &single, cfg.idle_flux, cfg.substeps, vz)?;
        let cz_pair = if with_pair {
            let pair = deliver(&wf.concat(&wf), pre, chain)?;
            // two virtual-Z frames, one per pulse
            let g = realize_label_gate(
                dev,
                &pair,
                cfg.idle_flux,
                cfg.substeps,
                (2.0 * vz.0, 2.0 * vz.1),
            )?;
            Some(g)
        } else {
            None
        };

        let dim = dev.dim();
        let lq = dev.n_qubit_levels as u8;
        let lc = dev.n_coupler_levels as u8;
        let mut sq_pairs = [Vec::new(), Vec::new()];
        for other in 0..lq {
            for nc in 0..lc {
                let at = |n1, n2| dev.index_of(Label { nc, n1, n2 });
                sq_pairs[0].push((at(0, other), at(1, other)));
                sq_pairs[1].push((at(other, 0), at(other, 1)));
            }
        }
        let ground_idx = (0..dim).filter(|&i| dev.label_of(i).n1 == 0).collect();
        Ok(DeviceOrbitEvaluator {
            dim,
            cz,
            cz_pair,
            sq_pairs,
            ground_idx,
            sq_depolarizing: cfg.sq_depolarizing,
            cz_depolarizing: cfg.cz_depolarizing,
            readout_error: cfg.readout_error,
        })
    }

    pub fn cz_gate(&self) -> &DMatrix<C64> {
        &self.cz
    }

    pub fn cz_pair_gate(&self) -> Option<&DMatrix<C64>> {
        self.cz_pair.as_ref()
    }

    fn needs_density(&self) -> bool {
        self.sq_depolarizing > 0.0 || self.cz_depolarizing > 0.0
    }

    fn apply_sq_state(&self, psi: &mut DVector<C64>, qubit: u8, m: &[[C64; 2]; 2]) {
        for &(i0, i1) in &self.sq_pairs[qubit as usize] {
            let (a, b) = (psi[i0], psi[i1]);
            psi[i0] = m[0][0] * a + m[0][1] * b;
            psi[i1] = m[1][0] * a + m[1][1] * b;
        }
    }

    /// Frame rotation e^{iφ·n_q}: phase 1 on the n_q = 1 labels, double on
    /// the n_q = 2 labels (everything outside the listed pairs).
    fn apply_vz_state(&self, psi: &mut DVector<C64>, qubit: u8, angle: f64) {
        let ph1 = C64::from_polar(1.0, angle);
        let ph2 = C64::from_polar(1.0, 2.0 * angle);
        let mut low = vec![false; self.dim];
        for &(i0, i1) in &self.sq_pairs[qubit as usize] {
            low[i0] = true;
            low[i1] = true;
            psi[i1] *= ph1;
        }
        for i in 0..self.dim {
            if !low[i] {
                psi[i] *= ph2;
            }
        }
    }

    fn apply_cz_state(&self, psi: &mut DVector<C64>, g: &DMatrix<C64>, scratch: &mut DVector<C64>) {
        scratch.gemv(C64::new(1.0, 0.0), g, &*psi, C64::new(0.0, 0.0));
        psi.copy_from(&*scratch);
    }

    fn apply_gate_state(&self, psi: &mut DVector<C64>, gate: &Gate, scratch: &mut DVector<C64>) {
        match *gate {
            Gate::Sq { qubit, kind } => self.apply_sq_state(psi, qubit, &kind.matrix()),
            Gate::VirtualZ { qubit, angle } => self.apply_vz_state(psi, qubit, angle),
            Gate::Cz => self.apply_cz_state(psi, &self.cz, scratch),
        }
    }

    fn survival_state(&self, seq: &RbSequence) -> f64 {
        let group = CliffordGroup::get();
        let mut psi = DVector::<C64>::zeros(self.dim);
        psi[0] = C64::new(1.0, 0.0);
        let mut scratch = DVector::<C64>::zeros(self.dim);
        for &id in &seq.clifford_ids {
            for gate in group.word(id) {
                self.apply_gate_state(&mut psi, &gate, &mut scratch);
            }
            match seq.interleave_count {
                0 => {}
                2 => {
                    let pair = self
                        .cz_pair
                        .as_ref()
                        .expect("interleaved CZ pairs need an evaluator built with_line");
                    self.apply_cz_state(&mut psi, pair, &mut scratch);
                }
                k => {
                    for _ in 0..k {
                        self.apply_cz_state(&mut psi, &self.cz, &mut scratch);
                    }
                }
            }
        }
        for gate in group.word(seq.recovery_id) {
            self.apply_gate_state(&mut psi, &gate, &mut scratch);
        }
        self.ground_idx.iter().map(|&i| psi[i].norm_sqr()).sum()
    }

    // --- density-matrix path (only when a depolarizing model is on) ---

    fn block_conjugate(&self, rho: &mut DMatrix<C64>, qubit: u8, m: &[[C64; 2]; 2]) {
        let pairs = &self.sq_pairs[qubit as usize];
        for &(i0, i1) in pairs {
            for c in 0..self.dim {
                let (a, b) = (rho[(i0, c)], rho[(i1, c)]);
                rho[(i0, c)] = m[0][0] * a + m[0][1] * b;
                rho[(i1, c)] = m[1][0] * a + m[1][1] * b;
            }
        }
        for &(i0, i1) in pairs {
            for r in 0..self.dim {
                let (a, b) = (rho[(r, i0)], rho[(r, i1)]);
                rho[(r, i0)] = a * m[0][0].conj() + b * m[0][1].conj();
                rho[(r, i1)] = a * m[1][0].conj() + b * m[1][1].conj();
            }
        }
    }

    /// Single-qubit depolarizing on the {0, 1} levels of `qubit`:
    /// ρ ← (1 − 3λ/4)ρ + (λ/4)(XρX + YρY + ZρZ) with embedded Paulis.
    fn depolarize_qubit(&self, rho: &mut DMatrix<C64>, qubit: u8, lambda: f64) {
        let o = C64::new(0.0, 0.0);
        let l = C64::new(1.0, 0.0);
        let i = C64::new(0.0, 1.0);
        let paulis = [[[o, l], [l, o]], [[o, -i], [i, o]], [[l, o], [o, -l]]];
        let mut acc = rho.clone() * C64::new(1.0 - 0.75 * lambda, 0.0);
        for p in &paulis {
            let mut term = rho.clone();
            self.block_conjugate(&mut term, qubit, p);
            acc += term * C64::new(0.25 * lambda, 0.0);
        }
        rho.copy_from(&acc);
    }

    /// Two-qubit depolarizing on the computational levels:
    /// ρ ← (1 − λ)ρ + (λ/16) Σ_{P ∈ {I,X,Y,Z}⊗2} PρP.
    fn depolarize_cz(&self, rho: &mut DMatrix<C64>, lambda: f64) {
        let o = C64::new(0.0, 0.0);
        let l = C64::new(1.0, 0.0);
        let i = C64::new(0.0, 1.0);
        let paulis: [Option<[[C64; 2]; 2]>; 4] =
            [None, Some([[o, l], [l, o]]), Some([[o, -i], [i, o]]), Some([[l, o], [o, -l]])];
        let mut acc = rho.clone() * C64::new(1.0 - lambda, 0.0);
        for p1 in &paulis {
            for p2 in &paulis {
                let mut term = rho.clone();
                if let Some(m) = p1 {
                    self.block_conjugate(&mut term, 0, m);
                }
                if let Some(m) = p2 {
                    self.block_conjugate(&mut term, 1, m);
                }
                acc += term * C64::new(lambda / 16.0, 0.0);
            }
        }
        rho.copy_from(&acc);
    }

    fn apply_cz_density(&self, rho: &mut DMatrix<C64>, times: u32) {
        for _ in 0..times {
            *rho = &self.cz * &*rho * self.cz.adjoint();
            if self.cz_depolarizing > 0.0 {
                self.depolarize_cz(rho, self.cz_depolarizing);
            }
        }
    }

    fn word_density(&self, rho: &mut DMatrix<C64>, word: &[Gate]) {
        for gate in word {
            match *gate {
                Gate::Sq { qubit, kind } => {
                    self.block_conjugate(rho, qubit, &kind.matrix());
                    if self.sq_depolarizing > 0.0 {
                        self.depolarize_qubit(rho, qubit, self.sq_depolarizing);
                    }
                }
                Gate::VirtualZ { qubit, angle } => {
                    let c = C64::from_polar(1.0, angle);
                    let m = [
                        [C64::new(1.0, 0.0), C64::new(0.0, 0.0)],
                        [C64::new(0.0, 0.0), c],
                    ];
                    // pairs cover n_q ∈ {0,1}; n_q = 2 rows pick up 2φ
                    self.block_conjugate(rho, qubit, &m);
                    let mut low = vec![false; self.dim];
                    for &(i0, i1) in &self.sq_pairs[qubit as usize] {
                        low[i0] = true;
                        low[i1] = true;
                    }
                    let ph2 = C64::from_polar(1.0, 2.0 * angle);
                    for idx in 0..self.dim {
                        if low[idx] {
                            continue;
                        }
                        for cc in 0..self.dim {
                            rho[(idx, cc)] *= ph2;
                        }
                        for rr in 0..self.dim {
                            rho[(rr, idx)] *= ph2.conj();
                        }
                    }
                }
                Gate::Cz => self.apply_cz_density(rho, 1),
            }
        }
    }

    fn survival_density(&self, seq: &RbSequence) -> f64 {
        let group = CliffordGroup::get();
        let mut rho = DMatrix::<C64>::zeros(self.dim, self.dim);
        rho[(0, 0)] = C64::new(1.0, 0.0);
        for &id in &seq.clifford_ids {
            self.word_density(&mut rho, &group.word(id));
            match seq.interleave_count {
                0 => {}
                2 => {
                    let pair = self
                        .cz_pair
                        .as_ref()
                        .expect("interleaved CZ pairs need an evaluator built with_line");
                    rho = pair * &rho * pair.adjoint();
                    if self.cz_depolarizing > 0.0 {
                        // per-gate noise: the pair carries two CZs
                        self.depolarize_cz(&mut rho, self.cz_depolarizing);
                        self.depolarize_cz(&mut rho, self.cz_depolarizing);
                    }
                }
                k => self.apply_cz_density(&mut rho, k),
            }
        }
        self.word_density(&mut rho, &group.word(seq.recovery_id));
        self.ground_idx.iter().map(|&i| rho[(i, i)].re).sum()
    }

    /// Exact qubit-0 ground-state return probability, readout error applied.
    pub fn survival_exact(&self, seq: &RbSequence) -> f64 {
        let p = if self.needs_density() {
            self.survival_density(seq)
        } else {
            self.survival_state(seq)
        };
        (1.0 - self.readout_error) * p + self.readout_error * (1.0 - p)
    }

    /// ORBIT cost over a fixed sequence set with per-sequence shot streams.
    /// `expected_hash` guards that every candidate in an evolution scores
    /// the same sequences.
    pub fn cost(
        &self,
        seqs: &[RbSequence],
        shots: u32,
        seed: u64,
        evolution: u64,
        candidate: u64,
        expected_hash: Option<u64>,
    ) -> f64 {
        if let Some(h) = expected_hash {
            assert_eq!(sequence_hash(seqs), h, "sequence set changed mid-evolution");
        }
        let mut acc = 0.0;
        for (s, seq) in seqs.iter().enumerate() {
            let p = self.survival_exact(seq);
            let mut rng = split_rng(seed, &[DOMAIN_SHOTS, evolution, candidate, s as u64]);
            acc += sampled_survival(p, shots, &mut rng);
        }
        1.0 - acc / seqs.len() as f64
    }
}

impl RbBackend for DeviceOrbitEvaluator {
    fn survival(&self, seq: &RbSequence) -> f64 {
        self.survival_exact(seq)
    }
}

/// Order-sensitive digest of a sequence set.
pub fn sequence_hash(seqs: &[RbSequence]) -> u64 {
    let mut h = DefaultHasher::new();
    for s in seqs {
        s.to_line().hash(&mut h);
    }
    h.finish()
}

/// Mean (single-qubit, CZ) gate counts per sequence, recovery included.
pub fn report_gate_counts(seqs: &[RbSequence]) -> (f64, f64) {
    let mut sq = 0usize;
    let mut cz = 0usize;
    for s in seqs {
        for g in &s.gates {
            match g {
                Gate::Sq { .. } => sq += 1,
                Gate::Cz => cz += 1,
                Gate::VirtualZ { .. } => {}
            }
        }
    }
    let m = seqs.len().max(1) as f64;
    (sq as f64 / m, cz as f64 / m)
}

/// Score one candidate pulse: realize its CZ on the device and run the
/// ORBIT cost. Any failure (invalid parameters, flux out of range) maps to
/// an infinite cost, which the optimizer ranks last.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_candidate(
    dev: &DeviceParams,
    chain: Option<&DistortionChain>,
    pulse: &PulseParams,
    seqs: &[RbSequence],
    cfg: &OrbitConfig,
    seed: u64,
    evolution: u64,
    candidate: u64,
    expected_hash: Option<u64>,
) -> Result<f64, CalibrationError> {
    let eval = DeviceOrbitEvaluator::new(dev, chain, pulse, cfg)?;
    Ok(eval.cost(seqs, cfg.shots, seed, evolution, candidate, expected_hash))
}

// ---------------------------------------------------------------------------
// synthetic wall-clock model

/// Bookkeeping model for experiment wall time. Nothing here affects the
/// physics; the constants are knobs so reports can mirror a real rig, and
/// the defaults are representative cryostat numbers.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TimingModel {
    /// Qubit reset before each shot, seconds.
    pub reset: f64,
    /// Readout per shot, seconds.
    pub readout: f64,
    /// Single-qubit gate duration, seconds.
    pub sq_gate: f64,
    /// CZ gate duration, seconds.
    pub cz_gate: f64,
    /// Compile + upload per sequence, seconds.
    pub compile_per_sequence: f64,
    /// Optimizer round trip per evolution, seconds.
    pub round_trip: f64,
}

impl Default for TimingModel {
    fn default() -> Self {
        TimingModel {
            reset: 250e-6,
            readout: 1e-6,
            sq_gate: 25e-9,
            cz_gate: 60e-9,
            compile_per_sequence: 10e-3,
            round_trip: 3.0,
        }
    }
}

impl TimingModel {
    /// Synthetic seconds for one evolution of `pop` candidates.
    pub fn evolution_seconds(
        &self,
        pop: usize,
        cfg: &OrbitConfig,
        sq_per_seq: f64,
        cz_per_seq: f64,
    ) -> f64 {
        let shot =
            self.reset + self.readout + sq_per_seq * self.sq_gate + cz_per_seq * self.cz_gate;
        let per_candidate =
            cfg.sequences as f64 * (cfg.shots as f64 * shot + self.compile_per_sequence);
        pop as f64 * per_candidate + self.round_trip
    }
}

// ---------------------------------------------------------------------------
// the closed loop

/// Everything the calibration loop needs besides the device and the line.
#[derive(Debug, Clone)]
pub struct CalibrationConfig {
    pub orbit: OrbitConfig,
    pub family: PulseFamily,
    /// Harmonic / node count for the variable-length pulse families.
    pub shape_terms: usize,
    pub space: SearchSpace,
    /// None picks the dimension default 4 + ⌊4 ln D⌉.
    pub population: Option<usize>,
    pub max_evolutions: usize,
    /// Evolutions the mean cost must stay flat for before stopping.
    pub termination_window: usize,
    /// Flatness tolerance; None uses the shot-noise sigma of the cost.
    pub termination_tol: Option<f64>,
    pub timing: TimingModel,
    pub seed: u64,
}

impl CalibrationConfig {
    pub fn new(family: PulseFamily, shape_terms: usize, space: SearchSpace, seed: u64) -> Self {
        CalibrationConfig {
            orbit: OrbitConfig::default(),
            family,
            shape_terms,
            space,
            population: None,
            max_evolutions: 150,
            termination_window: 12,
            termination_tol: None,
            timing: TimingModel::default(),
            seed,
        }
    }
}

/// One optimizer generation as scored on the device.
#[derive(Debug, Clone, Serialize)]
pub struct EvolutionRecord {
    pub evolution: usize,
    /// Sequence length the costs were measured at.
    pub n: u32,
    pub seq_hash: u64,
    pub mean_cost: f64,
    pub min_cost: f64,
    /// mean_cost / n, the per-Clifford error scale the loop ratchets on.
    pub normalized_mean: f64,
    /// Physical parameters of this evolution's best candidate.
    pub best_params: Vec<f64>,
    pub sigma: f64,
    pub failures: usize,
    pub sq_per_seq: f64,
    pub cz_per_seq: f64,
    /// Synthetic wall-clock cost of the evolution, seconds.
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimizationOutcome {
    /// Physical parameter vector of the winner.
    pub best_params: Vec<f64>,
    pub best_cost: f64,
    pub best_evolution: usize,
    pub final_n: u32,
    pub evolutions: Vec<EvolutionRecord>,
    /// True when the steady-cost criterion fired (vs the budget running out).
    pub terminated: bool,
    pub synthetic_seconds: f64,
    /// Final optimizer state, versioned JSON.
    pub checkpoint: String,
}

impl OptimizationOutcome {
    pub fn best_pulse(
        &self,
        family: PulseFamily,
        shape_terms: usize,
    ) -> Result<PulseParams, CalibrationError> {
        Ok(PulseParams::from_vector(family, shape_terms, &self.best_params)?)
    }
}

/// Closed-loop pulse calibration against the simulated device.
///
/// Per evolution: ask the optimizer for a population, score every candidate
/// on one shared sequence set, feed the costs back, and if the mean cost
/// fell below the threshold lengthen the sequences by one Clifford and draw
/// a fresh set. The reported winner is the lowest single cost seen since
/// the last length change, never across one, because costs at different N
/// measure different things.
pub fn run_optimization(
    dev: &DeviceParams,
    chain: Option<&DistortionChain>,
    cfg: &CalibrationConfig,
    ctx: &Parallelism,
) -> Result<OptimizationOutcome, CalibrationError> {
    cfg.orbit.validate()?;
    if cfg.max_evolutions < 1 {
        return Err(CalibrationError::Invalid("need at least one evolution".into()));
    }
    let tol = cfg.termination_tol.unwrap_or_else(|| cfg.orbit.cost_noise_sigma());
    let mut es = CmaEs::from_space(&cfg.space, cfg.population)?;
    let mut ask_rng = split_rng(cfg.seed, &[DOMAIN_ASK]);

    let mut n = cfg.orbit.n0;
    let mut seqs = build_rb_sequences(
        n,
        cfg.orbit.sequences,
        0,
        &mut split_rng(cfg.seed, &[DOMAIN_SEQUENCES, n as u64]),
    )?;
    let mut seq_hash = sequence_hash(&seqs);

    let mut records: Vec<EvolutionRecord> = Vec::new();
    let mut mean_history: Vec<f64> = Vec::new(); // since the last length change
    let mut best: Option<(f64, Vec<f64>, usize)> = None; // ditto
    let mut terminated = false;
    let mut total_seconds = 0.0;

    for k in 0..cfg.max_evolutions {
        let unit = es.ask(&mut ask_rng);
        let pop = unit.len();
        let physical: Vec<Vec<f64>> =
            unit.iter().map(|u| cfg.space.denormalize(u)).collect::<Result<_, _>>()?;

        let seq_ref = &seqs;
        let phys_ref = &physical;
        let costs: Vec<f64> = ctx.map(pop, |j| {
            let pulse = match PulseParams::from_vector(cfg.family, cfg.shape_terms, &phys_ref[j]) {
                Ok(p) => p,
                Err(_) => return f64::INFINITY,
            };
            evaluate_candidate(
                dev,
                chain,
                &pulse,
                seq_ref,
                &cfg.orbit,
                cfg.seed,
                k as u64,
                j as u64,
                Some(seq_hash),
            )
            .unwrap_or(f64::INFINITY)
        });
        es.tell(&unit, &costs)?;

        let failures = costs.iter().filter(|c| !c.is_finite()).count();
        let mean_cost = if failures == pop {
            f64::INFINITY
        } else {
            costs.iter().filter(|c| c.is_finite()).sum::<f64>() / (pop - failures) as f64
        };
        let (argmin, &min_cost) = costs
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
            .expect("non-empty population");
        if min_cost.is_finite() && best.as_ref().is_none_or(|b| min_cost < b.0) {
            best = Some((min_cost, physical[argmin].clone(), k));
        }

        let (sq_per_seq, cz_per_seq) = report_gate_counts(&seqs);
        let seconds = cfg.timing.evolution_seconds(pop, &cfg.orbit, sq_per_seq, cz_per_seq);
        total_seconds += seconds;
        records.push(EvolutionRecord {
            evolution: k,
            n,
            seq_hash,
            mean_cost,
            min_cost,
            normalized_mean: mean_cost / n as f64,
            best_params: physical[argmin].clone(),
            sigma: es.sigma(),
            failures,
            sq_per_seq,
            cz_per_seq,
            seconds,
        });
        mean_history.push(mean_cost);

        if mean_cost < cfg.orbit.threshold {
            // the pulse outgrew this sequence length: re-aim the cost
            n += 1;
            seqs = build_rb_sequences(
                n,
                cfg.orbit.sequences,
                0,
                &mut split_rng(cfg.seed, &[DOMAIN_SEQUENCES, n as u64]),
            )?;
            seq_hash = sequence_hash(&seqs);
            mean_history.clear();
            best = None;
        } else if should_terminate(&mean_history, cfg.termination_window, tol) {
            terminated = true;
            break;
        }
    }

    // if the ratchet fired on the very last evolution there is no candidate
    // since the boundary; fall back to that evolution's own winner
    let (best_cost, best_params, best_evolution) = match best {
        Some(b) => b,
        None => {
            let last = records.last().expect("at least one evolution ran");
            if !last.min_cost.is_finite() {
                return Err(CalibrationError::Invalid(
                    "no candidate produced a finite cost".into(),
                ));
            }
            (last.min_cost, last.best_params.clone(), last.evolution)
        }
    };

    Ok(OptimizationOutcome {
        best_params,
        best_cost,
        best_evolution,
        final_n: n,
        evolutions: records,
        terminated,
        synthetic_seconds: total_seconds,
        checkpoint: es.checkpoint(),
    })
}

// ---------------------------------------------------------------------------
// coarse seeding

/// Cheap starting point for the loop: bisect the pulse amplitude until the
/// adiabatic conditional phase reaches π, then zero the accumulated
/// single-qubit phases with one propagation. Lands inside the CZ basin;
/// the closed loop does the rest.
pub fn coarse_cz_seed(
    dev: &DeviceParams,
    template: &PulseParams,
    cfg: &OrbitConfig,
    amp_lo: f64,
    amp_hi: f64,
) -> Result<PulseParams, CalibrationError> {
    cfg.validate()?;
    let width = template.width();
    let phase_gap = |amp: f64| -> Result<f64, CalibrationError> {
        let wf = template.with_width_amplitude(width, amp).sample(cfg.dt, 0.0)?;
        Ok(adiabatic_phase(dev, &wf, cfg.idle_flux)?.abs() - std::f64::consts::PI)
    };
    // bracket: |phase| grows with drive amplitude toward the resonance
    let mut lo = amp_lo;
    let mut f_lo = phase_gap(lo)?;
    let mut hi = f64::NAN;
    let scan = 16;
    for i in 1..=scan {
        let a = amp_lo + (amp_hi - amp_lo) * i as f64 / scan as f64;
        let f = phase_gap(a)?;
        if f_lo <= 0.0 && f > 0.0 {
            hi = a;
            break;
        }
        lo = a;
        f_lo = f;
    }
    if !hi.is_finite() {
        return Err(CalibrationError::Invalid(
            "conditional phase never reaches pi in the amplitude window".into(),
        ));
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if phase_gap(mid)? <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let amp = 0.5 * (lo + hi);
    let mut seeded = template.with_width_amplitude(width, amp);
    let wf = seeded.sample(cfg.dt, 0.0)?;
    let u = propagate(dev, &wf, cfg.idle_flux, cfg.substeps)?;
    let g = extract_gate(&u, dev, cfg.idle_flux, wf.duration())?;
    seeded.set_virtual_z(-g.phi1_acc, -g.phi2_acc);
    Ok(seeded)
}

// ---------------------------------------------------------------------------
// consecutive-CZ stress test

/// Interleaved-RB comparison of one CZ per slot against two back-to-back.
#[derive(Debug, Clone)]
pub struct StressReport {
    pub single: IrbResult,
    pub pair: IrbResult,
    /// Per-gate error ratio pair / single; line memory pushes it up.
    pub ratio: f64,
}

/// Measure how much the line's memory couples consecutive CZ pulses: run
/// interleaved RB with one CZ per slot and with two back-to-back, through
/// the given line (`pre` = predistortion in front of it, if any). The pair
/// slot is realized from the concatenated waveform, so IIR state carries
/// across the pulse boundary exactly as it would in the instrument.
pub fn consecutive_cz_stress(
    dev: &DeviceParams,
    pulse: &PulseParams,
    chain: Option<&DistortionChain>,
    pre: Option<&Predistortion>,
    cfg: &OrbitConfig,
    ns: &[u32],
    seed: u64,
) -> Result<StressReport, CalibrationError> {
    let eval = DeviceOrbitEvaluator::with_line(dev, chain, pre, pulse, cfg)?;
    let mut rng_single = split_rng(seed, &[DOMAIN_STRESS, 1]);
    let single = run_irb(&eval, ns, cfg.sequences, cfg.shots, 1, &mut rng_single)?;
    let mut rng_pair = split_rng(seed, &[DOMAIN_STRESS, 2]);
    let pair = run_irb(&eval, ns, cfg.sequences, cfg.shots, 2, &mut rng_pair)?;
    let ratio = pair.epsilon_cz / single.epsilon_cz;
    Ok(StressReport { single, pair, ratio })
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmaes::ParamRange;
    use crate::pulse::GaussianSquareParams;
    use rand::Rng;
    use std::sync::OnceLock;

    fn dev() -> DeviceParams {
        DeviceParams::default()
    }

    /// Template at roughly half the CZ conditional phase; handy where gate
    /// quality does not matter.
    fn gs_template() -> PulseParams {
        PulseParams::GaussianSquare(GaussianSquareParams {
            amplitude: 0.085,
            width: 50e-9,
            rise_time: 8e-9,
            phi1: 0.0,
            phi2: 0.0,
        })
    }

    fn fast_cfg() -> OrbitConfig {
        OrbitConfig { dt: 1e-9, substeps: 4, sequences: 8, shots: 64, ..OrbitConfig::default() }
    }

    /// Amplitude-seeded CZ shared across tests (one bisection, cached).
    fn seeded_pulse() -> &'static PulseParams {
        static CACHE: OnceLock<PulseParams> = OnceLock::new();
        CACHE.get_or_init(|| {
            coarse_cz_seed(&dev(), &gs_template(), &fast_cfg(), 0.04, 0.15).unwrap()
        })
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let ok = OrbitConfig::default();
        ok.validate().unwrap();
        for f in [
            OrbitConfig { sequences: 0, ..ok.clone() },
            OrbitConfig { shots: 0, ..ok.clone() },
            OrbitConfig { threshold: 0.0, ..ok.clone() },
            OrbitConfig { threshold: 1.0, ..ok.clone() },
            OrbitConfig { n0: 0, ..ok.clone() },
            OrbitConfig { sq_depolarizing: -0.1, ..ok.clone() },
            OrbitConfig { cz_depolarizing: 1.5, ..ok.clone() },
            OrbitConfig { readout_error: 0.6, ..ok.clone() },
            OrbitConfig { dt: 0.0, ..ok.clone() },
            OrbitConfig { substeps: 0, ..ok.clone() },
        ] {
            assert!(f.validate().is_err());
        }
    }

    #[test]
    fn split_rng_is_deterministic_and_path_sensitive() {
        let a: u64 = split_rng(7, &[0, 1, 2, 3]).random();
        let b: u64 = split_rng(7, &[0, 1, 2, 3]).random();
        let c: u64 = split_rng(7, &[0, 1, 2, 4]).random();
        let d: u64 = split_rng(8, &[0, 1, 2, 3]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn sequence_hash_tracks_content() {
        let mut rng = split_rng(1, &[9]);
        let s1 = build_rb_sequences(3, 5, 0, &mut rng).unwrap();
        let s2 = build_rb_sequences(3, 5, 0, &mut rng).unwrap();
        assert_eq!(sequence_hash(&s1), sequence_hash(&s1));
        assert_ne!(sequence_hash(&s1), sequence_hash(&s2));
    }

    #[test]
    fn gate_counts_match_the_decomposition_table() {
        // recovery adds one Clifford, so expect the exact table means × (N+1)
        let (n_sq, n_cz) = CliffordGroup::get().exact_gate_means();
        let n = 60u32;
        let mut rng = split_rng(2, &[0]);
        let seqs = build_rb_sequences(n, 200, 0, &mut rng).unwrap();
        let (sq, cz) = report_gate_counts(&seqs);
        let words = (n + 1) as f64;
        assert!((sq / words - n_sq).abs() < 0.02 * n_sq, "sq mean {sq}");
        assert!((cz / words - n_cz).abs() < 0.02 * n_cz, "cz mean {cz}");
    }

    /// Computational-label diagonal of a label-frame gate, as a conditional
    /// phase: arg g00 + arg g11 − arg g01 − arg g10.
    fn comp_phi_zz(dev: &DeviceParams, g: &DMatrix<C64>) -> f64 {
        let at = |n1, n2| dev.index_of(Label { nc: 0, n1, n2 });
        crate::fit::wrap_angle(
            g[(at(0, 0), at(0, 0))].arg() + g[(at(1, 1), at(1, 1))].arg()
                - g[(at(0, 1), at(0, 1))].arg()
                - g[(at(1, 0), at(1, 0))].arg(),
        )
    }

    #[test]
    fn pair_gate_factorizes_on_the_computational_block_without_line_memory() {
        // Far leakage levels mix strongly during the pulse and their frame
        // phases depend on where the gate starts, so the full 36×36 matrices
        // need not factorize. What must: the computational diagonal (twice
        // the conditional phase) and the survival of any sequence up to
        // second order in leakage.
        let cfg = fast_cfg();
        let d = dev();
        let mut eval =
            DeviceOrbitEvaluator::with_line(&d, None, None, &gs_template(), &cfg).unwrap();
        let phi_single = comp_phi_zz(&d, eval.cz_gate());
        let phi_pair = comp_phi_zz(&d, eval.cz_pair_gate().unwrap());
        let gap = crate::fit::wrap_angle(phi_pair - 2.0 * phi_single).abs();
        assert!(gap < 5e-3, "pair conditional phase off by {gap}");

        let mut rng = split_rng(21, &[0]);
        let seqs = build_rb_sequences(3, 6, 2, &mut rng).unwrap();
        let real: Vec<f64> = seqs.iter().map(|s| eval.survival_exact(s)).collect();
        // substitute the composed gate for the propagated pair
        eval.cz_pair = Some(eval.cz_gate() * eval.cz_gate());
        for (seq, p) in seqs.iter().zip(&real) {
            let q = eval.survival_exact(seq);
            assert!((p - q).abs() < 1e-3, "memoryless survivals diverged: {p} vs {q}");
        }
    }

    #[test]
    fn line_memory_breaks_pair_factorization() {
        let cfg = fast_cfg();
        let chain = DistortionChain::flux_line_default(cfg.dt);
        let eval =
            DeviceOrbitEvaluator::with_line(&dev(), Some(&chain), None, &gs_template(), &cfg)
                .unwrap();
        let err = (eval.cz_pair_gate().unwrap() - eval.cz_gate() * eval.cz_gate()).camax();
        assert!(err > 1e-3, "distortion tails should couple the pulses, got {err}");
    }

    #[test]
    fn survival_is_high_for_a_seeded_pulse() {
        let cfg = fast_cfg();
        let eval = DeviceOrbitEvaluator::new(&dev(), None, seeded_pulse(), &cfg).unwrap();
        let mut rng = split_rng(3, &[0]);
        let seqs = build_rb_sequences(2, 6, 0, &mut rng).unwrap();
        for seq in &seqs {
            let p = eval.survival_exact(seq);
            assert!((0.0..=1.0 + 1e-12).contains(&p));
            assert!(p > 0.8, "N = 2 survival collapsed: {p}");
        }
    }

    #[test]
    fn density_path_agrees_with_state_path_at_zero_noise() {
        let cfg = fast_cfg();
        let eval = DeviceOrbitEvaluator::new(&dev(), None, &gs_template(), &cfg).unwrap();
        let mut forced = DeviceOrbitEvaluator::new(&dev(), None, &gs_template(), &cfg).unwrap();
        forced.sq_depolarizing = 1e-300; // flips to the density path, no real noise
        let mut rng = split_rng(4, &[0]);
        let seqs = build_rb_sequences(3, 4, 0, &mut rng).unwrap();
        for seq in &seqs {
            let a = eval.survival_exact(seq);
            let b = forced.survival_exact(seq);
            assert!((a - b).abs() < 1e-9, "paths disagree: {a} vs {b}");
        }
    }

    #[test]
    fn cz_depolarizing_strictly_raises_the_cost() {
        let cfg = fast_cfg();
        let noisy_cfg = OrbitConfig { cz_depolarizing: 0.1, ..fast_cfg() };
        let clean = DeviceOrbitEvaluator::new(&dev(), None, seeded_pulse(), &cfg).unwrap();
        let noisy = DeviceOrbitEvaluator::new(&dev(), None, seeded_pulse(), &noisy_cfg).unwrap();
        let mut rng = split_rng(5, &[0]);
        let seqs = build_rb_sequences(2, 8, 0, &mut rng).unwrap();
        let mean = |e: &DeviceOrbitEvaluator| {
            1.0 - seqs.iter().map(|s| e.survival_exact(s)).sum::<f64>() / seqs.len() as f64
        };
        let (e0, e1) = (mean(&clean), mean(&noisy));
        assert!(e1 > e0 + 0.01, "depolarized CZ must cost more: {e0} vs {e1}");
    }

    #[test]
    fn readout_error_pulls_toward_coin_flip() {
        let cfg = OrbitConfig { readout_error: 0.5, ..fast_cfg() };
        let eval = DeviceOrbitEvaluator::new(&dev(), None, &gs_template(), &cfg).unwrap();
        let mut rng = split_rng(6, &[0]);
        let seqs = build_rb_sequences(2, 3, 0, &mut rng).unwrap();
        for seq in &seqs {
            assert!((eval.survival_exact(seq) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn cost_is_reproducible_and_splits_candidate_streams() {
        let cfg = fast_cfg();
        let eval = DeviceOrbitEvaluator::new(&dev(), None, &gs_template(), &cfg).unwrap();
        let mut rng = split_rng(7, &[0]);
        let seqs = build_rb_sequences(2, 6, 0, &mut rng).unwrap();
        let h = sequence_hash(&seqs);
        let a = eval.cost(&seqs, 64, 11, 0, 0, Some(h));
        let b = eval.cost(&seqs, 64, 11, 0, 0, Some(h));
        let c = eval.cost(&seqs, 64, 11, 0, 1, Some(h));
        assert_eq!(a.to_bits(), b.to_bits());
        assert_ne!(a.to_bits(), c.to_bits(), "candidate streams must differ");
    }

    #[test]
    fn timing_model_scales_with_workload() {
        let t = TimingModel::default();
        let cfg = OrbitConfig::default();
        let one = t.evolution_seconds(1, &cfg, 20.0, 4.0);
        let ten = t.evolution_seconds(10, &cfg, 20.0, 4.0);
        assert!(ten > 9.0 * (one - t.round_trip));
        assert!(one > 0.0);
    }

    #[test]
    fn coarse_seed_lands_near_the_conditional_phase_target() {
        let cfg = fast_cfg();
        let seeded = seeded_pulse();
        let wf = seeded.sample(cfg.dt, 0.0).unwrap();
        let u = propagate(&dev(), &wf, cfg.idle_flux, cfg.substeps).unwrap();
        let g = extract_gate(&u, &dev(), cfg.idle_flux, wf.duration()).unwrap();
        assert!(
            (g.phi_zz.abs() - std::f64::consts::PI).abs() < 0.3,
            "seed conditional phase {}",
            g.phi_zz
        );
        // virtual-Z seeding cancels the accumulated single-qubit phases
        let gz =
            crate::propagator::apply_virtual_z(&g, seeded.virtual_z().0, seeded.virtual_z().1);
        assert!(gz.phi1_acc.abs() < 1e-6 && gz.phi2_acc.abs() < 1e-6);
    }

    fn tiny_space(center: &PulseParams) -> SearchSpace {
        // amplitude and the two virtual-Z angles move; width and rise are
        // pinned by hair-thin ranges
        let v = center.parameter_vector();
        let pin = |x: f64| ParamRange {
            lower: x - 1e-12,
            upper: x + 1e-12,
            initial: x,
            spread: 1e-13,
        };
        SearchSpace::new(vec![
            ParamRange { lower: v[0] - 0.01, upper: v[0] + 0.01, initial: v[0], spread: 0.003 },
            pin(v[1]),
            pin(v[2]),
            ParamRange { lower: v[3] - 0.5, upper: v[3] + 0.5, initial: v[3], spread: 0.15 },
            ParamRange { lower: v[4] - 0.5, upper: v[4] + 0.5, initial: v[4], spread: 0.15 },
        ])
        .unwrap()
    }

    #[test]
    fn optimization_loop_runs_ratchets_and_reproduces() {
        let mut cal =
            CalibrationConfig::new(PulseFamily::GaussianSquare, 0, tiny_space(seeded_pulse()), 42);
        cal.orbit = OrbitConfig { sequences: 6, shots: 48, ..fast_cfg() };
        cal.max_evolutions = 4;
        cal.population = Some(6);
        let out = run_optimization(&dev(), None, &cal, &Parallelism::default()).unwrap();
        assert_eq!(out.evolutions.len(), 4);
        assert!(out.best_cost.is_finite());
        assert!(out.best_cost < 0.6);
        // N never decreases and steps by at most one per evolution
        for w in out.evolutions.windows(2) {
            assert!(w[1].n == w[0].n || w[1].n == w[0].n + 1);
        }
        assert!(out.final_n >= cal.orbit.n0);
        assert!(out.synthetic_seconds > 0.0);
        CmaEs::restore(&out.checkpoint).unwrap();

        let again = run_optimization(&dev(), None, &cal, &Parallelism::sequential()).unwrap();
        assert_eq!(out.best_cost.to_bits(), again.best_cost.to_bits());
        assert_eq!(out.best_params, again.best_params);
    }

    #[test]
    fn invalid_candidates_rank_last_and_the_loop_survives() {
        // amplitude range deliberately straddles the flux validity bound, so
        // part of every population is unrealizable
        let space = SearchSpace::new(vec![
            ParamRange { lower: 0.30, upper: 0.70, initial: 0.42, spread: 0.15 },
            ParamRange { lower: 40e-9, upper: 60e-9, initial: 50e-9, spread: 2e-9 },
            ParamRange { lower: 7e-9, upper: 9e-9, initial: 8e-9, spread: 0.5e-9 },
            ParamRange { lower: -0.1, upper: 0.1, initial: 0.0, spread: 0.05 },
            ParamRange { lower: -0.1, upper: 0.1, initial: 0.0, spread: 0.05 },
        ])
        .unwrap();
        let mut cal = CalibrationConfig::new(PulseFamily::GaussianSquare, 0, space, 5);
        cal.orbit = OrbitConfig { sequences: 2, shots: 8, ..fast_cfg() };
        cal.max_evolutions = 3;
        cal.population = Some(8);
        let out = run_optimization(&dev(), None, &cal, &Parallelism::sequential()).unwrap();
        let total_failures: usize = out.evolutions.iter().map(|r| r.failures).sum();
        assert!(total_failures > 0, "expected some candidates past the flux bound");
        assert!(out.best_cost.is_finite());
    }

    #[test]
    fn stress_recovers_an_injected_per_cz_error() {
        // a depolarizing channel on every CZ dominates the coherent error of
        // the seeded pulse, so both interleave counts must report it and the
        // per-gate ratio sits near one (no line, hence no memory)
        let lambda = 0.03;
        let cfg = OrbitConfig {
            sequences: 16,
            shots: 2000,
            cz_depolarizing: lambda,
            ..fast_cfg()
        };
        let report =
            consecutive_cz_stress(&dev(), seeded_pulse(), None, None, &cfg, &[2, 8, 20], 17)
                .unwrap();
        let expected = 0.75 * lambda;
        assert!(
            (report.single.epsilon_cz - expected).abs() < 0.5 * expected,
            "single-CZ error {} vs injected {}",
            report.single.epsilon_cz,
            expected
        );
        assert!(
            report.ratio > 0.5 && report.ratio < 2.0,
            "memoryless per-gate errors should be comparable, ratio {}",
            report.ratio
        );
    }
}

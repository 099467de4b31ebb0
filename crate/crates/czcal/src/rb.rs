//! Randomized-benchmarking sequences, decay fits, interleaved-RB error
//! estimates and the sensitivity model that picks the sequence length.
//!
//! Survival here always means the ground-state population of qubit 0 after
//! the recovery gate: 1 for a perfect sequence, 0.5 for a fully depolarized
//! pair, which fixes the decay model F(N) = A·F_C^N + B around A = B = 0.5.

use nalgebra::{Matrix3, Matrix4, Vector4};
use rand::Rng;
use rand_distr::{Binomial, Distribution};

use crate::clifford::{gate_tableau, CliffordGroup, Gate, Tableau};
use crate::fit::nelder_mead;
use crate::C64;

#[derive(Debug, thiserror::Error)]
pub enum RbError {
    #[error("sequence length must be at least 1")]
    BadLength,
    #[error("decay fit needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("decay data is constant; no decay to fit")]
    DegenerateDecay,
    #[error("reference fidelity is zero")]
    ZeroReference,
}

/// One randomized Clifford sequence with its flattened primitive-gate list.
/// The recovery element is appended so the ideal composition is the identity
/// up to global phase.
#[derive(Clone, Debug)]
pub struct RbSequence {
    pub clifford_ids: Vec<u32>,
    pub recovery_id: u32,
    pub interleaved: bool,
    pub interleave_count: u32,
    pub gates: Vec<Gate>,
}

impl RbSequence {
    /// Line-oriented text form: one primitive gate token per column.
    pub fn to_line(&self) -> String {
        let tokens: Vec<String> = self.gates.iter().map(|g| g.token()).collect();
        tokens.join(" ")
    }

    pub fn from_line(line: &str) -> Result<Vec<Gate>, crate::clifford::CliffordError> {
        line.split_whitespace().map(Gate::from_token).collect()
    }
}

/// Draw `m` random sequences of `n` Cliffords. `interleave_count` CZ gates
/// are inserted after each Clifford when nonzero (1 = standard interleaved
/// RB, 2 = back-to-back pair); they are folded into the recovery computation.
pub fn build_rb_sequences(
    n: u32,
    m: usize,
    interleave_count: u32,
    rng: &mut impl Rng,
) -> Result<Vec<RbSequence>, RbError> {
    if n < 1 {
        return Err(RbError::BadLength);
    }
    let group = CliffordGroup::get();
    let cz_tab = gate_tableau(Gate::Cz);
    let mut seqs = Vec::with_capacity(m);
    for _ in 0..m {
        let mut total = Tableau::identity();
        let mut gates = Vec::new();
        let ids: Vec<u32> = (0..n).map(|_| group.sample(rng)).collect();
        for &id in &ids {
            gates.extend(group.word(id));
            total = total.then(group.tableau(id));
            for _ in 0..interleave_count {
                gates.push(Gate::Cz);
                total = total.then(&cz_tab);
            }
        }
        let recovery_id =
            group.index_of(&total.inverse()).expect("group closed under inversion");
        gates.extend(group.word(recovery_id));
        seqs.push(RbSequence {
            clifford_ids: ids,
            recovery_id,
            interleaved: interleave_count > 0,
            interleave_count,
            gates,
        });
    }
    Ok(seqs)
}

// ---------------------------------------------------------------------------
// simulation backends

/// Anything that can report the qubit-0 ground-state survival probability of
/// a sequence.
pub trait RbBackend: Sync {
    fn survival(&self, seq: &RbSequence) -> f64;
}

/// Exact 4×4 density-matrix simulation with optional depolarizing noise:
/// `sq_depolarizing` applies single-qubit depolarizing (λ) after each SQ
/// gate (F_SQ = 1 − λ/2), `cz_depolarizing` two-qubit depolarizing after
/// each CZ (F_CZ = 1 − 3λ/4).
#[derive(Clone, Copy, Debug, Default)]
pub struct IdealBackend {
    pub sq_depolarizing: f64,
    pub cz_depolarizing: f64,
}

impl IdealBackend {
    fn depolarize_two(rho: &mut Matrix4<C64>, lambda: f64) {
        let tr = rho.trace();
        *rho *= C64::new(1.0 - lambda, 0.0);
        let mix = tr * C64::new(lambda / 4.0, 0.0);
        for k in 0..4 {
            rho[(k, k)] += mix;
        }
    }

    fn depolarize_one(rho: &mut Matrix4<C64>, qubit: u8, lambda: f64) {
        // ρ → (1−λ)ρ + λ (I_q/2 ⊗ Tr_q ρ)
        let mut reduced = [[C64::new(0.0, 0.0); 2]; 2]; // other qubit's marginal
        let idx = |a: usize, o: usize| if qubit == 0 { 2 * a + o } else { 2 * o + a };
        for o1 in 0..2 {
            for o2 in 0..2 {
                for a in 0..2 {
                    reduced[o1][o2] += rho[(idx(a, o1), idx(a, o2))];
                }
            }
        }
        *rho *= C64::new(1.0 - lambda, 0.0);
        let half = C64::new(lambda / 2.0, 0.0);
        for a in 0..2 {
            for o1 in 0..2 {
                for o2 in 0..2 {
                    rho[(idx(a, o1), idx(a, o2))] += half * reduced[o1][o2];
                }
            }
        }
    }
}

impl RbBackend for IdealBackend {
    fn survival(&self, seq: &RbSequence) -> f64 {
        let mut rho = Matrix4::<C64>::zeros();
        rho[(0, 0)] = C64::new(1.0, 0.0);
        for gate in &seq.gates {
            let u = gate.unitary4();
            rho = u * rho * u.adjoint();
            match gate {
                Gate::Sq { qubit, .. } if self.sq_depolarizing > 0.0 => {
                    Self::depolarize_one(&mut rho, *qubit, self.sq_depolarizing);
                }
                Gate::Cz if self.cz_depolarizing > 0.0 => {
                    Self::depolarize_two(&mut rho, self.cz_depolarizing);
                }
                _ => {}
            }
        }
        // qubit-0 ground population
        (rho[(0, 0)] + rho[(1, 1)]).re
    }
}

/// Survival estimate from a finite number of shots; `shots = 0` returns the
/// exact probability.
pub fn sampled_survival(p: f64, shots: u32, rng: &mut impl Rng) -> f64 {
    if shots == 0 {
        return p;
    }
    let p = p.clamp(0.0, 1.0);
    let bin = Binomial::new(shots as u64, p).expect("probability in [0,1]");
    bin.sample(rng) as f64 / shots as f64
}

/// Mean survival over `m` fresh random sequences at each length in `ns`.
pub fn rb_survivals(
    backend: &impl RbBackend,
    ns: &[u32],
    m: usize,
    shots: u32,
    interleave_count: u32,
    rng: &mut impl Rng,
) -> Result<Vec<(f64, f64)>, RbError> {
    let mut out = Vec::with_capacity(ns.len());
    for &n in ns {
        let seqs = build_rb_sequences(n, m, interleave_count, rng)?;
        let mean = seqs
            .iter()
            .map(|s| sampled_survival(backend.survival(s), shots, rng))
            .sum::<f64>()
            / m as f64;
        out.push((n as f64, mean));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// decay fits

/// Result of fitting F(N) = A·F_C^N + B.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct DecayFit {
    pub a: f64,
    pub b: f64,
    pub f_c: f64,
    /// Covariance of (A, B, F_C) from the linearized fit.
    pub covariance: [[f64; 3]; 3],
}

fn decay_residual_ss(data: &[(f64, f64)], a: f64, b: f64, f_c: f64) -> f64 {
    data.iter().map(|&(n, y)| (a * f_c.powf(n) + b - y).powi(2)).sum()
}

/// For a trial F_C, the best (A, B) follow from linear least squares; the
/// pair is clamped into [0,1] which keeps the scan objective well defined.
fn separable_ab(data: &[(f64, f64)], f_c: f64) -> (f64, f64) {
    let (mut spp, mut sp, mut sy, mut spy) = (0.0, 0.0, 0.0, 0.0);
    let m = data.len() as f64;
    for &(n, y) in data {
        let p = f_c.powf(n);
        spp += p * p;
        sp += p;
        sy += y;
        spy += p * y;
    }
    let det = spp * m - sp * sp;
    if det.abs() < 1e-14 {
        return (0.0, (sy / m).clamp(0.0, 1.0));
    }
    let a = (spy * m - sp * sy) / det;
    let b = (spp * sy - sp * spy) / det;
    (a.clamp(0.0, 1.0), b.clamp(0.0, 1.0))
}

/// Fit F(N) = A·F_C^N + B with A, B ∈ [0,1], F_C ∈ (0,1]: a log-spaced scan
/// over F_C with separable (A,B) seeds a short simplex refinement.
pub fn fit_decay(data: &[(f64, f64)]) -> Result<DecayFit, RbError> {
    fit_decay_impl(data, None)
}

/// Same fit with B held fixed (the depolarized-baseline convention B = 0.5).
pub fn fit_decay_fixed_b(data: &[(f64, f64)], b: f64) -> Result<DecayFit, RbError> {
    fit_decay_impl(data, Some(b))
}

fn fit_decay_impl(data: &[(f64, f64)], fixed_b: Option<f64>) -> Result<DecayFit, RbError> {
    if data.len() < 3 {
        return Err(RbError::TooFewPoints(data.len()));
    }
    let ymin = data.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let ymax = data.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    if ymax - ymin < 1e-12 {
        return Err(RbError::DegenerateDecay);
    }

    // scan: F_C log-spaced so slow decays (1−F_C down to 1e−5) and fast ones
    // are both bracketed
    let mut best = (f64::INFINITY, 0.5, 0.5, 0.9);
    for k in 0..400 {
        let one_minus = 10f64.powf(-5.0 + 5.0 * k as f64 / 399.0);
        let f_c = 1.0 - one_minus;
        let (a, b) = match fixed_b {
            Some(bf) => {
                let p_sum: f64 = data.iter().map(|&(n, _)| f_c.powf(n) * f_c.powf(n)).sum();
                let num: f64 = data.iter().map(|&(n, y)| (y - bf) * f_c.powf(n)).sum();
                ((num / p_sum).clamp(0.0, 1.0), bf)
            }
            None => separable_ab(data, f_c),
        };
        let ss = decay_residual_ss(data, a, b, f_c);
        if ss < best.0 {
            best = (ss, a, b, f_c);
        }
    }
    let (_, a0, b0, f0) = best;

    // simplex refinement in transformed coordinates keeping the bounds
    let obj = |v: &[f64]| -> f64 {
        let f_c = 1.0 - v[2].abs();
        if !(0.0..1.0).contains(&v[2].abs()) {
            return f64::INFINITY;
        }
        let a = v[0];
        let b = fixed_b.unwrap_or(v[1]);
        if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) {
            return f64::INFINITY;
        }
        decay_residual_ss(data, a, b, f_c)
    };
    let x0 = vec![a0, b0, 1.0 - f0];
    let step = vec![0.05, 0.05, (1.0 - f0).max(1e-6) * 0.5];
    let (xo, _) = nelder_mead(obj, &x0, &step, 400);
    let (a, b) = (xo[0], fixed_b.unwrap_or(xo[1]));
    let f_c = (1.0 - xo[2].abs()).clamp(f64::MIN_POSITIVE, 1.0);

    // covariance from the linearization at the optimum
    let mut jtj = Matrix3::<f64>::zeros();
    let mut ss = 0.0;
    for &(n, y) in data {
        let p = f_c.powf(n);
        let j = [p, 1.0, a * n * f_c.powf(n - 1.0)];
        for r in 0..3 {
            for c in 0..3 {
                jtj[(r, c)] += j[r] * j[c];
            }
        }
        ss += (a * p + b - y).powi(2);
    }
    let dof = (data.len() as f64 - if fixed_b.is_some() { 2.0 } else { 3.0 }).max(1.0);
    let sigma2 = ss / dof;
    let covariance = match jtj.try_inverse() {
        Some(inv) => {
            let mut c = [[0.0; 3]; 3];
            for r in 0..3 {
                for cc in 0..3 {
                    c[r][cc] = inv[(r, cc)] * sigma2;
                }
            }
            c
        }
        None => [[f64::NAN; 3]; 3],
    };
    Ok(DecayFit { a, b, f_c, covariance })
}

/// Magesan interleaved-RB estimator: per-CZ error from the reference and
/// interleaved decays. With `interleave_count` CZ gates per Clifford slot the
/// per-gate error is the per-slot error divided by the count.
pub fn irb_gate_error(
    reference: &DecayFit,
    interleaved: &DecayFit,
    d: usize,
    interleave_count: u32,
) -> Result<f64, RbError> {
    if reference.f_c == 0.0 {
        return Err(RbError::ZeroReference);
    }
    let d = d as f64;
    let per_slot = (d - 1.0) / d * (1.0 - interleaved.f_c / reference.f_c);
    Ok(per_slot / interleave_count.max(1) as f64)
}

// ---------------------------------------------------------------------------
// sensitivity model

/// Decomposition-average gate counts entering the fidelity model. Defaults
/// are the conventional per-Clifford averages (n̄_SQ = 8.5, n̄_CZ = 1.5); the
/// exact means of the built-in table are available from
/// `CliffordGroup::exact_gate_means`.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct GateCounts {
    pub n_sq: f64,
    pub n_cz: f64,
}

impl Default for GateCounts {
    fn default() -> Self {
        GateCounts { n_sq: 8.5, n_cz: 1.5 }
    }
}

/// Per-Clifford fidelity model F_C = F_SQ^n̄_SQ · F_CZ^n̄_CZ.
pub fn clifford_fidelity(f_sq: f64, f_cz: f64, counts: GateCounts) -> f64 {
    f_sq.powf(counts.n_sq) * f_cz.powf(counts.n_cz)
}

/// Sensitivity of the decay curve to the CZ fidelity, normalized by the CZ
/// error: S(N) = (1/(1−F_CZ)) · ∂F(N)/∂F_CZ with F(N) = A·F_C^N + B.
/// At F_CZ = 1 the normalization diverges; the unnormalized derivative is
/// returned there instead.
pub fn sensitivity(n: f64, f_sq: f64, f_cz: f64, a: f64, counts: GateCounts) -> f64 {
    let f_c = clifford_fidelity(f_sq, f_cz, counts);
    let dfc_dfcz = counts.n_cz * f_cz.powf(counts.n_cz - 1.0) * f_sq.powf(counts.n_sq);
    let deriv = a * n * f_c.powf(n - 1.0) * dfc_dfcz;
    if f_cz >= 1.0 {
        deriv
    } else {
        deriv / (1.0 - f_cz)
    }
}

/// Integer sequence length maximizing the sensitivity, scanned over
/// N ∈ [1, 10⁴] with ties broken toward smaller N.
pub fn optimal_n(f_sq: f64, f_cz: f64, counts: GateCounts) -> u32 {
    let mut best = (f64::NEG_INFINITY, 1u32);
    for n in 1..=10_000u32 {
        let s = sensitivity(n as f64, f_sq, f_cz, 0.5, counts);
        if s > best.0 {
            best = (s, n);
        }
    }
    best.1
}

/// Reference and interleaved decays plus the extracted per-gate error.
#[derive(Clone, Debug)]
pub struct IrbResult {
    pub reference: DecayFit,
    pub interleaved: DecayFit,
    pub epsilon_cz: f64,
}

/// Run reference + interleaved RB on a backend and extract the per-CZ error.
pub fn run_irb(
    backend: &impl RbBackend,
    ns: &[u32],
    m: usize,
    shots: u32,
    interleave_count: u32,
    rng: &mut impl Rng,
) -> Result<IrbResult, RbError> {
    let ref_data = rb_survivals(backend, ns, m, shots, 0, rng)?;
    let int_data = rb_survivals(backend, ns, m, shots, interleave_count.max(1), rng)?;
    let reference = fit_decay(&ref_data)?;
    let interleaved = fit_decay(&int_data)?;
    let epsilon_cz = irb_gate_error(&reference, &interleaved, 4, interleave_count.max(1))?;
    Ok(IrbResult { reference, interleaved, epsilon_cz })
}

/// Ideal state-vector composition of a gate list from |00⟩; returns the
/// final probability of |00⟩. Test oracle and sanity hook for sequences.
pub fn ideal_ground_return(gates: &[Gate]) -> f64 {
    let mut psi = Vector4::<C64>::zeros();
    psi[0] = C64::new(1.0, 0.0);
    for g in gates {
        psi = g.unitary4() * psi;
    }
    psi[0].norm_sqr()
}

//! Three-mode device model: two fixed-frequency transmons coupled through a
//! flux-tunable coupler.
//!
//! Each mode is a truncated anharmonic oscillator; the couplings enter as
//! full `-g (a† - a)(b† - b)` products, counter-rotating terms included.
//! Angular frequencies (rad/s) everywhere; flux in units of Φ0.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::C64;

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("Hilbert space dimension {dim} exceeds cap {cap}")]
    DimensionOverflow { dim: usize, cap: usize },
    #[error("ambiguous label assignment at flux {flux}: labels {first} and {second} compete for one eigenvector (overlap gap {gap:.3e})")]
    AmbiguousLabel { flux: f64, first: Label, second: Label, gap: f64 },
    #[error("|xi| has no interior minimum in [{lo}, {hi}]")]
    NoInteriorMinimum { lo: f64, hi: f64 },
    #[error("invalid device parameters: {0}")]
    InvalidParams(String),
}

/// Bare-state label `(n_c, n_1 n_2)`: coupler excitation plus the two qubit
/// excitations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Label {
    pub nc: u8,
    pub n1: u8,
    pub n2: u8,
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}{})", self.nc, self.n1, self.n2)
    }
}

/// Device parameters. Frequencies are angular (rad/s).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceParams {
    pub omega1: f64,
    pub omega2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha_c: f64,
    pub g1c: f64,
    pub g2c: f64,
    pub g12: f64,
    pub omega_c_max: f64,
    pub omega_c_min: f64,
    pub n_qubit_levels: usize,
    pub n_coupler_levels: usize,
    /// Refuse to build Hamiltonians larger than this (misconfiguration guard).
    pub dimension_cap: usize,
}

impl Default for DeviceParams {
    /// Measured parameters of the reference device.
    fn default() -> Self {
        let f = crate::TWO_PI;
        DeviceParams {
            omega1: f * 4.115e9,
            omega2: f * 3.651e9,
            alpha1: f * -261e6,
            alpha2: f * -275e6,
            alpha_c: f * -124e6,
            g1c: f * 67e6,
            g2c: f * 61e6,
            // Sign convention: only the triple product g12·g1c·g2c is gauge
            // invariant. The relative sign here makes the direct qubit-qubit
            // exchange oppose the coupler-mediated one when the coupler idles
            // above the qubits, which is what gives |ξ| its deep minimum.
            g12: f * 5.5e6,
            omega_c_max: f * 6.3e9,
            omega_c_min: f * 3.7e9,
            n_qubit_levels: 3,
            n_coupler_levels: 4,
            dimension_cap: 4096,
        }
    }
}

impl DeviceParams {
    pub fn dim(&self) -> usize {
        self.n_qubit_levels * self.n_qubit_levels * self.n_coupler_levels
    }

    /// Effective SQUID junction asymmetry, fixed by the coupler tuning range.
    pub fn squid_asymmetry(&self) -> f64 {
        let a = self.alpha_c.abs();
        ((self.omega_c_min + a) / (self.omega_c_max + a)).powi(2)
    }

    /// Coupler frequency vs external flux (units of Φ0).
    ///
    /// Transmon-style dispersion of the plasma frequency with asymmetry `d`,
    /// shifted so the band edges land exactly on `omega_c_max`/`omega_c_min`:
    /// periodic with period 1 and reflection-symmetric about Φ = 0.
    pub fn coupler_frequency(&self, flux: f64) -> f64 {
        let a = self.alpha_c.abs();
        let d = self.squid_asymmetry();
        let (s, c) = (std::f64::consts::PI * flux).sin_cos();
        (self.omega_c_max + a) * (c * c + d * d * s * s).powf(0.25) - a
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        if self.n_qubit_levels < 2 || self.n_coupler_levels < 2 {
            return Err(DeviceError::InvalidParams(
                "need at least 2 levels per mode".into(),
            ));
        }
        if !(self.omega_c_min < self.omega_c_max) {
            return Err(DeviceError::InvalidParams(
                "coupler range requires omega_c_min < omega_c_max".into(),
            ));
        }
        if self.dim() > self.dimension_cap {
            return Err(DeviceError::DimensionOverflow { dim: self.dim(), cap: self.dimension_cap });
        }
        Ok(())
    }

    /// Basis index of a bare label. Qubit-1 major, coupler fastest:
    /// `idx = (n1 * L2 + n2) * Lc + nc`.
    pub fn index_of(&self, label: Label) -> usize {
        (label.n1 as usize * self.n_qubit_levels + label.n2 as usize) * self.n_coupler_levels
            + label.nc as usize
    }

    pub fn label_of(&self, index: usize) -> Label {
        let nc = index % self.n_coupler_levels;
        let rest = index / self.n_coupler_levels;
        let n2 = rest % self.n_qubit_levels;
        let n1 = rest / self.n_qubit_levels;
        Label { nc: nc as u8, n1: n1 as u8, n2: n2 as u8 }
    }

    /// Full Hamiltonian at the given flux, in rad/s.
    pub fn hamiltonian(&self, flux: f64) -> Result<DMatrix<C64>, DeviceError> {
        self.validate()?;
        let omega_c = self.coupler_frequency(flux);
        Ok(self.hamiltonian_parts().assemble(omega_c))
    }

    /// Split H(Φ) = H0 + ω_c(Φ)·n_c for cheap reassembly along a flux path.
    pub fn hamiltonian_parts(&self) -> HamiltonianParts {
        let lq = self.n_qubit_levels;
        let lc = self.n_coupler_levels;
        let dim = self.dim();

        let number = |levels: usize| -> DVector<f64> {
            DVector::from_fn(levels, |n, _| n as f64)
        };
        // a† - a as a real antisymmetric matrix (imag parts are zero).
        let ladder = |levels: usize| -> DMatrix<f64> {
            let mut m = DMatrix::zeros(levels, levels);
            for n in 1..levels {
                let s = (n as f64).sqrt();
                m[(n, n - 1)] = s; // a†
                m[(n - 1, n)] = -s; // -a
            }
            m
        };

        let n_op = [number(lq), number(lq), number(lc)];
        let k_op = [ladder(lq), ladder(lq), ladder(lc)];

        // Mode order in index arithmetic: (q1, q2, c), coupler fastest.
        let idx = |n1: usize, n2: usize, nc: usize| (n1 * lq + n2) * lc + nc;

        let mut h0 = DMatrix::<C64>::zeros(dim, dim);
        let mut nc_diag = DVector::<f64>::zeros(dim);

        for n1 in 0..lq {
            for n2 in 0..lq {
                for nc in 0..lc {
                    let i = idx(n1, n2, nc);
                    let diag = self.omega1 * n_op[0][n1]
                        + 0.5 * self.alpha1 * n_op[0][n1] * (n_op[0][n1] - 1.0)
                        + self.omega2 * n_op[1][n2]
                        + 0.5 * self.alpha2 * n_op[1][n2] * (n_op[1][n2] - 1.0)
                        + 0.5 * self.alpha_c * n_op[2][nc] * (n_op[2][nc] - 1.0);
                    h0[(i, i)] += C64::new(diag, 0.0);
                    nc_diag[i] = n_op[2][nc];
                }
            }
        }

        // -g (a_i† - a_i)(a_j† - a_j): product of two antisymmetric real
        // matrices acting on different modes.
        let mut add_coupling = |g: f64, mode_a: usize, mode_b: usize| {
            for n1 in 0..lq {
                for n2 in 0..lq {
                    for nc in 0..lc {
                        let row_modes = [n1, n2, nc];
                        for m1 in 0..lq {
                            for m2 in 0..lq {
                                for mc in 0..lc {
                                    let col_modes = [m1, m2, mc];
                                    // identity on the spectator mode
                                    let spectator = 3 - mode_a - mode_b;
                                    if row_modes[spectator] != col_modes[spectator] {
                                        continue;
                                    }
                                    let ka = k_op[mode_a][(row_modes[mode_a], col_modes[mode_a])];
                                    let kb = k_op[mode_b][(row_modes[mode_b], col_modes[mode_b])];
                                    if ka == 0.0 || kb == 0.0 {
                                        continue;
                                    }
                                    let i = idx(n1, n2, nc);
                                    let j = idx(m1, m2, mc);
                                    h0[(i, j)] += C64::new(-g * ka * kb, 0.0);
                                }
                            }
                        }
                    }
                }
            }
        };
        add_coupling(self.g1c, 0, 2);
        add_coupling(self.g2c, 1, 2);
        add_coupling(self.g12, 0, 1);

        HamiltonianParts { h0, nc_diag }
    }
}

/// H(Φ) = `h0` + ω_c(Φ) · diag(`nc_diag`).
pub struct HamiltonianParts {
    pub h0: DMatrix<C64>,
    pub nc_diag: DVector<f64>,
}

impl HamiltonianParts {
    pub fn assemble(&self, omega_c: f64) -> DMatrix<C64> {
        let mut h = self.h0.clone();
        for i in 0..self.nc_diag.len() {
            h[(i, i)] += C64::new(omega_c * self.nc_diag[i], 0.0);
        }
        h
    }

    /// In-place variant for hot loops: `h` must start as a copy of `h0`.
    pub fn assemble_into(&self, omega_c: f64, h: &mut DMatrix<C64>) {
        h.copy_from(&self.h0);
        for i in 0..self.nc_diag.len() {
            h[(i, i)] += C64::new(omega_c * self.nc_diag[i], 0.0);
        }
    }
}

/// Eigenspectrum at one flux with bare-state labels attached.
#[derive(Debug, Clone)]
pub struct LabeledSpectrum {
    pub flux: f64,
    /// Indexed by bare-label basis index: `energies[params.index_of(l)]`.
    pub energies: Vec<f64>,
    /// Eigenvectors as columns, same indexing as `energies`.
    pub vectors: DMatrix<C64>,
    /// `overlaps[(l, k)]` = |⟨ref_l | v_k⟩|² against the assignment reference
    /// (bare basis, or the previous spectrum when chaining).
    pub overlaps: DMatrix<f64>,
}

impl LabeledSpectrum {
    pub fn energy(&self, params: &DeviceParams, label: Label) -> f64 {
        self.energies[params.index_of(label)]
    }

    pub fn vector(&self, params: &DeviceParams, label: Label) -> DVector<C64> {
        DVector::from_column_slice(self.vectors.column(params.index_of(label)).as_slice())
    }

    /// ξ = ω̃11 − ω̃01 − ω̃10 + ω̃00 (rad/s).
    pub fn conditional_shift(&self, params: &DeviceParams) -> f64 {
        let e = |n1, n2| self.energy(params, Label { nc: 0, n1, n2 });
        e(1, 1) - e(0, 1) - e(1, 0) + e(0, 0)
    }
}

/// Gap below which two labels competing for one eigenvector is an error
/// rather than a choice.
pub const AMBIGUITY_GAP: f64 = 1e-6;

/// Diagonalize at `flux` and assign labels by maximum overlap with the bare
/// basis, or with `previous`'s labeled eigenvectors when given (adiabatic
/// chaining through crossings).
pub fn labeled_spectrum(
    params: &DeviceParams,
    flux: f64,
    previous: Option<&LabeledSpectrum>,
) -> Result<LabeledSpectrum, DeviceError> {
    let h = params.hamiltonian(flux)?;
    let dim = h.nrows();
    let eig = nalgebra::SymmetricEigen::new(h);

    // Overlap of reference state l with eigenvector k.
    let mut overlaps = DMatrix::<f64>::zeros(dim, dim);
    for k in 0..dim {
        let col = eig.eigenvectors.column(k);
        for l in 0..dim {
            let amp = match previous {
                None => col[l],
                Some(prev) => prev.vectors.column(l).dotc(&col),
            };
            overlaps[(l, k)] = amp.norm_sqr();
        }
    }

    // Greedy max-overlap bijection with ambiguity detection.
    let mut label_of_vec = vec![usize::MAX; dim]; // eigvec k -> label index
    let mut label_used = vec![false; dim];
    let mut vec_used = vec![false; dim];
    for _ in 0..dim {
        let (mut best, mut bl, mut bk) = (-1.0, 0, 0);
        for l in 0..dim {
            if label_used[l] {
                continue;
            }
            for k in 0..dim {
                if vec_used[k] {
                    continue;
                }
                if overlaps[(l, k)] > best {
                    best = overlaps[(l, k)];
                    bl = l;
                    bk = k;
                }
            }
        }
        // Runner-up label for the same eigenvector.
        let mut second = -1.0;
        let mut second_l = bl;
        for l in 0..dim {
            if l != bl && !label_used[l] && overlaps[(l, bk)] > second {
                second = overlaps[(l, bk)];
                second_l = l;
            }
        }
        if second >= 0.0 && best - second < AMBIGUITY_GAP {
            return Err(DeviceError::AmbiguousLabel {
                flux,
                first: params.label_of(bl),
                second: params.label_of(second_l),
                gap: best - second,
            });
        }
        label_used[bl] = true;
        vec_used[bk] = true;
        label_of_vec[bk] = bl;
    }

    let mut energies = vec![0.0; dim];
    let mut vectors = DMatrix::<C64>::zeros(dim, dim);
    for k in 0..dim {
        let l = label_of_vec[k];
        energies[l] = eig.eigenvalues[k];
        let mut col = eig.eigenvectors.column(k).clone_owned();
        // Fix the gauge: largest-magnitude component real positive, so
        // chained sweeps produce smoothly varying vectors.
        let (mut pivot, mut pmag) = (C64::new(1.0, 0.0), -1.0);
        for i in 0..dim {
            let m = col[i].norm_sqr();
            if m > pmag {
                pmag = m;
                pivot = col[i];
            }
        }
        let phase = pivot / pivot.norm();
        col.apply(|c| *c /= phase);
        vectors.set_column(l, &col);
    }

    Ok(LabeledSpectrum { flux, energies, vectors, overlaps })
}

/// ξ at a single flux (bare-basis labeling).
pub fn conditional_shift(params: &DeviceParams, flux: f64) -> Result<f64, DeviceError> {
    Ok(labeled_spectrum(params, flux, None)?.conditional_shift(params))
}

/// Labeled spectra along a monotone flux path, chaining labels adiabatically.
pub fn labeled_sweep(
    params: &DeviceParams,
    fluxes: &[f64],
) -> Result<Vec<LabeledSpectrum>, DeviceError> {
    let mut out = Vec::with_capacity(fluxes.len());
    for (i, &phi) in fluxes.iter().enumerate() {
        let prev = if i == 0 { None } else { out.last() };
        out.push(labeled_spectrum(params, phi, prev)?);
    }
    Ok(out)
}

/// Result of the ξ zero search.
#[derive(Debug, Clone, Copy)]
pub struct ZeroCrossing {
    pub flux: f64,
    pub xi: f64,
}

/// Find the flux in `[lo, hi]` minimizing |ξ|, to 1e-5 Φ0. Coarse scan plus
/// golden-section refinement; an argmin on the bracket edge means there is
/// no interior minimum and is reported as such.
pub fn zz_zero_crossing(
    params: &DeviceParams,
    lo: f64,
    hi: f64,
) -> Result<ZeroCrossing, DeviceError> {
    if !(lo < hi) {
        return Err(DeviceError::InvalidParams("empty bracket".into()));
    }
    let n = 65;
    let xi_abs = |phi: f64| -> Result<f64, DeviceError> {
        Ok(conditional_shift(params, phi)?.abs())
    };
    let mut best = (0usize, f64::INFINITY);
    let grid: Vec<f64> =
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    for (i, &phi) in grid.iter().enumerate() {
        let v = xi_abs(phi)?;
        if v < best.1 {
            best = (i, v);
        }
    }
    if best.0 == 0 || best.0 == n - 1 {
        return Err(DeviceError::NoInteriorMinimum { lo, hi });
    }
    let (mut a, mut b) = (grid[best.0 - 1], grid[best.0 + 1]);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut c, mut d) = (b - inv_phi * (b - a), a + inv_phi * (b - a));
    let (mut fc, mut fd) = (xi_abs(c)?, xi_abs(d)?);
    while b - a > 1e-5 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = xi_abs(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = xi_abs(d)?;
        }
    }
    let flux = 0.5 * (a + b);
    Ok(ZeroCrossing { flux, xi: conditional_shift(params, flux)? })
}

/// Dense table of labeled energies over a flux interval with linear
/// interpolation between nodes. One diagonalization per node at build time,
/// then O(1) lookups; used by the adiabatic phase integral and the cryoscope
/// observable where full propagation would be wasteful.
pub struct SpectrumTable {
    params: DeviceParams,
    fluxes: Vec<f64>,
    /// energies[node][basis index]
    energies: Vec<Vec<f64>>,
}

impl SpectrumTable {
    pub fn build(
        params: &DeviceParams,
        lo: f64,
        hi: f64,
        nodes: usize,
    ) -> Result<SpectrumTable, DeviceError> {
        assert!(nodes >= 2 && lo < hi);
        let fluxes: Vec<f64> = (0..nodes)
            .map(|i| lo + (hi - lo) * i as f64 / (nodes - 1) as f64)
            .collect();
        let spectra = labeled_sweep(params, &fluxes)?;
        Ok(SpectrumTable {
            params: params.clone(),
            fluxes,
            energies: spectra.into_iter().map(|s| s.energies).collect(),
        })
    }

    pub fn flux_range(&self) -> (f64, f64) {
        (self.fluxes[0], *self.fluxes.last().unwrap())
    }

    /// Interpolated energy of `label` at `flux` (clamped to the table range).
    pub fn energy(&self, label: Label, flux: f64) -> f64 {
        let idx = self.params.index_of(label);
        let (lo, hi) = self.flux_range();
        let x = flux.clamp(lo, hi);
        let step = (hi - lo) / (self.fluxes.len() - 1) as f64;
        let i = (((x - lo) / step) as usize).min(self.fluxes.len() - 2);
        let t = (x - self.fluxes[i]) / step;
        self.energies[i][idx] * (1.0 - t) + self.energies[i + 1][idx] * t
    }

    /// Interpolated ξ at `flux`.
    pub fn conditional_shift(&self, flux: f64) -> f64 {
        let e = |n1, n2| self.energy(Label { nc: 0, n1, n2 }, flux);
        e(1, 1) - e(0, 1) - e(1, 0) + e(0, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn coupler_band_edges() {
        let p = DeviceParams::default();
        assert_relative_eq!(p.coupler_frequency(0.0), p.omega_c_max, max_relative = 1e-12);
        assert_relative_eq!(p.coupler_frequency(0.5), p.omega_c_min, max_relative = 1e-12);
        assert_relative_eq!(p.coupler_frequency(1.0), p.omega_c_max, max_relative = 1e-12);
        // reflection symmetry and periodicity
        assert_relative_eq!(p.coupler_frequency(0.2), p.coupler_frequency(-0.2), max_relative = 1e-12);
        assert_relative_eq!(p.coupler_frequency(0.2), p.coupler_frequency(1.2), max_relative = 1e-10);
    }

    #[test]
    fn squid_asymmetry_value() {
        let p = DeviceParams::default();
        assert_abs_diff_eq!(p.squid_asymmetry(), 0.354, epsilon = 5e-4);
    }

    #[test]
    fn coupler_monotone_on_half_period() {
        let p = DeviceParams::default();
        let mut last = f64::INFINITY;
        for i in 0..=500 {
            let w = p.coupler_frequency(0.5 * i as f64 / 500.0);
            assert!(w < last, "not strictly decreasing at step {i}");
            last = w;
        }
    }

    #[test]
    fn hamiltonian_is_hermitian() {
        let p = DeviceParams::default();
        let h = p.hamiltonian(0.3).unwrap();
        assert_eq!(h.nrows(), 36);
        for i in 0..h.nrows() {
            for j in 0..h.ncols() {
                let d = (h[(i, j)] - h[(j, i)].conj()).norm();
                assert!(d < 1e-9, "H[{i},{j}] not Hermitian: {d}");
            }
        }
    }

    #[test]
    fn dimension_cap_enforced() {
        let mut p = DeviceParams::default();
        p.dimension_cap = 30;
        assert!(matches!(
            p.hamiltonian(0.0),
            Err(DeviceError::DimensionOverflow { dim: 36, cap: 30 })
        ));
    }

    #[test]
    fn zero_coupling_labels_are_bare() {
        let mut p = DeviceParams::default();
        p.g1c = 0.0;
        p.g2c = 0.0;
        p.g12 = 0.0;
        let s = labeled_spectrum(&p, 0.3, None).unwrap();
        for l in 0..p.dim() {
            assert_relative_eq!(s.overlaps[(l, l)], 1.0, max_relative = 1e-12);
            let lab = p.label_of(l);
            let bare = p.omega1 * lab.n1 as f64
                + 0.5 * p.alpha1 * (lab.n1 as f64) * (lab.n1 as f64 - 1.0)
                + p.omega2 * lab.n2 as f64
                + 0.5 * p.alpha2 * (lab.n2 as f64) * (lab.n2 as f64 - 1.0)
                + p.coupler_frequency(0.3) * lab.nc as f64
                + 0.5 * p.alpha_c * (lab.nc as f64) * (lab.nc as f64 - 1.0);
            assert_relative_eq!(s.energy(&p, lab), bare, max_relative = 1e-10);
        }
    }

    #[test]
    fn label_index_roundtrip() {
        let p = DeviceParams::default();
        for i in 0..p.dim() {
            assert_eq!(p.index_of(p.label_of(i)), i);
        }
    }

    #[test]
    fn xi_small_at_zero_flux() {
        let p = DeviceParams::default();
        let xi = conditional_shift(&p, 0.0).unwrap();
        assert!(
            xi.abs() / crate::TWO_PI < 1e6,
            "expected |xi|/2pi < 1 MHz at flux 0, got {}",
            xi / crate::TWO_PI
        );
    }

    #[test]
    fn spectrum_table_matches_direct() {
        let p = DeviceParams::default();
        let table = SpectrumTable::build(&p, 0.0, 0.35, 141).unwrap();
        for &phi in &[0.05, 0.171, 0.3] {
            let direct = conditional_shift(&p, phi).unwrap();
            let interp = table.conditional_shift(phi);
            assert_abs_diff_eq!(interp, direct, epsilon = 0.01 * direct.abs().max(crate::TWO_PI * 1e3));
        }
    }
}

//! Simulation and calibration workbench for a CZ gate on two fixed-frequency
//! transmons coupled through a flux-tunable coupler.
//!
//! The crate models the full control loop of such a device at desk scale:
//!
//! * [`device`] — three-mode Hamiltonian, flux-tunable coupler spectrum,
//!   labeled eigenstates and the conditional shift ξ.
//! * [`pulse`] — flux pulse parametrizations (Gaussian-square, Fourier,
//!   piecewise-linear node basis) sampled onto the AWG grid.
//! * [`signal`] — the distorting signal chain (exponential IIR stages + FIR),
//!   its inversion for predistortion, and FPGA update-granularity emulation.
//! * [`propagator`] — exact unitary propagation of waveforms through the
//!   device model, gate extraction in the idle frame, fidelity measures.
//! * [`clifford`] — the two-qubit Clifford group as symplectic tableaus with
//!   a primitive-gate decomposition table.
//! * [`rb`] — randomized benchmarking sequences, decay fits, interleaved RB
//!   error estimates and the sensitivity-optimal sequence length.
//! * [`cmaes`] — a self-contained CMA-ES optimizer on the unit cube.
//! * [`calibration`] — the closed-loop ORBIT cost and optimization driver,
//!   plus the consecutive-CZ stress test.
//! * [`cryoscope`] — step-response identification through qubit phase
//!   measurements and exponential/FIR model fits.
//! * [`scaling`] — synthetic test-function studies of optimization cost
//!   versus problem dimension.
//!
//! Heavy sweeps (candidate batches, leakage maps, trace grids) take a
//! [`parallel::Parallelism`] context; with the default `parallel` feature
//! they fan out over a rayon pool, without it they run sequentially.

pub mod calibration;
pub mod cli;
pub mod clifford;
pub mod cmaes;
pub mod config;
pub mod cryoscope;
pub mod device;
pub mod fit;
pub mod parallel;
pub mod propagator;
pub mod pulse;
pub mod rb;
pub mod scaling;
pub mod signal;

pub use parallel::Parallelism;

/// Complex scalar used throughout.
pub type C64 = num_complex::Complex<f64>;

/// 2π, for converting plain-Hz config values to angular frequencies.
pub const TWO_PI: f64 = std::f64::consts::TAU;

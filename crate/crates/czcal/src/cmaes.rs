//! CMA-ES on the normalized unit cube with an ask/tell interface.
//!
//! The implementation follows the standard (μ/μ_w, λ) scheme: rank-based
//! recombination of the μ = λ/2 best candidates, cumulative step-size
//! adaptation, and rank-1 + rank-μ covariance updates. Selection uses cost
//! ranks only, so any strictly monotone cost rescaling produces bitwise
//! identical updates.
//!
//! Search happens in [0,1]^D; `SearchSpace` maps physical parameter ranges
//! onto the cube and back. Out-of-cube candidates are resampled a bounded
//! number of times, then clamped.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, thiserror::Error)]
pub enum CmaesError {
    #[error("expected {expected} values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("search space invalid: {0}")]
    BadSearchSpace(String),
    #[error("checkpoint invalid: {0}")]
    BadCheckpoint(String),
}

/// Population size rule P(D) = round(4 + 4 ln D), floored at 4.
pub fn population_size(d: usize) -> usize {
    ((4.0 + 4.0 * (d as f64).ln()).round() as usize).max(4)
}

/// Termination test: the trailing `window` of mean costs spans less than
/// `tolerance`. Histories shorter than the window never terminate.
pub fn should_terminate(history: &[f64], window: usize, tolerance: f64) -> bool {
    if history.len() < window || window == 0 {
        return false;
    }
    let tail = &history[history.len() - window..];
    let lo = tail.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    hi - lo < tolerance
}

// ---------------------------------------------------------------------------
// search space

/// One physical parameter's optimization range.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ParamRange {
    pub lower: f64,
    pub upper: f64,
    pub initial: f64,
    /// Initial sampling spread in physical units.
    pub spread: f64,
}

/// Physical-to-unit-cube mapping for the optimizer.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SearchSpace {
    pub params: Vec<ParamRange>,
}

impl SearchSpace {
    pub fn new(params: Vec<ParamRange>) -> Result<Self, CmaesError> {
        for (i, p) in params.iter().enumerate() {
            if !(p.lower < p.upper) {
                return Err(CmaesError::BadSearchSpace(format!(
                    "parameter {i}: lower {} not below upper {}",
                    p.lower, p.upper
                )));
            }
            if p.initial < p.lower || p.initial > p.upper {
                return Err(CmaesError::BadSearchSpace(format!(
                    "parameter {i}: initial {} outside [{}, {}]",
                    p.initial, p.lower, p.upper
                )));
            }
            if !(p.spread > 0.0) {
                return Err(CmaesError::BadSearchSpace(format!(
                    "parameter {i}: spread must be positive"
                )));
            }
        }
        Ok(SearchSpace { params })
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn normalize(&self, physical: &[f64]) -> Result<Vec<f64>, CmaesError> {
        self.check_len(physical)?;
        Ok(self
            .params
            .iter()
            .zip(physical)
            .map(|(p, &v)| (v - p.lower) / (p.upper - p.lower))
            .collect())
    }

    pub fn denormalize(&self, unit: &[f64]) -> Result<Vec<f64>, CmaesError> {
        self.check_len(unit)?;
        Ok(self
            .params
            .iter()
            .zip(unit)
            .map(|(p, &u)| p.lower + u * (p.upper - p.lower))
            .collect())
    }

    /// Initial mean in the unit cube.
    pub fn initial_unit(&self) -> Vec<f64> {
        self.params
            .iter()
            .map(|p| (p.initial - p.lower) / (p.upper - p.lower))
            .collect()
    }

    /// Per-parameter spreads mapped to the cube.
    pub fn spread_unit(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.spread / (p.upper - p.lower)).collect()
    }

    fn check_len(&self, v: &[f64]) -> Result<(), CmaesError> {
        if v.len() != self.dim() {
            return Err(CmaesError::DimensionMismatch { expected: self.dim(), got: v.len() });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// optimizer state

const EIG_FLOOR: f64 = 1e-14;
const RESAMPLE_LIMIT: usize = 100;

/// CMA-ES state on [0,1]^D.
#[derive(Clone, Debug)]
pub struct CmaEs {
    dim: usize,
    pop: usize,
    weights: Vec<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_c: f64,
    c_1: f64,
    c_mu: f64,
    chi_n: f64,

    mean: DVector<f64>,
    sigma: f64,
    cov: DMatrix<f64>,
    p_sigma: DVector<f64>,
    p_c: DVector<f64>,
    generation: u64,
    repairs: u64,

    // eigendecomposition cache for sampling: C = B diag(d²) Bᵀ
    eig_b: DMatrix<f64>,
    eig_d: DVector<f64>,
}

impl CmaEs {
    /// Start at `mean0` in the cube with per-coordinate spreads `spread0`
    /// (the global σ is their mean, anisotropy goes into the initial C).
    /// `pop` overrides the population rule.
    pub fn new(
        mean0: &[f64],
        spread0: &[f64],
        pop: Option<usize>,
    ) -> Result<Self, CmaesError> {
        let dim = mean0.len();
        if dim == 0 || spread0.len() != dim {
            return Err(CmaesError::DimensionMismatch { expected: dim.max(1), got: spread0.len() });
        }
        if spread0.iter().any(|&s| !(s > 0.0)) {
            return Err(CmaesError::BadSearchSpace("spreads must be positive".into()));
        }
        let pop = pop.unwrap_or_else(|| population_size(dim));
        let mu = pop / 2;
        let mut weights: Vec<f64> = (0..mu)
            .map(|i| ((mu as f64) + 0.5).ln() - ((i + 1) as f64).ln())
            .collect();
        let wsum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= wsum;
        }
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let d = dim as f64;
        let c_sigma = (mu_eff + 2.0) / (d + mu_eff + 5.0);
        let d_sigma =
            1.0 + 2.0 * (((mu_eff - 1.0) / (d + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / d) / (d + 4.0 + 2.0 * mu_eff / d);
        let c_1 = 2.0 / ((d + 1.3).powi(2) + mu_eff);
        let c_mu =
            (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((d + 2.0).powi(2) + mu_eff));
        let chi_n = d.sqrt() * (1.0 - 1.0 / (4.0 * d) + 1.0 / (21.0 * d * d));

        let sigma = spread0.iter().sum::<f64>() / d;
        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        for i in 0..dim {
            let r = spread0[i] / sigma;
            cov[(i, i)] = r * r;
        }
        let mut s = CmaEs {
            dim,
            pop,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            chi_n,
            mean: DVector::from_column_slice(mean0),
            sigma,
            cov,
            p_sigma: DVector::zeros(dim),
            p_c: DVector::zeros(dim),
            generation: 0,
            repairs: 0,
            eig_b: DMatrix::identity(dim, dim),
            eig_d: DVector::from_element(dim, 1.0),
        };
        s.refresh_eigen();
        Ok(s)
    }

    /// Start from a `SearchSpace` (mean at the normalized initial point).
    pub fn from_space(space: &SearchSpace, pop: Option<usize>) -> Result<Self, CmaesError> {
        Self::new(&space.initial_unit(), &space.spread_unit(), pop)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn population(&self) -> usize {
        self.pop
    }

    pub fn mean(&self) -> Vec<f64> {
        self.mean.iter().cloned().collect()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Number of eigenvalue-floor repairs applied so far.
    pub fn repairs(&self) -> u64 {
        self.repairs
    }

    fn refresh_eigen(&mut self) {
        // symmetrize then decompose; floor eigenvalues to keep C SPD
        let sym = (&self.cov + self.cov.transpose()) * 0.5;
        let eig = nalgebra::SymmetricEigen::new(sym);
        let mut floored = false;
        let d: Vec<f64> = eig
            .eigenvalues
            .iter()
            .map(|&l| {
                if l < EIG_FLOOR {
                    floored = true;
                    EIG_FLOOR
                } else {
                    l
                }
            })
            .collect();
        if floored {
            self.repairs += 1;
            // write the repaired matrix back so state matches the samples
            let dm = DMatrix::from_diagonal(&DVector::from_vec(d.clone()));
            self.cov = &eig.eigenvectors * dm * eig.eigenvectors.transpose();
        }
        self.eig_b = eig.eigenvectors;
        self.eig_d = DVector::from_vec(d.into_iter().map(f64::sqrt).collect());
    }

    /// Draw the population: x = m + σ·B·(d∘z). Candidates leaving the cube
    /// are redrawn up to a bounded retry count, then clamped.
    pub fn ask(&self, rng: &mut impl Rng) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.pop);
        for _ in 0..self.pop {
            let mut x = DVector::<f64>::zeros(self.dim);
            for attempt in 0..=RESAMPLE_LIMIT {
                let z: DVector<f64> =
                    DVector::from_fn(self.dim, |_, _| rng.sample(StandardNormal));
                let y = &self.eig_b * z.component_mul(&self.eig_d);
                x = &self.mean + y * self.sigma;
                let inside = x.iter().all(|&v| (0.0..=1.0).contains(&v));
                if inside || attempt == RESAMPLE_LIMIT {
                    break;
                }
            }
            for v in x.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
            out.push(x.iter().cloned().collect());
        }
        out
    }

    /// Rank candidates by cost (non-finite costs rank worst, ties keep ask
    /// order) and apply the mean / step-size / covariance updates.
    pub fn tell(&mut self, candidates: &[Vec<f64>], costs: &[f64]) -> Result<(), CmaesError> {
        if candidates.len() != self.pop {
            return Err(CmaesError::DimensionMismatch { expected: self.pop, got: candidates.len() });
        }
        if costs.len() != self.pop {
            return Err(CmaesError::DimensionMismatch { expected: self.pop, got: costs.len() });
        }
        for c in candidates {
            if c.len() != self.dim {
                return Err(CmaesError::DimensionMismatch { expected: self.dim, got: c.len() });
            }
        }
        let mut order: Vec<usize> = (0..self.pop).collect();
        order.sort_by(|&a, &b| {
            let ka = if costs[a].is_finite() { costs[a] } else { f64::INFINITY };
            let kb = if costs[b].is_finite() { costs[b] } else { f64::INFINITY };
            ka.partial_cmp(&kb).unwrap().then(a.cmp(&b))
        });

        let mean_old = self.mean.clone();
        let mut mean_new = DVector::<f64>::zeros(self.dim);
        for (i, &w) in self.weights.iter().enumerate() {
            let x = DVector::from_column_slice(&candidates[order[i]]);
            mean_new += x * w;
        }
        let y_w = (&mean_new - &mean_old) / self.sigma;

        // C^{-1/2}·y_w through the cached eigendecomposition
        let mut c_inv_sqrt_y = self.eig_b.transpose() * &y_w;
        for i in 0..self.dim {
            c_inv_sqrt_y[i] /= self.eig_d[i];
        }
        let c_inv_sqrt_y = &self.eig_b * c_inv_sqrt_y;

        self.p_sigma = &self.p_sigma * (1.0 - self.c_sigma)
            + c_inv_sqrt_y * (self.c_sigma * (2.0 - self.c_sigma) * self.mu_eff).sqrt();
        let ps_norm = self.p_sigma.norm();
        let denom = (1.0 - (1.0 - self.c_sigma).powi(2 * (self.generation as i32 + 1))).sqrt();
        let h_sigma = if ps_norm / denom < (1.4 + 2.0 / (self.dim as f64 + 1.0)) * self.chi_n {
            1.0
        } else {
            0.0
        };
        self.p_c = &self.p_c * (1.0 - self.c_c)
            + &y_w * (h_sigma * (self.c_c * (2.0 - self.c_c) * self.mu_eff).sqrt());

        let mut rank_mu = DMatrix::<f64>::zeros(self.dim, self.dim);
        for (i, &w) in self.weights.iter().enumerate() {
            let y = (DVector::from_column_slice(&candidates[order[i]]) - &mean_old) / self.sigma;
            rank_mu += &y * y.transpose() * w;
        }
        let delta_h = (1.0 - h_sigma) * self.c_c * (2.0 - self.c_c);
        self.cov = &self.cov * (1.0 - self.c_1 - self.c_mu)
            + (&self.p_c * self.p_c.transpose() + &self.cov * delta_h) * self.c_1
            + rank_mu * self.c_mu;

        self.sigma *= ((self.c_sigma / self.d_sigma) * (ps_norm / self.chi_n - 1.0)).exp();
        self.mean = mean_new;
        self.generation += 1;
        self.refresh_eigen();
        Ok(())
    }

    /// Serialize the full state as a versioned JSON snapshot.
    pub fn checkpoint(&self) -> String {
        let snap = Checkpoint {
            version: 1,
            dim: self.dim,
            pop: self.pop,
            mean: self.mean.iter().cloned().collect(),
            sigma: self.sigma,
            cov: self.cov.iter().cloned().collect(),
            p_sigma: self.p_sigma.iter().cloned().collect(),
            p_c: self.p_c.iter().cloned().collect(),
            generation: self.generation,
            repairs: self.repairs,
        };
        serde_json::to_string_pretty(&snap).expect("checkpoint serializes")
    }

    /// Restore from a snapshot produced by `checkpoint`.
    pub fn restore(json: &str) -> Result<Self, CmaesError> {
        let snap: Checkpoint =
            serde_json::from_str(json).map_err(|e| CmaesError::BadCheckpoint(e.to_string()))?;
        if snap.version != 1 {
            return Err(CmaesError::BadCheckpoint(format!(
                "unsupported version {}",
                snap.version
            )));
        }
        let dim = snap.dim;
        if snap.mean.len() != dim || snap.cov.len() != dim * dim {
            return Err(CmaesError::BadCheckpoint("inconsistent dimensions".into()));
        }
        let mut s = CmaEs::new(&snap.mean, &vec![snap.sigma.max(1e-12); dim], Some(snap.pop))?;
        s.mean = DVector::from_vec(snap.mean);
        s.sigma = snap.sigma;
        s.cov = DMatrix::from_vec(dim, dim, snap.cov); // column-major; C symmetric
        s.p_sigma = DVector::from_vec(snap.p_sigma);
        s.p_c = DVector::from_vec(snap.p_c);
        s.generation = snap.generation;
        s.repairs = snap.repairs;
        s.refresh_eigen();
        Ok(s)
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Checkpoint {
    version: u32,
    dim: usize,
    pop: usize,
    mean: Vec<f64>,
    sigma: f64,
    cov: Vec<f64>,
    p_sigma: Vec<f64>,
    p_c: Vec<f64>,
    generation: u64,
    repairs: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn population_rule_reference_points() {
        assert_eq!(population_size(1), 4);
        assert_eq!(population_size(8), 12);
        assert_eq!(population_size(9), 13);
        assert_eq!(population_size(21), 16);
    }

    #[test]
    fn search_space_maps_bounds_to_cube_corners() {
        let space = SearchSpace::new(vec![
            ParamRange { lower: -2.0, upper: 6.0, initial: 0.0, spread: 1.0 },
            ParamRange { lower: 10.0, upper: 30.0, initial: 20.0, spread: 2.0 },
        ])
        .unwrap();
        assert_eq!(space.normalize(&[-2.0, 10.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(space.normalize(&[6.0, 30.0]).unwrap(), vec![1.0, 1.0]);
        let phys = vec![1.25, 17.5];
        let back = space.denormalize(&space.normalize(&phys).unwrap()).unwrap();
        for (a, b) in phys.iter().zip(&back) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        assert!(SearchSpace::new(vec![ParamRange {
            lower: 1.0,
            upper: 1.0,
            initial: 1.0,
            spread: 0.1
        }])
        .is_err());
    }

    #[test]
    fn vanishing_sigma_freezes_candidates_at_mean() {
        let es = CmaEs::new(&[0.5, 0.25, 0.75], &[1e-300, 1e-300, 1e-300], None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for cand in es.ask(&mut rng) {
            assert_eq!(cand, vec![0.5, 0.25, 0.75]);
        }
    }

    #[test]
    fn identity_covariance_sampling_statistics() {
        let dim = 3;
        let sigma = 0.05;
        let es = CmaEs::new(&[0.5; 3], &[sigma; 3], Some(10)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let mut sums = vec![0.0; dim];
        let mut sq = vec![vec![0.0; dim]; dim];
        let mut draws = 0usize;
        while draws < n {
            for cand in es.ask(&mut rng) {
                for i in 0..dim {
                    sums[i] += cand[i];
                    for j in 0..dim {
                        sq[i][j] += (cand[i] - 0.5) * (cand[j] - 0.5);
                    }
                }
                draws += 1;
                if draws >= n {
                    break;
                }
            }
        }
        for i in 0..dim {
            assert_abs_diff_eq!(sums[i] / n as f64, 0.5, epsilon = 5e-4);
            for j in 0..dim {
                let want = if i == j { sigma * sigma } else { 0.0 };
                let got = sq[i][j] / n as f64;
                assert!(
                    (got - want).abs() < 0.05 * sigma * sigma,
                    "cov[{i}][{j}] = {got:.2e} vs {want:.2e}"
                );
            }
        }
    }

    #[test]
    fn fixed_seed_reproduces_candidates_bitwise() {
        let es = CmaEs::new(&[0.4, 0.6], &[0.1, 0.2], None).unwrap();
        let a = es.ask(&mut ChaCha8Rng::seed_from_u64(9));
        let b = es.ask(&mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn equal_costs_recombine_lowest_indices() {
        let mut es = CmaEs::new(&[0.5, 0.5], &[0.1, 0.1], Some(6)).unwrap();
        let cands = es.ask(&mut ChaCha8Rng::seed_from_u64(11));
        let costs = vec![1.0; 6];
        let mu = 3;
        let weights = es.weights.clone();
        let mut want = vec![0.0; 2];
        for i in 0..mu {
            for d in 0..2 {
                want[d] += weights[i] * cands[i][d];
            }
        }
        es.tell(&cands, &costs).unwrap();
        let got = es.mean();
        for d in 0..2 {
            assert_abs_diff_eq!(got[d], want[d], epsilon = 1e-15);
        }
    }

    #[test]
    fn affine_cost_rescaling_gives_identical_updates() {
        let mk = || CmaEs::new(&[0.3, 0.7, 0.5], &[0.1; 3], Some(8)).unwrap();
        let mut es1 = mk();
        let mut es2 = mk();
        let mut rng1 = ChaCha8Rng::seed_from_u64(13);
        let mut rng2 = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..5 {
            let c1 = es1.ask(&mut rng1);
            let c2 = es2.ask(&mut rng2);
            assert_eq!(c1, c2);
            let costs1: Vec<f64> =
                c1.iter().map(|x| x.iter().map(|v| (v - 0.4).powi(2)).sum()).collect();
            let costs2: Vec<f64> = costs1.iter().map(|e| 3.5 * e + 0.2).collect();
            es1.tell(&c1, &costs1).unwrap();
            es2.tell(&c2, &costs2).unwrap();
            assert_eq!(es1.mean(), es2.mean());
            assert_eq!(es1.sigma().to_bits(), es2.sigma().to_bits());
        }
    }

    #[test]
    fn non_finite_costs_rank_last() {
        let mut es = CmaEs::new(&[0.5, 0.5], &[0.05, 0.05], Some(6)).unwrap();
        let cands = es.ask(&mut ChaCha8Rng::seed_from_u64(15));
        // NaN on the best-looking candidate must not enter recombination
        let mut costs = vec![f64::NAN, 1.0, 2.0, 3.0, 4.0, 5.0];
        es.tell(&cands, &costs).unwrap();
        let mean_with_nan = es.mean();
        let mut es2 = CmaEs::new(&[0.5, 0.5], &[0.05, 0.05], Some(6)).unwrap();
        costs[0] = 100.0; // explicit worst
        es2.tell(&cands, &costs).unwrap();
        assert_eq!(mean_with_nan, es2.mean());
    }

    #[test]
    fn sphere_converges_tightly() {
        let target = [0.62, 0.37, 0.55, 0.44, 0.51];
        let mut es = CmaEs::new(&[0.5; 5], &[0.15; 5], None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..300 {
            let cands = es.ask(&mut rng);
            let costs: Vec<f64> = cands
                .iter()
                .map(|x| x.iter().zip(&target).map(|(v, t)| (v - t).powi(2)).sum())
                .collect();
            es.tell(&cands, &costs).unwrap();
        }
        let m = es.mean();
        let dist: f64 =
            m.iter().zip(&target).map(|(v, t)| (v - t).powi(2)).sum::<f64>().sqrt();
        assert!(dist < 1e-6, "distance to optimum {dist:.2e}");
    }

    /// Rosenbrock in 4 dimensions, mapped into the cube around the optimum
    /// at x* = 1 (cube coordinate 0.5 maps to physical 1): documented budget
    /// of 1500 evolutions to reach f < 1e−8.
    #[test]
    fn rosenbrock_reaches_deep_optimum_within_budget() {
        let phys = |u: &[f64]| -> Vec<f64> { u.iter().map(|&v| 4.0 * v - 1.0).collect() };
        let rosen = |x: &[f64]| -> f64 {
            x.windows(2)
                .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
                .sum()
        };
        let mut es = CmaEs::new(&[0.4; 4], &[0.1; 4], Some(16)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut best = f64::INFINITY;
        for _ in 0..1500 {
            let cands = es.ask(&mut rng);
            let costs: Vec<f64> = cands.iter().map(|u| rosen(&phys(u))).collect();
            for &c in &costs {
                best = best.min(c);
            }
            es.tell(&cands, &costs).unwrap();
            if best < 1e-8 {
                break;
            }
        }
        assert!(best < 1e-8, "best Rosenbrock value {best:.2e}");
    }

    #[test]
    fn covariance_stays_spd_under_many_random_tells() {
        let mut es = CmaEs::new(&[0.5; 3], &[0.1; 3], Some(8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10_000 {
            let cands = es.ask(&mut rng);
            let costs: Vec<f64> = (0..cands.len()).map(|_| rng.random::<f64>()).collect();
            es.tell(&cands, &costs).unwrap();
            assert!(es.sigma() > 0.0 && es.sigma().is_finite());
        }
        // SPD: all eigenvalues at or above the floor
        assert!(es.eig_d.iter().all(|&d| d * d >= EIG_FLOOR * 0.999));
    }

    #[test]
    fn checkpoint_roundtrip_resumes_identically() {
        let mut es = CmaEs::new(&[0.5, 0.5], &[0.1, 0.1], Some(6)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..10 {
            let cands = es.ask(&mut rng);
            let costs: Vec<f64> =
                cands.iter().map(|x| (x[0] - 0.3).powi(2) + (x[1] - 0.8).powi(2)).collect();
            es.tell(&cands, &costs).unwrap();
        }
        let snap = es.checkpoint();
        let mut restored = CmaEs::restore(&snap).unwrap();
        assert_eq!(restored.generation(), es.generation());
        let mut rng_a = ChaCha8Rng::seed_from_u64(31);
        let mut rng_b = ChaCha8Rng::seed_from_u64(31);
        let ca = es.ask(&mut rng_a);
        let cb = restored.ask(&mut rng_b);
        assert_eq!(ca, cb);
        let costs: Vec<f64> = ca.iter().map(|x| x[0] + x[1]).collect();
        es.tell(&ca, &costs).unwrap();
        restored.tell(&cb, &costs).unwrap();
        assert_eq!(es.mean(), restored.mean());
        assert!(CmaEs::restore("{\"version\": 99}").is_err());
    }

    #[test]
    fn termination_on_flat_history_only() {
        let decreasing: Vec<f64> = (0..30).map(|k| 1.0 - 0.01 * k as f64).collect();
        assert!(!should_terminate(&decreasing, 20, 1e-3));
        let flat = vec![0.31; 25];
        assert!(should_terminate(&flat, 20, 1e-3));
        assert!(!should_terminate(&flat[..10], 20, 1e-3));
    }
}

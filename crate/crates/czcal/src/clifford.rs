//! Two-qubit Clifford group as symplectic tableaus with sign tracking, plus a
//! primitive-gate decomposition table.
//!
//! Elements are enumerated through the four entangling classes
//!
//! ```text
//!   single-qubit  (C1 ⊗ C1)                                   24·24        =   576
//!   CNOT-like     (C1 ⊗ C1) · CZ · (S1 ⊗ S1)                  24·24·3·3    =  5184
//!   iSWAP-like    (C1 ⊗ C1) · CZ · M2 · CZ · (S1 ⊗ S1)        24·24·3·3    =  5184
//!   SWAP-like     (C1 ⊗ C1) · CZ · M3a · CZ · M3b · CZ        24·24       =   576
//! ```
//!
//! where C1 is the single-qubit Clifford group, S1 = {I, ρ, ρ²} with ρ the
//! 120° axis permutation X→Y→Z→X, and the M layers are fixed single-qubit
//! rotations. The construction is validated at build time by checking that
//! all 11520 tableaus are distinct.
//!
//! Single-qubit words use only ±90° rotations about X and Y (π pulses appear
//! as two π/2 pulses), giving a mean of 7.75 physical SQ gates and exactly
//! 1.5 CZ gates per uniformly sampled Clifford.

use std::collections::HashMap;
use std::fmt;
use std::sync::OnceLock;

use nalgebra::Matrix4;
use rand::Rng;

use crate::propagator::equatorial_rotation;
use crate::C64;

/// Order of the two-qubit Clifford group.
pub const GROUP_SIZE: u32 = 11520;

/// Elements per entangling class, in CZ-count order 0,1,2,3.
pub const CLASS_SIZES: [u32; 4] = [576, 5184, 5184, 576];

#[derive(Debug, thiserror::Error)]
pub enum CliffordError {
    #[error("unknown gate token `{0}`")]
    BadToken(String),
    #[error("tableau is not in the two-qubit Clifford table")]
    NotInGroup,
}

// ---------------------------------------------------------------------------
// primitive gates

/// Physical single-qubit rotations available to the decomposition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum SqGate {
    X90,
    Xm90,
    X180,
    Xm180,
    Y90,
    Ym90,
    Y180,
    Ym180,
}

impl SqGate {
    pub fn matrix(self) -> [[C64; 2]; 2] {
        use std::f64::consts::{FRAC_PI_2, PI};
        let (axis, angle) = match self {
            SqGate::X90 => (0.0, FRAC_PI_2),
            SqGate::Xm90 => (0.0, -FRAC_PI_2),
            SqGate::X180 => (0.0, PI),
            SqGate::Xm180 => (0.0, -PI),
            SqGate::Y90 => (FRAC_PI_2, FRAC_PI_2),
            SqGate::Ym90 => (FRAC_PI_2, -FRAC_PI_2),
            SqGate::Y180 => (FRAC_PI_2, PI),
            SqGate::Ym180 => (FRAC_PI_2, -PI),
        };
        equatorial_rotation(axis, angle)
    }

    fn token(self) -> &'static str {
        match self {
            SqGate::X90 => "x90",
            SqGate::Xm90 => "xm90",
            SqGate::X180 => "x180",
            SqGate::Xm180 => "xm180",
            SqGate::Y90 => "y90",
            SqGate::Ym90 => "ym90",
            SqGate::Y180 => "y180",
            SqGate::Ym180 => "ym180",
        }
    }

    fn from_token(s: &str) -> Option<Self> {
        Some(match s {
            "x90" => SqGate::X90,
            "xm90" => SqGate::Xm90,
            "x180" => SqGate::X180,
            "xm180" => SqGate::Xm180,
            "y90" => SqGate::Y90,
            "ym90" => SqGate::Ym90,
            "y180" => SqGate::Y180,
            "ym180" => SqGate::Ym180,
            _ => return None,
        })
    }
}

/// One primitive gate in a flattened sequence. Qubit 0 is the first transmon
/// (high bit of the computational index), matching the gate-block ordering.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Gate {
    Sq { qubit: u8, kind: SqGate },
    Cz,
    VirtualZ { qubit: u8, angle: f64 },
}

impl Gate {
    /// Ideal 4×4 unitary on the two-qubit computational space.
    pub fn unitary4(&self) -> Matrix4<C64> {
        match *self {
            Gate::Sq { qubit, kind } => {
                let m = kind.matrix();
                let mut u = Matrix4::<C64>::zeros();
                for a in 0..2 {
                    for b in 0..2 {
                        for other in 0..2 {
                            let (r, c) = if qubit == 0 {
                                (2 * a + other, 2 * b + other)
                            } else {
                                (2 * other + a, 2 * other + b)
                            };
                            u[(r, c)] = m[a][b];
                        }
                    }
                }
                u
            }
            Gate::Cz => {
                let mut u = Matrix4::<C64>::identity();
                u[(3, 3)] = C64::new(-1.0, 0.0);
                u
            }
            Gate::VirtualZ { qubit, angle } => {
                let ph = C64::from_polar(1.0, angle);
                let mut u = Matrix4::<C64>::identity();
                for idx in 0..4usize {
                    let bit = if qubit == 0 { idx >> 1 } else { idx & 1 };
                    if bit == 1 {
                        u[(idx, idx)] = ph;
                    }
                }
                u
            }
        }
    }

    pub fn token(&self) -> String {
        match *self {
            Gate::Sq { qubit, kind } => format!("{}:{}", kind.token(), qubit),
            Gate::Cz => "cz".to_string(),
            Gate::VirtualZ { qubit, angle } => format!("vz:{qubit}:{angle}"),
        }
    }

    pub fn from_token(s: &str) -> Result<Self, CliffordError> {
        let bad = || CliffordError::BadToken(s.to_string());
        if s == "cz" {
            return Ok(Gate::Cz);
        }
        let mut parts = s.split(':');
        let head = parts.next().ok_or_else(bad)?;
        if head == "vz" {
            let qubit: u8 = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
            let angle: f64 = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
            if qubit > 1 || parts.next().is_some() {
                return Err(bad());
            }
            return Ok(Gate::VirtualZ { qubit, angle });
        }
        let kind = SqGate::from_token(head).ok_or_else(bad)?;
        let qubit: u8 = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        if qubit > 1 || parts.next().is_some() {
            return Err(bad());
        }
        Ok(Gate::Sq { qubit, kind })
    }
}

// ---------------------------------------------------------------------------
// Pauli algebra

/// Two-qubit Pauli in the canonical form i^phase · X^x · Z^z, where bit q of
/// the x and z masks addresses qubit q and the X factors stand left of the
/// Z factors. Y = iXZ, so a Hermitian Pauli has phase ≡ popcount(x & z) mod 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pauli {
    pub x: u8,
    pub z: u8,
    pub phase: u8,
}

impl Pauli {
    pub const fn identity() -> Self {
        Pauli { x: 0, z: 0, phase: 0 }
    }

    /// Matrix product self · other, reduced to canonical form.
    pub fn mul(self, other: Pauli) -> Pauli {
        // Z^{z1} past X^{x2} picks up (−1) per overlapping qubit.
        let swaps = (self.z & other.x).count_ones() as u8;
        Pauli {
            x: self.x ^ other.x,
            z: self.z ^ other.z,
            phase: (self.phase + other.phase + 2 * swaps) % 4,
        }
    }

    /// Sign of a Hermitian Pauli relative to its σ-string: ±1 as a phase
    /// exponent (0 or 2). Panics if not Hermitian.
    fn sign_exponent(self) -> u8 {
        let y_count = (self.x & self.z).count_ones() as u8;
        let s = (self.phase + 4 - y_count % 4) % 4;
        assert!(s % 2 == 0, "non-Hermitian Pauli");
        s
    }
}

// ---------------------------------------------------------------------------
// tableaus

/// Conjugation action of a Clifford: images of the generators X0, Z0, X1, Z1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tableau {
    pub im: [Pauli; 4],
}

fn gen_pauli(g: usize) -> Pauli {
    let q = g / 2;
    if g % 2 == 0 {
        Pauli { x: 1 << q, z: 0, phase: 0 }
    } else {
        Pauli { x: 0, z: 1 << q, phase: 0 }
    }
}

impl Tableau {
    pub fn identity() -> Self {
        Tableau { im: [gen_pauli(0), gen_pauli(1), gen_pauli(2), gen_pauli(3)] }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// Image of an arbitrary Pauli: expand P = i^p X0^{x0} X1^{x1} Z0^{z0} Z1^{z1}
    /// and substitute generator images factor by factor.
    pub fn apply(&self, p: Pauli) -> Pauli {
        let mut acc = Pauli { x: 0, z: 0, phase: p.phase };
        for q in 0..2u8 {
            if p.x >> q & 1 == 1 {
                acc = acc.mul(self.im[2 * q as usize]);
            }
        }
        for q in 0..2u8 {
            if p.z >> q & 1 == 1 {
                acc = acc.mul(self.im[2 * q as usize + 1]);
            }
        }
        acc
    }

    /// Composition in circuit-time order: self first, then `next`.
    pub fn then(&self, next: &Tableau) -> Tableau {
        Tableau {
            im: [
                next.apply(self.im[0]),
                next.apply(self.im[1]),
                next.apply(self.im[2]),
                next.apply(self.im[3]),
            ],
        }
    }

    /// Group inverse: symplectic part by S⁻¹ = Λ Sᵀ Λ over GF(2), signs fixed
    /// by composing with the residual Pauli frame.
    pub fn inverse(&self) -> Tableau {
        // rows of S: symplectic vectors (x0, x1, z0, z1) of the images,
        // indexed by generator. Λ pairs x_q with z_q.
        let vec_of = |p: Pauli| -> u8 { (p.x & 3) | ((p.z & 3) << 2) };
        // S[g] = row g of the symplectic matrix: image vector of generator g
        // reordered so S acts on column vectors; for the inverse we need
        // T[k][g] = ⟨Λ e_k, S e_g⟩ arithmetic. Work with explicit bits.
        let s: [u8; 4] = [
            vec_of(self.im[0]),
            vec_of(self.im[1]),
            vec_of(self.im[2]),
            vec_of(self.im[3]),
        ];
        // generator order (X0, Z0, X1, Z1) vs component order (x0,x1,z0,z1):
        // gen g carries basis vector e_{comp(g)} with comp = [0, 2, 1, 3].
        const COMP: [usize; 4] = [0, 2, 1, 3];
        // inverse symplectic: row for generator g, component c:
        // (S⁻¹)[c][comp(g)] = (Λ Sᵀ Λ)[c][comp(g)] = Sᵀ[λc][λcomp(g)] = S[λ comp(g)-as-gen...]
        // easier elementwise: M[c_out][c_in] with S given as images.
        let m = |c_out: usize, c_in: usize| -> u8 {
            // S as matrix: column comp(g) holds vec(image of g); entry (row c_out).
            // find generator with comp == c_in
            let g = COMP.iter().position(|&c| c == c_in).unwrap();
            s[g] >> c_out & 1
        };
        let lam = |c: usize| -> usize { (c + 2) % 4 }; // swaps x-block and z-block
        let minv = |c_out: usize, c_in: usize| -> u8 { m(lam(c_in), lam(c_out)) };
        // candidate inverse with zero phases
        let mut cand = Tableau::identity();
        for g in 0..4 {
            let c_in = COMP[g];
            let mut v: u8 = 0;
            for c_out in 0..4 {
                if minv(c_out, c_in) == 1 {
                    v |= 1 << c_out;
                }
            }
            let x = v & 3;
            let z = (v >> 2) & 3;
            // Hermitian canonical phase for the plain σ-string
            let phase = ((x & z).count_ones() % 2) as u8;
            cand.im[g] = Pauli { x, z, phase };
        }
        // residual frame: self∘cand maps each generator to ± itself
        let resid = self.then(&cand);
        let mut corr = Tableau::identity();
        for g in 0..4 {
            debug_assert_eq!(resid.im[g].x, gen_pauli(g).x);
            debug_assert_eq!(resid.im[g].z, gen_pauli(g).z);
            corr.im[g].phase = (corr.im[g].phase + 4 - resid.im[g].sign_exponent()) % 4;
        }
        cand.then(&corr)
    }
}

/// Tableau of a primitive gate. Virtual-Z gates are not representable for
/// arbitrary angles and never appear in decomposition words.
pub fn gate_tableau(gate: Gate) -> Tableau {
    match gate {
        Gate::Sq { qubit, kind } => {
            let (im_x, im_z) = sq_images(kind);
            let mut t = Tableau::identity();
            t.im[2 * qubit as usize] = embed(im_x, qubit);
            t.im[2 * qubit as usize + 1] = embed(im_z, qubit);
            t
        }
        Gate::Cz => Tableau {
            im: [
                Pauli { x: 1, z: 2, phase: 0 }, // X0 → X0 Z1
                Pauli { x: 0, z: 1, phase: 0 },
                Pauli { x: 2, z: 1, phase: 0 }, // X1 → Z0 X1
                Pauli { x: 0, z: 2, phase: 0 },
            ],
        },
        Gate::VirtualZ { .. } => panic!("virtual-Z has no fixed tableau"),
    }
}

/// Single-qubit Pauli with phase, for the C1 table.
type Pauli1 = Pauli; // x, z restricted to bit 0

fn embed(p: Pauli1, qubit: u8) -> Pauli {
    Pauli { x: p.x << qubit, z: p.z << qubit, phase: p.phase }
}

/// Conjugation images (X→, Z→) of the eight rotations, from
/// exp(−iθX/2)·Z·exp(iθX/2) = Z cosθ − Y sinθ and
/// exp(−iθY/2)·X·exp(iθY/2) = X cosθ − Z sinθ.
fn sq_images(kind: SqGate) -> (Pauli1, Pauli1) {
    let x = Pauli { x: 1, z: 0, phase: 0 };
    let y = Pauli { x: 1, z: 1, phase: 1 };
    let z = Pauli { x: 0, z: 1, phase: 0 };
    let neg = |p: Pauli| Pauli { phase: (p.phase + 2) % 4, ..p };
    match kind {
        SqGate::X90 => (x, neg(y)),
        SqGate::Xm90 => (x, y),
        SqGate::X180 | SqGate::Xm180 => (x, neg(z)),
        SqGate::Y90 => (neg(z), x),
        SqGate::Ym90 => (z, neg(x)),
        SqGate::Y180 | SqGate::Ym180 => (neg(x), neg(z)),
    }
}

// ---------------------------------------------------------------------------
// group table

struct C1Element {
    im: (Pauli1, Pauli1),
    word: Vec<SqGate>,
}

/// The full two-qubit Clifford table: class-structured words plus a tableau
/// index for recovery-gate lookup.
pub struct CliffordGroup {
    c1: Vec<C1Element>,
    s1: [usize; 3],
    tableaus: Vec<Tableau>,
    index_of: HashMap<Tableau, u32>,
    sq_counts: Vec<u8>,
}

static GROUP: OnceLock<CliffordGroup> = OnceLock::new();

/// Class boundaries in index space: [0,576) single-qubit, [576,5760)
/// CNOT-like, [5760,10944) iSWAP-like, [10944,11520) SWAP-like.
fn class_of_index(idx: u32) -> usize {
    match idx {
        0..=575 => 0,
        576..=5759 => 1,
        5760..=10943 => 2,
        _ => 3,
    }
}

const MIDDLE_ISWAP: [Gate; 2] = [
    Gate::Sq { qubit: 0, kind: SqGate::Y90 },
    Gate::Sq { qubit: 1, kind: SqGate::Xm90 },
];
const MIDDLE_SWAP_A: [Gate; 2] = [
    Gate::Sq { qubit: 0, kind: SqGate::Ym90 },
    Gate::Sq { qubit: 1, kind: SqGate::Y90 },
];
const MIDDLE_SWAP_B: [Gate; 2] = [
    Gate::Sq { qubit: 0, kind: SqGate::Y90 },
    Gate::Sq { qubit: 1, kind: SqGate::Ym90 },
];

impl CliffordGroup {
    /// The lazily built singleton table.
    pub fn get() -> &'static CliffordGroup {
        GROUP.get_or_init(CliffordGroup::build)
    }

    fn build() -> CliffordGroup {
        let c1 = build_c1();
        assert_eq!(c1.len(), 24, "single-qubit Clifford count");
        let s1 = find_s1(&c1);

        let mut group = CliffordGroup {
            c1,
            s1,
            tableaus: Vec::with_capacity(GROUP_SIZE as usize),
            index_of: HashMap::with_capacity(GROUP_SIZE as usize),
            sq_counts: Vec::with_capacity(GROUP_SIZE as usize),
        };
        for idx in 0..GROUP_SIZE {
            let word = group.word(idx);
            let mut t = Tableau::identity();
            let mut n_sq = 0u8;
            for &g in &word {
                t = t.then(&gate_tableau(g));
                if matches!(g, Gate::Sq { .. }) {
                    n_sq += 1;
                }
            }
            let prev = group.index_of.insert(t, idx);
            assert!(prev.is_none(), "class construction produced duplicate tableaus");
            group.tableaus.push(t);
            group.sq_counts.push(n_sq);
        }
        group
    }

    /// Decomposition of element `idx` into primitive gates, in time order.
    pub fn word(&self, idx: u32) -> Vec<Gate> {
        assert!(idx < GROUP_SIZE);
        let mut gates = Vec::new();
        let push_pair = |gates: &mut Vec<Gate>, i: usize, j: usize| {
            for &k in &self.c1[i].word {
                gates.push(Gate::Sq { qubit: 0, kind: k });
            }
            for &k in &self.c1[j].word {
                gates.push(Gate::Sq { qubit: 1, kind: k });
            }
        };
        match class_of_index(idx) {
            0 => {
                let k = idx as usize;
                push_pair(&mut gates, k / 24, k % 24);
            }
            1 => {
                let k = (idx - 576) as usize;
                let (i, j, a, b) = (k / 216, k / 9 % 24, k % 9 / 3, k % 3);
                push_pair(&mut gates, i, j);
                gates.push(Gate::Cz);
                push_pair(&mut gates, self.s1[a], self.s1[b]);
            }
            2 => {
                let k = (idx - 5760) as usize;
                let (i, j, a, b) = (k / 216, k / 9 % 24, k % 9 / 3, k % 3);
                push_pair(&mut gates, i, j);
                gates.push(Gate::Cz);
                gates.extend_from_slice(&MIDDLE_ISWAP);
                gates.push(Gate::Cz);
                push_pair(&mut gates, self.s1[a], self.s1[b]);
            }
            _ => {
                let k = (idx - 10944) as usize;
                push_pair(&mut gates, k / 24, k % 24);
                gates.push(Gate::Cz);
                gates.extend_from_slice(&MIDDLE_SWAP_A);
                gates.push(Gate::Cz);
                gates.extend_from_slice(&MIDDLE_SWAP_B);
                gates.push(Gate::Cz);
            }
        }
        gates
    }

    pub fn tableau(&self, idx: u32) -> &Tableau {
        &self.tableaus[idx as usize]
    }

    /// Number of CZ gates in the decomposition of `idx`.
    pub fn cz_count(&self, idx: u32) -> u32 {
        class_of_index(idx) as u32
    }

    pub fn sq_count(&self, idx: u32) -> u32 {
        self.sq_counts[idx as usize] as u32
    }

    /// Table index of a tableau, if it is a valid two-qubit Clifford.
    pub fn index_of(&self, t: &Tableau) -> Result<u32, CliffordError> {
        self.index_of.get(t).copied().ok_or(CliffordError::NotInGroup)
    }

    /// Index of the group inverse.
    pub fn inverse_index(&self, idx: u32) -> u32 {
        self.index_of(&self.tableaus[idx as usize].inverse())
            .expect("group closed under inversion")
    }

    /// Uniform sample over the full group.
    pub fn sample(&self, rng: &mut impl Rng) -> u32 {
        rng.random_range(0..GROUP_SIZE)
    }

    /// Exact decomposition-table averages (n̄_SQ, n̄_CZ) over the uniform
    /// distribution, by enumeration.
    pub fn exact_gate_means(&self) -> (f64, f64) {
        let sq: u64 = self.sq_counts.iter().map(|&c| c as u64).sum();
        let cz: u64 =
            CLASS_SIZES.iter().enumerate().map(|(class, &n)| class as u64 * n as u64).sum();
        (sq as f64 / GROUP_SIZE as f64, cz as f64 / GROUP_SIZE as f64)
    }
}

/// Breadth-first closure of the single-qubit Clifford group over ±90°
/// rotations, keeping the first (shortest) word found for each element.
/// Element 0 is the identity with an empty word.
fn build_c1() -> Vec<C1Element> {
    let gens = [SqGate::X90, SqGate::Xm90, SqGate::Y90, SqGate::Ym90];
    let mut elems: Vec<C1Element> =
        vec![C1Element { im: (gen_pauli(0), gen_pauli(1)), word: Vec::new() }];
    let mut seen: HashMap<(Pauli1, Pauli1), usize> = HashMap::new();
    seen.insert(elems[0].im, 0);
    let mut frontier = vec![0usize];
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for &e in &frontier {
            for &g in &gens {
                let (gx, gz) = sq_images(g);
                let t1 = Tableau { im: [gx, gz, gen_pauli(2), gen_pauli(3)] };
                let im = (t1.apply(elems[e].im.0), t1.apply(elems[e].im.1));
                if !seen.contains_key(&im) {
                    let mut word = elems[e].word.clone();
                    word.push(g);
                    seen.insert(im, elems.len());
                    next.push(elems.len());
                    elems.push(C1Element { im, word });
                }
            }
        }
        frontier = next;
    }
    elems
}

/// Locate S1 = {I, ρ, ρ²} in the C1 table, ρ the rotation with X→Y, Z→X.
fn find_s1(c1: &[C1Element]) -> [usize; 3] {
    let y = Pauli { x: 1, z: 1, phase: 1 };
    let x = Pauli { x: 1, z: 0, phase: 0 };
    let z = Pauli { x: 0, z: 1, phase: 0 };
    let rho = (y, x);
    let rho2 = (z, y);
    let pos = |target: (Pauli1, Pauli1)| -> usize {
        c1.iter().position(|e| e.im == target).expect("axis permutation present in C1")
    };
    [0, pos(rho), pos(rho2)]
}

impl fmt::Display for Gate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.token())
    }
}

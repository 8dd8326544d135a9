//! Stroboscopic open-loop control.
//!
//! A [`ControlSchedule`] describes which unitary `U_q` is applied at pulse
//! time `t_q = q * delta_t` (`q >= 1`, `t_0 = 0`). Random strategies are pure
//! functions of `(seed, q)`: pulse `q` draws from its own ChaCha stream, so any
//! pulse can be regenerated without replaying the ones before it.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{qr_positive_q, CMatrix, ONE, ZERO};
use crate::state::{ginibre, DensityMatrix, UnitaryMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    NoControl,
    HaarRandom,
    TwoDesign,
    RandomPermutation,
    DeterministicAlternation,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::NoControl => "no_control",
            Strategy::HaarRandom => "haar_random",
            Strategy::TwoDesign => "two_design",
            Strategy::RandomPermutation => "random_permutation",
            Strategy::DeterministicAlternation => "deterministic_alternation",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "no_control" | "none" => Strategy::NoControl,
            "haar_random" | "haar" => Strategy::HaarRandom,
            "two_design" | "clifford" => Strategy::TwoDesign,
            "random_permutation" => Strategy::RandomPermutation,
            "deterministic_alternation" | "alternation" => Strategy::DeterministicAlternation,
            other => return Err(Error::Config(format!("unknown strategy '{other}'"))),
        })
    }
}

/// How a digit string such as `"3124"` is read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermutationConvention {
    /// Digit `k` is the image of `k`: `"3124"` maps 1 to 3, 2 to 1, 3 to 2.
    #[default]
    Image,
    /// Digit `k` is the preimage of `k` (the inverse reading).
    Preimage,
}

/// Bijection on `{0, .., D-1}`; basis state `i` is sent to `image[i]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Permutation {
    image: Vec<usize>,
}

impl Permutation {
    pub fn new(image: Vec<usize>) -> Result<Self> {
        let n = image.len();
        let mut seen = vec![false; n];
        for &i in &image {
            if i >= n || seen[i] {
                return Err(Error::Config(format!("{image:?} is not a permutation")));
            }
            seen[i] = true;
        }
        Ok(Self { image })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            image: (0..dim).collect(),
        }
    }

    /// Parses one-based one-line notation such as `"2143"`.
    pub fn from_digits(digits: &str, convention: PermutationConvention) -> Result<Self> {
        let image = digits
            .chars()
            .map(|c| {
                c.to_digit(10)
                    .filter(|&d| d >= 1)
                    .map(|d| d as usize - 1)
                    .ok_or_else(|| Error::Config(format!("bad permutation digit '{c}' in '{digits}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        let p = Self::new(image)?;
        Ok(match convention {
            PermutationConvention::Image => p,
            PermutationConvention::Preimage => p.inverse(),
        })
    }

    pub fn to_digits(&self) -> String {
        self.image
            .iter()
            .map(|&i| char::from_digit(i as u32 + 1, 36).unwrap())
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.image.len()
    }

    pub fn image(&self) -> &[usize] {
        &self.image
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.image.len()];
        for (i, &j) in self.image.iter().enumerate() {
            inv[j] = i;
        }
        Self { image: inv }
    }

    /// `(self . other)(i) = self(other(i))`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            image: other.image.iter().map(|&i| self.image[i]).collect(),
        }
    }

    /// `P` with `P |i> = |image[i]>`.
    pub fn matrix(&self) -> UnitaryMatrix {
        let n = self.dim();
        let mut m = CMatrix::zeros(n);
        for (i, &j) in self.image.iter().enumerate() {
            m[(j, i)] = ONE;
        }
        UnitaryMatrix::from_trusted(m)
    }

    /// Lexicographic rank (Lehmer code), `0..D!`.
    pub fn rank(&self) -> u64 {
        let n = self.dim();
        let mut rank = 0u64;
        for i in 0..n {
            let smaller = self.image[i + 1..].iter().filter(|&&x| x < self.image[i]).count() as u64;
            rank = rank * (n - i) as u64 + smaller;
        }
        rank
    }

    pub fn from_rank(dim: usize, mut rank: u64) -> Result<Self> {
        let total = factorial(dim).ok_or(Error::FactorialGuard { dim, limit: 20 })?;
        if rank >= total {
            return Err(Error::RecordCorrupt(format!("permutation rank {rank} >= {dim}!")));
        }
        let mut digits = vec![0u64; dim];
        for i in (0..dim).rev() {
            let base = (dim - i) as u64;
            digits[i] = rank % base;
            rank /= base;
        }
        let mut pool: Vec<usize> = (0..dim).collect();
        let image = digits.into_iter().map(|d| pool.remove(d as usize)).collect();
        Ok(Self { image })
    }

    /// Uniformly random permutation (Fisher-Yates).
    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let mut image: Vec<usize> = (0..dim).collect();
        for i in (1..dim).rev() {
            let j = rng.random_range(0..=i);
            image.swap(i, j);
        }
        Self { image }
    }

    /// Every permutation of `dim` points, in rank order.
    pub fn all(dim: usize) -> impl Iterator<Item = Permutation> {
        let total = factorial(dim).unwrap_or(0);
        (0..total).map(move |r| Self::from_rank(dim, r).expect("rank in range"))
    }
}

fn factorial(n: usize) -> Option<u64> {
    (1..=n as u64).try_fold(1u64, |acc, k| acc.checked_mul(k))
}

/// Identifier stored in the measurement record for each applied pulse.
///
/// What the number means depends on the strategy: the pulse index `q` for
/// Haar draws (regenerated from the seed), an element index for the 2-design
/// and the alternation list, and the Lehmer rank for random permutations.
pub type UnitaryId = u64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlSchedule {
    pub strategy: Strategy,
    /// Time between pulses; ignored for [`Strategy::NoControl`].
    pub delta_t: f64,
    pub seed: u64,
    /// Digit strings, e.g. `["2143", "3124"]`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alternation: Vec<String>,
    #[serde(default)]
    pub convention: PermutationConvention,
}

impl ControlSchedule {
    pub fn no_control() -> Self {
        Self {
            strategy: Strategy::NoControl,
            delta_t: 0.0,
            seed: 0,
            alternation: Vec::new(),
            convention: PermutationConvention::Image,
        }
    }

    pub fn new(strategy: Strategy, delta_t: f64, seed: u64) -> Self {
        Self {
            strategy,
            delta_t,
            seed,
            alternation: Vec::new(),
            convention: PermutationConvention::Image,
        }
    }

    pub fn alternating(list: &[&str], delta_t: f64) -> Self {
        Self {
            strategy: Strategy::DeterministicAlternation,
            delta_t,
            seed: 0,
            alternation: list.iter().map(|s| s.to_string()).collect(),
            convention: PermutationConvention::Image,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn is_controlled(&self) -> bool {
        self.strategy != Strategy::NoControl
    }

    /// Checks the schedule against a system dimension.
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.is_controlled() && !(self.delta_t > 0.0 && self.delta_t.is_finite()) {
            return Err(Error::Config(format!("delta_t must be positive, got {}", self.delta_t)));
        }
        let alternating = self.strategy == Strategy::DeterministicAlternation;
        if alternating == self.alternation.is_empty() {
            return Err(Error::Config(
                "an alternation list is required for, and only for, deterministic_alternation".into(),
            ));
        }
        for p in self.permutations()? {
            if p.dim() != dim {
                return Err(Error::Config(format!(
                    "permutation {} acts on {} points, system has D = {dim}",
                    p.to_digits(),
                    p.dim()
                )));
            }
        }
        if self.strategy == Strategy::TwoDesign && !has_two_design(dim) {
            return Err(Error::UnsupportedDesign(dim));
        }
        Ok(())
    }

    /// The alternation list, parsed.
    pub fn permutations(&self) -> Result<Vec<Permutation>> {
        self.alternation
            .iter()
            .map(|s| Permutation::from_digits(s, self.convention))
            .collect()
    }

    /// Replaces an unsupported 2-design request by Haar sampling.
    pub fn with_design_fallback(&self, dim: usize) -> (Self, bool) {
        if self.strategy == Strategy::TwoDesign && !has_two_design(dim) {
            (
                Self {
                    strategy: Strategy::HaarRandom,
                    ..self.clone()
                },
                true,
            )
        } else {
            (self.clone(), false)
        }
    }

    fn pulse_rng(&self, q: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        // Stream 0 is left for the measurement noise.
        rng.set_stream(q);
        rng
    }

    /// `U_q` and the identifier recorded for it.
    pub fn next_unitary(&self, dim: usize, q: u64) -> Result<(UnitaryMatrix, UnitaryId)> {
        if q == 0 {
            return Err(Error::Config("pulse index starts at 1".into()));
        }
        Ok(match self.strategy {
            Strategy::NoControl => (UnitaryMatrix::identity(dim), 0),
            Strategy::HaarRandom => (haar_sample(dim, &mut self.pulse_rng(q)), q),
            Strategy::TwoDesign => {
                let set = two_design_set(dim)?;
                let k = self.pulse_rng(q).random_range(0..set.len());
                (set[k].clone(), k as u64)
            }
            Strategy::RandomPermutation => {
                let p = Permutation::random(dim, &mut self.pulse_rng(q));
                (p.matrix(), p.rank())
            }
            Strategy::DeterministicAlternation => {
                let perms = self.permutations()?;
                if perms.is_empty() {
                    return Err(Error::Config("empty alternation list".into()));
                }
                let k = ((q - 1) % perms.len() as u64) as usize;
                (perms[k].matrix(), k as u64)
            }
        })
    }

    /// Rebuilds the unitary a record attributes to pulse `q`.
    pub fn resolve(&self, dim: usize, q: u64, id: UnitaryId) -> Result<UnitaryMatrix> {
        let corrupt = |what: String| Error::RecordCorrupt(what);
        match self.strategy {
            Strategy::NoControl => Ok(UnitaryMatrix::identity(dim)),
            Strategy::HaarRandom => {
                if id != q {
                    return Err(corrupt(format!("Haar pulse {q} recorded with id {id}")));
                }
                Ok(haar_sample(dim, &mut self.pulse_rng(q)))
            }
            Strategy::TwoDesign => {
                let set = two_design_set(dim)?;
                set.get(id as usize)
                    .cloned()
                    .ok_or_else(|| corrupt(format!("design element {id} out of range")))
            }
            Strategy::RandomPermutation => Ok(Permutation::from_rank(dim, id)?.matrix()),
            Strategy::DeterministicAlternation => {
                let perms = self.permutations()?;
                perms
                    .get(id as usize)
                    .map(Permutation::matrix)
                    .ok_or_else(|| corrupt(format!("alternation element {id} out of range")))
            }
        }
    }
}

/// Haar-random unitary: QR of a Ginibre matrix with `R` given a positive diagonal.
pub fn haar_sample<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> UnitaryMatrix {
    UnitaryMatrix::from_trusted(qr_positive_q(&ginibre(dim, rng)))
}

pub fn has_two_design(dim: usize) -> bool {
    matches!(dim, 2 | 4)
}

/// Bundled unitary 2-designs: the single-qubit Clifford group (24 elements)
/// for `D = 2` and the two-qubit Clifford group (11520 elements) for `D = 4`,
/// both modulo global phase.
pub fn two_design_set(dim: usize) -> Result<&'static [UnitaryMatrix]> {
    static ONE_QUBIT: OnceLock<Vec<UnitaryMatrix>> = OnceLock::new();
    static TWO_QUBIT: OnceLock<Vec<UnitaryMatrix>> = OnceLock::new();
    match dim {
        2 => Ok(ONE_QUBIT.get_or_init(|| enumerate_group(&clifford_generators(1)))),
        4 => Ok(TWO_QUBIT.get_or_init(|| enumerate_group(&clifford_generators(2)))),
        d => Err(Error::UnsupportedDesign(d)),
    }
}

fn clifford_generators(qubits: usize) -> Vec<CMatrix> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let h = CMatrix::from_row_major(
        2,
        vec![
            Complex64::new(s, 0.0),
            Complex64::new(s, 0.0),
            Complex64::new(s, 0.0),
            Complex64::new(-s, 0.0),
        ],
    );
    let phase = CMatrix::from_row_major(2, vec![ONE, ZERO, ZERO, Complex64::new(0.0, 1.0)]);
    match qubits {
        1 => vec![h, phase],
        2 => {
            let id = CMatrix::identity(2);
            let mut cnot = CMatrix::zeros(4);
            for (i, j) in [(0, 0), (1, 1), (2, 3), (3, 2)] {
                cnot[(i, j)] = ONE;
            }
            vec![kron(&h, &id), kron(&id, &h), kron(&phase, &id), kron(&id, &phase), cnot]
        }
        _ => unreachable!("only one- and two-qubit Clifford groups are bundled"),
    }
}

fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let (m, n) = (a.dim(), b.dim());
    CMatrix::from_fn(m * n, |i, j| a[(i / n, j / n)] * b[(i % n, j % n)])
}

/// Fixes the global phase so the first non-negligible entry is real positive.
fn canonical_phase(m: &CMatrix) -> CMatrix {
    let pivot = m
        .as_slice()
        .iter()
        .find(|z| z.norm() > 1e-6)
        .copied()
        .expect("unitary has a nonzero entry");
    m.scale(pivot.conj() / pivot.norm())
}

fn group_key(m: &CMatrix) -> Vec<i64> {
    m.as_slice()
        .iter()
        .flat_map(|z| [(z.re * 1e8).round() as i64, (z.im * 1e8).round() as i64])
        .collect()
}

/// Breadth-first closure of the generated group, modulo global phase.
fn enumerate_group(generators: &[CMatrix]) -> Vec<UnitaryMatrix> {
    let dim = generators[0].dim();
    let start = CMatrix::identity(dim);
    let mut seen: HashMap<Vec<i64>, usize> = HashMap::new();
    seen.insert(group_key(&start), 0);
    let mut elements = vec![start];
    let mut head = 0;
    while head < elements.len() {
        let current = elements[head].clone();
        head += 1;
        for g in generators {
            let next = canonical_phase(&g.matmul(&current));
            let key = group_key(&next);
            if let Entry::Vacant(slot) = seen.entry(key) {
                slot.insert(elements.len());
                elements.push(next);
            }
        }
    }
    elements.into_iter().map(UnitaryMatrix::from_trusted).collect()
}

/// Unitary carrying the dominant eigenvector of `rho` onto `target`.
///
/// After the map, `<target| V rho V^dagger |target>` equals the largest
/// eigenvalue of `rho`.
pub fn final_preparation_unitary(rho: &DensityMatrix, target: &[Complex64]) -> Result<UnitaryMatrix> {
    let dim = rho.dim();
    if target.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: target.len(),
        });
    }
    let norm = target.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-10 {
        return Err(Error::Config(format!("target state has norm {norm}, expected 1")));
    }
    // Eigenbasis of rho with the dominant vector moved to column 0.
    let (_, vecs) = rho.matrix().eigh();
    let source = CMatrix::from_fn(dim, |i, j| vecs[(i, if j == 0 { dim - 1 } else { j - 1 })]);
    let dest = basis_completing(target);
    Ok(UnitaryMatrix::from_trusted(dest.matmul(&source.adjoint())))
}

/// Unitary whose first column is exactly `v`.
fn basis_completing(v: &[Complex64]) -> CMatrix {
    let dim = v.len();
    let pivot = (0..dim)
        .max_by(|&a, &b| v[a].norm().total_cmp(&v[b].norm()))
        .unwrap_or(0);
    let mut seed = CMatrix::zeros(dim);
    let mut col = 1;
    for i in 0..dim {
        seed[(i, 0)] = v[i];
    }
    for e in (0..dim).filter(|&e| e != pivot) {
        seed[(e, col)] = ONE;
        col += 1;
    }
    let mut q = qr_positive_q(&seed);
    // R_00 = |v| = 1 is real positive, so column 0 of Q is v up to rounding.
    for i in 0..dim {
        q[(i, 0)] = v[i];
    }
    q
}

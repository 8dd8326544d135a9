//! Closed-form results: noise-averaged impurity drift, Haar averages through
//! permutation-operator contractions, the permutation-averaged projector
//! model, log-infidelity rates and the speed-up bounds built on them.
//!
//! Every function here has an independent counterpart in [`crate::oracle`].

use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::control::Permutation;
use crate::error::{Error, Result};
use crate::linalg::CMatrix;
use crate::state::{dissipator, innovator, jz_operator, DensityMatrix, Observable, TRACE_TOL};

/// Largest dimension for which `D!` permutations are enumerated.
pub const MAX_ENUMERATED_DIM: usize = 8;

/// `d<ln Delta>/dt` without control is `-4 gamma` (per unit `gamma`).
pub const NO_CONTROL_LOG_INFIDELITY_RATE: f64 = 4.0;

/// Noise-averaged impurity drift `<dL>/dt` at fixed `rho` and observable:
///
/// `-8 gamma { tr(X rho X rho) - 2 tr(X rho) tr(X rho^2) + tr(X rho)^2 tr(rho^2) }`.
pub fn mean_impurity_increment(rho: &DensityMatrix, xc: &Observable, gamma: f64) -> f64 {
    let r = rho.matrix();
    let x = xc.matrix();
    let xr = x.matmul(r);
    let xrxr = xr.trace_product(&xr).re;
    let mean = xr.trace().re;
    let x_rho2 = xr.trace_product(r).re;
    let purity = rho.purity();
    -8.0 * gamma * (xrxr - 2.0 * mean * x_rho2 + mean * mean * purity)
}

fn require_traceless(x: &Observable) -> Result<()> {
    let tr = x.matrix().trace().norm();
    if tr > TRACE_TOL {
        return Err(Error::NotTraceless(tr));
    }
    Ok(())
}

/// Haar integral of `T1 = tr[X U rho U^dagger X U rho U^dagger]` for traceless `X`:
/// `tr(X^2) (D - tr rho^2) / (D (D^2 - 1))`.
pub fn haar_integral_t1(rho: &DensityMatrix, x: &Observable) -> Result<f64> {
    require_traceless(x)?;
    let d = rho.dim() as f64;
    Ok(x.trace_sq() * (d - rho.purity()) / (d * (d * d - 1.0)))
}

/// Permutation of the four tensor slots of `(C^D)^{⊗4}`, in one-line digit
/// notation: `P_{2341}` has the bra of index `m` sitting in slot `digits[m]`,
/// so that `tr[(A⊗B⊗C⊗D) P_{2341}] = tr(ABCD)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SlotPermutation([usize; 4]);

impl SlotPermutation {
    pub const IDENTITY: Self = Self([0, 1, 2, 3]);

    /// Parses `"2341"`-style notation.
    pub fn parse(digits: &str) -> Result<Self> {
        let p = Permutation::from_digits(digits, crate::control::PermutationConvention::Image)?;
        let img: [usize; 4] = p
            .image()
            .try_into()
            .map_err(|_| Error::Config(format!("slot permutation '{digits}' must have 4 digits")))?;
        Ok(Self(img))
    }

    pub fn digits(&self) -> String {
        self.0
            .iter()
            .map(|&d| char::from_digit(d as u32 + 1, 10).unwrap())
            .collect()
    }

    /// Operator product `self * rhs`: `(P_a P_b)|j> = |j_{b(a(1))}, ...>`.
    pub fn then(&self, rhs: &Self) -> Self {
        Self([rhs.0[self.0[0]], rhs.0[self.0[1]], rhs.0[self.0[2]], rhs.0[self.0[3]]])
    }

    /// `tr[(A_1 ⊗ A_2 ⊗ A_3 ⊗ A_4) P]` as a product of traces over the cycles
    /// of the permutation. No `D^4`-dimensional object is formed.
    pub fn contract(&self, ops: [&CMatrix; 4]) -> Complex64 {
        let mut visited = [false; 4];
        let mut total = Complex64::new(1.0, 0.0);
        for start in 0..4 {
            if visited[start] {
                continue;
            }
            // Cycle m -> d(m) -> d(d(m)) ...; the factor is tr(A_{d(m)} A_{d^2(m)} ...).
            let mut product: Option<CMatrix> = None;
            let mut m = start;
            loop {
                visited[m] = true;
                let next = self.0[m];
                product = Some(match product {
                    None => ops[next].clone(),
                    Some(p) => p.matmul(ops[next]),
                });
                m = next;
                if m == start {
                    break;
                }
            }
            total *= product.expect("cycle is non-empty").trace();
        }
        total
    }
}

impl fmt::Display for SlotPermutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.digits())
    }
}

/// `Q' = ∫dU U⊗U†⊗U⊗U† = [D(P2143 + P4321) - (P4123 + P2341)] / (D(D^2-1))`,
/// as `(weight, permutation)` pairs with weight `D` or `-1` before the common
/// denominator.
pub fn q_prime_terms(dim: usize) -> Vec<(f64, SlotPermutation)> {
    let d = dim as f64;
    [("2143", d), ("4321", d), ("4123", -1.0), ("2341", -1.0)]
        .into_iter()
        .map(|(s, w)| (w, SlotPermutation::parse(s).expect("valid literal")))
        .collect()
}

/// `∫dU tr[A U B U† C U Dm U†] = tr[(A⊗B⊗C⊗Dm) Q' P2341]`.
pub fn q_prime_fourth_moment(a: &CMatrix, b: &CMatrix, c: &CMatrix, dm: &CMatrix) -> Result<Complex64> {
    let dim = a.dim();
    for m in [b, c, dm] {
        if m.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: m.dim(),
            });
        }
    }
    if dim < 2 {
        return Err(Error::SingularFormula(dim));
    }
    let d = dim as f64;
    let cyclic = SlotPermutation::parse("2341")?;
    let sum: Complex64 = q_prime_terms(dim)
        .into_iter()
        .map(|(w, p)| p.then(&cyclic).contract([a, b, c, dm]) * w)
        .sum();
    Ok(sum / (d * (d * d - 1.0)))
}

/// Haar-averaged impurity drift for traceless `X`:
/// `-8 tr(X^2)/(D^2-1) gamma B` with `B = 1 - 2 tr rho^3 + (tr rho^2)^2`.
/// Returns `(rate, B)`.
pub fn haar_avg_dl_rate(rho: &DensityMatrix, x: &Observable, gamma: f64) -> Result<(f64, f64)> {
    require_traceless(x)?;
    let d = rho.dim() as f64;
    let p2 = rho.purity();
    let brace = 1.0 - 2.0 * rho.moment(3) + p2 * p2;
    Ok((-8.0 * x.trace_sq() / (d * d - 1.0) * gamma * brace, brace))
}

/// Haar-averaged decay rate of the impurity bound for `X = J_z`: `(2/3) D gamma`.
pub fn purification_rate(dim: usize, gamma: f64) -> f64 {
    2.0 / 3.0 * dim as f64 * gamma
}

/// `exp(-(2/3) D gamma t) L(0)`: upper bound on the Haar- and noise-averaged impurity.
pub fn purification_upper_bound(l0: f64, dim: usize, gamma: f64, t: f64) -> f64 {
    (-purification_rate(dim, gamma) * t).exp() * l0
}

/// Asymptotic purification speed-up of random unitaries, `2D/3`.
pub fn purification_speedup_asymptote(dim: usize) -> f64 {
    2.0 * dim as f64 / 3.0
}

/// Speed-up reported for state-dependent feedback, `2(D+1)/3`, kept as a
/// comparison constant.
pub fn feedback_purification_speedup(dim: usize) -> f64 {
    2.0 * (dim as f64 + 1.0) / 3.0
}

/// `aleph = D(D+1)/12`.
pub fn aleph(dim: usize) -> f64 {
    let d = dim as f64;
    d * (d + 1.0) / 12.0
}

/// Column-stacked superoperator matrix of a linear map on `D x D` matrices.
/// Entry `(i*D + j, a*D + b)` is `[f(|a><b|)]_{ij}`.
pub fn superoperator(dim: usize, f: impl Fn(&CMatrix) -> CMatrix) -> CMatrix {
    let n = dim * dim;
    let mut s = CMatrix::zeros(n);
    for a in 0..dim {
        for b in 0..dim {
            let mut e = CMatrix::zeros(dim);
            e[(a, b)] = Complex64::new(1.0, 0.0);
            let out = f(&e);
            for i in 0..dim {
                for j in 0..dim {
                    s[(i * dim + j, a * dim + b)] = out[(i, j)];
                }
            }
        }
    }
    s
}

/// `vec(M) vec(M)^dagger`.
fn vec_outer(m: &CMatrix) -> CMatrix {
    CMatrix::outer(m.as_slice())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PermutationAverageReport {
    pub dim: usize,
    pub aleph: f64,
    /// Max elementwise difference of the two drift superoperators.
    pub drift_max_diff: f64,
    /// Max elementwise difference of the noise second moments over the test states.
    pub noise_max_diff: f64,
    pub n_states: usize,
}

/// Compares the permutation-averaged `J_z` measurement with `D` projector
/// measurements of strength `aleph`:
///
/// * drift: `(2 gamma/D!) Σ_P D[P†J_zP]` vs `2 gamma aleph Σ_i D[Π_i]`
/// * noise: `(2 gamma/D!) Σ_P h_P h_P†` vs `2 gamma aleph Σ_i h_i h_i†` with
///   `h = vec(H[.] rho)`, at each of `states`.
///
/// `aleph_override` replaces the projector-model constant (fault injection).
pub fn permutation_averaged_generator(
    dim: usize,
    gamma: f64,
    states: &[DensityMatrix],
    aleph_override: Option<f64>,
) -> Result<PermutationAverageReport> {
    if dim > MAX_ENUMERATED_DIM {
        return Err(Error::FactorialGuard {
            dim,
            limit: MAX_ENUMERATED_DIM,
        });
    }
    let jz = jz_operator(dim)?;
    let k = aleph_override.unwrap_or_else(|| aleph(dim));
    let observables: Vec<CMatrix> = Permutation::all(dim)
        .map(|p| {
            let u = p.matrix();
            u.matrix().adjoint().matmul(jz.matrix()).matmul(u.matrix())
        })
        .collect();
    let weight = 2.0 * gamma / observables.len() as f64;
    let projectors: Vec<CMatrix> = (0..dim)
        .map(|i| Observable::projector(dim, i).map(|o| o.matrix().clone()))
        .collect::<Result<_>>()?;

    let averaged = superoperator(dim, |e| {
        observables
            .iter()
            .fold(CMatrix::zeros(dim), |acc, x| acc.add(&dissipator(x, e)))
            .scale_real(weight)
    });
    let reduced = superoperator(dim, |e| {
        projectors
            .iter()
            .fold(CMatrix::zeros(dim), |acc, pi| acc.add(&dissipator(pi, e)))
            .scale_real(2.0 * gamma * k)
    });
    let drift_max_diff = averaged.max_abs_diff(&reduced);

    let mut noise_max_diff = 0.0f64;
    for rho in states {
        if rho.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: rho.dim(),
            });
        }
        let r = rho.matrix();
        let n = dim * dim;
        let lhs = observables
            .iter()
            .fold(CMatrix::zeros(n), |acc, x| acc.add(&vec_outer(&innovator(x, r))))
            .scale_real(weight);
        let rhs = projectors
            .iter()
            .fold(CMatrix::zeros(n), |acc, pi| acc.add(&vec_outer(&innovator(pi, r))))
            .scale_real(2.0 * gamma * k);
        noise_max_diff = noise_max_diff.max(lhs.max_abs_diff(&rhs));
    }
    Ok(PermutationAverageReport {
        dim,
        aleph: k,
        drift_max_diff,
        noise_max_diff,
        n_states: states.len(),
    })
}

fn check_probabilities(p: &[f64]) -> Result<()> {
    if p.len() < 2 {
        return Err(Error::InvalidDimension(p.len()));
    }
    if p.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::InvalidProbabilities(format!("negative entry in {p:?}")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidProbabilities(format!("sums to {total}")));
    }
    Ok(())
}

/// Largest probability mass one step may clip before it is treated as a
/// step-size problem.
pub const MAX_CLIPPED_MASS: f64 = 1e-6;

/// Euler step of the measurement-basis populations under the
/// permutation-averaged dynamics:
///
/// `dp_i = 2 sqrt(2 gamma aleph) { dw_i (p_i - p_i^2) - p_i Σ_{j≠i} p_j dw_j }`,
///
/// followed by clipping at zero and renormalization.
pub fn population_sde_step(p: &[f64], gamma: f64, dt: f64, dws: &[f64]) -> Result<Vec<f64>> {
    check_probabilities(p)?;
    if dws.len() != p.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: dws.len(),
        });
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    let c = 2.0 * (2.0 * gamma * aleph(p.len())).sqrt();
    let weighted: f64 = p.iter().zip(dws).map(|(pi, w)| pi * w).sum();
    let mut next: Vec<f64> = p
        .iter()
        .zip(dws)
        .map(|(&pi, &wi)| {
            // dw_i (p_i - p_i^2) - p_i Σ_{j≠i} p_j dw_j = p_i (dw_i - Σ_j p_j dw_j)
            pi + c * pi * (wi - weighted)
        })
        .collect();
    let clipped: f64 = next.iter().filter(|&&x| x < 0.0).map(|x| -x).sum();
    if clipped > MAX_CLIPPED_MASS {
        return Err(Error::ExcessiveClipping { mass: clipped });
    }
    for x in next.iter_mut() {
        *x = x.max(0.0);
    }
    let total: f64 = next.iter().sum();
    for x in next.iter_mut() {
        *x /= total;
    }
    Ok(next)
}

/// Mean rate of `ln Delta` under the permutation-averaged dynamics, with
/// `p_0` the largest population:
///
/// `-4 gamma aleph p_0^2 [1 + Σ_{j≠0} p_j^2 / Delta^2]`.
pub fn log_infidelity_rate(p: &[f64], gamma: f64) -> Result<f64> {
    check_probabilities(p)?;
    let (delta, top) = crate::state::infidelity_of_weights(p);
    if delta <= 0.0 {
        return Err(Error::InvalidProbabilities(
            "pure distribution has no log-infidelity".into(),
        ));
    }
    let p0 = p[top];
    let others: f64 = p
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &x)| x * x)
        .sum();
    Ok(-4.0 * gamma * aleph(p.len()) * p0 * p0 * (1.0 + others / (delta * delta)))
}

/// `(1-Delta, Delta/(D-1), ..., Delta/(D-1))`.
pub fn flat_tail_profile(dim: usize, delta: f64) -> Vec<f64> {
    let mut p = vec![delta / (dim as f64 - 1.0); dim];
    p[0] = 1.0 - delta;
    p
}

/// `(1-Delta, Delta, 0, ..., 0)`.
pub fn two_level_profile(dim: usize, delta: f64) -> Vec<f64> {
    let mut p = vec![0.0; dim];
    p[0] = 1.0 - delta;
    p[1] = delta;
    p
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundContext {
    /// Rates of `d<ln Delta>/dt`, in units of `1/time`, sign dropped.
    LogInfidelity,
    /// Ratios against the no-control rate.
    Speedup,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateBounds {
    pub lower: f64,
    pub upper: f64,
    pub context: BoundContext,
}

impl RateBounds {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

/// Magnitudes of the log-infidelity rate at fixed `Delta` for the flat-tail
/// (`lower`, `4 gamma aleph p0^2 D/(D-1)`) and two-level (`upper`,
/// `8 gamma aleph p0^2`) profiles.
pub fn log_infidelity_rate_bounds(dim: usize, delta: f64, gamma: f64) -> RateBounds {
    let p0 = 1.0 - delta;
    let d = dim as f64;
    let k = aleph(dim);
    RateBounds {
        lower: 4.0 * gamma * k * p0 * p0 * d / (d - 1.0),
        upper: 8.0 * gamma * k * p0 * p0,
        context: BoundContext::LogInfidelity,
    }
}

/// `D^2(D+1)/(12(D-1)) <= S <= D(D+1)/6`.
pub fn measurement_speedup_bounds(dim: usize) -> Result<RateBounds> {
    if dim < 2 {
        return Err(Error::InvalidDimension(dim));
    }
    let asymptotic = log_infidelity_rate_bounds(dim, 0.0, 1.0);
    Ok(RateBounds {
        lower: asymptotic.lower / NO_CONTROL_LOG_INFIDELITY_RATE,
        upper: asymptotic.upper / NO_CONTROL_LOG_INFIDELITY_RATE,
        context: BoundContext::Speedup,
    })
}

/// `1 - 2 tr rho^3 + (tr rho^2)^2`.
pub fn brace_factor(rho: &DensityMatrix) -> f64 {
    let p2 = rho.purity();
    1.0 - 2.0 * rho.moment(3) + p2 * p2
}

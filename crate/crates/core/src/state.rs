//! States, observables and unitaries, plus the scalar figures of merit.
//!
//! The three newtypes validate their invariants on construction. Values
//! produced inside the integrator go through [`DensityMatrix::from_engine`],
//! which trusts the caller's own positivity screen instead of re-running an
//! eigensolver every step.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{CMatrix, ONE};

pub const HERMITIAN_TOL: f64 = 1e-12;
pub const TRACE_TOL: f64 = 1e-12;
pub const PSD_TOL: f64 = 1e-10;
pub const UNITARY_TOL: f64 = 1e-10;

fn check_dim(dim: usize) -> Result<()> {
    if dim < 2 {
        return Err(Error::InvalidDimension(dim));
    }
    Ok(())
}

/// Conditional state of a `D`-level system.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix(CMatrix);

impl DensityMatrix {
    /// Validates Hermiticity, unit trace and positivity.
    pub fn new(m: CMatrix) -> Result<Self> {
        check_dim(m.dim())?;
        let herm = m.hermiticity_defect();
        if herm > HERMITIAN_TOL {
            return Err(Error::NotHermitian(herm));
        }
        let tr = m.trace();
        if (tr - ONE).norm() > TRACE_TOL {
            return Err(Error::BadTrace(tr.re));
        }
        let min = m.eigvalsh()[0];
        if min < -PSD_TOL {
            return Err(Error::NotPositive(min));
        }
        Ok(Self(m))
    }

    /// Wraps a matrix whose invariants were already enforced by the integrator.
    pub(crate) fn from_engine(m: CMatrix) -> Self {
        Self(m)
    }

    pub fn maximally_mixed(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        Ok(Self(CMatrix::from_real_diagonal(&vec![1.0 / dim as f64; dim])))
    }

    /// `|psi><psi|` for a (not necessarily normalized) vector.
    pub fn pure(psi: &[Complex64]) -> Result<Self> {
        check_dim(psi.len())?;
        let norm = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Config("zero state vector".into()));
        }
        let v: Vec<Complex64> = psi.iter().map(|z| z / norm).collect();
        Ok(Self(CMatrix::outer(&v)))
    }

    /// Basis state `|k><k|`.
    pub fn basis(dim: usize, k: usize) -> Result<Self> {
        check_dim(dim)?;
        if k >= dim {
            return Err(Error::Config(format!("basis index {k} out of range for D = {dim}")));
        }
        let mut d = vec![0.0; dim];
        d[k] = 1.0;
        Ok(Self(CMatrix::from_real_diagonal(&d)))
    }

    pub fn diagonal(populations: &[f64]) -> Result<Self> {
        Self::new(CMatrix::from_real_diagonal(populations))
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> CMatrix {
        self.0
    }

    /// Populations `rho_ii` in the computational (measurement) basis.
    pub fn populations(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.0[(i, i)].re).collect()
    }

    /// Ascending eigenvalues.
    pub fn eigenvalues(&self) -> Vec<f64> {
        self.0.eigvalsh()
    }

    /// `tr rho^2`.
    pub fn purity(&self) -> f64 {
        self.0.frobenius_sq()
    }

    /// `tr rho^k` for `k >= 1`.
    pub fn moment(&self, k: u32) -> f64 {
        match k {
            0 => self.dim() as f64,
            1 => self.0.trace().re,
            2 => self.purity(),
            _ => {
                let mut p = self.0.clone();
                for _ in 1..k {
                    p = p.matmul(&self.0);
                }
                p.trace().re
            }
        }
    }
}

/// Monitored Hermitian operator.
///
/// [`Observable::new`] insists on a traceless operator. [`Observable::shifted`]
/// is the one way to obtain a non-traceless `X + lambda I`, which the SME must
/// treat identically.
#[derive(Clone, Debug, PartialEq)]
pub struct Observable {
    matrix: CMatrix,
    diagonal: bool,
}

impl Observable {
    pub fn new(m: CMatrix) -> Result<Self> {
        let obs = Self::hermitian(m)?;
        let tr = obs.matrix.trace().norm();
        if tr > TRACE_TOL {
            return Err(Error::NotTraceless(tr));
        }
        Ok(obs)
    }

    /// Any Hermitian operator, traceless or not.
    pub fn hermitian(m: CMatrix) -> Result<Self> {
        check_dim(m.dim())?;
        let herm = m.hermiticity_defect();
        if herm > HERMITIAN_TOL {
            return Err(Error::NotHermitian(herm));
        }
        Ok(Self::from_trusted(m))
    }

    pub(crate) fn from_trusted(matrix: CMatrix) -> Self {
        let diagonal = matrix.is_diagonal();
        Self { matrix, diagonal }
    }

    /// `X + lambda I`.
    pub fn shifted(&self, lambda: f64) -> Self {
        let mut m = self.matrix.clone();
        for i in 0..m.dim() {
            m[(i, i)] += lambda;
        }
        Self::from_trusted(m)
    }

    /// Projector `|i><i|` onto a measurement-basis state (not traceless).
    pub fn projector(dim: usize, i: usize) -> Result<Self> {
        check_dim(dim)?;
        let mut d = vec![0.0; dim];
        d[i] = 1.0;
        Ok(Self::from_trusted(CMatrix::from_real_diagonal(&d)))
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    /// True when the operator is exactly diagonal in the measurement basis.
    pub fn is_diagonal(&self) -> bool {
        self.diagonal
    }

    pub fn expectation(&self, rho: &DensityMatrix) -> f64 {
        self.matrix.trace_product(rho.matrix()).re
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.matrix.eigvalsh()
    }

    /// `tr X^2`.
    pub fn trace_sq(&self) -> f64 {
        self.matrix.frobenius_sq()
    }
}

/// Unitary matrix, checked to `1e-10`.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitaryMatrix(CMatrix);

impl UnitaryMatrix {
    pub fn new(m: CMatrix) -> Result<Self> {
        check_dim(m.dim())?;
        let defect = m.unitarity_defect();
        if defect > UNITARY_TOL {
            return Err(Error::NotUnitary(defect));
        }
        Ok(Self(m))
    }

    pub(crate) fn from_trusted(m: CMatrix) -> Self {
        Self(m)
    }

    pub fn identity(dim: usize) -> Self {
        Self(CMatrix::identity(dim))
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn adjoint(&self) -> Self {
        Self(self.0.adjoint())
    }

    pub fn compose(&self, rhs: &Self) -> Self {
        Self(self.0.matmul(&rhs.0))
    }

    /// `U rho U^dagger`.
    pub fn conjugate_state(&self, rho: &DensityMatrix) -> DensityMatrix {
        DensityMatrix(self.0.matmul(rho.matrix()).matmul(&self.0.adjoint()))
    }
}

/// `L = 1 - tr rho^2`.
pub fn impurity(rho: &DensityMatrix) -> f64 {
    1.0 - rho.purity()
}

/// Where the "largest weight" of the state is read off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfidelityMode {
    /// `Delta = 1 - lambda_max`.
    Eigenvalue,
    /// `Delta = 1 - max_i rho_ii` in the measurement basis.
    Population,
}

/// Returns `(Delta, argmax)`. Ties go to the smallest index.
///
/// `Delta` is accumulated as the sum of the non-maximal weights rather than as
/// `1 - max`, so it keeps full relative precision deep into the pure regime.
pub fn infidelity(rho: &DensityMatrix, mode: InfidelityMode) -> (f64, usize) {
    let weights = match mode {
        InfidelityMode::Population => rho.populations(),
        InfidelityMode::Eigenvalue => {
            // eigvalsh is ascending; "index" refers to the eigenvalue's position
            // in the eigenvector basis sorted the same way.
            rho.eigenvalues()
        }
    };
    infidelity_of_weights(&weights)
}

pub(crate) fn infidelity_of_weights(weights: &[f64]) -> (f64, usize) {
    let mut best = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > weights[best] {
            best = i;
        }
    }
    let rest: f64 = weights
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != best)
        .map(|(_, &w)| w)
        .sum();
    (rest.max(0.0), best)
}

/// `J_z` for spin `j = (D-1)/2`: `diag(j, j-1, ..., -j)`.
pub fn jz_operator(dim: usize) -> Result<Observable> {
    check_dim(dim)?;
    let j = (dim as f64 - 1.0) / 2.0;
    let diag: Vec<f64> = (0..dim).map(|k| j - k as f64).collect();
    Ok(Observable::from_trusted(CMatrix::from_real_diagonal(&diag)))
}

/// `D[A] rho = A rho A^dagger - (A^dagger A rho + rho A^dagger A)/2`.
pub fn dissipator(a: &CMatrix, rho: &CMatrix) -> CMatrix {
    let ad = a.adjoint();
    let ada = ad.matmul(a);
    let sandwich = a.matmul(rho).matmul(&ad);
    let anti = ada.matmul(rho).add(&rho.matmul(&ada));
    sandwich.sub(&anti.scale_real(0.5))
}

/// `H[A] rho = A rho + rho A^dagger - tr[(A + A^dagger) rho] rho`.
pub fn innovator(a: &CMatrix, rho: &CMatrix) -> CMatrix {
    let ad = a.adjoint();
    let ar = a.matmul(rho);
    let ra = rho.matmul(&ad);
    let mean = a.add(&ad).trace_product(rho);
    ar.add(&ra).sub(&rho.scale(mean))
}

/// `U^dagger X U`.
pub fn rotated_observable(u: &UnitaryMatrix, x: &Observable) -> Result<Observable> {
    if u.dim() != x.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.dim(),
            got: u.dim(),
        });
    }
    let m = u.matrix().adjoint().matmul(x.matrix()).matmul(u.matrix());
    Ok(Observable::from_trusted(m.hermitian_part()))
}

fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    Complex64::new(
        rng.sample::<f64, _>(StandardNormal) * s,
        rng.sample::<f64, _>(StandardNormal) * s,
    )
}

/// Matrix of i.i.d. standard complex Gaussians (Ginibre ensemble).
pub fn ginibre<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> CMatrix {
    CMatrix::from_fn(dim, |_, _| complex_gaussian(rng))
}

/// Hilbert-Schmidt random mixed state `G G^dagger / tr(G G^dagger)`.
pub fn random_density_matrix<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DensityMatrix {
    let g = ginibre(dim, rng);
    let m = g.matmul(&g.adjoint());
    let tr = m.trace().re;
    let mut m = m.scale_real(1.0 / tr);
    crate::linalg::hermitize_in_place(&mut m);
    DensityMatrix(m)
}

/// Haar-random pure state.
pub fn random_pure_state<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<Complex64> {
    let v: Vec<Complex64> = (0..dim).map(|_| complex_gaussian(rng)).collect();
    let n = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    v.into_iter().map(|z| z / n).collect()
}

/// Random traceless Hermitian operator (GUE-like, trace removed).
pub fn random_traceless_observable<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Observable {
    let g = ginibre(dim, rng);
    let mut h = g.add(&g.adjoint()).scale_real(0.5);
    let shift = h.trace() / dim as f64;
    for i in 0..dim {
        h[(i, i)] -= shift;
    }
    crate::linalg::hermitize_in_place(&mut h);
    Observable::from_trusted(h)
}

/// Random Hermitian operator with trace.
pub fn random_hermitian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> CMatrix {
    let g = ginibre(dim, rng);
    g.add(&g.adjoint()).scale_real(0.5)
}

//! Conditional evolution under continuous measurement of `X`:
//!
//! ```text
//! d rho = 2 gamma dt D[X] rho + sqrt(2 gamma) dw H[X] rho
//! dR    = sqrt(4 gamma) <X> dt + dw
//! ```
//!
//! integrated by Euler-Maruyama with a Hermitize + trace-renormalize repair
//! after every step. Positivity is screened (never repaired); a violation
//! beyond `-1e-10` aborts the trajectory.
//!
//! The online integrator is driven by the innovation recomputed from the
//! record increment, `dw = dR - sqrt(4 gamma) <X> dt`, exactly as the offline
//! filter recovers it. Both paths therefore execute the same floating-point
//! operations and agree bit for bit.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::control::{ControlSchedule, UnitaryId};
use crate::error::{Error, Result};
use crate::linalg::{hermitize_in_place, matmul_into, qr_positive_q, shifted_cholesky_ok, CMatrix, ONE, ZERO};
use crate::state::{
    impurity, infidelity, infidelity_of_weights, DensityMatrix, InfidelityMode, Observable, UnitaryMatrix, PSD_TOL,
};

/// Largest default Euler-Maruyama step, in units of `1/gamma`.
///
/// Coarser steps let the multiplicative noise on small populations flip their
/// sign (the positivity screen then aborts the trajectory), see the README.
pub const DEFAULT_DT_CAP: f64 = 2.5e-4;

/// Largest default step of the measurement-operator scheme, in units of `1/gamma`.
pub const KRAUS_DT_CAP: f64 = 1e-3;

/// Update rule for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// `rho + 2 gamma dt D[X] rho + sqrt(2 gamma) dw H[X] rho`, Hermitized and renormalized.
    #[default]
    EulerMaruyama,
    /// `M rho M† / tr(M rho M†)` with
    /// `M = I + sqrt(2 gamma) dy X + gamma (dy^2 - 2 dt) X^2` and
    /// `dy = dw + sqrt(8 gamma) <X> dt`.
    ///
    /// Agrees with Euler-Maruyama to the same order but is positive by
    /// construction, which matters once a non-commuting observable has driven
    /// the small eigenvalues below `gamma dt`.
    Kraus,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::EulerMaruyama => "euler_maruyama",
            Scheme::Kraus => "kraus",
        }
    }

    pub fn default_dt_cap(self) -> f64 {
        match self {
            Scheme::EulerMaruyama => DEFAULT_DT_CAP,
            Scheme::Kraus => KRAUS_DT_CAP,
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler_maruyama" | "euler" => Ok(Scheme::EulerMaruyama),
            "kraus" => Ok(Scheme::Kraus),
            other => Err(Error::Config(format!("unknown integration scheme '{other}'"))),
        }
    }
}

/// Coarsest step accepted without `allow_coarse_dt`, in units of `1/gamma`.
pub const MAX_DT: f64 = 0.01;

/// Compositions between unitarity checks of the accumulated control.
const POLISH_INTERVAL: u64 = 10_000;
const POLISH_THRESHOLD: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub dim: usize,
    /// Measurement strength (rate).
    pub gamma: f64,
    pub dt: f64,
    pub total_time: f64,
    #[serde(default)]
    pub allow_coarse_dt: bool,
    #[serde(default)]
    pub scheme: Scheme,
}

impl SimParams {
    pub fn new(dim: usize, gamma: f64, dt: f64, total_time: f64) -> Self {
        Self {
            dim,
            gamma,
            dt,
            total_time,
            allow_coarse_dt: false,
            scheme: Scheme::EulerMaruyama,
        }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    /// Euler-Maruyama parameters with the default step for a schedule.
    pub fn for_schedule(dim: usize, gamma: f64, total_time: f64, schedule: &ControlSchedule) -> Self {
        Self::for_schedule_with(dim, gamma, total_time, schedule, Scheme::EulerMaruyama)
    }

    /// Default step for a schedule and scheme: the largest `delta_t / k` not
    /// exceeding the scheme's cap over `gamma`.
    pub fn for_schedule_with(
        dim: usize,
        gamma: f64,
        total_time: f64,
        schedule: &ControlSchedule,
        scheme: Scheme,
    ) -> Self {
        let cap = scheme.default_dt_cap() / if gamma > 0.0 { gamma } else { 1.0 };
        let dt = if schedule.is_controlled() && schedule.delta_t > 0.0 {
            schedule.delta_t / (schedule.delta_t / cap * (1.0 - 1e-12)).ceil().max(1.0)
        } else {
            cap
        };
        Self::new(dim, gamma, dt, total_time).with_scheme(scheme)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidDimension(self.dim));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !self.allow_coarse_dt && self.gamma * self.dt > MAX_DT * (1.0 + 1e-12) {
            return Err(Error::Config(format!(
                "dt = {} exceeds {MAX_DT}/gamma; set allow_coarse_dt to override",
                self.dt
            )));
        }
        if !(self.total_time >= self.dt) {
            return Err(Error::Config(format!(
                "total_time {} shorter than dt {}",
                self.total_time, self.dt
            )));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.total_time / self.dt).round() as usize
    }

    /// Integrator steps per control pulse.
    pub fn steps_per_pulse(&self, schedule: &ControlSchedule) -> Result<usize> {
        if !schedule.is_controlled() {
            return Ok(usize::MAX);
        }
        let ratio = schedule.delta_t / self.dt;
        let k = ratio.round();
        if k < 1.0 || (k - ratio).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::Config(format!(
                "delta_t = {} is not an integer multiple of dt = {}",
                schedule.delta_t, self.dt
            )));
        }
        Ok(k as usize)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlEntry {
    pub step: usize,
    pub id: UnitaryId,
}

/// Everything needed to re-filter a run offline.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementRecord {
    pub params: SimParams,
    pub schedule: ControlSchedule,
    pub seed: u64,
    /// One `dR` per integrator step.
    pub increments: Vec<f64>,
    pub control_log: Vec<ControlEntry>,
    /// Free-form header entries (initial state, observable shift, hashes).
    pub metadata: BTreeMap<String, String>,
}

impl MeasurementRecord {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        let expected = self.params.n_steps();
        if self.increments.len() != expected {
            return Err(Error::RecordCorrupt(format!(
                "{} increments, expected {expected}",
                self.increments.len()
            )));
        }
        if self.increments.iter().any(|x| !x.is_finite()) {
            return Err(Error::RecordCorrupt("non-finite increment".into()));
        }
        if self.control_log.windows(2).any(|w| w[0].step >= w[1].step) {
            return Err(Error::RecordCorrupt("control log steps not strictly increasing".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrajectoryResult {
    pub times: Vec<f64>,
    pub impurity_series: Vec<f64>,
    pub log_infidelity_series: Vec<f64>,
    pub final_state: DensityMatrix,
    pub record: Option<MeasurementRecord>,
}

#[derive(Clone, Debug)]
pub struct TrajectoryOptions {
    /// Save every k-th step (time 0 is always saved).
    pub save_every: usize,
    pub infidelity_mode: InfidelityMode,
    pub keep_record: bool,
}

impl Default for TrajectoryOptions {
    fn default() -> Self {
        Self {
            save_every: 1,
            infidelity_mode: InfidelityMode::Eigenvalue,
            keep_record: true,
        }
    }
}

/// `dR` for a given mean and innovation.
#[inline]
fn record_increment(gamma: f64, mean: f64, dt: f64, dw: f64) -> f64 {
    (4.0 * gamma).sqrt() * mean * dt + dw
}

/// Innovation recovered from `dR`.
#[inline]
fn innovation(gamma: f64, mean: f64, dt: f64, dr: f64) -> f64 {
    dr - (4.0 * gamma).sqrt() * mean * dt
}

/// Reusable scratch space for the step update.
pub struct SmeKernel {
    scheme: Scheme,
    x_rho: CMatrix,
    x_x_rho: CMatrix,
    x_rho_x: CMatrix,
    chol: Vec<num_complex::Complex64>,
    /// Set by callers that know `rho` is diagonal, which skips the check.
    known_diagonal: bool,
    /// `tr rho - 1` before the last renormalization.
    pub last_trace_defect: f64,
}

impl SmeKernel {
    pub fn new(dim: usize, scheme: Scheme) -> Self {
        Self {
            scheme,
            x_rho: CMatrix::zeros(dim),
            x_x_rho: CMatrix::zeros(dim),
            x_rho_x: CMatrix::zeros(dim),
            chol: Vec::with_capacity(dim * dim),
            known_diagonal: false,
            last_trace_defect: 0.0,
        }
    }

    /// `<X>` for the current state; for dense `X` also caches `X rho`.
    #[inline]
    fn load(&mut self, rho: &CMatrix, x: &Observable) -> f64 {
        let n = rho.dim();
        if x.is_diagonal() {
            let xm = x.matrix();
            (0..n).map(|i| xm[(i, i)].re * rho[(i, i)].re).sum()
        } else {
            matmul_into(x.matrix(), rho, &mut self.x_rho);
            (0..n).map(|i| self.x_rho[(i, i)].re).sum()
        }
    }

    /// Applies one increment with innovation `dw`, then Hermitizes,
    /// renormalizes and screens positivity.
    #[inline]
    #[allow(clippy::too_many_arguments)]
    fn update(
        &mut self,
        rho: &mut CMatrix,
        x: &Observable,
        mean: f64,
        gamma: f64,
        dt: f64,
        dw: f64,
        step: usize,
    ) -> Result<()> {
        let n = rho.dim();
        if x.is_diagonal() && (self.known_diagonal || rho.is_diagonal()) {
            return self.update_diagonal(rho, x, mean, gamma, dt, dw, step);
        }
        match self.scheme {
            Scheme::EulerMaruyama => self.euler(rho, x, mean, gamma, dt, dw),
            Scheme::Kraus => self.kraus(rho, x, mean, gamma, dt, dw),
        }
        hermitize_in_place(rho);
        let tr: f64 = (0..n).map(|i| rho[(i, i)].re).sum();
        self.last_trace_defect = tr - 1.0;
        if tr != 1.0 {
            let inv = 1.0 / tr;
            for z in rho.as_mut_slice() {
                *z *= inv;
            }
        }
        if !shifted_cholesky_ok(rho, PSD_TOL, &mut self.chol) {
            let min_eigenvalue = rho.eigvalsh()[0];
            if min_eigenvalue < -PSD_TOL {
                return Err(Error::PositivityViolation { step, min_eigenvalue });
            }
        }
        Ok(())
    }

    /// Same arithmetic as the general path restricted to the diagonal, which
    /// is all that evolves when both `X` and `rho` are diagonal.
    #[allow(clippy::too_many_arguments)]
    fn update_diagonal(
        &mut self,
        rho: &mut CMatrix,
        x: &Observable,
        mean: f64,
        gamma: f64,
        dt: f64,
        dw: f64,
        step: usize,
    ) -> Result<()> {
        let n = rho.dim();
        let kick = (2.0 * gamma).sqrt() * dw;
        let dy = dw + (8.0 * gamma).sqrt() * mean * dt;
        let a = (2.0 * gamma).sqrt() * dy;
        let b = gamma * (dy * dy - 2.0 * dt);
        let xs = x.matrix().as_slice();
        let r = rho.as_mut_slice();
        let mut tr = 0.0;
        for k in (0..n * n).step_by(n + 1) {
            let xi = xs[k].re;
            let z = r[k].re;
            let z = match self.scheme {
                Scheme::EulerMaruyama => z + z * (kick * (xi + xi - 2.0 * mean)),
                Scheme::Kraus => {
                    let m = 1.0 + a * xi + b * xi * xi;
                    z * (m * m)
                }
            };
            r[k] = num_complex::Complex64::new(z, 0.0);
            tr += z;
        }
        self.last_trace_defect = tr - 1.0;
        let inv = 1.0 / tr;
        let mut min = f64::INFINITY;
        for k in (0..n * n).step_by(n + 1) {
            if tr != 1.0 {
                r[k] *= inv;
            }
            if r[k].re < min {
                min = r[k].re;
            }
        }
        if min < -PSD_TOL {
            return Err(Error::PositivityViolation {
                step,
                min_eigenvalue: min,
            });
        }
        Ok(())
    }

    #[inline]
    fn euler(&mut self, rho: &mut CMatrix, x: &Observable, mean: f64, gamma: f64, dt: f64, dw: f64) {
        let n = rho.dim();
        let drift = 2.0 * gamma * dt;
        let kick = (2.0 * gamma).sqrt() * dw;
        if x.is_diagonal() {
            let xm = x.matrix();
            let r = rho.as_mut_slice();
            for i in 0..n {
                let xi = xm[(i, i)].re;
                for j in 0..n {
                    let xj = xm[(j, j)].re;
                    let z = r[i * n + j];
                    let d = xi - xj;
                    // D[X]rho = -(x_i - x_j)^2/2 rho_ij, H[X]rho = (x_i + x_j - 2<X>) rho_ij
                    r[i * n + j] = z + z * (drift * (-0.5 * d * d) + kick * (xi + xj - 2.0 * mean));
                }
            }
        } else {
            matmul_into(x.matrix(), &self.x_rho, &mut self.x_x_rho);
            matmul_into(&self.x_rho, x.matrix(), &mut self.x_rho_x);
            let (a, b, c) = (self.x_rho.as_slice(), self.x_x_rho.as_slice(), self.x_rho_x.as_slice());
            let r = rho.as_mut_slice();
            for i in 0..n {
                for j in 0..n {
                    let ij = i * n + j;
                    let ji = j * n + i;
                    // rho X = (X rho)^dagger and rho X^2 = (X^2 rho)^dagger.
                    let diss = c[ij] - (b[ij] + b[ji].conj()) * 0.5;
                    let innov = a[ij] + a[ji].conj() - r[ij] * (2.0 * mean);
                    r[ij] += diss * drift + innov * kick;
                }
            }
        }
    }

    #[inline]
    fn kraus(&mut self, rho: &mut CMatrix, x: &Observable, mean: f64, gamma: f64, dt: f64, dw: f64) {
        let n = rho.dim();
        let dy = dw + (8.0 * gamma).sqrt() * mean * dt;
        let a = (2.0 * gamma).sqrt() * dy;
        let b = gamma * (dy * dy - 2.0 * dt);
        if x.is_diagonal() {
            let xm = x.matrix();
            let m: Vec<f64> = (0..n)
                .map(|i| {
                    let xi = xm[(i, i)].re;
                    1.0 + a * xi + b * xi * xi
                })
                .collect();
            let r = rho.as_mut_slice();
            for i in 0..n {
                for j in 0..n {
                    r[i * n + j] *= m[i] * m[j];
                }
            }
        } else {
            // M = I + a X + b X^2, then rho <- M rho M (M is Hermitian).
            matmul_into(x.matrix(), x.matrix(), &mut self.x_x_rho);
            let op = &mut self.x_rho_x;
            for (k, (o, (xv, x2))) in op
                .as_mut_slice()
                .iter_mut()
                .zip(x.matrix().as_slice().iter().zip(self.x_x_rho.as_slice()))
                .enumerate()
            {
                *o = xv * a + x2 * b;
                if k % (n + 1) == 0 {
                    *o += 1.0;
                }
            }
            matmul_into(op, rho, &mut self.x_rho);
            matmul_into(&self.x_rho, op, rho);
        }
    }

    /// Online step: returns `dR`.
    #[inline]
    pub fn step_with_noise(
        &mut self,
        rho: &mut CMatrix,
        x: &Observable,
        gamma: f64,
        dt: f64,
        dw: f64,
        step: usize,
    ) -> Result<f64> {
        let mean = self.load(rho, x);
        let dr = record_increment(gamma, mean, dt, dw);
        let dw = innovation(gamma, mean, dt, dr);
        self.update(rho, x, mean, gamma, dt, dw, step)?;
        Ok(dr)
    }

    /// Offline step driven by a recorded `dR`.
    #[inline]
    pub fn step_with_record(
        &mut self,
        rho: &mut CMatrix,
        x: &Observable,
        gamma: f64,
        dt: f64,
        dr: f64,
        step: usize,
    ) -> Result<()> {
        let mean = self.load(rho, x);
        let dw = innovation(gamma, mean, dt, dr);
        self.update(rho, x, mean, gamma, dt, dw, step)
    }
}

/// One SME step from `rho` with rotated observable `xc`; returns `(rho', dR)`.
pub fn sme_step(rho: &DensityMatrix, xc: &Observable, gamma: f64, dt: f64, dw: f64) -> Result<(DensityMatrix, f64)> {
    if rho.dim() != xc.dim() {
        return Err(Error::DimensionMismatch {
            expected: rho.dim(),
            got: xc.dim(),
        });
    }
    if !dw.is_finite() {
        return Err(Error::Config("non-finite Wiener increment".into()));
    }
    let mut kernel = SmeKernel::new(rho.dim(), Scheme::EulerMaruyama);
    let mut m = rho.matrix().clone();
    let dr = kernel.step_with_noise(&mut m, xc, gamma, dt, dw, 0)?;
    Ok((DensityMatrix::from_engine(m), dr))
}

/// Accumulated control `U(t) = U_q ... U_1` and the rotated observable.
pub struct ControlFrame {
    base: Observable,
    accumulated: CMatrix,
    rotated: Observable,
    compositions: u64,
}

impl ControlFrame {
    pub fn new(x: &Observable) -> Self {
        Self {
            base: x.clone(),
            accumulated: CMatrix::identity(x.dim()),
            rotated: x.clone(),
            compositions: 0,
        }
    }

    pub fn observable(&self) -> &Observable {
        &self.rotated
    }

    pub fn accumulated(&self) -> &CMatrix {
        &self.accumulated
    }

    pub fn apply(&mut self, u: &UnitaryMatrix) {
        if let Some(image) = permutation_image(u.matrix()) {
            self.permute(&image);
            return;
        }
        self.accumulated = u.matrix().matmul(&self.accumulated);
        self.compositions += 1;
        if self.compositions.is_multiple_of(POLISH_INTERVAL) && self.accumulated.unitarity_defect() > POLISH_THRESHOLD {
            self.accumulated = qr_positive_q(&self.accumulated);
        }
        let u = &self.accumulated;
        let mut m = u.adjoint().matmul(self.base.matrix()).matmul(u);
        hermitize_in_place(&mut m);
        self.rotated = Observable::from_trusted(m);
    }
}

/// `Some(image)` when `m` is a permutation matrix with `m[(image[i], i)] = 1`.
fn permutation_image(m: &CMatrix) -> Option<Vec<usize>> {
    let n = m.dim();
    let mut image = Vec::with_capacity(n);
    for j in 0..n {
        let mut hit = None;
        for i in 0..n {
            let z = m[(i, j)];
            if z == ONE && hit.is_none() {
                hit = Some(i);
            } else if z != ZERO {
                return None;
            }
        }
        image.push(hit?);
    }
    Some(image)
}

impl ControlFrame {
    /// Exact update for a permutation pulse: rows of `U` are reordered, and for
    /// diagonal `X` so is the diagonal of `U^dagger X U`.
    fn permute(&mut self, image: &[usize]) {
        let n = image.len();
        let old = self.accumulated.clone();
        for (i, &pi) in image.iter().enumerate() {
            for j in 0..n {
                self.accumulated[(pi, j)] = old[(i, j)];
            }
        }
        let total = self
            .base
            .is_diagonal()
            .then(|| permutation_image(&self.accumulated))
            .flatten();
        if let Some(total) = total {
            let x = self.base.matrix();
            let diag: Vec<f64> = total.iter().map(|&k| x[(k, k)].re).collect();
            self.rotated = Observable::from_trusted(CMatrix::from_real_diagonal(&diag));
        } else {
            let u = &self.accumulated;
            let mut m = u.adjoint().matmul(self.base.matrix()).matmul(u);
            hermitize_in_place(&mut m);
            self.rotated = Observable::from_trusted(m);
        }
    }
}

fn check_inputs(rho0: &DensityMatrix, x: &Observable, params: &SimParams) -> Result<()> {
    params.validate()?;
    for got in [rho0.dim(), x.dim()] {
        if got != params.dim {
            return Err(Error::DimensionMismatch {
                expected: params.dim,
                got,
            });
        }
    }
    Ok(())
}

struct SeriesRecorder {
    mode: InfidelityMode,
    times: Vec<f64>,
    impurity: Vec<f64>,
    log_infidelity: Vec<f64>,
}

impl SeriesRecorder {
    fn new(mode: InfidelityMode, capacity: usize) -> Self {
        Self {
            mode,
            times: Vec::with_capacity(capacity),
            impurity: Vec::with_capacity(capacity),
            log_infidelity: Vec::with_capacity(capacity),
        }
    }

    fn save(&mut self, t: f64, rho: &CMatrix) {
        self.times.push(t);
        let (l, delta) = if rho.is_diagonal() {
            let n = rho.dim();
            let w: Vec<f64> = (0..n).map(|i| rho[(i, i)].re).collect();
            (1.0 - rho.frobenius_sq(), infidelity_of_weights(&w).0)
        } else {
            let state = DensityMatrix::from_engine(rho.clone());
            (impurity(&state), infidelity(&state, self.mode).0)
        };
        self.impurity.push(l);
        self.log_infidelity.push(delta.max(f64::MIN_POSITIVE).ln());
    }
}

/// Simulates one trajectory, saving every step and keeping the record.
pub fn simulate_trajectory(
    rho0: &DensityMatrix,
    x: &Observable,
    schedule: &ControlSchedule,
    params: &SimParams,
    seed: u64,
) -> Result<TrajectoryResult> {
    simulate_trajectory_with(rho0, x, schedule, params, seed, &TrajectoryOptions::default())
}

pub fn simulate_trajectory_with(
    rho0: &DensityMatrix,
    x: &Observable,
    schedule: &ControlSchedule,
    params: &SimParams,
    seed: u64,
    opts: &TrajectoryOptions,
) -> Result<TrajectoryResult> {
    check_inputs(rho0, x, params)?;
    schedule.validate(params.dim)?;
    let n_steps = params.n_steps();
    let per_pulse = params.steps_per_pulse(schedule)?;
    let save_every = opts.save_every.max(1);
    let (gamma, dt) = (params.gamma, params.dt);
    let sqrt_dt = dt.sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kernel = SmeKernel::new(params.dim, params.scheme);
    let mut frame = ControlFrame::new(x);
    let mut rho = rho0.matrix().clone();
    let mut series = SeriesRecorder::new(opts.infidelity_mode, n_steps / save_every + 2);
    let mut increments = Vec::with_capacity(if opts.keep_record { n_steps } else { 0 });
    let mut control_log = Vec::new();

    series.save(0.0, &rho);
    let mut diagonal = rho.is_diagonal();
    for step in 0..n_steps {
        if step > 0 && step % per_pulse == 0 {
            let q = (step / per_pulse) as u64;
            let (u, id) = schedule.next_unitary(params.dim, q)?;
            frame.apply(&u);
            if opts.keep_record {
                control_log.push(ControlEntry { step, id });
            }
        }
        let dw = sqrt_dt * rng.sample::<f64, _>(StandardNormal);
        // A diagonal state stays diagonal while the measured observable is.
        diagonal &= frame.observable().is_diagonal();
        kernel.known_diagonal = diagonal;
        let dr = kernel.step_with_noise(&mut rho, frame.observable(), gamma, dt, dw, step)?;
        if opts.keep_record {
            increments.push(dr);
        }
        if (step + 1) % save_every == 0 {
            series.save((step + 1) as f64 * dt, &rho);
        }
    }

    let record = opts.keep_record.then(|| MeasurementRecord {
        params: params.clone(),
        schedule: schedule.clone(),
        seed,
        increments,
        control_log,
        metadata: BTreeMap::new(),
    });
    Ok(TrajectoryResult {
        times: series.times,
        impurity_series: series.impurity,
        log_infidelity_series: series.log_infidelity,
        final_state: DensityMatrix::from_engine(rho),
        record,
    })
}

/// Re-derives the conditional state at time `T` from a stored record.
pub fn filter_record(rho0: &DensityMatrix, x: &Observable, record: &MeasurementRecord) -> Result<DensityMatrix> {
    let params = &record.params;
    check_inputs(rho0, x, params)?;
    record.validate()?;
    let schedule = &record.schedule;
    schedule.validate(params.dim)?;
    let per_pulse = params.steps_per_pulse(schedule)?;

    let mut kernel = SmeKernel::new(params.dim, params.scheme);
    let mut frame = ControlFrame::new(x);
    let mut rho = rho0.matrix().clone();
    let mut log = record.control_log.iter().peekable();
    for (step, &dr) in record.increments.iter().enumerate() {
        let pulse_due = step > 0 && step % per_pulse == 0;
        let entry = log.next_if(|e| e.step == step);
        match (pulse_due, entry) {
            (true, Some(e)) => {
                let q = (step / per_pulse) as u64;
                frame.apply(&schedule.resolve(params.dim, q, e.id)?);
            }
            (true, None) => {
                return Err(Error::RecordCorrupt(format!("missing control entry at step {step}")));
            }
            (false, Some(_)) => {
                return Err(Error::RecordCorrupt(format!("unexpected control entry at step {step}")));
            }
            (false, None) => {}
        }
        kernel.step_with_record(&mut rho, frame.observable(), params.gamma, params.dt, dr, step)?;
    }
    if let Some(e) = log.next() {
        return Err(Error::RecordCorrupt(format!(
            "control entry at step {} beyond record",
            e.step
        )));
    }
    Ok(DensityMatrix::from_engine(rho))
}

/// Result of driving `X` and `X + lambda I` with the same noise.
#[derive(Clone, Debug)]
pub struct ShiftComparison {
    /// Largest elementwise state difference over the run.
    pub max_state_distance: f64,
    /// Largest deviation of `dR' - dR` from `sqrt(4 gamma) lambda dt`.
    pub max_record_offset_error: f64,
}

/// Checks invariance of the conditional state under `X -> X + lambda I`.
pub fn lambda_shift_check(
    rho0: &DensityMatrix,
    x: &Observable,
    lambda: f64,
    params: &SimParams,
    seed: u64,
) -> Result<ShiftComparison> {
    check_inputs(rho0, x, params)?;
    let shifted = x.shifted(lambda);
    let (gamma, dt) = (params.gamma, params.dt);
    let offset = (4.0 * gamma).sqrt() * lambda * dt;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut k1 = SmeKernel::new(params.dim, params.scheme);
    let mut k2 = SmeKernel::new(params.dim, params.scheme);
    let mut a = rho0.matrix().clone();
    let mut b = rho0.matrix().clone();
    let mut out = ShiftComparison {
        max_state_distance: 0.0,
        max_record_offset_error: 0.0,
    };
    for step in 0..params.n_steps() {
        let dw = dt.sqrt() * rng.sample::<f64, _>(StandardNormal);
        let ra = k1.step_with_noise(&mut a, x, gamma, dt, dw, step)?;
        let rb = k2.step_with_noise(&mut b, &shifted, gamma, dt, dw, step)?;
        out.max_state_distance = out.max_state_distance.max(a.max_abs_diff(&b));
        out.max_record_offset_error = out.max_record_offset_error.max((rb - ra - offset).abs());
    }
    Ok(out)
}

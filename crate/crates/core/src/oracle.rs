//! Sampling and enumeration checks of the closed forms in [`crate::analytics`].
//!
//! Monte Carlo comparisons report mean and standard error and pass when the
//! closed form lies within `sigmas` standard errors. Exact identities
//! (permutation reduction, design balance) pass below an absolute tolerance.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::analytics::{
    haar_avg_dl_rate, haar_integral_t1, log_infidelity_rate, mean_impurity_increment, measurement_speedup_bounds,
    permutation_averaged_generator, population_sde_step, q_prime_fourth_moment,
};
use crate::control::{haar_sample, has_two_design, two_design_set};
use crate::error::Result;
use crate::linalg::CMatrix;
use crate::record::fmt_f64;
use crate::sme::sme_step;
use crate::state::{
    dissipator, impurity, infidelity_of_weights, jz_operator, random_density_matrix, random_hermitian,
    random_traceless_observable, rotated_observable, DensityMatrix, Observable, UnitaryMatrix,
};

/// Sample mean with standard error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl MeanEstimate {
    pub fn from_samples(xs: impl IntoIterator<Item = f64>) -> Self {
        let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
        for x in xs {
            n += 1;
            let d = x - mean;
            mean += d / n as f64;
            m2 += d * (x - mean);
        }
        let stderr = if n > 1 {
            (m2 / (n as f64 - 1.0) / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, stderr, n }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HaarMomentReport {
    pub closed_form: f64,
    pub monte_carlo_mean: f64,
    pub monte_carlo_stderr: f64,
    pub n_samples: usize,
}

impl HaarMomentReport {
    pub fn new(closed_form: f64, est: MeanEstimate) -> Self {
        Self {
            closed_form,
            monte_carlo_mean: est.mean,
            monte_carlo_stderr: est.stderr,
            n_samples: est.n,
        }
    }

    /// Deviation in standard errors.
    pub fn z(&self) -> f64 {
        let diff = (self.monte_carlo_mean - self.closed_form).abs();
        if self.monte_carlo_stderr > 0.0 {
            diff / self.monte_carlo_stderr
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }

    pub fn within(&self, sigmas: f64) -> bool {
        self.z() <= sigmas
    }
}

/// `tr[X U rho U† X U rho U†]`.
pub fn t1_functional(u: &UnitaryMatrix, rho: &DensityMatrix, x: &Observable) -> f64 {
    let r = u.conjugate_state(rho);
    let xr = x.matrix().matmul(r.matrix());
    xr.trace_product(&xr).re
}

pub fn haar_t1_monte_carlo<R: Rng + ?Sized>(
    rho: &DensityMatrix,
    x: &Observable,
    n: usize,
    rng: &mut R,
) -> Result<HaarMomentReport> {
    let closed = haar_integral_t1(rho, x)?;
    let est = MeanEstimate::from_samples((0..n).map(|_| t1_functional(&haar_sample(rho.dim(), rng), rho, x)));
    Ok(HaarMomentReport::new(closed, est))
}

/// Real and imaginary parts of `∫dU tr[A U B U† C U Dm U†]`.
pub fn q_prime_monte_carlo<R: Rng + ?Sized>(
    ops: [&CMatrix; 4],
    n: usize,
    rng: &mut R,
) -> Result<(HaarMomentReport, HaarMomentReport)> {
    let [a, b, c, dm] = ops;
    let closed = q_prime_fourth_moment(a, b, c, dm)?;
    let samples: Vec<_> = (0..n)
        .map(|_| {
            let u = haar_sample(a.dim(), rng);
            let (um, ud) = (u.matrix(), u.matrix().adjoint());
            a.matmul(um)
                .matmul(b)
                .matmul(&ud)
                .matmul(c)
                .matmul(um)
                .matmul(dm)
                .matmul(&ud)
                .trace()
        })
        .collect();
    Ok((
        HaarMomentReport::new(closed.re, MeanEstimate::from_samples(samples.iter().map(|z| z.re))),
        HaarMomentReport::new(closed.im, MeanEstimate::from_samples(samples.iter().map(|z| z.im))),
    ))
}

/// Antithetic estimate of `<dL>/dt` from pairs of integrator steps with `±dw`.
fn antithetic_dl<R: Rng + ?Sized>(
    rho: &DensityMatrix,
    xc: &Observable,
    gamma: f64,
    dt: f64,
    rng: &mut R,
) -> Result<f64> {
    let dw = dt.sqrt() * rng.sample::<f64, _>(StandardNormal);
    let l0 = impurity(rho);
    let (up, _) = sme_step(rho, xc, gamma, dt, dw)?;
    let (down, _) = sme_step(rho, xc, gamma, dt, -dw)?;
    Ok((0.5 * (impurity(&up) + impurity(&down)) - l0) / dt)
}

/// Integrator-based estimate of `<dL>/dt` at fixed `(rho, X̌)`.
pub fn impurity_drift_monte_carlo<R: Rng + ?Sized>(
    rho: &DensityMatrix,
    xc: &Observable,
    gamma: f64,
    dt: f64,
    n_pairs: usize,
    rng: &mut R,
) -> Result<HaarMomentReport> {
    let closed = mean_impurity_increment(rho, xc, gamma);
    let samples = (0..n_pairs)
        .map(|_| antithetic_dl(rho, xc, gamma, dt, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(HaarMomentReport::new(closed, MeanEstimate::from_samples(samples)))
}

/// Integrator-based estimate of the Haar- and noise-averaged `<dL>/dt`.
pub fn haar_drift_monte_carlo<R: Rng + ?Sized>(
    rho: &DensityMatrix,
    x: &Observable,
    gamma: f64,
    dt: f64,
    n: usize,
    rng: &mut R,
) -> Result<HaarMomentReport> {
    let (closed, _) = haar_avg_dl_rate(rho, x, gamma)?;
    let samples = (0..n)
        .map(|_| {
            let u = haar_sample(rho.dim(), rng);
            antithetic_dl(rho, &rotated_observable(&u, x)?, gamma, dt, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HaarMomentReport::new(closed, MeanEstimate::from_samples(samples)))
}

/// Haar average of the exact noise-averaged drift over random rotations of `X`.
pub fn composed_drift_monte_carlo<R: Rng + ?Sized>(
    rho: &DensityMatrix,
    x: &Observable,
    gamma: f64,
    n: usize,
    rng: &mut R,
) -> Result<HaarMomentReport> {
    let (closed, _) = haar_avg_dl_rate(rho, x, gamma)?;
    let samples = (0..n)
        .map(|_| {
            let u = haar_sample(rho.dim(), rng);
            Ok(mean_impurity_increment(rho, &rotated_observable(&u, x)?, gamma))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HaarMomentReport::new(closed, MeanEstimate::from_samples(samples)))
}

/// Largest deviation, in standard errors, of `(rho' - rho)/dt` from
/// `2 gamma D[X̌] rho` over all matrix entries (real and imaginary parts).
pub fn sme_drift_max_z<R: Rng + ?Sized>(
    rho: &DensityMatrix,
    xc: &Observable,
    gamma: f64,
    dt: f64,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    let dim = rho.dim();
    let expected = dissipator(xc.matrix(), rho.matrix()).scale_real(2.0 * gamma);
    let mut samples = vec![Vec::with_capacity(n); 2 * dim * dim];
    for _ in 0..n {
        let dw = dt.sqrt() * rng.sample::<f64, _>(StandardNormal);
        let (next, _) = sme_step(rho, xc, gamma, dt, dw)?;
        let diff = next.matrix().sub(rho.matrix()).scale_real(1.0 / dt);
        for (k, z) in diff.as_slice().iter().enumerate() {
            samples[2 * k].push(z.re);
            samples[2 * k + 1].push(z.im);
        }
    }
    let mut worst = 0.0f64;
    for (k, s) in samples.into_iter().enumerate() {
        let want = expected.as_slice()[k / 2];
        let want = if k % 2 == 0 { want.re } else { want.im };
        worst = worst.max(HaarMomentReport::new(want, MeanEstimate::from_samples(s)).z());
    }
    Ok(worst)
}

/// Antithetic estimate of `<d ln Delta>/dt` from the population SDE.
pub fn log_infidelity_monte_carlo<R: Rng + ?Sized>(
    p: &[f64],
    gamma: f64,
    dt: f64,
    n_pairs: usize,
    rng: &mut R,
) -> Result<HaarMomentReport> {
    let closed = log_infidelity_rate(p, gamma)?;
    let ln_delta = |q: &[f64]| infidelity_of_weights(q).0.ln();
    let base = ln_delta(p);
    let samples = (0..n_pairs)
        .map(|_| {
            let dws: Vec<f64> = (0..p.len())
                .map(|_| dt.sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let neg: Vec<f64> = dws.iter().map(|w| -w).collect();
            let up = population_sde_step(p, gamma, dt, &dws)?;
            let down = population_sde_step(p, gamma, dt, &neg)?;
            Ok((0.5 * (ln_delta(&up) + ln_delta(&down)) - base) / dt)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HaarMomentReport::new(closed, MeanEstimate::from_samples(samples)))
}

/// Average of the `T1` functional over a finite set of unitaries.
pub fn design_average_t1(set: &[UnitaryMatrix], rho: &DensityMatrix, x: &Observable) -> f64 {
    set.iter().map(|u| t1_functional(u, rho, x)).sum::<f64>() / set.len() as f64
}

/// Largest `|design average - Haar closed form|` of `T1` over `trials` random inputs.
pub fn design_balance_defect<R: Rng + ?Sized>(set: &[UnitaryMatrix], trials: usize, rng: &mut R) -> Result<f64> {
    let dim = set.first().map(|u| u.dim()).unwrap_or(2);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let rho = random_density_matrix(dim, rng);
        let x = random_traceless_observable(dim, rng);
        worst = worst.max((design_average_t1(set, &rho, &x) - haar_integral_t1(&rho, &x)?).abs());
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PremiseReport {
    pub checked: usize,
    /// States with `L > B` beyond rounding.
    pub violations: usize,
    pub min_brace: f64,
}

/// Samples states of every dimension in `dims` and checks `0 <= L <= B`.
pub fn impurity_below_brace<R: Rng + ?Sized>(dims: &[usize], per_dim: usize, rng: &mut R) -> PremiseReport {
    let mut report = PremiseReport {
        checked: 0,
        violations: 0,
        min_brace: f64::INFINITY,
    };
    for &d in dims {
        for k in 0..per_dim {
            // Alternate full-rank and low-rank states so near-pure ones are covered.
            let rho = if k % 2 == 0 {
                random_density_matrix(d, rng)
            } else {
                let mix: f64 = rng.random::<f64>().powi(4);
                let pure = DensityMatrix::pure(&crate::state::random_pure_state(d, rng)).expect("normalized");
                let other = random_density_matrix(d, rng);
                DensityMatrix::new(pure.matrix().scale_real(1.0 - mix).add(&other.matrix().scale_real(mix)))
                    .expect("convex mixture")
            };
            let b = crate::analytics::brace_factor(&rho);
            report.checked += 1;
            report.min_brace = report.min_brace.min(b);
            if impurity(&rho) > b + 1e-12 || b < -1e-12 {
                report.violations += 1;
            }
        }
    }
    report
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Tolerance {
    Sigmas(f64),
    Absolute(f64),
}

/// One line of an oracle report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub name: String,
    pub closed_form: f64,
    pub mc_mean: f64,
    pub mc_stderr: f64,
    pub n: usize,
    pub tolerance: Tolerance,
    pub pass: bool,
}

impl OracleRow {
    pub fn statistical(name: impl Into<String>, report: &HaarMomentReport, sigmas: f64) -> Self {
        Self {
            name: name.into(),
            closed_form: report.closed_form,
            mc_mean: report.monte_carlo_mean,
            mc_stderr: report.monte_carlo_stderr,
            n: report.n_samples,
            tolerance: Tolerance::Sigmas(sigmas),
            pass: report.within(sigmas),
        }
    }

    pub fn exact(name: impl Into<String>, expected: f64, got: f64, n: usize, tol: f64) -> Self {
        Self {
            name: name.into(),
            closed_form: expected,
            mc_mean: got,
            mc_stderr: 0.0,
            n,
            tolerance: Tolerance::Absolute(tol),
            pass: (got - expected).abs() <= tol,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSuiteConfig {
    pub dims: Vec<usize>,
    /// Random inputs per dimension and identity.
    pub n_inputs: usize,
    pub n_samples: usize,
    pub sigmas: f64,
    pub gamma: f64,
    /// Step used by the integrator-based drift oracles.
    pub dt: f64,
    pub seed: u64,
    /// Replaces `aleph` in the projector model (fault injection).
    pub aleph_override: Option<f64>,
}

impl Default for OracleSuiteConfig {
    fn default() -> Self {
        Self {
            dims: vec![2, 3, 4],
            n_inputs: 3,
            n_samples: 20_000,
            sigmas: 4.0,
            gamma: 1.0,
            dt: 1e-6,
            seed: 2024,
            aleph_override: None,
        }
    }
}

/// Runs every oracle for every dimension. Each identity draws from its own
/// ChaCha stream so adding rows never perturbs the others.
pub fn run_suite(cfg: &OracleSuiteConfig) -> Result<Vec<OracleRow>> {
    let mut rows = Vec::new();
    let k = cfg.sigmas;
    let stream = |id: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(id);
        r
    };
    for (di, &d) in cfg.dims.iter().enumerate() {
        let base = 100 * di as u64;

        let states: Vec<_> = {
            let mut rng = stream(base);
            (0..10).map(|_| random_density_matrix(d, &mut rng)).collect()
        };
        let perm = permutation_averaged_generator(d, cfg.gamma, &states, cfg.aleph_override)?;
        rows.push(OracleRow::exact(
            format!("permutation_reduction_drift[D={d}]"),
            0.0,
            perm.drift_max_diff,
            1,
            1e-12,
        ));
        rows.push(OracleRow::exact(
            format!("permutation_reduction_noise[D={d}]"),
            0.0,
            perm.noise_max_diff,
            states.len(),
            1e-12,
        ));

        let mut rng = stream(base + 1);
        for i in 0..cfg.n_inputs {
            let rho = random_density_matrix(d, &mut rng);
            let x = random_traceless_observable(d, &mut rng);
            let r = haar_t1_monte_carlo(&rho, &x, cfg.n_samples, &mut rng)?;
            rows.push(OracleRow::statistical(format!("haar_t1[D={d},{i}]"), &r, k));
        }

        let mut rng = stream(base + 2);
        for i in 0..cfg.n_inputs {
            let ms: Vec<_> = (0..4).map(|_| random_hermitian(d, &mut rng)).collect();
            let (re, im) = q_prime_monte_carlo([&ms[0], &ms[1], &ms[2], &ms[3]], cfg.n_samples, &mut rng)?;
            rows.push(OracleRow::statistical(format!("q_prime_re[D={d},{i}]"), &re, k));
            rows.push(OracleRow::statistical(format!("q_prime_im[D={d},{i}]"), &im, k));
        }

        let mut rng = stream(base + 3);
        for i in 0..cfg.n_inputs {
            let rho = random_density_matrix(d, &mut rng);
            let x = random_traceless_observable(d, &mut rng);
            let r = impurity_drift_monte_carlo(&rho, &x, cfg.gamma, cfg.dt, cfg.n_samples, &mut rng)?;
            rows.push(OracleRow::statistical(format!("impurity_drift[D={d},{i}]"), &r, k));
            let r = haar_drift_monte_carlo(&rho, &x, cfg.gamma, cfg.dt, cfg.n_samples, &mut rng)?;
            rows.push(OracleRow::statistical(format!("haar_avg_drift[D={d},{i}]"), &r, k));
            let r = composed_drift_monte_carlo(&rho, &x, cfg.gamma, cfg.n_samples, &mut rng)?;
            rows.push(OracleRow::statistical(
                format!("haar_avg_drift_composed[D={d},{i}]"),
                &r,
                k,
            ));
        }

        let mut rng = stream(base + 4);
        for i in 0..cfg.n_inputs {
            let weights: Vec<f64> = (0..d).map(|_| rng.random::<f64>() + 0.05).collect();
            let total: f64 = weights.iter().sum();
            let p: Vec<f64> = weights.iter().map(|w| w / total).collect();
            let r = log_infidelity_monte_carlo(&p, cfg.gamma, cfg.dt, cfg.n_samples, &mut rng)?;
            rows.push(OracleRow::statistical(format!("log_infidelity_rate[D={d},{i}]"), &r, k));
        }

        if has_two_design(d) {
            let mut rng = stream(base + 5);
            let set = two_design_set(d)?;
            let defect = design_balance_defect(set, cfg.n_inputs, &mut rng)?;
            rows.push(OracleRow::exact(
                format!("two_design_t1[D={d}]"),
                0.0,
                defect,
                set.len(),
                1e-10,
            ));
        }

        let mut rng = stream(base + 6);
        let premise = impurity_below_brace(&[d], cfg.n_samples, &mut rng);
        rows.push(OracleRow::exact(
            format!("impurity_below_brace[D={d}]"),
            0.0,
            premise.violations as f64,
            premise.checked,
            0.0,
        ));

        let b = measurement_speedup_bounds(d)?;
        rows.push(OracleRow::exact(
            format!("speedup_bounds_ordered[D={d}]"),
            0.0,
            (b.lower - b.upper).max(0.0),
            1,
            1e-12,
        ));

        let jz = jz_operator(d)?;
        let df = d as f64;
        rows.push(OracleRow::exact(
            format!("jz_trace_sq[D={d}]"),
            df * (df * df - 1.0) / 12.0,
            jz.trace_sq(),
            1,
            1e-12,
        ));
    }
    Ok(rows)
}

pub const ORACLE_CSV_HEADER: &str = "name,closed_form,mc_mean,mc_stderr,n,pass";

pub fn write_oracle_csv<W: Write>(out: &mut W, rows: &[OracleRow]) -> Result<()> {
    writeln!(out, "{ORACLE_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.name,
            fmt_f64(r.closed_form),
            fmt_f64(r.mc_mean),
            fmt_f64(r.mc_stderr),
            r.n,
            if r.pass { "pass" } else { "fail" }
        )?;
    }
    Ok(())
}

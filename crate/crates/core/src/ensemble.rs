//! Trajectory ensembles, crossing times and speed-up ratios.
//!
//! Trajectory `i` uses noise seed `base_seed + i` and control seed
//! `schedule.seed + i`. Trajectories run in parallel in fixed-size chunks;
//! their series are folded into the running statistics strictly in index
//! order, so the thread count never changes a single bit of the output.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::ControlSchedule;
use crate::error::{Error, Result};
use crate::record::fmt_f64;
use crate::sme::{simulate_trajectory_with, Scheme, SimParams, TrajectoryOptions};
use crate::state::{DensityMatrix, InfidelityMode, Observable};

/// Default cap on saved points per curve.
pub const MAX_SAVED_POINTS: usize = 10_000;

/// Trajectories simulated per parallel batch.
const CHUNK: usize = 64;

/// Largest tolerated fraction of aborted trajectories.
pub const MAX_EXCLUDED_FRACTION: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Mean impurity `<L>`; targets are impurity levels.
    Impurity,
    /// Mean log-infidelity `<ln Delta>`; targets are infidelity levels `Delta`.
    LogInfidelity,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "impurity" => Ok(Metric::Impurity),
            "log_infidelity" => Ok(Metric::LogInfidelity),
            other => Err(Error::Config(format!("unknown metric '{other}'"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Impurity => "impurity",
            Metric::LogInfidelity => "log_infidelity",
        })
    }
}

#[derive(Clone, Debug)]
pub struct EnsembleConfig {
    pub params: SimParams,
    pub schedule: ControlSchedule,
    pub observable: Observable,
    pub initial_state: DensityMatrix,
    pub n_trajectories: usize,
    pub base_seed: u64,
    /// Save every k-th step; `None` keeps at most [`MAX_SAVED_POINTS`] points.
    pub save_every: Option<usize>,
    pub infidelity_mode: InfidelityMode,
    /// Keep every trajectory's saved series (needed for bootstrap errors).
    pub keep_trajectories: bool,
}

impl EnsembleConfig {
    pub fn new(
        params: SimParams,
        schedule: ControlSchedule,
        observable: Observable,
        initial_state: DensityMatrix,
        n_trajectories: usize,
        base_seed: u64,
    ) -> Self {
        Self {
            params,
            schedule,
            observable,
            initial_state,
            n_trajectories,
            base_seed,
            save_every: None,
            infidelity_mode: InfidelityMode::Eigenvalue,
            keep_trajectories: false,
        }
    }

    pub fn save_stride(&self) -> usize {
        self.save_every
            .unwrap_or_else(|| self.params.n_steps().div_ceil(MAX_SAVED_POINTS))
            .max(1)
    }
}

/// Running mean and variance (Welford), updated in a fixed order.
#[derive(Clone, Debug, Default)]
struct Accumulator {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Accumulator {
    fn push(&mut self, xs: &[f64]) {
        if self.n == 0 {
            self.mean = vec![0.0; xs.len()];
            self.m2 = vec![0.0; xs.len()];
        }
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(xs) {
            let d = x - *m;
            *m += d / n;
            *s += d * (x - *m);
        }
    }

    fn stderr(&self) -> Vec<f64> {
        if self.n < 2 {
            return vec![0.0; self.mean.len()];
        }
        let n = self.n as f64;
        self.m2.iter().map(|s| (s / (n - 1.0) / n).sqrt()).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub label: String,
    pub params: SimParams,
    pub delta_t: f64,
    pub times: Vec<f64>,
    pub mean_impurity: Vec<f64>,
    pub se_impurity: Vec<f64>,
    pub mean_log_infidelity: Vec<f64>,
    pub se_log_infidelity: Vec<f64>,
    pub n_trajectories: usize,
    pub n_excluded: usize,
    /// Message of the first aborted trajectory, if any.
    pub first_exclusion: Option<String>,
    #[serde(skip)]
    pub trajectories: Option<TrajectorySeries>,
}

/// Saved series of every kept trajectory, in trajectory order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectorySeries {
    pub impurity: Vec<Vec<f64>>,
    pub log_infidelity: Vec<Vec<f64>>,
}

impl EnsembleStats {
    /// `(mean, stderr)` curve for a metric.
    pub fn curve(&self, metric: Metric) -> (&[f64], &[f64]) {
        match metric {
            Metric::Impurity => (&self.mean_impurity, &self.se_impurity),
            Metric::LogInfidelity => (&self.mean_log_infidelity, &self.se_log_infidelity),
        }
    }
}

/// Runs the ensemble on the current rayon pool.
pub fn run_ensemble(config: &EnsembleConfig) -> Result<EnsembleStats> {
    if config.n_trajectories == 0 {
        return Err(Error::Config("n_trajectories must be at least 1".into()));
    }
    config.params.validate()?;
    config.schedule.validate(config.params.dim)?;
    config.params.steps_per_pulse(&config.schedule)?;

    let opts = TrajectoryOptions {
        save_every: config.save_stride(),
        infidelity_mode: config.infidelity_mode,
        keep_record: false,
    };
    let mut impurity = Accumulator::default();
    let mut log_infidelity = Accumulator::default();
    let mut times = Vec::new();
    let mut excluded = 0usize;
    let mut first_exclusion = None;
    let mut kept = config.keep_trajectories.then(TrajectorySeries::default);

    let indices: Vec<u64> = (0..config.n_trajectories as u64).collect();
    for chunk in indices.chunks(CHUNK) {
        let results: Vec<_> = chunk
            .par_iter()
            .map(|&i| {
                let schedule = config.schedule.with_seed(config.schedule.seed.wrapping_add(i));
                simulate_trajectory_with(
                    &config.initial_state,
                    &config.observable,
                    &schedule,
                    &config.params,
                    config.base_seed.wrapping_add(i),
                    &opts,
                )
            })
            .collect();
        for (&i, result) in chunk.iter().zip(results) {
            match result {
                Ok(traj) => {
                    if times.is_empty() {
                        times = traj.times;
                    }
                    impurity.push(&traj.impurity_series);
                    log_infidelity.push(&traj.log_infidelity_series);
                    if let Some(k) = kept.as_mut() {
                        k.impurity.push(traj.impurity_series);
                        k.log_infidelity.push(traj.log_infidelity_series);
                    }
                }
                Err(e @ Error::PositivityViolation { .. }) => {
                    excluded += 1;
                    first_exclusion.get_or_insert_with(|| format!("trajectory {i}: {e}"));
                }
                Err(e) => return Err(e),
            }
        }
    }

    let total = config.n_trajectories;
    if excluded as f64 > MAX_EXCLUDED_FRACTION * total as f64 || impurity.n == 0 {
        return Err(Error::TooManyExclusions {
            excluded,
            total,
            first: first_exclusion.unwrap_or_default(),
        });
    }
    Ok(EnsembleStats {
        label: config.schedule.strategy.name().to_string(),
        params: config.params.clone(),
        delta_t: if config.schedule.is_controlled() {
            config.schedule.delta_t
        } else {
            0.0
        },
        times,
        se_impurity: impurity.stderr(),
        mean_impurity: impurity.mean,
        se_log_infidelity: log_infidelity.stderr(),
        mean_log_infidelity: log_infidelity.mean,
        n_trajectories: impurity.n,
        n_excluded: excluded,
        first_exclusion,
        trajectories: kept,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub time: f64,
    pub stderr: f64,
}

/// First time a decreasing curve reaches `target`.
///
/// With `log_mode` the curve is interpolated linearly in `(t, ln value)`,
/// otherwise in `(t, value)`. The standard errors of the two bracketing points
/// are treated as fully correlated (neighbouring points of an ensemble mean
/// share almost all of their noise), which gives
/// `sigma_t = (a sigma_1 + b sigma_2) / |slope|` with interpolation weights `a, b`.
pub fn crossing_time(times: &[f64], values: &[f64], stderr: &[f64], target: f64, log_mode: bool) -> Result<Crossing> {
    if times.len() != values.len() || times.len() != stderr.len() {
        return Err(Error::Config("curve columns differ in length".into()));
    }
    let map = |v: f64, s: f64| -> (f64, f64) {
        if log_mode {
            (v.ln(), s / v)
        } else {
            (v, s)
        }
    };
    let goal = if log_mode { target.ln() } else { target };
    if !goal.is_finite() {
        return Err(Error::NoCrossing { target });
    }
    for k in 1..times.len() {
        let (y1, s1) = map(values[k - 1], stderr[k - 1]);
        let (y2, s2) = map(values[k], stderr[k]);
        if k == 1 && y1 <= goal {
            break;
        }
        if y1 > goal && y2 <= goal {
            let (t1, t2) = (times[k - 1], times[k]);
            let w = (y1 - goal) / (y1 - y2);
            let time = t1 + w * (t2 - t1);
            let slope = (y2 - y1) / (t2 - t1);
            let sigma = (1.0 - w) * s1 + w * s2;
            return Ok(Crossing {
                time,
                stderr: (sigma / slope.abs()).abs(),
            });
        }
    }
    Err(Error::NoCrossing { target })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedupEstimate {
    pub target_level: f64,
    pub t_no_control: f64,
    pub t_no_control_stderr: f64,
    pub t_control: f64,
    pub t_control_stderr: f64,
    pub speedup: f64,
    pub stderr: f64,
}

/// Crossing of a metric curve at `target` (an impurity or an infidelity level).
pub fn metric_crossing(stats: &EnsembleStats, target: f64, metric: Metric) -> Result<Crossing> {
    let (mean, se) = stats.curve(metric);
    match metric {
        Metric::Impurity => crossing_time(&stats.times, mean, se, target, true),
        Metric::LogInfidelity => {
            if !(target > 0.0) {
                return Err(Error::NoCrossing { target });
            }
            crossing_time(&stats.times, mean, se, target.ln(), false).map_err(|_| Error::NoCrossing { target })
        }
    }
}

/// `t_no_control / t_control` at a common target, errors added in quadrature.
pub fn speedup(
    no_control: &EnsembleStats,
    controlled: &EnsembleStats,
    target: f64,
    metric: Metric,
) -> Result<SpeedupEstimate> {
    if no_control.params.dim != controlled.params.dim || no_control.params.gamma != controlled.params.gamma {
        return Err(Error::Config("speed-up needs ensembles with equal D and gamma".into()));
    }
    let a = metric_crossing(no_control, target, metric)?;
    let b = metric_crossing(controlled, target, metric)?;
    let s = a.time / b.time;
    let rel = ((a.stderr / a.time).powi(2) + (b.stderr / b.time).powi(2)).sqrt();
    Ok(SpeedupEstimate {
        target_level: target,
        t_no_control: a.time,
        t_no_control_stderr: a.stderr,
        t_control: b.time,
        t_control_stderr: b.stderr,
        speedup: s,
        stderr: s * rel,
    })
}

fn sample_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Crossing time of the mean of a with-replacement resample of trajectories.
fn resampled_crossing(
    times: &[f64],
    series: &[Vec<f64>],
    target: f64,
    metric: Metric,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let n = series.len();
    let mut mean = vec![0.0; times.len()];
    for _ in 0..n {
        for (m, v) in mean.iter_mut().zip(&series[rng.random_range(0..n)]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let zeros = vec![0.0; times.len()];
    let c = match metric {
        Metric::Impurity => crossing_time(times, &mean, &zeros, target, true)?,
        Metric::LogInfidelity => crossing_time(times, &mean, &zeros, target.ln(), false)?,
    };
    Ok(c.time)
}

/// [`speedup`] with standard errors from a trajectory bootstrap.
///
/// Both ensembles must have been run with `keep_trajectories`. Resamples whose
/// curve misses the target are dropped; dropping more than a tenth of them is
/// reported as a missed crossing.
pub fn bootstrap_speedup(
    no_control: &EnsembleStats,
    controlled: &EnsembleStats,
    target: f64,
    metric: Metric,
    resamples: usize,
    seed: u64,
) -> Result<SpeedupEstimate> {
    if resamples < 2 {
        return Err(Error::Config("bootstrap needs at least 2 resamples".into()));
    }
    let mut est = speedup(no_control, controlled, target, metric)?;
    let series = |s: &'_ EnsembleStats| -> Result<Vec<Vec<f64>>> {
        let t = s
            .trajectories
            .as_ref()
            .ok_or_else(|| Error::Config(format!("ensemble '{}' kept no trajectories", s.label)))?;
        Ok(match metric {
            Metric::Impurity => t.impurity.clone(),
            Metric::LogInfidelity => t.log_infidelity.clone(),
        })
    };
    let (a, b) = (series(no_control)?, series(controlled)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ta, mut tb, mut ratio) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..resamples {
        let x = resampled_crossing(&no_control.times, &a, target, metric, &mut rng);
        let y = resampled_crossing(&controlled.times, &b, target, metric, &mut rng);
        if let (Ok(x), Ok(y)) = (x, y) {
            ta.push(x);
            tb.push(y);
            ratio.push(x / y);
        }
    }
    if ratio.len() < 2 || (resamples - ratio.len()) * 10 > resamples {
        return Err(Error::NoCrossing { target });
    }
    est.t_no_control_stderr = sample_std(&ta);
    est.t_control_stderr = sample_std(&tb);
    est.stderr = sample_std(&ratio);
    Ok(est)
}

/// Ordinary least-squares line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Nominal slope error assuming independent residuals.
    pub slope_stderr: f64,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::Config("line fit needs at least 3 paired points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    Ok(LineFit {
        slope,
        intercept,
        slope_stderr: (rss / (n - 2.0) / sxx).sqrt(),
    })
}

/// Fits `y` against time over `[t_start, t_end]`.
pub fn windowed_fit(times: &[f64], y: &[f64], t_start: f64, t_end: f64) -> Result<LineFit> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(y)
        .filter(|(t, _)| **t >= t_start && **t <= t_end)
        .map(|(t, v)| (*t, *v))
        .unzip();
    fit_line(&xs, &ys)
}

/// One controlled strategy of a sweep; `delta_t` comes from the sweep list.
#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub dim: usize,
    pub gamma: f64,
    pub total_time: f64,
    /// Fixed integrator step; `None` picks the default per schedule.
    pub dt: Option<f64>,
    pub scheme: Scheme,
    pub observable: Observable,
    pub initial_state: DensityMatrix,
    pub n_trajectories: usize,
    pub base_seed: u64,
    pub schedules: Vec<ControlSchedule>,
    pub delta_ts: Vec<f64>,
    pub targets: Vec<f64>,
    pub metric: Metric,
    pub infidelity_mode: InfidelityMode,
    pub save_every: Option<usize>,
    /// Bootstrap resamples for speed-up errors; `None` propagates standard errors.
    pub bootstrap: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub strategy: String,
    pub delta_t: f64,
    pub target: f64,
    pub estimate: Option<SpeedupEstimate>,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub baseline: EnsembleStats,
    pub runs: Vec<EnsembleStats>,
    pub speedups: Vec<SpeedupRow>,
}

impl SweepConfig {
    fn params_for(&self, schedule: &ControlSchedule) -> SimParams {
        match self.dt {
            Some(dt) => SimParams::new(self.dim, self.gamma, dt, self.total_time).with_scheme(self.scheme),
            None => SimParams::for_schedule_with(self.dim, self.gamma, self.total_time, schedule, self.scheme),
        }
    }

    fn ensemble(&self, schedule: ControlSchedule) -> EnsembleConfig {
        let mut cfg = EnsembleConfig::new(
            self.params_for(&schedule),
            schedule,
            self.observable.clone(),
            self.initial_state.clone(),
            self.n_trajectories,
            self.base_seed,
        );
        cfg.save_every = self.save_every;
        cfg.infidelity_mode = self.infidelity_mode;
        cfg.keep_trajectories = self.bootstrap.is_some();
        cfg
    }

    /// Validates every ensemble of the sweep without running any.
    pub fn validate(&self) -> Result<()> {
        let check = |cfg: &EnsembleConfig| -> Result<()> {
            cfg.params.validate()?;
            cfg.schedule.validate(cfg.params.dim)?;
            cfg.params.steps_per_pulse(&cfg.schedule).map(|_| ())
        };
        check(&self.ensemble(ControlSchedule::no_control()))?;
        for s in self.controlled_schedules() {
            check(&self.ensemble(s))?;
        }
        Ok(())
    }

    fn controlled_schedules(&self) -> Vec<ControlSchedule> {
        let mut out = Vec::new();
        for s in &self.schedules {
            if !s.is_controlled() {
                continue;
            }
            for &dt in &self.delta_ts {
                let mut s = s.clone();
                s.delta_t = dt;
                out.push(s);
            }
        }
        out
    }
}

/// Runs the shared no-control baseline and every `(schedule, delta_t)` pair,
/// then tabulates speed-ups at every target. Unreached targets give rows
/// without an estimate.
pub fn sweep(config: &SweepConfig) -> Result<SweepResult> {
    config.validate()?;
    let baseline = run_ensemble(&config.ensemble(ControlSchedule::no_control()))?;
    let mut runs = Vec::new();
    let mut speedups = Vec::new();
    for schedule in config.controlled_schedules() {
        let stats = run_ensemble(&config.ensemble(schedule))?;
        for &target in &config.targets {
            speedups.push(SpeedupRow {
                strategy: stats.label.clone(),
                delta_t: stats.delta_t,
                target,
                estimate: match config.bootstrap {
                    Some(r) => bootstrap_speedup(&baseline, &stats, target, config.metric, r, config.base_seed).ok(),
                    None => speedup(&baseline, &stats, target, config.metric).ok(),
                },
            });
        }
        runs.push(stats);
    }
    Ok(SweepResult {
        baseline,
        runs,
        speedups,
    })
}

pub const CURVES_HEADER: &str = "strategy,delta_t,time,mean_L,se_L,mean_lnDelta,se_lnDelta";
pub const SPEEDUPS_HEADER: &str = "strategy,delta_t,target,speedup,stderr,t_no_control,t_control";

pub fn write_curves<'a, W: Write>(out: &mut W, stats: impl IntoIterator<Item = &'a EnsembleStats>) -> Result<()> {
    writeln!(out, "{CURVES_HEADER}")?;
    for s in stats {
        for k in 0..s.times.len() {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.label,
                fmt_f64(s.delta_t),
                fmt_f64(s.times[k]),
                fmt_f64(s.mean_impurity[k]),
                fmt_f64(s.se_impurity[k]),
                fmt_f64(s.mean_log_infidelity[k]),
                fmt_f64(s.se_log_infidelity[k]),
            )?;
        }
    }
    Ok(())
}

pub fn write_speedups<'a, W: Write>(out: &mut W, rows: impl IntoIterator<Item = &'a SpeedupRow>) -> Result<()> {
    writeln!(out, "{SPEEDUPS_HEADER}")?;
    for r in rows {
        let (s, e, a, b) = match &r.estimate {
            Some(x) => (x.speedup, x.stderr, x.t_no_control, x.t_control),
            None => (f64::NAN, f64::NAN, f64::NAN, f64::NAN),
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.strategy,
            fmt_f64(r.delta_t),
            fmt_f64(r.target),
            fmt_f64(s),
            fmt_f64(e),
            fmt_f64(a),
            fmt_f64(b),
        )?;
    }
    Ok(())
}

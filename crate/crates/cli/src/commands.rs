use std::fs;
use std::path::{Path, PathBuf};

use openloop_core::ensemble::{sweep, write_curves, write_speedups, EnsembleStats, SweepConfig, SweepResult};
use openloop_core::oracle::{run_suite, write_oracle_csv, OracleRow};
use openloop_core::record::{fmt_f64, load_record, save_record, state_digest};
use openloop_core::sme::{filter_record, simulate_trajectory_with, TrajectoryOptions};
use openloop_core::state::{impurity, infidelity};
use openloop_core::{ControlSchedule, DensityMatrix, InfidelityMode, MeasurementRecord, Scheme};
use serde::Serialize;

use crate::config::{Experiment, InitialState, ObservableSpec, RunConfig};
use crate::error::{CliError, CliResult};

pub const META_INITIAL_STATE: &str = "initial_state";
pub const META_OBSERVABLE: &str = "observable";
pub const META_SHIFT: &str = "observable_shift";
pub const META_DIGEST: &str = "final_state_sha256";

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(value).expect("plain data serializes");
    text.push('\n');
    text.into_bytes()
}

#[derive(Serialize)]
struct EnsembleSummary<'a> {
    strategy: &'a str,
    delta_t: f64,
    dt: f64,
    scheme: Scheme,
    total_time: f64,
    n_trajectories: usize,
    n_excluded: usize,
    first_exclusion: Option<&'a str>,
}

impl<'a> From<&'a EnsembleStats> for EnsembleSummary<'a> {
    fn from(s: &'a EnsembleStats) -> Self {
        Self {
            strategy: &s.label,
            delta_t: s.delta_t,
            dt: s.params.dt,
            scheme: s.params.scheme,
            total_time: s.params.total_time,
            n_trajectories: s.n_trajectories,
            n_excluded: s.n_excluded,
            first_exclusion: s.first_exclusion.as_deref(),
        }
    }
}

/// Controlled schedules in the order `sweep` runs them.
fn run_schedules(sweep: &SweepConfig) -> Vec<ControlSchedule> {
    let mut out = Vec::new();
    for s in sweep.schedules.iter().filter(|s| s.is_controlled()) {
        for &dt in &sweep.delta_ts {
            let mut s = s.clone();
            s.delta_t = dt;
            out.push(s);
        }
    }
    out
}

/// Runs purify, measure or sweep and writes `curves.csv`, `speedups.csv`,
/// `ensembles.json` and the resolved `config.toml`. Nothing is written unless
/// every ensemble succeeds.
pub fn run_experiment(cfg: &RunConfig, experiment: Experiment) -> CliResult<SweepResult> {
    let sweep_cfg = cfg.sweep_config(experiment)?;
    let result = sweep(&sweep_cfg)?;

    let ensembles = || std::iter::once(&result.baseline).chain(&result.runs);
    let mut curves = Vec::new();
    write_curves(&mut curves, ensembles())?;
    let mut speedups = Vec::new();
    write_speedups(&mut speedups, &result.speedups)?;
    let summaries: Vec<EnsembleSummary> = ensembles().map(EnsembleSummary::from).collect();

    let records = if cfg.records > 0 {
        let schedules = std::iter::once(ControlSchedule::no_control()).chain(run_schedules(&sweep_cfg));
        let mut out = Vec::new();
        for (schedule, stats) in schedules.zip(ensembles()) {
            for i in 0..cfg.records.min(cfg.n_trajectories) as u64 {
                let name = format!("{}-{}-{i}.rec", stats.label, stats.delta_t);
                out.push((name, trajectory_record(cfg, &sweep_cfg, &schedule, stats, i)?));
            }
        }
        out
    } else {
        Vec::new()
    };

    let dir = &cfg.output_dir;
    create_dir(dir)?;
    write_file(&dir.join("curves.csv"), &curves)?;
    write_file(&dir.join("speedups.csv"), &speedups)?;
    write_file(&dir.join("ensembles.json"), &to_json(&summaries))?;
    write_file(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    if !records.is_empty() {
        let rec_dir = dir.join("records");
        create_dir(&rec_dir)?;
        for (name, record) in &records {
            save_record(record, &rec_dir.join(name))?;
        }
    }

    for row in &result.speedups {
        match &row.estimate {
            Some(e) => println!(
                "{:<26} delta_t={:<8} target={:<8e} speedup={:.4} +- {:.4}",
                row.strategy, row.delta_t, row.target, e.speedup, e.stderr
            ),
            None => println!(
                "{:<26} delta_t={:<8} target={:<8e} not reached",
                row.strategy, row.delta_t, row.target
            ),
        }
    }
    println!("wrote {}", dir.display());
    Ok(result)
}

/// Re-simulates trajectory `i` of an ensemble with its record kept.
fn trajectory_record(
    cfg: &RunConfig,
    sweep_cfg: &SweepConfig,
    schedule: &ControlSchedule,
    stats: &EnsembleStats,
    i: u64,
) -> CliResult<MeasurementRecord> {
    let opts = TrajectoryOptions {
        save_every: stats.params.n_steps().max(1),
        infidelity_mode: sweep_cfg.infidelity_mode,
        keep_record: true,
    };
    let traj = simulate_trajectory_with(
        &sweep_cfg.initial_state,
        &sweep_cfg.observable,
        &schedule.with_seed(schedule.seed.wrapping_add(i)),
        &stats.params,
        sweep_cfg.base_seed.wrapping_add(i),
        &opts,
    )?;
    let mut record = traj.record.expect("record requested");
    let meta = &mut record.metadata;
    meta.insert(META_INITIAL_STATE.into(), cfg.initial_state.to_string());
    meta.insert(META_OBSERVABLE.into(), cfg.observable.to_string());
    meta.insert(META_SHIFT.into(), fmt_f64(cfg.observable_shift));
    meta.insert(META_DIGEST.into(), state_digest(&traj.final_state));
    Ok(record)
}

/// Runs the closed-form checks and writes `oracle.csv` and `oracle.json`.
pub fn run_oracle(cfg: &RunConfig) -> CliResult<Vec<OracleRow>> {
    cfg.validate()?;
    let rows = run_suite(&cfg.oracle_config())?;
    let mut csv = Vec::new();
    write_oracle_csv(&mut csv, &rows)?;
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    write_file(&dir.join("oracle.csv"), &csv)?;
    write_file(&dir.join("oracle.json"), &to_json(&rows))?;

    let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    println!("{} of {} oracle checks passed", rows.len() - failed.len(), rows.len());
    for r in rows.iter().filter(|r| !r.pass) {
        eprintln!(
            "FAIL {}: closed form {:.6e}, measured {:.6e} +- {:.2e}",
            r.name, r.closed_form, r.mc_mean, r.mc_stderr
        );
    }
    if failed.is_empty() {
        Ok(rows)
    } else {
        Err(CliError::CheckFailed(format!(
            "{} oracle check(s) failed: {}",
            failed.len(),
            failed.join(", ")
        )))
    }
}

#[derive(Clone, Debug, Default)]
pub struct FilterOptions {
    pub output: Option<PathBuf>,
    pub initial_state: Option<InitialState>,
    pub observable: Option<ObservableSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FilterReport {
    pub record: PathBuf,
    pub dim: usize,
    pub impurity: f64,
    pub infidelity: f64,
    pub sha256: String,
    pub expected_sha256: Option<String>,
    pub verified: Option<bool>,
    pub observable_shift: f64,
    /// Largest entry-wise distance between the shifted filter and the
    /// unshifted filter fed `dR - sqrt(4 gamma) lambda dt`.
    pub shift_adjusted_max_diff: Option<f64>,
    pub state_re: Vec<Vec<f64>>,
    pub state_im: Vec<Vec<f64>>,
}

fn from_meta<T: std::str::FromStr<Err = CliError>>(
    record: &MeasurementRecord,
    key: &str,
    explicit: Option<T>,
) -> CliResult<T> {
    if let Some(v) = explicit {
        return Ok(v);
    }
    record
        .metadata
        .get(key)
        .ok_or_else(|| CliError::Config(format!("record has no '{key}' entry; pass it on the command line")))?
        .parse()
}

/// Re-filters a stored record and checks it against the stored state hash.
pub fn run_filter(path: &Path, opts: &FilterOptions) -> CliResult<FilterReport> {
    let record = load_record(path)?;
    let p = &record.params;
    let rho0 = from_meta(&record, META_INITIAL_STATE, opts.initial_state.clone())?.build(p.dim)?;
    let base = from_meta(&record, META_OBSERVABLE, opts.observable.clone())?.build(p.dim)?;
    let shift = match record.metadata.get(META_SHIFT) {
        Some(v) => v
            .parse::<f64>()
            .map_err(|_| CliError::Config(format!("bad {META_SHIFT} '{v}'")))?,
        None => 0.0,
    };

    let state = filter_record(&rho0, &base.shifted(shift), &record)?;
    let shift_adjusted_max_diff = if shift != 0.0 {
        let offset = (4.0 * p.gamma).sqrt() * shift * p.dt;
        let mut adjusted = record.clone();
        adjusted.increments.iter_mut().for_each(|dr| *dr -= offset);
        let other = filter_record(&rho0, &base, &adjusted)?;
        Some(other.matrix().max_abs_diff(state.matrix()))
    } else {
        None
    };

    let sha256 = state_digest(&state);
    let expected_sha256 = record.metadata.get(META_DIGEST).cloned();
    let verified = expected_sha256.as_ref().map(|e| *e == sha256);
    let report = FilterReport {
        record: path.to_path_buf(),
        dim: p.dim,
        impurity: impurity(&state),
        infidelity: infidelity(&state, InfidelityMode::Eigenvalue).0,
        sha256,
        expected_sha256,
        verified,
        observable_shift: shift,
        shift_adjusted_max_diff,
        state_re: matrix_part(&state, false),
        state_im: matrix_part(&state, true),
    };

    let out = opts.output.clone().unwrap_or_else(|| path.with_extension("json"));
    write_file(&out, &to_json(&report))?;
    println!(
        "impurity={:.6e} infidelity={:.6e} sha256={} verified={}",
        report.impurity,
        report.infidelity,
        report.sha256,
        match verified {
            Some(true) => "yes",
            Some(false) => "NO",
            None => "n/a",
        }
    );
    if verified == Some(false) {
        return Err(CliError::CheckFailed(format!(
            "filtered state hash {} differs from the stored {}",
            report.sha256,
            report.expected_sha256.as_deref().unwrap_or_default()
        )));
    }
    Ok(report)
}

fn matrix_part(rho: &DensityMatrix, imaginary: bool) -> Vec<Vec<f64>> {
    let m = rho.matrix();
    let pick = |i, j| {
        let z = m[(i, j)];
        if imaginary {
            z.im
        } else {
            z.re
        }
    };
    (0..m.dim())
        .map(|i| (0..m.dim()).map(|j| pick(i, j)).collect())
        .collect()
}

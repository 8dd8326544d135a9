//! Run manifests.
//!
//! A manifest is a TOML file whose keys mirror [`RunConfig`]; every key is
//! optional and falls back to [`RunConfig::default`]. Command-line flags are
//! applied on top of the file.
//!
//! ```toml
//! dim = 4
//! gamma = 1.0
//! total_time = 6.0
//! n_trajectories = 2000
//! base_seed = 1
//! scheme = "kraus"
//! dt = 1e-3
//! delta_t = [0.01, 0.25, 1.0]
//! strategies = ["haar_random"]
//! targets = [0.1, 0.01, 0.001]
//! initial_state = "maximally_mixed"   # or "basis:2", "random:7"
//! observable = "jz"                   # or "diag:1,0,-1"
//! output_dir = "out/purify"
//!
//! [oracle]
//! dims = [2, 3, 4]
//! n_samples = 20000
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use openloop_core::analytics::MAX_ENUMERATED_DIM;
use openloop_core::ensemble::{Metric, SweepConfig};
use openloop_core::oracle::OracleSuiteConfig;
use openloop_core::state::{jz_operator, random_density_matrix};
use openloop_core::{
    CMatrix, ControlSchedule, DensityMatrix, Error as CoreError, InfidelityMode, Observable, Scheme, Strategy,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Starting state of every trajectory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum InitialState {
    #[default]
    MaximallyMixed,
    /// Measurement-basis state `|k><k|`.
    Basis(usize),
    /// Random mixed state drawn from the given seed.
    Random(u64),
}

impl InitialState {
    pub fn build(&self, dim: usize) -> CliResult<DensityMatrix> {
        Ok(match *self {
            InitialState::MaximallyMixed => DensityMatrix::maximally_mixed(dim)?,
            InitialState::Basis(k) if k >= dim => {
                return Err(CliError::Config(format!(
                    "basis state {k} does not exist for D = {dim}"
                )))
            }
            InitialState::Basis(k) => DensityMatrix::basis(dim, k)?,
            InitialState::Random(seed) => random_density_matrix(dim, &mut ChaCha8Rng::seed_from_u64(seed)),
        })
    }
}

impl fmt::Display for InitialState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitialState::MaximallyMixed => f.write_str("maximally_mixed"),
            InitialState::Basis(k) => write!(f, "basis:{k}"),
            InitialState::Random(s) => write!(f, "random:{s}"),
        }
    }
}

impl FromStr for InitialState {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        let bad = || CliError::Config(format!("unknown initial state '{s}'"));
        match s.split_once(':') {
            None if s == "maximally_mixed" => Ok(InitialState::MaximallyMixed),
            Some(("basis", k)) => k.parse().map(InitialState::Basis).map_err(|_| bad()),
            Some(("random", k)) => k.parse().map(InitialState::Random).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for InitialState {
    type Error = CliError;
    fn try_from(s: String) -> CliResult<Self> {
        s.parse()
    }
}

impl From<InitialState> for String {
    fn from(s: InitialState) -> Self {
        s.to_string()
    }
}

/// Measured observable before any shift.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ObservableSpec {
    /// `J_z` with eigenvalues `(D-1)/2, ..., -(D-1)/2`.
    #[default]
    Jz,
    /// Diagonal observable with the listed (traceless) eigenvalues.
    Diagonal(Vec<f64>),
}

impl ObservableSpec {
    pub fn build(&self, dim: usize) -> CliResult<Observable> {
        Ok(match self {
            ObservableSpec::Jz => jz_operator(dim)?,
            ObservableSpec::Diagonal(d) => {
                if d.len() != dim {
                    return Err(CliError::Config(format!(
                        "observable has {} entries, D = {dim}",
                        d.len()
                    )));
                }
                Observable::new(CMatrix::from_real_diagonal(d))?
            }
        })
    }
}

impl fmt::Display for ObservableSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObservableSpec::Jz => f.write_str("jz"),
            ObservableSpec::Diagonal(d) => {
                let parts: Vec<String> = d.iter().map(|x| format!("{x:?}")).collect();
                write!(f, "diag:{}", parts.join(","))
            }
        }
    }
}

impl FromStr for ObservableSpec {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        if s == "jz" {
            return Ok(ObservableSpec::Jz);
        }
        let values = s
            .strip_prefix("diag:")
            .ok_or_else(|| CliError::Config(format!("unknown observable '{s}'")))?;
        values
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map(ObservableSpec::Diagonal)
            .map_err(|_| CliError::Config(format!("bad diagonal entries in '{s}'")))
    }
}

impl TryFrom<String> for ObservableSpec {
    type Error = CliError;
    fn try_from(s: String) -> CliResult<Self> {
        s.parse()
    }
}

impl From<ObservableSpec> for String {
    fn from(s: ObservableSpec) -> Self {
        s.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub dims: Vec<usize>,
    pub n_inputs: usize,
    pub n_samples: usize,
    pub sigmas: f64,
    pub dt: f64,
    pub seed: u64,
    /// Fault injection: replaces the permutation-average constant.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aleph_override: Option<f64>,
}

impl Default for OracleSection {
    fn default() -> Self {
        let d = OracleSuiteConfig::default();
        Self {
            dims: d.dims,
            n_inputs: d.n_inputs,
            n_samples: d.n_samples,
            sigmas: d.sigmas,
            dt: d.dt,
            seed: d.seed,
            aleph_override: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dim: usize,
    pub gamma: f64,
    /// Integrator step; unset picks the largest admissible divisor of every `delta_t`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// Unset uses the command default (`kraus` for purify, `euler_maruyama` otherwise).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scheme: Option<Scheme>,
    pub total_time: f64,
    pub n_trajectories: usize,
    pub base_seed: u64,
    pub control_seed: u64,
    pub delta_t: Vec<f64>,
    /// Unset uses the command default.
    pub strategies: Vec<Strategy>,
    /// Permutation digit strings for `deterministic_alternation`.
    pub alternation: Vec<String>,
    pub targets: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric: Option<Metric>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub infidelity_mode: Option<InfidelityMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub save_every: Option<usize>,
    /// Bootstrap resamples for speed-up errors; unset propagates standard errors.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<usize>,
    pub initial_state: InitialState,
    pub observable: ObservableSpec,
    /// `lambda` in `X + lambda I`.
    pub observable_shift: f64,
    /// Measurement records written per ensemble.
    pub records: usize,
    pub output_dir: PathBuf,
    pub oracle: OracleSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dim: 4,
            gamma: 1.0,
            dt: None,
            scheme: None,
            total_time: 6.0,
            n_trajectories: 200,
            base_seed: 1,
            control_seed: 1_000_000_007,
            delta_t: vec![0.01],
            strategies: Vec::new(),
            alternation: Vec::new(),
            targets: Vec::new(),
            metric: None,
            infidelity_mode: None,
            save_every: None,
            bootstrap: None,
            initial_state: InitialState::MaximallyMixed,
            observable: ObservableSpec::Jz,
            observable_shift: 0.0,
            records: 0,
            output_dir: PathBuf::from("out"),
            oracle: OracleSection::default(),
        }
    }
}

/// Experiment pipeline selected by the subcommand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    Purify,
    Measure,
    Sweep,
}

impl Experiment {
    fn default_scheme(self) -> Scheme {
        match self {
            Experiment::Purify => Scheme::Kraus,
            Experiment::Measure | Experiment::Sweep => Scheme::EulerMaruyama,
        }
    }

    fn default_metric(self) -> Metric {
        match self {
            Experiment::Measure => Metric::LogInfidelity,
            Experiment::Purify | Experiment::Sweep => Metric::Impurity,
        }
    }

    fn default_strategies(self) -> Vec<Strategy> {
        match self {
            Experiment::Measure => vec![Strategy::RandomPermutation],
            Experiment::Purify | Experiment::Sweep => vec![Strategy::HaarRandom],
        }
    }

    fn default_targets(self) -> Vec<f64> {
        match self {
            Experiment::Measure => vec![1e-3, 1e-5, 1e-7, 1e-9],
            Experiment::Purify | Experiment::Sweep => vec![1e-1, 3e-2, 1e-2, 3e-3, 1e-3],
        }
    }
}

impl RunConfig {
    /// Parses and validates a manifest.
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg = Self::parse_unchecked(text, Path::new("<string>"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn parse_unchecked(text: &str, path: &Path) -> CliResult<Self> {
        toml::from_str(text).map_err(|source| CliError::Toml {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Reads a manifest without validating it, so flags can still repair it.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse_unchecked(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("RunConfig always serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        let fail = |msg: String| Err(CliError::Config(msg));
        if self.dim < 2 {
            return fail(format!("dim must be at least 2, got {}", self.dim));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return fail(format!("gamma must be finite and non-negative, got {}", self.gamma));
        }
        if !(self.total_time > 0.0 && self.total_time.is_finite()) {
            return fail(format!("total_time must be positive, got {}", self.total_time));
        }
        if self.n_trajectories == 0 {
            return fail("n_trajectories must be at least 1".into());
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return fail(format!("dt must be positive, got {dt}"));
            }
        }
        if let Some(&d) = self.delta_t.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
            return fail(format!("delta_t entries must be positive, got {d}"));
        }
        if let Some(&t) = self.targets.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
            return fail(format!("targets must be positive, got {t}"));
        }
        if !self.observable_shift.is_finite() {
            return fail("observable_shift must be finite".into());
        }
        if self.save_every == Some(0) {
            return fail("save_every must be at least 1".into());
        }
        if matches!(self.bootstrap, Some(b) if b < 2) {
            return fail("bootstrap needs at least 2 resamples".into());
        }
        let alternating = self.strategies.contains(&Strategy::DeterministicAlternation);
        if alternating && self.alternation.is_empty() {
            return fail("deterministic_alternation needs an `alternation` list of permutations".into());
        }
        self.initial_state.build(self.dim)?;
        self.observable.build(self.dim)?;
        let o = &self.oracle;
        if let Some(&d) = o.dims.iter().find(|&&d| d > MAX_ENUMERATED_DIM) {
            return Err(CoreError::FactorialGuard {
                dim: d,
                limit: MAX_ENUMERATED_DIM,
            }
            .into());
        }
        if o.dims.iter().any(|&d| d < 2) || o.n_samples < 2 || !(o.sigmas > 0.0) || !(o.dt > 0.0) {
            return fail("oracle section needs dims >= 2, n_samples >= 2, sigmas > 0 and dt > 0".into());
        }
        Ok(())
    }

    pub fn observable(&self) -> CliResult<Observable> {
        Ok(self.observable.build(self.dim)?.shifted(self.observable_shift))
    }

    pub fn scheme_for(&self, experiment: Experiment) -> Scheme {
        self.scheme.unwrap_or(experiment.default_scheme())
    }

    /// Schedules actually run, in sweep order; unsupported 2-designs fall back to Haar.
    pub fn schedules(&self, experiment: Experiment) -> Vec<ControlSchedule> {
        let strategies = if self.strategies.is_empty() {
            experiment.default_strategies()
        } else {
            self.strategies.clone()
        };
        strategies
            .into_iter()
            .map(|s| {
                let mut schedule =
                    ControlSchedule::new(s, self.delta_t.first().copied().unwrap_or(0.0), self.control_seed);
                if s == Strategy::DeterministicAlternation {
                    schedule.alternation = self.alternation.clone();
                }
                let (schedule, fell_back) = schedule.with_design_fallback(self.dim);
                if fell_back {
                    eprintln!(
                        "warning: no bundled 2-design for D = {}; using Haar sampling instead",
                        self.dim
                    );
                }
                schedule
            })
            .collect()
    }

    /// The harness configuration for an experiment, fully validated.
    pub fn sweep_config(&self, experiment: Experiment) -> CliResult<SweepConfig> {
        self.validate()?;
        let cfg = SweepConfig {
            dim: self.dim,
            gamma: self.gamma,
            total_time: self.total_time,
            dt: self.dt,
            scheme: self.scheme_for(experiment),
            observable: self.observable()?,
            initial_state: self.initial_state.build(self.dim)?,
            n_trajectories: self.n_trajectories,
            base_seed: self.base_seed,
            schedules: self.schedules(experiment),
            delta_ts: self.delta_t.clone(),
            targets: if self.targets.is_empty() {
                experiment.default_targets()
            } else {
                self.targets.clone()
            },
            metric: self.metric.unwrap_or(experiment.default_metric()),
            infidelity_mode: self.infidelity_mode.unwrap_or(match experiment {
                Experiment::Measure => InfidelityMode::Population,
                Experiment::Purify | Experiment::Sweep => InfidelityMode::Eigenvalue,
            }),
            save_every: self.save_every,
            bootstrap: self.bootstrap,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn oracle_config(&self) -> OracleSuiteConfig {
        let o = &self.oracle;
        OracleSuiteConfig {
            dims: o.dims.clone(),
            n_inputs: o.n_inputs,
            n_samples: o.n_samples,
            sigmas: o.sigmas,
            gamma: self.gamma,
            dt: o.dt,
            seed: o.seed,
            aleph_override: o.aleph_override,
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! set {
            ($($field:ident <- $flag:ident),* $(,)?) => {
                $(if let Some(v) = &o.$flag { self.$field = v.clone(); })*
            };
        }
        set!(
            dim <- dim,
            gamma <- gamma,
            total_time <- total_time,
            n_trajectories <- trajectories,
            base_seed <- seed,
            control_seed <- control_seed,
            delta_t <- delta_t,
            strategies <- strategies,
            alternation <- alternation,
            targets <- targets,
            initial_state <- initial_state,
            observable <- observable,
            observable_shift <- observable_shift,
            records <- records,
            output_dir <- output,
        );
        if o.dt.is_some() {
            self.dt = o.dt;
        }
        if o.scheme.is_some() {
            self.scheme = o.scheme;
        }
        if o.metric.is_some() {
            self.metric = o.metric;
        }
        if o.save_every.is_some() {
            self.save_every = o.save_every;
        }
        if o.bootstrap.is_some() {
            self.bootstrap = o.bootstrap;
        }
        if let Some(d) = &o.oracle_dims {
            self.oracle.dims = d.clone();
        }
        if let Some(n) = o.oracle_samples {
            self.oracle.n_samples = n;
        }
        if o.aleph_override.is_some() {
            self.oracle.aleph_override = o.aleph_override;
        }
    }
}

/// Flags that override manifest values.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// euler_maruyama or kraus.
    #[arg(long)]
    pub scheme: Option<Scheme>,
    #[arg(long)]
    pub total_time: Option<f64>,
    #[arg(long, short = 'n')]
    pub trajectories: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub control_seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub delta_t: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub strategies: Option<Vec<Strategy>>,
    #[arg(long, value_delimiter = ',')]
    pub alternation: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<f64>>,
    /// impurity or log_infidelity.
    #[arg(long)]
    pub metric: Option<Metric>,
    #[arg(long)]
    pub save_every: Option<usize>,
    /// Bootstrap resamples for speed-up error bars.
    #[arg(long)]
    pub bootstrap: Option<usize>,
    /// maximally_mixed, basis:K or random:SEED.
    #[arg(long)]
    pub initial_state: Option<InitialState>,
    /// jz or diag:x1,x2,...
    #[arg(long)]
    pub observable: Option<ObservableSpec>,
    #[arg(long, allow_negative_numbers = true)]
    pub observable_shift: Option<f64>,
    /// Measurement records to write per ensemble.
    #[arg(long)]
    pub records: Option<usize>,
    #[arg(long, short = 'o')]
    pub output: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub oracle_dims: Option<Vec<usize>>,
    #[arg(long)]
    pub oracle_samples: Option<usize>,
    /// Replace the permutation-average constant (fault injection).
    #[arg(long)]
    pub aleph_override: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use openloop_core::control::has_two_design;

    const FULL: &str = r#"
dim = 4
gamma = 0.5
dt = 1e-3
scheme = "kraus"
total_time = 3.0
n_trajectories = 10
base_seed = 9
control_seed = 4
delta_t = [0.01, 0.25]
strategies = ["haar_random", "deterministic_alternation"]
alternation = ["2143", "3124"]
targets = [0.1, 0.001]
metric = "impurity"
infidelity_mode = "population"
save_every = 5
initial_state = "random:3"
observable = "diag:1.5,-0.5,-0.5,-0.5"
observable_shift = -0.25
records = 2
output_dir = "somewhere"

[oracle]
dims = [2, 3]
n_inputs = 1
n_samples = 100
sigmas = 5.0
dt = 1e-5
seed = 8
aleph_override = 0.5
"#;

    #[test]
    fn round_trip_is_identity() {
        for text in [FULL, ""] {
            let a = RunConfig::parse(text).unwrap();
            let b = RunConfig::parse(&a.to_toml()).unwrap();
            assert_eq!(a, b);
        }
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("dimension = 3"), Err(CliError::Toml { .. })));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            "dim = 1",
            "gamma = -1.0",
            "delta_t = [0.0]",
            "strategies = [\"deterministic_alternation\"]",
            "initial_state = \"basis:7\"",
            "observable = \"diag:1,1,1,1\"",
        ] {
            let err = RunConfig::parse(text).unwrap_err();
            assert_eq!(err.exit_code(), 1, "{text}: {err}");
        }
        let err = RunConfig::parse("[oracle]\ndims = [9]").unwrap_err();
        assert!(matches!(err, CliError::Core(CoreError::FactorialGuard { dim: 9, .. })));
    }

    #[test]
    fn pulse_spacing_must_be_a_multiple_of_dt() {
        let cfg = RunConfig::parse("dt = 1e-3\ndelta_t = [0.0015]").unwrap();
        let err = cfg.sweep_config(Experiment::Purify).unwrap_err();
        assert_eq!(err.exit_code(), 1, "{err}");
    }

    #[test]
    fn flags_override_the_file() {
        let mut cfg = RunConfig::parse(FULL).unwrap();
        cfg.apply(&Overrides {
            dim: Some(3),
            delta_t: Some(vec![0.5]),
            scheme: Some(Scheme::EulerMaruyama),
            aleph_override: Some(0.1),
            ..Default::default()
        });
        assert_eq!((cfg.dim, cfg.delta_t.as_slice()), (3, &[0.5][..]));
        assert_eq!(cfg.scheme, Some(Scheme::EulerMaruyama));
        assert_eq!(cfg.oracle.aleph_override, Some(0.1));
        assert_eq!(cfg.gamma, 0.5);
    }

    #[test]
    fn command_defaults() {
        let cfg = RunConfig::default();
        let p = cfg.sweep_config(Experiment::Purify).unwrap();
        assert_eq!((p.scheme, p.metric), (Scheme::Kraus, Metric::Impurity));
        let m = cfg.sweep_config(Experiment::Measure).unwrap();
        assert_eq!(m.metric, Metric::LogInfidelity);
        assert_eq!(m.infidelity_mode, InfidelityMode::Population);
        assert_eq!(m.schedules[0].strategy, Strategy::RandomPermutation);
    }

    #[test]
    fn missing_design_falls_back_to_haar() {
        let cfg = RunConfig::parse("dim = 3\nstrategies = [\"two_design\"]").unwrap();
        assert_eq!(cfg.schedules(Experiment::Purify)[0].strategy, Strategy::HaarRandom);
        let cfg = RunConfig::parse("dim = 2\nstrategies = [\"two_design\"]").unwrap();
        assert_eq!(cfg.schedules(Experiment::Purify)[0].strategy, Strategy::TwoDesign);
        assert!(has_two_design(2));
    }
}

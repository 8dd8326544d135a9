//! Continuous weak measurement of a `D`-level system under stroboscopic
//! open-loop control, with offline quantum filtering.
//!
//! * [`state`]: density matrices, observables, unitaries, impurity and infidelity.
//! * [`sme`]: Euler-Maruyama integration of the conditional master equation,
//!   measurement records and offline filtering.
//! * [`control`]: no-control, Haar, 2-design and permutation pulse schedules.
//! * [`analytics`]: closed-form group averages, rates and speed-up bounds.
//! * [`oracle`]: Monte Carlo and enumeration checks of those closed forms.
//! * [`ensemble`]: trajectory ensembles, crossing times and speed-ups.

pub mod analytics;
pub mod control;
pub mod ensemble;
pub mod error;
pub mod linalg;
pub mod oracle;
pub mod record;
pub mod sme;
pub mod state;

pub use control::{ControlSchedule, Permutation, PermutationConvention, Strategy};
pub use error::{Error, Result};
pub use linalg::CMatrix;
pub use sme::{MeasurementRecord, Scheme, SimParams, TrajectoryResult};
pub use state::{DensityMatrix, InfidelityMode, Observable, UnitaryMatrix};

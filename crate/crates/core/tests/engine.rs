use openloop_core::control::haar_sample;
use openloop_core::ensemble::{
    run_ensemble, speedup, sweep, write_curves, write_speedups, EnsembleConfig, Metric, SweepConfig, CURVES_HEADER,
    SPEEDUPS_HEADER,
};
use openloop_core::record::{load_record, save_record, state_digest};
use openloop_core::sme::{filter_record, simulate_trajectory, SmeKernel};
use openloop_core::state::{jz_operator, random_density_matrix, rotated_observable};
use openloop_core::{ControlSchedule, DensityMatrix, Error, InfidelityMode, Scheme, SimParams, Strategy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `<L>(t)` without control for diagonal `X` and `rho0 = I/D`, by quadrature.
///
/// Given the true level `k` the record is `Y_t = sqrt(8 gamma) x_k t + W_t`, and the
/// populations are `p_i ∝ exp(sqrt(8 gamma) x_i Y_t - 4 gamma x_i^2 t)`.
fn no_control_impurity(x: &[f64], gamma: f64, t: f64) -> f64 {
    let d = x.len();
    let c = (8.0 * gamma).sqrt();
    let (zmax, n) = (12.0, 6001);
    let h = 2.0 * zmax / (n - 1) as f64;
    let mut total = 0.0;
    for &xk in x {
        for s in 0..n {
            let z = -zmax + s as f64 * h;
            let weight = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt() * h;
            let y = c * xk * t + t.sqrt() * z;
            let logs: Vec<f64> = x.iter().map(|xi| c * xi * y - 4.0 * gamma * xi * xi * t).collect();
            let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
            let norm: f64 = w.iter().sum();
            let purity: f64 = w.iter().map(|v| (v / norm).powi(2)).sum();
            total += weight * (1.0 - purity);
        }
    }
    total / d as f64
}

#[test]
fn quadrature_reproduces_initial_impurity() {
    let x = [1.5, 0.5, -0.5, -1.5];
    assert!((no_control_impurity(&x, 1.0, 1e-9) - 0.75).abs() < 1e-6);
}

#[test]
fn no_control_ensemble_matches_quadrature() {
    let x = jz_operator(4).unwrap();
    let diag: Vec<f64> = x.eigenvalues();
    for scheme in [Scheme::EulerMaruyama, Scheme::Kraus] {
        let params = SimParams::for_schedule_with(4, 1.0, 3.0, &ControlSchedule::no_control(), scheme);
        let mut cfg = EnsembleConfig::new(
            params.clone(),
            ControlSchedule::no_control(),
            x.clone(),
            DensityMatrix::maximally_mixed(4).unwrap(),
            3000,
            17,
        );
        cfg.save_every = Some((0.5 / params.dt).round() as usize);
        let stats = run_ensemble(&cfg).unwrap();
        for (k, &t) in stats.times.iter().enumerate().skip(1) {
            let exact = no_control_impurity(&diag, 1.0, t);
            let z = (stats.mean_impurity[k] - exact) / stats.se_impurity[k];
            assert!(
                z.abs() < 4.0,
                "{scheme:?} t={t}: {} vs {exact} (z={z:.2})",
                stats.mean_impurity[k]
            );
        }
    }
}

#[test]
fn replay_through_files_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cases = [
        (Strategy::NoControl, 3, Scheme::EulerMaruyama),
        (Strategy::HaarRandom, 4, Scheme::Kraus),
        (Strategy::TwoDesign, 2, Scheme::Kraus),
        (Strategy::TwoDesign, 4, Scheme::Kraus),
        (Strategy::RandomPermutation, 5, Scheme::EulerMaruyama),
        (Strategy::DeterministicAlternation, 4, Scheme::EulerMaruyama),
    ];
    for (i, (strategy, dim, scheme)) in cases.into_iter().enumerate() {
        let schedule = match strategy {
            Strategy::DeterministicAlternation => ControlSchedule::alternating(&["2143", "3124"], 0.05),
            s => ControlSchedule::new(s, 0.05, 90 + i as u64),
        };
        let params = SimParams::for_schedule_with(dim, 1.0, 0.5, &schedule, scheme);
        let x = jz_operator(dim).unwrap();
        let rho0 = DensityMatrix::maximally_mixed(dim).unwrap();
        let online = simulate_trajectory(&rho0, &x, &schedule, &params, 1000 + i as u64).unwrap();
        let path = dir.path().join(format!("run{i}.rec"));
        save_record(online.record.as_ref().unwrap(), &path).unwrap();
        let record = load_record(&path).unwrap();
        let offline = filter_record(&rho0, &x, &record).unwrap();
        assert_eq!(
            state_digest(&offline),
            state_digest(&online.final_state),
            "{strategy:?}"
        );

        let other = random_density_matrix(dim, &mut rng);
        let moved = filter_record(&other, &x, &record);
        if let Ok(moved) = moved {
            assert_ne!(state_digest(&moved), state_digest(&online.final_state));
        }
    }
}

#[test]
fn truncated_record_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let schedule = ControlSchedule::new(Strategy::HaarRandom, 0.01, 1);
    let params = SimParams::for_schedule_with(3, 1.0, 0.2, &schedule, Scheme::Kraus);
    let x = jz_operator(3).unwrap();
    let rho0 = DensityMatrix::maximally_mixed(3).unwrap();
    let online = simulate_trajectory(&rho0, &x, &schedule, &params, 5).unwrap();
    let path = dir.path().join("r.rec");
    save_record(online.record.as_ref().unwrap(), &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, &text[..text.len() * 2 / 3]).unwrap();
    assert!(matches!(load_record(&path), Err(Error::RecordCorrupt(_))));
}

#[test]
fn zero_gamma_is_pure_noise() {
    let x = rotated_observable(
        &haar_sample(3, &mut ChaCha8Rng::seed_from_u64(8)),
        &jz_operator(3).unwrap(),
    )
    .unwrap();
    let rho = random_density_matrix(3, &mut ChaCha8Rng::seed_from_u64(9));
    for scheme in [Scheme::EulerMaruyama, Scheme::Kraus] {
        let mut kernel = SmeKernel::new(3, scheme);
        let mut m = rho.matrix().clone();
        for step in 0..100 {
            let dw = 0.01 * (step as f64 - 50.0);
            let dr = kernel.step_with_noise(&mut m, &x, 0.0, 1e-3, dw, step).unwrap();
            assert_eq!(dr, dw);
        }
        assert!(m.max_abs_diff(rho.matrix()) < 1e-15);
    }
}

#[test]
fn two_level_random_permutation_gives_no_speedup() {
    // For D = 2 both measurement bounds equal 1.
    let x = jz_operator(2).unwrap();
    let rho0 = DensityMatrix::maximally_mixed(2).unwrap();
    let make = |schedule: ControlSchedule, seed| {
        let mut params = SimParams::for_schedule_with(2, 1.0, 4.0, &schedule, Scheme::EulerMaruyama);
        params.dt = 2e-4;
        let mut cfg = EnsembleConfig::new(params, schedule, x.clone(), rho0.clone(), 1500, seed);
        cfg.save_every = Some(50);
        cfg.infidelity_mode = InfidelityMode::Population;
        run_ensemble(&cfg).unwrap()
    };
    let nc = make(ControlSchedule::no_control(), 1);
    let rp = make(ControlSchedule::new(Strategy::RandomPermutation, 1e-3, 4), 2);
    let s = speedup(&nc, &rp, 1e-5, Metric::LogInfidelity).unwrap();
    assert!((s.speedup - 1.0).abs() < 4.0 * s.stderr + 0.02, "{s:?}");
}

#[test]
fn sweep_writes_csv_tables() {
    let cfg = SweepConfig {
        dim: 3,
        gamma: 1.0,
        total_time: 1.0,
        dt: Some(1e-3),
        scheme: Scheme::Kraus,
        observable: jz_operator(3).unwrap(),
        initial_state: DensityMatrix::maximally_mixed(3).unwrap(),
        n_trajectories: 40,
        base_seed: 2,
        schedules: vec![ControlSchedule::new(Strategy::HaarRandom, 0.01, 0)],
        delta_ts: vec![0.01, 0.1],
        targets: vec![0.3, 0.1, 1e-9],
        metric: Metric::Impurity,
        infidelity_mode: InfidelityMode::Eigenvalue,
        save_every: Some(10),
        bootstrap: None,
    };
    let result = sweep(&cfg).unwrap();
    assert_eq!(result.runs.len(), 2);
    assert_eq!(result.speedups.len(), 6);
    assert!(result.speedups.iter().any(|r| r.estimate.is_none()));

    let mut curves = Vec::new();
    write_curves(&mut curves, std::iter::once(&result.baseline).chain(&result.runs)).unwrap();
    let curves = String::from_utf8(curves).unwrap();
    assert_eq!(curves.lines().next(), Some(CURVES_HEADER));
    assert_eq!(curves.lines().count(), 1 + 3 * 101);

    let mut table = Vec::new();
    write_speedups(&mut table, &result.speedups).unwrap();
    let table = String::from_utf8(table).unwrap();
    assert_eq!(table.lines().next(), Some(SPEEDUPS_HEADER));
    assert!(table.contains("NaN"));
}

//! End-to-end experiment driver: assumption checks, replica simulation,
//! merge, diagnostics, and machine-readable artifacts.
//!
//! The pipeline runs in a fixed order: (1) schedule summability checks,
//! (2) energy/stability checks on the default probe grid, (3) an optional
//! pilot run that places diagnostic bump functions where the trajectory
//! actually travels, (4) replica simulations on disjoint generator
//! streams, (5) merge in replica order, (6) comparisons against the
//! configured oracle, (7) `summary.json`, `functionals.csv`,
//! `reservoir.csv` and `checks.json` under the output directory.
//!
//! Failure policy: divergence, invalid configs and oracle build failures
//! are hard errors. Failed *checks* and failed *clauses* are recorded in
//! the artifacts and leave the exit status untouched, unless the config
//! sets `checks.required`, in which case a failed check aborts.
//!
//! Determinism: two invocations with the same config produce byte-identical
//! artifacts. Nothing in the summary depends on wall-clock time or thread
//! interleaving; replica merges happen in index order.

use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::config::{ExperimentConfig, OracleConfig};
use crate::error::{Error, Result};
use crate::generators::{default_bumps, ew_residual, ResidualSeries, TestFunction};
use crate::lyapunov::{
    check_growth_bound, check_rp_exponential, check_rp_polynomial, default_probe_grid, empirical_recursive_control,
    tightness_from_measure_trace, validate_energy_on_grid, DriftTable, EnergyGridReport, ExpStabilityReport,
    GrowthReport, LyapunovSpec, ProbePoint, StabilityReport, TightnessSummary, DEFAULT_PROBE_SEED,
};
use crate::measures::{MeasureSnapshot, WeightedEmpiricalMeasure};
use crate::models::{apply_generator, Model};
use crate::oracles::{fokker_planck_1d, ou_stationary, switching_moments, StationaryReference};
use crate::rng::{replica_rng, reservoir_rng, stream_rng, CHECK_STREAM, PILOT_STREAM};
use crate::schedules::{Admissibility, RatioReport, StepSchedule, Sw1Report};
use crate::schemes::{run_trajectory, RunSpec, SchemeState, StepObserver};

/// Steps simulated by the bump-placement pilot run.
const PILOT_STEPS: u64 = 10_000;
/// Reservoir capacity of the pilot measure.
const PILOT_CAPACITY: usize = 4_096;
/// Quantile grid used for the W1 clause.
const W1_GRID: usize = 512;

/// Verdicts of the pre-run assumption checks.
#[derive(Debug, Clone, Serialize)]
pub struct ChecksReport {
    pub sw1: Sw1Report,
    pub ratio: RatioReport,
    pub energy: EnergyGridReport,
    pub growth: GrowthReport,
    pub stability: StabilityVerdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recursive_control: Option<DriftTable>,
    /// All individual verdicts hold (admissibility may be `Undecided`
    /// without failing; only `Inadmissible` counts against).
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "form", rename_all = "kebab-case")]
pub enum StabilityVerdict {
    Polynomial(StabilityReport),
    Exponential(ExpStabilityReport),
}

impl StabilityVerdict {
    pub fn holds(&self) -> bool {
        match self {
            StabilityVerdict::Polynomial(r) => r.holds,
            StabilityVerdict::Exponential(r) => r.holds,
        }
    }
}

/// One acceptance clause of the summary.
#[derive(Debug, Clone, Serialize)]
pub struct Clause {
    pub name: String,
    pub target: f64,
    pub observed: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSummary {
    pub n_steps: u64,
    pub replicas: u64,
    pub seed: u64,
    /// Total weight mass of the merged occupation measure.
    pub mass: f64,
    /// Final merged occupation averages, in registration order.
    pub functionals: Vec<(String, f64)>,
    pub clauses: Vec<Clause>,
    pub all_clauses_pass: bool,
    pub checks_pass: bool,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tightness: Option<TightnessSummary>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub ew_residuals: Vec<ResidualSeries>,
}

/// Everything the pipeline produced, for callers that want more than the
/// summary (tests, mostly).
pub struct ExperimentOutput {
    pub summary: ExperimentSummary,
    pub checks: ChecksReport,
    pub merged: WeightedEmpiricalMeasure,
    pub snapshots: Vec<MeasureSnapshot>,
    pub final_state: SchemeState,
}

fn probe_grid_for(config: &ExperimentConfig) -> Vec<ProbePoint> {
    default_probe_grid(config.dim(), config.regimes(), DEFAULT_PROBE_SEED)
}

/// Phase 1 + 2: schedule and stability checks.
pub fn run_checks(config: &ExperimentConfig) -> Result<ChecksReport> {
    let model = config.build_model()?;
    let schedule = config.build_schedule()?;
    let spec = config.build_spec()?;
    let grid = probe_grid_for(config);

    let sw1 = schedule.check_sw1(config.checks.sw1.rho, config.checks.sw1.eps_exponent, config.checks.sw1.horizon)?;
    let ratio = schedule.check_ratio_conditions(config.checks.sw1.horizon)?;
    let energy = validate_energy_on_grid(&spec, &grid)?;
    let growth = check_growth_bound(&model, &spec, &grid, config.lyapunov.growth_c.unwrap_or(f64::INFINITY))?;

    let stability = if config.lyapunov.lambda > 0.0 {
        let Model::Switching(sw) = &model else {
            return Err(Error::config("lyapunov.lambda", "exponential form needs a switching model"));
        };
        let gamma_bar = schedule.gamma_bar();
        let c_sigma_const = 1.0 / (2.0 * config.lyapunov.lambda * config.lyapunov.p.max(1e-6) * gamma_bar);
        StabilityVerdict::Exponential(check_rp_exponential(
            sw,
            &spec,
            config.lyapunov.alpha,
            config.lyapunov.beta,
            &move |_, _| c_sigma_const,
            &grid,
        )?)
    } else {
        StabilityVerdict::Polynomial(check_rp_polynomial(
            &model,
            &spec,
            config.lyapunov.alpha,
            config.lyapunov.beta,
            config.lyapunov.epsilon0,
            &grid,
        )?)
    };

    let recursive_control = match &config.checks.recursive_control {
        None => None,
        Some(rc) => {
            let mut rng = stream_rng(config.run.seed, CHECK_STREAM);
            Some(empirical_recursive_control(
                &model,
                config.scheme.kind(),
                &spec,
                config.lyapunov.alpha,
                config.lyapunov.beta,
                &rc.gammas,
                &grid,
                config.innovations(),
                rc.mc_samples,
                &mut rng,
            )?)
        }
    };

    let pass = sw1.verdict != Admissibility::Inadmissible
        && ratio.sw2_verdict != Admissibility::Inadmissible
        && ratio.variation_verdict != Admissibility::Inadmissible
        && energy.radial_growth_ok
        && growth.holds
        && stability.holds()
        && recursive_control.as_ref().map_or(true, |t| t.all_satisfied);

    Ok(ChecksReport {
        sw1,
        ratio,
        energy,
        growth,
        stability,
        recursive_control,
        pass,
    })
}

/// Phase 3: short pilot run whose reservoir decides where the diagnostic
/// bumps live.
fn pilot_bumps(config: &ExperimentConfig, model: &Model, schedule: &StepSchedule) -> Result<Vec<TestFunction>> {
    let mut measure = WeightedEmpiricalMeasure::new(PILOT_CAPACITY, reservoir_rng(config.run.seed, PILOT_STREAM));
    let spec = RunSpec {
        scheme: config.scheme.kind(),
        innovations: config.innovations(),
        x0: config.x0(),
        z0: config.z0(),
        n_steps: PILOT_STEPS.min(config.run.n_steps),
    };
    let mut rng = stream_rng(config.run.seed, PILOT_STREAM);
    run_trajectory(model, schedule, &spec, std::slice::from_mut(&mut measure), None, &mut rng)?;
    default_bumps(&measure.reservoir_items())
}

/// Builds the full functional registry for one replica measure. The order
/// is fixed (config functionals, then auto-added moments, regime
/// occupations, the tail-weight column, then generator images), so replica
/// registries always match for the merge.
fn build_registry(
    config: &ExperimentConfig,
    model: &Model,
    spec: &LyapunovSpec,
    bumps: &[TestFunction],
) -> Result<Vec<(String, crate::measures::Functional)>> {
    let mut registry = config.build_functionals()?;
    for name in ["m1", "m2"] {
        if !registry.iter().any(|(n, _)| n == name) {
            registry.push((name.into(), crate::config::parse_functional(name, config.dim(), config.regimes())?));
        }
    }
    if let Some(m) = config.regimes() {
        for z in 0..m {
            let name = format!("occ:{z}");
            if !registry.iter().any(|(n, _)| *n == name) {
                registry.push((name.clone(), crate::config::parse_functional(&name, config.dim(), config.regimes())?));
            }
        }
    }
    registry.push(("tilde_v".into(), crate::lyapunov::tilde_v_functional(spec)));
    for (name, func) in crate::generators::ew_functionals(model, bumps) {
        registry.push((name, func));
    }
    Ok(registry)
}

/// Phase 4 + 5: replica runs on disjoint streams, merged in index order.
/// Snapshots (geometric indices plus the final step) come from replica 0.
fn simulate(
    config: &ExperimentConfig,
    model: &Model,
    schedule: &StepSchedule,
    registry: &[(String, crate::measures::Functional)],
) -> Result<(WeightedEmpiricalMeasure, Vec<MeasureSnapshot>, SchemeState)> {
    let run_spec = RunSpec {
        scheme: config.scheme.kind(),
        innovations: config.innovations(),
        x0: config.x0(),
        z0: config.z0(),
        n_steps: config.run.n_steps,
    };
    let n_final = config.run.n_steps;
    let seed = config.run.seed;
    let capacity = config.run.reservoir_capacity;

    let new_measure = |replica: u64| -> Result<WeightedEmpiricalMeasure> {
        let mut m = WeightedEmpiricalMeasure::new(capacity, reservoir_rng(seed, replica));
        for (name, func) in registry {
            m.register(name, func.clone())?;
        }
        Ok(m)
    };

    type ReplicaResult = Result<(WeightedEmpiricalMeasure, Vec<MeasureSnapshot>, SchemeState)>;
    let run_replica = |replica: u64| -> ReplicaResult {
        let mut measure = new_measure(replica)?;
        let mut snaps = Vec::new();
        let mut rng = replica_rng(seed, replica);
        let state = if replica == 0 {
            let mut observer = |pt: &crate::schedules::SchedulePoint,
                                _state: &SchemeState,
                                sinks: &[WeightedEmpiricalMeasure]| {
                if pt.n.is_power_of_two() || pt.n == n_final {
                    snaps.push(sinks[0].snapshot());
                }
            };
            run_trajectory(
                model,
                schedule,
                &run_spec,
                std::slice::from_mut(&mut measure),
                Some(&mut observer as &mut StepObserver<'_>),
                &mut rng,
            )?
        } else {
            run_trajectory(model, schedule, &run_spec, std::slice::from_mut(&mut measure), None, &mut rng)?
        };
        Ok((measure, snaps, state))
    };

    let replicas = config.run.replicas;
    let mut results: Vec<ReplicaResult> = Vec::with_capacity(replicas as usize);
    if replicas == 1 {
        results.push(run_replica(0));
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..replicas).map(|r| scope.spawn(move || run_replica(r))).collect();
            for h in handles {
                results.push(h.join().expect("replica thread panicked"));
            }
        });
    }

    let mut iter = results.into_iter();
    let (mut merged, snaps, state) = iter.next().expect("at least one replica")?;
    for res in iter {
        let (m, _, _) = res?;
        merged.merge_from(&m)?;
    }
    Ok((merged, snaps, state))
}

/// Builds the stationary reference named by the config, if any.
pub fn build_oracle_for(config: &ExperimentConfig) -> Result<Option<StationaryReference>> {
    build_oracle(config)
}

/// Replays replica 0's trajectory and renders every `every`-th pre-step
/// state (plus the first and last) as CSV with columns
/// `n,Gamma_n,X_1..X_d,zeta`. The stream matches the pipeline's replica 0,
/// so traced rows agree with what the measures were fed.
pub fn trace_csv(config: &ExperimentConfig, every: u64) -> Result<String> {
    if every == 0 {
        return Err(Error::invalid("every", "trace stride must be >= 1"));
    }
    let model = config.build_model()?;
    let schedule = config.build_schedule()?;
    let run_spec = RunSpec {
        scheme: config.scheme.kind(),
        innovations: config.innovations(),
        x0: config.x0(),
        z0: config.z0(),
        n_steps: config.run.n_steps,
    };
    let mut csv = String::from("n,Gamma_n");
    for i in 1..=config.dim() {
        csv.push_str(&format!(",X_{i}"));
    }
    csv.push_str(",zeta\n");
    let n_final = config.run.n_steps;
    let mut observer = |pt: &crate::schedules::SchedulePoint, state: &SchemeState, _: &[WeightedEmpiricalMeasure]| {
        if pt.n % every == 0 || pt.n == 1 || pt.n == n_final {
            csv.push_str(&format!("{},{}", pt.n, pt.clock));
            for c in &state.x {
                csv.push_str(&format!(",{c}"));
            }
            match state.regime {
                Some(z) => csv.push_str(&format!(",{z}\n")),
                None => csv.push_str(",\n"),
            }
        }
    };
    let mut rng = replica_rng(config.run.seed, 0);
    run_trajectory(
        &model,
        &schedule,
        &run_spec,
        &mut [],
        Some(&mut observer as &mut StepObserver<'_>),
        &mut rng,
    )?;
    Ok(csv)
}

fn build_oracle(config: &ExperimentConfig) -> Result<Option<StationaryReference>> {
    match (&config.oracle, &config.model) {
        (OracleConfig::None, _) => Ok(None),
        (OracleConfig::Ou, crate::config::ModelConfig::Ou { a, sigma, dim }) => {
            Ok(Some(ou_stationary(*a, *sigma, *dim)?))
        }
        (OracleConfig::FokkerPlanck { x_lo, x_hi, m }, crate::config::ModelConfig::QuadraticVol { a, sigma0, c }) => {
            let (a, s0, c) = (*a, *sigma0, *c);
            Ok(Some(fokker_planck_1d(
                &move |x| -a * x,
                &move |x| s0 * s0 + c * x * x,
                *x_lo,
                *x_hi,
                *m,
            )?))
        }
        (OracleConfig::FokkerPlanck { x_lo, x_hi, m }, crate::config::ModelConfig::Ou { a, sigma, .. }) => {
            let (a, s) = (*a, *sigma);
            Ok(Some(fokker_planck_1d(&move |x| -a * x, &move |_| s * s, *x_lo, *x_hi, *m)?))
        }
        (OracleConfig::Switching, crate::config::ModelConfig::SwitchingOu { a, sigma, q, .. }) => {
            let rates = crate::models::GeneratorMatrix::new(q.clone())?;
            Ok(Some(StationaryReference::Moments(switching_moments(a, sigma, &rates)?)))
        }
        _ => Err(Error::config("oracle", "oracle kind does not match the model")),
    }
}

/// Sup of `|A f|` over the probe grid and an axis-aligned scan through the
/// bump's support; the denominator of the residual clause.
fn generator_sup(model: &Model, f: &TestFunction, grid: &[ProbePoint]) -> Result<f64> {
    let mut sup = 0.0f64;
    for pt in grid {
        sup = sup.max(apply_generator(model, f, &pt.x, pt.z)?.abs());
    }
    if let TestFunction::Bump { center, radius, .. } = f {
        let d = center.len();
        let regimes: Vec<Option<usize>> = match model.regimes() {
            None => vec![None],
            Some(m) => (0..m).map(Some).collect(),
        };
        for axis in 0..d {
            for k in 0..=100 {
                let mut x = center.clone();
                x[axis] += radius * (k as f64 / 50.0 - 1.0);
                for &z in &regimes {
                    sup = sup.max(apply_generator(model, f, &x, z)?.abs());
                }
            }
        }
    }
    Ok(sup)
}

fn push_clause(clauses: &mut Vec<Clause>, name: &str, target: f64, observed: f64, tolerance: f64, pass: bool) {
    clauses.push(Clause {
        name: name.into(),
        target,
        observed,
        tolerance,
        pass,
    });
}

/// Phase 6: oracle comparisons and diagnostics, expressed as clauses.
#[allow(clippy::too_many_arguments)]
fn evaluate_clauses(
    config: &ExperimentConfig,
    model: &Model,
    merged: &WeightedEmpiricalMeasure,
    snapshots: &[MeasureSnapshot],
    oracle: Option<&StationaryReference>,
    bumps: &[TestFunction],
    grid: &[ProbePoint],
) -> Result<(Vec<Clause>, Option<TightnessSummary>, Vec<ResidualSeries>)> {
    let tol = &config.tolerances;
    let final_snap = merged.snapshot();
    let value = |name: &str| -> Result<f64> {
        final_snap
            .value(name)
            .ok_or_else(|| Error::invalid("functionals", format!("`{name}` missing from the registry")))
    };
    let mut clauses = Vec::new();

    if let Some(oracle) = oracle {
        let m1_target = oracle.moment(0, 1)?;
        let m1 = value("m1")?;
        push_clause(&mut clauses, "m1", m1_target, m1, tol.m1, (m1 - m1_target).abs() <= tol.m1);

        let m2_target = oracle.moment(0, 2)?;
        let m2 = value("m2")?;
        let m2_pass = if m2_target != 0.0 {
            (m2 - m2_target).abs() <= tol.m2_rel * m2_target.abs()
        } else {
            (m2 - m2_target).abs() <= tol.m2_rel
        };
        push_clause(&mut clauses, "m2", m2_target, m2, tol.m2_rel, m2_pass);

        if oracle.quantile(0, 0.5).is_ok() {
            let w1 = merged.wasserstein1_vs_quantile(0, &|u| oracle.quantile(0, u).unwrap_or(f64::NAN), W1_GRID)?;
            push_clause(&mut clauses, "w1", 0.0, w1, tol.w1, w1 <= tol.w1);
        }

        if let Some(table) = oracle.moment_table() {
            let mut worst = 0.0f64;
            for (z, pi_z) in table.pi.iter().enumerate() {
                let occ = value(&format!("occ:{z}"))?;
                worst = worst.max((occ - pi_z).abs());
            }
            push_clause(&mut clauses, "occupation", 0.0, worst, tol.occupation, worst <= tol.occupation);
        }
    }

    let tightness = if snapshots.is_empty() {
        None
    } else {
        let t = tightness_from_measure_trace(snapshots, "tilde_v", tol.tightness)?;
        let excess = if t.last_decade_max.is_finite() && t.sup_value > 0.0 {
            (t.last_decade_max / t.sup_value - 1.0).max(0.0)
        } else {
            f64::INFINITY
        };
        push_clause(
            &mut clauses,
            "tightness",
            0.0,
            excess,
            tol.tightness,
            t.non_exploding && t.sup_value.is_finite(),
        );
        Some(t)
    };

    let mut residuals = Vec::new();
    if !bumps.is_empty() && !snapshots.is_empty() {
        let ids: Vec<String> = (0..bumps.len()).map(|i| format!("ew_{i}")).collect();
        residuals = ew_residual(snapshots, &ids)?;
        let mut worst_ratio = 0.0f64;
        for (series, bump) in residuals.iter_mut().zip(bumps) {
            let sup = generator_sup(model, bump, grid)?;
            // the merged terminal value supersedes the replica-0 trace
            let terminal = final_snap
                .value(&series.f_id)
                .ok_or_else(|| Error::invalid("functionals", format!("`{}` missing", series.f_id)))?;
            series.terminal_abs = terminal.abs();
            let ratio = if sup > 0.0 { terminal.abs() / sup } else { 0.0 };
            worst_ratio = worst_ratio.max(ratio);
        }
        push_clause(
            &mut clauses,
            "ew_residual",
            0.0,
            worst_ratio,
            tol.residual_rel,
            worst_ratio <= tol.residual_rel,
        );
    }

    Ok((clauses, tightness, residuals))
}

fn write_artifacts(
    out_dir: &Path,
    summary: &ExperimentSummary,
    checks: &ChecksReport,
    merged: &WeightedEmpiricalMeasure,
    snapshots: &[MeasureSnapshot],
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut summary_file = std::fs::File::create(out_dir.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut summary_file, summary)?;
    summary_file.write_all(b"\n")?;
    let mut checks_file = std::fs::File::create(out_dir.join("checks.json"))?;
    serde_json::to_writer_pretty(&mut checks_file, checks)?;
    checks_file.write_all(b"\n")?;

    let mut csv = String::new();
    let names: Vec<String> = snapshots.first().map(|s| s.names.clone()).unwrap_or_default();
    csv.push_str("n,H_n");
    for n in &names {
        csv.push(',');
        csv.push_str(n);
    }
    csv.push('\n');
    for snap in snapshots {
        csv.push_str(&format!("{},{}", snap.n, snap.mass));
        for v in &snap.values {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    std::fs::write(out_dir.join("functionals.csv"), csv)?;

    let mut csv = String::new();
    let dim = merged.reservoir_items().first().map(|it| it.x.len()).unwrap_or(0);
    for i in 0..dim {
        if i > 0 {
            csv.push(',');
        }
        csv.push_str(&format!("x{i}"));
    }
    csv.push_str(",regime,weight\n");
    for item in merged.reservoir_items() {
        for (i, c) in item.x.iter().enumerate() {
            if i > 0 {
                csv.push(',');
            }
            csv.push_str(&format!("{c}"));
        }
        match item.regime {
            Some(z) => csv.push_str(&format!(",{z}")),
            None => csv.push(','),
        }
        csv.push_str(&format!(",{}\n", item.weight));
    }
    std::fs::write(out_dir.join("reservoir.csv"), csv)?;
    Ok(())
}

/// Runs the whole pipeline. Artifacts go under `out_dir` when given.
pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentOutput> {
    config.validate()?;
    let model = config.build_model()?;
    let schedule = config.build_schedule()?;
    let spec = config.build_spec()?;
    let grid = probe_grid_for(config);

    let checks = run_checks(config)?;
    let mut warnings = Vec::new();
    if !checks.pass {
        let msg = "assumption checks did not all pass; see checks.json".to_string();
        if config.checks.required {
            return Err(Error::invalid("checks", msg));
        }
        warnings.push(msg);
    }

    let bumps = if config.ew_diagnostics {
        pilot_bumps(config, &model, &schedule)?
    } else {
        Vec::new()
    };
    let registry = build_registry(config, &model, &spec, &bumps)?;
    let (merged, snapshots, final_state) = simulate(config, &model, &schedule, &registry)?;
    let oracle = build_oracle(config)?;

    let (clauses, tightness, ew_residuals) =
        evaluate_clauses(config, &model, &merged, &snapshots, oracle.as_ref(), &bumps, &grid)?;
    let all_clauses_pass = clauses.iter().all(|c| c.pass);

    let final_snap = merged.snapshot();
    let functionals: Vec<(String, f64)> = final_snap
        .names
        .iter()
        .cloned()
        .zip(final_snap.values.iter().copied())
        .collect();

    let summary = ExperimentSummary {
        n_steps: config.run.n_steps,
        replicas: config.run.replicas,
        seed: config.run.seed,
        mass: final_snap.mass,
        functionals,
        clauses,
        all_clauses_pass,
        checks_pass: checks.pass,
        warnings,
        tightness,
        ew_residuals,
    };

    if let Some(dir) = out_dir {
        write_artifacts(dir, &summary, &checks, &merged, &snapshots)?;
    }

    Ok(ExperimentOutput {
        summary,
        checks,
        merged,
        snapshots,
        final_state,
    })
}

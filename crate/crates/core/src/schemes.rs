//! Discretisation schemes and the trajectory driver.
//!
//! All schemes advance one step of size `gamma` using an innovation vector
//! `u` with identity covariance:
//!
//! * Euler: `x' = x + gamma b(x) + sqrt(gamma) sigma(x) u`;
//! * Milstein (scalar): adds the second-order volatility correction
//!   `gamma (sigma sigma')(x) (u^2 - 1)`, which degenerates to Euler when
//!   the volatility is flat;
//! * switching Euler: coefficients frozen at the current regime while the
//!   regime itself moves by an exactly simulated jump chain over the step's
//!   time span.
//!
//! [`run_trajectory`] iterates a scheme along a step schedule and feeds each
//! *pre-step* state with the step's weight into every registered measure:
//! after `n` steps the sinks hold the occupation average over states
//! `x_0 .. x_{n-1}`. An optional observer runs after every feed and is the
//! hook for snapshots and trace output.
//!
//! Determinism contract: a trajectory is a pure function of (model,
//! schedule, run spec, generator state). Replica parallelism must come from
//! distinct generator streams, never from sharing one generator.

use rand::Rng;

use crate::error::{Error, Result};
use crate::measures::WeightedEmpiricalMeasure;
use crate::models::{DiffusionModel, GeneratorMatrix, Innovations, Model, SwitchingModel};
use crate::numeric::l2_norm;
use crate::schedules::{SchedulePoint, StepSchedule};

/// States with a Euclidean norm beyond this bound (or any non-finite
/// coordinate) abort the run as divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchemeKind {
    Euler,
    Milstein,
    SwitchingEuler,
}

/// Position of a trajectory: the state after `n` steps, at simulated time
/// `clock`. `noise_draws` counts innovation vectors consumed so far, which
/// pins down the generator position for audits.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeState {
    pub n: u64,
    pub clock: f64,
    pub x: Vec<f64>,
    pub regime: Option<usize>,
    pub noise_draws: u64,
}

impl SchemeState {
    pub fn initial(x0: Vec<f64>, regime: Option<usize>) -> Self {
        Self {
            n: 0,
            clock: 0.0,
            x: x0,
            regime,
            noise_draws: 0,
        }
    }
}

fn guard(x: &[f64], gamma: f64, step: u64, previous: &[f64]) -> Result<()> {
    let norm = l2_norm(x);
    if !norm.is_finite() || norm > DIVERGENCE_THRESHOLD {
        return Err(Error::Diverged {
            step,
            gamma,
            norm,
            last_state: previous.to_vec(),
        });
    }
    Ok(())
}

fn euler_into(model: &DiffusionModel, x: &[f64], gamma: f64, u: &[f64], buf: &mut StepBuffers, out: &mut [f64]) {
    let d = model.dim();
    let nd = model.noise_dim();
    model.drift_into(x, &mut buf.b);
    model.diffusion_into(x, &mut buf.sig);
    let sq = gamma.sqrt();
    for i in 0..d {
        let mut noise = 0.0;
        for k in 0..nd {
            noise += buf.sig[i * nd + k] * u[k];
        }
        out[i] = x[i] + gamma * buf.b[i] + sq * noise;
    }
}

struct StepBuffers {
    b: Vec<f64>,
    sig: Vec<f64>,
}

impl StepBuffers {
    fn for_model(dim: usize, noise_dim: usize) -> Self {
        Self {
            b: vec![0.0; dim],
            sig: vec![0.0; dim * noise_dim],
        }
    }
}

/// One Euler step. `u` must have the model's noise dimension.
pub fn euler_step(model: &DiffusionModel, x: &[f64], gamma: f64, u: &[f64]) -> Result<Vec<f64>> {
    check_step_inputs(model.dim(), model.noise_dim(), x, gamma, u)?;
    let mut buf = StepBuffers::for_model(model.dim(), model.noise_dim());
    let mut out = vec![0.0; model.dim()];
    euler_into(model, x, gamma, u, &mut buf, &mut out);
    guard(&out, gamma, 0, x)?;
    Ok(out)
}

/// One Milstein step for scalar models carrying a `sigma * sigma'` map.
pub fn milstein_step(model: &DiffusionModel, x: &[f64], gamma: f64, u: &[f64]) -> Result<Vec<f64>> {
    check_step_inputs(model.dim(), model.noise_dim(), x, gamma, u)?;
    if model.dim() != 1 {
        return Err(Error::invalid("model", "second-order scheme is scalar-only"));
    }
    let correction = model
        .vol_times_dvol(x[0])
        .ok_or_else(|| Error::invalid("model", "model does not provide sigma * sigma' (required by the second-order scheme)"))?;
    let mut buf = StepBuffers::for_model(1, 1);
    let mut out = vec![0.0; 1];
    euler_into(model, x, gamma, u, &mut buf, &mut out);
    out[0] += gamma * correction * (u[0] * u[0] - 1.0);
    guard(&out, gamma, 0, x)?;
    Ok(out)
}

fn check_step_inputs(dim: usize, noise_dim: usize, x: &[f64], gamma: f64, u: &[f64]) -> Result<()> {
    if x.len() != dim {
        return Err(Error::invalid("x", format!("state has dimension {}, model has {dim}", x.len())));
    }
    if u.len() != noise_dim {
        return Err(Error::invalid("u", format!("innovation has dimension {}, model needs {noise_dim}", u.len())));
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::invalid("gamma", format!("step must be finite and > 0, got {gamma}")));
    }
    Ok(())
}

/// Exact jump-chain path of a finite-state chain over `(t0, t1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimePath {
    /// `(jump time, regime entered)`, strictly increasing times.
    pub jumps: Vec<(f64, usize)>,
    /// Regime at `t1`.
    pub end: usize,
}

/// Simulates the chain exactly: exponential holding time with the current
/// exit rate, then a jump drawn from the conditional jump law. States with
/// zero exit rate are absorbing.
pub fn simulate_ctmc_segment<R: Rng + ?Sized>(
    rates: &GeneratorMatrix,
    z0: usize,
    t0: f64,
    t1: f64,
    rng: &mut R,
) -> RegimePath {
    debug_assert!(z0 < rates.regimes());
    debug_assert!(t1 >= t0);
    let mut z = z0;
    let mut t = t0;
    let mut jumps = Vec::new();
    loop {
        let rate = rates.exit_rate(z);
        if rate <= 0.0 {
            break;
        }
        let u: f64 = rng.gen();
        t += -(1.0 - u).ln() / rate;
        if t > t1 {
            break;
        }
        // conditional jump law: q(z, w) / rate over w != z
        let mut v: f64 = rng.gen::<f64>() * rate;
        let mut next = z;
        for w in 0..rates.regimes() {
            if w == z {
                continue;
            }
            let q = rates.entry(z, w);
            if v < q {
                next = w;
                break;
            }
            v -= q;
        }
        if next == z {
            // numerical leftovers put the draw past the last positive rate
            next = (0..rates.regimes()).rev().find(|w| *w != z && rates.entry(z, *w) > 0.0).unwrap_or(z);
        }
        z = next;
        jumps.push((t, z));
    }
    RegimePath { jumps, end: z }
}

/// One frozen-coefficient step of a switching model: the continuous part
/// moves by Euler with coefficients taken at the *current* regime, the
/// regime moves by the exact chain over the step's time span.
pub fn switching_euler_step<R: Rng + ?Sized>(
    model: &SwitchingModel,
    x: &[f64],
    z: usize,
    clock: f64,
    gamma: f64,
    u: &[f64],
    rng: &mut R,
) -> Result<(Vec<f64>, usize)> {
    check_step_inputs(model.dim(), model.noise_dim(), x, gamma, u)?;
    if z >= model.regimes() {
        return Err(Error::invalid("z", format!("regime {z} out of range ({} regimes)", model.regimes())));
    }
    let d = model.dim();
    let nd = model.noise_dim();
    let mut b = vec![0.0; d];
    let mut sig = vec![0.0; d * nd];
    model.drift_into(x, z, &mut b);
    model.diffusion_into(x, z, &mut sig);
    let sq = gamma.sqrt();
    let mut out = vec![0.0; d];
    for i in 0..d {
        let mut noise = 0.0;
        for k in 0..nd {
            noise += sig[i * nd + k] * u[k];
        }
        out[i] = x[i] + gamma * b[i] + sq * noise;
    }
    guard(&out, gamma, 0, x)?;
    let path = simulate_ctmc_segment(model.rates(), z, clock, clock + gamma, rng);
    Ok((out, path.end))
}

/// One transition of the named scheme from `(x, z)` at clock time `clock`.
/// Dispatch point shared by the trajectory driver and the one-step Monte
/// Carlo probes.
pub fn one_step<R: Rng + ?Sized>(
    model: &Model,
    scheme: SchemeKind,
    x: &[f64],
    z: Option<usize>,
    clock: f64,
    gamma: f64,
    u: &[f64],
    rng: &mut R,
) -> Result<(Vec<f64>, Option<usize>)> {
    match (model, scheme) {
        (Model::Diffusion(m), SchemeKind::Euler) => Ok((euler_step(m, x, gamma, u)?, None)),
        (Model::Diffusion(m), SchemeKind::Milstein) => Ok((milstein_step(m, x, gamma, u)?, None)),
        (Model::Switching(m), SchemeKind::SwitchingEuler) => {
            let z = z.ok_or_else(|| Error::invalid("z", "switching scheme needs a regime"))?;
            let (next, z_next) = switching_euler_step(m, x, z, clock, gamma, u, rng)?;
            Ok((next, Some(z_next)))
        }
        _ => Err(Error::invalid("scheme", "scheme is incompatible with the model family")),
    }
}

/// Full run description for [`run_trajectory`].
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub scheme: SchemeKind,
    pub innovations: Innovations,
    pub x0: Vec<f64>,
    pub z0: Option<usize>,
    pub n_steps: u64,
}

/// Hook called after each measure feed with the schedule point, the
/// *pre-step* state just consumed, and read access to the sinks (whose
/// averages are now the `n`-th occupation values).
pub type StepObserver<'a> = dyn FnMut(&SchedulePoint, &SchemeState, &[WeightedEmpiricalMeasure]) + 'a;

/// Runs a scheme along a schedule, feeding every pre-step state into all
/// sinks with the step's weight. Returns the final post-step state.
///
/// Errors: scheme/model mismatch, innovation dimension mismatch, regime
/// validation, schedule table exhaustion, divergence (with the last valid
/// state attached).
pub fn run_trajectory<R: Rng + ?Sized>(
    model: &Model,
    schedule: &StepSchedule,
    spec: &RunSpec,
    sinks: &mut [WeightedEmpiricalMeasure],
    mut observer: Option<&mut StepObserver<'_>>,
    rng: &mut R,
) -> Result<SchemeState> {
    let d = model.dim();
    let nd = model.noise_dim();
    if spec.x0.len() != d {
        return Err(Error::invalid("x0", format!("has dimension {}, model has {d}", spec.x0.len())));
    }
    if spec.innovations.dim() != nd {
        return Err(Error::invalid(
            "innovations",
            format!("dimension {} does not match the model's noise dimension {nd}", spec.innovations.dim()),
        ));
    }
    if let Some(len) = schedule.len() {
        if spec.n_steps > len {
            return Err(Error::TableExhausted {
                n: spec.n_steps,
                len: len as usize,
            });
        }
    }

    enum Driver<'m> {
        Euler(&'m DiffusionModel),
        Milstein(&'m DiffusionModel),
        Switching(&'m SwitchingModel),
    }

    let driver = match (spec.scheme, model) {
        (SchemeKind::Euler, Model::Diffusion(m)) => Driver::Euler(m),
        (SchemeKind::Milstein, Model::Diffusion(m)) => {
            if m.dim() != 1 || m.vol_times_dvol(0.0).is_none() {
                return Err(Error::invalid(
                    "scheme",
                    "second-order scheme needs a scalar model with a sigma * sigma' map",
                ));
            }
            Driver::Milstein(m)
        }
        (SchemeKind::SwitchingEuler, Model::Switching(m)) => Driver::Switching(m),
        (kind, _) => {
            return Err(Error::invalid("scheme", format!("{kind:?} is incompatible with the model family")));
        }
    };

    let mut state = match (&driver, spec.z0) {
        (Driver::Switching(m), Some(z0)) => {
            if z0 >= m.regimes() {
                return Err(Error::invalid("z0", format!("regime {z0} out of range ({} regimes)", m.regimes())));
            }
            SchemeState::initial(spec.x0.clone(), Some(z0))
        }
        (Driver::Switching(_), None) => {
            return Err(Error::invalid("z0", "switching runs need an initial regime"));
        }
        (_, Some(_)) => {
            return Err(Error::invalid("z0", "regime given for a model without regimes"));
        }
        (_, None) => SchemeState::initial(spec.x0.clone(), None),
    };

    let mut buf = StepBuffers::for_model(d, nd);
    let mut u = vec![0.0; nd];
    let mut next = vec![0.0; d];
    let mut steps_done = 0u64;

    for pt in schedule.iter().take(spec.n_steps as usize) {
        for sink in sinks.iter_mut() {
            sink.update(&state.x, state.regime, pt.eta)?;
        }
        if let Some(ref mut obs) = observer {
            obs(&pt, &state, sinks);
        }

        spec.innovations.sample_into(rng, &mut u);
        state.noise_draws += 1;

        let regime_next = match &driver {
            Driver::Euler(m) => {
                euler_into(m, &state.x, pt.gamma, &u, &mut buf, &mut next);
                None
            }
            Driver::Milstein(m) => {
                euler_into(m, &state.x, pt.gamma, &u, &mut buf, &mut next);
                let corr = m.vol_times_dvol(state.x[0]).expect("validated above");
                next[0] += pt.gamma * corr * (u[0] * u[0] - 1.0);
                None
            }
            Driver::Switching(m) => {
                let z = state.regime.expect("validated above");
                m.drift_into(&state.x, z, &mut buf.b);
                m.diffusion_into(&state.x, z, &mut buf.sig);
                let sq = pt.gamma.sqrt();
                for i in 0..d {
                    let mut noise = 0.0;
                    for k in 0..nd {
                        noise += buf.sig[i * nd + k] * u[k];
                    }
                    next[i] = state.x[i] + pt.gamma * buf.b[i] + sq * noise;
                }
                let path = simulate_ctmc_segment(m.rates(), z, state.clock, state.clock + pt.gamma, rng);
                Some(path.end)
            }
        };

        guard(&next, pt.gamma, pt.n, &state.x)?;
        state.x.copy_from_slice(&next);
        if regime_next.is_some() {
            state.regime = regime_next;
        }
        state.n = pt.n;
        state.clock = pt.clock;
        steps_done += 1;
    }

    if steps_done < spec.n_steps {
        return Err(Error::TableExhausted {
            n: spec.n_steps,
            len: steps_done as usize,
        });
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::WeightedEmpiricalMeasure;
    use crate::models::{ou, quadratic_vol_1d, switching_ou, GeneratorMatrix};
    use crate::rng::{replica_rng, stream_rng};
    use crate::schedules::{make_power_schedule, make_table_schedule, WeightSpec};
    use std::sync::Arc;

    fn two_state_rates() -> GeneratorMatrix {
        GeneratorMatrix::new(vec![vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap()
    }

    #[test]
    fn euler_step_arithmetic() {
        let m = ou(1.0, 2f64.sqrt(), 1).unwrap();
        let x = [1.5];
        let gamma = 0.1;
        let u = [0.7];
        let got = euler_step(&m, &x, gamma, &u).unwrap();
        let expect = 1.5 + 0.1 * -1.5 + 0.1f64.sqrt() * 2f64.sqrt() * 0.7;
        assert_eq!(got[0], expect);
    }

    #[test]
    fn euler_one_step_second_moment() {
        // For dX = -X dt + sqrt(2) dW: E[(x')^2 | x] = (1 - gamma)^2 x^2 + 2 gamma.
        let m = ou(1.0, 2f64.sqrt(), 1).unwrap();
        let x = [1.5];
        let gamma = 0.1;
        let law = Innovations::gaussian(1);
        let mut rng = stream_rng(5, 0);
        let mut u = [0.0];
        let mut acc = 0.0;
        let n = 400_000;
        for _ in 0..n {
            law.sample_into(&mut rng, &mut u);
            let y = euler_step(&m, &x, gamma, &u).unwrap()[0];
            acc += y * y;
        }
        let got = acc / n as f64;
        let expect = (1.0 - gamma) * (1.0 - gamma) * x[0] * x[0] + 2.0 * gamma;
        assert!((got - expect).abs() < 0.012, "got {got}, expect {expect}");
    }

    #[test]
    fn milstein_equals_euler_when_volatility_flat() {
        let m = quadratic_vol_1d(1.0, 1.0, 0.0).unwrap();
        let mut rng_a = replica_rng(99, 0);
        let mut rng_b = replica_rng(99, 0);
        let law = Innovations::gaussian(1);
        let mut xa = vec![0.4];
        let mut xb = vec![0.4];
        let mut u = [0.0];
        let schedule = make_power_schedule(0.5, 0.5, WeightSpec::Step).unwrap();
        for pt in schedule.iter().take(10_000) {
            law.sample_into(&mut rng_a, &mut u);
            xa = euler_step(&m, &xa, pt.gamma, &u).unwrap();
            law.sample_into(&mut rng_b, &mut u);
            xb = milstein_step(&m, &xb, pt.gamma, &u).unwrap();
            assert_eq!(xa[0].to_bits(), xb[0].to_bits(), "diverged at n = {}", pt.n);
        }
    }

    #[test]
    fn milstein_correction_active_when_volatility_varies() {
        let m = quadratic_vol_1d(1.0, 1.0, 0.5).unwrap();
        let x = [2.0];
        let u = [1.3];
        let gamma = 0.2;
        let e = euler_step(&m, &x, gamma, &u).unwrap();
        let ms = milstein_step(&m, &x, gamma, &u).unwrap();
        let expect = e[0] + gamma * (0.5 * 2.0) * (1.3 * 1.3 - 1.0);
        assert!((ms[0] - expect).abs() < 1e-15);
        assert_ne!(e[0], ms[0]);
    }

    #[test]
    fn milstein_requires_scalar_correction_map() {
        let m = ou(1.0, 1.0, 2).unwrap();
        assert!(milstein_step(&m, &[0.0, 0.0], 0.1, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn divergence_guard_triggers() {
        // dX = +X dt: explicit Euler explodes; the error carries the last
        // valid state.
        let m = ou(-1.0, 1.0, 1).unwrap();
        let schedule = make_power_schedule(1.0, 1.0 / 3.0, WeightSpec::Step).unwrap();
        let spec = RunSpec {
            scheme: SchemeKind::Euler,
            innovations: Innovations::gaussian(1),
            x0: vec![1.0],
            z0: None,
            n_steps: 10_000,
        };
        let mut rng = replica_rng(3, 0);
        let err = run_trajectory(&Model::Diffusion(m), &schedule, &spec, &mut [], None, &mut rng).unwrap_err();
        match err {
            Error::Diverged { step, norm, last_state, .. } => {
                assert!(step > 0);
                assert!(norm > DIVERGENCE_THRESHOLD || !norm.is_finite());
                assert!(last_state[0].is_finite());
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn ctmc_two_state_occupation_and_jump_rate() {
        let rates = two_state_rates();
        let mut rng = stream_rng(17, 0);
        let horizon = 10_000.0;
        let path = simulate_ctmc_segment(&rates, 0, 0.0, horizon, &mut rng);
        // occupation fraction of state 0 tends to 1/2
        let mut t_prev = 0.0;
        let mut z = 0usize;
        let mut occ0 = 0.0;
        for (t, znext) in &path.jumps {
            if z == 0 {
                occ0 += t - t_prev;
            }
            t_prev = *t;
            z = *znext;
        }
        if z == 0 {
            occ0 += horizon - t_prev;
        }
        let frac = occ0 / horizon;
        assert!((frac - 0.5).abs() < 0.02, "frac = {frac}");
        // jump count over [0, T] has mean rate * T = 1e4
        let count = path.jumps.len() as f64;
        assert!((count - horizon).abs() < 4.0 * horizon.sqrt(), "count = {count}");
    }

    #[test]
    fn ctmc_absorbing_state_stays() {
        let rates = GeneratorMatrix::new(vec![vec![-1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let mut rng = stream_rng(18, 0);
        let path = simulate_ctmc_segment(&rates, 1, 0.0, 100.0, &mut rng);
        assert!(path.jumps.is_empty());
        assert_eq!(path.end, 1);
    }

    #[test]
    fn ctmc_reproducible() {
        let rates = two_state_rates();
        let a = simulate_ctmc_segment(&rates, 0, 0.0, 50.0, &mut stream_rng(4, 7));
        let b = simulate_ctmc_segment(&rates, 0, 0.0, 50.0, &mut stream_rng(4, 7));
        assert_eq!(a, b);
    }

    #[test]
    fn sinks_receive_pre_step_states() {
        // One step: the sink holds the initial point only.
        let m = Model::Diffusion(ou(1.0, 1.0, 1).unwrap());
        let schedule = make_power_schedule(0.5, 0.5, WeightSpec::Step).unwrap();
        let mut sink = WeightedEmpiricalMeasure::new(16, stream_rng(0, 1));
        sink.register("m1", Arc::new(|x: &[f64], _| x[0])).unwrap();
        let spec = RunSpec {
            scheme: SchemeKind::Euler,
            innovations: Innovations::gaussian(1),
            x0: vec![2.5],
            z0: None,
            n_steps: 1,
        };
        let mut rng = replica_rng(1, 0);
        let end = run_trajectory(&m, &schedule, &spec, std::slice::from_mut(&mut sink), None, &mut rng).unwrap();
        assert_eq!(sink.count(), 1);
        assert_eq!(sink.value("m1").unwrap(), 2.5);
        assert_eq!(end.n, 1);
        assert_ne!(end.x[0], 2.5);
    }

    #[test]
    fn noiseless_run_weighted_average_by_hand() {
        // sigma = 0 makes the trajectory deterministic:
        // x_k = x_{k-1} (1 - gamma_k). Check the occupation average.
        let m = Model::Diffusion(ou(1.0, 0.0, 1).unwrap());
        let gammas = vec![0.5, 0.25, 0.125];
        let schedule = make_table_schedule(gammas.clone(), WeightSpec::Step).unwrap();
        let mut sink = WeightedEmpiricalMeasure::new(8, stream_rng(0, 2));
        sink.register("m1", Arc::new(|x: &[f64], _| x[0])).unwrap();
        let spec = RunSpec {
            scheme: SchemeKind::Euler,
            innovations: Innovations::gaussian(1),
            x0: vec![1.0],
            z0: None,
            n_steps: 3,
        };
        let mut rng = replica_rng(2, 0);
        let end = run_trajectory(&m, &schedule, &spec, std::slice::from_mut(&mut sink), None, &mut rng).unwrap();
        let x0 = 1.0;
        let x1 = x0 * (1.0 - 0.5);
        let x2 = x1 * (1.0 - 0.25);
        let x3 = x2 * (1.0 - 0.125);
        assert!((end.x[0] - x3).abs() < 1e-15);
        let h: f64 = gammas.iter().sum();
        let expect = (0.5 * x0 + 0.25 * x1 + 0.125 * x2) / h;
        assert!((sink.value("m1").unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn noiseless_run_tracks_linear_flow() {
        // Without noise the scheme is a variable-step ODE integrator for
        // dx/dt = -x; the relative defect against exp(-clock) shrinks with
        // the step scale.
        let err_for = |gamma1: f64| {
            let m = Model::Diffusion(ou(1.0, 0.0, 1).unwrap());
            let schedule = make_power_schedule(gamma1, 0.5, WeightSpec::Step).unwrap();
            let spec = RunSpec {
                scheme: SchemeKind::Euler,
                innovations: Innovations::gaussian(1),
                x0: vec![1.0],
                z0: None,
                n_steps: 2_000,
            };
            let mut rng = replica_rng(4, 0);
            let mut worst: f64 = 0.0;
            let mut obs = |pt: &SchedulePoint, state: &SchemeState, _: &[WeightedEmpiricalMeasure]| {
                // state is pre-step: clock is Gamma_{n-1}
                let exact = (-(pt.clock - pt.gamma)).exp();
                worst = worst.max((state.x[0] - exact).abs() / exact);
            };
            run_trajectory(&m, &schedule, &spec, &mut [], Some(&mut obs), &mut rng).unwrap();
            worst
        };
        let coarse = err_for(0.2);
        let fine = err_for(0.1);
        assert!(coarse < 0.25, "coarse defect {coarse}");
        assert!(fine < 0.08, "fine defect {fine}");
        assert!(fine < coarse);
    }

    #[test]
    fn switching_run_smoke_and_regime_occupation() {
        let m = Model::Switching(switching_ou(vec![1.0, 2.0], vec![1.0, 1.0], two_state_rates(), 1).unwrap());
        let schedule = make_power_schedule(0.5, 1.0 / 3.0, WeightSpec::Step).unwrap();
        let mut sink = WeightedEmpiricalMeasure::new(1024, stream_rng(0, 3));
        sink.register("occ0", Arc::new(|_: &[f64], z: Option<usize>| if z == Some(0) { 1.0 } else { 0.0 }))
            .unwrap();
        let spec = RunSpec {
            scheme: SchemeKind::SwitchingEuler,
            innovations: Innovations::gaussian(1),
            x0: vec![0.0],
            z0: Some(0),
            n_steps: 50_000,
        };
        let mut rng = replica_rng(5, 0);
        let end = run_trajectory(&m, &schedule, &spec, std::slice::from_mut(&mut sink), None, &mut rng).unwrap();
        assert!(end.regime.is_some());
        let occ = sink.value("occ0").unwrap();
        assert!((occ - 0.5).abs() < 0.05, "occ = {occ}");
    }

    #[test]
    fn trajectory_deterministic_in_seed() {
        let m = Model::Diffusion(ou(1.0, 2f64.sqrt(), 1).unwrap());
        let schedule = make_power_schedule(1.0, 1.0 / 3.0, WeightSpec::Step).unwrap();
        let spec = RunSpec {
            scheme: SchemeKind::Euler,
            innovations: Innovations::gaussian(1),
            x0: vec![0.0],
            z0: None,
            n_steps: 5_000,
        };
        let run = |seed: u64| {
            let mut rng = replica_rng(seed, 0);
            run_trajectory(&m, &schedule, &spec, &mut [], None, &mut rng).unwrap()
        };
        let a = run(1234);
        let b = run(1234);
        assert_eq!(a.x[0].to_bits(), b.x[0].to_bits());
        assert_eq!(a.noise_draws, 5_000);
        let c = run(1235);
        assert_ne!(a.x[0].to_bits(), c.x[0].to_bits());
    }

    #[test]
    fn run_validation_errors() {
        let m = Model::Diffusion(ou(1.0, 1.0, 1).unwrap());
        let schedule = make_power_schedule(0.5, 0.5, WeightSpec::Step).unwrap();
        let mut rng = replica_rng(0, 0);
        let base = RunSpec {
            scheme: SchemeKind::Euler,
            innovations: Innovations::gaussian(1),
            x0: vec![0.0],
            z0: None,
            n_steps: 10,
        };
        let bad_dim = RunSpec { x0: vec![0.0, 0.0], ..base.clone() };
        assert!(run_trajectory(&m, &schedule, &bad_dim, &mut [], None, &mut rng).is_err());
        let bad_innov = RunSpec { innovations: Innovations::gaussian(2), ..base.clone() };
        assert!(run_trajectory(&m, &schedule, &bad_innov, &mut [], None, &mut rng).is_err());
        let bad_regime = RunSpec { z0: Some(0), ..base.clone() };
        assert!(run_trajectory(&m, &schedule, &bad_regime, &mut [], None, &mut rng).is_err());
        let sw = Model::Switching(switching_ou(vec![1.0, 2.0], vec![1.0, 1.0], two_state_rates(), 1).unwrap());
        let missing_regime = RunSpec { scheme: SchemeKind::SwitchingEuler, ..base.clone() };
        assert!(run_trajectory(&sw, &schedule, &missing_regime, &mut [], None, &mut rng).is_err());
        // table exhaustion
        let table = make_table_schedule(vec![0.5, 0.25], WeightSpec::Step).unwrap();
        let too_long = RunSpec { n_steps: 3, ..base };
        assert!(matches!(
            run_trajectory(&m, &table, &too_long, &mut [], None, &mut rng),
            Err(Error::TableExhausted { .. })
        ));
    }
}

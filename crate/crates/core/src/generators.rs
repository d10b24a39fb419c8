//! Pseudo-generator probes and occupation-residual diagnostics.
//!
//! For a scheme with one-step kernel `Q_gamma`, the pseudo-generator
//!
//! ```text
//! A~_gamma f(x) = (E[f(X') | X = x] - f(x)) / gamma
//! ```
//!
//! approximates the generator `A f` of the target dynamics as `gamma -> 0`.
//! This module estimates `A~_gamma f` by Monte Carlo, scans the
//! approximation error `|A~_gamma f - A f|` across step sizes, and tracks
//! the occupation average `nu_n(A f)` whose decay towards zero is the
//! practical signature that the weighted empirical measures settle on an
//! invariant law. Test functions live in a dense core of compactly
//! supported smooth functions; bumps placed where the trajectory actually
//! travels make the residual a meaningful instrument rather than a probe of
//! empty space.

use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lyapunov::ProbePoint;
use crate::measures::{Functional, MeasureSnapshot, ReservoirItem};
use crate::models::{apply_generator, Innovations, Model, ScalarField};
use crate::numeric::{central_gradient, central_hessian, MeanAccumulator};
use crate::schemes::{one_step, SchemeKind};

/// Quantile levels at which default bump centers are placed.
pub const DEFAULT_BUMP_LEVELS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

/// Bump support is cut off once `1 - |(x-c)/R|^2` is this small; the
/// profile has already underflowed to zero well before that.
const BUMP_EDGE: f64 = 1e-6;

type UserScalar = Arc<dyn Fn(&[f64], Option<usize>) -> f64 + Send + Sync>;
type UserVector = Arc<dyn Fn(&[f64], Option<usize>, &mut [f64]) + Send + Sync>;

/// Smooth test function with exact derivatives where the form admits them.
///
/// The optional `regime_scale` multiplies the value (and derivatives) by a
/// per-regime constant, giving genuinely regime-dependent members of the
/// dense core for switching models.
#[derive(Clone)]
pub enum TestFunction {
    /// `exp(-1 / (1 - |(x - c)/R|^2))` inside the ball `|x - c| < R`,
    /// identically zero outside, infinitely smooth across the edge.
    Bump {
        center: Vec<f64>,
        radius: f64,
        regime_scale: Option<Vec<f64>>,
    },
    /// Polynomial in a single coordinate: `sum_k coeffs[k] * x[coord]^k`.
    /// Unbounded, so not a dense-core member; useful because its
    /// pseudo-generator has closed forms.
    Polynomial {
        coord: usize,
        coeffs: Vec<f64>,
        regime_scale: Option<Vec<f64>>,
    },
    /// Arbitrary callable; derivatives fall back to finite differences
    /// unless exact ones are supplied.
    User {
        value: UserScalar,
        gradient: Option<UserVector>,
        hessian: Option<UserVector>,
    },
}

impl std::fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TestFunction::Bump { center, radius, .. } => f
                .debug_struct("Bump")
                .field("center", center)
                .field("radius", radius)
                .finish(),
            TestFunction::Polynomial { coord, coeffs, .. } => f
                .debug_struct("Polynomial")
                .field("coord", coord)
                .field("coeffs", coeffs)
                .finish(),
            TestFunction::User { .. } => f.write_str("User"),
        }
    }
}

impl TestFunction {
    pub fn bump(center: Vec<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::invalid("radius", format!("must be finite and > 0, got {radius}")));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("center", "must be finite"));
        }
        Ok(TestFunction::Bump {
            center,
            radius,
            regime_scale: None,
        })
    }

    pub fn polynomial(coord: usize, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::invalid("coeffs", "must be non-empty"));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("coeffs", "must be finite"));
        }
        Ok(TestFunction::Polynomial {
            coord,
            coeffs,
            regime_scale: None,
        })
    }

    pub fn with_regime_scale(mut self, scale: Vec<f64>) -> Result<Self> {
        if scale.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("regime_scale", "must be finite"));
        }
        match &mut self {
            TestFunction::Bump { regime_scale, .. } | TestFunction::Polynomial { regime_scale, .. } => {
                *regime_scale = Some(scale);
                Ok(self)
            }
            TestFunction::User { .. } => Err(Error::invalid(
                "regime_scale",
                "user functions take the regime directly",
            )),
        }
    }

    fn scale(regime_scale: &Option<Vec<f64>>, z: Option<usize>) -> f64 {
        match (regime_scale, z) {
            (Some(s), Some(z)) => s.get(z).copied().unwrap_or(f64::NAN),
            _ => 1.0,
        }
    }
}

/// `u = |(x - c)/R|^2` and the profile value/derivative factors at `u`.
/// Everything vanishes once `u` is within [`BUMP_EDGE`] of 1 (the profile
/// underflows there anyway), which keeps the derivative factors finite.
fn bump_parts(center: &[f64], radius: f64, x: &[f64]) -> Option<(f64, f64)> {
    let mut u = 0.0;
    for (xi, ci) in x.iter().zip(center) {
        let t = (xi - ci) / radius;
        u += t * t;
    }
    if u >= 1.0 - BUMP_EDGE {
        return None;
    }
    let value = (-1.0 / (1.0 - u)).exp();
    Some((u, value))
}

impl ScalarField for TestFunction {
    fn value(&self, x: &[f64], z: Option<usize>) -> f64 {
        match self {
            TestFunction::Bump {
                center,
                radius,
                regime_scale,
            } => match bump_parts(center, *radius, x) {
                None => 0.0,
                Some((_, v)) => Self::scale(regime_scale, z) * v,
            },
            TestFunction::Polynomial {
                coord,
                coeffs,
                regime_scale,
            } => {
                let y = x[*coord];
                let mut acc = 0.0;
                for &c in coeffs.iter().rev() {
                    acc = acc * y + c;
                }
                Self::scale(regime_scale, z) * acc
            }
            TestFunction::User { value, .. } => value(x, z),
        }
    }

    fn gradient(&self, x: &[f64], z: Option<usize>, out: &mut [f64]) {
        match self {
            TestFunction::Bump {
                center,
                radius,
                regime_scale,
            } => match bump_parts(center, *radius, x) {
                None => out.fill(0.0),
                Some((u, v)) => {
                    // d/du exp(-1/(1-u)) = -value / (1-u)^2
                    let t = 1.0 - u;
                    let dv = -v / (t * t);
                    let s = Self::scale(regime_scale, z);
                    for (o, (xi, ci)) in out.iter_mut().zip(x.iter().zip(center)) {
                        *o = s * dv * 2.0 * (xi - ci) / (radius * radius);
                    }
                }
            },
            TestFunction::Polynomial {
                coord,
                coeffs,
                regime_scale,
            } => {
                out.fill(0.0);
                let y = x[*coord];
                let mut acc = 0.0;
                for (k, &c) in coeffs.iter().enumerate().skip(1).rev() {
                    acc = acc * y + k as f64 * c;
                }
                out[*coord] = Self::scale(regime_scale, z) * acc;
            }
            TestFunction::User { value, gradient, .. } => match gradient {
                Some(g) => g(x, z, out),
                None => central_gradient(&|y: &[f64]| value(y, z), x, out),
            },
        }
    }

    fn hessian(&self, x: &[f64], z: Option<usize>, out: &mut [f64]) {
        let d = x.len();
        match self {
            TestFunction::Bump {
                center,
                radius,
                regime_scale,
            } => match bump_parts(center, *radius, x) {
                None => out.fill(0.0),
                Some((u, v)) => {
                    let t = 1.0 - u;
                    let dv = -v / (t * t);
                    let d2v = v * (1.0 / (t * t * t * t) - 2.0 / (t * t * t));
                    let s = Self::scale(regime_scale, z);
                    let r2 = radius * radius;
                    for i in 0..d {
                        let gi = 2.0 * (x[i] - center[i]) / r2;
                        for j in 0..d {
                            let gj = 2.0 * (x[j] - center[j]) / r2;
                            let mut h = d2v * gi * gj;
                            if i == j {
                                h += dv * 2.0 / r2;
                            }
                            out[i * d + j] = s * h;
                        }
                    }
                }
            },
            TestFunction::Polynomial {
                coord,
                coeffs,
                regime_scale,
            } => {
                out.fill(0.0);
                let y = x[*coord];
                let mut acc = 0.0;
                for (k, &c) in coeffs.iter().enumerate().skip(2).rev() {
                    acc = acc * y + (k * (k - 1)) as f64 * c;
                }
                out[*coord * d + *coord] = Self::scale(regime_scale, z) * acc;
            }
            TestFunction::User { value, hessian, .. } => match hessian {
                Some(h) => h(x, z, out),
                None => central_hessian(&|y: &[f64]| value(y, z), x, out),
            },
        }
    }
}

/// Monte Carlo estimate of the pseudo-generator at one point.
#[derive(Debug, Clone, Serialize)]
pub struct GeneratorEstimate {
    pub estimate: f64,
    pub ci99_half_width: f64,
    /// Samples rejected for non-finite function values.
    pub overflow_count: u64,
    pub n_samples: u64,
}

/// Estimates `A~_gamma f(x) = (E[f(X')|x] - f(x)) / gamma` by direct
/// simulation of one-step transitions.
#[allow(clippy::too_many_arguments)]
pub fn estimate_pseudo_generator<R: Rng + ?Sized>(
    model: &Model,
    scheme: SchemeKind,
    f: &TestFunction,
    x: &[f64],
    z: Option<usize>,
    gamma: f64,
    innovations: Innovations,
    mc_samples: u64,
    rng: &mut R,
) -> Result<GeneratorEstimate> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::invalid("gamma", format!("must be finite and > 0, got {gamma}")));
    }
    if mc_samples < 1_000 {
        return Err(Error::invalid("mc_samples", format!("must be >= 10^3, got {mc_samples}")));
    }
    if innovations.dim() != model.noise_dim() {
        return Err(Error::invalid("innovations", "dimension does not match the model"));
    }
    let base = f.value(x, z);
    if !base.is_finite() {
        return Err(Error::NonFinite {
            context: format!("test function at {x:?}"),
        });
    }
    let mut u = vec![0.0; model.noise_dim()];
    let mut acc = MeanAccumulator::new();
    for _ in 0..mc_samples {
        innovations.sample_into(rng, &mut u);
        let (next, z_next) = one_step(model, scheme, x, z, 0.0, gamma, &u, rng)?;
        acc.push((f.value(&next, z_next) - base) / gamma);
    }
    Ok(GeneratorEstimate {
        estimate: acc.mean(),
        ci99_half_width: acc.ci99_half_width(),
        overflow_count: acc.nonfinite_count(),
        n_samples: mc_samples,
    })
}

/// One cell of the generator-approximation error table.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorCell {
    pub point: ProbePoint,
    pub gamma: f64,
    /// Exact generator value `A f` at the point.
    pub generator_value: f64,
    /// Monte Carlo pseudo-generator estimate.
    pub estimate: f64,
    pub abs_error: f64,
    pub ci99_half_width: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorScan {
    pub cells: Vec<ErrorCell>,
    /// Per point: whether the error is non-increasing across the scanned
    /// step sizes within the combined CI slack.
    pub trend_nonincreasing: Vec<bool>,
}

/// Scans `|A~_gamma f - A f|` over a grid of points and a decreasing list
/// of step sizes. The trend flag per point realises, at CI resolution, the
/// requirement that the approximation error vanish uniformly on compacts
/// as the step shrinks.
#[allow(clippy::too_many_arguments)]
pub fn generator_error_scan<R: Rng + ?Sized>(
    model: &Model,
    scheme: SchemeKind,
    f: &TestFunction,
    points: &[ProbePoint],
    gammas: &[f64],
    innovations: Innovations,
    mc_samples: u64,
    rng: &mut R,
) -> Result<ErrorScan> {
    if points.is_empty() {
        return Err(Error::invalid("points", "must be non-empty"));
    }
    if gammas.is_empty() || gammas.windows(2).any(|w| w[1] >= w[0]) || gammas.iter().any(|g| !(*g > 0.0)) {
        return Err(Error::invalid("gammas", "must be a strictly decreasing list of positive steps"));
    }
    let mut cells = Vec::with_capacity(points.len() * gammas.len());
    let mut trend = Vec::with_capacity(points.len());
    for pt in points {
        let af = apply_generator(model, f, &pt.x, pt.z)?;
        let mut prev: Option<(f64, f64)> = None;
        let mut nonincreasing = true;
        for &gamma in gammas {
            let est = estimate_pseudo_generator(model, scheme, f, &pt.x, pt.z, gamma, innovations, mc_samples, rng)?;
            let abs_error = (est.estimate - af).abs();
            if let Some((prev_err, prev_ci)) = prev {
                if abs_error > prev_err + prev_ci + est.ci99_half_width {
                    nonincreasing = false;
                }
            }
            prev = Some((abs_error, est.ci99_half_width));
            cells.push(ErrorCell {
                point: pt.clone(),
                gamma,
                generator_value: af,
                estimate: est.estimate,
                abs_error,
                ci99_half_width: est.ci99_half_width,
            });
        }
        trend.push(nonincreasing);
    }
    Ok(ErrorScan {
        cells,
        trend_nonincreasing: trend,
    })
}

/// Occupation average of `A f` along the run, per test function.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualSeries {
    pub f_id: String,
    /// `(n, nu_n(A f))` at the recorded snapshot indices.
    pub series: Vec<(u64, f64)>,
    pub terminal_abs: f64,
    /// Terminal magnitude no larger than at the first and middle
    /// snapshots: the residual is heading down, not up.
    pub decreasing: bool,
}

/// Builds the named occupation functionals `x -> A f_i(x)` to register on a
/// measure before a run. The returned names are `ew_0, ew_1, ...` and are
/// the `f_id`s that [`ew_residual`] later reads back from snapshots.
/// Generator evaluations that fail produce NaN, which the measure records
/// as a tainted column rather than a crash.
pub fn ew_functionals(model: &Model, fs: &[TestFunction]) -> Vec<(String, Functional)> {
    fs.iter()
        .enumerate()
        .map(|(i, f)| {
            let model = model.clone();
            let f = f.clone();
            let func: Functional =
                Arc::new(move |x: &[f64], z: Option<usize>| apply_generator(&model, &f, x, z).unwrap_or(f64::NAN));
            (format!("ew_{i}"), func)
        })
        .collect()
}

/// Reads the `nu_n(A f)` trajectories back from a snapshot sequence.
pub fn ew_residual(snaps: &[MeasureSnapshot], f_ids: &[String]) -> Result<Vec<ResidualSeries>> {
    if snaps.is_empty() {
        return Err(Error::invalid("snaps", "must be non-empty"));
    }
    let mut out = Vec::with_capacity(f_ids.len());
    for id in f_ids {
        let mut series = Vec::with_capacity(snaps.len());
        for snap in snaps {
            let v = snap
                .value(id)
                .ok_or_else(|| Error::invalid("f_ids", format!("functional `{id}` missing from snapshots")))?;
            series.push((snap.n, v));
        }
        let terminal_abs = series.last().unwrap().1.abs();
        let first_abs = series.first().unwrap().1.abs();
        let mid_abs = series[series.len() / 2].1.abs();
        let decreasing = terminal_abs <= first_abs && terminal_abs <= mid_abs;
        out.push(ResidualSeries {
            f_id: id.clone(),
            series,
            terminal_abs,
            decreasing,
        });
    }
    Ok(out)
}

/// Default dense-core family for a run: bumps centred on states drawn at
/// the weighted quantile levels of the first coordinate of `items`, with a
/// common radius of twice the weighted standard deviation of that
/// coordinate. Centres sit on actual visited states, so every bump probes
/// occupied territory.
pub fn default_bumps(items: &[ReservoirItem]) -> Result<Vec<TestFunction>> {
    if items.is_empty() {
        return Err(Error::EmptyReservoir {
            context: "bump placement".into(),
        });
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[a].x[0].total_cmp(&items[b].x[0]));
    let total: f64 = items.iter().map(|it| it.weight).sum();
    if !(total > 0.0) {
        return Err(Error::EmptyReservoir {
            context: "bump placement: zero total weight".into(),
        });
    }
    let mean: f64 = items.iter().map(|it| it.weight * it.x[0]).sum::<f64>() / total;
    let var: f64 = items.iter().map(|it| it.weight * (it.x[0] - mean).powi(2)).sum::<f64>() / total;
    let radius = if var > 0.0 { 2.0 * var.sqrt() } else { 1.0 };

    let mut bumps = Vec::with_capacity(DEFAULT_BUMP_LEVELS.len());
    for &level in DEFAULT_BUMP_LEVELS.iter() {
        let target = level * total;
        let mut acc = 0.0;
        let mut chosen = order[order.len() - 1];
        for &idx in &order {
            acc += items[idx].weight;
            if acc >= target {
                chosen = idx;
                break;
            }
        }
        bumps.push(TestFunction::bump(items[chosen].x.clone(), radius)?);
    }
    Ok(bumps)
}

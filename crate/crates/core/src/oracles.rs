//! Independent ground-truth references for the stationary laws targeted by
//! the simulation schemes.
//!
//! Nothing here shares code with the occupation-measure pipeline: analytic
//! formulas, quadrature of the 1-d stationary density equation, dense
//! linear solves for regime-switching moments, and a plain constant-step
//! long-run simulation. Agreement between these references and the
//! weighted occupation measures is therefore a genuine cross-check, not a
//! tautology.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::measures::QuantileTable;
use crate::models::Model;
use crate::numeric::KahanSum;
use crate::schemes::{one_step, SchemeKind};

/// Largest constant step accepted by [`longrun_reference`]; the reference
/// carries an O(gamma) bias, so it must be run well below the decreasing
/// schedule's initial step.
pub const MAX_REFERENCE_STEP: f64 = 0.01;

/// States retained by the long-run reference for quantile queries.
pub const REFERENCE_SAMPLE_CAP: usize = 100_000;

/// Per-regime and total stationary moments of a switching model.
#[derive(Debug, Clone, Serialize)]
pub struct MomentTable {
    /// Stationary regime occupation.
    pub pi: Vec<f64>,
    /// `E[X^2 1_{regime = z}]` per regime.
    pub second_per_regime: Vec<f64>,
    pub total_second: f64,
    pub total_first: f64,
}

/// A stationary law in one of four representations.
#[derive(Debug, Clone)]
pub enum StationaryReference {
    /// Product of independent normals (degenerate when a variance is 0).
    AnalyticNormal { mean: Vec<f64>, variance: Vec<f64> },
    /// Tabulated 1-d density on a uniform grid with its CDF.
    QuadratureDensity {
        grid: Vec<f64>,
        density: Vec<f64>,
        cdf: Vec<f64>,
    },
    /// Moments only; no quantile function.
    Moments(MomentTable),
    /// Sample from a long constant-step run plus exact running moments.
    Empirical {
        table: Vec<QuantileTable>,
        moments: Vec<[f64; 2]>,
        n: u64,
    },
}

impl StationaryReference {
    /// Left-continuous quantile of coordinate `coord` at level `u`.
    pub fn quantile(&self, coord: usize, u: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&u) {
            return Err(Error::invalid("u", format!("must lie in [0, 1], got {u}")));
        }
        match self {
            StationaryReference::AnalyticNormal { mean, variance } => {
                let m = mean[coord];
                let var = variance[coord];
                if var == 0.0 {
                    return Ok(m);
                }
                let n = Normal::new(m, var.sqrt()).expect("positive variance");
                Ok(n.inverse_cdf(u.clamp(1e-300, 1.0 - 1e-16)))
            }
            StationaryReference::QuadratureDensity { grid, cdf, .. } => {
                if coord != 0 {
                    return Err(Error::invalid("coord", "quadrature reference is one-dimensional"));
                }
                let idx = cdf.partition_point(|c| *c < u);
                if idx == 0 {
                    return Ok(grid[0]);
                }
                if idx >= cdf.len() {
                    return Ok(*grid.last().unwrap());
                }
                let (c0, c1) = (cdf[idx - 1], cdf[idx]);
                let t = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
                Ok(grid[idx - 1] + t * (grid[idx] - grid[idx - 1]))
            }
            StationaryReference::Moments(_) => Err(Error::invalid("reference", "moment table has no quantile function")),
            StationaryReference::Empirical { table, .. } => Ok(table[coord].query(u)),
        }
    }

    /// Raw moment `E[X_coord^order]`, for the orders each representation
    /// supports exactly (normals: 1..=4; quadrature: any; moment tables and
    /// empirical references: 1..=2).
    pub fn moment(&self, coord: usize, order: u32) -> Result<f64> {
        match self {
            StationaryReference::AnalyticNormal { mean, variance } => {
                let m = mean[coord];
                let v = variance[coord];
                match order {
                    1 => Ok(m),
                    2 => Ok(m * m + v),
                    3 => Ok(m * m * m + 3.0 * m * v),
                    4 => Ok(m.powi(4) + 6.0 * m * m * v + 3.0 * v * v),
                    _ => Err(Error::invalid("order", "normal reference supports orders 1..=4")),
                }
            }
            StationaryReference::QuadratureDensity { grid, density, .. } => {
                if coord != 0 {
                    return Err(Error::invalid("coord", "quadrature reference is one-dimensional"));
                }
                let mut acc = KahanSum::new();
                for w in grid.windows(2).zip(density.windows(2)) {
                    let (xs, ps) = w;
                    let h = xs[1] - xs[0];
                    let f0 = xs[0].powi(order as i32) * ps[0];
                    let f1 = xs[1].powi(order as i32) * ps[1];
                    acc.add(0.5 * h * (f0 + f1));
                }
                Ok(acc.value())
            }
            StationaryReference::Moments(t) => match order {
                1 => Ok(t.total_first),
                2 => Ok(t.total_second),
                _ => Err(Error::invalid("order", "moment table holds orders 1..=2")),
            },
            StationaryReference::Empirical { moments, .. } => match order {
                1 => Ok(moments[coord][0]),
                2 => Ok(moments[coord][1]),
                _ => Err(Error::invalid("order", "empirical reference holds orders 1..=2")),
            },
        }
    }

    pub fn moment_table(&self) -> Option<&MomentTable> {
        match self {
            StationaryReference::Moments(t) => Some(t),
            _ => None,
        }
    }
}

/// Stationary law of `dX = -a X dt + sigma dW` per coordinate: centred
/// normal with variance `sigma^2 / (2a)`.
pub fn ou_stationary(a: f64, sigma: f64, dim: usize) -> Result<StationaryReference> {
    if !(a > 0.0) {
        return Err(Error::NoStationaryMoments {
            details: format!("mean reversion must be > 0 for a stationary law, got {a}"),
        });
    }
    if dim == 0 {
        return Err(Error::invalid("dim", "must be >= 1"));
    }
    let variance = sigma * sigma / (2.0 * a);
    Ok(StationaryReference::AnalyticNormal {
        mean: vec![0.0; dim],
        variance: vec![variance; dim],
    })
}

/// Stationary density of a 1-d diffusion by quadrature:
///
/// ```text
/// p(x) ~ (1 / sigma^2(x)) exp( int 2 b / sigma^2 )
/// ```
///
/// normalised on `[x_lo, x_hi]` with `m` uniform points. The window must
/// capture essentially all mass: the boundary density has to fall below
/// 1e-10 of the peak, otherwise the law is (numerically) not integrable on
/// the window and the call fails.
pub fn fokker_planck_1d(
    b: &dyn Fn(f64) -> f64,
    sigma2: &dyn Fn(f64) -> f64,
    x_lo: f64,
    x_hi: f64,
    m: usize,
) -> Result<StationaryReference> {
    if !(x_hi > x_lo) || !x_lo.is_finite() || !x_hi.is_finite() {
        return Err(Error::invalid("window", format!("bad window [{x_lo}, {x_hi}]")));
    }
    if m < 100 {
        return Err(Error::invalid("m", "need at least 100 grid points"));
    }
    let h = (x_hi - x_lo) / (m - 1) as f64;
    let grid: Vec<f64> = (0..m).map(|i| x_lo + i as f64 * h).collect();

    // log-density up to a constant: cumulative trapezoid of 2b/sigma^2
    // minus ln sigma^2, anchored at the left edge
    let mut log_dens = Vec::with_capacity(m);
    let mut integral = KahanSum::new();
    let mut prev_ratio = {
        let s2 = sigma2(grid[0]);
        if !(s2 > 0.0) {
            return Err(Error::invalid("sigma2", format!("must be > 0 on the grid, got {s2} at {}", grid[0])));
        }
        2.0 * b(grid[0]) / s2
    };
    log_dens.push(-sigma2(grid[0]).ln());
    for i in 1..m {
        let s2 = sigma2(grid[i]);
        if !(s2 > 0.0) {
            return Err(Error::invalid("sigma2", format!("must be > 0 on the grid, got {s2} at {}", grid[i])));
        }
        let ratio = 2.0 * b(grid[i]) / s2;
        integral.add(0.5 * h * (prev_ratio + ratio));
        prev_ratio = ratio;
        log_dens.push(integral.value() - s2.ln());
    }

    let log_peak = log_dens.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut density: Vec<f64> = log_dens.iter().map(|l| (l - log_peak).exp()).collect();

    let boundary = density[0].max(density[m - 1]);
    let peak = 1.0;
    if boundary >= 1e-10 * peak {
        return Err(Error::WindowTooSmall {
            lo: x_lo,
            hi: x_hi,
            boundary,
            peak,
        });
    }

    let mut mass = KahanSum::new();
    for w in density.windows(2) {
        mass.add(0.5 * h * (w[0] + w[1]));
    }
    let total = mass.value();
    for d in density.iter_mut() {
        *d /= total;
    }
    let mut cdf = Vec::with_capacity(m);
    let mut acc = KahanSum::new();
    cdf.push(0.0);
    for w in density.windows(2) {
        acc.add(0.5 * h * (w[0] + w[1]));
        cdf.push(acc.value());
    }
    let end = *cdf.last().unwrap();
    for c in cdf.iter_mut() {
        *c /= end;
    }
    Ok(StationaryReference::QuadratureDensity { grid, density, cdf })
}

/// Stationary first and second moments of a regime-switching linear model
/// `dX = -a(z) X dt + sigma(z) dW` by dense linear solves:
///
/// ```text
/// pi Q = 0
/// 0 = -2 a(z) u(z) + sigma^2(z) pi(z) + sum_w q(w, z) u(w)
/// ```
///
/// with `u(z)` the stationary `E[X^2 1_{regime = z}]`.
pub fn switching_moments(a: &[f64], sigma: &[f64], rates: &crate::models::GeneratorMatrix) -> Result<MomentTable> {
    let m = rates.regimes();
    if a.len() != m || sigma.len() != m {
        return Err(Error::invalid("a", format!("need {m} per-regime coefficients")));
    }
    if !rates.is_irreducible() {
        return Err(Error::invalid("rates", "generator must be irreducible"));
    }
    let pi = rates.stationary_distribution()?;

    // (2 diag(a) - Q^T) u = sigma^2 .* pi
    let mut sys = DMatrix::zeros(m, m);
    let mut rhs = DVector::zeros(m);
    for z in 0..m {
        for w in 0..m {
            sys[(z, w)] = if z == w { 2.0 * a[z] } else { 0.0 } - rates.entry(w, z);
        }
        rhs[z] = sigma[z] * sigma[z] * pi[z];
    }
    let lu = sys.clone().lu();
    let u = lu.solve(&rhs).ok_or_else(|| Error::NoStationaryMoments {
        details: "second-moment system is singular (a regime fails to revert)".into(),
    })?;
    if u.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::NoStationaryMoments {
            details: format!("second-moment solve produced {:?}", u.as_slice()),
        });
    }
    Ok(MomentTable {
        pi,
        second_per_regime: u.as_slice().to_vec(),
        total_second: u.iter().sum(),
        total_first: 0.0,
    })
}

/// Long constant-step simulation as an independent (though O(gamma)
/// biased) empirical reference: `burn_in` discarded steps followed by
/// `n_keep` recorded states. Running first and second moments are exact
/// over all recorded states; quantiles come from a uniform subsample of at
/// most [`REFERENCE_SAMPLE_CAP`] states.
#[allow(clippy::too_many_arguments)]
pub fn longrun_reference<R: Rng + ?Sized>(
    model: &Model,
    scheme: SchemeKind,
    gamma_ref: f64,
    burn_in: u64,
    n_keep: u64,
    x0: &[f64],
    z0: Option<usize>,
    rng: &mut R,
) -> Result<StationaryReference> {
    if !(gamma_ref > 0.0 && gamma_ref <= MAX_REFERENCE_STEP) {
        return Err(Error::invalid(
            "gamma_ref",
            format!("must lie in (0, {MAX_REFERENCE_STEP}], got {gamma_ref}"),
        ));
    }
    if burn_in < 100_000 {
        return Err(Error::invalid("burn_in", format!("must be >= 10^5, got {burn_in}")));
    }
    if n_keep == 0 {
        return Err(Error::invalid("n_keep", "must be >= 1"));
    }
    if x0.len() != model.dim() {
        return Err(Error::invalid("x0", "dimension does not match the model"));
    }
    let innovations = crate::models::Innovations::gaussian(model.noise_dim());
    let mut u = vec![0.0; model.noise_dim()];
    let mut x = x0.to_vec();
    let mut z = z0;
    let mut clock = 0.0;
    for _ in 0..burn_in {
        innovations.sample_into(rng, &mut u);
        let (nx, nz) = one_step(model, scheme, &x, z, clock, gamma_ref, &u, rng)?;
        x = nx;
        z = nz;
        clock += gamma_ref;
    }
    let dim = model.dim();
    let thin = (n_keep / REFERENCE_SAMPLE_CAP as u64).max(1);
    let mut kept: Vec<Vec<f64>> = Vec::with_capacity((n_keep / thin + 1) as usize);
    let mut sums: Vec<[KahanSum; 2]> = (0..dim).map(|_| [KahanSum::new(), KahanSum::new()]).collect();
    for k in 0..n_keep {
        innovations.sample_into(rng, &mut u);
        let (nx, nz) = one_step(model, scheme, &x, z, clock, gamma_ref, &u, rng)?;
        x = nx;
        z = nz;
        clock += gamma_ref;
        for (i, s) in sums.iter_mut().enumerate() {
            s[0].add(x[i]);
            s[1].add(x[i] * x[i]);
        }
        if k % thin == 0 {
            kept.push(x.clone());
        }
    }
    let moments: Vec<[f64; 2]> = sums
        .iter()
        .map(|s| [s[0].value() / n_keep as f64, s[1].value() / n_keep as f64])
        .collect();
    let mut table = Vec::with_capacity(dim);
    for coord in 0..dim {
        let pairs: Vec<(f64, f64)> = kept.iter().map(|s| (s[coord], 1.0)).collect();
        table.push(QuantileTable::from_pairs(pairs)?);
    }
    Ok(StationaryReference::Empirical {
        table,
        moments,
        n: n_keep,
    })
}

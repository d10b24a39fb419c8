//! Model descriptions: drift/diffusion pairs, regime-switching variants,
//! innovation laws and the associated second-order differential operator.
//!
//! A model is the continuous-time object we want the stationary law of; the
//! discretisation schemes in [`crate::schemes`] only ever query the callables
//! stored here. All callables are `Send + Sync` so a model can be shared
//! across replica threads without cloning user state.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numeric::{central_gradient, central_hessian, dot};

type VectorField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
type RegimeVectorField = Arc<dyn Fn(&[f64], usize, &mut [f64]) + Send + Sync>;
type ScalarMap = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Time-homogeneous diffusion `dX = b(X) dt + sigma(X) dW` on `R^d` with an
/// `N`-dimensional driving noise.
#[derive(Clone)]
pub struct DiffusionModel {
    dim: usize,
    noise_dim: usize,
    drift: VectorField,
    /// Writes `sigma(x)` in row-major `dim x noise_dim` order.
    diffusion: VectorField,
    /// `sigma * sigma'` for scalar models, enabling the second-order
    /// correction step. `None` for models that do not provide it.
    vol_times_dvol: Option<ScalarMap>,
}

impl std::fmt::Debug for DiffusionModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffusionModel")
            .field("dim", &self.dim)
            .field("noise_dim", &self.noise_dim)
            .field("has_vol_times_dvol", &self.vol_times_dvol.is_some())
            .finish()
    }
}

impl DiffusionModel {
    pub fn new(dim: usize, noise_dim: usize, drift: VectorField, diffusion: VectorField) -> Result<Self> {
        if dim == 0 || noise_dim == 0 {
            return Err(Error::invalid("dim", "state and noise dimensions must be >= 1"));
        }
        Ok(Self {
            dim,
            noise_dim,
            drift,
            diffusion,
            vol_times_dvol: None,
        })
    }

    /// Attach the scalar `sigma * sigma'` map required by the second-order
    /// scheme. Only valid for `dim == noise_dim == 1`.
    pub fn with_vol_times_dvol(mut self, map: ScalarMap) -> Result<Self> {
        if self.dim != 1 || self.noise_dim != 1 {
            return Err(Error::invalid(
                "vol_times_dvol",
                "second-order volatility correction is only defined for scalar models",
            ));
        }
        self.vol_times_dvol = Some(map);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(out.len(), self.dim);
        (self.drift)(x, out);
    }

    /// Row-major `dim x noise_dim` diffusion coefficient.
    pub fn diffusion_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(out.len(), self.dim * self.noise_dim);
        (self.diffusion)(x, out);
    }

    pub fn vol_times_dvol(&self, x: f64) -> Option<f64> {
        self.vol_times_dvol.as_ref().map(|f| f(x))
    }
}

/// Linear mean reversion towards the origin with constant isotropic noise:
/// `dX = -a X dt + sigma dW` on `R^dim`.
pub fn ou(a: f64, sigma: f64, dim: usize) -> Result<DiffusionModel> {
    if !a.is_finite() || !sigma.is_finite() {
        return Err(Error::invalid("a", "coefficients must be finite"));
    }
    let drift: VectorField = Arc::new(move |x, out| {
        for (o, xi) in out.iter_mut().zip(x) {
            *o = -a * xi;
        }
    });
    let diffusion: VectorField = Arc::new(move |_x, out| {
        out.fill(0.0);
        let d = (out.len() as f64).sqrt() as usize;
        for i in 0..d {
            out[i * d + i] = sigma;
        }
    });
    let model = DiffusionModel::new(dim, dim, drift, diffusion)?;
    if dim == 1 {
        // sigma' = 0: the correction term vanishes identically.
        model.with_vol_times_dvol(Arc::new(|_| 0.0))
    } else {
        Ok(model)
    }
}

/// Scalar model with state-dependent volatility:
/// `dX = -a X dt + sqrt(sigma0^2 + c X^2) dW`.
///
/// `sigma0 > 0` keeps the noise elliptic at the origin and `c >= 0` keeps
/// the variance well defined. `sigma * sigma'` is `c x`, exact.
pub fn quadratic_vol_1d(a: f64, sigma0: f64, c: f64) -> Result<DiffusionModel> {
    if !(sigma0 > 0.0) {
        return Err(Error::invalid("sigma0", format!("must be > 0, got {sigma0}")));
    }
    if !(c >= 0.0) {
        return Err(Error::invalid("c", format!("must be >= 0, got {c}")));
    }
    let drift: VectorField = Arc::new(move |x, out| out[0] = -a * x[0]);
    let diffusion: VectorField = Arc::new(move |x, out| out[0] = (sigma0 * sigma0 + c * x[0] * x[0]).sqrt());
    DiffusionModel::new(1, 1, drift, diffusion)?.with_vol_times_dvol(Arc::new(move |x| c * x))
}

/// Conservative rate matrix of a finite-state continuous-time chain:
/// non-negative off-diagonal entries, rows summing to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMatrix {
    m: usize,
    q: Vec<f64>,
}

impl GeneratorMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = rows.len();
        if m == 0 {
            return Err(Error::invalid("q", "rate matrix is empty"));
        }
        let mut q = Vec::with_capacity(m * m);
        for (z, row) in rows.iter().enumerate() {
            if row.len() != m {
                return Err(Error::invalid(
                    "q",
                    format!("row {z} has length {} in a {m}-state matrix", row.len()),
                ));
            }
            let scale = row.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
            let sum: f64 = row.iter().sum();
            if sum.abs() > 1e-12 * scale {
                return Err(Error::invalid("q", format!("row {z} sums to {sum}, expected 0")));
            }
            for (w, v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::invalid("q", format!("entry ({z}, {w}) is not finite")));
                }
                if w != z && *v < 0.0 {
                    return Err(Error::invalid(
                        "q",
                        format!("off-diagonal entry ({z}, {w}) = {v} is negative"),
                    ));
                }
            }
            q.extend_from_slice(row);
        }
        Ok(Self { m, q })
    }

    pub fn regimes(&self) -> usize {
        self.m
    }

    pub fn entry(&self, z: usize, w: usize) -> f64 {
        self.q[z * self.m + w]
    }

    /// Total jump intensity out of `z` (non-negative).
    pub fn exit_rate(&self, z: usize) -> f64 {
        -self.entry(z, z)
    }

    /// Conditional jump law out of `z`; zero vector for absorbing states.
    pub fn jump_probability(&self, z: usize, w: usize) -> f64 {
        let rate = self.exit_rate(z);
        if rate <= 0.0 || w == z {
            0.0
        } else {
            self.entry(z, w) / rate
        }
    }

    /// Whether every regime communicates with every other through positive
    /// rates.
    pub fn is_irreducible(&self) -> bool {
        (0..self.m).all(|start| {
            let mut seen = vec![false; self.m];
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(z) = stack.pop() {
                for w in 0..self.m {
                    if w != z && !seen[w] && self.entry(z, w) > 0.0 {
                        seen[w] = true;
                        stack.push(w);
                    }
                }
            }
            seen.iter().all(|s| *s)
        })
    }

    /// Unique invariant distribution of the chain. Requires irreducibility.
    pub fn stationary_distribution(&self) -> Result<Vec<f64>> {
        if !self.is_irreducible() {
            return Err(Error::NoStationaryMoments {
                details: "rate matrix is not irreducible".into(),
            });
        }
        if self.m == 1 {
            return Ok(vec![1.0]);
        }
        // Solve pi Q = 0 with sum(pi) = 1: replace the last column of Q^T
        // by the normalisation row.
        let m = self.m;
        let mut a = nalgebra::DMatrix::zeros(m, m);
        let mut rhs = nalgebra::DVector::zeros(m);
        for i in 0..m {
            for j in 0..m {
                a[(i, j)] = self.entry(j, i);
            }
        }
        for j in 0..m {
            a[(m - 1, j)] = 1.0;
        }
        rhs[m - 1] = 1.0;
        let sol = a.lu().solve(&rhs).ok_or_else(|| Error::NoStationaryMoments {
            details: "stationary system is singular".into(),
        })?;
        Ok(sol.iter().copied().collect())
    }
}

/// Diffusion whose coefficients are modulated by an autonomous finite-state
/// jump process: `dX = b(X, zeta) dt + sigma(X, zeta) dW`, with `zeta` a
/// continuous-time chain driven by [`GeneratorMatrix`], independent of `W`.
#[derive(Clone)]
pub struct SwitchingModel {
    dim: usize,
    noise_dim: usize,
    drift: RegimeVectorField,
    diffusion: RegimeVectorField,
    rates: GeneratorMatrix,
}

impl std::fmt::Debug for SwitchingModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SwitchingModel")
            .field("dim", &self.dim)
            .field("noise_dim", &self.noise_dim)
            .field("regimes", &self.rates.regimes())
            .finish()
    }
}

impl SwitchingModel {
    pub fn new(
        dim: usize,
        noise_dim: usize,
        drift: RegimeVectorField,
        diffusion: RegimeVectorField,
        rates: GeneratorMatrix,
    ) -> Result<Self> {
        if dim == 0 || noise_dim == 0 {
            return Err(Error::invalid("dim", "state and noise dimensions must be >= 1"));
        }
        Ok(Self {
            dim,
            noise_dim,
            drift,
            diffusion,
            rates,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn regimes(&self) -> usize {
        self.rates.regimes()
    }

    pub fn rates(&self) -> &GeneratorMatrix {
        &self.rates
    }

    pub fn drift_into(&self, x: &[f64], z: usize, out: &mut [f64]) {
        debug_assert!(z < self.regimes());
        (self.drift)(x, z, out);
    }

    pub fn diffusion_into(&self, x: &[f64], z: usize, out: &mut [f64]) {
        debug_assert!(z < self.regimes());
        (self.diffusion)(x, z, out);
    }
}

/// Mean reversion with regime-dependent speed and volatility:
/// `dX = -a[zeta] X dt + sigma[zeta] dW` on `R^dim`.
pub fn switching_ou(a: Vec<f64>, sigma: Vec<f64>, rates: GeneratorMatrix, dim: usize) -> Result<SwitchingModel> {
    let m = rates.regimes();
    if a.len() != m || sigma.len() != m {
        return Err(Error::invalid(
            "a",
            format!("coefficient tables have lengths {} / {}, expected {m}", a.len(), sigma.len()),
        ));
    }
    let a = Arc::new(a);
    let sigma = Arc::new(sigma);
    let a2 = a.clone();
    let drift: RegimeVectorField = Arc::new(move |x, z, out| {
        for (o, xi) in out.iter_mut().zip(x) {
            *o = -a2[z] * xi;
        }
    });
    let diffusion: RegimeVectorField = Arc::new(move |_x, z, out| {
        out.fill(0.0);
        let d = (out.len() as f64).sqrt() as usize;
        for i in 0..d {
            out[i * d + i] = sigma[z];
        }
    });
    SwitchingModel::new(dim, dim, drift, diffusion, rates)
}

/// Either model family, as consumed by the trajectory driver.
#[derive(Debug, Clone)]
pub enum Model {
    Diffusion(DiffusionModel),
    Switching(SwitchingModel),
}

impl Model {
    pub fn dim(&self) -> usize {
        match self {
            Model::Diffusion(m) => m.dim(),
            Model::Switching(m) => m.dim(),
        }
    }

    pub fn noise_dim(&self) -> usize {
        match self {
            Model::Diffusion(m) => m.noise_dim(),
            Model::Switching(m) => m.noise_dim(),
        }
    }

    pub fn regimes(&self) -> Option<usize> {
        match self {
            Model::Diffusion(_) => None,
            Model::Switching(m) => Some(m.regimes()),
        }
    }
}

/// Law of the per-step innovation vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnovationKind {
    Gaussian,
    /// Product of centred three-point marginals on `{-sqrt(3), 0, sqrt(3)}`
    /// with probabilities `{1/6, 2/3, 1/6}`: matches the Gaussian moment
    /// tensors through order 5 while staying bounded.
    ThreePoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Innovations {
    kind: InnovationKind,
    dim: usize,
}

impl Innovations {
    pub fn gaussian(dim: usize) -> Self {
        Self {
            kind: InnovationKind::Gaussian,
            dim,
        }
    }

    pub fn three_point(dim: usize) -> Self {
        Self {
            kind: InnovationKind::ThreePoint,
            dim,
        }
    }

    pub fn kind(&self) -> InnovationKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Sup-norm bound on one innovation vector component, when one exists.
    pub fn support_bound(&self) -> Option<f64> {
        match self.kind {
            InnovationKind::Gaussian => None,
            InnovationKind::ThreePoint => Some(3f64.sqrt()),
        }
    }

    /// Highest order through which the moment tensors agree with the
    /// standard Gaussian ones.
    pub fn gaussian_moment_order(&self) -> u32 {
        match self.kind {
            InnovationKind::Gaussian => u32::MAX,
            InnovationKind::ThreePoint => 5,
        }
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        match self.kind {
            InnovationKind::Gaussian => {
                for o in out.iter_mut() {
                    *o = rng.sample(StandardNormal);
                }
            }
            InnovationKind::ThreePoint => {
                let root3 = 3f64.sqrt();
                for o in out.iter_mut() {
                    let u: f64 = rng.gen();
                    *o = if u < 1.0 / 6.0 {
                        -root3
                    } else if u < 1.0 / 3.0 {
                        root3
                    } else {
                        0.0
                    };
                }
            }
        }
    }
}

/// Twice-differentiable scalar observable, optionally regime-indexed.
/// Implementations may provide exact derivatives; the defaults fall back to
/// central finite differences with step `1e-5 * (1 + |x|)`.
pub trait ScalarField {
    fn value(&self, x: &[f64], z: Option<usize>) -> f64;

    fn gradient(&self, x: &[f64], z: Option<usize>, out: &mut [f64]) {
        central_gradient(&|y: &[f64]| self.value(y, z), x, out);
    }

    /// Row-major `d x d` second derivative.
    fn hessian(&self, x: &[f64], z: Option<usize>, out: &mut [f64]) {
        central_hessian(&|y: &[f64]| self.value(y, z), x, out);
    }
}

impl<F: Fn(&[f64]) -> f64> ScalarField for F {
    fn value(&self, x: &[f64], _z: Option<usize>) -> f64 {
        self(x)
    }
}

/// Exact second-order operator of the model applied to `f` at `(x, z)`:
///
/// ```text
/// A f = <b, grad f> + (1/2) sum_ij (sigma sigma^T)_ij d2f/dxi dxj
///       [+ sum_w q(z, w) f(x, w)   for switching models]
/// ```
///
/// This is the infinitesimal drift of `f` along the model dynamics; its
/// integral against any stationary law vanishes, which is what the
/// stationarity residual diagnostics test. The regime argument is required
/// for switching models and ignored otherwise.
pub fn apply_generator(model: &Model, f: &dyn ScalarField, x: &[f64], z: Option<usize>) -> Result<f64> {
    let d = model.dim();
    let nd = model.noise_dim();
    if x.len() != d {
        return Err(Error::invalid("x", format!("point has dimension {}, model has {d}", x.len())));
    }
    let mut grad = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    let mut b = vec![0.0; d];
    let mut sig = vec![0.0; d * nd];

    let mut total = match model {
        Model::Diffusion(m) => {
            f.gradient(x, None, &mut grad);
            f.hessian(x, None, &mut hess);
            m.drift_into(x, &mut b);
            m.diffusion_into(x, &mut sig);
            second_order_part(&b, &sig, &grad, &hess, d, nd)
        }
        Model::Switching(m) => {
            let z = z.ok_or_else(|| Error::invalid("z", "switching models need a regime index"))?;
            if z >= m.regimes() {
                return Err(Error::invalid("z", format!("regime {z} out of range (model has {})", m.regimes())));
            }
            f.gradient(x, Some(z), &mut grad);
            f.hessian(x, Some(z), &mut hess);
            m.drift_into(x, z, &mut b);
            m.diffusion_into(x, z, &mut sig);
            let mut acc = second_order_part(&b, &sig, &grad, &hess, d, nd);
            for w in 0..m.regimes() {
                acc += m.rates().entry(z, w) * f.value(x, Some(w));
            }
            acc
        }
    };

    if total == 0.0 {
        total = 0.0; // normalise -0.0
    }
    if !total.is_finite() {
        return Err(Error::NonFinite {
            context: format!("generator application at x = {x:?}"),
        });
    }
    Ok(total)
}

fn second_order_part(b: &[f64], sig: &[f64], grad: &[f64], hess: &[f64], d: usize, nd: usize) -> f64 {
    let mut acc = dot(b, grad);
    // (sigma sigma^T)_ij = sum_k sig[i,k] sig[j,k]
    for i in 0..d {
        for j in 0..d {
            let mut cov = 0.0;
            for k in 0..nd {
                cov += sig[i * nd + k] * sig[j * nd + k];
            }
            acc += 0.5 * cov * hess[i * d + j];
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn ou_coefficients() {
        let m = ou(2.0, 0.5, 3).unwrap();
        let x = [1.0, -2.0, 0.5];
        let mut b = [0.0; 3];
        m.drift_into(&x, &mut b);
        assert_eq!(b, [-2.0, 4.0, -1.0]);
        let mut sig = [0.0; 9];
        m.diffusion_into(&x, &mut sig);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 0.5 } else { 0.0 };
                assert_eq!(sig[i * 3 + j], expect);
            }
        }
    }

    #[test]
    fn quadratic_vol_coefficients() {
        let m = quadratic_vol_1d(1.0, 1.0, 0.5).unwrap();
        let mut sig = [0.0];
        m.diffusion_into(&[2.0], &mut sig);
        assert!((sig[0] - (1.0f64 + 0.5 * 4.0).sqrt()).abs() < 1e-15);
        assert!((m.vol_times_dvol(2.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(quadratic_vol_1d(1.0, 0.0, 0.5).is_err());
        assert!(quadratic_vol_1d(1.0, 1.0, -0.5).is_err());
    }

    #[test]
    fn rate_matrix_validation() {
        assert!(GeneratorMatrix::new(vec![vec![-1.0, 1.0], vec![1.0, -1.0]]).is_ok());
        assert!(GeneratorMatrix::new(vec![vec![-1.0, 0.5], vec![1.0, -1.0]]).is_err());
        assert!(GeneratorMatrix::new(vec![vec![1.0, -1.0], vec![1.0, -1.0]]).is_err());
        assert!(GeneratorMatrix::new(vec![vec![-1.0, 1.0]]).is_err());
    }

    #[test]
    fn rate_matrix_jump_law() {
        let q = GeneratorMatrix::new(vec![
            vec![-3.0, 1.0, 2.0],
            vec![0.5, -0.5, 0.0],
            vec![1.0, 1.0, -2.0],
        ])
        .unwrap();
        assert_eq!(q.exit_rate(0), 3.0);
        assert!((q.jump_probability(0, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert!((q.jump_probability(0, 2) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(q.jump_probability(0, 0), 0.0);
        assert!(q.is_irreducible());
    }

    #[test]
    fn absorbing_state_not_irreducible() {
        let q = GeneratorMatrix::new(vec![vec![-1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert!(!q.is_irreducible());
        assert!(q.stationary_distribution().is_err());
    }

    #[test]
    fn stationary_distribution_two_state() {
        // rates 1 <-> 2, pi proportional to opposite rates
        let q = GeneratorMatrix::new(vec![vec![-1.0, 1.0], vec![2.0, -2.0]]).unwrap();
        let pi = q.stationary_distribution().unwrap();
        assert!((pi[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((pi[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn generator_on_square_matches_closed_form() {
        // For f = x^2: A f = 2 x b(x) + sigma^2.
        let m = Model::Diffusion(ou(1.0, 2f64.sqrt(), 1).unwrap());
        let f = |x: &[f64]| x[0] * x[0];
        let got = apply_generator(&m, &f, &[1.5], None).unwrap();
        assert!((got - (2.0 * 1.5 * -1.5 + 2.0)).abs() < 1e-6);
    }

    #[test]
    fn generator_multivariate_cross_terms() {
        // d = 2, b = -x, sigma = I: A f for f = x0 * x1 is -2 x0 x1
        // (the Hessian is off-diagonal, sigma sigma^T diagonal: no noise
        // contribution).
        let m = Model::Diffusion(ou(1.0, 1.0, 2).unwrap());
        let f = |x: &[f64]| x[0] * x[1];
        let got = apply_generator(&m, &f, &[0.7, -1.3], None).unwrap();
        assert!((got - 2.0 * 0.7 * 1.3).abs() < 1e-6);
    }

    #[test]
    fn switching_generator_includes_regime_coupling() {
        struct RegimeSquare;
        impl ScalarField for RegimeSquare {
            fn value(&self, x: &[f64], z: Option<usize>) -> f64 {
                let scale = match z {
                    Some(1) => 2.0,
                    _ => 1.0,
                };
                scale * x[0] * x[0]
            }
        }
        let q = GeneratorMatrix::new(vec![vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap();
        let m = Model::Switching(switching_ou(vec![1.0, 2.0], vec![1.0, 1.0], q, 1).unwrap());
        let x = [2.0];
        // regime 0: diffusion part 2 x b + sigma^2 = -8 + 1; jump part
        // q00 f(x,0) + q01 f(x,1) = -4 + 8 = 4.
        let got = apply_generator(&m, &RegimeSquare, &x, Some(0)).unwrap();
        assert!((got - (-8.0 + 1.0 + 4.0)).abs() < 1e-6, "got {got}");
        assert!(apply_generator(&m, &RegimeSquare, &x, None).is_err());
    }

    #[test]
    fn three_point_innovations_moments() {
        let law = Innovations::three_point(1);
        let mut rng = stream_rng(123, 0);
        let mut buf = [0.0];
        let n = 200_000;
        let (mut m1, mut m2, mut m4) = (0.0, 0.0, 0.0);
        let bound = law.support_bound().unwrap();
        for _ in 0..n {
            law.sample_into(&mut rng, &mut buf);
            let u = buf[0];
            assert!(u.abs() <= bound + 1e-15);
            assert!(u == 0.0 || (u.abs() - bound).abs() < 1e-15);
            m1 += u;
            m2 += u * u;
            m4 += u * u * u * u;
        }
        let n = n as f64;
        assert!((m1 / n).abs() < 0.02);
        assert!((m2 / n - 1.0).abs() < 0.02);
        assert!((m4 / n - 3.0).abs() < 0.06);
        assert_eq!(law.gaussian_moment_order(), 5);
    }

    #[test]
    fn finite_difference_fallback_matches_exact_cubic() {
        struct Cubic;
        impl ScalarField for Cubic {
            fn value(&self, x: &[f64], _z: Option<usize>) -> f64 {
                x[0].powi(3) + 2.0 * x[0] * x[1]
            }
        }
        let x = [1.2, -0.4];
        let mut g = [0.0; 2];
        Cubic.gradient(&x, None, &mut g);
        assert!((g[0] - (3.0 * 1.2 * 1.2 + 2.0 * -0.4)).abs() < 1e-5);
        assert!((g[1] - 2.0 * 1.2).abs() < 1e-6);
        let mut h = [0.0; 4];
        Cubic.hessian(&x, None, &mut h);
        assert!((h[0] - 6.0 * 1.2).abs() < 1e-3);
        assert!((h[1] - 2.0).abs() < 1e-3);
    }
}

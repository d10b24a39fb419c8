//! Small numeric utilities shared across modules: compensated summation,
//! central finite differences and dense symmetric eigenvalue extraction.

use nalgebra::DMatrix;

/// Kahan–Babuska compensated accumulator.
///
/// Running sums over 1e6+ terms of slowly decaying sequences lose several
/// digits under naive accumulation; all long-running sums in this crate
/// (time clocks, weight masses) go through this type. Recomputing a sum
/// from scratch must agree with the running value to ~1e-12 relative.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let y = x - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

impl std::iter::FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = KahanSum::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

/// Step used by all central finite-difference fallbacks: relative to the
/// magnitude of the evaluation point so that large states do not lose all
/// significant digits.
pub fn fd_step(x: &[f64]) -> f64 {
    let norm = l2_norm(x);
    1e-5 * (1.0 + norm)
}

pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central-difference gradient of a scalar function.
pub fn central_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64], out: &mut [f64]) {
    let h = fd_step(x);
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let xi = x[i];
        xp[i] = xi + h;
        let fp = f(&xp);
        xp[i] = xi - h;
        let fm = f(&xp);
        xp[i] = xi;
        out[i] = (fp - fm) / (2.0 * h);
    }
}

/// Central-difference Hessian (row-major d x d). Uses the 4-point stencil
/// off the diagonal and the 3-point stencil on it.
pub fn central_hessian(f: &dyn Fn(&[f64]) -> f64, x: &[f64], out: &mut [f64]) {
    let d = x.len();
    let h = fd_step(x);
    let f0 = f(x);
    let mut xp = x.to_vec();
    for i in 0..d {
        let xi = x[i];
        xp[i] = xi + h;
        let fp = f(&xp);
        xp[i] = xi - h;
        let fm = f(&xp);
        xp[i] = xi;
        out[i * d + i] = (fp - 2.0 * f0 + fm) / (h * h);
        for j in (i + 1)..d {
            let xj = x[j];
            xp[i] = xi + h;
            xp[j] = xj + h;
            let fpp = f(&xp);
            xp[j] = xj - h;
            let fpm = f(&xp);
            xp[i] = xi - h;
            let fmm = f(&xp);
            xp[j] = xj + h;
            let fmp = f(&xp);
            xp[i] = xi;
            xp[j] = xj;
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
            out[i * d + j] = v;
            out[j * d + i] = v;
        }
    }
}

/// Eigenvalues of a symmetric matrix given in row-major order.
/// The input is symmetrised first; asymmetry beyond 1e-8 relative is a bug
/// in the caller, checked in debug builds only.
pub fn symmetric_eigenvalues(mat: &[f64], d: usize) -> Vec<f64> {
    debug_assert_eq!(mat.len(), d * d);
    let mut m = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            m[(i, j)] = 0.5 * (mat[i * d + j] + mat[j * d + i]);
        }
    }
    m.symmetric_eigenvalues().iter().copied().collect()
}

/// log(det(M)) for a symmetric positive definite matrix (row-major).
/// Returns `None` when the matrix is not positive definite.
pub fn sym_log_det(mat: &[f64], d: usize) -> Option<f64> {
    let eigs = symmetric_eigenvalues(mat, d);
    let mut acc = 0.0;
    for e in eigs {
        if e <= 0.0 {
            return None;
        }
        acc += e.ln();
    }
    Some(acc)
}

/// Sample mean and a 99% confidence half-width from a stream of values,
/// accumulated in one pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanAccumulator {
    n: u64,
    mean: f64,
    m2: f64,
    nonfinite: u64,
}

impl MeanAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        if !x.is_finite() {
            self.nonfinite += 1;
            return;
        }
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn nonfinite_count(&self) -> u64 {
        self.nonfinite
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            return f64::NAN;
        }
        self.m2 / (self.n - 1) as f64
    }

    /// Normal-approximation 99% half-width (z = 2.5758).
    pub fn ci99_half_width(&self) -> f64 {
        if self.n < 2 {
            return f64::INFINITY;
        }
        2.5758293035489004 * (self.variance() / self.n as f64).sqrt()
    }
}

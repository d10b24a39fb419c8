//! Experiment configuration: JSON schema, validation with field-path error
//! messages, and builders turning a config into runnable objects.
//!
//! A config names a model, a scheme, a step/weight schedule, the tracked
//! functionals, the energy-function block for stability checks, run
//! parameters, an optional oracle to compare against, and tolerances. The
//! functional registry understands
//!
//! * `m<k>`: `x[0]^k` for `k` in 1..=8 (e.g. `m2`),
//! * `box:<lo>:<hi>`: indicator of `lo <= x[0] <= hi`,
//! * `occ:<z>`: indicator of the regime being `z` (switching models).
//!
//! `one` (total mass), the tail-weight functional `tilde_v`, per-regime
//! occupations and the diagnostic `ew_*` columns are registered by the
//! experiment driver itself and must not appear here.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lyapunov::{LyapunovSpec, SpecShape};
use crate::measures::Functional;
use crate::models::{ou, quadratic_vol_1d, switching_ou, GeneratorMatrix, Innovations, Model};
use crate::schedules::{make_power_schedule, StepSchedule, WeightSpec};
use crate::schemes::SchemeKind;

fn default_dim() -> usize {
    1
}

fn default_replicas() -> u64 {
    1
}

fn default_capacity() -> usize {
    crate::measures::DEFAULT_RESERVOIR_CAPACITY
}

fn default_epsilon0() -> f64 {
    1e-3
}

fn default_rho() -> f64 {
    2.0
}

fn default_eps_exponent() -> f64 {
    1.0
}

fn default_horizon() -> u64 {
    10_000
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    /// `dX = -a X dt + sigma dW` on `R^d`.
    Ou {
        a: f64,
        sigma: f64,
        #[serde(rename = "d", default = "default_dim")]
        dim: usize,
    },
    /// `dX = -a X dt + sqrt(sigma0^2 + c X^2) dW`, scalar.
    #[serde(rename = "milstein1d")]
    QuadraticVol { a: f64, sigma0: f64, c: f64 },
    /// Regime-switching linear model with generator `Q`.
    SwitchingOu {
        a: Vec<f64>,
        sigma: Vec<f64>,
        #[serde(rename = "Q")]
        q: Vec<Vec<f64>>,
        #[serde(rename = "d", default = "default_dim")]
        dim: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeConfig {
    Euler,
    Milstein,
    SwitchingEuler,
}

impl SchemeConfig {
    pub fn kind(self) -> SchemeKind {
        match self {
            SchemeConfig::Euler => SchemeKind::Euler,
            SchemeConfig::Milstein => SchemeKind::Milstein,
            SchemeConfig::SwitchingEuler => SchemeKind::SwitchingEuler,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum WeightConfig {
    /// `eta_n = gamma_n`.
    Gamma,
    /// `eta_n = n^{-kappa}`.
    Power { kappa: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// `gamma_n = gamma1 * n^{-theta}`.
    Power,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub gamma1: f64,
    pub theta: f64,
    pub weights: WeightConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovConfig {
    /// Energy choice; only `quadratic` (`V = 1 + |x|^2`) is built in.
    pub v: String,
    pub p: f64,
    pub a: f64,
    #[serde(default)]
    pub lambda: f64,
    pub s: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Coefficient-growth constant to verify, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub growth_c: Option<f64>,
    #[serde(default = "default_epsilon0")]
    pub epsilon0: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub n_steps: u64,
    pub seed: u64,
    #[serde(default = "default_replicas")]
    pub replicas: u64,
    #[serde(default = "default_capacity")]
    pub reservoir_capacity: usize,
    /// Start state; zeros when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Start regime for switching models; 0 when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z0: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OracleConfig {
    #[default]
    None,
    /// Analytic normal from the model's own `a`, `sigma` (Ou model only).
    Ou,
    /// 1-d stationary-density quadrature from the model's coefficients.
    FokkerPlanck { x_lo: f64, x_hi: f64, m: usize },
    /// Regime-moment linear solve (SwitchingOu model only).
    Switching,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sw1Config {
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_eps_exponent")]
    pub eps_exponent: f64,
    #[serde(default = "default_horizon")]
    pub horizon: u64,
}

impl Default for Sw1Config {
    fn default() -> Self {
        Sw1Config {
            rho: default_rho(),
            eps_exponent: default_eps_exponent(),
            horizon: default_horizon(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecursiveControlConfig {
    pub gammas: Vec<f64>,
    pub mc_samples: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChecksConfig {
    /// When true, a failed check aborts the experiment instead of being
    /// recorded as a warning.
    #[serde(default)]
    pub required: bool,
    #[serde(default)]
    pub sw1: Sw1Config,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recursive_control: Option<RecursiveControlConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Absolute tolerance on first-moment agreement.
    pub m1: f64,
    /// Relative tolerance on second-moment agreement.
    pub m2_rel: f64,
    /// Absolute tolerance on the reservoir W1 distance.
    pub w1: f64,
    /// Absolute tolerance on per-regime occupation weights.
    pub occupation: f64,
    /// Terminal occupation residual, relative to the grid sup of the
    /// generator image.
    pub residual_rel: f64,
    /// Allowed relative excess of the tail-weight functional's last-decade
    /// maximum over its earlier maximum.
    pub tightness: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            m1: 0.05,
            m2_rel: 0.05,
            w1: 0.05,
            occupation: 0.03,
            residual_rel: 0.05,
            tightness: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub scheme: SchemeConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub functionals: Vec<String>,
    pub lyapunov: LyapunovConfig,
    pub run: RunConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub checks: ChecksConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    /// Whether diagnostic bump functions are placed by a pilot run and
    /// their generator images tracked. On by default; turn off for speed.
    #[serde(default = "default_true")]
    pub ew_diagnostics: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::config("<root>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.model {
            ModelConfig::Ou { a, sigma, dim } => {
                if !a.is_finite() {
                    return Err(Error::config("model.a", format!("must be finite, got {a}")));
                }
                if !sigma.is_finite() {
                    return Err(Error::config("model.sigma", format!("must be finite, got {sigma}")));
                }
                if *dim == 0 {
                    return Err(Error::config("model.dim", "must be >= 1"));
                }
            }
            ModelConfig::QuadraticVol { a, sigma0, c } => {
                if !a.is_finite() {
                    return Err(Error::config("model.a", format!("must be finite, got {a}")));
                }
                if !(*sigma0 > 0.0) {
                    return Err(Error::config("model.sigma0", format!("must be > 0, got {sigma0}")));
                }
                if !(*c >= 0.0) {
                    return Err(Error::config("model.c", format!("must be >= 0, got {c}")));
                }
            }
            ModelConfig::SwitchingOu { a, sigma, q, dim } => {
                if a.is_empty() || a.len() != sigma.len() || a.len() != q.len() {
                    return Err(Error::config(
                        "model.a",
                        "per-regime lists a, sigma and q must share one nonzero length",
                    ));
                }
                if *dim == 0 {
                    return Err(Error::config("model.dim", "must be >= 1"));
                }
            }
        }

        let model_is_switching = matches!(self.model, ModelConfig::SwitchingOu { .. });
        match self.scheme {
            SchemeConfig::Euler if model_is_switching => {
                return Err(Error::config("scheme", "euler drives diffusions; use switching-euler"));
            }
            SchemeConfig::Milstein => {
                if !matches!(self.model, ModelConfig::QuadraticVol { .. } | ModelConfig::Ou { dim: 1, .. }) {
                    return Err(Error::config(
                        "scheme",
                        "milstein needs a scalar model with a volatility derivative",
                    ));
                }
            }
            SchemeConfig::SwitchingEuler if !model_is_switching => {
                return Err(Error::config("scheme", "switching-euler needs a switching model"));
            }
            _ => {}
        }

        if !(self.schedule.gamma1 > 0.0) || !self.schedule.gamma1.is_finite() {
            return Err(Error::config(
                "schedule.gamma1",
                format!("must be finite and > 0, got {}", self.schedule.gamma1),
            ));
        }
        if !(self.schedule.theta > 0.0 && self.schedule.theta <= 1.0) {
            return Err(Error::config(
                "schedule.theta",
                format!("must lie in (0, 1], got {}", self.schedule.theta),
            ));
        }
        if let WeightConfig::Power { kappa } = self.schedule.weights {
            if !(0.0..=1.0).contains(&kappa) {
                return Err(Error::config(
                    "schedule.weights.kappa",
                    format!("must lie in [0, 1], got {kappa}"),
                ));
            }
        }

        if self.lyapunov.v != "quadratic" {
            return Err(Error::config(
                "lyapunov.v",
                format!("only `quadratic` is built in, got `{}`", self.lyapunov.v),
            ));
        }
        let shape = self.spec_shape();
        shape
            .validate()
            .map_err(|e| Error::config("lyapunov", e.to_string()))?;
        if self.lyapunov.lambda == 0.0 && self.lyapunov.p < 1.0 {
            return Err(Error::config("lyapunov.p", "power-form stability checks need p >= 1"));
        }
        if self.lyapunov.lambda > 0.0 {
            if !model_is_switching {
                return Err(Error::config(
                    "lyapunov.lambda",
                    "the exponential form is only checked for switching models",
                ));
            }
            if self.lyapunov.p > 1.0 {
                return Err(Error::config("lyapunov.p", "exponential-form checks need p in [0, 1]"));
            }
        }
        if !(self.lyapunov.alpha > 0.0) {
            return Err(Error::config(
                "lyapunov.alpha",
                format!("must be > 0, got {}", self.lyapunov.alpha),
            ));
        }
        if !self.lyapunov.beta.is_finite() {
            return Err(Error::config("lyapunov.beta", "must be finite"));
        }
        if !(self.lyapunov.epsilon0 > 0.0) {
            return Err(Error::config(
                "lyapunov.epsilon0",
                format!("must be > 0, got {}", self.lyapunov.epsilon0),
            ));
        }

        if self.run.n_steps == 0 {
            return Err(Error::config("run.n_steps", "must be >= 1"));
        }
        if self.run.replicas == 0 {
            return Err(Error::config("run.replicas", "must be >= 1"));
        }
        if self.run.reservoir_capacity == 0 {
            return Err(Error::config("run.reservoir_capacity", "must be >= 1"));
        }
        if let Some(x0) = &self.run.x0 {
            if x0.len() != self.dim() {
                return Err(Error::config(
                    "run.x0",
                    format!("has {} coordinates but the model is {}-dimensional", x0.len(), self.dim()),
                ));
            }
        }

        match &self.oracle {
            OracleConfig::Ou => {
                if !matches!(self.model, ModelConfig::Ou { .. }) {
                    return Err(Error::config("oracle", "the ou oracle needs the ou model"));
                }
            }
            OracleConfig::FokkerPlanck { x_lo, x_hi, m } => {
                if !(x_hi > x_lo) {
                    return Err(Error::config("oracle.x_hi", "window must satisfy x_lo < x_hi"));
                }
                if *m < 100 {
                    return Err(Error::config("oracle.m", "need at least 100 grid points"));
                }
                if self.dim() != 1 || model_is_switching {
                    return Err(Error::config("oracle", "fokker-planck applies to scalar diffusions"));
                }
            }
            OracleConfig::Switching => {
                if !model_is_switching {
                    return Err(Error::config("oracle", "the switching oracle needs the switching-ou model"));
                }
            }
            OracleConfig::None => {}
        }

        if !(self.checks.sw1.rho >= 1.0 && self.checks.sw1.rho <= 2.0) {
            return Err(Error::config(
                "checks.sw1.rho",
                format!("must lie in [1, 2], got {}", self.checks.sw1.rho),
            ));
        }
        if !(self.checks.sw1.eps_exponent > 0.0) {
            return Err(Error::config("checks.sw1.eps_exponent", "must be > 0"));
        }
        if self.checks.sw1.horizon < 100 {
            return Err(Error::config("checks.sw1.horizon", "must be >= 100"));
        }
        if let Some(rc) = &self.checks.recursive_control {
            if rc.gammas.is_empty() || rc.gammas.iter().any(|g| !(*g > 0.0) || *g > self.schedule.gamma1) {
                return Err(Error::config(
                    "checks.recursive_control.gammas",
                    "steps must lie in (0, gamma1]",
                ));
            }
            if rc.mc_samples < 10_000 {
                return Err(Error::config("checks.recursive_control.mc_samples", "must be >= 10^4"));
            }
        }

        let t = &self.tolerances;
        for (name, v) in [
            ("tolerances.m1", t.m1),
            ("tolerances.m2_rel", t.m2_rel),
            ("tolerances.w1", t.w1),
            ("tolerances.occupation", t.occupation),
            ("tolerances.residual_rel", t.residual_rel),
            ("tolerances.tightness", t.tightness),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(name, format!("must be finite and > 0, got {v}")));
            }
        }

        for name in &self.functionals {
            parse_functional(name, self.dim(), self.regimes())?;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match &self.model {
            ModelConfig::Ou { dim, .. } => *dim,
            ModelConfig::QuadraticVol { .. } => 1,
            ModelConfig::SwitchingOu { dim, .. } => *dim,
        }
    }

    pub fn regimes(&self) -> Option<usize> {
        match &self.model {
            ModelConfig::SwitchingOu { a, .. } => Some(a.len()),
            _ => None,
        }
    }

    pub fn build_model(&self) -> Result<Model> {
        match &self.model {
            ModelConfig::Ou { a, sigma, dim } => Ok(Model::Diffusion(ou(*a, *sigma, *dim)?)),
            ModelConfig::QuadraticVol { a, sigma0, c } => Ok(Model::Diffusion(quadratic_vol_1d(*a, *sigma0, *c)?)),
            ModelConfig::SwitchingOu { a, sigma, q, dim } => {
                let rates = GeneratorMatrix::new(q.clone())?;
                Ok(Model::Switching(switching_ou(a.clone(), sigma.clone(), rates, *dim)?))
            }
        }
    }

    pub fn build_schedule(&self) -> Result<StepSchedule> {
        let weights = match self.schedule.weights {
            WeightConfig::Gamma => WeightSpec::Step,
            WeightConfig::Power { kappa } => WeightSpec::Power { kappa },
        };
        make_power_schedule(self.schedule.gamma1, self.schedule.theta, weights)
    }

    pub fn spec_shape(&self) -> SpecShape {
        SpecShape {
            p: self.lyapunov.p,
            a: self.lyapunov.a,
            lambda: self.lyapunov.lambda,
            s: self.lyapunov.s,
            rho: self.lyapunov.rho,
        }
    }

    pub fn build_spec(&self) -> Result<LyapunovSpec> {
        LyapunovSpec::quadratic(self.spec_shape())
    }

    pub fn innovations(&self) -> Innovations {
        Innovations::gaussian(self.dim())
    }

    pub fn x0(&self) -> Vec<f64> {
        self.run.x0.clone().unwrap_or_else(|| vec![0.0; self.dim()])
    }

    pub fn z0(&self) -> Option<usize> {
        match self.regimes() {
            Some(_) => Some(self.run.z0.unwrap_or(0)),
            None => None,
        }
    }

    /// Named functionals from the config, in declaration order.
    pub fn build_functionals(&self) -> Result<Vec<(String, Functional)>> {
        self.functionals
            .iter()
            .map(|name| Ok((name.clone(), parse_functional(name, self.dim(), self.regimes())?)))
            .collect()
    }
}

/// Parses one registry name; see the module docs for the grammar.
pub fn parse_functional(name: &str, dim: usize, regimes: Option<usize>) -> Result<Functional> {
    if let Some(k) = name.strip_prefix('m').and_then(|s| s.parse::<u32>().ok()) {
        if !(1..=8).contains(&k) {
            return Err(Error::config("functionals", format!("moment order in `{name}` must be 1..=8")));
        }
        return Ok(Arc::new(move |x: &[f64], _| x[0].powi(k as i32)));
    }
    if let Some(rest) = name.strip_prefix("box:") {
        let parts: Vec<&str> = rest.split(':').collect();
        let parse = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite());
        if let [lo, hi] = parts[..] {
            if let (Some(lo), Some(hi)) = (parse(lo), parse(hi)) {
                if lo <= hi {
                    return Ok(Arc::new(move |x: &[f64], _| if (lo..=hi).contains(&x[0]) { 1.0 } else { 0.0 }));
                }
            }
        }
        return Err(Error::config("functionals", format!("`{name}` is not box:<lo>:<hi> with lo <= hi")));
    }
    if let Some(z) = name.strip_prefix("occ:").and_then(|s| s.parse::<usize>().ok()) {
        let m = regimes.ok_or_else(|| Error::config("functionals", format!("`{name}` needs a switching model")))?;
        if z >= m {
            return Err(Error::config("functionals", format!("regime {z} out of range (model has {m})")));
        }
        return Ok(Arc::new(move |_: &[f64], regime| if regime == Some(z) { 1.0 } else { 0.0 }));
    }
    let _ = dim;
    Err(Error::config("functionals", format!("unknown functional `{name}`")))
}

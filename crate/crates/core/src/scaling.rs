//! Rank-dependent scaling rules `γ_r = α · r^(−ν)`.
//!
//! Each rule is a [`ScalingStrategy`] registered under a name in a
//! [`ScalingRegistry`]. Configs and the command line refer to rules by
//! [`RuleSpec`] (`name`, `alpha`, optional `nu`), which the registry resolves
//! into a [`ScalingRule`].
//!
//! | name     | aliases                | γ_r        |
//! |----------|------------------------|------------|
//! | `lora`   | `reciprocal-rank`      | α / r      |
//! | `rslora` | `reciprocal-sqrt-rank` | α / √r     |
//! | `power`  |                        | α · r^(−ν) |
//! | `none`   | `constant`             | α          |

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait ScalingStrategy: fmt::Debug + Send + Sync {
    /// Canonical registry name, written to reports.
    fn name(&self) -> &'static str;

    /// The exponent ν in `r^(−ν)`.
    fn exponent(&self) -> f64;

    /// `r^(−ν)`; `rank` is at least 1.
    fn rank_factor(&self, rank: usize) -> f64 {
        power_factor(rank, self.exponent())
    }
}

/// `r^(−ν)` with exact paths for the common exponents, so `power(1)` and
/// `lora` (or `power(0.5)` and `rslora`) produce bit-identical γ.
fn power_factor(rank: usize, nu: f64) -> f64 {
    let r = rank as f64;
    if nu == 0.0 {
        1.0
    } else if nu == 1.0 {
        1.0 / r
    } else if nu == 0.5 {
        1.0 / r.sqrt()
    } else if nu == 2.0 {
        1.0 / (r * r)
    } else {
        libm::pow(r, -nu)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ReciprocalRank;

impl ScalingStrategy for ReciprocalRank {
    fn name(&self) -> &'static str {
        "lora"
    }
    fn exponent(&self) -> f64 {
        1.0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ReciprocalSqrtRank;

impl ScalingStrategy for ReciprocalSqrtRank {
    fn name(&self) -> &'static str {
        "rslora"
    }
    fn exponent(&self) -> f64 {
        0.5
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Power {
    nu: f64,
}

impl Power {
    pub fn new(nu: f64) -> Result<Self> {
        if !nu.is_finite() || nu < 0.0 {
            return Err(Error::domain(format!(
                "power exponent must be finite and >= 0, got {nu}"
            )));
        }
        Ok(Self { nu })
    }
}

impl ScalingStrategy for Power {
    fn name(&self) -> &'static str {
        "power"
    }
    fn exponent(&self) -> f64 {
        self.nu
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Constant;

impl ScalingStrategy for Constant {
    fn name(&self) -> &'static str {
        "none"
    }
    fn exponent(&self) -> f64 {
        0.0
    }
}

/// Serializable reference to a registered rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    pub name: String,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
}

impl RuleSpec {
    pub fn new(name: &str, alpha: f64) -> Self {
        Self {
            name: name.to_string(),
            alpha,
            nu: None,
        }
    }

    pub fn power(nu: f64, alpha: f64) -> Self {
        Self {
            name: "power".to_string(),
            alpha,
            nu: Some(nu),
        }
    }

    pub fn resolve(&self) -> Result<ScalingRule> {
        ScalingRegistry::global().resolve(self)
    }
}

/// A resolved scaling rule: strategy plus `α`.
#[derive(Clone)]
pub struct ScalingRule {
    strategy: Arc<dyn ScalingStrategy>,
    alpha: f64,
}

impl fmt::Debug for ScalingRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(nu={}, alpha={})", self.name(), self.exponent(), self.alpha)
    }
}

impl PartialEq for ScalingRule {
    fn eq(&self, other: &Self) -> bool {
        self.name() == other.name() && self.exponent() == other.exponent() && self.alpha == other.alpha
    }
}

impl ScalingRule {
    pub fn new(strategy: Arc<dyn ScalingStrategy>, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::domain(format!("alpha must be positive and finite, got {alpha}")));
        }
        Ok(Self { strategy, alpha })
    }

    pub fn lora(alpha: f64) -> Result<Self> {
        Self::new(Arc::new(ReciprocalRank), alpha)
    }

    pub fn rslora(alpha: f64) -> Result<Self> {
        Self::new(Arc::new(ReciprocalSqrtRank), alpha)
    }

    pub fn power(nu: f64, alpha: f64) -> Result<Self> {
        Self::new(Arc::new(Power::new(nu)?), alpha)
    }

    pub fn constant(alpha: f64) -> Result<Self> {
        Self::new(Arc::new(Constant), alpha)
    }

    pub fn name(&self) -> &'static str {
        self.strategy.name()
    }

    pub fn exponent(&self) -> f64 {
        self.strategy.exponent()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Same strategy with a different `α`.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        Self::new(Arc::clone(&self.strategy), alpha)
    }

    pub fn gamma(&self, rank: usize) -> Result<f64> {
        if rank == 0 {
            return Err(Error::domain("rank must be >= 1"));
        }
        Ok(self.alpha * self.strategy.rank_factor(rank))
    }

    pub fn spec(&self) -> RuleSpec {
        RuleSpec {
            name: self.name().to_string(),
            alpha: self.alpha,
            nu: (self.name() == "power").then(|| self.exponent()),
        }
    }
}

/// `γ_r` for `rule` at rank `r`.
pub fn gamma(rule: &ScalingRule, r: usize) -> Result<f64> {
    rule.gamma(r)
}

pub type StrategyCtor = fn(Option<f64>) -> Result<Arc<dyn ScalingStrategy>>;

#[derive(Default)]
pub struct ScalingRegistry {
    ctors: BTreeMap<String, StrategyCtor>,
}

impl fmt::Debug for ScalingRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.ctors.keys()).finish()
    }
}

fn no_nu(name: &str, nu: Option<f64>) -> Result<()> {
    match nu {
        Some(_) => Err(Error::domain(format!("rule `{name}` takes no exponent"))),
        None => Ok(()),
    }
}

impl ScalingRegistry {
    pub fn builtin() -> Self {
        let mut reg = Self::default();
        let lora: StrategyCtor = |nu| no_nu("lora", nu).map(|_| Arc::new(ReciprocalRank) as _);
        let rslora: StrategyCtor = |nu| no_nu("rslora", nu).map(|_| Arc::new(ReciprocalSqrtRank) as _);
        let constant: StrategyCtor = |nu| no_nu("none", nu).map(|_| Arc::new(Constant) as _);
        reg.register("lora", lora);
        reg.register("reciprocal-rank", lora);
        reg.register("rslora", rslora);
        reg.register("reciprocal-sqrt-rank", rslora);
        reg.register("none", constant);
        reg.register("constant", constant);
        reg.register("power", |nu| {
            let nu = nu.ok_or_else(|| Error::domain("rule `power` needs an exponent `nu`"))?;
            Ok(Arc::new(Power::new(nu)?))
        });
        reg
    }

    pub fn global() -> &'static ScalingRegistry {
        static GLOBAL: OnceLock<ScalingRegistry> = OnceLock::new();
        GLOBAL.get_or_init(ScalingRegistry::builtin)
    }

    pub fn register(&mut self, name: &str, ctor: StrategyCtor) {
        self.ctors.insert(name.to_string(), ctor);
    }

    pub fn names(&self) -> Vec<&str> {
        self.ctors.keys().map(String::as_str).collect()
    }

    pub fn resolve(&self, spec: &RuleSpec) -> Result<ScalingRule> {
        let ctor = self.ctors.get(&spec.name).ok_or_else(|| Error::Unknown {
            kind: "scaling rule",
            name: spec.name.clone(),
            known: self.names().join(", "),
        })?;
        ScalingRule::new(ctor(spec.nu)?, spec.alpha)
    }
}

//! SGD and AdamW on adapter parameters, behind a common [`Optimizer`] trait.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: String,
    pub eta: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl OptimizerSpec {
    pub fn sgd(eta: f64) -> Self {
        Self {
            kind: "sgd".into(),
            eta,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }

    pub fn adamw(eta: f64) -> Self {
        Self {
            kind: "adamw".into(),
            ..Self::sgd(eta)
        }
    }

    pub fn with_eta(&self, eta: f64) -> Self {
        Self { eta, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::config(
                "optimizer.eta",
                format!("must be finite and >= 0, got {}", self.eta),
            ));
        }
        for (key, v) in [("optimizer.beta1", self.beta1), ("optimizer.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(key, format!("must lie in [0, 1), got {v}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optimizer.eps", format!("must be > 0, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::config(
                "optimizer.weight_decay",
                format!("must be finite and >= 0, got {}", self.weight_decay),
            ));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn Optimizer>> {
        OptimizerRegistry::global().build(self)
    }
}

pub trait Optimizer: Debug + Send {
    fn name(&self) -> &'static str;
    fn eta(&self) -> f64;
    /// Number of completed steps.
    fn steps(&self) -> u64;
    fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()>;
}

fn check_shapes(params: &[&mut Matrix], grads: &[Matrix]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dims("optimizer step", (params.len(), 1), (grads.len(), 1)));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::dims("optimizer step", p.shape(), g.shape()));
        }
    }
    Ok(())
}

/// `p ← p − η·g` for every pair.
pub fn sgd_step(params: &mut [&mut Matrix], grads: &[Matrix], eta: f64) -> Result<()> {
    check_shapes(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        p.axpy(-eta, g)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Sgd {
    eta: f64,
    steps: u64,
}

impl Sgd {
    pub fn new(eta: f64) -> Self {
        Self { eta, steps: 0 }
    }
}

impl Optimizer for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn eta(&self) -> f64 {
        self.eta
    }

    fn steps(&self) -> u64 {
        self.steps
    }

    fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        sgd_step(params, grads, self.eta)?;
        self.steps += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWHyper {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// AdamW moment buffers. Must be initialized for a parameter list before stepping.
#[derive(Debug, Clone)]
pub struct AdamWState {
    hyper: AdamWHyper,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: u64,
    // β^t kept as running products so the bias correction is bit-stable.
    beta1_t: f64,
    beta2_t: f64,
    initialized: bool,
}

impl AdamWState {
    pub fn new(hyper: AdamWHyper) -> Self {
        Self {
            hyper,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
            beta1_t: 1.0,
            beta2_t: 1.0,
            initialized: false,
        }
    }

    pub fn init(&mut self, shapes: &[(usize, usize)]) {
        self.m = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        self.v = self.m.clone();
        self.step = 0;
        self.beta1_t = 1.0;
        self.beta2_t = 1.0;
        self.initialized = true;
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn hyper(&self) -> &AdamWHyper {
        &self.hyper
    }
}

/// Bias-corrected AdamW update with decoupled weight decay.
pub fn adamw_step(state: &mut AdamWState, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
    if !state.initialized {
        return Err(Error::InvalidState("adamw state used before initialization".into()));
    }
    check_shapes(params, grads)?;
    if params.len() != state.m.len() || params.iter().zip(&state.m).any(|(p, m)| p.shape() != m.shape()) {
        return Err(Error::InvalidState(
            "adamw state was initialized for different parameter shapes".into(),
        ));
    }
    let h = state.hyper;
    state.step += 1;
    state.beta1_t *= h.beta1;
    state.beta2_t *= h.beta2;
    let c1 = 1.0 - state.beta1_t;
    let c2 = 1.0 - state.beta2_t;
    let decay = 1.0 - h.eta * h.weight_decay;
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let pd = p.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = h.beta1 * md[i] + (1.0 - h.beta1) * gi;
            vd[i] = h.beta2 * vd[i] + (1.0 - h.beta2) * gi * gi;
            let m_hat = md[i] / c1;
            let v_hat = vd[i] / c2;
            pd[i] = pd[i] * decay - h.eta * m_hat / (v_hat.sqrt() + h.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AdamW {
    state: AdamWState,
}

impl AdamW {
    pub fn new(hyper: AdamWHyper) -> Self {
        Self {
            state: AdamWState::new(hyper),
        }
    }

    pub fn state(&self) -> &AdamWState {
        &self.state
    }
}

impl Optimizer for AdamW {
    fn name(&self) -> &'static str {
        "adamw"
    }

    fn eta(&self) -> f64 {
        self.state.hyper.eta
    }

    fn steps(&self) -> u64 {
        self.state.step
    }

    fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if !self.state.initialized {
            let shapes: Vec<_> = params.iter().map(|p| p.shape()).collect();
            self.state.init(&shapes);
        }
        adamw_step(&mut self.state, params, grads)
    }
}

pub type OptimizerCtor = fn(&OptimizerSpec) -> Box<dyn Optimizer>;

#[derive(Debug, Clone)]
pub struct OptimizerRegistry {
    ctors: BTreeMap<String, OptimizerCtor>,
}

impl OptimizerRegistry {
    pub fn builtin() -> Self {
        let mut reg = Self { ctors: BTreeMap::new() };
        reg.register("sgd", |s| Box::new(Sgd::new(s.eta)));
        reg.register("adamw", |s| {
            Box::new(AdamW::new(AdamWHyper {
                eta: s.eta,
                beta1: s.beta1,
                beta2: s.beta2,
                eps: s.eps,
                weight_decay: s.weight_decay,
            }))
        });
        reg
    }

    pub fn global() -> &'static OptimizerRegistry {
        static REG: OnceLock<OptimizerRegistry> = OnceLock::new();
        REG.get_or_init(Self::builtin)
    }

    pub fn register(&mut self, name: &str, ctor: OptimizerCtor) {
        self.ctors.insert(name.to_string(), ctor);
    }

    pub fn names(&self) -> Vec<&str> {
        self.ctors.keys().map(String::as_str).collect()
    }

    pub fn build(&self, spec: &OptimizerSpec) -> Result<Box<dyn Optimizer>> {
        spec.validate()?;
        let ctor = self.ctors.get(&spec.kind).ok_or_else(|| Error::Unknown {
            kind: "optimizer",
            name: spec.kind.clone(),
            known: self.names().join(", "),
        })?;
        Ok(ctor(spec))
    }
}

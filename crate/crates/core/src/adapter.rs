//! Low-rank adapters `γ_r · B · A` on frozen linear layers.
//!
//! An adapter maps `x ∈ R^{d1}` to `γ_r · B (A x)` with `A ∈ R^{r×d1}` and
//! `B ∈ R^{d2×r}`. `B` starts at zero and `A` is iid normal with variance
//! `sigma_a`, which is fixed per experiment and never depends on `r`. The
//! product `B·A` is never formed during training; [`merge`] folds it into the
//! frozen weight once at the end.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gaussian_fill, Matrix, RngStream};
use crate::scaling::{RuleSpec, ScalingRule};

pub use crate::scaling::gamma;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScaleMode {
    #[default]
    Standard,
    /// `A` is additionally multiplied by `1/√r` at initialization; γ still follows the rule.
    InitOnlySqrt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterConfig {
    pub rank: usize,
    pub rule: ScalingRule,
    /// Variance (not standard deviation) of the entries of `A`.
    pub sigma_a: f64,
    pub init_scale: InitScaleMode,
}

impl AdapterConfig {
    pub fn new(rank: usize, rule: ScalingRule, sigma_a: f64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::domain("adapter rank must be >= 1"));
        }
        if !(sigma_a >= 0.0) || !sigma_a.is_finite() {
            return Err(Error::domain(format!("sigma_a must be finite and >= 0, got {sigma_a}")));
        }
        Ok(Self {
            rank,
            rule,
            sigma_a,
            init_scale: InitScaleMode::Standard,
        })
    }

    pub fn with_init_scale(mut self, mode: InitScaleMode) -> Self {
        self.init_scale = mode;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub grad_a: Matrix,
    pub grad_b: Matrix,
    pub grad_x: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    a: Matrix,
    b: Matrix,
    gamma: f64,
    config: AdapterConfig,
}

impl Adapter {
    /// Builds an adapter from explicit factors; γ is computed from the config.
    pub fn from_parts(config: AdapterConfig, a: Matrix, b: Matrix) -> Result<Self> {
        if a.rows() != config.rank || b.cols() != config.rank {
            return Err(Error::dims("adapter factors", a.shape(), b.shape()));
        }
        let gamma = config.rule.gamma(config.rank)?;
        Ok(Self { a, b, gamma, config })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn rank(&self) -> usize {
        self.config.rank
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    /// Mutable `(A, B)` for optimizer updates. Shapes must be preserved.
    pub fn params_mut(&mut self) -> (&mut Matrix, &mut Matrix) {
        (&mut self.a, &mut self.b)
    }

    /// Returns `(γ·B·(A·x), A·x)`; the hidden product is reused by backward.
    pub(crate) fn forward_with_hidden(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        if x.rows() != self.d_in() {
            return Err(Error::dims("adapter_forward", self.a.shape(), x.shape()));
        }
        let hidden = self.a.matmul(x)?;
        let mut out = self.b.matmul(&hidden)?;
        out.scale_in_place(self.gamma);
        Ok((out, hidden))
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_with_hidden(x).map(|(out, _)| out)
    }

    pub(crate) fn backward_with_hidden(&self, x: &Matrix, hidden: &Matrix, v: &Matrix) -> Result<AdapterGrads> {
        if v.rows() != self.d_out() || v.cols() != x.cols() {
            return Err(Error::dims("adapter_backward", self.b.shape(), v.shape()));
        }
        let g = self.gamma;
        // grad_B = γ v (A x)ᵀ
        let mut grad_b = v.matmul_t(hidden)?;
        grad_b.scale_in_place(g);
        // Bᵀ v is shared by grad_A = γ (Bᵀ v) xᵀ and grad_x = γ Aᵀ (Bᵀ v).
        let btv = self.b.t_matmul(v)?;
        let mut grad_a = btv.matmul_t(x)?;
        grad_a.scale_in_place(g);
        let mut grad_x = self.a.t_matmul(&btv)?;
        grad_x.scale_in_place(g);
        Ok(AdapterGrads { grad_a, grad_b, grad_x })
    }

    pub fn backward(&self, x: &Matrix, v: &Matrix) -> Result<AdapterGrads> {
        if x.rows() != self.d_in() {
            return Err(Error::dims("adapter_backward", self.a.shape(), x.shape()));
        }
        let hidden = self.a.matmul(x)?;
        self.backward_with_hidden(x, &hidden, v)
    }

    /// Dense `γ·B·A`.
    pub fn delta(&self) -> Matrix {
        let mut d = self
            .b
            .matmul(&self.a)
            .expect("adapter factor shapes are checked at construction");
        d.scale_in_place(self.gamma);
        d
    }

    pub fn to_checkpoint(&self) -> AdapterCheckpoint {
        AdapterCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            rank: self.config.rank,
            rule: self.config.rule.spec(),
            sigma_a: self.config.sigma_a,
            init_scale: self.config.init_scale,
            gamma: self.gamma,
            a: self.a.clone(),
            b: self.b.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: AdapterCheckpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse(format!("unsupported checkpoint format `{}`", ckpt.format)));
        }
        let config =
            AdapterConfig::new(ckpt.rank, ckpt.rule.resolve()?, ckpt.sigma_a)?.with_init_scale(ckpt.init_scale);
        let adapter = Adapter::from_parts(config, ckpt.a, ckpt.b)?;
        if adapter.gamma.to_bits() != ckpt.gamma.to_bits() {
            return Err(Error::InvalidState(format!(
                "checkpoint gamma {} does not match rule value {}",
                ckpt.gamma, adapter.gamma
            )));
        }
        Ok(adapter)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_checkpoint()).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: AdapterCheckpoint = serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_checkpoint(ckpt)
    }
}

pub const CHECKPOINT_FORMAT: &str = "rankstab-adapter/1";

/// JSON checkpoint: config, exact γ and both factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterCheckpoint {
    pub format: String,
    pub rank: usize,
    pub rule: RuleSpec,
    pub sigma_a: f64,
    pub init_scale: InitScaleMode,
    pub gamma: f64,
    pub a: Matrix,
    pub b: Matrix,
}

pub fn init_adapter(config: AdapterConfig, d1: usize, d2: usize, rng: &mut RngStream) -> Result<Adapter> {
    if d1 == 0 || d2 == 0 {
        return Err(Error::domain(format!(
            "adapter dimensions must be positive, got d1={d1} d2={d2}"
        )));
    }
    let mut a = gaussian_fill(config.rank, d1, 0.0, config.sigma_a, rng)?;
    if config.init_scale == InitScaleMode::InitOnlySqrt {
        a.scale_in_place(1.0 / (config.rank as f64).sqrt());
    }
    let b = Matrix::zeros(d2, config.rank);
    Adapter::from_parts(config, a, b)
}

pub fn adapter_forward(ad: &Adapter, x: &Matrix) -> Result<Matrix> {
    ad.forward(x)
}

pub fn adapter_backward(ad: &Adapter, x: &Matrix, v: &Matrix) -> Result<AdapterGrads> {
    ad.backward(x, v)
}

/// A frozen `x ↦ W x + b`, optionally augmented with an adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenLinear {
    w: Matrix,
    bias: Matrix,
    adapter: Option<Adapter>,
}

impl FrozenLinear {
    pub fn new(w: Matrix, bias: Matrix) -> Result<Self> {
        if bias.cols() != 1 || bias.rows() != w.rows() {
            return Err(Error::dims("frozen_linear", w.shape(), bias.shape()));
        }
        Ok(Self { w, bias, adapter: None })
    }

    pub fn with_adapter(mut self, adapter: Adapter) -> Result<Self> {
        self.set_adapter(adapter)?;
        Ok(self)
    }

    pub fn set_adapter(&mut self, adapter: Adapter) -> Result<()> {
        if adapter.d_in() != self.d_in() || adapter.d_out() != self.d_out() {
            return Err(Error::dims(
                "attach adapter",
                self.w.shape(),
                (adapter.d_out(), adapter.d_in()),
            ));
        }
        self.adapter = Some(adapter);
        Ok(())
    }

    pub fn w(&self) -> &Matrix {
        &self.w
    }

    pub fn bias(&self) -> &Matrix {
        &self.bias
    }

    pub fn adapter(&self) -> Option<&Adapter> {
        self.adapter.as_ref()
    }

    pub fn adapter_mut(&mut self) -> Option<&mut Adapter> {
        self.adapter.as_mut()
    }

    pub fn d_in(&self) -> usize {
        self.w.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w.rows()
    }

    /// `W x + b` without the adapter term.
    pub fn base_forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.d_in() {
            return Err(Error::dims("augmented_forward", self.w.shape(), x.shape()));
        }
        let mut out = self.w.matmul(x)?;
        out.add_column_broadcast(&self.bias)?;
        Ok(out)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = self.base_forward(x)?;
        if let Some(ad) = &self.adapter {
            out.axpy(1.0, &ad.forward(x)?)?;
        }
        Ok(out)
    }
}

pub fn augmented_forward(layer: &FrozenLinear, x: &Matrix) -> Result<Matrix> {
    layer.forward(x)
}

/// Dense `W + γ·B·A`; the layer itself is left untouched.
pub fn merge(layer: &FrozenLinear) -> Result<Matrix> {
    let ad = layer
        .adapter()
        .ok_or_else(|| Error::InvalidState("merge requires an attached adapter".into()))?;
    layer.w.add(&ad.delta())
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let text = serde_json::to_string(m).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))
}

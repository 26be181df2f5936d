//! Checks of rank-scaling behaviour for a single adapter `f(x) = γ B A x`.
//!
//! Contains the first-order trajectory oracle, an exact SGD simulator to
//! compare it against, Monte-Carlo estimators of output moments and gradient
//! norms across ranks, and log-log slope fitting.
//!
//! Monte-Carlo cells use common random numbers: seed `s` fixes the inputs and
//! the rows of `A` for every rank, and the rank-`r` factor is the first `r`
//! rows of the same draw. Differences between ranks therefore come from `r`
//! alone rather than from fresh noise.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, AdapterConfig, InitScaleMode};
use crate::error::{Error, Result};
use crate::net::{moment, Nonlinearity, Placement, ToyModel};
use crate::numerics::{gaussian_fill, stream_id, Matrix, RngStream};
use crate::optim::sgd_step;
use crate::scaling::ScalingRule;

#[derive(Debug, Clone)]
pub struct TrajectoryOracleInput {
    pub config: AdapterConfig,
    pub d1: usize,
    pub d2: usize,
    pub eta: f64,
    pub inputs: Vec<Matrix>,
    pub probe_grads: Vec<Matrix>,
}

impl TrajectoryOracleInput {
    pub fn new(
        config: AdapterConfig,
        d1: usize,
        d2: usize,
        eta: f64,
        inputs: Vec<Matrix>,
        probe_grads: Vec<Matrix>,
    ) -> Result<Self> {
        if inputs.len() != probe_grads.len() {
            return Err(Error::domain(format!(
                "{} inputs but {} probe gradients",
                inputs.len(),
                probe_grads.len()
            )));
        }
        for x in &inputs {
            if x.shape() != (d1, 1) {
                return Err(Error::dims("trajectory input", (d1, 1), x.shape()));
            }
        }
        for v in &probe_grads {
            if v.shape() != (d2, 1) {
                return Err(Error::dims("trajectory probe gradient", (d2, 1), v.shape()));
            }
        }
        Ok(Self {
            config,
            d1,
            d2,
            eta,
            inputs,
            probe_grads,
        })
    }

    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    fn check_a0(&self, a0: &Matrix) -> Result<()> {
        if a0.shape() != (self.config.rank, self.d1) {
            return Err(Error::dims("trajectory A0", (self.config.rank, self.d1), a0.shape()));
        }
        Ok(())
    }
}

/// First-order prediction `B_n ≈ −ηγ (Σ v_k x_kᵀ) A₀ᵀ`, `A_n ≈ A₀`.
pub fn analytic_first_order_trajectory(inp: &TrajectoryOracleInput, a0: &Matrix) -> Result<(Matrix, Matrix)> {
    inp.check_a0(a0)?;
    let gamma = inp.config.rule.gamma(inp.config.rank)?;
    let mut sum_vx = Matrix::zeros(inp.d2, inp.d1);
    for (x, v) in inp.inputs.iter().zip(&inp.probe_grads) {
        sum_vx.axpy(1.0, &v.matmul_t(x)?)?;
    }
    let mut pred_b = sum_vx.matmul_t(a0)?;
    pred_b.scale_in_place(-inp.eta * gamma);
    Ok((pred_b, a0.clone()))
}

/// Exact SGD on `A, B` from `(A₀, 0)` with the given output gradients. Returns `(B_n, A_n)`.
pub fn simulate_sgd_trajectory(inp: &TrajectoryOracleInput, a0: &Matrix) -> Result<(Matrix, Matrix)> {
    inp.check_a0(a0)?;
    let mut ad = Adapter::from_parts(inp.config.clone(), a0.clone(), Matrix::zeros(inp.d2, inp.config.rank))?;
    for (x, v) in inp.inputs.iter().zip(&inp.probe_grads) {
        let g = ad.backward(x, v)?;
        let (a, b) = ad.params_mut();
        sgd_step(&mut [a, b], &[g.grad_a, g.grad_b], inp.eta)?;
    }
    Ok((ad.b().clone(), ad.a().clone()))
}

/// A random linear-probe problem: `x_k, v_k ~ N(0, I)` and `A₀` from the
/// adapter initialization. None of the draws depend on the rule or `α`.
pub fn random_trajectory(
    config: AdapterConfig,
    d1: usize,
    d2: usize,
    eta: f64,
    steps: usize,
    rng: &mut RngStream,
) -> Result<(TrajectoryOracleInput, Matrix)> {
    let a0 = crate::adapter::init_adapter(config.clone(), d1, d2, rng)?.a().clone();
    let mut inputs = Vec::with_capacity(steps);
    let mut grads = Vec::with_capacity(steps);
    for _ in 0..steps {
        inputs.push(gaussian_fill(d1, 1, 0.0, 1.0, rng)?);
        grads.push(gaussian_fill(d2, 1, 0.0, 1.0, rng)?);
    }
    Ok((TrajectoryOracleInput::new(config, d1, d2, eta, inputs, grads)?, a0))
}

/// The first `n` steps of `inp`.
pub fn truncate_trajectory(inp: &TrajectoryOracleInput, n: usize) -> TrajectoryOracleInput {
    let n = n.min(inp.steps());
    TrajectoryOracleInput {
        inputs: inp.inputs[..n].to_vec(),
        probe_grads: inp.probe_grads[..n].to_vec(),
        ..inp.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryResidual {
    /// `‖B_n − predB‖_F`
    pub b_abs: f64,
    /// `‖B_n − predB‖_F / ‖predB‖_F`
    pub b_rel: f64,
    /// `‖A_n − A₀‖_F`
    pub a_abs: f64,
}

pub fn trajectory_residual(inp: &TrajectoryOracleInput, a0: &Matrix) -> Result<TrajectoryResidual> {
    let (pred_b, pred_a) = analytic_first_order_trajectory(inp, a0)?;
    let (b, a) = simulate_sgd_trajectory(inp, a0)?;
    let b_abs = b.sub(&pred_b)?.frobenius_norm();
    let pred_norm = pred_b.frobenius_norm();
    Ok(TrajectoryResidual {
        b_abs,
        b_rel: if pred_norm > 0.0 { b_abs / pred_norm } else { 0.0 },
        a_abs: a.sub(&pred_a)?.frobenius_norm(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatisticKind {
    OutputMoment,
    InputGradSqnorm,
    #[serde(rename = "init-gradB-norm")]
    InitGradBNorm,
}

impl StatisticKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StatisticKind::OutputMoment => "output-moment",
            StatisticKind::InputGradSqnorm => "input-grad-sqnorm",
            StatisticKind::InitGradBNorm => "init-gradB-norm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "output-moment" => Ok(StatisticKind::OutputMoment),
            "input-grad-sqnorm" => Ok(StatisticKind::InputGradSqnorm),
            "init-gradB-norm" => Ok(StatisticKind::InitGradBNorm),
            other => Err(Error::Parse(format!("unknown statistic `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimate {
    pub rank: usize,
    pub rule: String,
    pub nu: f64,
    pub alpha: f64,
    pub m: u32,
    pub statistic: StatisticKind,
    pub estimate: f64,
    pub stderr: f64,
    pub n_seeds: usize,
}

/// Geometry and sample sizes shared by the Monte-Carlo estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentProtocol {
    pub ranks: Vec<usize>,
    pub n_steps: usize,
    pub n_seeds: usize,
    /// Fresh inputs per seed on which output moments are averaged.
    pub n_fresh: usize,
    pub d1: usize,
    pub d2: usize,
    pub eta: f64,
    /// Variance of `A`; `None` means `1/d1`.
    pub sigma_a: Option<f64>,
    pub init_scale: InitScaleMode,
    pub seed: u64,
}

impl Default for MomentProtocol {
    fn default() -> Self {
        Self {
            ranks: vec![4, 16, 64, 256, 1024],
            n_steps: 8,
            n_seeds: 64,
            n_fresh: 256,
            d1: 2,
            d2: 8,
            eta: 0.01,
            sigma_a: None,
            init_scale: InitScaleMode::Standard,
            seed: 0,
        }
    }
}

impl MomentProtocol {
    pub fn sigma_a(&self) -> f64 {
        self.sigma_a.unwrap_or(1.0 / self.d1 as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ranks.is_empty() {
            return Err(Error::domain("ranks must be nonempty"));
        }
        if self.ranks[0] == 0 || self.ranks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::domain(format!(
                "ranks must be positive and strictly increasing, got {:?}",
                self.ranks
            )));
        }
        if self.n_seeds == 0 || self.n_fresh == 0 || self.d1 == 0 || self.d2 == 0 {
            return Err(Error::domain("n_seeds, n_fresh, d1 and d2 must be positive"));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::domain(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        Ok(())
    }

    fn unit_probe(&self) -> Matrix {
        Matrix::filled(self.d2, 1, 1.0 / (self.d2 as f64).sqrt())
    }
}

const TAG_A: u64 = 1;
const TAG_TRAIN: u64 = 2;
const TAG_FRESH: u64 = 3;
const TAG_GRADCHECK: u64 = 4;

/// Per-seed statistics for one rank: trains from the shared draws and evaluates.
fn trained_adapter(rule: &ScalingRule, p: &MomentProtocol, rank: usize, s: usize) -> Result<Adapter> {
    let config = AdapterConfig::new(rank, rule.clone(), p.sigma_a())?.with_init_scale(p.init_scale);
    let mut rng_a = RngStream::new(p.seed, stream_id(&[TAG_A, s as u64]));
    let mut a0 = gaussian_fill(rank, p.d1, 0.0, config.sigma_a, &mut rng_a)?;
    if p.init_scale == InitScaleMode::InitOnlySqrt {
        a0.scale_in_place(1.0 / (rank as f64).sqrt());
    }
    let mut ad = Adapter::from_parts(config, a0, Matrix::zeros(p.d2, rank))?;
    if p.n_steps > 0 {
        let mut rng_x = RngStream::new(p.seed, stream_id(&[TAG_TRAIN, s as u64]));
        let xs = gaussian_fill(p.d1, p.n_steps, 0.0, 1.0, &mut rng_x)?;
        let v = p.unit_probe();
        for k in 0..p.n_steps {
            let g = ad.backward(&xs.col_vec(k), &v)?;
            let (a, b) = ad.params_mut();
            sgd_step(&mut [a, b], &[g.grad_a, g.grad_b], p.eta)?;
        }
    }
    Ok(ad)
}

fn fresh_inputs(p: &MomentProtocol, s: usize) -> Result<Matrix> {
    let mut rng = RngStream::new(p.seed, stream_id(&[TAG_FRESH, s as u64]));
    gaussian_fill(p.d1, p.n_fresh, 0.0, 1.0, &mut rng)
}

fn require_collapsing_or_growing(rule: &ScalingRule) -> Result<()> {
    if !(rule.exponent() > 0.0) {
        return Err(Error::domain(format!(
            "rule `{}` has exponent {}; the estimators need γ → 0 as r grows",
            rule.name(),
            rule.exponent()
        )));
    }
    Ok(())
}

fn estimate_cells(
    rule: &ScalingRule,
    p: &MomentProtocol,
    m: u32,
    kind: StatisticKind,
    cell: impl Fn(usize, usize) -> Result<f64> + Sync,
) -> Result<Vec<MomentEstimate>> {
    let cells: Vec<(usize, usize)> = p
        .ranks
        .iter()
        .flat_map(|&r| (0..p.n_seeds).map(move |s| (r, s)))
        .collect();
    let values: Vec<f64> = cells.par_iter().map(|&(r, s)| cell(r, s)).collect::<Result<_>>()?;
    Ok(p.ranks
        .iter()
        .zip(values.chunks(p.n_seeds))
        .map(|(&rank, vals)| {
            let (mean, stderr) = mean_stderr(vals);
            MomentEstimate {
                rank,
                rule: rule.name().to_string(),
                nu: rule.exponent(),
                alpha: rule.alpha(),
                m,
                statistic: kind,
                estimate: mean,
                stderr,
                n_seeds: vals.len(),
            }
        })
        .collect())
}

fn mean_stderr(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `E[mean_j y_j^m]` of trained-adapter outputs on fresh inputs, per rank.
pub fn moment_scaling_experiment(rule: &ScalingRule, p: &MomentProtocol, m: u32) -> Result<Vec<MomentEstimate>> {
    if m == 0 || m % 2 == 1 {
        return Err(Error::domain(format!(
            "moment order must be even and positive, got {m}"
        )));
    }
    require_collapsing_or_growing(rule)?;
    p.validate()?;
    estimate_cells(rule, p, m, StatisticKind::OutputMoment, |r, s| {
        let ad = trained_adapter(rule, p, r, s)?;
        let y = ad.forward(&fresh_inputs(p, s)?)?;
        Ok(moment(y.data(), m))
    })
}

/// `E‖∇_x L‖²` for the linear-probe loss on fresh inputs, per rank.
pub fn input_gradient_scaling_experiment(rule: &ScalingRule, p: &MomentProtocol) -> Result<Vec<MomentEstimate>> {
    require_collapsing_or_growing(rule)?;
    p.validate()?;
    let v = p.unit_probe();
    let vs = Matrix::filled(p.d2, p.n_fresh, v.data()[0]);
    estimate_cells(rule, p, 2, StatisticKind::InputGradSqnorm, |r, s| {
        let ad = trained_adapter(rule, p, r, s)?;
        let g = ad.backward(&fresh_inputs(p, s)?, &vs)?;
        let total: f64 = g.grad_x.data().iter().map(|x| x * x).sum();
        Ok(total / p.n_fresh as f64)
    })
}

/// `E‖∇_B L‖_F` at initialization with a fixed unit-norm `x` and `v`, per rank.
pub fn init_gradient_norm_experiment(rule: &ScalingRule, p: &MomentProtocol) -> Result<Vec<MomentEstimate>> {
    p.validate()?;
    let x = Matrix::filled(p.d1, 1, 1.0 / (p.d1 as f64).sqrt());
    let v = p.unit_probe();
    let init_only = MomentProtocol {
        n_steps: 0,
        ..p.clone()
    };
    estimate_cells(rule, p, 1, StatisticKind::InitGradBNorm, |r, s| {
        let ad = trained_adapter(rule, &init_only, r, s)?;
        Ok(ad.backward(&x, &v)?.grad_b.frobenius_norm())
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// `(ln x, ln y)` pairs used in the fit.
    pub points: Vec<(f64, f64)>,
}

/// Ordinary least squares of `ln y` on `ln x`.
pub fn loglog_slope_fit(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.len() < 2 {
        return Err(Error::domain(format!(
            "slope fit needs at least 2 points, got {}",
            points.len()
        )));
    }
    if let Some(&(x, y)) = points
        .iter()
        .find(|&&(x, y)| !(x > 0.0 && y > 0.0) || !x.is_finite() || !y.is_finite())
    {
        return Err(Error::domain(format!(
            "log-log fit needs finite positive values, got ({x}, {y})"
        )));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::domain("slope fit needs at least two distinct x values"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = logs.iter().map(|p| (p.1 - my).powi(2)).sum();
    let ss_res: f64 = logs.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 {
        1.0
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    Ok(SlopeFit {
        slope,
        intercept,
        r_squared,
        points: logs,
    })
}

/// Slope of estimate against rank.
pub fn fit_estimates(estimates: &[MomentEstimate]) -> Result<SlopeFit> {
    let pts: Vec<(f64, f64)> = estimates.iter().map(|e| (e.rank as f64, e.estimate)).collect();
    loglog_slope_fit(&pts)
}

/// Max over entries of `|fd − analytic| / (|analytic| + 1e-12)` with central differences.
pub fn finite_diff_check(eval: &mut dyn FnMut(&Matrix) -> f64, at: &Matrix, analytic: &Matrix, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::domain(format!("step h must be > 0, got {h}")));
    }
    if at.shape() != analytic.shape() {
        return Err(Error::dims("finite_diff_check", at.shape(), analytic.shape()));
    }
    let mut p = at.clone();
    let mut worst: f64 = 0.0;
    for i in 0..at.data().len() {
        let orig = p.data()[i];
        p.data_mut()[i] = orig + h;
        let up = eval(&p);
        p.data_mut()[i] = orig - h;
        let down = eval(&p);
        p.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let an = analytic.data()[i];
        worst = worst.max((fd - an).abs() / (an.abs() + 1e-12));
    }
    Ok(worst)
}

/// As [`finite_diff_check`] with the fourth-order five-point stencil, tried at
/// each step in `steps`; each entry keeps its best match. Large steps lose to
/// curvature and small ones to roundoff, and which wins varies per entry, but a
/// wrong analytic value matches at no step. The error denominator is
/// `|analytic| + floor`, so entries that are zero up to roundoff cannot dominate.
pub fn finite_diff_check_5pt(
    eval: &mut dyn FnMut(&Matrix) -> f64,
    at: &Matrix,
    analytic: &Matrix,
    steps: &[f64],
    floor: f64,
) -> Result<f64> {
    if steps.is_empty() || steps.iter().any(|&h| !(h > 0.0)) {
        return Err(Error::domain(format!(
            "steps must be nonempty and positive, got {steps:?}"
        )));
    }
    if at.shape() != analytic.shape() {
        return Err(Error::dims("finite_diff_check", at.shape(), analytic.shape()));
    }
    let mut p = at.clone();
    let mut worst: f64 = 0.0;
    for i in 0..at.data().len() {
        let orig = p.data()[i];
        let an = analytic.data()[i];
        let mut best = f64::INFINITY;
        for &h in steps {
            let mut at_offset = |k: f64| {
                p.data_mut()[i] = orig + k * h;
                eval(&p)
            };
            let (f2, f1, m1, m2) = (at_offset(2.0), at_offset(1.0), at_offset(-1.0), at_offset(-2.0));
            let fd = (-f2 + 8.0 * f1 - 8.0 * m1 + m2) / (12.0 * h);
            best = best.min((fd - an).abs() / (an.abs() + floor.max(1e-12)));
        }
        p.data_mut()[i] = orig;
        // NaN never wins a min, so report it explicitly.
        worst = worst.max(if best.is_finite() { best } else { f64::INFINITY });
    }
    Ok(worst)
}

/// Worst relative error of every adapter gradient of `model` under the probe
/// loss `Σ u ⊙ f(x)`, against five-point differences with step `h`.
pub fn model_fd_error(model: &ToyModel, x: &Matrix, u: &Matrix, steps: &[f64]) -> Result<f64> {
    let probe = |m: &ToyModel| -> Result<f64> { Ok(m.forward(x)?.1.hadamard(u)?.sum()) };
    let (cache, out) = model.forward(x)?;
    let grads = model.backward(&cache, u)?.flatten();
    let scale = grads.iter().flat_map(|g| g.data()).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = fd_floor(scale, &out, u)?;
    let mut worst: f64 = 0.0;
    let mut failure = None;
    for (pi, g) in grads.iter().enumerate() {
        let mut perturbed = model.clone();
        let at = perturbed.adapter_params_mut()[pi].clone();
        let mut eval = |m: &Matrix| {
            *perturbed.adapter_params_mut()[pi] = m.clone();
            probe(&perturbed).unwrap_or_else(|e| {
                failure.get_or_insert(e);
                f64::NAN
            })
        };
        worst = worst.max(finite_diff_check_5pt(&mut eval, &at, g, steps, floor)?);
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(worst),
    }
}

/// Entries below this are compared absolutely: a tiny fraction of the
/// gradient scale, or of the probe loss magnitude when that is larger.
fn fd_floor(grad_scale: f64, out: &Matrix, u: &Matrix) -> Result<f64> {
    let magnitude = out.hadamard(u)?.data().iter().map(|v| v.abs()).sum::<f64>();
    Ok(1e-7 * grad_scale.max(magnitude))
}

/// Worst relative error of `adapter_backward` (A, B and x) under a probe loss.
pub fn adapter_fd_error(ad: &Adapter, x: &Matrix, u: &Matrix, steps: &[f64]) -> Result<f64> {
    let g = ad.backward(x, u)?;
    let scale = [&g.grad_a, &g.grad_b, &g.grad_x]
        .iter()
        .flat_map(|m| m.data())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = fd_floor(scale, &ad.forward(x)?, u)?;
    let probe = |a: &Adapter, x: &Matrix| {
        a.forward(x)
            .and_then(|y| y.hadamard(u))
            .map(|m| m.sum())
            .unwrap_or(f64::NAN)
    };
    let with = |a: Option<&Matrix>, b: Option<&Matrix>| {
        Adapter::from_parts(
            ad.config().clone(),
            a.unwrap_or(ad.a()).clone(),
            b.unwrap_or(ad.b()).clone(),
        )
        .expect("shapes unchanged")
    };
    let ea = finite_diff_check_5pt(
        &mut |m: &Matrix| probe(&with(Some(m), None), x),
        ad.a(),
        &g.grad_a,
        steps,
        floor,
    )?;
    let eb = finite_diff_check_5pt(
        &mut |m: &Matrix| probe(&with(None, Some(m)), x),
        ad.b(),
        &g.grad_b,
        steps,
        floor,
    )?;
    let ex = finite_diff_check_5pt(&mut |m: &Matrix| probe(ad, m), x, &g.grad_x, steps, floor)?;
    Ok(ea.max(eb).max(ex))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckSummary {
    pub configs: usize,
    pub adapter_max: f64,
    pub model_max: f64,
    /// Input redraws needed to keep ReLU pre-activations away from the kink.
    pub redraws: usize,
}

/// Finite-difference steps tried by the suite.
pub const GRADCHECK_STEPS: [f64; 3] = [1e-3, 1e-4, 1e-5];
/// Smallest allowed `|z|` at a ReLU; five-point differences move `z` by far less.
const RELU_MARGIN: f64 = 1e-3;

/// Random adapters and models (≤ 3 layers, widths ≤ 32, ranks ≤ 16, every
/// nonlinearity, normalization and residual setting), each checked against
/// finite differences. Adapters carry random nonzero `B` so every path is exercised.
pub fn gradient_check_suite(n_configs: usize, seed: u64) -> Result<GradcheckSummary> {
    let results: Vec<(f64, f64, usize)> = (0..n_configs as u64)
        .into_par_iter()
        .map(|c| {
            let mut rng = RngStream::new(seed, stream_id(&[TAG_GRADCHECK, c]));
            let pick = |rng: &mut RngStream, lo: usize, hi: usize| lo + rng.below((hi - lo + 1) as u64) as usize;
            let rule = match rng.below(4) {
                0 => ScalingRule::lora(8.0)?,
                1 => ScalingRule::rslora(8.0)?,
                2 => ScalingRule::power(0.25, 2.0)?,
                _ => ScalingRule::constant(0.5)?,
            };
            let r = pick(&mut rng, 1, 16);
            let (d1, d2) = (pick(&mut rng, 1, 32), pick(&mut rng, 1, 32));
            let config = AdapterConfig::new(r, rule, 1.0 / d1 as f64)?;
            let ad = Adapter::from_parts(
                config.clone(),
                gaussian_fill(r, d1, 0.0, 1.0 / d1 as f64, &mut rng)?,
                gaussian_fill(d2, r, 0.0, 1.0 / r as f64, &mut rng)?,
            )?;
            let x = gaussian_fill(d1, 1, 0.0, 1.0, &mut rng)?;
            let u = gaussian_fill(d2, 1, 0.0, 1.0, &mut rng)?;
            let adapter_err = adapter_fd_error(&ad, &x, &u, &GRADCHECK_STEPS)?;

            let depth = pick(&mut rng, 1, 3);
            let width = pick(&mut rng, 2, 32);
            let mut dims = vec![pick(&mut rng, 1, 32)];
            dims.extend(std::iter::repeat_n(width, depth - 1));
            dims.push(pick(&mut rng, 1, 32));
            let nl = [Nonlinearity::Identity, Nonlinearity::Relu, Nonlinearity::Tanh][rng.below(3) as usize];
            let (ln, res) = (rng.below(2) == 1, rng.below(2) == 1);
            let mut model = ToyModel::random(&dims, nl, ln, res, &mut rng)?;
            model.attach_adapters(&config, Placement::All, &rng.derive(&[1]))?;
            for p in model.adapter_params_mut() {
                *p = gaussian_fill(p.rows(), p.cols(), 0.0, 0.25, &mut rng)?;
            }
            let batch = pick(&mut rng, 1, 4);
            let u = gaussian_fill(model.d_out(), batch, 0.0, 1.0, &mut rng)?;
            let mut redraws = 0;
            let x = loop {
                let x = gaussian_fill(model.d_in(), batch, 0.0, 1.0, &mut rng)?;
                if nl != Nonlinearity::Relu || relu_margin(&model, &x)? >= RELU_MARGIN || redraws >= 100 {
                    break x;
                }
                redraws += 1;
            };
            let model_err = model_fd_error(&model, &x, &u, &GRADCHECK_STEPS)?;
            Ok((adapter_err, model_err, redraws))
        })
        .collect::<Result<_>>()?;
    Ok(GradcheckSummary {
        configs: n_configs,
        adapter_max: results.iter().map(|r| r.0).fold(0.0, f64::max),
        model_max: results.iter().map(|r| r.1).fold(0.0, f64::max),
        redraws: results.iter().map(|r| r.2).sum(),
    })
}

/// Smallest `|z|` feeding a nonlinearity (every layer but the last).
pub fn relu_margin(model: &ToyModel, x: &Matrix) -> Result<f64> {
    let (cache, _) = model.forward(x)?;
    let outs = cache.layer_outputs();
    Ok(outs[..outs.len() - 1]
        .iter()
        .flat_map(|z| z.data())
        .fold(f64::INFINITY, |m, v| m.min(v.abs())))
}

/// Monte-Carlo mean of `A₀ᵀA₀` over seeds and its relative Frobenius error against `r σ_A I`.
pub fn gram_expectation(rank: usize, d1: usize, sigma_a: f64, n_seeds: usize, seed: u64) -> Result<(Matrix, f64)> {
    if n_seeds == 0 {
        return Err(Error::domain("n_seeds must be positive"));
    }
    let grams: Vec<Matrix> = (0..n_seeds)
        .into_par_iter()
        .map(|s| {
            let mut rng = RngStream::new(seed, stream_id(&[TAG_A, s as u64]));
            let a = gaussian_fill(rank, d1, 0.0, sigma_a, &mut rng)?;
            a.t_matmul(&a)
        })
        .collect::<Result<_>>()?;
    let mut mean = Matrix::zeros(d1, d1);
    for g in &grams {
        mean.axpy(1.0, g)?;
    }
    mean.scale_in_place(1.0 / n_seeds as f64);
    let target = Matrix::identity(d1).scale(rank as f64 * sigma_a);
    let err = mean.relative_error(&target)?;
    Ok((mean, err))
}

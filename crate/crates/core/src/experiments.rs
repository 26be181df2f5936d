//! Training-time experiment drivers on the toy network.
//!
//! A cell is one `(rule, rank, seed)` training run. Each cell derives its
//! random streams from the experiment seed and its seed index only: the
//! frozen base weights are shared by every cell, the adapter `A` draw and the
//! data batches depend on the seed index, and neither depends on the rank or
//! the rule. Cells are therefore independent of which other cells run and in
//! what order.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, InitScaleMode};
use crate::data::{CharCorpus, TeacherStudent};
use crate::error::{Error, Result};
use crate::net::{activation_moments, compute_loss, Batch, LossSpec, Nonlinearity, Placement, ToyModel};
use crate::numerics::{stream_id, RngStream};
use crate::optim::OptimizerSpec;
use crate::scaling::{RuleSpec, ScalingRule};

const TAG_BASE: u64 = 11;
const TAG_ADAPTER: u64 = 12;
const TAG_DATA: u64 = 13;
const TAG_HELDOUT: u64 = 14;

/// The learning-rate grid `{1, 5} × 10ⁿ` for `n ∈ {−4, −3, −2}`.
pub const LR_GRID: [f64; 6] = [1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    CharLm,
    TeacherStudent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub d_model: usize,
    pub hidden_layers: usize,
    /// Characters of context for the char-lm task.
    pub context: usize,
    /// Input and output widths for the teacher-student task.
    pub d_in: usize,
    pub d_out: usize,
    pub nonlinearity: Nonlinearity,
    pub layernorm: bool,
    pub residual: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            d_model: 64,
            hidden_layers: 2,
            context: 3,
            d_in: 16,
            d_out: 16,
            nonlinearity: Nonlinearity::Tanh,
            layernorm: true,
            residual: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceCell {
    pub rule: RuleSpec,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: Task,
    pub ranks: Vec<usize>,
    pub rules: Vec<RuleSpec>,
    pub optimizer: OptimizerSpec,
    pub steps: usize,
    pub batch_size: usize,
    pub seeds: usize,
    /// `None` places adapters on every hidden layer.
    pub placement: Option<Placement>,
    pub init_scale: InitScaleMode,
    pub probe_every: usize,
    /// Variance of `A`; `None` means `1/d_model`.
    pub sigma_a: Option<f64>,
    pub model: ModelSpec,
    pub seed: u64,
    /// Worker threads; 0 uses all cores.
    pub threads: usize,
    /// Learning rate for the SGD stability run.
    pub sgd_eta: f64,
    pub lr_grid: Vec<f64>,
    pub lr_low_rank: usize,
    pub reference: ReferenceCell,
    /// High rank used when comparing exponents.
    pub comparison_rank: usize,
    pub comparison_nus: Vec<f64>,
    /// A run is flagged diverged once its loss exceeds this multiple of the first loss.
    pub divergence_factor: f64,
    pub eval_chunk: usize,
    /// Held-out examples for the teacher-student task.
    pub eval_examples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::CharLm,
            ranks: vec![4, 8, 32, 128, 512],
            rules: vec![RuleSpec::new("rslora", 16.0), RuleSpec::new("lora", 16.0)],
            optimizer: OptimizerSpec::adamw(1e-4),
            steps: 2000,
            batch_size: 32,
            seeds: 3,
            placement: None,
            init_scale: InitScaleMode::Standard,
            probe_every: 100,
            sigma_a: None,
            model: ModelSpec::default(),
            seed: 0,
            threads: 0,
            sgd_eta: 1e-4,
            lr_grid: LR_GRID.to_vec(),
            lr_low_rank: 4,
            reference: ReferenceCell {
                rule: RuleSpec::new("rslora", 16.0),
                rank: 512,
            },
            comparison_rank: 512,
            comparison_nus: vec![0.25, 0.5, 1.0, 2.0],
            divergence_factor: 1e3,
            eval_chunk: 4096,
            eval_examples: 1024,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ranks.is_empty() || self.ranks.contains(&0) {
            return Err(Error::config(
                "experiment.ranks",
                "must be a nonempty list of positive ranks",
            ));
        }
        if self.rules.is_empty() {
            return Err(Error::config("experiment.rules", "must list at least one rule"));
        }
        for (i, r) in self.rules.iter().enumerate() {
            r.resolve()
                .map_err(|e| Error::config(format!("experiment.rules[{i}]"), e.to_string()))?;
        }
        self.optimizer.validate()?;
        let positive = [
            ("experiment.steps", self.steps),
            ("experiment.batch_size", self.batch_size),
            ("experiment.seeds", self.seeds),
            ("experiment.probe_every", self.probe_every),
            ("experiment.eval_chunk", self.eval_chunk),
            ("experiment.eval_examples", self.eval_examples),
            ("experiment.model.d_model", self.model.d_model),
            ("experiment.model.context", self.model.context),
            ("experiment.model.d_in", self.model.d_in),
            ("experiment.model.d_out", self.model.d_out),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be >= 1"));
            }
        }
        if let Some(s) = self.sigma_a {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(Error::config(
                    "experiment.sigma_a",
                    format!("must be finite and >= 0, got {s}"),
                ));
            }
        }
        if self.lr_grid.is_empty() || self.lr_grid.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::config(
                "experiment.lr_grid",
                "must be a nonempty list of positive learning rates",
            ));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(Error::config("experiment.divergence_factor", "must be > 1"));
        }
        if !(self.sgd_eta >= 0.0) || !self.sgd_eta.is_finite() {
            return Err(Error::config("experiment.sgd_eta", "must be finite and >= 0"));
        }
        Ok(())
    }

    fn resolved_rules(&self) -> Result<Vec<ScalingRule>> {
        self.rules.iter().map(RuleSpec::resolve).collect()
    }

    fn thread_pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| Error::InvalidState(format!("cannot start worker pool: {e}")))
    }
}

/// One probe of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub rank: usize,
    pub rule: String,
    pub nu: f64,
    pub alpha: f64,
    pub seed: u64,
    /// Batch loss before the update at this step.
    pub loss: f64,
    pub perplexity: Option<f64>,
    pub grad_norm_mean: f64,
    pub act_m1: f64,
    pub act_m2: f64,
    pub diverged: bool,
}

/// End-of-run summary for one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub rule: String,
    pub nu: f64,
    pub alpha: f64,
    pub rank: usize,
    pub seed: u64,
    /// Loss over the whole corpus (char-lm) or a fixed held-out set (teacher-student).
    pub final_loss: f64,
    pub final_perplexity: Option<f64>,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrSweepRow {
    pub learning_rate: f64,
    pub rule: String,
    pub rank: usize,
    /// Mean over seeds.
    pub final_loss: f64,
    pub best_flag: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentOutput {
    pub records: Vec<TrajectoryRecord>,
    pub finals: Vec<CellSummary>,
    pub lrsweep: Vec<LrSweepRow>,
}

impl ExperimentOutput {
    fn extend(&mut self, cells: Vec<CellOutcome>) {
        for c in cells {
            self.records.extend(c.records);
            self.finals.push(c.summary);
        }
    }
}

#[derive(Debug, Clone)]
struct CellOutcome {
    records: Vec<TrajectoryRecord>,
    summary: CellSummary,
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub rule: ScalingRule,
    pub rank: usize,
    pub seed: u64,
    pub optimizer: OptimizerSpec,
    pub init_scale: InitScaleMode,
}

enum TaskData {
    Chars(CharCorpus),
    Teacher(TeacherStudent, Batch),
}

/// Frozen base model and data shared by all cells of an experiment.
struct Workbench {
    base: ToyModel,
    data: TaskData,
    placement: Placement,
    sigma_a: f64,
}

impl Workbench {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let m = &cfg.model;
        let mut rng = RngStream::new(cfg.seed, stream_id(&[TAG_BASE]));
        let (data, d_in, d_out) = match cfg.task {
            Task::CharLm => {
                let corpus = CharCorpus::bundled(m.context)?;
                let (i, o) = (corpus.input_dim(), corpus.vocab_size());
                (TaskData::Chars(corpus), i, o)
            }
            Task::TeacherStudent => {
                let teacher = TeacherStudent::new(m.d_in, m.d_out, &mut rng)?;
                let mut held = RngStream::new(cfg.seed, stream_id(&[TAG_HELDOUT]));
                let eval = teacher.sample_batch(cfg.eval_examples, &mut held)?;
                (TaskData::Teacher(teacher, eval), m.d_in, m.d_out)
            }
        };
        let mut dims = vec![d_in];
        dims.extend(std::iter::repeat_n(m.d_model, m.hidden_layers + 1));
        dims.push(d_out);
        let base = ToyModel::random(&dims, m.nonlinearity, m.layernorm, m.residual, &mut rng)?;
        let placement = cfg
            .placement
            .clone()
            .unwrap_or_else(|| Placement::Subset((1..=m.hidden_layers).collect()));
        if let Placement::Subset(ix) = &placement {
            if ix.is_empty() {
                return Err(Error::config("experiment.placement", "must select at least one layer"));
            }
            if let Some(&bad) = ix.iter().find(|&&i| i >= base.layers().len()) {
                return Err(Error::config(
                    "experiment.placement",
                    format!("layer {bad} does not exist (model has {} layers)", base.layers().len()),
                ));
            }
        }
        Ok(Self {
            base,
            data,
            placement,
            sigma_a: cfg.sigma_a.unwrap_or(1.0 / m.d_model as f64),
        })
    }

    fn loss_spec(&self) -> LossSpec {
        match self.data {
            TaskData::Chars(_) => LossSpec::CrossEntropy,
            TaskData::Teacher(..) => LossSpec::Mse,
        }
    }

    fn sample(&self, batch: usize, rng: &mut RngStream) -> Result<Batch> {
        match &self.data {
            TaskData::Chars(c) => c.sample_batch(batch, rng),
            TaskData::Teacher(t, _) => t.sample_batch(batch, rng),
        }
    }

    fn perplexity(&self, loss: f64) -> Option<f64> {
        match self.data {
            TaskData::Chars(_) => Some(loss.exp()),
            TaskData::Teacher(..) => None,
        }
    }

    fn final_loss(&self, model: &ToyModel, chunk: usize) -> Result<f64> {
        let spec = self.loss_spec();
        match &self.data {
            TaskData::Chars(c) => {
                let mut total = 0.0;
                for batch in c.full_batches(chunk) {
                    let batch = batch?;
                    let (_, out) = model.forward(&batch.inputs)?;
                    let (loss, _) = compute_loss(&spec, &out, &batch.targets)?;
                    total += loss * batch.inputs.cols() as f64;
                }
                Ok(total / c.n_examples() as f64)
            }
            TaskData::Teacher(_, eval) => {
                let (_, out) = model.forward(&eval.inputs)?;
                Ok(compute_loss(&spec, &out, &eval.targets)?.0)
            }
        }
    }

    fn run_cell(&self, cfg: &ExperimentConfig, cell: &Cell) -> Result<CellOutcome> {
        let mut model = self.base.clone();
        let fingerprint = model.frozen_fingerprint();
        let config = AdapterConfig::new(cell.rank, cell.rule.clone(), self.sigma_a)?.with_init_scale(cell.init_scale);
        let adapter_rng = RngStream::new(cfg.seed, stream_id(&[TAG_ADAPTER, cell.seed]));
        model.attach_adapters(&config, self.placement.clone(), &adapter_rng)?;
        let mut data_rng = RngStream::new(cfg.seed, stream_id(&[TAG_DATA, cell.seed]));
        let mut opt = cell.optimizer.build()?;
        let spec = self.loss_spec();

        let record = |step: usize, loss: f64, grad_norm_mean: f64, m1: f64, m2: f64, diverged: bool| TrajectoryRecord {
            step,
            rank: cell.rank,
            rule: cell.rule.name().to_string(),
            nu: cell.rule.exponent(),
            alpha: cell.rule.alpha(),
            seed: cell.seed,
            loss,
            perplexity: self.perplexity(loss),
            grad_norm_mean,
            act_m1: m1,
            act_m2: m2,
            diverged,
        };

        let mut records = Vec::new();
        let mut first_loss = None;
        let mut diverged = false;
        let mut last_loss = f64::NAN;
        for step in 1..=cfg.steps {
            let batch = self.sample(cfg.batch_size, &mut data_rng)?;
            let (cache, out) = model.forward(&batch.inputs)?;
            let (loss, grad) = compute_loss(&spec, &out, &batch.targets)?;
            let first = *first_loss.get_or_insert(loss);
            last_loss = loss;
            if !loss.is_finite() || loss > cfg.divergence_factor * first {
                diverged = true;
                records.push(record(step, loss, f64::NAN, f64::NAN, f64::NAN, true));
                break;
            }
            let grads = model.backward(&cache, &grad)?;
            if (step - 1) % cfg.probe_every == 0 {
                let m1 = activation_moments(&cache, 1)?.mean;
                let m2 = activation_moments(&cache, 2)?.mean;
                records.push(record(step, loss, grads.mean_norm(), m1, m2, false));
            }
            opt.step(&mut model.adapter_params_mut(), &grads.flatten())?;
        }

        if model.frozen_fingerprint() != fingerprint {
            return Err(Error::InvalidState(
                "frozen base weights changed during training".into(),
            ));
        }
        let final_loss = if diverged {
            last_loss
        } else {
            self.final_loss(&model, cfg.eval_chunk)?
        };
        let final_loss = if final_loss.is_finite() {
            final_loss
        } else {
            f64::INFINITY
        };
        Ok(CellOutcome {
            records,
            summary: CellSummary {
                rule: cell.rule.name().to_string(),
                nu: cell.rule.exponent(),
                alpha: cell.rule.alpha(),
                rank: cell.rank,
                seed: cell.seed,
                final_loss,
                final_perplexity: self.perplexity(final_loss),
                diverged,
            },
        })
    }
}

fn run_cells(cfg: &ExperimentConfig, cells: &[Cell]) -> Result<Vec<CellOutcome>> {
    cfg.validate()?;
    let bench = Workbench::new(cfg)?;
    let pool = cfg.thread_pool()?;
    pool.install(|| cells.par_iter().map(|c| bench.run_cell(cfg, c)).collect())
}

fn grid_cells(
    cfg: &ExperimentConfig,
    rules: &[ScalingRule],
    ranks: &[usize],
    optimizer: &OptimizerSpec,
    init_scale: InitScaleMode,
) -> Vec<Cell> {
    let mut cells = Vec::new();
    for rule in rules {
        for &rank in ranks {
            for seed in 0..cfg.seeds as u64 {
                cells.push(Cell {
                    rule: rule.clone(),
                    rank,
                    seed,
                    optimizer: optimizer.clone(),
                    init_scale,
                });
            }
        }
    }
    cells
}

/// Runs arbitrary cells against the experiment's base model and data.
pub fn run_custom_cells(cfg: &ExperimentConfig, cells: &[Cell]) -> Result<ExperimentOutput> {
    let mut out = ExperimentOutput::default();
    out.extend(run_cells(cfg, cells)?);
    Ok(out)
}

/// One training run per `(rule, rank, seed)`.
pub fn run_rank_sweep(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let cells = grid_cells(cfg, &cfg.resolved_rules()?, &cfg.ranks, &cfg.optimizer, cfg.init_scale);
    run_custom_cells(cfg, &cells)
}

/// The rank sweep with plain SGD at `sgd_eta`.
pub fn run_sgd_stability(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let sgd = ExperimentConfig {
        optimizer: OptimizerSpec::sgd(cfg.sgd_eta),
        ..cfg.clone()
    };
    run_rank_sweep(&sgd)
}

/// Two arms with `A` scaled by `1/√r` at init: no scaling factor (`γ = α`) and `γ = α/r`.
pub fn run_init_only_ablation(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    if cfg.init_scale != InitScaleMode::InitOnlySqrt {
        return Err(Error::config(
            "experiment.init_scale",
            "the init-only ablation requires `init-only-sqrt`",
        ));
    }
    cfg.validate()?;
    let alpha = cfg.rules.first().map_or(16.0, |r| r.alpha);
    let rules = [ScalingRule::constant(alpha)?, ScalingRule::lora(alpha)?];
    let cells = grid_cells(cfg, &rules, &cfg.ranks, &cfg.optimizer, InitScaleMode::InitOnlySqrt);
    run_custom_cells(cfg, &cells)
}

/// LoRA at `lr_low_rank` over the learning-rate grid plus the reference cell at the default rate.
pub fn run_lr_sweep(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let alpha = cfg.rules.iter().find(|r| r.name == "lora").map_or(16.0, |r| r.alpha);
    let lora = ScalingRule::lora(alpha)?;
    let reference = cfg.reference.rule.resolve()?;
    let mut cells = Vec::new();
    for &lr in &cfg.lr_grid {
        cells.extend(grid_cells(
            cfg,
            std::slice::from_ref(&lora),
            &[cfg.lr_low_rank],
            &cfg.optimizer.with_eta(lr),
            cfg.init_scale,
        ));
    }
    cells.extend(grid_cells(
        cfg,
        std::slice::from_ref(&reference),
        &[cfg.reference.rank],
        &cfg.optimizer,
        cfg.init_scale,
    ));
    let outcomes = run_cells(cfg, &cells)?;

    let mean_final =
        |chunk: &[CellOutcome]| chunk.iter().map(|c| c.summary.final_loss).sum::<f64>() / chunk.len() as f64;
    let groups: Vec<&[CellOutcome]> = outcomes.chunks(cfg.seeds).collect();
    let mut rows: Vec<LrSweepRow> = cfg
        .lr_grid
        .iter()
        .zip(&groups)
        .map(|(&lr, g)| LrSweepRow {
            learning_rate: lr,
            rule: lora.name().to_string(),
            rank: cfg.lr_low_rank,
            final_loss: mean_final(g),
            best_flag: false,
        })
        .collect();
    let best = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.final_loss.is_nan())
        .min_by(|a, b| a.1.final_loss.total_cmp(&b.1.final_loss))
        .map(|(i, _)| i);
    if let Some(i) = best {
        rows[i].best_flag = true;
    }
    rows.push(LrSweepRow {
        learning_rate: cfg.optimizer.eta,
        rule: reference.name().to_string(),
        rank: cfg.reference.rank,
        final_loss: mean_final(groups[groups.len() - 1]),
        best_flag: false,
    });

    let mut out = ExperimentOutput::default();
    out.extend(outcomes);
    out.lrsweep = rows;
    Ok(out)
}

/// Rules `α·r^(−ν)` for each configured exponent at `comparison_rank`.
/// Exponents ½ and 1 use the named rsLoRA and LoRA rules so their cells match the sweep.
pub fn run_scaling_rule_comparison(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let alpha = cfg.rules.first().map_or(16.0, |r| r.alpha);
    let rules = cfg
        .comparison_nus
        .iter()
        .map(|&nu| {
            if nu == 0.5 {
                ScalingRule::rslora(alpha)
            } else if nu == 1.0 {
                ScalingRule::lora(alpha)
            } else {
                ScalingRule::power(nu, alpha)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let cells = grid_cells(cfg, &rules, &[cfg.comparison_rank], &cfg.optimizer, cfg.init_scale);
    run_custom_cells(cfg, &cells)
}

pub trait ExperimentDriver: Debug + Send + Sync {
    fn name(&self) -> &'static str;
    fn run(&self, cfg: &ExperimentConfig) -> Result<ExperimentOutput>;
}

macro_rules! driver {
    ($ty:ident, $name:literal, $f:path) => {
        #[derive(Debug)]
        pub struct $ty;
        impl ExperimentDriver for $ty {
            fn name(&self) -> &'static str {
                $name
            }
            fn run(&self, cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
                $f(cfg)
            }
        }
    };
}

driver!(RankSweep, "rank-sweep", run_rank_sweep);
driver!(SgdStability, "sgd-stability", run_sgd_stability);
driver!(InitOnlyAblation, "init-only", run_init_only_ablation);
driver!(LrSweep, "lr-sweep", run_lr_sweep);
driver!(RuleComparison, "rule-comparison", run_scaling_rule_comparison);

#[derive(Debug)]
pub struct ExperimentRegistry {
    drivers: BTreeMap<String, Box<dyn ExperimentDriver>>,
}

impl ExperimentRegistry {
    pub fn builtin() -> Self {
        let mut reg = Self {
            drivers: BTreeMap::new(),
        };
        reg.register(Box::new(RankSweep));
        reg.register(Box::new(SgdStability));
        reg.register(Box::new(InitOnlyAblation));
        reg.register(Box::new(LrSweep));
        reg.register(Box::new(RuleComparison));
        reg
    }

    pub fn global() -> &'static ExperimentRegistry {
        static REG: OnceLock<ExperimentRegistry> = OnceLock::new();
        REG.get_or_init(Self::builtin)
    }

    pub fn register(&mut self, driver: Box<dyn ExperimentDriver>) {
        self.drivers.insert(driver.name().to_string(), driver);
    }

    pub fn names(&self) -> Vec<&str> {
        self.drivers.keys().map(String::as_str).collect()
    }

    pub fn get(&self, name: &str) -> Result<&dyn ExperimentDriver> {
        self.drivers
            .get(name)
            .map(|d| d.as_ref())
            .ok_or_else(|| Error::Unknown {
                kind: "experiment",
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(task: Task) -> ExperimentConfig {
        ExperimentConfig {
            task,
            ranks: vec![2, 8],
            steps: 12,
            batch_size: 4,
            seeds: 2,
            probe_every: 5,
            model: ModelSpec {
                d_model: 8,
                d_in: 5,
                d_out: 3,
                ..ModelSpec::default()
            },
            lr_grid: vec![1e-3, 1e-2],
            lr_low_rank: 2,
            reference: ReferenceCell {
                rule: RuleSpec::new("rslora", 16.0),
                rank: 8,
            },
            comparison_rank: 8,
            eval_examples: 16,
            threads: 1,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn record_count_and_order() {
        for task in [Task::CharLm, Task::TeacherStudent] {
            let cfg = tiny(task);
            let out = run_rank_sweep(&cfg).unwrap();
            let cells = 2 * 2 * 2;
            assert_eq!(out.finals.len(), cells);
            assert_eq!(out.records.len(), cells * 12usize.div_ceil(5));
            for w in out.records.windows(2) {
                if (w[0].rule.as_str(), w[0].rank, w[0].seed) == (w[1].rule.as_str(), w[1].rank, w[1].seed) {
                    assert!(w[0].step < w[1].step);
                }
            }
            assert_eq!(out.records[0].perplexity.is_some(), task == Task::CharLm);
            assert!(out.records.iter().all(|r| r.loss.is_finite() && !r.diverged));
        }
    }

    #[test]
    fn cells_do_not_depend_on_neighbours() {
        let cfg = tiny(Task::CharLm);
        let full = run_rank_sweep(&cfg).unwrap();
        let alone = run_rank_sweep(&ExperimentConfig {
            ranks: vec![8],
            rules: vec![RuleSpec::new("lora", 16.0)],
            ..cfg.clone()
        })
        .unwrap();
        let picked: Vec<_> = full
            .finals
            .iter()
            .filter(|f| f.rank == 8 && f.rule == "lora")
            .cloned()
            .collect();
        assert_eq!(picked, alone.finals);
    }

    #[test]
    fn reruns_and_thread_counts_are_identical() {
        let cfg = tiny(Task::CharLm);
        let a = run_rank_sweep(&cfg).unwrap();
        let b = run_rank_sweep(&ExperimentConfig { threads: 3, ..cfg }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lr_sweep_shape() {
        let cfg = tiny(Task::CharLm);
        let out = run_lr_sweep(&cfg).unwrap();
        assert_eq!(out.lrsweep.len(), cfg.lr_grid.len() + 1);
        assert_eq!(out.lrsweep.iter().filter(|r| r.best_flag).count(), 1);
        let reference = out.lrsweep.last().unwrap();
        assert_eq!((reference.rule.as_str(), reference.rank), ("rslora", 8));
    }

    #[test]
    fn comparison_reuses_sweep_cells() {
        let cfg = tiny(Task::CharLm);
        let sweep = run_rank_sweep(&cfg).unwrap();
        let cmp = run_scaling_rule_comparison(&cfg).unwrap();
        for rule in ["rslora", "lora"] {
            let pick = |o: &ExperimentOutput| -> Vec<TrajectoryRecord> {
                o.records
                    .iter()
                    .filter(|r| r.rule == rule && r.rank == 8)
                    .cloned()
                    .collect()
            };
            assert_eq!(pick(&sweep), pick(&cmp));
        }
    }

    #[test]
    fn init_only_requires_mode_and_has_two_arms() {
        let cfg = tiny(Task::CharLm);
        assert!(matches!(run_init_only_ablation(&cfg), Err(Error::Config { .. })));
        let out = run_init_only_ablation(&ExperimentConfig {
            init_scale: InitScaleMode::InitOnlySqrt,
            ..cfg
        })
        .unwrap();
        let mut rules: Vec<_> = out.finals.iter().map(|f| f.rule.clone()).collect();
        rules.dedup();
        assert_eq!(rules, vec!["none".to_string(), "lora".to_string()]);
    }

    #[test]
    fn divergence_is_flagged_and_truncated() {
        let cfg = ExperimentConfig {
            optimizer: OptimizerSpec::sgd(1e4),
            rules: vec![RuleSpec::power(0.0, 64.0)],
            steps: 50,
            placement: Some(Placement::All),
            model: ModelSpec {
                nonlinearity: Nonlinearity::Identity,
                layernorm: false,
                ..tiny(Task::TeacherStudent).model
            },
            ..tiny(Task::TeacherStudent)
        };
        let out = run_rank_sweep(&cfg).unwrap();
        assert!(out.finals.iter().all(|f| f.diverged));
        for f in &out.finals {
            let recs: Vec<_> = out
                .records
                .iter()
                .filter(|r| r.rank == f.rank && r.seed == f.seed)
                .collect();
            assert!(recs.last().unwrap().diverged);
            assert!(recs.iter().rev().skip(1).all(|r| !r.diverged));
        }
    }

    #[test]
    fn bad_configs_name_the_key() {
        let bad = ExperimentConfig {
            steps: 0,
            ..tiny(Task::CharLm)
        };
        match run_rank_sweep(&bad) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "experiment.steps"),
            other => panic!("{other:?}"),
        }
        let bad = ExperimentConfig {
            placement: Some(Placement::Subset(vec![9])),
            ..tiny(Task::CharLm)
        };
        assert!(matches!(run_rank_sweep(&bad), Err(Error::Config { .. })));
    }

    #[test]
    fn registry_lists_drivers() {
        let reg = ExperimentRegistry::global();
        assert_eq!(
            reg.names(),
            vec![
                "init-only",
                "lr-sweep",
                "rank-sweep",
                "rule-comparison",
                "sgd-stability"
            ]
        );
        assert!(matches!(reg.get("nope"), Err(Error::Unknown { .. })));
        let out = reg
            .get("sgd-stability")
            .unwrap()
            .run(&tiny(Task::TeacherStudent))
            .unwrap();
        assert!(!out.records.is_empty());
    }
}

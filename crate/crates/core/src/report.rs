//! Fixed-schema CSV reports.
//!
//! Floats are written as `{:.16e}` (17 significant digits), which parses back
//! to the same bits. Lines end in `\n` and every file starts with its header.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::experiments::{CellSummary, ExperimentOutput, LrSweepRow, TrajectoryRecord};
use crate::theory::{MomentEstimate, SlopeFit, StatisticKind};

pub trait CsvRow: Sized {
    const HEADER: &'static [&'static str];
    fn to_fields(&self) -> Vec<String>;
    fn from_fields(fields: &[&str]) -> Result<Self>;
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn parse<T: std::str::FromStr>(field: &str, name: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::Parse(format!("column `{name}`: cannot parse `{field}`")))
}

fn parse_opt(field: &str, name: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        Ok(None)
    } else {
        parse(field, name).map(Some)
    }
}

pub fn to_csv_string<R: CsvRow>(rows: &[R]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record(R::HEADER).map_err(csv_err)?;
    for row in rows {
        w.write_record(row.to_fields()).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

pub fn from_csv_str<R: CsvRow>(text: &str) -> Result<Vec<R>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::Parse(e.to_string()))?;
    if header.iter().ne(R::HEADER.iter().copied()) {
        return Err(Error::Parse(format!(
            "unexpected header `{}`, expected `{}`",
            header.iter().collect::<Vec<_>>().join(","),
            R::HEADER.join(",")
        )));
    }
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
            let fields: Vec<&str> = rec.iter().collect();
            R::from_fields(&fields)
        })
        .collect()
}

pub fn write_csv<R: CsvRow>(path: &Path, rows: &[R]) -> Result<()> {
    fs::write(path, to_csv_string(rows)?).map_err(|e| Error::io(path, e))
}

pub fn read_csv<R: CsvRow>(path: &Path) -> Result<Vec<R>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_csv_str(&text)
}

impl CsvRow for TrajectoryRecord {
    const HEADER: &'static [&'static str] = &[
        "step",
        "rank",
        "rule",
        "nu",
        "alpha",
        "seed",
        "loss",
        "perplexity",
        "grad_norm_mean",
        "act_m1",
        "act_m2",
        "diverged",
    ];

    fn to_fields(&self) -> Vec<String> {
        vec![
            self.step.to_string(),
            self.rank.to_string(),
            self.rule.clone(),
            fmt_f64(self.nu),
            fmt_f64(self.alpha),
            self.seed.to_string(),
            fmt_f64(self.loss),
            fmt_opt(self.perplexity),
            fmt_f64(self.grad_norm_mean),
            fmt_f64(self.act_m1),
            fmt_f64(self.act_m2),
            self.diverged.to_string(),
        ]
    }

    fn from_fields(f: &[&str]) -> Result<Self> {
        Ok(Self {
            step: parse(f[0], "step")?,
            rank: parse(f[1], "rank")?,
            rule: f[2].to_string(),
            nu: parse(f[3], "nu")?,
            alpha: parse(f[4], "alpha")?,
            seed: parse(f[5], "seed")?,
            loss: parse(f[6], "loss")?,
            perplexity: parse_opt(f[7], "perplexity")?,
            grad_norm_mean: parse(f[8], "grad_norm_mean")?,
            act_m1: parse(f[9], "act_m1")?,
            act_m2: parse(f[10], "act_m2")?,
            diverged: parse(f[11], "diverged")?,
        })
    }
}

impl CsvRow for MomentEstimate {
    const HEADER: &'static [&'static str] = &[
        "rank",
        "rule",
        "nu",
        "alpha",
        "m",
        "statistic",
        "estimate",
        "stderr",
        "n_seeds",
    ];

    fn to_fields(&self) -> Vec<String> {
        vec![
            self.rank.to_string(),
            self.rule.clone(),
            fmt_f64(self.nu),
            fmt_f64(self.alpha),
            self.m.to_string(),
            self.statistic.as_str().to_string(),
            fmt_f64(self.estimate),
            fmt_f64(self.stderr),
            self.n_seeds.to_string(),
        ]
    }

    fn from_fields(f: &[&str]) -> Result<Self> {
        Ok(Self {
            rank: parse(f[0], "rank")?,
            rule: f[1].to_string(),
            nu: parse(f[2], "nu")?,
            alpha: parse(f[3], "alpha")?,
            m: parse(f[4], "m")?,
            statistic: StatisticKind::parse(f[5])?,
            estimate: parse(f[6], "estimate")?,
            stderr: parse(f[7], "stderr")?,
            n_seeds: parse(f[8], "n_seeds")?,
        })
    }
}

/// One fitted log-log slope of a statistic against rank.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeRow {
    pub rule: String,
    pub nu: f64,
    pub statistic: StatisticKind,
    pub m: u32,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_points: usize,
}

impl SlopeRow {
    pub fn from_fit(estimates: &[MomentEstimate], fit: &SlopeFit) -> Self {
        let first = &estimates[0];
        Self {
            rule: first.rule.clone(),
            nu: first.nu,
            statistic: first.statistic,
            m: first.m,
            slope: fit.slope,
            intercept: fit.intercept,
            r_squared: fit.r_squared,
            n_points: fit.points.len(),
        }
    }
}

impl CsvRow for SlopeRow {
    const HEADER: &'static [&'static str] = &[
        "rule",
        "nu",
        "statistic",
        "m",
        "slope",
        "intercept",
        "r_squared",
        "n_points",
    ];

    fn to_fields(&self) -> Vec<String> {
        vec![
            self.rule.clone(),
            fmt_f64(self.nu),
            self.statistic.as_str().to_string(),
            self.m.to_string(),
            fmt_f64(self.slope),
            fmt_f64(self.intercept),
            fmt_f64(self.r_squared),
            self.n_points.to_string(),
        ]
    }

    fn from_fields(f: &[&str]) -> Result<Self> {
        Ok(Self {
            rule: f[0].to_string(),
            nu: parse(f[1], "nu")?,
            statistic: StatisticKind::parse(f[2])?,
            m: parse(f[3], "m")?,
            slope: parse(f[4], "slope")?,
            intercept: parse(f[5], "intercept")?,
            r_squared: parse(f[6], "r_squared")?,
            n_points: parse(f[7], "n_points")?,
        })
    }
}

impl CsvRow for LrSweepRow {
    const HEADER: &'static [&'static str] = &["learning_rate", "rule", "rank", "final_loss", "best_flag"];

    fn to_fields(&self) -> Vec<String> {
        vec![
            fmt_f64(self.learning_rate),
            self.rule.clone(),
            self.rank.to_string(),
            fmt_f64(self.final_loss),
            self.best_flag.to_string(),
        ]
    }

    fn from_fields(f: &[&str]) -> Result<Self> {
        Ok(Self {
            learning_rate: parse(f[0], "learning_rate")?,
            rule: f[1].to_string(),
            rank: parse(f[2], "rank")?,
            final_loss: parse(f[3], "final_loss")?,
            best_flag: parse(f[4], "best_flag")?,
        })
    }
}

impl CsvRow for CellSummary {
    const HEADER: &'static [&'static str] = &[
        "rule",
        "nu",
        "alpha",
        "rank",
        "seed",
        "final_loss",
        "final_perplexity",
        "diverged",
    ];

    fn to_fields(&self) -> Vec<String> {
        vec![
            self.rule.clone(),
            fmt_f64(self.nu),
            fmt_f64(self.alpha),
            self.rank.to_string(),
            self.seed.to_string(),
            fmt_f64(self.final_loss),
            fmt_opt(self.final_perplexity),
            self.diverged.to_string(),
        ]
    }

    fn from_fields(f: &[&str]) -> Result<Self> {
        Ok(Self {
            rule: f[0].to_string(),
            nu: parse(f[1], "nu")?,
            alpha: parse(f[2], "alpha")?,
            rank: parse(f[3], "rank")?,
            seed: parse(f[4], "seed")?,
            final_loss: parse(f[5], "final_loss")?,
            final_perplexity: parse_opt(f[6], "final_perplexity")?,
            diverged: parse(f[7], "diverged")?,
        })
    }
}

/// First-order trajectory prediction against exact SGD after `step` updates.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleRow {
    pub step: usize,
    pub rank: usize,
    pub rule: String,
    pub nu: f64,
    pub alpha: f64,
    pub pred_b_norm: f64,
    pub b_residual: f64,
    pub b_relative: f64,
    pub a_residual: f64,
}

impl CsvRow for OracleRow {
    const HEADER: &'static [&'static str] = &[
        "step",
        "rank",
        "rule",
        "nu",
        "alpha",
        "pred_b_norm",
        "b_residual",
        "b_relative",
        "a_residual",
    ];

    fn to_fields(&self) -> Vec<String> {
        vec![
            self.step.to_string(),
            self.rank.to_string(),
            self.rule.clone(),
            fmt_f64(self.nu),
            fmt_f64(self.alpha),
            fmt_f64(self.pred_b_norm),
            fmt_f64(self.b_residual),
            fmt_f64(self.b_relative),
            fmt_f64(self.a_residual),
        ]
    }

    fn from_fields(f: &[&str]) -> Result<Self> {
        Ok(Self {
            step: parse(f[0], "step")?,
            rank: parse(f[1], "rank")?,
            rule: f[2].to_string(),
            nu: parse(f[3], "nu")?,
            alpha: parse(f[4], "alpha")?,
            pred_b_norm: parse(f[5], "pred_b_norm")?,
            b_residual: parse(f[6], "b_residual")?,
            b_relative: parse(f[7], "b_relative")?,
            a_residual: parse(f[8], "a_residual")?,
        })
    }
}

/// Writes `trajectory.csv` and `finals.csv`, plus `lrsweep.csv` when the output has sweep rows.
pub fn emit_reports(output: &ExperimentOutput, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::new();
    let traj = out_dir.join("trajectory.csv");
    write_csv(&traj, &output.records)?;
    paths.push(traj);
    let finals = out_dir.join("finals.csv");
    write_csv(&finals, &output.finals)?;
    paths.push(finals);
    if !output.lrsweep.is_empty() {
        let lr = out_dir.join("lrsweep.csv");
        write_csv(&lr, &output.lrsweep)?;
        paths.push(lr);
    }
    Ok(paths)
}

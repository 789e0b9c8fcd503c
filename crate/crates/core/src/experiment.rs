//! Ablation ladder and High-m / Low-m transfer tasks over seeded suites.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::DomainSet;
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricReport, Prediction, ScoreScaling};
use crate::nn::ModelParams;
use crate::synthgen::{generate_suite, SuiteSpec};
use crate::train::{train_observed, CsdMode, Precomputed, TrainConfig, TrainHistory, TrainObserver};

/// Model variants, each adding one component to the previous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    Base,
    CsdNoEdge,
    Csd,
    CsdSmst,
    Full,
}

impl Variant {
    pub const LADDER: [Variant; 5] = [
        Variant::Base,
        Variant::CsdNoEdge,
        Variant::Csd,
        Variant::CsdSmst,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::CsdNoEdge => "+csd-noedge",
            Variant::Csd => "+csd",
            Variant::CsdSmst => "+csd+smst",
            Variant::Full => "+csd+smst+ar",
        }
    }

    /// Name usable as a directory component.
    pub fn slug(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::CsdNoEdge => "csd-noedge",
            Variant::Csd => "csd",
            Variant::CsdSmst => "csd-smst",
            Variant::Full => "csd-smst-ar",
        }
    }

    /// Training configuration for this variant.
    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.csd = match self {
            Variant::Base => CsdMode::Off,
            Variant::CsdNoEdge => CsdMode::Unweighted,
            _ => CsdMode::Weighted,
        };
        cfg.selective = matches!(self, Variant::CsdSmst | Variant::Full);
        cfg
    }

    /// Mixing coefficient used at inference; 1 disables refinement.
    pub fn lambda(self, base: &TrainConfig) -> f64 {
        if self == Variant::Full {
            base.lambda
        } else {
            1.0
        }
    }

    pub fn needs_signatures(self) -> bool {
        !matches!(self, Variant::Base | Variant::CsdNoEdge)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Variant> {
        Variant::LADDER.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Variant::LADDER.iter().map(|v| v.name()).collect();
            Error::config("experiment.variant", format!("unknown variant `{s}`; expected one of {}", names.join(", ")))
        })
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Variant> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.name().to_string()
    }
}

pub struct VariantRun {
    pub variant: Variant,
    pub params: ModelParams,
    pub history: TrainHistory,
    pub predictions: Vec<Prediction>,
    pub report: MetricReport,
}

/// Trains one variant and scores it on the target.
pub fn run_variant(
    ds: &DomainSet,
    pre: &Precomputed,
    cfg: &TrainConfig,
    variant: Variant,
    scaling: ScoreScaling,
    obs: &mut dyn TrainObserver,
) -> Result<VariantRun> {
    let vcfg = variant.configure(cfg);
    let (params, history) = train_observed(ds, &vcfg, pre, obs)?;
    let (predictions, report) = evaluate(ds, &params, variant.lambda(cfg), scaling)?;
    Ok(VariantRun {
        variant,
        params,
        history,
        predictions,
        report,
    })
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Suite and training seeds for run index `seed`.
pub fn seeded(suite: &SuiteSpec, cfg: &TrainConfig, seed: u64) -> (SuiteSpec, TrainConfig) {
    let mut s = suite.clone();
    s.seed = suite.seed.wrapping_add(seed);
    let mut c = cfg.clone();
    c.seed = cfg.seed.wrapping_add(seed);
    (s, c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub f1: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub variant: Variant,
    pub runs: usize,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub auc_mean: f64,
    pub auc_std: f64,
}

/// Runs every variant on every seed. Rows come back in ladder order, then
/// seed order, independent of scheduling.
pub fn ablate_sets(
    sets: &[(u64, DomainSet, Precomputed)],
    cfg: &TrainConfig,
    variants: &[Variant],
    scaling: ScoreScaling,
) -> Result<Vec<AblationRow>> {
    let cells: Vec<(Variant, usize)> = variants
        .iter()
        .flat_map(|&v| (0..sets.len()).map(move |i| (v, i)))
        .collect();
    cells
        .par_iter()
        .map(|&(variant, i)| {
            let (seed, ds, pre) = &sets[i];
            let (_, c) = seeded(&SuiteSpec::default(), cfg, *seed);
            let run = run_variant(ds, pre, &c, variant, scaling, &mut ())?;
            log::info!("{variant} seed {seed}: f1 {:.4} auc {:.4}", run.report.f1, run.report.auc);
            Ok(AblationRow {
                variant,
                seed: *seed,
                f1: run.report.f1,
                auc: run.report.auc,
            })
        })
        .collect()
}

/// Generates one suite per seed and runs the ladder on each.
pub fn ablate(
    suite: &SuiteSpec,
    cfg: &TrainConfig,
    seeds: &[u64],
    variants: &[Variant],
    scaling: ScoreScaling,
) -> Result<Vec<AblationRow>> {
    let sets = seeds
        .par_iter()
        .map(|&seed| {
            let (s, _) = seeded(suite, cfg, seed);
            let ds = generate_suite(&s)?;
            let pre = Precomputed::compute(&ds);
            Ok((seed, ds, pre))
        })
        .collect::<Result<Vec<_>>>()?;
    ablate_sets(&sets, cfg, variants, scaling)
}

pub fn summarize_ablation(rows: &[AblationRow]) -> Vec<AblationSummary> {
    let mut variants: Vec<Variant> = rows.iter().map(|r| r.variant).collect();
    variants.sort();
    variants.dedup();
    variants
        .into_iter()
        .map(|variant| {
            let f1: Vec<f64> = rows.iter().filter(|r| r.variant == variant).map(|r| r.f1).collect();
            let auc: Vec<f64> = rows.iter().filter(|r| r.variant == variant).map(|r| r.auc).collect();
            let (f1_mean, f1_std) = mean_std(&f1);
            let (auc_mean, auc_std) = mean_std(&auc);
            AblationSummary {
                variant,
                runs: f1.len(),
                f1_mean,
                f1_std,
                auc_mean,
                auc_std,
            }
        })
        .collect()
}

pub fn ablation_runs_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,seed,f1,auc\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.variant, r.seed, r.f1, r.auc));
    }
    out
}

pub fn ablation_table_csv(summary: &[AblationSummary]) -> String {
    let mut out = String::from("variant,runs,f1_mean,f1_std,auc_mean,auc_std\n");
    for s in summary {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.variant, s.runs, s.f1_mean, s.f1_std, s.auc_mean, s.auc_std
        ));
    }
    out
}

/// Source indices of the `m` most relevant (smallest shift) and `m` least
/// relevant sources. Sources are ordered by increasing shift.
pub fn task_sources(num_sources: usize, m: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if m == 0 || num_sources < 2 * m {
        return Err(Error::input(format!("High-{m}/Low-{m} tasks need at least {} sources, have {num_sources}", 2 * m)));
    }
    Ok(((0..m).collect(), (num_sources - m..num_sources).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task: String,
    pub seed: u64,
    pub m: usize,
    pub mode: Variant,
    pub f1: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: String,
    pub m: usize,
    pub mode: Variant,
    pub runs: usize,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub auc_mean: f64,
    pub auc_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub rows: Vec<TaskRow>,
    pub summary: Vec<TaskSummary>,
}

impl TaskReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,seed,m,mode,f1,auc\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{},{}\n", r.task, r.seed, r.m, r.mode, r.f1, r.auc));
        }
        out
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary serializes")
    }
}

/// Trains and evaluates High-m and Low-m transfer for each seed and variant.
pub fn run_task_suite(
    suite: &SuiteSpec,
    cfg: &TrainConfig,
    m: usize,
    seeds: &[u64],
    variants: &[Variant],
    scaling: ScoreScaling,
) -> Result<TaskReport> {
    let (high, low) = task_sources(suite.num_sources(), m)?;
    let tasks = [(format!("High-{m}"), high), (format!("Low-{m}"), low)];
    let mut cells = Vec::new();
    for (t, _) in tasks.iter().enumerate() {
        for &v in variants {
            for &seed in seeds {
                cells.push((t, v, seed));
            }
        }
    }
    let rows = cells
        .par_iter()
        .map(|&(t, variant, seed)| {
            let (s, c) = seeded(suite, cfg, seed);
            let full = generate_suite(&s)?;
            let ds = full.select_sources(&tasks[t].1)?;
            let pre = Precomputed::compute(&ds);
            let run = run_variant(&ds, &pre, &c, variant, scaling, &mut ())?;
            Ok(TaskRow {
                task: tasks[t].0.clone(),
                seed,
                m,
                mode: variant,
                f1: run.report.f1,
                auc: run.report.auc,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut summary = Vec::new();
    for (name, _) in &tasks {
        for &mode in variants {
            let sel: Vec<&TaskRow> = rows.iter().filter(|r| &r.task == name && r.mode == mode).collect();
            let (f1_mean, f1_std) = mean_std(&sel.iter().map(|r| r.f1).collect::<Vec<_>>());
            let (auc_mean, auc_std) = mean_std(&sel.iter().map(|r| r.auc).collect::<Vec<_>>());
            summary.push(TaskSummary {
                task: name.clone(),
                m,
                mode,
                runs: sel.len(),
                f1_mean,
                f1_std,
                auc_mean,
                auc_std,
            });
        }
    }
    Ok(TaskReport { rows, summary })
}

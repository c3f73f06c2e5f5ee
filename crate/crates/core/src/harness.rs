//! Experiment configuration, orchestration and result files.
//!
//! A run fans out over `(seed, variant)` pairs on the rayon pool. Results are
//! collected in seed-major order and written by the caller, so the emitted
//! CSV files do not depend on scheduling.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::{
    full_network_optimal_smooth, optimal_partition_probs, optimal_rpt_probs_l0l1, optimal_rpt_probs_smooth,
    total_cost, CostBreakdown, CostError, CostParams, CostRegime, L0L1Regime, PartitionObjective, SmoothnessTable,
    TableMode,
};
use crate::geometry::{NormKind, Orthogonalizer};
use crate::optimizer::{run, theory_weights, LayerModel, MomentumInit, RunConfig, StepPolicy, WeightRegime};
use crate::problems::{NoiseSpec, Objective, Problem, ProblemSpec, TableLayout};
use crate::sampling::SamplingScheme;

pub const SCHEMA_VERSION: u32 = 1;

/// Column order of every per-run CSV file.
pub const CSV_COLUMNS: [&str; 9] = [
    "k",
    "f",
    "f_gap",
    "grad_aggregate",
    "active_min",
    "active_size",
    "step_units",
    "cumulative_units",
    "measured_macs",
];

const CSV_COLUMN_DOCS: [(&str, &str, &str); 9] = [
    ("integer", "", "iteration index, starting at 0"),
    ("float", "", "objective after the step"),
    ("float", "", "f minus the optimal value (0 when unknown)"),
    ("float", "", "weighted dual-norm gradient aggregate at the start of the step; empty when weights are undefined"),
    ("integer", "", "smallest active layer (0-based)"),
    ("integer", "", "number of active layers"),
    ("float", "cost-model units", "cost of this step"),
    ("float", "cost-model units", "cost of steps 0..=k"),
    ("integer", "multiply-accumulates", "operations of this step's gradient evaluation; empty when not counted"),
];

/// Slack for the per-step monotonicity and descent-bound checks.
const CHECK_SLACK: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {message}")]
    Config { path: String, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("variant '{variant}', seed {seed}: {message}")]
    Run { variant: String, seed: u64, message: String },
    #[error(transparent)]
    Cost(#[from] CostError),
}

fn config_err(path: impl Into<String>, message: impl ToString) -> HarnessError {
    HarnessError::Config { path: path.into(), message: message.to_string() }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.display().to_string(), source }
}

/// Parse a JSON document, reporting the field path of any error.
pub fn parse_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T, HarnessError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        config_err(path, e.into_inner())
    })
}

/// Read and parse a JSON file.
pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_json(&text).map_err(|e| match e {
        HarnessError::Config { path: field, message } => {
            HarnessError::Config { path: format!("{}: {field}", path.display()), message }
        }
        other => other,
    })
}

/// JSON given inline (starting with `{`) or as a file path.
pub fn load_json_arg<T: for<'de> Deserialize<'de>>(arg: &str) -> Result<T, HarnessError> {
    if arg.trim_start().starts_with('{') {
        parse_json(arg)
    } else {
        load_json(Path::new(arg))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantConfig {
    /// Used in output file names; letters, digits, `-` and `_`.
    pub name: String,
    pub scheme: SamplingScheme,
    pub policy: StepPolicy,
    #[serde(default)]
    pub epoch_shift_alpha: Option<f64>,
    #[serde(default)]
    pub momentum_init: MomentumInit,
    #[serde(default)]
    pub orthogonalizer: Orthogonalizer,
}

/// How `targets` are read: absolute f-gaps, or fractions of the initial gap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    #[default]
    Absolute,
    Relative,
}

/// Per-run checks recorded in the summary.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyToggles {
    /// `f` non-increasing at every step.
    pub monotone: bool,
    /// `f` below the descent-inequality bound at every step that reports one.
    pub descent_bound: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    /// Seed for the problem data; each run's own seed when absent.
    #[serde(default)]
    pub data_seed: Option<u64>,
    pub norms: Vec<NormKind>,
    #[serde(default = "one")]
    pub init_scale: f64,
    pub iterations: usize,
    pub seeds: Vec<u64>,
    pub cost: CostParams,
    /// Smoothness constants for every run; computed from the problem when absent.
    #[serde(default)]
    pub table: Option<SmoothnessTable>,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    #[serde(default)]
    pub targets: Vec<f64>,
    #[serde(default)]
    pub target_mode: TargetMode,
    pub variants: Vec<VariantConfig>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub verify: VerifyToggles,
}

fn one() -> f64 {
    1.0
}

fn layout_for(scheme: &SamplingScheme) -> TableLayout {
    match scheme {
        SamplingScheme::Partitioned { blocks, .. } => TableLayout::Partition { blocks: blocks.clone() },
        _ => TableLayout::Rpt,
    }
}

fn table_covers(table: &SmoothnessTable, scheme: &SamplingScheme) -> bool {
    table.num_layers() == scheme.num_layers() && scheme.support().iter().all(|s| table.key_for(s).is_ok())
}

fn weight_regime(policy: &StepPolicy, table: Option<&SmoothnessTable>, b: usize) -> WeightRegime {
    match policy {
        StepPolicy::SmoothInverse => WeightRegime::Smooth,
        StepPolicy::GenSmoothInverse if table.is_some_and(SmoothnessTable::has_l1) => WeightRegime::L0L1,
        StepPolicy::GenSmoothInverse => WeightRegime::Smooth,
        StepPolicy::FixedRadius { radii, .. } => WeightRegime::Stochastic { eta: radii.clone() },
        StepPolicy::HorizonSchedule { eta } => {
            WeightRegime::Stochastic { eta: eta.clone().unwrap_or_else(|| vec![1.0; b]) }
        }
    }
}

fn cost_regime(policy: &StepPolicy, table: &SmoothnessTable) -> CostRegime {
    match policy {
        StepPolicy::GenSmoothInverse if table.has_l1() => CostRegime::L0L1Eps,
        _ => CostRegime::Smooth,
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = parse_json(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let cfg: Self = load_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn data_seed(&self, seed: u64) -> u64 {
        self.data_seed.unwrap_or(seed)
    }

    fn run_config(&self, v: &VariantConfig, seed: u64) -> RunConfig {
        RunConfig {
            scheme: v.scheme.clone(),
            epoch_shift_alpha: v.epoch_shift_alpha,
            policy: v.policy.clone(),
            iterations: self.iterations,
            seed,
            noise: self.noise.clone(),
            momentum_init: v.momentum_init,
            orthogonalizer: v.orthogonalizer,
            cost: Some(self.cost.clone()),
        }
    }

    /// Check everything that can be checked without running. Errors name the
    /// offending field.
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "must list at least one seed"));
        }
        let mut seen = BTreeSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(config_err("seeds", format!("seed {s} is listed twice")));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(config_err("init_scale", "must be finite and non-negative"));
        }
        for (i, t) in self.targets.iter().enumerate() {
            if !(t.is_finite() && *t > 0.0) {
                return Err(config_err(format!("targets[{i}]"), "must be positive"));
            }
        }
        let problem = self.problem.build(self.data_seed(self.seeds[0])).map_err(|e| config_err("problem", e))?;
        let b = problem.num_layers();
        if self.norms.len() != b {
            return Err(config_err("norms", format!("{} entries for {b} layers", self.norms.len())));
        }
        self.cost.validate().map_err(|e| config_err("cost", e))?;
        if self.cost.num_layers() != b {
            return Err(config_err("cost.c", format!("{} entries for {b} layers", self.cost.num_layers())));
        }
        if let Some(noise) = &self.noise {
            noise.validate(b).map_err(|e| config_err("noise", e))?;
        }
        if let Some(t) = &self.table {
            if t.num_layers() != b {
                return Err(config_err("table", format!("covers {} layers, problem has {b}", t.num_layers())));
            }
        }
        if self.variants.is_empty() {
            return Err(config_err("variants", "must list at least one variant"));
        }
        let mut names = BTreeSet::new();
        for (i, v) in self.variants.iter().enumerate() {
            let at = |field: &str| format!("variants[{i}].{field}");
            if v.name.is_empty() || !v.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return Err(config_err(at("name"), format!("'{}' must be non-empty ASCII letters, digits, '-' or '_'", v.name)));
            }
            if !names.insert(v.name.as_str()) {
                return Err(config_err(at("name"), format!("'{}' is used twice", v.name)));
            }
            self.run_config(v, self.seeds[0]).validate(b).map_err(|e| config_err(format!("variants[{i}]"), e))?;
            if v.policy.is_deterministic() {
                match &self.table {
                    Some(t) if !table_covers(t, &v.scheme) => {
                        return Err(config_err(
                            at("scheme"),
                            "the supplied table has no constants for some sets this scheme samples",
                        ));
                    }
                    None if !matches!(
                        v.scheme,
                        SamplingScheme::Rpt { .. } | SamplingScheme::FullNetwork { .. } | SamplingScheme::Partitioned { .. }
                    ) =>
                    {
                        return Err(config_err(
                            at("scheme"),
                            "deterministic policies need constants for every sampled set; use rpt, full_network or partitioned",
                        ));
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub k: usize,
    pub f: f64,
    pub f_gap: f64,
    pub grad_aggregate: Option<f64>,
    pub active_min: usize,
    pub active_size: usize,
    pub step_units: f64,
    pub cumulative_units: f64,
    pub measured_macs: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunChecks {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub monotone: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub descent_bound: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub variant: String,
    pub seed: u64,
    pub initial_f: f64,
    pub f_star: f64,
    pub setup_units: f64,
    pub setup_macs: Option<u64>,
    pub rows: Vec<RunRow>,
    pub checks: RunChecks,
    pub warnings: Vec<String>,
}

impl RunRecord {
    pub fn final_f(&self) -> f64 {
        self.rows.last().map_or(self.initial_f, |r| r.f)
    }

    pub fn csv_name(&self) -> String {
        format!("{}_seed{}.csv", self.variant, self.seed)
    }
}

fn build_problem(cfg: &ExperimentConfig, seed: u64) -> Result<Problem, String> {
    cfg.problem.build(cfg.data_seed(seed)).map_err(|e| e.to_string())
}

fn resolve_table(
    cfg: &ExperimentConfig,
    problem: &Problem,
    scheme: &SamplingScheme,
    x0: &[crate::geometry::Matrix],
    seed: u64,
) -> Result<SmoothnessTable, String> {
    match &cfg.table {
        Some(t) => Ok(t.clone()),
        None => problem.smoothness_table(&cfg.norms, &layout_for(scheme), x0, seed).map_err(|e| e.to_string()),
    }
}

fn run_one(cfg: &ExperimentConfig, v: &VariantConfig, seed: u64) -> Result<RunRecord, String> {
    let problem = build_problem(cfg, seed)?;
    let b = problem.num_layers();
    let x0 = problem.initial_point(seed, cfg.init_scale);
    let table = resolve_table(cfg, &problem, &v.scheme, &x0, seed)?;
    let mut warnings = Vec::new();
    if table.approximate {
        warnings.push("smoothness constants are sampled estimates".to_string());
    }
    let table = table_covers(&table, &v.scheme).then_some(table);
    let model = LayerModel::new(x0, cfg.norms.clone()).map_err(|e| e.to_string())?;
    let out = run(&problem, model, &cfg.run_config(v, seed), table.as_ref()).map_err(|e| e.to_string())?;

    let f_star = problem.optimal_value().unwrap_or_else(|| {
        warnings.push("optimal value unknown; f_gap is measured against 0".to_string());
        0.0
    });
    let weights = match theory_weights(&v.scheme, table.as_ref(), &weight_regime(&v.policy, table.as_ref(), b)) {
        Ok(w) => Some(w),
        Err(e) => {
            warnings.push(format!("grad_aggregate left empty: {e}"));
            None
        }
    };

    let mut cumulative = 0.0;
    let rows = out
        .reports
        .iter()
        .map(|r| {
            let step_units = r.cost_units.unwrap_or(0.0);
            cumulative += step_units;
            RunRow {
                k: r.k,
                f: r.f_after,
                f_gap: r.f_after - f_star,
                grad_aggregate: weights.as_ref().map(|w| w.aggregate(&r.full_grad_dual_norms)),
                active_min: r.active.min_index(),
                active_size: r.active.len(),
                step_units,
                cumulative_units: cumulative,
                measured_macs: r.macs,
            }
        })
        .collect();

    let checks = RunChecks {
        monotone: cfg.verify.monotone.then(|| out.reports.iter().all(|r| r.f_after <= r.f_before + CHECK_SLACK)),
        descent_bound: cfg.verify.descent_bound.then(|| {
            out.reports
                .iter()
                .filter_map(|r| r.descent_bound.map(|bound| (r.f_after, bound)))
                .all(|(f, bound)| f <= bound + CHECK_SLACK * bound.abs().max(1.0))
        }),
    };

    Ok(RunRecord {
        variant: v.name.clone(),
        seed,
        initial_f: out.initial_value,
        f_star,
        setup_units: out.setup_units,
        setup_macs: out.setup_macs,
        rows,
        checks,
        warnings,
    })
}

/// Run every `(seed, variant)` pair. Records come back seed-major, variants
/// in config order.
pub fn execute(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>, HarnessError> {
    cfg.validate()?;
    let jobs: Vec<(u64, &VariantConfig)> =
        cfg.seeds.iter().flat_map(|&s| cfg.variants.iter().map(move |v| (s, v))).collect();
    jobs.par_iter()
        .map(|&(seed, v)| {
            run_one(cfg, v, seed).map_err(|message| HarnessError::Run { variant: v.name.clone(), seed, message })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeToTarget {
    pub target: f64,
    /// Absolute f-gap threshold.
    pub threshold: f64,
    pub reached: bool,
    /// Steps taken when the threshold was first met; 0 if met initially.
    pub steps: Option<usize>,
    pub units: Option<f64>,
    pub macs: Option<u64>,
}

/// First row with `f_gap ≤ threshold`, no interpolation.
pub fn time_to_target(record: &RunRecord, target: f64, mode: TargetMode) -> TimeToTarget {
    let initial_gap = record.initial_f - record.f_star;
    let threshold = match mode {
        TargetMode::Absolute => target,
        TargetMode::Relative => target * initial_gap,
    };
    let miss = TimeToTarget { target, threshold, reached: false, steps: None, units: None, macs: None };
    if initial_gap <= threshold {
        return TimeToTarget { reached: true, steps: Some(0), units: Some(0.0), macs: Some(0), ..miss };
    }
    let Some(pos) = record.rows.iter().position(|r| r.f_gap <= threshold) else {
        return miss;
    };
    let macs = record.rows[..=pos].iter().map(|r| r.measured_macs).sum::<Option<u64>>();
    TimeToTarget {
        reached: true,
        steps: Some(pos + 1),
        units: Some(record.rows[pos].cumulative_units),
        macs,
        ..miss
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: String,
    pub seed: u64,
    pub csv: String,
    pub initial_f: f64,
    pub final_f: f64,
    pub f_star: f64,
    pub setup_units: f64,
    pub setup_macs: Option<u64>,
    pub time_to_target: Vec<TimeToTarget>,
    pub checks: RunChecks,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
}

/// Model prediction for one variant, with `δ⁰ = ε = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub variant: String,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostBreakdown>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Baseline units over variant units at a target, per seed where both
/// reached it. Values above one favor the variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    pub variant: String,
    pub baseline: String,
    pub target: f64,
    pub per_seed: Vec<Option<f64>>,
    pub seeds_compared: usize,
    pub arithmetic_mean: Option<f64>,
    pub geometric_mean: Option<f64>,
    /// Ratio of predicted total costs, when both predictions exist.
    pub predicted: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryMetadata {
    pub generated_unix_seconds: u64,
    pub tool_version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub metadata: SummaryMetadata,
    pub iterations: usize,
    pub seeds: Vec<u64>,
    pub targets: Vec<f64>,
    pub target_mode: TargetMode,
    pub runs: Vec<RunSummary>,
    pub predicted: Vec<Prediction>,
    pub speedups: Vec<Speedup>,
}

fn predict(cfg: &ExperimentConfig) -> Vec<Prediction> {
    let first = cfg.seeds[0];
    cfg.variants
        .iter()
        .map(|v| {
            let result = build_problem(cfg, first).and_then(|problem| {
                let x0 = problem.initial_point(first, cfg.init_scale);
                let table = resolve_table(cfg, &problem, &v.scheme, &x0, first)?;
                total_cost(&v.scheme, &cfg.cost, &table, 1.0, 1.0, cost_regime(&v.policy, &table), false)
                    .map_err(|e| e.to_string())
            });
            match result {
                Ok(cost) => Prediction { variant: v.name.clone(), cost: Some(cost), error: None },
                Err(e) => Prediction { variant: v.name.clone(), cost: None, error: Some(e) },
            }
        })
        .collect()
}

fn means(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let arith = values.iter().sum::<f64>() / n;
    let geo = (values.iter().map(|v| v.ln()).sum::<f64>() / n).exp();
    (Some(arith), Some(geo))
}

/// Assemble the summary. `generated_unix_seconds` is the only
/// non-reproducible field.
pub fn summarize(cfg: &ExperimentConfig, records: &[RunRecord], generated_unix_seconds: u64) -> Summary {
    let runs: Vec<RunSummary> = records
        .iter()
        .map(|r| RunSummary {
            variant: r.variant.clone(),
            seed: r.seed,
            csv: r.csv_name(),
            initial_f: r.initial_f,
            final_f: r.final_f(),
            f_star: r.f_star,
            setup_units: r.setup_units,
            setup_macs: r.setup_macs,
            time_to_target: cfg.targets.iter().map(|&t| time_to_target(r, t, cfg.target_mode)).collect(),
            checks: r.checks.clone(),
            warnings: r.warnings.clone(),
        })
        .collect();
    let predicted = predict(cfg);
    let total = |name: &str| predicted.iter().find(|p| p.variant == name).and_then(|p| p.cost.as_ref()).map(|c| c.total);

    let baseline = &cfg.variants[0].name;
    let find = |variant: &str, seed: u64| runs.iter().find(|r| r.variant == variant && r.seed == seed);
    let mut speedups = Vec::new();
    for v in cfg.variants.iter().skip(1) {
        for (ti, &target) in cfg.targets.iter().enumerate() {
            let per_seed: Vec<Option<f64>> = cfg
                .seeds
                .iter()
                .map(|&seed| {
                    let base = find(baseline, seed)?.time_to_target[ti].units?;
                    let this = find(&v.name, seed)?.time_to_target[ti].units?;
                    (this > 0.0 && base > 0.0).then(|| base / this)
                })
                .collect();
            let values: Vec<f64> = per_seed.iter().flatten().copied().collect();
            let (arithmetic_mean, geometric_mean) = means(&values);
            let predicted = match (total(baseline), total(&v.name)) {
                (Some(b), Some(t)) if t > 0.0 => Some(b / t),
                _ => None,
            };
            speedups.push(Speedup {
                variant: v.name.clone(),
                baseline: baseline.clone(),
                target,
                seeds_compared: values.len(),
                per_seed,
                arithmetic_mean,
                geometric_mean,
                predicted,
            });
        }
    }

    Summary {
        schema_version: SCHEMA_VERSION,
        metadata: SummaryMetadata {
            generated_unix_seconds,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        },
        iterations: cfg.iterations,
        seeds: cfg.seeds.clone(),
        targets: cfg.targets.clone(),
        target_mode: cfg.target_mode,
        runs,
        predicted,
        speedups,
    }
}

/// Write one record as CSV. The header is written even when there are no rows.
pub fn write_csv<W: std::io::Write>(record: &RunRecord, out: W) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for row in &record.rows {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Parse a CSV file written by [`write_csv`], checking the header.
pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<RunRow>, HarnessError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_COLUMNS {
        return Err(config_err("csv header", format!("expected {CSV_COLUMNS:?}, found {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(HarnessError::from)).collect()
}

/// Column manifest written next to the CSV files.
pub fn csv_schema() -> serde_json::Value {
    let columns: Vec<serde_json::Value> = CSV_COLUMNS
        .iter()
        .zip(CSV_COLUMN_DOCS)
        .map(|(name, (ty, unit, description))| {
            serde_json::json!({ "name": name, "type": ty, "unit": unit, "description": description })
        })
        .collect();
    serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "file_pattern": "{variant}_seed{seed}.csv",
        "delimiter": ",",
        "columns": columns,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Write the CSV files, `schema.json` and `summary.json` into `dir`.
pub fn write_outputs(dir: &Path, records: &[RunRecord], summary: &Summary) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for r in records {
        let path = dir.join(r.csv_name());
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        write_csv(r, std::io::BufWriter::new(file))?;
    }
    write_json(&dir.join("schema.json"), &csv_schema())?;
    write_json(&dir.join("summary.json"), summary)
}

/// Load, run and write an experiment. `seed` replaces the configured seed
/// list; `out` overrides the configured output directory.
pub fn cmd_run(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<Summary, HarnessError> {
    let mut cfg: ExperimentConfig = load_json(config)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| config_err("out", "no output directory; pass --out or set \"out\""))?;
    let records = execute(&cfg)?;
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let summary = summarize(&cfg, &records, now);
    write_outputs(&dir, &records, &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimalProbsReport {
    pub regime: CostRegime,
    pub table_mode: TableMode,
    pub p: Vec<f64>,
    pub objective: f64,
    /// `None` for partitioned tables, where full-network training is not a candidate.
    pub full_network_optimal: Option<bool>,
    pub verdict: String,
    /// Whether layer 0 has the largest full-set constant.
    pub first_layer_is_max: Option<bool>,
}

/// Optimal sampling probabilities for a table and cost parameters.
pub fn optimal_probs(table: &SmoothnessTable, cp: &CostParams, regime: CostRegime) -> Result<OptimalProbsReport, HarnessError> {
    let verdict = |opt: Option<bool>| match opt {
        Some(true) => "full-network optimal".to_string(),
        Some(false) => "full-network not optimal".to_string(),
        None => "not applicable".to_string(),
    };
    match table.mode() {
        TableMode::Partition => {
            let objective = match regime {
                CostRegime::Smooth => PartitionObjective::Smooth,
                CostRegime::L0L1Eps => PartitionObjective::L0L1Eps,
                CostRegime::L0L1Eps2 => {
                    return Err(config_err("regime", "partitioned tables support smooth and l0l1-eps only"));
                }
            };
            let opt = optimal_partition_probs(table, cp, objective)?;
            Ok(OptimalProbsReport {
                regime,
                table_mode: TableMode::Partition,
                p: opt.p,
                objective: opt.min_cost,
                full_network_optimal: None,
                verdict: verdict(None),
                first_layer_is_max: None,
            })
        }
        TableMode::RptCutoff => match regime {
            CostRegime::Smooth => {
                let opt = optimal_rpt_probs_smooth(table, cp)?;
                let full = full_network_optimal_smooth(table)?;
                Ok(OptimalProbsReport {
                    regime,
                    table_mode: TableMode::RptCutoff,
                    p: opt.p,
                    objective: opt.objective,
                    full_network_optimal: Some(full),
                    verdict: verdict(Some(full)),
                    first_layer_is_max: Some(full),
                })
            }
            CostRegime::L0L1Eps | CostRegime::L0L1Eps2 => {
                let r = if regime == CostRegime::L0L1Eps { L0L1Regime::Eps } else { L0L1Regime::Eps2 };
                let sol = optimal_rpt_probs_l0l1(table, cp, r)?;
                let full = !sol.beats_full_network;
                Ok(OptimalProbsReport {
                    regime,
                    table_mode: TableMode::RptCutoff,
                    p: sol.p,
                    objective: sol.objective,
                    full_network_optimal: Some(full),
                    verdict: verdict(Some(full)),
                    first_layer_is_max: Some(sol.first_layer_is_max),
                })
            }
        },
    }
}

pub fn cmd_optimal_probs(table: &str, cost: &str, regime: CostRegime) -> Result<OptimalProbsReport, HarnessError> {
    let table: SmoothnessTable = load_json_arg(table)?;
    let cp: CostParams = load_json_arg(cost)?;
    optimal_probs(&table, &cp, regime)
}

pub fn cmd_cost(
    scheme: &str,
    cost: &str,
    table: &str,
    regime: CostRegime,
    delta0: f64,
    eps: f64,
) -> Result<CostBreakdown, HarnessError> {
    let scheme: SamplingScheme = load_json_arg(scheme)?;
    scheme.validate().map_err(|e| config_err("scheme", e))?;
    let cp: CostParams = load_json_arg(cost)?;
    let table: SmoothnessTable = load_json_arg(table)?;
    Ok(total_cost(&scheme, &cp, &table, delta0, eps, regime, true)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config_json(iterations: usize) -> String {
        format!(
            r#"{{
                "problem": {{"kind": "separable_quadratic", "shapes": [[3, 2], [2, 2], [2, 3]], "curvatures": [1.0, 2.0, 0.5]}},
                "norms": ["spectral", "euclidean", "spectral"],
                "iterations": {iterations},
                "seeds": [1, 2],
                "cost": {{"c_ov": 1.0, "c": [1.0, 1.0, 1.0], "c_sharp": [0.5, 0.5, 0.5]}},
                "targets": [1e-2, 1e-6],
                "target_mode": "relative",
                "verify": {{"monotone": true, "descent_bound": true}},
                "variants": [
                    {{"name": "full", "scheme": {{"kind": "full_network", "b": 3}}, "policy": {{"kind": "smooth_inverse"}}}},
                    {{"name": "rpt", "scheme": {{"kind": "rpt", "p": [0.5, 0.3, 0.2]}}, "policy": {{"kind": "smooth_inverse"}}}}
                ]
            }}"#
        )
    }

    #[test]
    fn parses_and_runs_in_seed_major_order() {
        let cfg = ExperimentConfig::from_json(&config_json(30)).unwrap();
        let records = execute(&cfg).unwrap();
        let order: Vec<(u64, &str)> = records.iter().map(|r| (r.seed, r.variant.as_str())).collect();
        assert_eq!(order, vec![(1, "full"), (1, "rpt"), (2, "full"), (2, "rpt")]);
        for r in &records {
            assert_eq!(r.rows.len(), 30);
            assert_eq!(r.checks.monotone, Some(true));
            assert_eq!(r.checks.descent_bound, Some(true));
            assert!(r.rows.windows(2).all(|w| w[1].cumulative_units >= w[0].cumulative_units));
        }
    }

    #[test]
    fn zero_iterations_gives_empty_rows() {
        let cfg = ExperimentConfig::from_json(&config_json(0)).unwrap();
        let records = execute(&cfg).unwrap();
        assert!(records.iter().all(|r| r.rows.is_empty() && r.final_f() == r.initial_f));
        let mut buf = Vec::new();
        write_csv(&records[0], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{}\n", CSV_COLUMNS.join(",")));
    }

    #[test]
    fn csv_round_trip() {
        let cfg = ExperimentConfig::from_json(&config_json(12)).unwrap();
        let records = execute(&cfg).unwrap();
        let mut buf = Vec::new();
        write_csv(&records[1], &mut buf).unwrap();
        assert_eq!(read_csv(&buf[..]).unwrap(), records[1].rows);
    }

    #[test]
    fn config_errors_name_the_field() {
        let bad_seeds = config_json(5).replace(r#""seeds": [1, 2]"#, r#""seeds": []"#);
        assert_eq!(ExperimentConfig::from_json(&bad_seeds).unwrap_err().to_string(), "seeds: must list at least one seed");

        let bad_p = config_json(5).replace("[0.5, 0.3, 0.2]", "[0.5, 0.3, 0.3]");
        let err = ExperimentConfig::from_json(&bad_p).unwrap_err().to_string();
        assert!(err.starts_with("variants[1]:"), "{err}");

        let bad_type = config_json(5).replace(r#""iterations": 5"#, r#""iterations": "five""#);
        let err = ExperimentConfig::from_json(&bad_type).unwrap_err().to_string();
        assert!(err.starts_with("iterations:"), "{err}");

        let bad_norm = config_json(5).replace(r#""euclidean""#, r#""frobenius""#);
        let err = ExperimentConfig::from_json(&bad_norm).unwrap_err().to_string();
        assert!(err.starts_with("norms[1]:"), "{err}");

        let unknown = config_json(5).replace(r#""iterations""#, r#""iters": 1, "iterations""#);
        assert!(ExperimentConfig::from_json(&unknown).is_err());
    }

    #[test]
    fn time_to_target_takes_first_row() {
        let mk = |k, gap, units| RunRow {
            k,
            f: gap,
            f_gap: gap,
            grad_aggregate: None,
            active_min: 0,
            active_size: 1,
            step_units: 1.0,
            cumulative_units: units,
            measured_macs: Some(10),
        };
        let rec = RunRecord {
            variant: "v".into(),
            seed: 0,
            initial_f: 1.0,
            f_star: 0.0,
            setup_units: 0.0,
            setup_macs: None,
            rows: vec![mk(0, 0.5, 2.0), mk(1, 0.09, 4.0), mk(2, 0.2, 6.0), mk(3, 0.01, 8.0)],
            checks: RunChecks::default(),
            warnings: vec![],
        };
        let t = time_to_target(&rec, 0.1, TargetMode::Absolute);
        assert_eq!((t.steps, t.units, t.macs), (Some(2), Some(4.0), Some(20)));
        let t = time_to_target(&rec, 0.05, TargetMode::Relative);
        assert_eq!((t.threshold, t.steps), (0.05, Some(4)));
        assert!(!time_to_target(&rec, 1e-3, TargetMode::Absolute).reached);
        assert_eq!(time_to_target(&rec, 2.0, TargetMode::Absolute).steps, Some(0));
    }

    #[test]
    fn summary_means_and_prediction() {
        let cfg = ExperimentConfig::from_json(&config_json(200)).unwrap();
        let records = execute(&cfg).unwrap();
        let s = summarize(&cfg, &records, 0);
        assert_eq!(s.schema_version, SCHEMA_VERSION);
        assert_eq!(s.speedups.len(), 2);
        let sp = &s.speedups[0];
        let vals: Vec<f64> = sp.per_seed.iter().flatten().copied().collect();
        assert_eq!(sp.seeds_compared, vals.len());
        if let (Some(a), Some(g)) = (sp.arithmetic_mean, sp.geometric_mean) {
            assert!(g <= a + 1e-12);
        }
        assert!(sp.predicted.is_some());
        assert!(s.predicted.iter().all(|p| p.cost.is_some()));
    }

    #[test]
    fn optimal_probs_verdicts() {
        let cp = CostParams::new(1.0, vec![1.0; 3], vec![0.5; 3]).unwrap();
        let mut t = SmoothnessTable::rpt(3);
        for i in 0..3 {
            for s in 0..=i {
                t.set_l0(i, s, if i == 0 { 5.0 } else { 2.0 }).unwrap();
            }
        }
        let r = optimal_probs(&t, &cp, CostRegime::Smooth).unwrap();
        assert_eq!(r.p, vec![1.0, 0.0, 0.0]);
        assert_eq!(r.verdict, "full-network optimal");

        t.set_l0(2, 0, 9.0).unwrap();
        let r = optimal_probs(&t, &cp, CostRegime::Smooth).unwrap();
        assert!(r.p[0] < 1.0);
        assert_eq!(r.verdict, "full-network not optimal");

        let mut single = SmoothnessTable::rpt(1);
        single.set_l0(0, 0, 3.0).unwrap();
        let cp1 = CostParams::new(1.0, vec![1.0], vec![0.5]).unwrap();
        assert_eq!(optimal_probs(&single, &cp1, CostRegime::Smooth).unwrap().p, vec![1.0]);

        assert!(matches!(
            optimal_probs(&t, &cp, CostRegime::L0L1Eps),
            Err(HarnessError::Cost(CostError::MissingConstant { which: "L1", .. }))
        ));
    }
}

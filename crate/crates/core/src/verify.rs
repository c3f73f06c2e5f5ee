//! Property and oracle checks of the library's guarantees. Every check is
//! deterministic given its parameters and reports machine-readable metrics.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costmodel::{
    brute_force_optimal_probs, full_network_optimal_smooth, optimal_rpt_probs_l0l1, optimal_rpt_probs_smooth, CostParams,
    L0L1Regime, SmoothRptObjective, SmoothnessTable,
};
use crate::geometry::{dual_norm, lmo, norm, sharp, Matrix, NormKind};
use crate::harness::{execute, summarize, ExperimentConfig, TargetMode, VariantConfig};
use crate::optimizer::{run, theory_weights, LayerModel, RunConfig, StepPolicy, WeightRegime};
use crate::problems::{
    Activation, CacheStatus, ForwardCache, NoiseSpec, Objective, ProblemSpec, SeparableQuadratic, TableLayout, TinyMlp,
};
use crate::sampling::{SamplingScheme, SeedStreams, StreamPurpose};

/// Failures listed individually in a report; the rest are only counted.
const MAX_LISTED_FAILURES: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub metrics: BTreeMap<String, f64>,
    pub failures: Vec<String>,
    pub failure_count: usize,
    #[serde(skip)]
    pub elapsed_seconds: f64,
}

struct Recorder {
    name: &'static str,
    start: Instant,
    metrics: BTreeMap<String, f64>,
    failures: Vec<String>,
    failure_count: usize,
}

impl Recorder {
    fn new(name: &'static str) -> Self {
        Recorder { name, start: Instant::now(), metrics: BTreeMap::new(), failures: Vec::new(), failure_count: 0 }
    }

    fn metric(&mut self, key: impl Into<String>, v: f64) {
        self.metrics.insert(key.into(), v);
    }

    fn fail(&mut self, msg: impl Into<String>) {
        self.failure_count += 1;
        if self.failures.len() < MAX_LISTED_FAILURES {
            self.failures.push(msg.into());
        }
    }

    fn expect(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        if !ok {
            self.fail(msg());
        }
    }

    fn finish(self) -> CheckReport {
        CheckReport {
            name: self.name.to_string(),
            passed: self.failure_count == 0,
            metrics: self.metrics,
            failures: self.failures,
            failure_count: self.failure_count,
            elapsed_seconds: self.start.elapsed().as_secs_f64(),
        }
    }
}

fn rng(seed: u64, index: u64) -> rand_chacha::ChaCha8Rng {
    SeedStreams::new(seed).rng(StreamPurpose::Data, index)
}

// ---------------------------------------------------------------- geometry

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryCheck {
    pub matrices_per_kind: usize,
    pub tolerance: f64,
    pub max_dim: usize,
    pub seed: u64,
}

impl Default for GeometryCheck {
    fn default() -> Self {
        GeometryCheck { matrices_per_kind: 1000, tolerance: 1e-9, max_dim: 6, seed: 11 }
    }
}

/// LMO and sharp-operator identities on random matrices and radii:
/// `‖lmo(M,t)‖ = t`, `⟨M, lmo(M,t)⟩ = −t‖M‖_★`, `⟨M, M♯⟩ = ‖M‖²_★`,
/// `‖M♯‖ = ‖M‖_★`.
pub fn geometry_identities(p: &GeometryCheck) -> CheckReport {
    let mut rec = Recorder::new("geometry_identities");
    for kind in [NormKind::Euclidean, NormKind::Spectral] {
        let errors: Vec<[f64; 4]> = (0..p.matrices_per_kind)
            .into_par_iter()
            .map(|n| {
                let mut r = rng(p.seed, (kind as u64) << 32 | n as u64);
                let rows = r.random_range(1..=p.max_dim);
                let cols = r.random_range(1..=p.max_dim);
                let scale = r.random_range(0.1..3.0);
                let t = r.random_range(0.1..3.0);
                let m = Matrix::random_normal(rows, cols, &mut r).scaled(scale);
                let dn = dual_norm(kind, &m);
                let d = match lmo(kind, &m, t) {
                    Ok(out) => out.direction,
                    Err(_) => return [f64::INFINITY; 4],
                };
                let s = sharp(kind, &m);
                [
                    (norm(kind, &d) - t).abs(),
                    (m.dot(&d) + t * dn).abs(),
                    (m.dot(&s) - dn * dn).abs(),
                    (norm(kind, &s) - dn).abs(),
                ]
            })
            .collect();
        let label = format!("{kind:?}").to_lowercase();
        for (j, identity) in ["normlmo", "inplmo", "inpsharp", "normsharp"].iter().enumerate() {
            let worst = errors.iter().map(|e| e[j]).fold(0.0, f64::max);
            rec.metric(format!("{label}.{identity}.max_abs_error"), worst);
            rec.expect(worst <= p.tolerance, || format!("{label} {identity}: max error {worst:e} > {:e}", p.tolerance));
        }
    }
    rec.finish()
}

// ---------------------------------------------------------------- marginals

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalRow {
    pub layer: usize,
    pub f_analytic: f64,
    pub f_empirical: f64,
    /// `None` when the analytic value is 0 or 1 and the empirical one differs.
    pub f_z: Option<f64>,
    pub q_analytic: f64,
    pub q_empirical: f64,
    pub q_z: Option<f64>,
}

fn z_score(analytic: f64, empirical: f64, draws: usize) -> Option<f64> {
    let sd = (analytic * (1.0 - analytic) / draws as f64).sqrt();
    if sd > 0.0 {
        Some((empirical - analytic) / sd)
    } else if empirical == analytic {
        Some(0.0)
    } else {
        None
    }
}

/// Analytic marginals next to frequencies over `draws` samples.
pub fn empirical_marginals(scheme: &SamplingScheme, draws: usize, seed: u64) -> Vec<MarginalRow> {
    let b = scheme.num_layers();
    let mut r = SeedStreams::new(seed).rng(StreamPurpose::Sampling, 0);
    let mut min_counts = vec![0usize; b];
    let mut q_counts = vec![0usize; b];
    for _ in 0..draws {
        let s = scheme.sample(&mut r);
        min_counts[s.min_index()] += 1;
        for i in s.iter() {
            q_counts[i] += 1;
        }
    }
    let m = scheme.marginals();
    let n = draws.max(1) as f64;
    let mut cumulative = 0;
    (0..b)
        .map(|i| {
            cumulative += min_counts[i];
            let fe = cumulative as f64 / n;
            let qe = q_counts[i] as f64 / n;
            MarginalRow {
                layer: i,
                f_analytic: m.f[i],
                f_empirical: fe,
                f_z: z_score(m.f[i], fe, draws),
                q_analytic: m.q[i],
                q_empirical: qe,
                q_z: z_score(m.q[i], qe, draws),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalCheck {
    pub draws: usize,
    pub z_max: f64,
    pub seed: u64,
}

impl Default for MarginalCheck {
    fn default() -> Self {
        MarginalCheck { draws: 100_000, z_max: 3.0, seed: 5 }
    }
}

fn random_probs<R: Rng>(n: usize, r: &mut R) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| r.random_range(0.05..1.0)).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|x| x / total).collect()
}

/// One random instance of each subset scheme with 8 layers.
pub fn marginal_check_schemes(seed: u64) -> Vec<(&'static str, SamplingScheme)> {
    let mut r = rng(seed, 0);
    let b = 8;
    let tau = 3;
    let blocks = vec![vec![0, 1, 2], vec![3, 4], vec![5, 6, 7]];
    vec![
        ("rpt", SamplingScheme::Rpt { p: random_probs(b, &mut r) }),
        ("tau_nice", SamplingScheme::TauNice { b, tau }),
        ("tau_submodel", SamplingScheme::TauSubmodel { b, tau, p: random_probs(b - tau + 1, &mut r) }),
        ("partitioned", SamplingScheme::Partitioned { p: random_probs(blocks.len(), &mut r), blocks }),
    ]
}

/// Empirical `F` and `Q` of each scheme against the closed forms, with a
/// per-coordinate binomial z-score bound.
pub fn marginals_match(p: &MarginalCheck) -> CheckReport {
    let mut rec = Recorder::new("marginals");
    for (idx, (label, scheme)) in marginal_check_schemes(p.seed).into_iter().enumerate() {
        let rows = empirical_marginals(&scheme, p.draws, p.seed.wrapping_add(idx as u64 + 1));
        let mut worst: f64 = 0.0;
        for row in &rows {
            for (what, z) in [("F", row.f_z), ("Q", row.q_z)] {
                match z {
                    Some(z) => {
                        worst = worst.max(z.abs());
                        rec.expect(z.abs() <= p.z_max, || format!("{label} {what}[{}]: |z| = {:.2}", row.layer, z.abs()));
                    }
                    None => rec.fail(format!("{label} {what}[{}]: degenerate marginal was violated", row.layer)),
                }
            }
        }
        rec.metric(format!("{label}.max_abs_z"), worst);
        let last = rows.last().expect("8 layers");
        rec.expect(last.f_analytic == 1.0, || format!("{label}: F of the last layer is {}", last.f_analytic));
        if let SamplingScheme::TauNice { b, tau } = scheme {
            let exact = tau as f64 / b as f64;
            rec.expect(rows.iter().all(|r| r.q_analytic == exact), || format!("{label}: Q differs from tau/b"));
        }
    }
    rec.finish()
}

// ---------------------------------------------------------------- deterministic descent and rate

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateCheck {
    pub seeds: usize,
    pub horizons: Vec<usize>,
    pub p: Vec<f64>,
    pub monotone_slack: f64,
    pub seed: u64,
}

impl Default for RateCheck {
    fn default() -> Self {
        RateCheck { seeds: 20, horizons: vec![10, 100, 1000], p: vec![0.5, 0.3, 0.2], monotone_slack: 1e-10, seed: 3 }
    }
}

struct RateRun {
    delta0: f64,
    aggregates: Vec<f64>,
    max_increase: f64,
}

/// Separable quadratic with three layers in mixed norms; `f★ = 0`.
fn rate_instance(seed: u64) -> (SeparableQuadratic, Vec<NormKind>) {
    let problem =
        SeparableQuadratic::random(&[(4, 3), (3, 3), (3, 2)], vec![1.0, 2.0, 0.5], 1.0, &mut rng(seed, 0)).expect("valid");
    (problem, vec![NormKind::Spectral, NormKind::Euclidean, NormKind::Spectral])
}

fn rate_runs(p: &RateCheck) -> Result<(Vec<RateRun>, f64), String> {
    let (problem, norms) = rate_instance(p.seed);
    let table = problem.smoothness_table(&norms, &TableLayout::Rpt).map_err(|e| e.to_string())?;
    let scheme = SamplingScheme::rpt(p.p.clone()).map_err(|e| e.to_string())?;
    let weights = theory_weights(&scheme, Some(&table), &WeightRegime::Smooth).map_err(|e| e.to_string())?;
    let horizon = p.horizons.iter().copied().max().unwrap_or(0);
    let runs = (0..p.seeds as u64)
        .into_par_iter()
        .map(|s| {
            let run_seed = p.seed.wrapping_mul(1000).wrapping_add(s);
            let mut r = SeedStreams::new(run_seed).rng(StreamPurpose::Initialization, 0);
            let x0: Vec<Matrix> =
                problem.targets().iter().map(|a| a.add(&Matrix::random_normal(a.rows(), a.cols(), &mut r))).collect();
            let model = LayerModel::new(x0, norms.clone()).map_err(|e| e.to_string())?;
            let cfg = RunConfig {
                scheme: scheme.clone(),
                epoch_shift_alpha: None,
                policy: StepPolicy::SmoothInverse,
                iterations: horizon,
                seed: run_seed,
                noise: None,
                momentum_init: Default::default(),
                orthogonalizer: Default::default(),
                cost: None,
            };
            let out = run(&problem, model, &cfg, Some(&table)).map_err(|e| e.to_string())?;
            Ok(RateRun {
                delta0: out.initial_value,
                aggregates: out.reports.iter().map(|r| weights.aggregate(&r.full_grad_dual_norms)).collect(),
                max_increase: out.reports.iter().map(|r| r.f_after - r.f_before).fold(f64::NEG_INFINITY, f64::max),
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    Ok((runs, weights.mean))
}

/// `f` never increases along deterministic runs with `γ = 1/L⁰`.
pub fn deterministic_descent(p: &RateCheck) -> CheckReport {
    let mut rec = Recorder::new("deterministic_descent");
    match rate_runs(p) {
        Err(e) => rec.fail(e),
        Ok((runs, _)) => {
            let worst = runs.iter().map(|r| r.max_increase).fold(f64::NEG_INFINITY, f64::max);
            rec.metric("max_step_increase", worst);
            rec.expect(worst <= p.monotone_slack, || format!("f increased by {worst:e} in one step"));
        }
    }
    rec.finish()
}

/// Seed-averaged `(1/K) Σ_k Σ_i (w_i/mean w) ‖∇_i f(X^k)‖²_★` against the
/// seed-averaged bound `δ⁰/(K mean w)`, for each horizon `K`.
pub fn deterministic_rate(p: &RateCheck) -> CheckReport {
    let mut rec = Recorder::new("deterministic_rate");
    match rate_runs(p) {
        Err(e) => rec.fail(e),
        Ok((runs, mean_w)) => {
            let n = runs.len() as f64;
            for &k in &p.horizons {
                let lhs = runs.iter().map(|r| r.aggregates[..k].iter().sum::<f64>() / k as f64).sum::<f64>() / n;
                let rhs = runs.iter().map(|r| r.delta0 / (k as f64 * mean_w)).sum::<f64>() / n;
                rec.metric(format!("K{k}.average"), lhs);
                rec.metric(format!("K{k}.bound"), rhs);
                rec.expect(lhs <= rhs, || format!("K = {k}: average {lhs:e} exceeds bound {rhs:e}"));
            }
        }
    }
    rec.finish()
}

// ---------------------------------------------------------------- optimal probabilities

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimalProbsCheck {
    pub tables: usize,
    pub grid_resolution: usize,
    pub cost_draws: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for OptimalProbsCheck {
    fn default() -> Self {
        OptimalProbsCheck { tables: 500, grid_resolution: 100, cost_draws: 10, tolerance: 1e-9, seed: 17 }
    }
}

fn random_cost<R: Rng>(b: usize, r: &mut R) -> CostParams {
    CostParams::new(
        r.random_range(0.0..2.0),
        (0..b).map(|_| r.random_range(0.1..3.0)).collect(),
        (0..b).map(|_| r.random_range(0.0..1.0)).collect(),
    )
    .expect("positive costs")
}

/// Constants that grow with the set: `L_{i,s} ≥ L_{i,s+1}`.
fn random_nested<R: Rng>(b: usize, r: &mut R) -> Vec<Vec<f64>> {
    (0..b)
        .map(|i| {
            let mut row = vec![0.0; i + 1];
            row[i] = r.random_range(-1.0f64..2.0).exp();
            for s in (0..i).rev() {
                row[s] = row[s + 1] * (1.0 + r.random_range(0.0..1.0));
            }
            row
        })
        .collect()
}

fn rpt_table(l0: &[Vec<f64>], l1: Option<&[Vec<f64>]>) -> SmoothnessTable {
    let b = l0.len();
    let mut t = SmoothnessTable::rpt(b);
    for i in 0..b {
        for s in 0..=i {
            t.set_l0(i, s, l0[i][s]).expect("in range");
            if let Some(l1) = l1 {
                t.set_l1(i, s, l1[i][s]).expect("in range");
            }
        }
    }
    t
}

/// Random nested table, with layer 0 rescaled to hold the largest full-set
/// constant in every other table so both verdicts are well represented.
fn random_smooth_table<R: Rng>(index: usize, r: &mut R) -> SmoothnessTable {
    let b = 2 + index % 3;
    let mut l0 = random_nested(b, r);
    if index % 2 == 1 {
        let max_other = (1..b).map(|i| l0[i][0]).fold(0.0, f64::max);
        l0[0][0] = l0[0][0].max(max_other * r.random_range(1.0..1.5));
    }
    rpt_table(&l0, None)
}

/// The recursion's distribution against an exhaustive simplex grid, the
/// full-network criterion against the recursion, and invariance of the
/// recursion to the cost parameters.
pub fn optimal_probs_oracle(p: &OptimalProbsCheck) -> CheckReport {
    let mut rec = Recorder::new("optimal_probs_oracle");
    struct Outcome {
        gap: f64,
        full_claimed: bool,
        full_by_recursion: bool,
        max_cost_drift: f64,
        error: Option<String>,
    }
    let outcomes: Vec<Outcome> = (0..p.tables)
        .into_par_iter()
        .map(|n| {
            let mut r = rng(p.seed, n as u64);
            let table = random_smooth_table(n, &mut r);
            let b = table.num_layers();
            let cp = random_cost(b, &mut r);
            let fail = |e: String| Outcome { gap: 0.0, full_claimed: false, full_by_recursion: false, max_cost_drift: 0.0, error: Some(e) };
            let opt = match optimal_rpt_probs_smooth(&table, &cp) {
                Ok(o) => o,
                Err(e) => return fail(e.to_string()),
            };
            let obj = SmoothRptObjective::new(&table, &cp).expect("validated by the solver");
            let (_, grid_min) = brute_force_optimal_probs(|q| obj.eval(q), b, p.grid_resolution);
            let full_claimed = full_network_optimal_smooth(&table).unwrap_or(false);
            let full_by_recursion = opt.p[0] == 1.0 && opt.p[1..].iter().all(|&x| x == 0.0);
            let max_cost_drift = (0..p.cost_draws)
                .map(|_| {
                    let other = random_cost(b, &mut r);
                    optimal_rpt_probs_smooth(&table, &other)
                        .map(|o| o.p.iter().zip(&opt.p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                        .unwrap_or(f64::INFINITY)
                })
                .fold(0.0, f64::max);
            Outcome { gap: opt.objective - grid_min, full_claimed, full_by_recursion, max_cost_drift, error: None }
        })
        .collect();

    let mut worst_gap = f64::NEG_INFINITY;
    let mut mismatches = 0;
    let mut full_count = 0;
    let mut worst_drift: f64 = 0.0;
    for (n, o) in outcomes.iter().enumerate() {
        if let Some(e) = &o.error {
            rec.fail(format!("table {n}: {e}"));
            continue;
        }
        worst_gap = worst_gap.max(o.gap);
        worst_drift = worst_drift.max(o.max_cost_drift);
        full_count += o.full_claimed as usize;
        rec.expect(o.gap <= p.tolerance, || format!("table {n}: recursion exceeds grid minimum by {:e}", o.gap));
        if o.full_claimed != o.full_by_recursion {
            mismatches += 1;
            rec.fail(format!("table {n}: criterion says {}, recursion says {}", o.full_claimed, o.full_by_recursion));
        }
        rec.expect(o.max_cost_drift == 0.0, || format!("table {n}: output moved by {:e} under other costs", o.max_cost_drift));
    }
    rec.metric("max_gap_to_grid", worst_gap);
    rec.metric("criterion_mismatches", mismatches as f64);
    rec.metric("full_network_optimal_tables", full_count as f64);
    rec.metric("max_cost_drift", worst_drift);
    rec.finish()
}

// ---------------------------------------------------------------- (L0, L1) full-network condition

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct L0L1ConditionCheck {
    pub tables: usize,
    pub margin: f64,
    pub seed: u64,
}

impl Default for L0L1ConditionCheck {
    fn default() -> Self {
        L0L1ConditionCheck { tables: 200, margin: 0.1, seed: 23 }
    }
}

/// Half the tables give layer 0 a strictly non-maximal full-set `L¹`, where
/// full-network training must lose; the other half make it the maximum by at
/// least `margin`, where it must win.
pub fn l0l1_condition(p: &L0L1ConditionCheck) -> CheckReport {
    let mut rec = Recorder::new("l0l1_condition");
    let outcomes: Vec<(bool, Result<Vec<f64>, String>)> = (0..p.tables)
        .into_par_iter()
        .map(|n| {
            let mut r = rng(p.seed, n as u64);
            let b = 2 + n % 2;
            let l0 = random_nested(b, &mut r);
            let mut l1 = random_nested(b, &mut r);
            let max_other = (1..b).map(|i| l1[i][0]).fold(0.0, f64::max);
            let first_is_max = n % 4 >= 2;
            l1[0][0] = if first_is_max {
                max_other * (1.0 + p.margin + r.random_range(0.0..1.0))
            } else {
                max_other * r.random_range(0.2..0.999)
            };
            let table = rpt_table(&l0, Some(&l1));
            let cp = random_cost(b, &mut r);
            let sol = optimal_rpt_probs_l0l1(&table, &cp, L0L1Regime::Eps).map(|s| s.p).map_err(|e| e.to_string());
            (first_is_max, sol)
        })
        .collect();
    let mut counts = [0usize; 2];
    for (n, (first_is_max, sol)) in outcomes.into_iter().enumerate() {
        counts[first_is_max as usize] += 1;
        match sol {
            Err(e) => rec.fail(format!("table {n}: {e}")),
            Ok(pv) => {
                let is_full = pv[0] == 1.0;
                rec.expect(is_full == first_is_max, || {
                    format!("table {n}: layer 0 maximal = {first_is_max}, solver returned {pv:?}")
                });
            }
        }
    }
    rec.metric("tables_first_not_max", counts[0] as f64);
    rec.metric("tables_first_max", counts[1] as f64);
    rec.finish()
}

// ---------------------------------------------------------------- stochastic trend

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StochasticTrendCheck {
    pub seeds: usize,
    pub short_horizon: usize,
    pub long_horizon: usize,
    pub sigma: f64,
    pub min_factor: f64,
    pub init_scale: f64,
    pub p: Vec<f64>,
    pub seed: u64,
}

impl Default for StochasticTrendCheck {
    fn default() -> Self {
        StochasticTrendCheck {
            seeds: 20,
            short_horizon: 16,
            long_horizon: 256,
            sigma: 0.1,
            min_factor: 1.5,
            init_scale: 0.5,
            p: vec![0.5, 0.3, 0.2],
            seed: 29,
        }
    }
}

/// Seed-averaged running minimum of `Σ_i (w_i/mean w) ‖∇_i f(X^k)‖_★` over
/// `k ≤ K` for the horizon-dependent schedule.
fn stochastic_min_aggregate(p: &StochasticTrendCheck, horizon: usize) -> Result<f64, String> {
    let (problem, _) = rate_instance(p.seed);
    let norms = vec![NormKind::Spectral; 3];
    let scheme = SamplingScheme::rpt(p.p.clone()).map_err(|e| e.to_string())?;
    let weights =
        theory_weights(&scheme, None, &WeightRegime::Stochastic { eta: vec![1.0; 3] }).map_err(|e| e.to_string())?;
    let mins = (0..p.seeds as u64)
        .into_par_iter()
        .map(|s| {
            let run_seed = p.seed.wrapping_mul(1000).wrapping_add(s);
            let mut r = SeedStreams::new(run_seed).rng(StreamPurpose::Initialization, 0);
            let x0: Vec<Matrix> = problem
                .targets()
                .iter()
                .map(|a| a.add(&Matrix::random_normal(a.rows(), a.cols(), &mut r).scaled(p.init_scale)))
                .collect();
            let model = LayerModel::new(x0, norms.clone()).map_err(|e| e.to_string())?;
            let cfg = RunConfig {
                scheme: scheme.clone(),
                epoch_shift_alpha: None,
                policy: StepPolicy::HorizonSchedule { eta: None },
                iterations: horizon,
                seed: run_seed,
                noise: Some(NoiseSpec::uniform(3, p.sigma)),
                momentum_init: Default::default(),
                orthogonalizer: Default::default(),
                cost: None,
            };
            let out = run(&problem, model, &cfg, None).map_err(|e| e.to_string())?;
            let (_, g) = problem.value_and_grad(&out.model.layers).map_err(|e| e.to_string())?;
            let last: Vec<f64> = g.iter().zip(&norms).map(|(g, &k)| dual_norm(k, g)).collect();
            Ok(out
                .reports
                .iter()
                .map(|r| weights.aggregate(&r.full_grad_dual_norms))
                .chain(std::iter::once(weights.aggregate(&last)))
                .fold(f64::INFINITY, f64::min))
        })
        .collect::<Result<Vec<f64>, String>>()?;
    Ok(mins.iter().sum::<f64>() / mins.len() as f64)
}

/// The running minimum at the long horizon must be at least `min_factor`
/// times smaller than at the short one.
pub fn stochastic_trend(p: &StochasticTrendCheck) -> CheckReport {
    let mut rec = Recorder::new("stochastic_trend");
    match (stochastic_min_aggregate(p, p.short_horizon), stochastic_min_aggregate(p, p.long_horizon)) {
        (Ok(short), Ok(long)) => {
            let ratio = long / short;
            rec.metric("short_horizon_min", short);
            rec.metric("long_horizon_min", long);
            rec.metric("ratio", ratio);
            rec.metric(
                "rate_prediction",
                ((p.short_horizon + 1) as f64 / (p.long_horizon + 1) as f64).powf(0.25),
            );
            rec.expect(ratio <= 1.0 / p.min_factor, || {
                format!("long/short = {ratio:.3}, need at most {:.3}", 1.0 / p.min_factor)
            });
        }
        (Err(e), _) | (_, Err(e)) => rec.fail(e),
    }
    rec.finish()
}

// ---------------------------------------------------------------- cost ratio

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRatioCheck {
    pub seeds: usize,
    pub relative_target: f64,
    pub iterations: usize,
    pub min_speedup: f64,
    pub max_relative_deviation: f64,
}

impl Default for CostRatioCheck {
    fn default() -> Self {
        CostRatioCheck {
            seeds: 20,
            relative_target: 1e-4,
            iterations: 1000,
            min_speedup: 1.1,
            max_relative_deviation: 0.15,
        }
    }
}

/// Four unit-curvature layers measured with a conservative table in which
/// layer 0 has the smallest full-set constant: `L_{i,0} = (10, 40, 40, 40)`
/// and `L_{i,s} = 10` for `s ≥ 1`. Unit forward/backward costs, half-unit
/// update costs and unit overhead.
pub fn cost_ratio_config(p: &CostRatioCheck) -> Result<ExperimentConfig, String> {
    let b = 4;
    let mut table = SmoothnessTable::rpt(b);
    for i in 0..b {
        for s in 0..=i {
            let v = if s == 0 && i > 0 { 40.0 } else { 10.0 };
            table.set_l0(i, s, v).map_err(|e| e.to_string())?;
        }
    }
    let cost = CostParams::new(1.0, vec![1.0; b], vec![0.5; b]).map_err(|e| e.to_string())?;
    let rpt = optimal_rpt_probs_smooth(&table, &cost).map_err(|e| e.to_string())?;
    let variant = |name: &str, scheme| VariantConfig {
        name: name.into(),
        scheme,
        policy: StepPolicy::SmoothInverse,
        epoch_shift_alpha: None,
        momentum_init: Default::default(),
        orthogonalizer: Default::default(),
    };
    Ok(ExperimentConfig {
        problem: ProblemSpec::SeparableQuadratic { shapes: vec![(3, 3); b], curvatures: vec![1.0; b], target_scale: 1.0 },
        data_seed: None,
        norms: vec![NormKind::Euclidean; b],
        init_scale: 1.0,
        iterations: p.iterations,
        seeds: (0..p.seeds as u64).collect(),
        cost,
        table: Some(table),
        noise: None,
        targets: vec![p.relative_target],
        target_mode: TargetMode::Relative,
        variants: vec![
            variant("full_network", SamplingScheme::FullNetwork { b }),
            variant("rpt_optimal", SamplingScheme::Rpt { p: rpt.p }),
        ],
        out: None,
        verify: Default::default(),
    })
}

/// Cumulative cost-model units to the target, full network over RPT with
/// the optimal distribution, against the predicted total-cost ratio.
pub fn cost_ratio(p: &CostRatioCheck) -> CheckReport {
    let mut rec = Recorder::new("cost_ratio");
    let result = cost_ratio_config(p).and_then(|cfg| {
        let records = execute(&cfg).map_err(|e| e.to_string())?;
        Ok(summarize(&cfg, &records, 0))
    });
    match result {
        Err(e) => rec.fail(e),
        Ok(summary) => {
            let sp = &summary.speedups[0];
            rec.metric("seeds_compared", sp.seeds_compared as f64);
            rec.expect(sp.seeds_compared == p.seeds, || {
                format!("only {} of {} seed pairs reached the target", sp.seeds_compared, p.seeds)
            });
            match (sp.arithmetic_mean, sp.geometric_mean, sp.predicted) {
                (Some(mean), Some(geo), Some(pred)) => {
                    rec.metric("empirical_ratio", mean);
                    rec.metric("empirical_ratio_geometric", geo);
                    rec.metric("predicted_ratio", pred);
                    let dev = (mean / pred - 1.0).abs();
                    rec.metric("relative_deviation", dev);
                    rec.expect(mean >= p.min_speedup, || format!("speedup {mean:.3} below {}", p.min_speedup));
                    rec.expect(dev <= p.max_relative_deviation, || {
                        format!("speedup {mean:.3} deviates {:.1}% from predicted {pred:.3}", 100.0 * dev)
                    });
                }
                _ => rec.fail("no speedup could be computed"),
            }
        }
    }
    rec.finish()
}

// ---------------------------------------------------------------- network gradients and caching

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpCheck {
    pub dims: Vec<usize>,
    pub samples: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for MlpCheck {
    fn default() -> Self {
        MlpCheck { dims: vec![6, 10, 8, 8, 3], samples: 64, tolerance: 1e-12, seed: 31 }
    }
}

/// Truncated backward passes reproduce the full gradient slices, and a
/// forward pass reusing a cached frozen prefix does fewer multiply-accumulates
/// for the same loss.
pub fn mlp_truncation(p: &MlpCheck) -> CheckReport {
    let mut rec = Recorder::new("mlp_truncation");
    let mut r = rng(p.seed, 0);
    for activation in [Activation::Tanh, Activation::Relu] {
        let label = format!("{activation:?}").to_lowercase();
        let net = match TinyMlp::gaussian_clusters(p.dims.clone(), activation, p.samples, 2.0, &mut r) {
            Ok(n) => n,
            Err(e) => {
                rec.fail(e.to_string());
                continue;
            }
        };
        let w = net.init_weights(&mut r);
        let b = w.len();
        let full = net.evaluate(&w, 0).expect("valid weights");
        let mut worst: f64 = 0.0;
        for s in 1..b {
            let part = net.evaluate(&w, s).expect("valid weights");
            for i in 0..b {
                let diff = if i >= s {
                    part.grads[i].sub(&full.grads[i]).to_row_major().iter().fold(0.0, |m: f64, v| m.max(v.abs()))
                } else {
                    part.grads[i].to_row_major().iter().fold(0.0, |m: f64, v| m.max(v.abs()))
                };
                worst = worst.max(diff);
            }
            rec.expect(part.value == full.value, || format!("{label}: loss changed when truncating at {s}"));
            rec.expect(part.macs < full.macs, || format!("{label}: truncating at {s} saved no work"));
        }
        rec.metric(format!("{label}.max_gradient_difference"), worst);
        rec.expect(worst <= p.tolerance, || format!("{label}: truncated gradients differ by {worst:e}"));

        for frozen in 1..b {
            let mut cache = ForwardCache::default();
            let base = net.forward_with_cache(&w, 0, &mut cache).expect("valid weights");
            let mut moved = w.clone();
            for layer in moved.iter_mut().skip(frozen) {
                *layer = layer.scaled(0.9);
            }
            let cached = net.forward_with_cache(&moved, frozen, &mut cache).expect("valid weights");
            let fresh = net.forward(&moved).expect("valid weights");
            rec.expect(cached.status == CacheStatus::Reused { layers: frozen }, || {
                format!("{label}: cache not reused with {frozen} frozen layers: {:?}", cached.status)
            });
            rec.expect(cached.loss == fresh.loss, || {
                format!("{label}: cached loss {} differs from fresh {}", cached.loss, fresh.loss)
            });
            rec.expect(cached.macs < fresh.macs && fresh.macs == base.macs, || {
                format!("{label}: cached pass used {} of {} multiply-accumulates", cached.macs, fresh.macs)
            });
        }
    }
    rec.finish()
}

// ---------------------------------------------------------------- suites

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Geometry,
    Sampling,
    Descent,
    Rates,
    Cost,
    Stochastic,
    All,
}

impl std::str::FromStr for Suite {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "geometry" => Suite::Geometry,
            "sampling" => Suite::Sampling,
            "descent" => Suite::Descent,
            "rates" => Suite::Rates,
            "cost" => Suite::Cost,
            "stochastic" => Suite::Stochastic,
            "all" => Suite::All,
            other => {
                return Err(format!(
                    "unknown suite '{other}', expected geometry, sampling, descent, rates, cost, stochastic or all"
                ))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub passed: bool,
    pub checks: Vec<CheckReport>,
}

/// Run a suite with default parameters. `draws` overrides the marginal
/// check's sample count.
pub fn run_suite(suite: Suite, draws: Option<usize>) -> SuiteReport {
    let wanted = |s: Suite| suite == Suite::All || suite == s;
    let mut checks = Vec::new();
    if wanted(Suite::Geometry) {
        checks.push(geometry_identities(&GeometryCheck::default()));
    }
    if wanted(Suite::Sampling) {
        let mut p = MarginalCheck::default();
        if let Some(n) = draws {
            p.draws = n;
        }
        checks.push(marginals_match(&p));
    }
    if wanted(Suite::Descent) {
        checks.push(deterministic_descent(&RateCheck::default()));
        checks.push(mlp_truncation(&MlpCheck::default()));
    }
    if wanted(Suite::Rates) {
        checks.push(deterministic_rate(&RateCheck::default()));
    }
    if wanted(Suite::Cost) {
        checks.push(optimal_probs_oracle(&OptimalProbsCheck::default()));
        checks.push(l0l1_condition(&L0L1ConditionCheck::default()));
        checks.push(cost_ratio(&CostRatioCheck::default()));
    }
    if wanted(Suite::Stochastic) {
        checks.push(stochastic_trend(&StochasticTrendCheck::default()));
    }
    SuiteReport { suite, passed: checks.iter().all(|c| c.passed), checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_small() {
        let r = geometry_identities(&GeometryCheck { matrices_per_kind: 50, ..Default::default() });
        assert!(r.passed, "{r:?}");
        assert_eq!(r.metrics.len(), 8);
    }

    #[test]
    fn full_network_marginals_are_exact() {
        let rows = empirical_marginals(&SamplingScheme::FullNetwork { b: 3 }, 100, 1);
        for row in rows {
            assert_eq!((row.f_analytic, row.f_empirical, row.q_analytic, row.q_empirical), (1.0, 1.0, 1.0, 1.0));
            assert_eq!((row.f_z, row.q_z), (Some(0.0), Some(0.0)));
        }
    }

    #[test]
    fn z_score_flags_impossible_frequency() {
        assert_eq!(z_score(0.0, 0.01, 100), None);
        assert_eq!(z_score(0.5, 0.5, 100), Some(0.0));
        assert!((z_score(0.5, 0.55, 100).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nested_tables_grow_with_set() {
        let mut r = rng(1, 0);
        for _ in 0..20 {
            let l = random_nested(4, &mut r);
            assert!(rpt_table(&l, None).nested_violations().is_empty());
        }
    }

    #[test]
    fn small_oracle_runs_pass() {
        assert!(optimal_probs_oracle(&OptimalProbsCheck { tables: 12, grid_resolution: 20, ..Default::default() }).passed);
        assert!(l0l1_condition(&L0L1ConditionCheck { tables: 8, ..Default::default() }).passed);
        assert!(mlp_truncation(&MlpCheck { samples: 8, ..Default::default() }).passed);
    }

    #[test]
    fn cost_ratio_instance_prefers_rpt() {
        let cfg = cost_ratio_config(&CostRatioCheck::default()).unwrap();
        let table = cfg.table.as_ref().unwrap();
        assert!(!full_network_optimal_smooth(table).unwrap());
        let SamplingScheme::Rpt { p } = &cfg.variants[1].scheme else { panic!("rpt variant") };
        let expected = [20.0 / 35.0, 15.0 / 35.0, 0.0, 0.0];
        assert!(p.iter().zip(expected).all(|(a, b)| (a - b).abs() < 1e-12), "{p:?}");
    }

    #[test]
    fn suite_names_parse() {
        assert_eq!("rates".parse::<Suite>().unwrap(), Suite::Rates);
        assert!("speed".parse::<Suite>().unwrap_err().contains("unknown suite 'speed'"));
    }
}

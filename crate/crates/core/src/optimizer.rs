//! Layer-wise steepest descent over randomly sampled layer subsets.
//!
//! Each iteration samples an active set `S`, evaluates gradients from
//! `min S` upward and updates only the active layers. The deterministic step
//! moves along the sharp direction with a stepsize from the smoothness table;
//! the stochastic step keeps a per-layer momentum and takes a fixed-radius
//! LMO step along it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::{iteration_cost, layer_expectations, CostError, CostParams, LayerExpectations, SmoothnessTable};
use crate::geometry::{dual_norm, lmo_with, norm, sharp, GeometryError, Matrix, NormKind, Orthogonalizer};
use crate::problems::{Evaluation, ForwardCache, NoiseSpec, Objective, ProblemError};
use crate::sampling::{epoch_shift_probs, ActiveSet, EpochShiftConfig, SamplingError, SamplingScheme, SeedStreams, StreamPurpose};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizerError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error("layer {0} never updated")]
    LayerNeverUpdated(usize),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("iteration {k}: {source}")]
    AtIteration { k: usize, source: Box<OptimizerError> },
}

/// Layer parameters and the norm each layer is measured in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerModel {
    pub layers: Vec<Matrix>,
    pub norms: Vec<NormKind>,
}

impl LayerModel {
    pub fn new(layers: Vec<Matrix>, norms: Vec<NormKind>) -> Result<Self, OptimizerError> {
        if layers.is_empty() || layers.len() != norms.len() {
            return Err(OptimizerError::InvalidModel(format!(
                "{} layers with {} norm kinds",
                layers.len(),
                norms.len()
            )));
        }
        Ok(LayerModel { layers, norms })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(Matrix::shape).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentumState {
    pub m: Vec<Matrix>,
    pub beta: Vec<f64>,
}

impl MomentumState {
    pub fn new(m: Vec<Matrix>, beta: Vec<f64>) -> Result<Self, OptimizerError> {
        if m.len() != beta.len() {
            return Err(OptimizerError::InvalidPolicy(format!("{} momentum buffers with {} betas", m.len(), beta.len())));
        }
        if let Some(b) = beta.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return Err(OptimizerError::InvalidPolicy(format!("beta = {b} must lie in [0, 1]")));
        }
        Ok(MomentumState { m, beta })
    }

    pub fn zeros(shapes: &[(usize, usize)], beta: Vec<f64>) -> Result<Self, OptimizerError> {
        Self::new(shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(), beta)
    }
}

/// Stepsize or radius rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepPolicy {
    /// Deterministic, `γ_i = 1/L⁰_{i,S}`.
    SmoothInverse,
    /// Deterministic, `γ_i = 1/(L⁰_{i,S} + L¹_{i,S}‖∇_i f‖_★)`.
    GenSmoothInverse,
    /// Stochastic with constant radii and momentum parameter.
    FixedRadius { radii: Vec<f64>, beta: f64 },
    /// Stochastic, `t_i = η_i/(K+1)^{3/4}`, `β = (K+1)^{-1/2}` for horizon `K`.
    /// `η` defaults to all ones.
    HorizonSchedule {
        #[serde(default)]
        eta: Option<Vec<f64>>,
    },
}

impl StepPolicy {
    pub fn is_deterministic(&self) -> bool {
        matches!(self, StepPolicy::SmoothInverse | StepPolicy::GenSmoothInverse)
    }

    /// Radii and momentum parameter of a stochastic policy for horizon `k_total`.
    pub fn radii_and_beta(&self, b: usize, k_total: usize) -> Result<(Vec<f64>, f64), OptimizerError> {
        let (radii, beta) = match self {
            StepPolicy::FixedRadius { radii, beta } => (radii.clone(), *beta),
            StepPolicy::HorizonSchedule { eta } => {
                let eta = eta.clone().unwrap_or_else(|| vec![1.0; b]);
                let horizon = (k_total + 1) as f64;
                (eta.iter().map(|e| e / horizon.powf(0.75)).collect(), horizon.powf(-0.5))
            }
            _ => return Err(OptimizerError::InvalidPolicy("deterministic policy has no radii".into())),
        };
        if radii.len() != b {
            return Err(OptimizerError::InvalidPolicy(format!("{} radii for {b} layers", radii.len())));
        }
        if let Some(t) = radii.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(OptimizerError::InvalidPolicy(format!("radius {t} must be positive")));
        }
        if !(0.0..=1.0).contains(&beta) || beta == 0.0 {
            return Err(OptimizerError::InvalidPolicy(format!("beta = {beta} must lie in (0, 1]")));
        }
        Ok((radii, beta))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentumInit {
    Zeros,
    /// `M⁰ = ∇f(X⁰; ξ⁰)`, using the same noise draw as iteration 0.
    #[default]
    FirstStochasticGradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStep {
    pub layer: usize,
    /// `‖∇_i f(X)‖_★` of the exact gradient.
    pub grad_dual_norm: f64,
    /// `γ_i` for sharp steps, `t_i` for LMO steps.
    pub step: f64,
    /// Primal norm of the applied displacement.
    pub displacement: f64,
    /// `‖M_i − ∇_i f(X)‖_★` after the momentum update.
    pub momentum_error: Option<f64>,
    /// Momentum was zero, so the layer did not move.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub k: usize,
    pub active: ActiveSet,
    pub f_before: f64,
    pub f_after: f64,
    /// One entry per active layer, in layer order.
    pub layers: Vec<LayerStep>,
    /// Upper bound on `f_after` from the descent inequality, when the
    /// smoothness constants are known.
    pub descent_bound: Option<f64>,
    /// Exact gradient dual norms of all layers at the start of the step.
    /// Filled by [`run`].
    pub full_grad_dual_norms: Vec<f64>,
    pub cost_units: Option<f64>,
    pub macs: Option<u64>,
}

fn check_model(problem: &dyn Objective, model: &LayerModel) -> Result<(), OptimizerError> {
    if model.norms.len() != model.layers.len() {
        return Err(OptimizerError::InvalidModel("norm kinds do not match layers".into()));
    }
    if problem.shapes() != model.shapes() {
        return Err(OptimizerError::InvalidModel(format!(
            "model shapes {:?} do not match problem shapes {:?}",
            model.shapes(),
            problem.shapes()
        )));
    }
    Ok(())
}

fn check_active(active: &ActiveSet, b: usize) -> Result<(), OptimizerError> {
    match active.indices().last() {
        Some(&last) if last < b => Ok(()),
        _ => Err(OptimizerError::InvalidModel(format!("active set {:?} out of range for {b} layers", active.indices()))),
    }
}

/// Deterministic step: `X_i ← X_i − γ_i ∇_i f(X)^♯` for active layers.
pub fn det_step(
    problem: &dyn Objective,
    model: &mut LayerModel,
    active: &ActiveSet,
    policy: &StepPolicy,
    table: &SmoothnessTable,
    cache: &mut ForwardCache,
) -> Result<StepReport, OptimizerError> {
    if !policy.is_deterministic() {
        return Err(OptimizerError::InvalidPolicy("det_step needs smooth_inverse or gen_smooth_inverse".into()));
    }
    check_model(problem, model)?;
    check_active(active, model.num_layers())?;
    let eval = problem.evaluate_cached(&model.layers, active.min_index(), cache)?;
    let mut layers = Vec::with_capacity(active.len());
    let mut bound = eval.value;
    let mut updates = Vec::with_capacity(active.len());
    for i in active.iter() {
        let kind = model.norms[i];
        let g = &eval.grads[i];
        let g_norm = dual_norm(kind, g);
        let l0 = table.l0(i, active)?;
        let curvature = match policy {
            StepPolicy::GenSmoothInverse => l0 + table.l1(i, active)? * g_norm,
            _ => l0,
        };
        if !(curvature > 0.0) {
            return Err(CostError::NonPositiveConstant { which: "L0", layer: i, key: table.key_for(active)? }.into());
        }
        let gamma = 1.0 / curvature;
        let dir = sharp(kind, g);
        bound -= gamma * g_norm * g_norm / 2.0;
        layers.push(LayerStep {
            layer: i,
            grad_dual_norm: g_norm,
            step: gamma,
            displacement: gamma * norm(kind, &dir),
            momentum_error: None,
            degenerate: false,
        });
        updates.push((i, gamma, dir));
    }
    for (i, gamma, dir) in updates {
        model.layers[i].add_scaled(-gamma, &dir);
    }
    let f_after = problem.value(&model.layers)?;
    Ok(StepReport {
        k: 0,
        active: active.clone(),
        f_before: eval.value,
        f_after,
        layers,
        descent_bound: Some(bound),
        full_grad_dual_norms: Vec::new(),
        cost_units: None,
        macs: eval.macs,
    })
}

/// Exact oracle plus seeded additive noise. Iteration `k` always draws its
/// noise from stream `k`, for every layer, so the draw does not depend on
/// which layers are active.
pub struct StochasticOracle<'a> {
    problem: &'a dyn Objective,
    noise: NoiseSpec,
    streams: SeedStreams,
}

pub struct NoisyEvaluation {
    pub exact: Evaluation,
    /// Noisy gradients of layers `from..b`; earlier entries are zero.
    pub grads: Vec<Matrix>,
}

impl<'a> StochasticOracle<'a> {
    pub fn new(problem: &'a dyn Objective, noise: NoiseSpec, seed: u64) -> Result<Self, OptimizerError> {
        noise.validate(problem.num_layers())?;
        Ok(StochasticOracle { problem, noise, streams: SeedStreams::new(seed) })
    }

    pub fn problem(&self) -> &'a dyn Objective {
        self.problem
    }

    pub fn evaluate(
        &self,
        x: &[Matrix],
        from: usize,
        k: usize,
        cache: &mut ForwardCache,
    ) -> Result<NoisyEvaluation, OptimizerError> {
        let exact = self.problem.evaluate_cached(x, from, cache)?;
        let mut rng = self.streams.rng(StreamPurpose::GradientNoise, k as u64);
        let draws = self.noise.sample(&self.problem.shapes(), &mut rng);
        let grads = exact
            .grads
            .iter()
            .zip(draws)
            .enumerate()
            .map(|(i, (g, e))| if i >= from { g.add(&e) } else { g.clone() })
            .collect();
        Ok(NoisyEvaluation { exact, grads })
    }
}

/// Stochastic step with momentum: for active layers
/// `M_i ← (1−β_i)M_i + β_i g_i`, then `X_i ← X_i + lmo(M_i, t_i)`.
/// Inactive layers keep both `X_i` and `M_i`.
#[allow(clippy::too_many_arguments)]
pub fn stoch_step(
    oracle: &StochasticOracle<'_>,
    model: &mut LayerModel,
    momentum: &mut MomentumState,
    active: &ActiveSet,
    radii: &[f64],
    k: usize,
    orthogonalizer: Orthogonalizer,
    table: Option<&SmoothnessTable>,
    cache: &mut ForwardCache,
) -> Result<StepReport, OptimizerError> {
    let problem = oracle.problem();
    check_model(problem, model)?;
    let b = model.num_layers();
    check_active(active, b)?;
    if radii.len() != b || momentum.m.len() != b {
        return Err(OptimizerError::InvalidPolicy(format!("radii and momentum must have {b} entries")));
    }
    let eval = oracle.evaluate(&model.layers, active.min_index(), k, cache)?;
    let mut layers = Vec::with_capacity(active.len());
    let mut bound = table.map(|_| eval.exact.value);
    for i in active.iter() {
        let t = radii[i];
        if !(t.is_finite() && t > 0.0) {
            return Err(OptimizerError::InvalidPolicy(format!("radius of active layer {i} is {t}")));
        }
        let kind = model.norms[i];
        let beta = momentum.beta[i];
        let m = momentum.m[i].scaled(1.0 - beta);
        momentum.m[i] = m;
        momentum.m[i].add_scaled(beta, &eval.grads[i]);
        let out = lmo_with(kind, &momentum.m[i], t, orthogonalizer)?;
        let displacement = if out.degenerate { 0.0 } else { norm(kind, &out.direction) };
        if !out.degenerate {
            model.layers[i] = model.layers[i].add(&out.direction);
        }
        let exact = &eval.exact.grads[i];
        let g_norm = dual_norm(kind, exact);
        let m_err = dual_norm(kind, &momentum.m[i].sub(exact));
        if let (Some(bound), Some(table)) = (bound.as_mut(), table) {
            let l0 = table.l0(i, active)?;
            let l1 = if table.has_l1() { table.l1(i, active)? } else { 0.0 };
            *bound += 2.0 * t * m_err - t * g_norm + (l0 + l1 * g_norm) / 2.0 * t * t;
        }
        layers.push(LayerStep {
            layer: i,
            grad_dual_norm: g_norm,
            step: t,
            displacement,
            momentum_error: Some(m_err),
            degenerate: out.degenerate,
        });
    }
    let f_after = problem.value(&model.layers)?;
    Ok(StepReport {
        k,
        active: active.clone(),
        f_before: eval.exact.value,
        f_after,
        layers,
        descent_bound: bound,
        full_grad_dual_norms: Vec::new(),
        cost_units: None,
        macs: eval.exact.macs,
    })
}

/// Which convergence guarantee the weights come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightRegime {
    /// `w_i = E[1{i∈S}/(2L⁰_{i,S})]`; bounds averaged squared dual norms.
    Smooth,
    /// `w_i = P(i∈S)²/E[L¹_{i,S}1{i∈S}]`; bounds the minimum of dual norms.
    L0L1,
    /// `w_i = P(i∈S)·η_i`; bounds the minimum of expected dual norms.
    Stochastic { eta: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TheoryWeights {
    pub w: Vec<f64>,
    /// `(1/b) Σ_j w_j`.
    pub mean: f64,
    regime: WeightRegime,
    expectations: Option<LayerExpectations>,
}

/// Per-layer weights of the rate guarantee for `scheme`. Any layer with
/// zero weight is an error, since the guarantee then says nothing about it.
pub fn theory_weights(
    scheme: &SamplingScheme,
    table: Option<&SmoothnessTable>,
    regime: &WeightRegime,
) -> Result<TheoryWeights, OptimizerError> {
    scheme.validate()?;
    let b = scheme.num_layers();
    let need_table = || {
        table.ok_or_else(|| OptimizerError::InvalidPolicy("this weight regime needs a smoothness table".into()))
    };
    let (w, expectations) = match regime {
        WeightRegime::Stochastic { eta } => {
            if eta.len() != b || eta.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
                return Err(OptimizerError::InvalidPolicy(format!("eta must hold {b} positive entries")));
            }
            let q = scheme.marginals().q;
            (q.iter().zip(eta).map(|(q, e)| q * e).collect::<Vec<_>>(), None)
        }
        WeightRegime::Smooth => {
            let e = layer_expectations(scheme, need_table()?)?;
            (e.half_inv_l0.clone(), Some(e))
        }
        WeightRegime::L0L1 => {
            let e = layer_expectations(scheme, need_table()?)?;
            let e1 = e.l1.as_ref().ok_or(CostError::MissingConstant { which: "L1", layer: 0, key: 0 })?;
            let w = (0..b)
                .map(|i| {
                    if e.q[i] == 0.0 {
                        Ok(0.0)
                    } else if e1[i] > 0.0 {
                        Ok(e.q[i] * e.q[i] / e1[i])
                    } else {
                        Err(CostError::NonPositiveConstant { which: "L1", layer: i, key: 0 })
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            (w, Some(e))
        }
    };
    if let Some(i) = w.iter().position(|&x| !(x > 0.0)) {
        return Err(OptimizerError::LayerNeverUpdated(i));
    }
    let mean = w.iter().sum::<f64>() / b as f64;
    Ok(TheoryWeights { w, mean, regime: regime.clone(), expectations })
}

impl TheoryWeights {
    pub fn normalized(&self) -> Vec<f64> {
        self.w.iter().map(|w| w / self.mean).collect()
    }

    /// `Σ_i (w_i/mean) ‖∇_i f‖_★^p` with `p = 2` in the smooth regime and
    /// `p = 1` otherwise: the quantity each guarantee controls.
    pub fn aggregate(&self, dual_norms: &[f64]) -> f64 {
        let squared = matches!(self.regime, WeightRegime::Smooth);
        self.w
            .iter()
            .zip(dual_norms)
            .map(|(w, g)| w / self.mean * if squared { g * g } else { *g })
            .sum()
    }

    /// Smooth regime: bound `δ⁰/(K·mean w)` on the averaged weighted squared
    /// dual norms over `K` iterations.
    pub fn rate_bound(&self, delta0: f64, k: usize) -> f64 {
        delta0 / (k as f64 * self.mean)
    }

    /// `(L⁰,L¹)` regime: iterations sufficient for the minimum weighted dual
    /// norm to drop below `eps`.
    pub fn iterations_l0l1(&self, delta0: f64, eps: f64) -> Result<f64, OptimizerError> {
        let e = match (&self.regime, &self.expectations) {
            (WeightRegime::L0L1, Some(e)) => e,
            _ => return Err(OptimizerError::InvalidPolicy("iteration count needs l0l1 weights".into())),
        };
        let e1 = e.l1.as_ref().expect("present in l0l1 regime");
        let sum: f64 = (0..self.w.len()).map(|i| e.q[i] * e.q[i] * e.l0[i] / (e1[i] * e1[i])).sum();
        Ok((2.0 * delta0 * sum / (eps * eps * self.mean * self.mean) + 2.0 * delta0 / (eps * self.mean)).ceil())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scheme: SamplingScheme,
    /// When set, the RPT cutoff distribution is recomputed every iteration
    /// from the epoch-shift rule with this sharpness and progress `k/K`.
    #[serde(default)]
    pub epoch_shift_alpha: Option<f64>,
    pub policy: StepPolicy,
    pub iterations: usize,
    pub seed: u64,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    #[serde(default)]
    pub momentum_init: MomentumInit,
    #[serde(default)]
    pub orthogonalizer: Orthogonalizer,
    #[serde(default)]
    pub cost: Option<CostParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub reports: Vec<StepReport>,
    pub model: LayerModel,
    pub initial_value: f64,
    /// Cost of the momentum initialization gradient, outside the per-step rows.
    pub setup_units: f64,
    pub setup_macs: Option<u64>,
}

impl RunConfig {
    /// Sampling scheme in force at iteration `k`.
    pub fn scheme_at(&self, k: usize) -> Result<SamplingScheme, OptimizerError> {
        match self.epoch_shift_alpha {
            None => Ok(self.scheme.clone()),
            Some(alpha) => {
                let progress = if self.iterations == 0 { 0.0 } else { k as f64 / self.iterations as f64 };
                let b = self.scheme.num_layers();
                Ok(SamplingScheme::Rpt { p: epoch_shift_probs(&EpochShiftConfig { b, alpha, progress })? })
            }
        }
    }

    pub fn validate(&self, b: usize) -> Result<(), OptimizerError> {
        self.scheme.validate()?;
        if self.scheme.num_layers() != b {
            return Err(OptimizerError::InvalidModel(format!(
                "scheme has {} layers, problem has {b}",
                self.scheme.num_layers()
            )));
        }
        if self.epoch_shift_alpha.is_some() && !matches!(self.scheme, SamplingScheme::Rpt { .. }) {
            return Err(OptimizerError::InvalidPolicy("epoch shift applies to rpt schemes only".into()));
        }
        if let Some(noise) = &self.noise {
            noise.validate(b)?;
            if self.policy.is_deterministic() && !noise.is_zero() {
                return Err(OptimizerError::InvalidPolicy("deterministic policies need an exact gradient oracle".into()));
            }
        }
        if !self.policy.is_deterministic() {
            self.policy.radii_and_beta(b, self.iterations)?;
        }
        if matches!(self.policy, StepPolicy::HorizonSchedule { .. }) && self.momentum_init != MomentumInit::FirstStochasticGradient {
            return Err(OptimizerError::InvalidPolicy(
                "horizon_schedule requires momentum initialized with the first stochastic gradient".into(),
            ));
        }
        if let Some(cp) = &self.cost {
            cp.validate()?;
            if cp.num_layers() != b {
                return Err(CostError::LayerCount { what: "cost params", expected: b, got: cp.num_layers() }.into());
            }
        }
        Ok(())
    }
}

/// Run `cfg.iterations` steps from `model`. Deterministic given `cfg.seed`.
/// `table` is required by the deterministic policies and enables the
/// descent-bound diagnostic for the stochastic ones.
pub fn run(
    problem: &dyn Objective,
    mut model: LayerModel,
    cfg: &RunConfig,
    table: Option<&SmoothnessTable>,
) -> Result<RunOutput, OptimizerError> {
    check_model(problem, &model)?;
    let b = model.num_layers();
    cfg.validate(b)?;
    if cfg.policy.is_deterministic() && table.is_none() {
        return Err(OptimizerError::InvalidPolicy("deterministic policies need a smoothness table".into()));
    }
    let streams = SeedStreams::new(cfg.seed);
    let noise = cfg.noise.clone().unwrap_or_else(|| NoiseSpec::zero(b));
    let oracle = StochasticOracle::new(problem, noise, cfg.seed)?;
    let mut cache = ForwardCache::default();
    let initial_value = problem.value(&model.layers)?;

    let mut setup_units = 0.0;
    let mut setup_macs = None;
    let mut stochastic = None;
    if !cfg.policy.is_deterministic() {
        let (radii, beta) = cfg.policy.radii_and_beta(b, cfg.iterations)?;
        let momentum = match cfg.momentum_init {
            MomentumInit::Zeros => MomentumState::zeros(&model.shapes(), vec![beta; b])?,
            MomentumInit::FirstStochasticGradient if cfg.iterations > 0 => {
                let first = oracle.evaluate(&model.layers, 0, 0, &mut cache)?;
                setup_macs = first.exact.macs;
                if let Some(cp) = &cfg.cost {
                    setup_units = iteration_cost(&ActiveSet::range(0, b), cp);
                }
                MomentumState::new(first.grads, vec![beta; b])?
            }
            MomentumInit::FirstStochasticGradient => MomentumState::zeros(&model.shapes(), vec![beta; b])?,
        };
        stochastic = Some((radii, momentum));
    }

    let mut reports = Vec::with_capacity(cfg.iterations);
    for k in 0..cfg.iterations {
        let at = |e: OptimizerError| OptimizerError::AtIteration { k, source: Box::new(e) };
        let scheme = cfg.scheme_at(k).map_err(at)?;
        let active = scheme.sample(&mut streams.rng(StreamPurpose::Sampling, k as u64));
        let (_, exact) = problem.value_and_grad(&model.layers).map_err(|e| at(e.into()))?;
        let full_norms: Vec<f64> = exact.iter().zip(&model.norms).map(|(g, &kind)| dual_norm(kind, g)).collect();
        let mut report = match stochastic.as_mut() {
            None => det_step(problem, &mut model, &active, &cfg.policy, table.expect("checked"), &mut cache),
            Some((radii, momentum)) => {
                stoch_step(&oracle, &mut model, momentum, &active, radii, k, cfg.orthogonalizer, table, &mut cache)
            }
        }
        .map_err(at)?;
        report.k = k;
        report.full_grad_dual_norms = full_norms;
        report.cost_units = cfg.cost.as_ref().map(|cp| iteration_cost(&active, cp));
        reports.push(report);
    }
    Ok(RunOutput { reports, model, initial_value, setup_units, setup_macs })
}

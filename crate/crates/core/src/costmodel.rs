//! Compute-cost model and optimal sampling distributions.
//!
//! One iteration with active set `S` costs
//! `c_ov + Σ_{i ≥ min S} c_i + Σ_{i ∈ S} c♯_i`: the backward pass runs from the
//! last layer down to the shallowest active one, and each active layer pays
//! for its update. The total cost of reaching an `ε`-stationary point is the
//! iteration bound for the scheme times the expected per-iteration cost.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampling::{binomial, ActiveSet, SamplingError, SamplingScheme};

/// Largest layer count accepted by [`optimal_rpt_probs_l0l1`].
pub const L0L1_SOLVER_MAX_LAYERS: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostError {
    #[error("invalid cost parameters: {0}")]
    InvalidCostParams(String),
    #[error("layer count mismatch: {what} has {got} layers, expected {expected}")]
    LayerCount { what: &'static str, expected: usize, got: usize },
    #[error("missing {which} smoothness constant for layer {layer}, set key {key}")]
    MissingConstant { which: &'static str, layer: usize, key: usize },
    #[error("{which} smoothness constant for layer {layer}, set key {key} must be positive")]
    NonPositiveConstant { which: &'static str, layer: usize, key: usize },
    #[error("table in {mode} mode has no entry for active set {set:?}")]
    UnsupportedSet { mode: &'static str, set: Vec<usize> },
    #[error("layer {0} never updated")]
    LayerNeverUpdated(usize),
    #[error("invalid smoothness table: {0}")]
    InvalidTable(String),
    #[error("the (L0,L1) solver supports at most {max} layers, got {b}; use a partitioned scheme")]
    TooManyLayers { b: usize, max: usize },
    #[error("epsilon must be positive and delta0 non-negative")]
    InvalidTarget,
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub c_ov: f64,
    pub c: Vec<f64>,
    pub c_sharp: Vec<f64>,
}

impl CostParams {
    pub fn new(c_ov: f64, c: Vec<f64>, c_sharp: Vec<f64>) -> Result<Self, CostError> {
        let cp = CostParams { c_ov, c, c_sharp };
        cp.validate()?;
        Ok(cp)
    }

    pub fn num_layers(&self) -> usize {
        self.c.len()
    }

    pub fn validate(&self) -> Result<(), CostError> {
        let bad = |msg: String| Err(CostError::InvalidCostParams(msg));
        if self.c.is_empty() {
            return bad("c must be non-empty".into());
        }
        if self.c.len() != self.c_sharp.len() {
            return bad(format!("c has {} entries but c_sharp has {}", self.c.len(), self.c_sharp.len()));
        }
        if !(self.c_ov.is_finite() && self.c_ov >= 0.0) {
            return bad(format!("c_ov = {} must be finite and non-negative", self.c_ov));
        }
        if let Some((i, v)) = self.c.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return bad(format!("c[{i}] = {v} must be finite and positive"));
        }
        if let Some((i, v)) = self.c_sharp.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return bad(format!("c_sharp[{i}] = {v} must be finite and non-negative"));
        }
        Ok(())
    }

    fn expect_layers(&self, b: usize) -> Result<(), CostError> {
        self.validate()?;
        if self.num_layers() != b {
            return Err(CostError::LayerCount { what: "cost params", expected: b, got: self.num_layers() });
        }
        Ok(())
    }

    /// `d_i = c_ov + Σ_{j ≥ i} (c_j + c♯_j)`: the cost of an RPT iteration with cutoff `i`.
    pub fn cutoff_costs(&self) -> Vec<f64> {
        let b = self.num_layers();
        let mut d = vec![0.0; b];
        let mut tail = 0.0;
        for i in (0..b).rev() {
            tail += self.c[i] + self.c_sharp[i];
            d[i] = self.c_ov + tail;
        }
        d
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableMode {
    /// Keys are RPT cutoffs `s ≤ i`, standing for the set `{s, …, b-1}`.
    RptCutoff,
    /// Keys are block ids of a partition stored with the table.
    Partition,
}

impl TableMode {
    fn name(self) -> &'static str {
        match self {
            TableMode::RptCutoff => "rpt_cutoff",
            TableMode::Partition => "partition",
        }
    }
}

/// Layer-wise smoothness constants `L⁰_{i,S}` and optionally `L¹_{i,S}`,
/// indexed by layer and set key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TableDoc", into = "TableDoc")]
pub struct SmoothnessTable {
    b: usize,
    mode: TableMode,
    blocks: Vec<Vec<usize>>,
    l0: BTreeMap<(usize, usize), f64>,
    l1: BTreeMap<(usize, usize), f64>,
    /// Set when constants are estimates rather than proven bounds.
    pub approximate: bool,
}

#[derive(Serialize, Deserialize)]
struct TableDoc {
    mode: TableMode,
    b: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    blocks: Vec<Vec<usize>>,
    entries: Vec<TableEntry>,
    #[serde(default)]
    approximate: bool,
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    layer: usize,
    key: usize,
    l0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    l1: Option<f64>,
}

impl TryFrom<TableDoc> for SmoothnessTable {
    type Error = CostError;
    fn try_from(doc: TableDoc) -> Result<Self, CostError> {
        let mut t = match doc.mode {
            TableMode::RptCutoff => SmoothnessTable::rpt(doc.b),
            TableMode::Partition => SmoothnessTable::partition(doc.blocks)?,
        };
        if t.b != doc.b {
            return Err(CostError::InvalidTable(format!("blocks cover {} layers but b = {}", t.b, doc.b)));
        }
        t.approximate = doc.approximate;
        for e in doc.entries {
            t.set_l0(e.layer, e.key, e.l0)?;
            if let Some(l1) = e.l1 {
                t.set_l1(e.layer, e.key, l1)?;
            }
        }
        Ok(t)
    }
}

impl From<SmoothnessTable> for TableDoc {
    fn from(t: SmoothnessTable) -> Self {
        let entries = t
            .l0
            .iter()
            .map(|(&(layer, key), &l0)| TableEntry { layer, key, l0, l1: t.l1.get(&(layer, key)).copied() })
            .collect();
        TableDoc { mode: t.mode, b: t.b, blocks: t.blocks, entries, approximate: t.approximate }
    }
}

impl SmoothnessTable {
    pub fn rpt(b: usize) -> Self {
        SmoothnessTable {
            b,
            mode: TableMode::RptCutoff,
            blocks: Vec::new(),
            l0: BTreeMap::new(),
            l1: BTreeMap::new(),
            approximate: false,
        }
    }

    /// RPT table filled from `l0(i, s)` for every `s ≤ i`.
    pub fn rpt_from_fn(b: usize, mut l0: impl FnMut(usize, usize) -> f64) -> Result<Self, CostError> {
        let mut t = SmoothnessTable::rpt(b);
        for i in 0..b {
            for s in 0..=i {
                t.set_l0(i, s, l0(i, s))?;
            }
        }
        Ok(t)
    }

    pub fn partition(blocks: Vec<Vec<usize>>) -> Result<Self, CostError> {
        let probe = SamplingScheme::Partitioned { p: vec![1.0 / blocks.len().max(1) as f64; blocks.len()], blocks };
        let SamplingScheme::Partitioned { mut blocks, .. } = probe.clone() else { unreachable!() };
        // only the block structure is validated here
        if let Err(e) = probe.validate() {
            if !matches!(e, SamplingError::ProbSum(_)) {
                return Err(e.into());
            }
        }
        for blk in &mut blocks {
            blk.sort_unstable();
        }
        Ok(SmoothnessTable {
            b: blocks.iter().map(Vec::len).sum(),
            mode: TableMode::Partition,
            blocks,
            l0: BTreeMap::new(),
            l1: BTreeMap::new(),
            approximate: false,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.b
    }

    pub fn mode(&self) -> TableMode {
        self.mode
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn has_l1(&self) -> bool {
        !self.l1.is_empty()
    }

    fn check_key(&self, layer: usize, key: usize) -> Result<(), CostError> {
        let ok = layer < self.b
            && match self.mode {
                TableMode::RptCutoff => key <= layer,
                TableMode::Partition => self.blocks.get(key).is_some_and(|blk| blk.contains(&layer)),
            };
        if ok {
            Ok(())
        } else {
            Err(CostError::InvalidTable(format!(
                "layer {layer} with key {key} is not a valid {} entry",
                self.mode.name()
            )))
        }
    }

    fn check_value(which: &str, v: f64) -> Result<(), CostError> {
        if v.is_finite() && v >= 0.0 {
            Ok(())
        } else {
            Err(CostError::InvalidTable(format!("{which} value {v} must be finite and non-negative")))
        }
    }

    pub fn set_l0(&mut self, layer: usize, key: usize, v: f64) -> Result<(), CostError> {
        self.check_key(layer, key)?;
        Self::check_value("L0", v)?;
        self.l0.insert((layer, key), v);
        Ok(())
    }

    pub fn set_l1(&mut self, layer: usize, key: usize, v: f64) -> Result<(), CostError> {
        self.check_key(layer, key)?;
        Self::check_value("L1", v)?;
        self.l1.insert((layer, key), v);
        Ok(())
    }

    pub fn l0_at(&self, layer: usize, key: usize) -> Result<f64, CostError> {
        self.l0.get(&(layer, key)).copied().ok_or(CostError::MissingConstant { which: "L0", layer, key })
    }

    pub fn l1_at(&self, layer: usize, key: usize) -> Result<f64, CostError> {
        self.l1.get(&(layer, key)).copied().ok_or(CostError::MissingConstant { which: "L1", layer, key })
    }

    /// Key under which constants for `set` are stored.
    pub fn key_for(&self, set: &ActiveSet) -> Result<usize, CostError> {
        let unsupported = || CostError::UnsupportedSet { mode: self.mode.name(), set: set.indices().to_vec() };
        match self.mode {
            TableMode::RptCutoff => {
                let s = set.min_index();
                let suffix = s < self.b && set.len() == self.b - s && set.indices().last() == Some(&(self.b - 1));
                suffix.then_some(s).ok_or_else(unsupported)
            }
            TableMode::Partition => {
                self.blocks.iter().position(|blk| blk.as_slice() == set.indices()).ok_or_else(unsupported)
            }
        }
    }

    pub fn l0(&self, layer: usize, set: &ActiveSet) -> Result<f64, CostError> {
        self.l0_at(layer, self.key_for(set)?)
    }

    pub fn l1(&self, layer: usize, set: &ActiveSet) -> Result<f64, CostError> {
        self.l1_at(layer, self.key_for(set)?)
    }

    fn rpt_dense(&self, which: &'static str) -> Result<Vec<Vec<f64>>, CostError> {
        if self.mode != TableMode::RptCutoff {
            return Err(CostError::InvalidTable("expected an rpt_cutoff table".into()));
        }
        let map = if which == "L0" { &self.l0 } else { &self.l1 };
        (0..self.b)
            .map(|i| {
                (0..=i)
                    .map(|s| map.get(&(i, s)).copied().ok_or(CostError::MissingConstant { which, layer: i, key: s }))
                    .collect()
            })
            .collect()
    }

    /// Dense lower-triangular `L⁰[i][s]` for an RPT table.
    pub fn rpt_l0_dense(&self) -> Result<Vec<Vec<f64>>, CostError> {
        self.rpt_dense("L0")
    }

    pub fn rpt_l1_dense(&self) -> Result<Vec<Vec<f64>>, CostError> {
        self.rpt_dense("L1")
    }

    /// Pairs `(layer, s1, s2)` with `s1 < s2` and `L_{i,{s2..}} > L_{i,{s1..}}`
    /// for either constant family. Empty for partition tables.
    pub fn nested_violations(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        if self.mode != TableMode::RptCutoff {
            return out;
        }
        for map in [&self.l0, &self.l1] {
            for i in 0..self.b {
                for s1 in 0..=i {
                    for s2 in s1 + 1..=i {
                        if let (Some(a), Some(b)) = (map.get(&(i, s1)), map.get(&(i, s2))) {
                            if b > a {
                                out.push((i, s1, s2));
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

pub fn iteration_cost(set: &ActiveSet, cp: &CostParams) -> f64 {
    let forward_backward: f64 = cp.c[set.min_index()..].iter().sum();
    let update: f64 = set.iter().map(|i| cp.c_sharp[i]).sum();
    cp.c_ov + forward_backward + update
}

pub fn expected_iteration_cost(scheme: &SamplingScheme, cp: &CostParams) -> Result<f64, CostError> {
    Ok(cost_terms(scheme, cp)?.iter().sum())
}

/// `[c_ov, Σ c_i F_i, Σ c♯_i Q_i]`.
fn cost_terms(scheme: &SamplingScheme, cp: &CostParams) -> Result<[f64; 3], CostError> {
    scheme.validate()?;
    cp.expect_layers(scheme.num_layers())?;
    let m = scheme.marginals();
    let fb = cp.c.iter().zip(&m.f).map(|(c, f)| c * f).sum();
    let up = cp.c_sharp.iter().zip(&m.q).map(|(c, q)| c * q).sum();
    Ok([cp.c_ov, fb, up])
}

/// Per-layer expectations over the sampling distribution used by the rate bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerExpectations {
    /// `P(i ∈ S)`.
    pub q: Vec<f64>,
    /// `E[1{i∈S} / (2 L⁰_{i,S})]`; infinite when a used constant is zero.
    pub half_inv_l0: Vec<f64>,
    /// `E[L⁰_{i,S} 1{i∈S}]`.
    pub l0: Vec<f64>,
    /// `E[L¹_{i,S} 1{i∈S}]` when the table has L¹ constants.
    pub l1: Option<Vec<f64>>,
}

pub fn layer_expectations(scheme: &SamplingScheme, table: &SmoothnessTable) -> Result<LayerExpectations, CostError> {
    scheme.validate()?;
    let b = scheme.num_layers();
    if table.num_layers() != b {
        return Err(CostError::LayerCount { what: "smoothness table", expected: b, got: table.num_layers() });
    }
    let mut q = vec![0.0; b];
    let mut inv = vec![0.0; b];
    let mut e0 = vec![0.0; b];
    let mut e1 = table.has_l1().then(|| vec![0.0; b]);
    for (set, prob) in scheme.atoms() {
        let key = table.key_for(&set)?;
        for i in set.iter() {
            let l0 = table.l0_at(i, key)?;
            q[i] += prob;
            e0[i] += prob * l0;
            inv[i] += if l0 > 0.0 { prob / (2.0 * l0) } else { f64::INFINITY };
            if let Some(e1) = e1.as_mut() {
                e1[i] += prob * table.l1_at(i, key)?;
            }
        }
    }
    Ok(LayerExpectations { q, half_inv_l0: inv, l0: e0, l1: e1 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CostRegime {
    /// Layer-wise smooth; `K = δ⁰ / (ε min_i E[1{i∈S}/(2L⁰)])`.
    #[serde(rename = "smooth")]
    Smooth,
    /// Generalized smooth, `O(ε⁻²)` term of the iteration bound.
    #[serde(rename = "l0l1-eps2")]
    L0L1Eps2,
    /// Generalized smooth, `O(ε⁻¹)` term of the iteration bound.
    #[serde(rename = "l0l1-eps")]
    L0L1Eps,
}

impl std::str::FromStr for CostRegime {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "smooth" => Ok(CostRegime::Smooth),
            "l0l1-eps2" => Ok(CostRegime::L0L1Eps2),
            "l0l1-eps" => Ok(CostRegime::L0L1Eps),
            other => Err(format!("unknown regime '{other}', expected smooth, l0l1-eps or l0l1-eps2")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub regime: CostRegime,
    pub iterations: f64,
    pub iteration_cost: f64,
    pub total: f64,
    /// Split of `iteration_cost` into overhead, forward/backward and update parts.
    pub overhead: f64,
    pub forward_backward: f64,
    pub update: f64,
}

/// `min_i P(i∈S)² / E[L¹ 1{i∈S}]`, erroring when a layer is never updated.
fn l0l1_min_ratio(e: &LayerExpectations) -> Result<f64, CostError> {
    let e1 = e.l1.as_ref().ok_or(CostError::MissingConstant { which: "L1", layer: 0, key: 0 })?;
    let mut min = f64::INFINITY;
    for (i, (&q, &l1)) in e.q.iter().zip(e1).enumerate() {
        if q == 0.0 {
            return Err(CostError::LayerNeverUpdated(i));
        }
        if l1 == 0.0 {
            return Err(CostError::NonPositiveConstant { which: "L1", layer: i, key: 0 });
        }
        min = min.min(q * q / l1);
    }
    Ok(min)
}

/// Expected total cost to reach an `ε`-stationary point under `regime`.
/// With `ceil` the iteration count is rounded up to a whole number of steps.
pub fn total_cost(
    scheme: &SamplingScheme,
    cp: &CostParams,
    table: &SmoothnessTable,
    delta0: f64,
    eps: f64,
    regime: CostRegime,
    ceil: bool,
) -> Result<CostBreakdown, CostError> {
    if !(eps > 0.0 && eps.is_finite() && delta0 >= 0.0 && delta0.is_finite()) {
        return Err(CostError::InvalidTarget);
    }
    let [overhead, forward_backward, update] = cost_terms(scheme, cp)?;
    let e = layer_expectations(scheme, table)?;
    let iterations = match regime {
        CostRegime::Smooth => {
            if let Some(i) = e.q.iter().position(|&q| q == 0.0) {
                return Err(CostError::LayerNeverUpdated(i));
            }
            let wmin = e.half_inv_l0.iter().copied().fold(f64::INFINITY, f64::min);
            delta0 / (eps * wmin)
        }
        CostRegime::L0L1Eps => 2.0 * delta0 / (eps * l0l1_min_ratio(&e)?),
        CostRegime::L0L1Eps2 => {
            let m = l0l1_min_ratio(&e)?;
            let e1 = e.l1.as_ref().expect("checked by min ratio");
            let num: f64 = (0..e.q.len()).map(|i| e.q[i] * e.q[i] * e.l0[i] / (e1[i] * e1[i])).sum();
            2.0 * delta0 * num / (eps * eps * m * m)
        }
    };
    let iterations = if ceil { iterations.ceil() } else { iterations };
    let iteration_cost = overhead + forward_backward + update;
    Ok(CostBreakdown {
        regime,
        iterations,
        iteration_cost,
        total: iterations * iteration_cost,
        overhead,
        forward_backward,
        update,
    })
}

/// Smooth-regime RPT cost objective, up to the factor `δ⁰/ε`:
/// `(c_ov + Σ_i (c_i + c♯_i) F_i) / min_i Σ_{s≤i} p_s / (2 L⁰_{i,s})`.
#[derive(Clone, Debug)]
pub struct SmoothRptObjective {
    l0: Vec<Vec<f64>>,
    cp: CostParams,
}

impl SmoothRptObjective {
    pub fn new(table: &SmoothnessTable, cp: &CostParams) -> Result<Self, CostError> {
        cp.expect_layers(table.num_layers())?;
        Ok(SmoothRptObjective { l0: table.rpt_l0_dense()?, cp: cp.clone() })
    }

    /// `+∞` when some layer has zero weight.
    pub fn eval(&self, p: &[f64]) -> f64 {
        let mut f = 0.0;
        let mut num = self.cp.c_ov;
        let mut wmin = f64::INFINITY;
        for (i, row) in self.l0.iter().enumerate() {
            f += p[i];
            num += (self.cp.c[i] + self.cp.c_sharp[i]) * f;
            let w: f64 = row.iter().zip(p).map(|(l, ps)| if *ps > 0.0 { ps / (2.0 * l) } else { 0.0 }).sum();
            wmin = wmin.min(w);
        }
        if wmin > 0.0 {
            num / wmin
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RptOptimum {
    pub p: Vec<f64>,
    /// Unnormalized recursion output.
    pub q: Vec<f64>,
    /// Smooth-regime objective at `p`.
    pub objective: f64,
}

/// Optimal RPT cutoff distribution in the smooth regime, by the forward
/// recursion `q_0 = 2L_{0,0}`, `q_i = 2 [1 − Σ_{s<i} q_s/(2L_{i,s})]₊ L_{i,i}`.
/// The result depends only on the smoothness constants; `cp` is used for
/// validation and the reported objective.
pub fn optimal_rpt_probs_smooth(table: &SmoothnessTable, cp: &CostParams) -> Result<RptOptimum, CostError> {
    let objective = SmoothRptObjective::new(table, cp)?;
    let l = &objective.l0;
    for (i, row) in l.iter().enumerate() {
        if let Some(s) = row.iter().position(|&v| v <= 0.0) {
            return Err(CostError::NonPositiveConstant { which: "L0", layer: i, key: s });
        }
    }
    let b = l.len();
    let mut q = vec![0.0; b];
    q[0] = 2.0 * l[0][0];
    for i in 1..b {
        let used: f64 = (0..i).map(|s| q[s] / (2.0 * l[i][s])).sum();
        q[i] = 2.0 * (1.0 - used).max(0.0) * l[i][i];
    }
    let total: f64 = q.iter().sum();
    let p: Vec<f64> = q.iter().map(|x| x / total).collect();
    Ok(RptOptimum { objective: objective.eval(&p), p, q })
}

/// Full-network training minimizes the smooth-regime cost exactly when layer
/// 0 has the largest full-set constant. Ties count as optimal; the optimum is
/// then not unique.
pub fn full_network_optimal_smooth(table: &SmoothnessTable) -> Result<bool, CostError> {
    if table.mode() != TableMode::RptCutoff {
        return Err(CostError::InvalidTable("expected an rpt_cutoff table".into()));
    }
    let first = table.l0_at(0, 0)?;
    for i in 1..table.num_layers() {
        if table.l0_at(i, 0)? > first {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionObjective {
    Smooth,
    L0L1Eps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionOptimum {
    pub p: Vec<f64>,
    /// `max_{i∈B_k} L_{i,B_k}` per block.
    pub block_max: Vec<f64>,
    /// Cost of running block `k` alone: `c_ov + Σ_{j ≥ min B_k} c_j + Σ_{j∈B_k} c♯_j`.
    pub block_cost: Vec<f64>,
    /// Optimal value `Σ_k d_k / min_{i∈B_k} δ_{i,k}`: `2 Σ_k d_k max L⁰` in the
    /// smooth regime, `Σ_k d_k max L¹` in the `ε` regime.
    pub min_cost: f64,
    /// `δ_{i,k(i)}`: `1/(2L⁰)` or `1/L¹`.
    pub delta: Vec<f64>,
    /// Dual variables certifying optimality; `Σ λ = min_cost`.
    pub certificate: Vec<f64>,
}

/// Closed-form optimum for partitioned sampling: `p_k ∝ max_{i∈B_k} L_{i,B_k}`.
pub fn optimal_partition_probs(
    table: &SmoothnessTable,
    cp: &CostParams,
    objective: PartitionObjective,
) -> Result<PartitionOptimum, CostError> {
    if table.mode() != TableMode::Partition {
        return Err(CostError::InvalidTable("expected a partition table".into()));
    }
    cp.expect_layers(table.num_layers())?;
    let blocks = table.blocks();
    let mut delta = vec![0.0; table.num_layers()];
    let mut block_max = Vec::with_capacity(blocks.len());
    let mut block_cost = Vec::with_capacity(blocks.len());
    let mut certificate = vec![0.0; table.num_layers()];
    for (k, blk) in blocks.iter().enumerate() {
        let mut worst: Option<(usize, f64)> = None;
        for &i in blk {
            let (which, l) = match objective {
                PartitionObjective::Smooth => ("L0", table.l0_at(i, k)?),
                PartitionObjective::L0L1Eps => ("L1", table.l1_at(i, k)?),
            };
            if l <= 0.0 {
                return Err(CostError::NonPositiveConstant { which, layer: i, key: k });
            }
            delta[i] = match objective {
                PartitionObjective::Smooth => 1.0 / (2.0 * l),
                PartitionObjective::L0L1Eps => 1.0 / l,
            };
            if worst.is_none_or(|(_, m)| l > m) {
                worst = Some((i, l));
            }
        }
        let (i_k, max_l) = worst.expect("blocks are non-empty");
        let start = blk[0];
        let d = cp.c_ov + cp.c[start..].iter().sum::<f64>() + blk.iter().map(|&j| cp.c_sharp[j]).sum::<f64>();
        certificate[i_k] = d / delta[i_k];
        block_max.push(max_l);
        block_cost.push(d);
    }
    let total: f64 = block_max.iter().sum();
    let p = block_max.iter().map(|m| m / total).collect();
    let min_cost = certificate.iter().sum();
    Ok(PartitionOptimum { p, block_max, block_cost, min_cost, delta, certificate })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum L0L1Regime {
    #[serde(rename = "l0l1-eps")]
    Eps,
    #[serde(rename = "l0l1-eps2")]
    Eps2,
}

/// Generalized-smooth RPT cost objective, up to a constant factor.
#[derive(Clone, Debug)]
pub struct L0L1RptObjective {
    l0: Vec<Vec<f64>>,
    l1: Vec<Vec<f64>>,
    d: Vec<f64>,
    regime: L0L1Regime,
}

impl L0L1RptObjective {
    pub fn new(table: &SmoothnessTable, cp: &CostParams, regime: L0L1Regime) -> Result<Self, CostError> {
        cp.expect_layers(table.num_layers())?;
        let l1 = table.rpt_l1_dense()?;
        for (i, row) in l1.iter().enumerate() {
            if let Some(s) = row.iter().position(|&v| v <= 0.0) {
                return Err(CostError::NonPositiveConstant { which: "L1", layer: i, key: s });
            }
        }
        let l0 = match regime {
            L0L1Regime::Eps2 => table.rpt_l0_dense()?,
            L0L1Regime::Eps => Vec::new(),
        };
        Ok(L0L1RptObjective { l0, l1, d: cp.cutoff_costs(), regime })
    }

    pub fn eval(&self, p: &[f64]) -> f64 {
        let num: f64 = self.d.iter().zip(p).map(|(d, p)| d * p).sum();
        let mut prefix = 0.0;
        let mut min_ratio = f64::INFINITY;
        let mut l0_term = 0.0;
        for (i, row) in self.l1.iter().enumerate() {
            prefix += p[i];
            let e1: f64 = row.iter().zip(p).map(|(l, ps)| l * ps).sum();
            if prefix <= 0.0 {
                return f64::INFINITY;
            }
            let ratio = prefix * prefix / e1;
            min_ratio = min_ratio.min(ratio);
            if self.regime == L0L1Regime::Eps2 {
                let e0: f64 = self.l0[i].iter().zip(p).map(|(l, ps)| l * ps).sum();
                l0_term += prefix * prefix * e0 / (e1 * e1);
            }
        }
        match self.regime {
            L0L1Regime::Eps => num / min_ratio,
            L0L1Regime::Eps2 => l0_term * num / (min_ratio * min_ratio),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct L0L1Solution {
    pub p: Vec<f64>,
    pub objective: f64,
    /// Objective at full-network training `p = e_0`.
    pub full_network_objective: f64,
    /// Whether `p` is strictly better than full-network training.
    pub beats_full_network: bool,
    /// Whether layer 0 has the largest full-set `L¹`, the necessary condition
    /// for full-network training to be optimal.
    pub first_layer_is_max: bool,
    pub grid_resolution: usize,
    pub evaluations: usize,
}

fn l0l1_grid_resolution(b: usize) -> usize {
    match b {
        0 | 1 => 1,
        2 => 400,
        3 => 200,
        4 => 60,
        5 => 30,
        6 => 20,
        7 => 14,
        _ => 12,
    }
}

/// Numeric minimizer of the generalized-smooth RPT cost: exhaustive simplex
/// grid followed by pairwise mass-transfer refinement with halving steps.
pub fn optimal_rpt_probs_l0l1(
    table: &SmoothnessTable,
    cp: &CostParams,
    regime: L0L1Regime,
) -> Result<L0L1Solution, CostError> {
    let b = table.num_layers();
    if b > L0L1_SOLVER_MAX_LAYERS {
        return Err(CostError::TooManyLayers { b, max: L0L1_SOLVER_MAX_LAYERS });
    }
    let obj = L0L1RptObjective::new(table, cp, regime)?;
    let n = l0l1_grid_resolution(b);
    let (mut p, mut best) = brute_force_optimal_probs(|p| obj.eval(p), b, n);
    let mut evaluations = binomial(n + b - 1, b - 1) as usize;

    let mut step = 1.0 / n as f64;
    while step > 1e-12 {
        let mut improved = false;
        for from in 0..b {
            for to in 0..b {
                let amount = step.min(p[from]);
                if from == to || amount <= 0.0 {
                    continue;
                }
                let mut cand = p.clone();
                cand[from] -= amount;
                cand[to] += amount;
                let v = obj.eval(&cand);
                evaluations += 1;
                if v < best - 1e-14 * best.abs() {
                    p = cand;
                    best = v;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }

    let mut e0 = vec![0.0; b];
    e0[0] = 1.0;
    let full = obj.eval(&e0);
    let l1 = table.rpt_l1_dense()?;
    let first_layer_is_max = (1..b).all(|i| l1[i][0] <= l1[0][0]);
    Ok(L0L1Solution {
        beats_full_network: best < full,
        p,
        objective: best,
        full_network_objective: full,
        first_layer_is_max,
        grid_resolution: n,
        evaluations,
    })
}

/// Exhaustive minimizer over the simplex grid `{k/n : Σk = n}`.
///
/// Grid points are visited in ascending lexicographic order of `k` and ties
/// keep the first point, so a constant objective returns `(0, …, 0, 1)`.
pub fn brute_force_optimal_probs<F>(objective: F, b: usize, n: usize) -> (Vec<f64>, f64)
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    assert!(b >= 1 && n >= 1, "need at least one layer and a positive resolution");
    if b == 1 {
        return (vec![1.0], objective(&[1.0]));
    }
    let nf = n as f64;
    // shard on the first coordinate; each shard keeps its first minimizer
    let shards: Vec<(Vec<usize>, f64)> = (0..=n)
        .into_par_iter()
        .filter_map(|k0| {
            let mut best: Option<(Vec<usize>, f64)> = None;
            let mut k = vec![0usize; b];
            k[0] = k0;
            let mut p = vec![0.0; b];
            visit_compositions(&mut k, 1, n - k0, &mut |k| {
                for (pi, ki) in p.iter_mut().zip(k.iter()) {
                    *pi = *ki as f64 / nf;
                }
                let v = objective(&p);
                if best.as_ref().is_none_or(|(_, bv)| v < *bv) {
                    best = Some((k.to_vec(), v));
                }
            });
            best
        })
        .collect();
    let (k, v) = shards
        .into_iter()
        .reduce(|a, b| if b.1 < a.1 { b } else { a })
        .expect("grid is non-empty");
    (k.iter().map(|&x| x as f64 / nf).collect(), v)
}

fn visit_compositions(k: &mut [usize], pos: usize, remaining: usize, f: &mut impl FnMut(&[usize])) {
    if pos == k.len() - 1 {
        k[pos] = remaining;
        f(k);
        return;
    }
    for x in 0..=remaining {
        k[pos] = x;
        visit_compositions(k, pos + 1, remaining - x, f);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauScanRow {
    pub tau: usize,
    /// `max_i L⁰_{i,τ}`.
    pub a: f64,
    /// Cost factor `(b/τ) c_ov + Σ_j c_j (b/τ − C(b−j,τ)/C(b−1,τ−1)) + Σ_j c♯_j`.
    pub b: f64,
    /// `a · b`; the τ-nice cost is proportional to this.
    pub product: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauScan {
    pub rows: Vec<TauScanRow>,
    /// Smallest `τ` attaining the minimum product.
    pub argmin: usize,
    pub b_strictly_decreasing: bool,
}

/// τ-nice cost for every `τ` when `L⁰_{i,S}` depends only on `i` and `|S|`.
/// `l0(i, tau)` takes a 0-based layer and `tau ∈ 1..=b`.
pub fn tau_nice_cost_scan(cp: &CostParams, l0: impl Fn(usize, usize) -> f64) -> Result<TauScan, CostError> {
    cp.validate()?;
    let b = cp.num_layers();
    let sharp_sum: f64 = cp.c_sharp.iter().sum();
    let rows: Vec<TauScanRow> = (1..=b)
        .map(|tau| {
            let a = (0..b).map(|i| l0(i, tau)).fold(f64::NEG_INFINITY, f64::max);
            let ratio = b as f64 / tau as f64;
            let denom = binomial(b - 1, tau - 1);
            // j is 1-based in the formula: layer index i = j - 1
            let fb: f64 = (1..=b).map(|j| cp.c[j - 1] * (ratio - binomial(b - j, tau) / denom)).sum();
            let bf = ratio * cp.c_ov + fb + sharp_sum;
            TauScanRow { tau, a, b: bf, product: a * bf }
        })
        .collect();
    let argmin = rows
        .iter()
        .fold(None::<&TauScanRow>, |best, r| match best {
            Some(bst) if bst.product <= r.product => Some(bst),
            _ => Some(r),
        })
        .expect("b >= 1")
        .tau;
    let b_strictly_decreasing = rows.windows(2).all(|w| w[1].b < w[0].b);
    Ok(TauScan { rows, argmin, b_strictly_decreasing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::SeedStreams;
    use crate::sampling::StreamPurpose;
    use proptest::prelude::*;
    use rand::Rng;

    fn cp3() -> CostParams {
        CostParams::new(1.0, vec![1.0, 2.0, 3.0], vec![0.1, 0.2, 0.3]).unwrap()
    }

    fn table2(l11: f64, l21: f64, l22: f64) -> SmoothnessTable {
        let mut t = SmoothnessTable::rpt(2);
        t.set_l0(0, 0, l11).unwrap();
        t.set_l0(1, 0, l21).unwrap();
        t.set_l0(1, 1, l22).unwrap();
        t
    }

    fn unit_cp(b: usize) -> CostParams {
        CostParams::new(0.0, vec![1.0; b], vec![0.0; b]).unwrap()
    }

    #[test]
    fn iteration_cost_examples() {
        let cp = cp3();
        assert!((iteration_cost(&ActiveSet::new(vec![1, 2]).unwrap(), &cp) - 6.5).abs() < 1e-12);
        assert!((iteration_cost(&ActiveSet::range(0, 3), &cp) - (1.0 + 6.0 + 0.6)).abs() < 1e-12);
        assert!((iteration_cost(&ActiveSet::new(vec![2]).unwrap(), &cp) - (1.0 + 3.0 + 0.3)).abs() < 1e-12);
    }

    #[test]
    fn expected_cost_examples() {
        let cp = cp3();
        let full = expected_iteration_cost(&SamplingScheme::FullNetwork { b: 3 }, &cp).unwrap();
        assert!((full - iteration_cost(&ActiveSet::range(0, 3), &cp)).abs() < 1e-12);

        let rpt = SamplingScheme::rpt(vec![0.5, 0.5]).unwrap();
        assert!((expected_iteration_cost(&rpt, &unit_cp(2)).unwrap() - 1.5).abs() < 1e-15);

        let cp = CostParams::new(0.0, vec![1e-300; 4], vec![1.0; 4]).unwrap();
        let e = expected_iteration_cost(&SamplingScheme::TauNice { b: 4, tau: 2 }, &cp).unwrap();
        assert!((e - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cost_params_validation() {
        assert!(CostParams::new(0.0, vec![0.0], vec![0.0]).is_err());
        assert!(CostParams::new(-1.0, vec![1.0], vec![0.0]).is_err());
        assert!(CostParams::new(0.0, vec![1.0], vec![-0.1]).is_err());
        assert!(CostParams::new(0.0, vec![1.0, 1.0], vec![0.0]).is_err());
        let err = expected_iteration_cost(&SamplingScheme::FullNetwork { b: 3 }, &unit_cp(2)).unwrap_err();
        assert!(matches!(err, CostError::LayerCount { .. }));
    }

    #[test]
    fn recursion_examples() {
        let t = table2(1.0, 2.0, 1.0);
        let opt = optimal_rpt_probs_smooth(&t, &unit_cp(2)).unwrap();
        assert_eq!(opt.q, vec![2.0, 1.0]);
        assert!((opt.p[0] - 2.0 / 3.0).abs() < 1e-15 && (opt.p[1] - 1.0 / 3.0).abs() < 1e-15);

        let t = table2(2.0, 1.0, 1.0);
        assert_eq!(optimal_rpt_probs_smooth(&t, &unit_cp(2)).unwrap().p, vec![1.0, 0.0]);
        assert!(full_network_optimal_smooth(&t).unwrap());

        let t = SmoothnessTable::rpt_from_fn(1, |_, _| 3.0).unwrap();
        assert_eq!(optimal_rpt_probs_smooth(&t, &unit_cp(1)).unwrap().p, vec![1.0]);
    }

    // Oracle for the first recursion example: minimize the smooth objective on a fine grid.
    #[test]
    fn recursion_matches_grid_on_example() {
        let t = table2(1.0, 2.0, 1.0);
        let cp = unit_cp(2);
        let obj = SmoothRptObjective::new(&t, &cp).unwrap();
        let (p, _) = brute_force_optimal_probs(|p| obj.eval(p), 2, 300);
        assert!((p[0] - 2.0 / 3.0).abs() <= 1.0 / 300.0);
    }

    #[test]
    fn recursion_errors() {
        let t = table2(0.0, 2.0, 1.0);
        assert!(matches!(optimal_rpt_probs_smooth(&t, &unit_cp(2)), Err(CostError::NonPositiveConstant { .. })));
        let mut t = SmoothnessTable::rpt(2);
        t.set_l0(0, 0, 1.0).unwrap();
        let err = optimal_rpt_probs_smooth(&t, &unit_cp(2)).unwrap_err();
        assert_eq!(err.to_string(), "missing L0 smoothness constant for layer 1, set key 0");
    }

    #[test]
    fn full_network_condition_examples() {
        let t = SmoothnessTable::rpt_from_fn(3, |i, s| if s == 0 { [3.0, 1.0, 2.0][i] } else { 1.0 }).unwrap();
        assert!(full_network_optimal_smooth(&t).unwrap());
        let t = SmoothnessTable::rpt_from_fn(3, |i, s| if s == 0 { [1.0, 3.0, 2.0][i] } else { 1.0 }).unwrap();
        assert!(!full_network_optimal_smooth(&t).unwrap());
    }

    #[test]
    fn partition_examples() {
        let mut t = SmoothnessTable::partition(vec![vec![0, 1], vec![2]]).unwrap();
        t.set_l0(0, 0, 4.0).unwrap();
        t.set_l0(1, 0, 2.0).unwrap();
        t.set_l0(2, 1, 1.0).unwrap();
        let opt = optimal_partition_probs(&t, &unit_cp(3), PartitionObjective::Smooth).unwrap();
        assert!((opt.p[0] - 0.8).abs() < 1e-15 && (opt.p[1] - 0.2).abs() < 1e-15);

        let mut t = SmoothnessTable::partition((0..4).map(|i| vec![i]).collect()).unwrap();
        for i in 0..4 {
            t.set_l0(i, i, 2.5).unwrap();
        }
        let opt = optimal_partition_probs(&t, &unit_cp(4), PartitionObjective::Smooth).unwrap();
        assert_eq!(opt.p, vec![0.25; 4]);
    }

    #[test]
    fn partition_dual_certificate() {
        let cp = CostParams::new(0.5, vec![1.0, 2.0, 0.5, 1.5], vec![0.1, 0.4, 0.2, 0.3]).unwrap();
        let mut t = SmoothnessTable::partition(vec![vec![0, 1], vec![2, 3]]).unwrap();
        for (i, k, v) in [(0, 0, 3.0), (1, 0, 5.0), (2, 1, 2.0), (3, 1, 1.0)] {
            t.set_l0(i, k, v).unwrap();
        }
        let opt = optimal_partition_probs(&t, &cp, PartitionObjective::Smooth).unwrap();
        // d_0 = 0.5 + 5 + 0.5, d_1 = 0.5 + 2 + 0.5
        assert!((opt.block_cost[0] - 6.0).abs() < 1e-12 && (opt.block_cost[1] - 3.0).abs() < 1e-12);
        for (k, blk) in t.blocks().iter().enumerate() {
            let lhs: f64 = blk.iter().map(|&i| opt.delta[i] * opt.certificate[i]).sum();
            assert!((lhs - opt.block_cost[k]).abs() < 1e-9);
            for &i in blk {
                assert!(opt.certificate[i] >= 0.0);
            }
        }
        assert!((opt.min_cost - 2.0 * (6.0 * 5.0 + 3.0 * 2.0)).abs() < 1e-9);
        // the partition scheme at p* attains min_cost as its smooth-regime cost ratio
        let scheme = SamplingScheme::Partitioned { blocks: t.blocks().to_vec(), p: opt.p.clone() };
        let br = total_cost(&scheme, &cp, &t, 1.0, 1.0, CostRegime::Smooth, false).unwrap();
        assert!((br.total - opt.min_cost).abs() < 1e-9);
    }

    #[test]
    fn total_cost_full_network_closed_form() {
        let cp = cp3();
        let l = 2.5;
        let t = SmoothnessTable::rpt_from_fn(3, |_, _| l).unwrap();
        let br = total_cost(&SamplingScheme::FullNetwork { b: 3 }, &cp, &t, 1.0, 1.0, CostRegime::Smooth, false)
            .unwrap();
        assert!((br.total - 2.0 * l * (1.0 + 6.0 + 0.6)).abs() < 1e-12);
        assert!((br.total - br.iterations * br.iteration_cost).abs() <= 1e-9 * br.total);
        assert!((br.overhead + br.forward_backward + br.update - br.iteration_cost).abs() < 1e-12);

        let half = total_cost(&SamplingScheme::FullNetwork { b: 3 }, &cp, &t, 1.0, 0.5, CostRegime::Smooth, false)
            .unwrap();
        assert_eq!(half.iterations, 2.0 * br.iterations);

        let rpt = SamplingScheme::rpt(vec![1.0, 0.0, 0.0]).unwrap();
        let same = total_cost(&rpt, &cp, &t, 1.0, 1.0, CostRegime::Smooth, false).unwrap();
        assert_eq!(same, br);

        let ceiled = total_cost(&rpt, &cp, &t, 1.0, 0.3, CostRegime::Smooth, true).unwrap();
        assert_eq!(ceiled.iterations, (5.0f64 / 0.3).ceil());
    }

    #[test]
    fn total_cost_never_updated_layer() {
        let t = SmoothnessTable::rpt_from_fn(2, |_, _| 1.0).unwrap();
        let rpt = SamplingScheme::rpt(vec![0.0, 1.0]).unwrap();
        let err = total_cost(&rpt, &unit_cp(2), &t, 1.0, 1.0, CostRegime::Smooth, true).unwrap_err();
        assert_eq!(err.to_string(), "layer 0 never updated");
    }

    #[test]
    fn total_cost_l0l1_regimes() {
        // full network: Q = 1, E[L1] = L1_i, so min ratio = 1 / max L1
        let mut t = SmoothnessTable::rpt_from_fn(2, |_, _| 1.0).unwrap();
        for (i, s, v) in [(0, 0, 2.0), (1, 0, 4.0), (1, 1, 3.0)] {
            t.set_l1(i, s, v).unwrap();
        }
        let full = SamplingScheme::FullNetwork { b: 2 };
        let cp = unit_cp(2);
        let eps = total_cost(&full, &cp, &t, 3.0, 0.5, CostRegime::L0L1Eps, false).unwrap();
        assert!((eps.iterations - 2.0 * 3.0 * 4.0 / 0.5).abs() < 1e-12);
        let eps2 = total_cost(&full, &cp, &t, 3.0, 0.5, CostRegime::L0L1Eps2, false).unwrap();
        let num = 1.0 / 4.0 + 1.0 / 16.0;
        assert!((eps2.iterations - 2.0 * 3.0 * num * 16.0 / 0.25).abs() < 1e-12);
        let no_l1 = SmoothnessTable::rpt_from_fn(2, |_, _| 1.0).unwrap();
        assert!(total_cost(&full, &cp, &no_l1, 1.0, 1.0, CostRegime::L0L1Eps, false).is_err());
    }

    #[test]
    fn unsupported_set_is_reported() {
        let t = SmoothnessTable::rpt_from_fn(3, |_, _| 1.0).unwrap();
        let err = total_cost(
            &SamplingScheme::TauNice { b: 3, tau: 2 },
            &unit_cp(3),
            &t,
            1.0,
            1.0,
            CostRegime::Smooth,
            false,
        )
        .unwrap_err();
        assert!(matches!(err, CostError::UnsupportedSet { .. }));
    }

    fn l1_table(b: usize, full: &[f64], rest: f64) -> SmoothnessTable {
        let mut t = SmoothnessTable::rpt_from_fn(b, |_, _| 1.0).unwrap();
        for i in 0..b {
            for s in 0..=i {
                t.set_l1(i, s, if s == 0 { full[i] } else { rest.min(full[i]) }).unwrap();
            }
        }
        t
    }

    #[test]
    fn l0l1_solver_examples() {
        let cp = unit_cp(2);
        let sol = optimal_rpt_probs_l0l1(&l1_table(2, &[3.0, 1.0], 0.5), &cp, L0L1Regime::Eps).unwrap();
        assert_eq!(sol.p, vec![1.0, 0.0]);
        assert!(sol.first_layer_is_max && !sol.beats_full_network);

        let sol = optimal_rpt_probs_l0l1(&l1_table(2, &[1.0, 3.0], 0.5), &cp, L0L1Regime::Eps).unwrap();
        assert!(sol.p[0] < 1.0);
        assert!(!sol.first_layer_is_max && sol.beats_full_network);
    }

    #[test]
    fn l0l1_solver_scale_invariance() {
        let cp = CostParams::new(0.3, vec![1.0, 0.5, 2.0], vec![0.2, 0.1, 0.3]).unwrap();
        let t = l1_table(3, &[1.0, 2.5, 1.7], 0.8);
        let mut scaled = t.clone();
        for i in 0..3 {
            for s in 0..=i {
                scaled.set_l1(i, s, 7.0 * t.l1_at(i, s).unwrap()).unwrap();
            }
        }
        let a = optimal_rpt_probs_l0l1(&t, &cp, L0L1Regime::Eps).unwrap();
        let b = optimal_rpt_probs_l0l1(&scaled, &cp, L0L1Regime::Eps).unwrap();
        for (x, y) in a.p.iter().zip(&b.p) {
            assert!((x - y).abs() < 1e-9, "{:?} vs {:?}", a.p, b.p);
        }
    }

    #[test]
    fn l0l1_solver_dimension_limit() {
        let t = l1_table(9, &[1.0; 9], 1.0);
        let err = optimal_rpt_probs_l0l1(&t, &unit_cp(9), L0L1Regime::Eps).unwrap_err();
        assert!(err.to_string().contains("partitioned"));
    }

    #[test]
    fn brute_force_tie_break_and_toy() {
        let (p, _) = brute_force_optimal_probs(|_| 1.0, 3, 10);
        assert_eq!(p, vec![0.0, 0.0, 1.0]);
        let target = [0.23, 0.41, 0.36];
        let (p, _) = brute_force_optimal_probs(
            |p| p.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum(),
            3,
            20,
        );
        assert_eq!(p, vec![0.25, 0.4, 0.35]);
    }

    #[test]
    fn tau_scan_examples() {
        let cp = CostParams::new(1.0, vec![1.0, 2.0, 0.5, 1.0, 3.0], vec![0.5; 5]).unwrap();
        let constant = tau_nice_cost_scan(&cp, |i, _| 1.0 + i as f64).unwrap();
        assert_eq!(constant.argmin, 5);
        assert!(constant.b_strictly_decreasing);
        let linear = tau_nice_cost_scan(&cp, |i, tau| (1.0 + i as f64) * tau as f64).unwrap();
        assert_eq!(linear.argmin, 1);
        // at τ = b the factor is the full-network iteration cost
        let last = constant.rows.last().unwrap();
        assert!((last.b - (1.0 + 7.5 + 2.5)).abs() < 1e-12);
    }

    #[test]
    fn tau_scan_b_decreasing_many_sizes() {
        let mut rng = SeedStreams::new(5).rng(StreamPurpose::Data, 0);
        for b in 1..=12 {
            for _ in 0..5 {
                let cp = CostParams::new(
                    rng.random_range(0.01..2.0),
                    (0..b).map(|_| rng.random_range(0.01..2.0)).collect(),
                    (0..b).map(|_| rng.random_range(0.0..2.0)).collect(),
                )
                .unwrap();
                assert!(tau_nice_cost_scan(&cp, |_, _| 1.0).unwrap().b_strictly_decreasing);
            }
        }
    }

    #[test]
    fn table_json_round_trip_and_validation() {
        let mut t = SmoothnessTable::rpt_from_fn(2, |i, s| 1.0 + i as f64 + s as f64).unwrap();
        t.set_l1(1, 0, 0.5).unwrap();
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<SmoothnessTable>(&json).unwrap(), t);
        let bad = r#"{"mode":"rpt_cutoff","b":2,"entries":[{"layer":0,"key":1,"l0":1.0}]}"#;
        assert!(serde_json::from_str::<SmoothnessTable>(bad).is_err());
        assert!(t.clone().set_l0(0, 0, -1.0).is_err());
        assert!(SmoothnessTable::partition(vec![vec![0], vec![0]]).is_err());
    }

    #[test]
    fn nested_violations_detected() {
        let ok = SmoothnessTable::rpt_from_fn(3, |i, s| 10.0 + i as f64 - s as f64).unwrap();
        assert!(ok.nested_violations().is_empty());
        let bad = SmoothnessTable::rpt_from_fn(3, |_, s| 1.0 + s as f64).unwrap();
        assert!(!bad.nested_violations().is_empty());
    }

    /// Random RPT table with nested monotonicity: constants shrink as the
    /// cutoff moves deeper.
    fn arb_rpt_table(b: usize) -> impl Strategy<Value = SmoothnessTable> {
        proptest::collection::vec(0.1f64..10.0, b * b).prop_map(move |raw| {
            SmoothnessTable::rpt_from_fn(b, |i, s| {
                let top = raw[i * b];
                (0..=s).skip(1).fold(top, |acc, j| acc * (0.3 + 0.7 * raw[i * b + j] / 10.0))
            })
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn recursion_constraints_tight(t in (1usize..=5).prop_flat_map(arb_rpt_table)) {
            let b = t.num_layers();
            let opt = optimal_rpt_probs_smooth(&t, &unit_cp(b)).unwrap();
            let l = t.rpt_l0_dense().unwrap();
            for i in 0..b {
                let used: f64 = (0..=i).map(|s| opt.q[s] / (2.0 * l[i][s])).sum();
                if opt.q[i] > 0.0 {
                    prop_assert!((used - 1.0).abs() <= 1e-9, "layer {i}: {used}");
                } else {
                    prop_assert!(used >= 1.0 - 1e-9);
                }
            }
            prop_assert!((opt.p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn full_network_condition_matches_recursion(t in (1usize..=4).prop_flat_map(arb_rpt_table)) {
            let b = t.num_layers();
            let p = optimal_rpt_probs_smooth(&t, &unit_cp(b)).unwrap().p;
            let is_e0 = p[0] == 1.0;
            prop_assert_eq!(full_network_optimal_smooth(&t).unwrap(), is_e0);
        }

        #[test]
        fn expected_cost_is_full_network_for_e0(cp in (1usize..6).prop_flat_map(|b| (
            0.0f64..3.0,
            proptest::collection::vec(0.01f64..3.0, b),
            proptest::collection::vec(0.0f64..3.0, b),
        )).prop_map(|(o, c, s)| CostParams::new(o, c, s).unwrap())) {
            let b = cp.num_layers();
            let mut p = vec![0.0; b];
            p[0] = 1.0;
            let rpt = expected_iteration_cost(&SamplingScheme::Rpt { p }, &cp).unwrap();
            prop_assert!((rpt - iteration_cost(&ActiveSet::range(0, b), &cp)).abs() <= 1e-12);
        }
    }
}

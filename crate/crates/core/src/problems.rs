//! Small objectives with controllable layer-wise smoothness.
//!
//! Quadratics come with exact smoothness tables and known optimal values.
//! `TinyMlp` is a dense network with manual backpropagation, truncated
//! backward passes and a cached forward prefix.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::{CostError, SmoothnessTable};
use crate::geometry::{dual_norm, norm, Matrix, NormKind};
use crate::sampling::{ActiveSet, SeedStreams, StreamPurpose};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProblemError {
    #[error("expected {expected} layers, got {got}")]
    LayerCount { expected: usize, got: usize },
    #[error("layer {layer} has shape {got:?}, expected {expected:?}")]
    Shape { layer: usize, expected: (usize, usize), got: (usize, usize) },
    #[error("gradient start layer {from} out of range for {b} layers")]
    GradStart { from: usize, b: usize },
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error(transparent)]
    Table(#[from] CostError),
}

/// Result of one oracle call.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    /// Gradients of layers `from..b`; earlier entries are zero matrices.
    pub grads: Vec<Matrix>,
    /// Multiply-accumulate operations performed, for problems that count them.
    pub macs: Option<u64>,
}

/// Differentiable objective over a list of matrix-valued layers.
pub trait Objective: Sync {
    fn shapes(&self) -> Vec<(usize, usize)>;

    fn num_layers(&self) -> usize {
        self.shapes().len()
    }

    /// Value at `x` and gradients of layers `from..b`.
    fn evaluate(&self, x: &[Matrix], from: usize) -> Result<Evaluation, ProblemError>;

    /// Like [`Objective::evaluate`], reusing forward work stored in `cache`
    /// when the problem supports it.
    fn evaluate_cached(&self, x: &[Matrix], from: usize, _cache: &mut ForwardCache) -> Result<Evaluation, ProblemError> {
        self.evaluate(x, from)
    }

    fn value_and_grad(&self, x: &[Matrix]) -> Result<(f64, Vec<Matrix>), ProblemError> {
        let e = self.evaluate(x, 0)?;
        Ok((e.value, e.grads))
    }

    fn value(&self, x: &[Matrix]) -> Result<f64, ProblemError> {
        Ok(self.evaluate(x, self.num_layers() - 1)?.value)
    }

    /// `inf f` when known.
    fn optimal_value(&self) -> Option<f64> {
        None
    }
}

fn check_point(shapes: &[(usize, usize)], x: &[Matrix], from: usize) -> Result<(), ProblemError> {
    if x.len() != shapes.len() {
        return Err(ProblemError::LayerCount { expected: shapes.len(), got: x.len() });
    }
    for (layer, (m, &expected)) in x.iter().zip(shapes).enumerate() {
        if m.shape() != expected {
            return Err(ProblemError::Shape { layer, expected, got: m.shape() });
        }
    }
    if from >= shapes.len() {
        return Err(ProblemError::GradStart { from, b: shapes.len() });
    }
    Ok(())
}

fn check_curvatures(a: &[f64], b: usize) -> Result<(), ProblemError> {
    if a.len() != b {
        return Err(ProblemError::Invalid(format!("{} curvatures for {b} layers", a.len())));
    }
    if let Some((i, v)) = a.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
        return Err(ProblemError::Invalid(format!("curvature {i} = {v} must be positive")));
    }
    Ok(())
}

/// Which sets a smoothness table is built for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TableLayout {
    /// Every suffix `{s, …, b-1}`.
    Rpt,
    Partition { blocks: Vec<Vec<usize>> },
}

fn build_table(
    b: usize,
    layout: &TableLayout,
    mut l0: impl FnMut(usize, &ActiveSet) -> Result<f64, ProblemError>,
) -> Result<SmoothnessTable, ProblemError> {
    match layout {
        TableLayout::Rpt => {
            let mut t = SmoothnessTable::rpt(b);
            for s in 0..b {
                let set = ActiveSet::range(s, b);
                for i in s..b {
                    t.set_l0(i, s, l0(i, &set)?)?;
                }
            }
            Ok(t)
        }
        TableLayout::Partition { blocks } => {
            let mut t = SmoothnessTable::partition(blocks.clone())?;
            if t.num_layers() != b {
                return Err(ProblemError::Invalid(format!("partition covers {} layers, expected {b}", t.num_layers())));
            }
            for (k, blk) in t.blocks().to_vec().iter().enumerate() {
                let set = ActiveSet::new(blk.clone()).map_err(|e| ProblemError::Invalid(e.to_string()))?;
                for &i in blk {
                    t.set_l0(i, k, l0(i, &set)?)?;
                }
            }
            Ok(t)
        }
    }
}

/// `max ‖Γ‖²_F / ‖Γ‖²` over nonzero `Γ` of the given shape.
fn frobenius_ratio(kind: NormKind, (m, n): (usize, usize)) -> f64 {
    match kind {
        NormKind::Euclidean => 1.0,
        NormKind::Spectral => m.min(n) as f64,
    }
}

fn check_norms(norms: &[NormKind], b: usize) -> Result<(), ProblemError> {
    if norms.len() != b {
        return Err(ProblemError::Invalid(format!("{} norm kinds for {b} layers", norms.len())));
    }
    Ok(())
}

/// `f(X) = Σ_i a_i/2 ‖X_i − A_i‖²_F`, minimized at `X = A` with value 0.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparableQuadratic {
    targets: Vec<Matrix>,
    curvatures: Vec<f64>,
}

impl SeparableQuadratic {
    pub fn new(targets: Vec<Matrix>, curvatures: Vec<f64>) -> Result<Self, ProblemError> {
        if targets.is_empty() {
            return Err(ProblemError::Invalid("at least one layer required".into()));
        }
        check_curvatures(&curvatures, targets.len())?;
        Ok(SeparableQuadratic { targets, curvatures })
    }

    /// Targets with i.i.d. `N(0, scale²)` entries.
    pub fn random<R: Rng + ?Sized>(
        shapes: &[(usize, usize)],
        curvatures: Vec<f64>,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self, ProblemError> {
        let targets = shapes.iter().map(|&(m, n)| Matrix::random_normal(m, n, rng).scaled(scale)).collect();
        Self::new(targets, curvatures)
    }

    pub fn targets(&self) -> &[Matrix] {
        &self.targets
    }

    pub fn curvatures(&self) -> &[f64] {
        &self.curvatures
    }

    /// Exact constants: `a_i` for Frobenius layers, `a_i·min(m_i, n_i)` for
    /// spectral ones, independent of the set.
    pub fn smoothness_table(&self, norms: &[NormKind], layout: &TableLayout) -> Result<SmoothnessTable, ProblemError> {
        check_norms(norms, self.targets.len())?;
        build_table(self.targets.len(), layout, |i, _| {
            Ok(self.curvatures[i] * frobenius_ratio(norms[i], self.targets[i].shape()))
        })
    }
}

impl Objective for SeparableQuadratic {
    fn shapes(&self) -> Vec<(usize, usize)> {
        self.targets.iter().map(Matrix::shape).collect()
    }

    fn evaluate(&self, x: &[Matrix], from: usize) -> Result<Evaluation, ProblemError> {
        check_point(&self.shapes(), x, from)?;
        let mut value = 0.0;
        let mut grads = Vec::with_capacity(x.len());
        for (i, (xi, ai)) in x.iter().zip(&self.targets).enumerate() {
            let d = xi.sub(ai);
            let a = self.curvatures[i];
            value += 0.5 * a * d.dot(&d);
            grads.push(if i >= from { d.scaled(a) } else { Matrix::zeros(d.rows(), d.cols()) });
        }
        Ok(Evaluation { value, grads, macs: None })
    }

    fn optimal_value(&self) -> Option<f64> {
        Some(0.0)
    }
}

/// `f(X) = Σ_i a_i/2 ‖X_i − A_i‖²_F + λ/2 Σ_i ‖X_{i+1} − R_i X_i‖²_F` with
/// all layers of one shape `m×n` and square coupling maps `R_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledQuadratic {
    targets: Vec<Matrix>,
    curvatures: Vec<f64>,
    lambda: f64,
    coupling: Vec<Matrix>,
    /// Operator norms of the Hessian blocks `H_ij`.
    block_norms: Vec<Vec<f64>>,
    optimum: Vec<Matrix>,
    f_star: f64,
}

impl CoupledQuadratic {
    pub fn new(
        targets: Vec<Matrix>,
        curvatures: Vec<f64>,
        lambda: f64,
        coupling: Vec<Matrix>,
    ) -> Result<Self, ProblemError> {
        let b = targets.len();
        if b == 0 {
            return Err(ProblemError::Invalid("at least one layer required".into()));
        }
        check_curvatures(&curvatures, b)?;
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(ProblemError::Invalid(format!("lambda = {lambda} must be non-negative")));
        }
        let shape = targets[0].shape();
        if let Some(layer) = targets.iter().position(|t| t.shape() != shape) {
            return Err(ProblemError::Shape { layer, expected: shape, got: targets[layer].shape() });
        }
        if coupling.len() != b - 1 {
            return Err(ProblemError::Invalid(format!("{} coupling maps for {b} layers", coupling.len())));
        }
        if let Some(r) = coupling.iter().find(|r| r.shape() != (shape.0, shape.0)) {
            return Err(ProblemError::Invalid(format!("coupling map has shape {:?}, expected {:?}", r.shape(), (shape.0, shape.0))));
        }
        let mut p = CoupledQuadratic {
            targets,
            curvatures,
            lambda,
            coupling,
            block_norms: Vec::new(),
            optimum: Vec::new(),
            f_star: 0.0,
        };
        p.solve()?;
        Ok(p)
    }

    /// Targets `N(0,1)`, coupling maps with `N(0, 1/m)` entries.
    pub fn random<R: Rng + ?Sized>(
        b: usize,
        shape: (usize, usize),
        curvatures: Vec<f64>,
        lambda: f64,
        rng: &mut R,
    ) -> Result<Self, ProblemError> {
        let (m, n) = shape;
        let targets = (0..b).map(|_| Matrix::random_normal(m, n, rng)).collect();
        let coupling = (1..b).map(|_| Matrix::random_normal(m, m, rng).scaled(1.0 / (m as f64).sqrt())).collect();
        Self::new(targets, curvatures, lambda, coupling)
    }

    fn shape(&self) -> (usize, usize) {
        self.targets[0].shape()
    }

    fn full_gradient(&self, x: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
        let b = x.len();
        let mut g: Vec<DMatrix<f64>> = (0..b).map(|i| (&x[i] - &self.targets[i].0) * self.curvatures[i]).collect();
        for i in 0..b - 1 {
            let r = &self.coupling[i].0;
            let resid = &x[i + 1] - r * &x[i];
            g[i + 1] += &resid * self.lambda;
            g[i] -= r.transpose() * &resid * self.lambda;
        }
        g
    }

    fn raw_value(&self, x: &[DMatrix<f64>]) -> f64 {
        let mut v: f64 = (0..x.len())
            .map(|i| 0.5 * self.curvatures[i] * (&x[i] - &self.targets[i].0).norm_squared())
            .sum();
        for i in 0..x.len() - 1 {
            v += 0.5 * self.lambda * (&x[i + 1] - &self.coupling[i].0 * &x[i]).norm_squared();
        }
        v
    }

    fn unflatten(&self, v: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let (m, n) = self.shape();
        let block = m * n;
        (0..self.targets.len())
            .map(|i| DMatrix::from_column_slice(m, n, &v.as_slice()[i * block..(i + 1) * block]))
            .collect()
    }

    /// Dense Hessian by differencing the affine gradient, then the exact optimum.
    fn solve(&mut self) -> Result<(), ProblemError> {
        let (m, n) = self.shape();
        let b = self.targets.len();
        let block = m * n;
        let dim = b * block;
        let zero = vec![DMatrix::zeros(m, n); b];
        let g0: Vec<f64> = self.full_gradient(&zero).iter().flat_map(|g| g.iter().copied()).collect();
        let g0 = DVector::from_vec(g0);
        let mut h = DMatrix::zeros(dim, dim);
        for j in 0..dim {
            let mut e = DVector::zeros(dim);
            e[j] = 1.0;
            let gj: Vec<f64> = self.full_gradient(&self.unflatten(&e)).iter().flat_map(|g| g.iter().copied()).collect();
            for (r, v) in gj.iter().enumerate() {
                h[(r, j)] = v - g0[r];
            }
        }
        // symmetrize away rounding noise
        let h = (&h + h.transpose()) * 0.5;
        self.block_norms = (0..b)
            .map(|i| {
                (0..b)
                    .map(|j| {
                        let blk = h.view((i * block, j * block), (block, block)).into_owned();
                        blk.singular_values().iter().copied().fold(0.0, f64::max)
                    })
                    .collect()
            })
            .collect();
        let chol = h
            .clone()
            .cholesky()
            .ok_or_else(|| ProblemError::Invalid("Hessian is not positive definite".into()))?;
        let x = chol.solve(&(-&g0));
        let opt = self.unflatten(&x);
        self.f_star = self.raw_value(&opt);
        self.optimum = opt.into_iter().map(Matrix).collect();
        Ok(())
    }

    pub fn optimum(&self) -> &[Matrix] {
        &self.optimum
    }

    pub fn targets(&self) -> &[Matrix] {
        &self.targets
    }

    /// `L⁰_{i,S} = κ_i Σ_{j∈S} ‖H_ij‖_op` with `κ_i = min(m,n)` for spectral
    /// layers and 1 for Frobenius ones. These bound the restricted quadratic
    /// form and shrink as `S` shrinks.
    pub fn smoothness_table(&self, norms: &[NormKind], layout: &TableLayout) -> Result<SmoothnessTable, ProblemError> {
        check_norms(norms, self.targets.len())?;
        let shape = self.shape();
        build_table(self.targets.len(), layout, |i, set| {
            Ok(frobenius_ratio(norms[i], shape) * set.iter().map(|j| self.block_norms[i][j]).sum::<f64>())
        })
    }
}

impl Objective for CoupledQuadratic {
    fn shapes(&self) -> Vec<(usize, usize)> {
        vec![self.shape(); self.targets.len()]
    }

    fn evaluate(&self, x: &[Matrix], from: usize) -> Result<Evaluation, ProblemError> {
        check_point(&self.shapes(), x, from)?;
        let raw: Vec<DMatrix<f64>> = x.iter().map(|m| m.0.clone()).collect();
        let (m, n) = self.shape();
        let grads = self
            .full_gradient(&raw)
            .into_iter()
            .enumerate()
            .map(|(i, g)| if i >= from { Matrix(g) } else { Matrix::zeros(m, n) })
            .collect();
        Ok(Evaluation { value: self.raw_value(&raw), grads, macs: None })
    }

    fn optimal_value(&self) -> Option<f64> {
        Some(self.f_star)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Activation::Tanh => z.map(f64::tanh),
            Activation::Relu => z.map(|v| v.max(0.0)),
        }
    }

    /// Derivative given the pre-activation `z` and output `h`.
    fn derivative(self, z: &DMatrix<f64>, h: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Activation::Tanh => h.map(|v| 1.0 - v * v),
            Activation::Relu => z.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
        }
    }
}

/// Stored forward pass of a [`TinyMlp`]: a copy of the weights it was
/// computed with, the input of every layer and every pre-activation.
#[derive(Clone, Debug, Default)]
pub struct ForwardCache {
    weights: Vec<Matrix>,
    /// `inputs[j]` is the input of weight `j`.
    inputs: Vec<DMatrix<f64>>,
    /// `pre[j] = W_j · inputs[j]`.
    pre: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Number of leading layers of `w` that match the cached weights exactly.
    pub fn matching_prefix(&self, w: &[Matrix]) -> usize {
        self.weights.iter().zip(w).take_while(|(a, b)| a == b).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CacheStatus {
    Recomputed,
    /// Activations of the first `layers` layers were reused.
    Reused { layers: usize },
    /// The cache did not match; a full recompute was done.
    Invalidated { reason: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardPass {
    pub loss: f64,
    pub macs: u64,
    pub status: CacheStatus,
}

/// Dense network without biases, `tanh` or ReLU hidden activations and
/// softmax cross-entropy loss over an in-memory dataset.
///
/// Layer `j` has weight `W_j` of shape `dims[j+1] × dims[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyMlp {
    dims: Vec<usize>,
    activation: Activation,
    /// One column per sample.
    data: DMatrix<f64>,
    labels: Vec<usize>,
}

impl TinyMlp {
    pub fn new(
        dims: Vec<usize>,
        activation: Activation,
        data: DMatrix<f64>,
        labels: Vec<usize>,
    ) -> Result<Self, ProblemError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(ProblemError::Invalid(format!("layer widths {dims:?} need at least two positive entries")));
        }
        if data.nrows() != dims[0] || data.ncols() == 0 || data.ncols() != labels.len() {
            return Err(ProblemError::Invalid(format!(
                "data is {}x{} with {} labels, expected {} rows and one label per column",
                data.nrows(),
                data.ncols(),
                labels.len(),
                dims[0]
            )));
        }
        let classes = *dims.last().expect("non-empty");
        if let Some(y) = labels.iter().find(|&&y| y >= classes) {
            return Err(ProblemError::Invalid(format!("label {y} out of range for {classes} classes")));
        }
        Ok(TinyMlp { dims, activation, data, labels })
    }

    /// Gaussian clusters: one mean per class drawn with standard deviation
    /// `separation`, samples at unit variance around their class mean.
    pub fn gaussian_clusters<R: Rng + ?Sized>(
        dims: Vec<usize>,
        activation: Activation,
        samples: usize,
        separation: f64,
        rng: &mut R,
    ) -> Result<Self, ProblemError> {
        let d = *dims.first().ok_or_else(|| ProblemError::Invalid("empty widths".into()))?;
        let classes = *dims.last().expect("non-empty");
        if d == 0 || classes == 0 {
            return Err(ProblemError::Invalid(format!("layer widths {dims:?} must be positive")));
        }
        let means = DMatrix::from_fn(d, classes, |_, _| separation * rng.sample::<f64, _>(StandardNormal));
        let labels: Vec<usize> = (0..samples).map(|k| k % classes).collect();
        let data = DMatrix::from_fn(d, samples, |r, c| means[(r, labels[c])] + rng.sample::<f64, _>(StandardNormal));
        Self::new(dims, activation, data, labels)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    /// Weights with `N(0, 1/fan_in)` entries.
    pub fn init_weights<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Matrix> {
        self.dims
            .windows(2)
            .map(|w| Matrix::random_normal(w[1], w[0], rng).scaled(1.0 / (w[0] as f64).sqrt()))
            .collect()
    }

    fn layer_macs(&self, j: usize) -> u64 {
        (self.dims[j + 1] * self.dims[j] * self.num_samples()) as u64
    }

    fn cross_entropy(&self, logits: &DMatrix<f64>) -> f64 {
        let n = self.num_samples();
        let total: f64 = (0..n)
            .map(|c| {
                let col = logits.column(c);
                let max = col.max();
                let lse = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - col[self.labels[c]]
            })
            .sum();
        total / n as f64
    }

    /// Recompute layers `start..b`, assuming `cache` holds valid activations
    /// for the layers before `start`.
    fn forward_from(&self, w: &[Matrix], start: usize, cache: &mut ForwardCache) -> (f64, u64) {
        let b = w.len();
        if cache.inputs.len() != b {
            cache.inputs = vec![DMatrix::zeros(0, 0); b];
            cache.pre = vec![DMatrix::zeros(0, 0); b];
            cache.inputs[0] = self.data.clone();
        }
        if cache.weights.len() != b {
            cache.weights = w.to_vec();
        }
        let mut macs = 0;
        for j in start..b {
            cache.pre[j] = &w[j].0 * &cache.inputs[j];
            macs += self.layer_macs(j);
            if j + 1 < b {
                cache.inputs[j + 1] = self.activation.apply(&cache.pre[j]);
            }
            cache.weights[j] = w[j].clone();
        }
        (self.cross_entropy(&cache.pre[b - 1]), macs)
    }

    pub fn forward(&self, w: &[Matrix]) -> Result<ForwardPass, ProblemError> {
        self.forward_with_cache(w, 0, &mut ForwardCache::default())
    }

    /// Forward pass reusing the cached activations of the first
    /// `frozen_prefix` layers. A cache that does not match those layers is
    /// discarded and everything is recomputed; the returned status says so.
    pub fn forward_with_cache(
        &self,
        w: &[Matrix],
        frozen_prefix: usize,
        cache: &mut ForwardCache,
    ) -> Result<ForwardPass, ProblemError> {
        check_point(&self.shapes(), w, 0)?;
        if frozen_prefix > w.len() {
            return Err(ProblemError::Invalid(format!("frozen prefix {frozen_prefix} exceeds {} layers", w.len())));
        }
        let (start, status) = if frozen_prefix == 0 {
            (0, CacheStatus::Recomputed)
        } else if cache.is_empty() {
            (0, CacheStatus::Invalidated { reason: "cache is empty".into() })
        } else {
            let matching = cache.matching_prefix(w);
            if matching >= frozen_prefix {
                (frozen_prefix, CacheStatus::Reused { layers: frozen_prefix })
            } else {
                (0, CacheStatus::Invalidated { reason: format!("layer {matching} changed since the cached pass") })
            }
        };
        let (loss, macs) = self.forward_from(w, start, cache);
        Ok(ForwardPass { loss, macs, status })
    }

    /// Gradients of layers `from..b` from a cache that matches `w`. Nothing
    /// is propagated below layer `from`.
    fn backward(&self, w: &[Matrix], from: usize, cache: &ForwardCache) -> (Vec<Matrix>, u64) {
        let b = w.len();
        let n = self.num_samples() as f64;
        let mut g = cache.pre[b - 1].clone();
        for c in 0..g.ncols() {
            let mut col = g.column_mut(c);
            let max = col.max();
            col.apply(|v| *v = (*v - max).exp());
            let sum = col.sum();
            col /= sum;
            col[self.labels[c]] -= 1.0;
        }
        g /= n;
        let mut grads: Vec<Matrix> = w.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
        let mut macs = 0;
        for j in (from..b).rev() {
            grads[j] = Matrix(&g * cache.inputs[j].transpose());
            macs += self.layer_macs(j);
            if j > from {
                let dh = w[j].0.transpose() * &g;
                macs += self.layer_macs(j);
                g = dh.component_mul(&self.activation.derivative(&cache.pre[j - 1], &cache.inputs[j]));
            }
        }
        (grads, macs)
    }

    /// Sampled-secant estimate of `L⁰_{i,S}`: the largest observed
    /// `‖∇_i f(W+Γ) − ∇_i f(W)‖_★ / (Σ_{j∈S} ‖Γ_j‖²)^{1/2}` over random `Γ`
    /// supported on `S` with norm `radius`, around base points near `w`.
    /// The table is flagged approximate.
    pub fn estimate_smoothness<R: Rng + ?Sized>(
        &self,
        w: &[Matrix],
        norms: &[NormKind],
        layout: &TableLayout,
        samples: usize,
        radius: f64,
        rng: &mut R,
    ) -> Result<SmoothnessTable, ProblemError> {
        check_point(&self.shapes(), w, 0)?;
        check_norms(norms, w.len())?;
        let mut table = build_table(w.len(), layout, |i, set| {
            let mut best: f64 = 0.0;
            for _ in 0..samples.max(1) {
                let base: Vec<Matrix> = w
                    .iter()
                    .map(|m| m.add(&Matrix::random_normal(m.rows(), m.cols(), rng).scaled(0.1 * radius)))
                    .collect();
                let mut gamma: Vec<Matrix> = base.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
                for j in set.iter() {
                    gamma[j] = Matrix::random_normal(base[j].rows(), base[j].cols(), rng);
                }
                let size = set.iter().map(|j| norm(norms[j], &gamma[j]).powi(2)).sum::<f64>().sqrt();
                let moved: Vec<Matrix> = base.iter().zip(&gamma).map(|(x, g)| x.add(&g.scaled(radius / size))).collect();
                let g0 = self.evaluate(&base, i)?.grads;
                let g1 = self.evaluate(&moved, i)?.grads;
                best = best.max(dual_norm(norms[i], &g1[i].sub(&g0[i])) / radius);
            }
            Ok(best)
        })?;
        table.approximate = true;
        Ok(table)
    }
}

impl Objective for TinyMlp {
    fn shapes(&self) -> Vec<(usize, usize)> {
        self.dims.windows(2).map(|w| (w[1], w[0])).collect()
    }

    fn evaluate(&self, x: &[Matrix], from: usize) -> Result<Evaluation, ProblemError> {
        self.evaluate_cached(x, from, &mut ForwardCache::default())
    }

    /// Reuses every leading layer whose weights are unchanged since the
    /// cached pass. Exact because the dataset is fixed (full batch).
    fn evaluate_cached(&self, x: &[Matrix], from: usize, cache: &mut ForwardCache) -> Result<Evaluation, ProblemError> {
        check_point(&self.shapes(), x, from)?;
        let start = cache.matching_prefix(x).min(x.len());
        let (value, fwd) = self.forward_from(x, start, cache);
        let (grads, bwd) = self.backward(x, from, cache);
        Ok(Evaluation { value, grads, macs: Some(fwd + bwd) })
    }
}

/// Additive Gaussian gradient noise: layer `i` gets i.i.d. entries with
/// standard deviation `σ_i/√(m_i n_i)`, so `E‖noise_i‖²_F = σ_i²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: Vec<f64>,
}

impl NoiseSpec {
    pub fn zero(b: usize) -> Self {
        NoiseSpec { sigma: vec![0.0; b] }
    }

    pub fn uniform(b: usize, sigma: f64) -> Self {
        NoiseSpec { sigma: vec![sigma; b] }
    }

    pub fn is_zero(&self) -> bool {
        self.sigma.iter().all(|&s| s == 0.0)
    }

    pub fn validate(&self, b: usize) -> Result<(), ProblemError> {
        if self.sigma.len() != b {
            return Err(ProblemError::Invalid(format!("noise has {} entries for {b} layers", self.sigma.len())));
        }
        if let Some(s) = self.sigma.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(ProblemError::Invalid(format!("noise level {s} must be non-negative")));
        }
        Ok(())
    }

    /// One noise draw for every layer, in layer order.
    pub fn sample<R: Rng + ?Sized>(&self, shapes: &[(usize, usize)], rng: &mut R) -> Vec<Matrix> {
        shapes
            .iter()
            .zip(&self.sigma)
            .map(|(&(m, n), &s)| {
                if s == 0.0 {
                    Matrix::zeros(m, n)
                } else {
                    Matrix::random_normal(m, n, rng).scaled(s / ((m * n) as f64).sqrt())
                }
            })
            .collect()
    }
}

/// Exact gradient plus one draw of `noise`.
pub fn stoch_grad<R: Rng + ?Sized>(
    problem: &dyn Objective,
    x: &[Matrix],
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<Vec<Matrix>, ProblemError> {
    noise.validate(problem.num_layers())?;
    let (_, grads) = problem.value_and_grad(x)?;
    let draws = noise.sample(&problem.shapes(), rng);
    Ok(grads.iter().zip(&draws).map(|(g, e)| g.add(e)).collect())
}

/// Serializable problem definition. Random data is drawn from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    SeparableQuadratic {
        shapes: Vec<(usize, usize)>,
        curvatures: Vec<f64>,
        #[serde(default = "one")]
        target_scale: f64,
    },
    CoupledQuadratic {
        layers: usize,
        rows: usize,
        cols: usize,
        curvatures: Vec<f64>,
        lambda: f64,
    },
    TinyMlp {
        dims: Vec<usize>,
        #[serde(default)]
        activation: Activation,
        samples: usize,
        #[serde(default = "default_separation")]
        separation: f64,
    },
}

fn one() -> f64 {
    1.0
}

fn default_separation() -> f64 {
    2.0
}

impl ProblemSpec {
    pub fn build(&self, seed: u64) -> Result<Problem, ProblemError> {
        let mut rng = SeedStreams::new(seed).rng(StreamPurpose::Data, 0);
        Ok(match self {
            ProblemSpec::SeparableQuadratic { shapes, curvatures, target_scale } => {
                if shapes.iter().any(|&(m, n)| m == 0 || n == 0) {
                    return Err(ProblemError::Invalid(format!("layer shapes {shapes:?} must be non-empty")));
                }
                Problem::SeparableQuadratic(SeparableQuadratic::random(shapes, curvatures.clone(), *target_scale, &mut rng)?)
            }
            ProblemSpec::CoupledQuadratic { layers, rows, cols, curvatures, lambda } => {
                if *layers == 0 || *rows == 0 || *cols == 0 {
                    return Err(ProblemError::Invalid("layers, rows and cols must be positive".into()));
                }
                Problem::CoupledQuadratic(CoupledQuadratic::random(
                    *layers,
                    (*rows, *cols),
                    curvatures.clone(),
                    *lambda,
                    &mut rng,
                )?)
            }
            ProblemSpec::TinyMlp { dims, activation, samples, separation } => {
                if *samples == 0 {
                    return Err(ProblemError::Invalid("samples must be positive".into()));
                }
                Problem::TinyMlp(TinyMlp::gaussian_clusters(dims.clone(), *activation, *samples, *separation, &mut rng)?)
            }
        })
    }
}

/// Any of the built-in problems.
#[derive(Clone, Debug, PartialEq)]
pub enum Problem {
    SeparableQuadratic(SeparableQuadratic),
    CoupledQuadratic(CoupledQuadratic),
    TinyMlp(TinyMlp),
}

impl Problem {
    fn inner(&self) -> &dyn Objective {
        match self {
            Problem::SeparableQuadratic(p) => p,
            Problem::CoupledQuadratic(p) => p,
            Problem::TinyMlp(p) => p,
        }
    }

    /// Starting point: the minimizer plus `N(0, scale²)` entries for the
    /// quadratics, scaled fan-in initialization for the network.
    pub fn initial_point(&self, seed: u64, scale: f64) -> Vec<Matrix> {
        let mut rng = SeedStreams::new(seed).rng(StreamPurpose::Initialization, 0);
        let perturb = |center: &[Matrix], rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Matrix> {
            center.iter().map(|c| c.add(&Matrix::random_normal(c.rows(), c.cols(), rng).scaled(scale))).collect()
        };
        match self {
            Problem::SeparableQuadratic(p) => perturb(p.targets(), &mut rng),
            Problem::CoupledQuadratic(p) => perturb(p.optimum(), &mut rng),
            Problem::TinyMlp(p) => p.init_weights(&mut rng).into_iter().map(|w| w.scaled(scale)).collect(),
        }
    }

    /// Exact tables for the quadratics; for the network a sampled estimate
    /// around `reference`, drawn from `seed`.
    pub fn smoothness_table(
        &self,
        norms: &[NormKind],
        layout: &TableLayout,
        reference: &[Matrix],
        seed: u64,
    ) -> Result<SmoothnessTable, ProblemError> {
        match self {
            Problem::SeparableQuadratic(p) => p.smoothness_table(norms, layout),
            Problem::CoupledQuadratic(p) => p.smoothness_table(norms, layout),
            Problem::TinyMlp(p) => {
                let mut rng = SeedStreams::new(seed).rng(StreamPurpose::Data, 1);
                p.estimate_smoothness(reference, norms, layout, 8, 0.1, &mut rng)
            }
        }
    }
}

impl Objective for Problem {
    fn shapes(&self) -> Vec<(usize, usize)> {
        self.inner().shapes()
    }

    fn evaluate(&self, x: &[Matrix], from: usize) -> Result<Evaluation, ProblemError> {
        self.inner().evaluate(x, from)
    }

    fn evaluate_cached(&self, x: &[Matrix], from: usize, cache: &mut ForwardCache) -> Result<Evaluation, ProblemError> {
        self.inner().evaluate_cached(x, from, cache)
    }

    fn optimal_value(&self) -> Option<f64> {
        self.inner().optimal_value()
    }
}

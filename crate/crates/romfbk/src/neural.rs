//! Dense networks and the first-order optimizers shared by the whole crate.
//!
//! [`Mlp`] is a plain fully connected network: leaky-ReLU hidden layers,
//! identity output, He-initialized from an explicit seed. Forward and
//! backward passes are batched over matrix rows.
//!
//! [`minimize`] drives either L-BFGS with a strong-Wolfe line search or
//! Adam over any differentiable objective. The L-BFGS inner products can be
//! rerouted through a caller-supplied dot function; the trajectory
//! optimizer uses that to keep its whole descent path equivariant under the
//! mirror symmetry of the transport problem (see [`crate::sym`]).

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default negative slope of the leaky-ReLU hidden activation.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Fully connected network with leaky-ReLU hidden layers and a linear
/// output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    /// weights[l] has shape (layer_dims[l], layer_dims[l+1]).
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    slope: f64,
}

/// Parameter-shaped gradient of an [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpGrad {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache {
    /// activations[0] is the input batch; activations[L] the output.
    activations: Vec<DMatrix<f64>>,
    /// Pre-activations of the hidden layers only.
    pre: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.activations.last().unwrap()
    }
}

impl Mlp {
    /// He-initialized network: weights ~ N(0, 2/fan_in), biases zero.
    /// `layer_dims` lists all layer widths including input and output.
    pub fn new(layer_dims: &[usize], slope: f64, seed: u64) -> Result<Mlp> {
        if layer_dims.len() < 2 {
            return Err(Error::invalid("a network needs at least input and output layers"));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("zero-width network layer"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for w in layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("std is finite and positive");
            weights.push(DMatrix::from_fn(fan_in, fan_out, |_, _| dist.sample(&mut rng)));
            biases.push(DVector::zeros(fan_out));
        }
        Ok(Mlp { layer_dims: layer_dims.to_vec(), weights, biases, slope })
    }

    /// Assembles a network from explicit weights and biases.
    pub fn from_parts(
        weights: Vec<DMatrix<f64>>,
        biases: Vec<DVector<f64>>,
        slope: f64,
    ) -> Result<Mlp> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::ShapeMismatch("weight/bias layer counts differ".into()));
        }
        let mut layer_dims = vec![weights[0].nrows()];
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.nrows() != layer_dims[l] {
                return Err(Error::ShapeMismatch(format!(
                    "layer {l} expects {} inputs, weight matrix has {} rows",
                    layer_dims[l],
                    w.nrows()
                )));
            }
            if w.ncols() != b.len() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {l} weight columns {} do not match bias length {}",
                    w.ncols(),
                    b.len()
                )));
            }
            layer_dims.push(w.ncols());
        }
        Ok(Mlp { layer_dims, weights, biases, slope })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn in_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    fn leaky(&self, z: f64) -> f64 {
        if z > 0.0 {
            z
        } else {
            self.slope * z
        }
    }

    /// Forward pass for a batch; samples are rows.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_cached(x).activations.pop().unwrap()
    }

    /// Forward pass for a single sample.
    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let row = DMatrix::from_fn(1, x.len(), |_, c| x[c]);
        let out = self.forward_batch(&row);
        DVector::from_fn(out.ncols(), |c, _| out[(0, c)])
    }

    /// Forward pass that keeps every intermediate needed by [`Self::backward`].
    pub fn forward_cached(&self, x: &DMatrix<f64>) -> ForwardCache {
        assert_eq!(x.ncols(), self.in_dim(), "input width mismatch");
        let n_layers = self.weights.len();
        let mut activations = Vec::with_capacity(n_layers + 1);
        let mut pre = Vec::with_capacity(n_layers.saturating_sub(1));
        activations.push(x.clone());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = &activations[l] * w;
            for mut row in z.row_iter_mut() {
                row += b.transpose();
            }
            if l + 1 < n_layers {
                let a = z.map(|v| self.leaky(v));
                pre.push(z);
                activations.push(a);
            } else {
                activations.push(z);
            }
        }
        ForwardCache { activations, pre }
    }

    /// Backward pass. `upstream` is dLoss/dOutput for the cached batch;
    /// returns parameter gradients and dLoss/dInput.
    pub fn backward(&self, cache: &ForwardCache, upstream: &DMatrix<f64>) -> (MlpGrad, DMatrix<f64>) {
        let n_layers = self.weights.len();
        let mut grad = MlpGrad::zeros_like(self);
        let mut dz = upstream.clone();
        for l in (0..n_layers).rev() {
            let a_prev = &cache.activations[l];
            grad.weights[l] = a_prev.transpose() * &dz;
            grad.biases[l] = DVector::from_fn(dz.ncols(), |c, _| dz.column(c).sum());
            let da_prev = &dz * self.weights[l].transpose();
            if l == 0 {
                return (grad, da_prev);
            }
            let z_prev = &cache.pre[l - 1];
            dz = DMatrix::from_fn(da_prev.nrows(), da_prev.ncols(), |r, c| {
                let s = if z_prev[(r, c)] > 0.0 { 1.0 } else { self.slope };
                da_prev[(r, c)] * s
            });
        }
        unreachable!("loop returns at l == 0");
    }

    pub fn n_params(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    /// Parameters flattened layer by layer, weights column-major then bias.
    pub fn flatten_params(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        DVector::from_vec(out)
    }

    /// Overwrites the parameters from a flat vector laid out as in
    /// [`Self::flatten_params`].
    pub fn assign_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let nw = w.len();
            w.as_mut_slice().copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = b.len();
            b.as_mut_slice().copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }
}

impl MlpGrad {
    pub fn zeros_like(net: &Mlp) -> MlpGrad {
        MlpGrad {
            weights: net.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: net.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    /// self += scale * other; shapes must match.
    pub fn accumulate(&mut self, other: &MlpGrad, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.zip_apply(b, |x, y| *x += scale * y);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.axpy(scale, b, 1.0);
        }
    }

    /// Same flat layout as [`Mlp::flatten_params`].
    pub fn flatten(&self) -> DVector<f64> {
        let total: usize = self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>();
        let mut out = Vec::with_capacity(total);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        DVector::from_vec(out)
    }
}

/// Which outer optimizer to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Lbfgs,
    Adam,
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Outer-optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimOptions {
    pub kind: OptimizerKind,
    pub max_iters: usize,
    /// Stop when the gradient max-norm drops below this.
    pub tol: f64,
    /// L-BFGS history length.
    pub memory: usize,
    pub adam: AdamParams,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            kind: OptimizerKind::Lbfgs,
            max_iters: 500,
            tol: 1e-6,
            memory: 10,
            adam: AdamParams::default(),
        }
    }
}

/// Outcome of a [`minimize`] run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimReport {
    pub final_value: f64,
    pub grad_inf_norm: f64,
    pub iterations: usize,
    pub evals: usize,
    /// Objective value at the start and after every accepted iterate.
    pub loss_history: Vec<f64>,
    /// Set when a line search gave up and the best trial point was taken.
    pub line_search_warning: bool,
}

const WOLFE_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;
const MAX_LINE_TRIALS: usize = 20;

/// Minimizes `f` from `x0` with the standard Euclidean inner product.
pub fn minimize<F>(f: F, x0: DVector<f64>, opts: &OptimOptions) -> Result<(DVector<f64>, OptimReport)>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    minimize_with_dot(f, x0, opts, &|a, b| {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    })
}

/// Minimizes `f` from `x0`, routing every optimizer inner product through
/// `dot`. Supplying an order-invariant dot makes the whole L-BFGS descent
/// path equivariant under any symmetry that `f` itself respects.
pub fn minimize_with_dot<F>(
    mut f: F,
    x0: DVector<f64>,
    opts: &OptimOptions,
    dot: &dyn Fn(&[f64], &[f64]) -> f64,
) -> Result<(DVector<f64>, OptimReport)>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    match opts.kind {
        OptimizerKind::Lbfgs => lbfgs(&mut f, x0, opts, dot),
        OptimizerKind::Adam => adam(&mut f, x0, opts),
    }
}

struct LinePoint {
    alpha: f64,
    value: f64,
    grad: DVector<f64>,
}

/// Strong-Wolfe line search (bracket then zoom by bisection). Returns the
/// accepted point, or on failure the best point seen, flagged.
#[allow(clippy::too_many_arguments)]
fn wolfe_search<F>(
    f: &mut F,
    x: &DVector<f64>,
    d: &DVector<f64>,
    f0: f64,
    dg0: f64,
    dot: &dyn Fn(&[f64], &[f64]) -> f64,
    evals: &mut usize,
) -> Result<(LinePoint, bool)>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let mut best: Option<LinePoint> = None;
    let mut probe = |alpha: f64,
                     best: &mut Option<LinePoint>,
                     evals: &mut usize|
     -> Result<(f64, f64, DVector<f64>)> {
        let xt = x + d * alpha;
        let (v, g) = f(&xt)?;
        *evals += 1;
        let slope = dot(g.as_slice(), d.as_slice());
        if v.is_finite() && best.as_ref().map_or(true, |b| v < b.value) {
            *best = Some(LinePoint { alpha, value: v, grad: g.clone() });
        }
        Ok((v, slope, g))
    };

    let mut trials = 0usize;
    let mut a_prev = 0.0f64;
    let mut f_prev = f0;
    let mut alpha = 1.0f64;
    let (mut lo, mut hi, mut f_lo);
    loop {
        if trials >= MAX_LINE_TRIALS {
            return finish_failed(best);
        }
        trials += 1;
        let (v, slope, grad) = probe(alpha, &mut best, evals)?;
        if !v.is_finite() || v > f0 + WOLFE_C1 * alpha * dg0 || (trials > 1 && v >= f_prev) {
            lo = a_prev;
            hi = alpha;
            f_lo = f_prev;
            break;
        }
        if slope.abs() <= -WOLFE_C2 * dg0 {
            return Ok((LinePoint { alpha, value: v, grad }, false));
        }
        if slope >= 0.0 {
            lo = alpha;
            hi = a_prev;
            f_lo = v;
            break;
        }
        a_prev = alpha;
        f_prev = v;
        alpha *= 2.0;
    }
    // zoom: keep the sufficient-decrease end in lo, bisect toward it
    while trials < MAX_LINE_TRIALS {
        trials += 1;
        let mid = 0.5 * (lo + hi);
        let (v, slope, grad) = probe(mid, &mut best, evals)?;
        if !v.is_finite() || v > f0 + WOLFE_C1 * mid * dg0 || v >= f_lo {
            hi = mid;
        } else {
            if slope.abs() <= -WOLFE_C2 * dg0 {
                return Ok((LinePoint { alpha: mid, value: v, grad }, false));
            }
            if slope * (hi - lo) >= 0.0 {
                hi = lo;
            }
            lo = mid;
            f_lo = v;
        }
        if (hi - lo).abs() * d.amax() < 1e-16 * (1.0 + x.amax()) {
            break;
        }
    }
    finish_failed(best)
}

fn finish_failed(best: Option<LinePoint>) -> Result<(LinePoint, bool)> {
    match best {
        Some(p) if p.alpha > 0.0 => Ok((p, true)),
        _ => Err(Error::SolverFailure(
            "line search found no finite trial point".into(),
        )),
    }
}

fn lbfgs<F>(
    f: &mut F,
    mut x: DVector<f64>,
    opts: &OptimOptions,
    dot: &dyn Fn(&[f64], &[f64]) -> f64,
) -> Result<(DVector<f64>, OptimReport)>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let mut evals = 0usize;
    let (mut fx, mut g) = f(&x)?;
    evals += 1;
    let mut history = vec![fx];
    let mut pairs: Vec<(DVector<f64>, DVector<f64>, f64)> = Vec::new();
    let mut warning = false;
    let mut consecutive_failures = 0usize;
    let mut iterations = 0usize;

    for _ in 0..opts.max_iters {
        if g.amax() <= opts.tol {
            break;
        }
        iterations += 1;

        // two-loop recursion for d = -H g
        let mut d = -&g;
        if !pairs.is_empty() {
            let mut alphas = Vec::with_capacity(pairs.len());
            for (s, y, rho) in pairs.iter().rev() {
                let a = rho * dot(s.as_slice(), d.as_slice());
                d.axpy(-a, y, 1.0);
                alphas.push(a);
            }
            let (s_last, y_last, _) = pairs.last().unwrap();
            let gamma = dot(s_last.as_slice(), y_last.as_slice())
                / dot(y_last.as_slice(), y_last.as_slice());
            d *= gamma;
            for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
                let b = rho * dot(y.as_slice(), d.as_slice());
                d.axpy(a - b, s, 1.0);
            }
        }

        let mut dg = dot(g.as_slice(), d.as_slice());
        if !(dg < 0.0) {
            // not a descent direction: drop the curvature history
            pairs.clear();
            d = -&g;
            dg = -dot(g.as_slice(), g.as_slice());
        }

        let search = wolfe_search(f, &x, &d, fx, dg, dot, &mut evals);
        let (point, gave_up) = match search {
            Ok(r) => r,
            Err(_) if !pairs.is_empty() => {
                // retry once along steepest descent before giving up
                pairs.clear();
                let d2 = -&g;
                let dg2 = -dot(g.as_slice(), g.as_slice());
                match wolfe_search(f, &x, &d2, fx, dg2, dot, &mut evals) {
                    Ok(r) => {
                        d = d2;
                        r
                    }
                    Err(e) => return Err(e),
                }
            }
            Err(e) => return Err(e),
        };
        if gave_up {
            warning = true;
            consecutive_failures += 1;
            log::warn!(
                "line search exhausted its budget at iteration {iterations}; \
                 keeping the best trial point (value {:.6e})",
                point.value
            );
        } else {
            consecutive_failures = 0;
        }
        if point.value >= fx {
            // no progress at all; stop rather than cycle
            warning = true;
            break;
        }

        let s = &d * point.alpha;
        let y = &point.grad - &g;
        x += &s;
        fx = point.value;
        g = point.grad;
        history.push(fx);

        let sy = dot(s.as_slice(), y.as_slice());
        let s_norm = dot(s.as_slice(), s.as_slice()).sqrt();
        let y_norm = dot(y.as_slice(), y.as_slice()).sqrt();
        if sy > 1e-10 * s_norm * y_norm {
            pairs.push((s, y, 1.0 / sy));
            if pairs.len() > opts.memory {
                pairs.remove(0);
            }
        }
        if consecutive_failures >= 3 {
            break;
        }
    }

    let grad_inf_norm = g.amax();
    Ok((
        x,
        OptimReport {
            final_value: fx,
            grad_inf_norm,
            iterations,
            evals,
            loss_history: history,
            line_search_warning: warning,
        },
    ))
}

fn adam<F>(f: &mut F, mut x: DVector<f64>, opts: &OptimOptions) -> Result<(DVector<f64>, OptimReport)>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let p = opts.adam;
    let n = x.len();
    let mut m = DVector::<f64>::zeros(n);
    let mut v = DVector::<f64>::zeros(n);
    let mut history = Vec::with_capacity(opts.max_iters + 1);
    let mut evals = 0usize;
    let mut iterations = 0usize;
    let (mut fx, mut g) = f(&x)?;
    evals += 1;
    history.push(fx);
    for t in 1..=opts.max_iters {
        if g.amax() <= opts.tol {
            break;
        }
        iterations += 1;
        let b1t = 1.0 - p.beta1.powi(t as i32);
        let b2t = 1.0 - p.beta2.powi(t as i32);
        for k in 0..n {
            m[k] = p.beta1 * m[k] + (1.0 - p.beta1) * g[k];
            v[k] = p.beta2 * v[k] + (1.0 - p.beta2) * g[k] * g[k];
            x[k] -= p.lr * (m[k] / b1t) / ((v[k] / b2t).sqrt() + p.eps);
        }
        let (nfx, ng) = f(&x)?;
        evals += 1;
        fx = nfx;
        g = ng;
        history.push(fx);
    }
    let grad_inf_norm = g.amax();
    Ok((
        x,
        OptimReport {
            final_value: fx,
            grad_inf_norm,
            iterations,
            evals,
            loss_history: history,
            line_search_warning: false,
        },
    ))
}

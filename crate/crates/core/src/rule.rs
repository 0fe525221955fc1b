//! The Traces Propagation learning rule.
//!
//! Every layer keeps an input trace and a target trace. At each step the
//! batch-pairwise similarity between them forms the logits of a local
//! cross-entropy whose targets come from the previous layer's target traces.
//! The gradient of that loss factors into three local terms: the modulatory
//! matrix `softmax(z) - y`, the surrogate derivative of the postsynaptic
//! potential, and presynaptic activity. Traces are differentiated only through
//! the current step.

use ndarray::{Array2, ArrayView2, Zip};

use crate::error::{Result, TpError};
use crate::lif::{arctan_surrogate, LifParams};
use crate::scalar::Scalar;

/// Input and target traces of one layer, `[batch, neurons]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceState<T> {
    pub eps: Array2<T>,
    pub eps_tilde: Array2<T>,
    pub beta: T,
}

impl<T: Scalar> TraceState<T> {
    pub fn zeros(batch: usize, neurons: usize, beta: T) -> Self {
        TraceState {
            eps: Array2::zeros((batch, neurons)),
            eps_tilde: Array2::zeros((batch, neurons)),
            beta,
        }
    }

    pub fn reset(&mut self) {
        self.eps.fill(T::zero());
        self.eps_tilde.fill(T::zero());
    }

    /// In-place form of [`update_traces`]. Either path may be skipped.
    pub fn update(&mut self, spikes_in: Option<ArrayView2<'_, T>>, spikes_trg: Option<ArrayView2<'_, T>>) -> Result<()> {
        let beta = self.beta;
        if let Some(s) = spikes_in {
            check_same("input spikes", self.eps.view(), s)?;
            Zip::from(&mut self.eps).and(s).for_each(|e, &x| *e = beta * *e + x);
        }
        if let Some(s) = spikes_trg {
            check_same("target spikes", self.eps_tilde.view(), s)?;
            Zip::from(&mut self.eps_tilde).and(s).for_each(|e, &x| *e = beta * *e + x);
        }
        Ok(())
    }
}

/// `eps' = beta*eps + s_in`, `eps_tilde' = beta*eps_tilde + s_trg`.
pub fn update_traces<T: Scalar>(
    trace: &TraceState<T>,
    spikes_in: ArrayView2<'_, T>,
    spikes_trg: ArrayView2<'_, T>,
) -> Result<TraceState<T>> {
    let mut next = trace.clone();
    next.update(Some(spikes_in), Some(spikes_trg))?;
    Ok(next)
}

fn check_same<T>(context: &'static str, a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(TpError::dim(context, format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    Ok(())
}

fn check_batch(batch: usize) -> Result<()> {
    if batch < 2 {
        return Err(TpError::ContrastiveBatch { batch });
    }
    Ok(())
}

/// Similarity used to build the pairwise targets from previous-layer target traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Similarity {
    /// `f(a, b) = a . b`
    #[default]
    Dot,
    /// `f(a, b) = -||a - b||_2`
    NegEuclidean,
    /// `f(a, b) = -(a . b)`, the literal sign of the algorithm listing applied to a dot product.
    NegDot,
}

impl std::str::FromStr for Similarity {
    type Err = TpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(Similarity::Dot),
            "neg_euclidean" | "neg-euclidean" => Ok(Similarity::NegEuclidean),
            "neg_dot" | "neg-dot" => Ok(Similarity::NegDot),
            other => Err(TpError::Config(format!("unknown similarity '{other}'"))),
        }
    }
}

impl std::fmt::Display for Similarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Similarity::Dot => "dot",
            Similarity::NegEuclidean => "neg_euclidean",
            Similarity::NegDot => "neg_dot",
        })
    }
}

#[inline]
fn dot_rows<T: Scalar>(a: ArrayView2<'_, T>, ra: usize, b: ArrayView2<'_, T>, rb: usize) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.row(ra).iter().zip(b.row(rb).iter()) {
        acc += x * y;
    }
    acc
}

/// `z[b, b'] = sum_j eps[b, j] * eps_tilde[b', j]`.
pub fn pairwise_logits<T: Scalar>(eps: ArrayView2<'_, T>, eps_tilde: ArrayView2<'_, T>) -> Result<Array2<T>> {
    check_same("pairwise logits", eps, eps_tilde)?;
    let batch = eps.nrows();
    check_batch(batch)?;
    Ok(Array2::from_shape_fn((batch, batch), |(b, bp)| dot_rows(eps, b, eps_tilde, bp)))
}

/// Row-wise softmax over `b'` of `f(eps_tilde_prev[b], eps_tilde_prev[b'])`.
pub fn pairwise_targets<T: Scalar>(eps_tilde_prev: ArrayView2<'_, T>, similarity: Similarity) -> Result<Array2<T>> {
    let batch = eps_tilde_prev.nrows();
    check_batch(batch)?;
    let f = Array2::from_shape_fn((batch, batch), |(b, bp)| match similarity {
        Similarity::Dot => dot_rows(eps_tilde_prev, b, eps_tilde_prev, bp),
        Similarity::NegDot => -dot_rows(eps_tilde_prev, b, eps_tilde_prev, bp),
        Similarity::NegEuclidean => {
            let mut acc = T::zero();
            for (&x, &y) in eps_tilde_prev.row(b).iter().zip(eps_tilde_prev.row(bp).iter()) {
                acc += (x - y) * (x - y);
            }
            -acc.sqrt()
        }
    });
    Ok(row_softmax(f.view()))
}

/// Numerically stable softmax along each row.
pub fn row_softmax<T: Scalar>(z: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = z.to_owned();
    for mut row in out.rows_mut() {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

fn row_tolerance<T: Scalar>() -> T {
    T::of(1e-6).max(T::epsilon() * T::of(1e3))
}

/// Batch-mean cross-entropy `-(1/B) sum_{b,b'} y log softmax(z)`.
pub fn local_loss<T: Scalar>(z: ArrayView2<'_, T>, y: ArrayView2<'_, T>) -> Result<T> {
    check_same("local loss", z, y)?;
    let (rows, cols) = z.dim();
    if rows != cols {
        return Err(TpError::dim("local loss", "square matrix", format!("{rows}x{cols}")));
    }
    if z.iter().chain(y.iter()).any(|x| !x.is_finite()) {
        return Err(TpError::Numeric("local loss input".into()));
    }
    let tol = row_tolerance::<T>();
    let mut total = T::zero();
    for (zr, yr) in z.rows().into_iter().zip(y.rows()) {
        let ysum: T = yr.iter().copied().sum();
        if (ysum - T::one()).abs() > tol {
            return Err(TpError::Input(format!("target row sums to {ysum}, expected 1")));
        }
        let m = zr.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = m + zr.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
        for (&zv, &yv) in zr.iter().zip(yr.iter()) {
            if yv != T::zero() {
                total -= yv * (zv - lse);
            }
        }
    }
    Ok(total / T::of_usize(rows))
}

/// `softmax(z) - y`, row-wise.
pub fn modulatory_signal<T: Scalar>(z: ArrayView2<'_, T>, y: ArrayView2<'_, T>) -> Result<Array2<T>> {
    check_same("modulatory signal", z, y)?;
    let mut p = row_softmax(z);
    p -= &y;
    Ok(p)
}

/// Logits, targets and modulatory matrix of one layer at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLossSignal<T> {
    pub z: Array2<T>,
    pub y: Array2<T>,
    pub modulation: Array2<T>,
}

impl<T: Scalar> BatchLossSignal<T> {
    pub fn compute(
        eps: ArrayView2<'_, T>,
        eps_tilde: ArrayView2<'_, T>,
        eps_tilde_prev: ArrayView2<'_, T>,
        similarity: Similarity,
    ) -> Result<Self> {
        if eps_tilde_prev.nrows() != eps.nrows() {
            return Err(TpError::dim("previous target traces", eps.nrows(), eps_tilde_prev.nrows()));
        }
        let z = pairwise_logits(eps, eps_tilde)?;
        let y = pairwise_targets(eps_tilde_prev, similarity)?;
        let modulation = modulatory_signal(z.view(), y.view())?;
        Ok(BatchLossSignal { z, y, modulation })
    }

    pub fn loss(&self) -> Result<T> {
        local_loss(self.z.view(), self.y.view())
    }
}

/// Postsynaptic factors of both paths, `[batch, neurons]`, already scaled by `1/B`.
///
/// `input[b, j]  = (1/B) (sum_b' mod[b, b'] eps_tilde[b', j]) theta'(v[b, j] - v_th)`
/// `target[b', j] = (1/B) (sum_b mod[b, b'] eps[b, j]) theta'(v_tilde[b', j] - v_th)`
///
/// The weight gradient of any layer kind is the presynaptic activity of the
/// matching path contracted against these factors.
#[derive(Debug, Clone, PartialEq)]
pub struct PostFactors<T> {
    pub input: Array2<T>,
    pub target: Array2<T>,
}

pub fn postsynaptic_factors<T: Scalar>(
    modulation: ArrayView2<'_, T>,
    traces: &TraceState<T>,
    v: ArrayView2<'_, T>,
    v_tilde: ArrayView2<'_, T>,
    params: &LifParams<T>,
) -> Result<PostFactors<T>> {
    let (batch, neurons) = traces.eps.dim();
    check_batch(batch)?;
    check_same("input potentials", traces.eps.view(), v)?;
    check_same("target potentials", traces.eps_tilde.view(), v_tilde)?;
    if modulation.dim() != (batch, batch) {
        return Err(TpError::dim("modulatory matrix", format!("({batch}, {batch})"), format!("{:?}", modulation.dim())));
    }
    let inv_b = T::one() / T::of_usize(batch);
    let (v_th, scale) = (params.v_th, params.surrogate_scale);
    let mut input = Array2::zeros((batch, neurons));
    let mut target = Array2::zeros((batch, neurons));
    for b in 0..batch {
        for j in 0..neurons {
            let mut acc_in = T::zero();
            let mut acc_trg = T::zero();
            for k in 0..batch {
                acc_in += modulation[[b, k]] * traces.eps_tilde[[k, j]];
                acc_trg += modulation[[k, b]] * traces.eps[[k, j]];
            }
            input[[b, j]] = acc_in * arctan_surrogate(v[[b, j]] - v_th, scale) * inv_b;
            target[[b, j]] = acc_trg * arctan_surrogate(v_tilde[[b, j]] - v_th, scale) * inv_b;
        }
    }
    Ok(PostFactors { input, target })
}

/// `out[i, j] += sum_b pre[b, i] * post[b, j]`, summing `b` in ascending order.
pub fn accumulate_outer<T: Scalar>(out: &mut Array2<T>, pre: ArrayView2<'_, T>, post: ArrayView2<'_, T>) -> Result<()> {
    if pre.nrows() != post.nrows() || out.dim() != (pre.ncols(), post.ncols()) {
        return Err(TpError::dim(
            "presynaptic contraction",
            format!("{:?}", out.dim()),
            format!("pre {:?} post {:?}", pre.dim(), post.dim()),
        ));
    }
    for b in 0..pre.nrows() {
        let post_row = post.row(b);
        for (i, &p) in pre.row(b).iter().enumerate() {
            if p == T::zero() {
                continue;
            }
            let mut out_row = out.row_mut(i);
            Zip::from(&mut out_row).and(&post_row).for_each(|o, &g| *o += p * g);
        }
    }
    Ok(())
}

/// Gradient split by path; the update uses `input + target`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient<T> {
    pub input: Array2<T>,
    pub target: Array2<T>,
}

impl<T: Scalar> LayerGradient<T> {
    pub fn total(&self) -> Array2<T> {
        &self.input + &self.target
    }
}

/// Three-factor gradient of the local loss for a dense weight matrix `[pre, post]`.
///
/// `s_prev_trg = None` drops the target-path term, which is what happens for
/// the first layer when its target path is driven by a fixed propagator.
pub fn layer_gradient<T: Scalar>(
    modulation: ArrayView2<'_, T>,
    traces: &TraceState<T>,
    v: ArrayView2<'_, T>,
    v_tilde: ArrayView2<'_, T>,
    s_prev_in: ArrayView2<'_, T>,
    s_prev_trg: Option<ArrayView2<'_, T>>,
    params: &LifParams<T>,
) -> Result<LayerGradient<T>> {
    let factors = postsynaptic_factors(modulation, traces, v, v_tilde, params)?;
    let post = traces.eps.ncols();
    let mut input = Array2::zeros((s_prev_in.ncols(), post));
    accumulate_outer(&mut input, s_prev_in, factors.input.view())?;
    let mut target = Array2::zeros((s_prev_in.ncols(), post));
    if let Some(s_trg) = s_prev_trg {
        if s_trg.dim() != s_prev_in.dim() {
            return Err(TpError::dim("target presynaptic spikes", format!("{:?}", s_prev_in.dim()), format!("{:?}", s_trg.dim())));
        }
        accumulate_outer(&mut target, s_trg, factors.target.view())?;
    }
    Ok(LayerGradient { input, target })
}

/// `W <- W - eta * dW`.
pub fn apply_update<T: Scalar>(weights: &mut Array2<T>, grad: ArrayView2<'_, T>, eta: T) -> Result<()> {
    if !(eta > T::zero()) {
        return Err(TpError::Config(format!("learning rate must be positive, got {eta}")));
    }
    check_same("weight update", weights.view(), grad)?;
    Zip::from(weights).and(grad).for_each(|w, &g| *w -= eta * g);
    Ok(())
}

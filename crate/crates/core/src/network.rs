//! Layer stack with an input path and a target path sharing the same weights.
//!
//! The input path carries the data spikes through `W_l`. The target path
//! carries the one-hot label: into the first layer through the fixed
//! propagator `S`, then through the very same `W_l` as the input path. Both
//! paths keep their own membranes and traces; the pair feeds the local loss
//! of each layer.

use ndarray::{Array1, Array2, ArrayView2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Result, TpError};
use crate::layer::{weight_norm_backward, weight_normalize, ConvGeometry, Recurrence, Topology};
use crate::lif::{LifParams, MembraneState};
use crate::readout::{readout_step, ReadoutState};
use crate::rule::{accumulate_outer, apply_update, postsynaptic_factors, BatchLossSignal, Similarity, TraceState};
use crate::scalar::Scalar;

/// Shape of the data fed to the first layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputShape {
    Flat(usize),
    Image { channels: usize, height: usize, width: usize },
}

impl InputShape {
    pub fn features(&self) -> usize {
        match *self {
            InputShape::Flat(n) => n,
            InputShape::Image { channels, height, width } => channels * height * width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense { units: usize },
    Recurrent { units: usize, recurrence: Recurrence },
    Conv { channels: usize, kernel: usize, pool: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec<T> {
    pub kind: LayerKind,
    pub lif: LifParams<T>,
    pub beta: T,
    pub weight_norm: bool,
}

impl<T: Scalar> LayerSpec<T> {
    pub fn dense(units: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Dense { units },
            lif: LifParams::default(),
            beta: T::of(0.9),
            weight_norm: false,
        }
    }

    pub fn with_dynamics(mut self, alpha: T, beta: T, v_th: T) -> Self {
        self.lif.alpha = alpha;
        self.lif.v_th = v_th;
        self.beta = beta;
        self
    }
}

/// Architecture description consumed by [`init_network`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec<T> {
    pub input: InputShape,
    pub layers: Vec<LayerSpec<T>>,
    pub classes: usize,
}

/// Whether the target path pools at its own maxima or reuses the input path's picks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolPolicy {
    #[default]
    Independent,
    SharedIndices,
}

/// Rule settings stored with the network.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleConfig<T> {
    pub eta: T,
    pub similarity: Similarity,
    /// Apply the first layer's target-path term to `S` instead of dropping it.
    pub learn_target_propagator: bool,
    pub learn_recurrent: bool,
    pub pool_policy: PoolPolicy,
    /// Decay of the label trace that supplies the first layer's pairwise targets.
    pub label_beta: T,
}

impl<T: Scalar> Default for RuleConfig<T> {
    fn default() -> Self {
        RuleConfig {
            eta: T::of(1e-4),
            similarity: Similarity::Dot,
            learn_target_propagator: false,
            learn_recurrent: true,
            pool_policy: PoolPolicy::Independent,
            label_beta: T::of(0.9),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub topology: Topology,
    /// Raw weights `[fan_in, columns]`.
    pub weights: Array2<T>,
    /// Per-column gain when weight normalization is enabled.
    pub gain: Option<Array1<T>>,
    pub recurrent: Option<Array2<T>>,
    pub recurrence: Recurrence,
    pub lif: LifParams<T>,
    pub beta: T,
    effective: Option<Array2<T>>,
}

impl<T: Scalar> Layer<T> {
    pub fn new(
        topology: Topology,
        weights: Array2<T>,
        gain: Option<Array1<T>>,
        recurrent: Option<Array2<T>>,
        recurrence: Recurrence,
        lif: LifParams<T>,
        beta: T,
    ) -> Result<Self> {
        lif.validate()?;
        if !(beta >= T::zero() && beta <= T::one()) {
            return Err(TpError::Config(format!("trace decay must lie in [0,1], got {beta}")));
        }
        if weights.dim() != (topology.fan_in(), topology.weight_cols()) {
            return Err(TpError::dim(
                "layer weights",
                format!("({}, {})", topology.fan_in(), topology.weight_cols()),
                format!("{:?}", weights.dim()),
            ));
        }
        if let Some(r) = &recurrent {
            let u = topology.units();
            if r.dim() != (u, u) || matches!(topology, Topology::Conv(_)) {
                return Err(TpError::Config("recurrent matrix must be square and dense-only".into()));
            }
        }
        let mut layer = Layer {
            topology,
            weights,
            gain,
            recurrent,
            recurrence,
            lif,
            beta,
            effective: None,
        };
        layer.refresh()?;
        Ok(layer)
    }

    pub fn units(&self) -> usize {
        self.topology.units()
    }

    /// Weights actually multiplied into the currents.
    pub fn effective_weights(&self) -> &Array2<T> {
        self.effective.as_ref().unwrap_or(&self.weights)
    }

    pub(crate) fn refresh(&mut self) -> Result<()> {
        self.effective = match &self.gain {
            Some(g) => Some(weight_normalize(self.weights.view(), g)?),
            None => None,
        };
        Ok(())
    }

    fn recurrent_current(&self, prev: ArrayView2<'_, T>) -> Option<Array2<T>> {
        let r = self.recurrent.as_ref()?;
        Some(match self.recurrence {
            Recurrence::Full => prev.dot(r),
            Recurrence::Diagonal => {
                let d = r.diag();
                let mut out = prev.to_owned();
                for mut row in out.rows_mut() {
                    Zip::from(&mut row).and(&d).for_each(|x, &w| *x = *x * w);
                }
                out
            }
        })
    }
}

/// Mutable per-layer record of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState<T> {
    pub input: MembraneState<T>,
    pub target: MembraneState<T>,
    pub traces: TraceState<T>,
    /// Pooled outputs of each path; `None` when the layer does not pool.
    pub pooled_in: Option<Array2<T>>,
    pub pooled_trg: Option<Array2<T>>,
    /// Own spikes of the previous step, kept for recurrent layers only.
    pub prev_in: Option<Array2<T>>,
    pub prev_trg: Option<Array2<T>>,
}

impl<T: Scalar> LayerState<T> {
    /// Activity handed to the next layer along the input path.
    pub fn output_in(&self) -> ArrayView2<'_, T> {
        self.pooled_in.as_ref().unwrap_or(&self.input.s_prev).view()
    }

    pub fn output_trg(&self) -> ArrayView2<'_, T> {
        self.pooled_trg.as_ref().unwrap_or(&self.target.s_prev).view()
    }
}

/// Everything that evolves during one sequence of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState<T> {
    pub batch: usize,
    pub layers: Vec<LayerState<T>>,
    /// Presynaptic input spikes of the current step.
    pub input_spikes: Array2<T>,
    /// One-hot targets of the current batch.
    pub targets: Array2<T>,
    /// Trace of the one-hot targets; supplies the first layer's pairwise targets.
    pub label_trace: Array2<T>,
    pub readout: ReadoutState<T>,
    /// Time-summed activity entering the readout.
    pub readout_counts: Array2<T>,
    pub steps: usize,
}

impl<T: Scalar> NetworkState<T> {
    pub fn reset(&mut self) {
        for l in &mut self.layers {
            l.input.reset();
            l.target.reset();
            l.traces.reset();
            for a in [&mut l.pooled_in, &mut l.pooled_trg, &mut l.prev_in, &mut l.prev_trg].into_iter().flatten() {
                a.fill(T::zero());
            }
        }
        self.input_spikes.fill(T::zero());
        self.targets.fill(T::zero());
        self.label_trace.fill(T::zero());
        self.readout.reset();
        self.readout_counts.fill(T::zero());
        self.steps = 0;
    }

    /// State scalars in the categories of the TP memory formula: input and
    /// target potentials and traces of every layer.
    pub fn formula_state_scalars(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.input.v.len() + l.target.v.len() + l.traces.eps.len() + l.traces.eps_tilde.len())
            .sum()
    }
}

/// Gradient of one layer's local loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    /// Input-path term with respect to the effective weights.
    pub input: Array2<T>,
    /// Target-path term with respect to the effective weights (zero for the first layer).
    pub target: Array2<T>,
    pub recurrent: Option<Array2<T>>,
    pub propagator: Option<Array2<T>>,
}

impl<T: Scalar> LayerGrads<T> {
    pub fn weights(&self) -> Array2<T> {
        &self.input + &self.target
    }

    pub fn add_assign(&mut self, other: &LayerGrads<T>) {
        self.input += &other.input;
        self.target += &other.target;
        if let (Some(a), Some(b)) = (&mut self.recurrent, &other.recurrent) {
            *a += b;
        }
        if let (Some(a), Some(b)) = (&mut self.propagator, &other.propagator) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TpNetwork<T> {
    pub input: InputShape,
    pub layers: Vec<Layer<T>>,
    /// `S`, `[classes, first-layer units]`.
    pub target_propagator: Array2<T>,
    /// Integrator weights `[last-layer outputs, classes]`.
    pub readout: Array2<T>,
    pub classes: usize,
    pub rule: RuleConfig<T>,
}

impl<T: Scalar> TpNetwork<T> {
    pub fn validate(&self) -> Result<()> {
        let first = self.layers.first().ok_or_else(|| TpError::Config("network has no layers".into()))?;
        if first.topology.input_features() != self.input.features() {
            return Err(TpError::dim("first layer input", self.input.features(), first.topology.input_features()));
        }
        for pair in self.layers.windows(2) {
            if pair[0].topology.output_features() != pair[1].topology.input_features() {
                return Err(TpError::dim(
                    "layer chain",
                    pair[0].topology.output_features(),
                    pair[1].topology.input_features(),
                ));
            }
        }
        if self.target_propagator.dim() != (self.classes, first.units()) {
            return Err(TpError::dim(
                "target propagator",
                format!("({}, {})", self.classes, first.units()),
                format!("{:?}", self.target_propagator.dim()),
            ));
        }
        let last = self.layers.last().expect("non-empty").topology.output_features();
        if self.readout.dim() != (last, self.classes) {
            return Err(TpError::dim("readout", format!("({last}, {})", self.classes), format!("{:?}", self.readout.dim())));
        }
        Ok(())
    }

    pub fn new_state(&self, batch: usize) -> NetworkState<T> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let u = l.units();
                let pooled = match l.topology {
                    Topology::Conv(g) if g.pool => Some(Array2::zeros((batch, g.output_features()))),
                    _ => None,
                };
                let prev = l.recurrent.as_ref().map(|_| Array2::zeros((batch, u)));
                LayerState {
                    input: MembraneState::zeros(batch, u),
                    target: MembraneState::zeros(batch, u),
                    traces: TraceState::zeros(batch, u, l.beta),
                    pooled_in: pooled.clone(),
                    pooled_trg: pooled,
                    prev_in: prev.clone(),
                    prev_trg: prev,
                }
            })
            .collect();
        let last = self.layers.last().map_or(0, |l| l.topology.output_features());
        NetworkState {
            batch,
            layers,
            input_spikes: Array2::zeros((batch, self.input.features())),
            targets: Array2::zeros((batch, self.classes)),
            label_trace: Array2::zeros((batch, self.classes)),
            readout: ReadoutState::zeros(batch, self.classes),
            readout_counts: Array2::zeros((batch, last)),
            steps: 0,
        }
    }

    /// Matrix carrying the input path into layer `l`.
    pub fn input_path_weights(&self, l: usize) -> &Array2<T> {
        self.layers[l].effective_weights()
    }

    /// Matrix carrying the target path into layer `l`: `S` for the first
    /// layer, the input path's own matrix afterwards.
    pub fn target_path_weights(&self, l: usize) -> &Array2<T> {
        if l == 0 {
            &self.target_propagator
        } else {
            self.input_path_weights(l)
        }
    }

    /// Advances both paths by one time step. With `targets = None` only the
    /// input path runs (inference).
    pub fn forward_step(
        &self,
        state: &mut NetworkState<T>,
        input: ArrayView2<'_, T>,
        targets: Option<ArrayView2<'_, T>>,
    ) -> Result<()> {
        if input.dim() != (state.batch, self.input.features()) {
            return Err(TpError::dim(
                "input spikes",
                format!("({}, {})", state.batch, self.input.features()),
                format!("{:?}", input.dim()),
            ));
        }
        if let Some(c) = targets {
            check_one_hot(c, state.batch, self.classes)?;
            state.targets.assign(&c);
            let beta = self.rule.label_beta;
            Zip::from(&mut state.label_trace).and(c).for_each(|e, &x| *e = beta * *e + x);
        }
        state.input_spikes.assign(&input);

        for l in 0..self.layers.len() {
            let layer = &self.layers[l];
            let (done, rest) = state.layers.split_at_mut(l);
            let ls = &mut rest[0];
            let pre_in = if l == 0 { state.input_spikes.view() } else { done[l - 1].output_in() };

            let w = self.input_path_weights(l);
            let mut cur = layer.topology.current(pre_in, w.view())?;
            if let Some(prev) = &mut ls.prev_in {
                prev.assign(&ls.input.s_prev);
                if let Some(rc) = layer.recurrent_current(prev.view()) {
                    cur += &rc;
                }
            }
            ls.input.advance(cur.view(), &layer.lif)?;
            let mut picks = Vec::new();
            if let (Topology::Conv(g), Some(pooled)) = (&layer.topology, &mut ls.pooled_in) {
                let (p, idx) = g.pool(ls.input.s_prev.view());
                pooled.assign(&p);
                picks = idx;
            }
            ls.traces.update(Some(ls.input.s_prev.view()), None)?;

            if targets.is_none() {
                continue;
            }
            let mut cur = if l == 0 {
                state.targets.dot(self.target_path_weights(0))
            } else {
                layer.topology.current(done[l - 1].output_trg(), self.target_path_weights(l).view())?
            };
            if let Some(prev) = &mut ls.prev_trg {
                prev.assign(&ls.target.s_prev);
                if let Some(rc) = layer.recurrent_current(prev.view()) {
                    cur += &rc;
                }
            }
            ls.target.advance(cur.view(), &layer.lif)?;
            if let (Topology::Conv(g), Some(pooled)) = (&layer.topology, &mut ls.pooled_trg) {
                let p = match self.rule.pool_policy {
                    PoolPolicy::Independent => g.pool(ls.target.s_prev.view()).0,
                    PoolPolicy::SharedIndices => g.gather(ls.target.s_prev.view(), &picks),
                };
                pooled.assign(&p);
            }
            ls.traces.update(None, Some(ls.target.s_prev.view()))?;
        }

        let last = state.layers.last().expect("non-empty").output_in();
        readout_step(&mut state.readout, last, self.readout.view())?;
        state.readout_counts += &last;
        state.steps += 1;
        Ok(())
    }

    /// Pairwise logits, targets and modulatory matrix of layer `l`.
    pub fn layer_signal(&self, state: &NetworkState<T>, l: usize) -> Result<BatchLossSignal<T>> {
        let ls = &state.layers[l];
        let prev = if l == 0 {
            state.label_trace.view()
        } else {
            state.layers[l - 1].traces.eps_tilde.view()
        };
        BatchLossSignal::compute(ls.traces.eps.view(), ls.traces.eps_tilde.view(), prev, self.rule.similarity)
    }

    /// Local gradient of layer `l`. Reads only layer `l` state and the
    /// activity of layer `l - 1` (or the inputs and labels for `l = 0`).
    pub fn layer_gradient(&self, state: &NetworkState<T>, l: usize, signal: &BatchLossSignal<T>) -> Result<LayerGrads<T>> {
        let layer = &self.layers[l];
        let ls = &state.layers[l];
        let factors = postsynaptic_factors(
            signal.modulation.view(),
            &ls.traces,
            ls.input.v.view(),
            ls.target.v.view(),
            &layer.lif,
        )?;
        let shape = layer.weights.dim();
        let mut input = Array2::zeros(shape);
        let mut target = Array2::zeros(shape);
        let mut propagator = None;
        if l == 0 {
            layer
                .topology
                .accumulate_weight_grad(&mut input, state.input_spikes.view(), factors.input.view())?;
            if self.rule.learn_target_propagator {
                let mut ds = Array2::zeros(self.target_propagator.dim());
                accumulate_outer(&mut ds, state.targets.view(), factors.target.view())?;
                propagator = Some(ds);
            }
        } else {
            let prev = &state.layers[l - 1];
            layer.topology.accumulate_weight_grad(&mut input, prev.output_in(), factors.input.view())?;
            layer.topology.accumulate_weight_grad(&mut target, prev.output_trg(), factors.target.view())?;
        }
        let recurrent = match (&layer.recurrent, &ls.prev_in, &ls.prev_trg) {
            (Some(r), Some(pi), Some(pt)) if self.rule.learn_recurrent => {
                let mut dr = Array2::zeros(r.dim());
                accumulate_outer(&mut dr, pi.view(), factors.input.view())?;
                accumulate_outer(&mut dr, pt.view(), factors.target.view())?;
                if layer.recurrence == Recurrence::Diagonal {
                    for ((i, j), x) in dr.indexed_iter_mut() {
                        if i != j {
                            *x = T::zero();
                        }
                    }
                }
                Some(dr)
            }
            _ => None,
        };
        Ok(LayerGrads {
            input,
            target,
            recurrent,
            propagator,
        })
    }

    /// Signals and gradients of every layer; layers are independent and may
    /// be processed on the rayon pool.
    pub fn gradients(&self, state: &NetworkState<T>, parallel: bool) -> Result<Vec<(BatchLossSignal<T>, LayerGrads<T>)>> {
        let one = |l: usize| -> Result<(BatchLossSignal<T>, LayerGrads<T>)> {
            let sig = self.layer_signal(state, l)?;
            let g = self.layer_gradient(state, l, &sig)?;
            Ok((sig, g))
        };
        if parallel {
            (0..self.layers.len()).into_par_iter().map(one).collect()
        } else {
            (0..self.layers.len()).map(one).collect()
        }
    }

    /// `theta <- theta - eta * grad` for layer `l`, pulling the gradient back
    /// through weight normalization when the layer uses it.
    pub fn apply_layer(&mut self, l: usize, grads: &LayerGrads<T>, eta: T) -> Result<()> {
        let dw = grads.weights();
        let layer = &mut self.layers[l];
        match &mut layer.gain {
            Some(gain) => {
                let (dv, dg) = weight_norm_backward(layer.weights.view(), gain, dw.view());
                apply_update(&mut layer.weights, dv.view(), eta)?;
                Zip::from(gain).and(&dg).for_each(|g, &d| {
                    // gains stay positive
                    *g = (*g - eta * d).max(T::of(1e-6));
                });
            }
            None => apply_update(&mut layer.weights, dw.view(), eta)?,
        }
        if let (Some(r), Some(dr)) = (&mut layer.recurrent, &grads.recurrent) {
            apply_update(r, dr.view(), eta)?;
        }
        layer.refresh()?;
        if let Some(ds) = &grads.propagator {
            apply_update(&mut self.target_propagator, ds.view(), eta)?;
        }
        if self.has_non_finite_layer(l) {
            return Err(TpError::Numeric(format!("weights of layer {}", l + 1)));
        }
        Ok(())
    }

    fn has_non_finite_layer(&self, l: usize) -> bool {
        let layer = &self.layers[l];
        layer.weights.iter().any(|x| !x.is_finite())
            || layer.recurrent.as_ref().is_some_and(|r| r.iter().any(|x| !x.is_finite()))
    }

    /// One step of the learning rule: forward both paths, then update every
    /// layer from its local loss. Returns the per-layer local losses.
    pub fn train_step(
        &mut self,
        state: &mut NetworkState<T>,
        input: ArrayView2<'_, T>,
        targets: ArrayView2<'_, T>,
        parallel: bool,
    ) -> Result<Vec<T>> {
        if state.batch < 2 {
            return Err(TpError::ContrastiveBatch { batch: state.batch });
        }
        self.forward_step(state, input, Some(targets))?;
        let grads = self.gradients(state, parallel)?;
        let eta = self.rule.eta;
        let mut losses = Vec::with_capacity(grads.len());
        for (l, (sig, g)) in grads.iter().enumerate() {
            losses.push(sig.loss()?);
            self.apply_layer(l, g, eta)?;
        }
        Ok(losses)
    }

    /// All learnable tensors in checkpoint order.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.gain.as_ref().map_or(0, |g| g.len()) + l.recurrent.as_ref().map_or(0, |r| r.len()))
            .sum::<usize>()
            + self.target_propagator.len()
            + self.readout.len()
    }
}

fn check_one_hot<T: Scalar>(c: ArrayView2<'_, T>, batch: usize, classes: usize) -> Result<()> {
    if c.dim() != (batch, classes) {
        return Err(TpError::dim("targets", format!("({batch}, {classes})"), format!("{:?}", c.dim())));
    }
    for (b, row) in c.rows().into_iter().enumerate() {
        let sum: T = row.iter().copied().sum();
        let binary = row.iter().all(|&x| x == T::zero() || x == T::one());
        if !binary || sum != T::one() {
            return Err(TpError::Input(format!("target row {b} is not one-hot")));
        }
    }
    Ok(())
}

/// One-hot rows for `labels`.
pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Array2<T> {
    let mut out = Array2::zeros((labels.len(), classes));
    for (b, &c) in labels.iter().enumerate() {
        out[[b, c]] = T::one();
    }
    out
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: (usize, usize), fan_in: usize) -> Array2<T> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    Array2::from_shape_simple_fn(shape, || T::of(rng.gen_range(-bound..=bound)))
}

/// Draws every matrix uniform in `+-sqrt(1/fan_in)` from a seeded ChaCha stream.
pub fn init_network<T: Scalar>(spec: &NetworkSpec<T>, seed: u64) -> Result<TpNetwork<T>> {
    if spec.layers.is_empty() {
        return Err(TpError::Config("at least one layer is required".into()));
    }
    if spec.classes < 2 {
        return Err(TpError::Config("at least two classes are required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(spec.layers.len());
    // (features, optional spatial shape) produced by the previous stage
    let mut shape: (usize, Option<(usize, usize, usize)>) = match spec.input {
        InputShape::Flat(n) => (n, None),
        InputShape::Image { channels, height, width } => (channels * height * width, Some((channels, height, width))),
    };
    if shape.0 == 0 {
        return Err(TpError::Config("input must have at least one feature".into()));
    }
    for (i, ls) in spec.layers.iter().enumerate() {
        let (topology, recurrence, recurrent) = match ls.kind {
            LayerKind::Dense { units } | LayerKind::Recurrent { units, .. } => {
                if units == 0 {
                    return Err(TpError::Config(format!("layer {} has no units", i + 1)));
                }
                let rec = match ls.kind {
                    LayerKind::Recurrent { recurrence, .. } => Some(recurrence),
                    _ => None,
                };
                (Topology::Dense { inputs: shape.0, units }, rec.unwrap_or_default(), rec)
            }
            LayerKind::Conv { channels, kernel, pool } => {
                let (c, h, w) = shape
                    .1
                    .ok_or_else(|| TpError::Config(format!("conv layer {} needs an image-shaped input", i + 1)))?;
                let g = ConvGeometry {
                    in_channels: c,
                    height: h,
                    width: w,
                    out_channels: channels,
                    kernel,
                    pool,
                };
                g.validate()?;
                (Topology::Conv(g), Recurrence::Full, None)
            }
        };
        let weights = uniform(&mut rng, (topology.fan_in(), topology.weight_cols()), topology.fan_in());
        let recurrent = recurrent.map(|mode| {
            let u = topology.units();
            let mut r = uniform(&mut rng, (u, u), u);
            if mode == Recurrence::Diagonal {
                for ((a, b), x) in r.indexed_iter_mut() {
                    if a != b {
                        *x = T::zero();
                    }
                }
            }
            r
        });
        let gain = ls.weight_norm.then(|| Array1::from_elem(topology.weight_cols(), T::one()));
        shape = match topology {
            Topology::Conv(g) => {
                let (h, w) = g.pooled_dims();
                (g.output_features(), Some((g.out_channels, h, w)))
            }
            _ => (topology.output_features(), None),
        };
        layers.push(Layer::new(topology, weights, gain, recurrent, recurrence, ls.lif, ls.beta)?);
    }
    let first_units = layers[0].units();
    let target_propagator = uniform(&mut rng, (spec.classes, first_units), spec.classes);
    let readout = uniform(&mut rng, (shape.0, spec.classes), shape.0);
    let rule = RuleConfig {
        label_beta: spec.layers[0].beta,
        ..RuleConfig::default()
    };
    let net = TpNetwork {
        input: spec.input,
        layers,
        target_propagator,
        readout,
        classes: spec.classes,
        rule,
    };
    net.validate()?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn dense_spec(inputs: usize, hidden: &[usize], classes: usize) -> NetworkSpec<f64> {
        NetworkSpec {
            input: InputShape::Flat(inputs),
            layers: hidden.iter().map(|&u| LayerSpec::dense(u)).collect(),
            classes,
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let spec = dense_spec(100, &[20, 10], 4);
        let a = init_network(&spec, 7).unwrap();
        let b = init_network(&spec, 7).unwrap();
        let c = init_network(&spec, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.layers[0].weights, c.layers[0].weights);
        assert!(a.layers[0].weights.iter().all(|w| w.abs() <= 0.1));
        assert_eq!(a.target_propagator.dim(), (4, 20));
        assert_eq!(a.readout.dim(), (10, 4));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(init_network(&dense_spec(4, &[], 2), 0).is_err());
        assert!(init_network(&dense_spec(4, &[3, 0], 2), 0).is_err());
        assert!(init_network(&dense_spec(4, &[3], 1), 0).is_err());
        let conv_on_flat = NetworkSpec::<f64> {
            input: InputShape::Flat(16),
            layers: vec![LayerSpec {
                kind: LayerKind::Conv { channels: 2, kernel: 3, pool: false },
                ..LayerSpec::dense(1)
            }],
            classes: 2,
        };
        assert!(init_network(&conv_on_flat, 0).is_err());
    }

    #[test]
    fn zero_drive_stays_silent() {
        let net = init_network(&dense_spec(5, &[4, 3], 2), 1).unwrap();
        let mut st = net.new_state(2);
        let zeros = Array2::zeros((2, 5));
        let mut tgt = Array2::zeros((2, 2));
        net.forward_step(&mut st, zeros.view(), None).unwrap();
        assert!(st.layers.iter().all(|l| l.input.s_prev.iter().all(|&x| x == 0.0)));
        assert!(st.layers.iter().all(|l| l.traces.eps.iter().all(|&x| x == 0.0)));
        // all-zero target rows are not one-hot
        assert!(matches!(net.forward_step(&mut st, zeros.view(), Some(tgt.view())), Err(TpError::Input(_))));
        tgt[[0, 0]] = 0.5;
        tgt[[0, 1]] = 0.5;
        assert!(net.forward_step(&mut st, zeros.view(), Some(tgt.view())).is_err());
    }

    #[test]
    fn single_layer_hand_evaluation() {
        let mut net = init_network(&dense_spec(2, &[3], 3), 0).unwrap();
        net.layers[0].weights = array![[0.6, 1.0, -0.5], [0.5, 0.25, 2.0]];
        net.layers[0].refresh().unwrap();
        net.target_propagator = Array2::eye(3);
        let mut st = net.new_state(2);
        let x = array![[1.0, 1.0], [0.0, 1.0]];
        let c = array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
        net.forward_step(&mut st, x.view(), Some(c.view())).unwrap();
        // W.s0 = [[1.1, 1.25, 1.5], [0.5, 0.25, 2.0]]
        assert_eq!(st.layers[0].input.s_prev, array![[1.0, 1.0, 1.0], [0.0, 0.0, 1.0]]);
        // S = I, so the target potentials equal c and only 1.0 entries cross v_th = 1
        assert_eq!(st.layers[0].target.v, c);
        assert_eq!(st.layers[0].target.s_prev, c);
    }

    #[test]
    fn target_path_shares_input_weights_beyond_first_layer() {
        let net = init_network(&dense_spec(5, &[4, 3, 3], 2), 1).unwrap();
        assert!(std::ptr::eq(net.target_path_weights(0), &net.target_propagator));
        for l in 1..3 {
            assert!(std::ptr::eq(net.target_path_weights(l), net.input_path_weights(l)));
        }
    }

    #[test]
    fn batch_of_one_is_rejected_before_any_write() {
        let mut net = init_network(&dense_spec(3, &[4], 2), 2).unwrap();
        let before = net.clone();
        let mut st = net.new_state(1);
        let r = net.train_step(&mut st, array![[1.0, 0.0, 1.0]].view(), array![[1.0, 0.0]].view(), false);
        assert!(matches!(r, Err(TpError::ContrastiveBatch { batch: 1 })));
        assert_eq!(net, before);
        assert_eq!(st.steps, 0);
    }

    #[test]
    fn diagonal_recurrence_stays_diagonal() {
        let spec = NetworkSpec::<f64> {
            input: InputShape::Flat(4),
            layers: vec![LayerSpec {
                kind: LayerKind::Recurrent { units: 5, recurrence: Recurrence::Diagonal },
                ..LayerSpec::dense(5)
            }
            .with_dynamics(0.9, 0.8, 0.3)],
            classes: 2,
        };
        let mut net = init_network(&spec, 3).unwrap();
        let mut st = net.new_state(2);
        for t in 0..10 {
            let x = Array2::from_shape_fn((2, 4), |(b, i)| ((b + i + t) % 2) as f64);
            net.train_step(&mut st, x.view(), array![[1.0, 0.0], [0.0, 1.0]].view(), false).unwrap();
        }
        let r = net.layers[0].recurrent.as_ref().unwrap();
        for ((i, j), &x) in r.indexed_iter() {
            if i != j {
                assert_eq!(x, 0.0);
            }
        }
    }

    #[test]
    fn conv_stack_runs_and_pools() {
        let spec = NetworkSpec::<f64> {
            input: InputShape::Image { channels: 1, height: 4, width: 4 },
            layers: vec![
                LayerSpec {
                    kind: LayerKind::Conv { channels: 2, kernel: 3, pool: true },
                    weight_norm: true,
                    ..LayerSpec::dense(1)
                }
                .with_dynamics(0.5, 0.5, 0.5),
                LayerSpec::dense(3).with_dynamics(0.5, 0.5, 0.5),
            ],
            classes: 2,
        };
        let mut net = init_network(&spec, 4).unwrap();
        assert_eq!(net.layers[0].units(), 32);
        assert_eq!(net.layers[1].topology.input_features(), 8);
        let mut st = net.new_state(2);
        let x = Array2::from_shape_fn((2, 16), |(b, i)| ((i * 7 + b) % 3 == 0) as u8 as f64);
        for _ in 0..5 {
            net.train_step(&mut st, x.view(), array![[1.0, 0.0], [0.0, 1.0]].view(), false).unwrap();
        }
        assert_eq!(st.layers[0].pooled_in.as_ref().unwrap().dim(), (2, 8));
        let n = crate::layer::column_norms(net.layers[0].effective_weights().view());
        let g = net.layers[0].gain.as_ref().unwrap();
        for (a, b) in n.iter().zip(g.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

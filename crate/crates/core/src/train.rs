//! Training, evaluation and fine-tuning loops.
//!
//! Each mini-batch is one pass over the sequence: every step advances both
//! paths and updates every layer from its local loss, then the readout takes
//! one delta-rule step on the integrated output. States are reset between
//! batches.

use std::str::FromStr;
use std::time::Instant;

use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{random_crop, FrameTensor, KShotSplit};
use crate::error::{Result, TpError};
use crate::metrics::{silhouette, Confusion, MetricsRecord, MetricsSink};
use crate::network::{one_hot, LayerGrads, NetworkState, TpNetwork};
use crate::readout::{predict, readout_gradient};
use crate::rule::apply_update;
use crate::scalar::Scalar;

/// When hidden-layer updates are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpdateCadence {
    /// After every time step.
    #[default]
    Step,
    /// Summed over the sequence, applied once at its end.
    Sequence,
}

impl FromStr for UpdateCadence {
    type Err = TpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(UpdateCadence::Step),
            "sequence" => Ok(UpdateCadence::Sequence),
            other => Err(TpError::Config(format!("unknown update cadence `{other}`"))),
        }
    }
}

/// Random shift of image-shaped frames, fixed per sample for the whole sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropAugment {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig<T> {
    pub epochs: usize,
    pub batch_size: usize,
    pub readout_eta: T,
    pub seed: u64,
    /// Evaluate on the test split every this many epochs; the last epoch is
    /// always evaluated. 0 evaluates only at the end.
    pub eval_every: usize,
    pub cadence: UpdateCadence,
    /// Single-threaded layer updates.
    pub deterministic: bool,
    pub augment: Option<CropAugment>,
    /// Compute per-layer silhouette scores at each evaluation.
    pub silhouette: bool,
}

impl<T: Scalar> Default for TrainConfig<T> {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            readout_eta: T::of(1e-3),
            seed: 0,
            eval_every: 1,
            cadence: UpdateCadence::Step,
            deterministic: true,
            augment: None,
            silhouette: false,
        }
    }
}

impl<T: Scalar> TrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(TpError::ContrastiveBatch { batch: self.batch_size });
        }
        if !(self.readout_eta > T::zero()) || !self.readout_eta.is_finite() {
            return Err(TpError::Config(format!("readout_eta must be positive, got {}", self.readout_eta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_accuracy: Option<f64>,
    pub best_accuracy: Option<f64>,
    /// Mean local loss per layer over the last epoch.
    pub layer_loss: Vec<f64>,
    pub train_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub confusion: Confusion,
    pub predictions: Vec<usize>,
    /// Input traces at the final step, `[samples, units]` per layer.
    pub final_traces: Vec<Array2<f64>>,
}

impl Evaluation {
    /// Silhouette of each layer's final traces.
    pub fn layer_silhouettes(&self, labels: &[usize]) -> Result<Vec<f64>> {
        self.final_traces
            .iter()
            .map(|t| silhouette(t.view(), labels).map(|s| s.score))
            .collect()
    }
}

fn check_classes<T: Scalar>(net: &TpNetwork<T>, data: &FrameTensor) -> Result<()> {
    if data.num_classes != net.classes {
        return Err(TpError::Config(format!(
            "data has {} classes, network has {}",
            data.num_classes, net.classes
        )));
    }
    if data.features() != net.input.features() {
        return Err(TpError::Config(format!(
            "data has {} features, network expects {}",
            data.features(),
            net.input.features()
        )));
    }
    Ok(())
}

/// Shuffled mini-batches; a trailing singleton joins the previous batch.
fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

fn batch_frames(data: &FrameTensor, idx: &[usize], augment: Option<CropAugment>, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let mut out = Array3::zeros((idx.len(), data.steps(), data.features()));
    for (row, &i) in idx.iter().enumerate() {
        let sample = data.sample(i);
        match augment {
            Some(a) => {
                let cropped = random_crop(&sample.to_owned(), a.channels, a.height, a.width, a.pad, rng);
                out.slice_mut(s![row, .., ..]).assign(&cropped);
            }
            None => out.slice_mut(s![row, .., ..]).assign(&sample),
        }
    }
    out
}

fn step_input<T: Scalar>(frames: &Array3<f32>, t: usize) -> Array2<T> {
    frames.slice(s![.., t, ..]).mapv(T::of_f32)
}

/// One sequence of learning on one batch. Returns per-layer summed losses
/// and the readout predictions made before the readout update.
pub fn train_batch<T: Scalar>(
    net: &mut TpNetwork<T>,
    state: &mut NetworkState<T>,
    frames: &Array3<f32>,
    labels: &[usize],
    cfg: &TrainConfig<T>,
) -> Result<(Vec<f64>, Vec<usize>)> {
    if labels.len() < 2 {
        return Err(TpError::ContrastiveBatch { batch: labels.len() });
    }
    let targets: Array2<T> = one_hot(labels, net.classes);
    let parallel = !cfg.deterministic;
    state.reset();
    let mut losses = vec![0.0; net.layers.len()];
    let mut pending: Option<Vec<LayerGrads<T>>> = None;
    for t in 0..frames.dim().1 {
        let input = step_input::<T>(frames, t);
        match cfg.cadence {
            UpdateCadence::Step => {
                let step = net.train_step(state, input.view(), targets.view(), parallel)?;
                for (acc, l) in losses.iter_mut().zip(step) {
                    *acc += l.to_f64_lossy();
                }
            }
            UpdateCadence::Sequence => {
                net.forward_step(state, input.view(), Some(targets.view()))?;
                let grads = net.gradients(state, parallel)?;
                let sum = pending.get_or_insert_with(|| grads.iter().map(|(_, g)| g.clone()).collect::<Vec<_>>());
                for (l, (sig, g)) in grads.iter().enumerate() {
                    losses[l] += sig.loss()?.to_f64_lossy();
                    if t > 0 {
                        sum[l].add_assign(g);
                    }
                }
            }
        }
    }
    if let Some(sum) = pending {
        let eta = net.rule.eta;
        for (l, g) in sum.iter().enumerate() {
            net.apply_layer(l, g, eta)?;
        }
    }
    let predictions = predict(&state.readout);
    let g = readout_gradient(state.readout_counts.view(), state.readout.accumulator.view(), targets.view())?;
    apply_update(&mut net.readout, g.view(), cfg.readout_eta)?;
    if net.readout.iter().any(|x| !x.is_finite()) {
        return Err(TpError::Numeric("readout weights".into()));
    }
    Ok((losses, predictions))
}

struct Clock {
    start: Instant,
    last: f64,
}

impl Clock {
    fn tick(&mut self) -> f64 {
        let now = self.start.elapsed().as_secs_f64();
        // strictly increasing even when the timer resolution is coarse
        self.last = if now > self.last { now } else { self.last + 1e-9 };
        self.last
    }
}

/// Runs `cfg.epochs` epochs on `train_data`, evaluating on `test` when given.
pub fn train<T: Scalar>(
    net: &mut TpNetwork<T>,
    train_data: &FrameTensor,
    test: Option<&FrameTensor>,
    cfg: &TrainConfig<T>,
    sink: &mut dyn MetricsSink,
) -> Result<TrainSummary> {
    cfg.validate()?;
    check_classes(net, train_data)?;
    if let Some(t) = test {
        check_classes(net, t)?;
    }
    if train_data.len() < 2 {
        return Err(TpError::ContrastiveBatch { batch: train_data.len() });
    }
    let mut clock = Clock {
        start: Instant::now(),
        last: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut summary = TrainSummary {
        epochs: 0,
        final_accuracy: None,
        best_accuracy: None,
        layer_loss: Vec::new(),
        train_accuracy: None,
    };
    let mut states: Vec<NetworkState<T>> = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = vec![0.0; net.layers.len()];
        let mut loss_count = 0usize;
        let mut correct = 0usize;
        for idx in batches(train_data.len(), cfg.batch_size, &mut rng) {
            let frames = batch_frames(train_data, &idx, cfg.augment, &mut rng);
            let labels: Vec<usize> = idx.iter().map(|&i| train_data.labels[i]).collect();
            let state = match states.iter_mut().position(|s| s.batch == idx.len()) {
                Some(p) => &mut states[p],
                None => {
                    states.push(net.new_state(idx.len()));
                    states.last_mut().unwrap()
                }
            };
            let (losses, preds) = train_batch(net, state, &frames, &labels, cfg)?;
            for (acc, l) in loss_sum.iter_mut().zip(losses) {
                *acc += l;
            }
            loss_count += frames.dim().1;
            correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
        let layer_loss: Vec<f64> = loss_sum.iter().map(|l| l / loss_count.max(1) as f64).collect();
        let train_acc = correct as f64 / train_data.len() as f64;
        summary.epochs = epoch;
        summary.layer_loss = layer_loss.clone();
        summary.train_accuracy = Some(train_acc);
        sink.record(&MetricsRecord {
            epoch,
            split: "train".into(),
            accuracy: train_acc,
            best_accuracy: train_acc,
            layer_loss,
            silhouette: Vec::new(),
            wall_clock: clock.tick(),
        })?;

        let due = epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
        if let (Some(test), true) = (test, due) {
            let ev = evaluate(net, test, cfg.batch_size)?;
            let best = summary.best_accuracy.map_or(ev.accuracy, |b| b.max(ev.accuracy));
            summary.best_accuracy = Some(best);
            summary.final_accuracy = Some(ev.accuracy);
            let sil = if cfg.silhouette {
                ev.layer_silhouettes(&test.labels).unwrap_or_default()
            } else {
                Vec::new()
            };
            sink.record(&MetricsRecord {
                epoch,
                split: "test".into(),
                accuracy: ev.accuracy,
                best_accuracy: best,
                layer_loss: Vec::new(),
                silhouette: sil,
                wall_clock: clock.tick(),
            })?;
        }
    }
    Ok(summary)
}

/// Input path only; the network is not modified.
pub fn evaluate<T: Scalar>(net: &TpNetwork<T>, data: &FrameTensor, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(TpError::Input("cannot evaluate an empty dataset".into()));
    }
    check_classes(net, data)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<&[usize]> = all.chunks(batch_size.max(1)).collect();
    let parts = chunks
        .par_iter()
        .map(|idx| -> Result<(Vec<usize>, Vec<Array2<f64>>)> {
            let mut state = net.new_state(idx.len());
            for t in 0..data.steps() {
                let input: Array2<T> = data.batch_step(idx, t);
                net.forward_step(&mut state, input.view(), None)?;
            }
            let traces = state.layers.iter().map(|l| l.traces.eps.mapv(|x| x.to_f64_lossy())).collect();
            Ok((predict(&state.readout), traces))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut predictions = Vec::with_capacity(data.len());
    let mut final_traces: Vec<Array2<f64>> = net.layers.iter().map(|l| Array2::zeros((0, l.units()))).collect();
    for (p, traces) in parts {
        predictions.extend(p);
        for (acc, t) in final_traces.iter_mut().zip(traces) {
            acc.append(ndarray::Axis(0), t.view()).expect("matching widths");
        }
    }
    let mut confusion = Confusion::new(net.classes);
    for (&truth, &p) in data.labels.iter().zip(&predictions) {
        confusion.record(truth, p);
    }
    Ok(Evaluation {
        accuracy: confusion.accuracy(),
        confusion,
        predictions,
        final_traces,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    pub query_before: f64,
    pub query_after: f64,
    pub base_before: Option<f64>,
    pub base_after: Option<f64>,
    /// `max(0, base_before - base_after)`.
    pub forgetting: Option<f64>,
}

impl FinetuneReport {
    pub fn improvement(&self) -> f64 {
        self.query_after - self.query_before
    }
}

/// Trains on the support set only and reports query accuracy before and
/// after, plus the accuracy drop on `base` when given.
pub fn finetune<T: Scalar>(
    net: &mut TpNetwork<T>,
    split: &KShotSplit,
    base: Option<&FrameTensor>,
    cfg: &TrainConfig<T>,
    sink: &mut dyn MetricsSink,
) -> Result<FinetuneReport> {
    if split.support.is_empty() {
        return Err(TpError::Input("empty support set".into()));
    }
    check_classes(net, &split.support)?;
    check_classes(net, &split.query)?;
    let query_before = evaluate(net, &split.query, cfg.batch_size)?.accuracy;
    let base_before = base.map(|b| evaluate(net, b, cfg.batch_size)).transpose()?.map(|e| e.accuracy);
    let quiet = TrainConfig {
        eval_every: 0,
        ..cfg.clone()
    };
    if cfg.epochs > 0 {
        train(net, &split.support, None, &quiet, sink)?;
    }
    let query_after = evaluate(net, &split.query, cfg.batch_size)?.accuracy;
    let base_after = base.map(|b| evaluate(net, b, cfg.batch_size)).transpose()?.map(|e| e.accuracy);
    let forgetting = base_before.zip(base_after).map(|(b, a)| (b - a).max(0.0));
    Ok(FinetuneReport {
        query_before,
        query_after,
        base_before,
        base_after,
        forgetting,
    })
}

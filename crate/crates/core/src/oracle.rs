//! Finite-difference gradient oracle for the learning rule.
//!
//! A [`SmoothedInstance`] is one step of one layer with the hard spike
//! replaced by the smooth ArcTan antiderivative, so its loss is
//! differentiable and its exact derivative through the membrane is the
//! surrogate `theta'`. Everything from earlier steps (membranes, spikes,
//! traces) and the previous layer's target traces are frozen constants.
//! Central differences of that loss are compared with the analytic three
//! factor gradient built from the rule primitives.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Result, TpError};
use crate::lif::{arctan_smoothed, LifParams};
use crate::rule::{accumulate_outer, postsynaptic_factors, BatchLossSignal, Similarity, TraceState};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const PASS_THRESHOLD: f64 = 1e-4;

pub const REPORT_HEADER: &str = "\
# gradcheck: one-step locality approximation of the trace-propagation gradient
# traces are differentiated through the current step only; earlier steps are
# frozen. Agreement here does not imply equivalence with BPTT.";

/// Where the target path of the checked layer reads from.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetPath {
    /// Hidden layer: the previous layer's target spikes through the same `W`.
    Shared { pre_trg: Array2<f64> },
    /// First layer: one-hot labels `[batch, classes]` through the propagator `S`.
    Propagator { labels: Array2<f64> },
}

/// Differentiable parameters of an instance. `r` is `[post, post]`,
/// `s` is `[classes, post]` and present only for first-layer instances.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleParams {
    pub w: Array2<f64>,
    pub r: Option<Array2<f64>>,
    pub s: Option<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedInstance {
    pub pre_in: Array2<f64>,
    pub target: TargetPath,
    pub v_prev_in: Array2<f64>,
    pub v_prev_trg: Array2<f64>,
    pub s_prev_in: Array2<f64>,
    pub s_prev_trg: Array2<f64>,
    pub eps_prev: Array2<f64>,
    pub eps_tilde_prev: Array2<f64>,
    /// Frozen target traces of the layer below, `[batch, any]`.
    pub prev_target_traces: Array2<f64>,
    pub lif: LifParams<f64>,
    pub beta: f64,
    pub similarity: Similarity,
    /// Whether `S` is differentiated (first-layer instances only).
    pub learn_propagator: bool,
}

/// Corruptions of one factor of the analytic gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    /// Modulation without the target subtraction: `softmax(z)`.
    Modulation,
    /// Current spikes in place of the traces.
    Trace,
    /// Surrogate evaluated at `v` instead of `v - v_th`.
    Surrogate,
    /// Presynaptic rows rolled by one sample.
    Presynaptic,
}

impl Mutation {
    pub const ALL: [Mutation; 4] = [Mutation::Modulation, Mutation::Trace, Mutation::Surrogate, Mutation::Presynaptic];

    pub fn name(self) -> &'static str {
        match self {
            Mutation::Modulation => "modulation",
            Mutation::Trace => "trace",
            Mutation::Surrogate => "surrogate",
            Mutation::Presynaptic => "presynaptic",
        }
    }
}

struct Forward {
    v_in: Array2<f64>,
    v_trg: Array2<f64>,
    spikes_in: Array2<f64>,
    spikes_trg: Array2<f64>,
    traces: TraceState<f64>,
}

impl SmoothedInstance {
    pub fn batch(&self) -> usize {
        self.pre_in.nrows()
    }

    pub fn post(&self) -> usize {
        self.v_prev_in.ncols()
    }

    pub fn validate(&self, at: &OracleParams) -> Result<()> {
        let (b, post) = self.v_prev_in.dim();
        if b < 2 {
            return Err(TpError::ContrastiveBatch { batch: b });
        }
        let expect = |name: &'static str, a: &Array2<f64>, shape: (usize, usize)| -> Result<()> {
            if a.dim() != shape {
                return Err(TpError::dim(name, format!("{shape:?}"), format!("{:?}", a.dim())));
            }
            if a.iter().any(|x| !x.is_finite()) {
                return Err(TpError::Numeric(format!("{name} is not finite")));
            }
            Ok(())
        };
        expect("w", &at.w, (self.pre_in.ncols(), post))?;
        expect("pre_in", &self.pre_in, (b, at.w.nrows()))?;
        for (name, a) in [
            ("v_prev_trg", &self.v_prev_trg),
            ("s_prev_in", &self.s_prev_in),
            ("s_prev_trg", &self.s_prev_trg),
            ("eps_prev", &self.eps_prev),
            ("eps_tilde_prev", &self.eps_tilde_prev),
        ] {
            expect(name, a, (b, post))?;
        }
        if self.prev_target_traces.nrows() != b {
            return Err(TpError::dim("previous target traces", b, self.prev_target_traces.nrows()));
        }
        if let Some(r) = &at.r {
            expect("r", r, (post, post))?;
        }
        match (&self.target, &at.s) {
            (TargetPath::Shared { pre_trg }, None) => expect("pre_trg", pre_trg, (b, at.w.nrows())),
            (TargetPath::Propagator { labels }, Some(s)) => {
                expect("s", s, (labels.ncols(), post))?;
                expect("labels", labels, (b, s.nrows()))
            }
            _ => Err(TpError::Input("propagator present exactly for first-layer instances".into())),
        }
    }

    fn forward(&self, at: &OracleParams) -> Forward {
        let p = &self.lif;
        let membrane = |v_prev: &Array2<f64>, s_prev: &Array2<f64>, current: Array2<f64>| {
            let mut v = v_prev * p.alpha + current - s_prev * p.v_th;
            if let Some(r) = &at.r {
                v += &s_prev.dot(r);
            }
            v
        };
        let v_in = membrane(&self.v_prev_in, &self.s_prev_in, self.pre_in.dot(&at.w));
        let trg_current = match (&self.target, &at.s) {
            (TargetPath::Shared { pre_trg }, _) => pre_trg.dot(&at.w),
            (TargetPath::Propagator { labels }, Some(s)) => labels.dot(s),
            (TargetPath::Propagator { .. }, None) => unreachable!("validated"),
        };
        let v_trg = membrane(&self.v_prev_trg, &self.s_prev_trg, trg_current);
        let smooth = |v: &Array2<f64>| v.mapv(|x| arctan_smoothed(x - p.v_th, p.surrogate_scale));
        let spikes_in = smooth(&v_in);
        let spikes_trg = smooth(&v_trg);
        let traces = TraceState {
            eps: &self.eps_prev * self.beta + &spikes_in,
            eps_tilde: &self.eps_tilde_prev * self.beta + &spikes_trg,
            beta: self.beta,
        };
        Forward {
            v_in,
            v_trg,
            spikes_in,
            spikes_trg,
            traces,
        }
    }

    fn signal(&self, fwd: &Forward) -> Result<BatchLossSignal<f64>> {
        BatchLossSignal::compute(
            fwd.traces.eps.view(),
            fwd.traces.eps_tilde.view(),
            self.prev_target_traces.view(),
            self.similarity,
        )
    }
}

/// Local loss of the smoothed one-step model at parameters `at`.
pub fn smoothed_loss(inst: &SmoothedInstance, at: &OracleParams) -> Result<f64> {
    inst.validate(at)?;
    let fwd = inst.forward(at);
    inst.signal(&fwd)?.loss()
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn differentiated(inst: &SmoothedInstance, at: &OracleParams) -> Vec<f64> {
    let mut flat: Vec<f64> = at.w.iter().copied().collect();
    if let Some(r) = &at.r {
        flat.extend(r.iter());
    }
    if let (Some(s), true) = (&at.s, inst.learn_propagator) {
        flat.extend(s.iter());
    }
    flat
}

fn rebuild(inst: &SmoothedInstance, at: &OracleParams, flat: &[f64]) -> OracleParams {
    let mut out = at.clone();
    let mut it = flat.iter().copied();
    out.w.iter_mut().for_each(|x| *x = it.next().unwrap());
    if let Some(r) = out.r.as_mut() {
        r.iter_mut().for_each(|x| *x = it.next().unwrap());
    }
    if let (Some(s), true) = (out.s.as_mut(), inst.learn_propagator) {
        s.iter_mut().for_each(|x| *x = it.next().unwrap());
    }
    out
}

/// Numeric gradient with the same structure as [`analytic_gradient`]; `s`
/// is `None` unless the instance learns the propagator.
pub fn finite_difference_grad(inst: &SmoothedInstance, at: &OracleParams, h: f64) -> Result<OracleParams> {
    if !(h > 0.0) {
        return Err(TpError::Config(format!("finite-difference step must be positive, got {h}")));
    }
    inst.validate(at)?;
    let x = differentiated(inst, at);
    let mut failure = None;
    let g = central_difference(
        |p| match smoothed_loss(inst, &rebuild(inst, at, p)) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        &x,
        h,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let mut grad = rebuild(inst, at, &g);
    if !inst.learn_propagator {
        grad.s = None;
    }
    Ok(grad)
}

fn roll_rows(a: ArrayView2<'_, f64>) -> Array2<f64> {
    let b = a.nrows();
    Array2::from_shape_fn(a.dim(), |(i, j)| a[[(i + 1) % b, j]])
}

/// Three-factor gradient from the rule primitives, optionally with one factor corrupted.
pub fn analytic_gradient(inst: &SmoothedInstance, at: &OracleParams, mutation: Option<Mutation>) -> Result<OracleParams> {
    inst.validate(at)?;
    let fwd = inst.forward(at);
    let signal = inst.signal(&fwd)?;
    let modulation = match mutation {
        Some(Mutation::Modulation) => crate::rule::row_softmax(signal.z.view()),
        _ => signal.modulation.clone(),
    };
    let traces = match mutation {
        Some(Mutation::Trace) => TraceState {
            eps: fwd.spikes_in.clone(),
            eps_tilde: fwd.spikes_trg.clone(),
            beta: inst.beta,
        },
        _ => fwd.traces.clone(),
    };
    let mut lif = inst.lif;
    if mutation == Some(Mutation::Surrogate) {
        lif.v_th = 0.0;
    }
    let factors = postsynaptic_factors(modulation.view(), &traces, fwd.v_in.view(), fwd.v_trg.view(), &lif)?;
    let pre = |a: &Array2<f64>| match mutation {
        Some(Mutation::Presynaptic) => roll_rows(a.view()),
        _ => a.clone(),
    };

    let mut w = Array2::zeros(at.w.dim());
    accumulate_outer(&mut w, pre(&inst.pre_in).view(), factors.input.view())?;
    let mut s = None;
    match &inst.target {
        TargetPath::Shared { pre_trg } => accumulate_outer(&mut w, pre(pre_trg).view(), factors.target.view())?,
        TargetPath::Propagator { labels } if inst.learn_propagator => {
            let mut ds = Array2::zeros((labels.ncols(), inst.post()));
            accumulate_outer(&mut ds, pre(labels).view(), factors.target.view())?;
            s = Some(ds);
        }
        TargetPath::Propagator { .. } => {}
    }
    let r = match &at.r {
        Some(r) => {
            let mut dr = Array2::zeros(r.dim());
            accumulate_outer(&mut dr, pre(&inst.s_prev_in).view(), factors.input.view())?;
            accumulate_outer(&mut dr, pre(&inst.s_prev_trg).view(), factors.target.view())?;
            Some(dr)
        }
        None => None,
    };
    Ok(OracleParams { w, r, s })
}

/// Max over entries of `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn compare(analytic: &OracleParams, numeric: &OracleParams) -> Result<f64> {
    let pairs = [
        (Some(&analytic.w), Some(&numeric.w)),
        (analytic.r.as_ref(), numeric.r.as_ref()),
        (analytic.s.as_ref(), numeric.s.as_ref()),
    ];
    let mut worst = 0.0f64;
    for (a, n) in pairs {
        match (a, n) {
            (Some(a), Some(n)) => {
                if a.dim() != n.dim() {
                    return Err(TpError::dim("gradient", format!("{:?}", a.dim()), format!("{:?}", n.dim())));
                }
                for (&x, &y) in a.iter().zip(n.iter()) {
                    let err = (x - y).abs() / x.abs().max(y.abs()).max(1e-8);
                    worst = worst.max(err);
                }
            }
            (None, None) => {}
            _ => return Err(TpError::Input("gradients cover different parameters".into())),
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceKind {
    Dense,
    Recurrent,
    /// First layer with a fixed propagator.
    FirstLayer,
    /// First layer with the propagator differentiated.
    FirstLayerLearnedS,
}

impl InstanceKind {
    pub const ALL: [InstanceKind; 4] = [
        InstanceKind::Dense,
        InstanceKind::Recurrent,
        InstanceKind::FirstLayer,
        InstanceKind::FirstLayerLearnedS,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InstanceKind::Dense => "dense",
            InstanceKind::Recurrent => "recurrent",
            InstanceKind::FirstLayer => "first-layer",
            InstanceKind::FirstLayerLearnedS => "first-layer-learned-s",
        }
    }
}

/// Random instance: batch 2..=4, at most 8 units per layer, membranes near
/// threshold so the surrogate is not vanishingly small.
pub fn random_instance(rng: &mut ChaCha8Rng, kind: InstanceKind) -> (SmoothedInstance, OracleParams) {
    let batch = rng.gen_range(2..=4);
    let pre = rng.gen_range(1..=8);
    let post = rng.gen_range(1..=8);
    let prev_width = rng.gen_range(1..=8);
    let similarity = [Similarity::Dot, Similarity::NegEuclidean, Similarity::NegDot][rng.gen_range(0..3)];
    let alpha = rng.gen_range(0.5..0.99);
    let beta = rng.gen_range(0.5..0.99);
    let v_th = rng.gen_range(0.5..1.5);
    let scale = rng.gen_range(0.5..2.0);
    let lif = LifParams {
        alpha,
        v_th,
        surrogate_scale: scale,
    };
    let uniform = |shape: (usize, usize), lo: f64, hi: f64, rng: &mut ChaCha8Rng| {
        Array2::from_shape_simple_fn(shape, || rng.gen_range(lo..hi))
    };
    let bern = |shape: (usize, usize), rng: &mut ChaCha8Rng| {
        Array2::from_shape_simple_fn(shape, || if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
    };
    let w = uniform((pre, post), -0.6, 0.6, rng);
    let r = (kind == InstanceKind::Recurrent).then(|| uniform((post, post), -0.5, 0.5, rng));
    let pre_in = uniform((batch, pre), 0.0, 1.0, rng);
    let (target, s) = match kind {
        InstanceKind::Dense | InstanceKind::Recurrent => (TargetPath::Shared { pre_trg: uniform((batch, pre), 0.0, 1.0, rng) }, None),
        InstanceKind::FirstLayer | InstanceKind::FirstLayerLearnedS => {
            let classes = rng.gen_range(2..=4);
            let labels = Array2::from_shape_fn((batch, classes), |(b, c)| if c == b % classes { 1.0 } else { 0.0 });
            (TargetPath::Propagator { labels }, Some(uniform((classes, post), -0.6, 0.6, rng)))
        }
    };
    let inst = SmoothedInstance {
        pre_in,
        target,
        v_prev_in: uniform((batch, post), 0.0, v_th, rng),
        v_prev_trg: uniform((batch, post), 0.0, v_th, rng),
        s_prev_in: bern((batch, post), rng),
        s_prev_trg: bern((batch, post), rng),
        eps_prev: uniform((batch, post), 0.0, 2.0, rng),
        eps_tilde_prev: uniform((batch, post), 0.0, 2.0, rng),
        prev_target_traces: uniform((batch, prev_width), 0.0, 2.0, rng),
        lif,
        beta,
        similarity,
        learn_propagator: kind == InstanceKind::FirstLayerLearnedS,
    };
    (inst, OracleParams { w, r, s })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceResult {
    pub index: usize,
    pub kind: InstanceKind,
    pub batch: usize,
    pub pre: usize,
    pub post: usize,
    pub similarity: Similarity,
    pub error: f64,
    /// Error of each corrupted gradient, in [`Mutation::ALL`] order.
    pub mutation_errors: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub h: f64,
    pub seed: u64,
    pub results: Vec<InstanceResult>,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.results.iter().map(|r| r.error).fold(0.0, f64::max)
    }

    pub fn max_error_of(&self, kind: InstanceKind) -> Option<f64> {
        self.results
            .iter()
            .filter(|r| r.kind == kind)
            .map(|r| r.error)
            .reduce(f64::max)
    }

    /// Smallest error any instance reached under `m`.
    pub fn min_mutation_error(&self, m: Mutation) -> f64 {
        let i = Mutation::ALL.iter().position(|&x| x == m).unwrap();
        self.results.iter().map(|r| r.mutation_errors[i]).fold(f64::INFINITY, f64::min)
    }

    pub fn passed(&self) -> bool {
        !self.results.is_empty() && self.results.iter().all(|r| r.error < PASS_THRESHOLD)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        let _ = writeln!(out, "\n# seed={} h={:e} threshold={:e}", self.seed, self.h, PASS_THRESHOLD);
        out.push_str("index,kind,batch,pre,post,similarity,max_rel_error");
        for m in Mutation::ALL {
            let _ = write!(out, ",mut_{}", m.name());
        }
        out.push('\n');
        for r in &self.results {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{:.3e}",
                r.index,
                r.kind.name(),
                r.batch,
                r.pre,
                r.post,
                r.similarity,
                r.error
            );
            for e in r.mutation_errors {
                let _ = write!(out, ",{e:.3e}");
            }
            out.push('\n');
        }
        for kind in InstanceKind::ALL {
            if let Some(e) = self.max_error_of(kind) {
                let _ = writeln!(out, "# {}: max_rel_error={e:.3e}", kind.name());
            }
        }
        let _ = writeln!(
            out,
            "# overall: max_rel_error={:.3e} {}",
            self.max_error(),
            if self.passed() { "PASS" } else { "FAIL" }
        );
        out
    }
}

fn check_one(index: usize, seed: u64, h: f64) -> Result<InstanceResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let kind = InstanceKind::ALL[index % InstanceKind::ALL.len()];
    let (inst, at) = random_instance(&mut rng, kind);
    let numeric = finite_difference_grad(&inst, &at, h)?;
    let error = compare(&analytic_gradient(&inst, &at, None)?, &numeric)?;
    let mut mutation_errors = [0.0; 4];
    for (slot, m) in mutation_errors.iter_mut().zip(Mutation::ALL) {
        *slot = compare(&analytic_gradient(&inst, &at, Some(m))?, &numeric)?;
    }
    Ok(InstanceResult {
        index,
        kind,
        batch: inst.batch(),
        pre: at.w.nrows(),
        post: inst.post(),
        similarity: inst.similarity,
        error,
        mutation_errors,
    })
}

/// Checks `instances` random instances, cycling through every [`InstanceKind`].
pub fn gradcheck(instances: usize, seed: u64, h: f64) -> Result<GradcheckReport> {
    let results = (0..instances)
        .into_par_iter()
        .map(|i| check_one(i, seed, h))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport { h, seed, results })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn instance(kind: InstanceKind, seed: u64) -> (SmoothedInstance, OracleParams) {
        random_instance(&mut ChaCha8Rng::seed_from_u64(seed), kind)
    }

    #[test]
    fn zero_weights_give_uniform_loss() {
        let (mut inst, mut at) = instance(InstanceKind::Dense, 1);
        at.w.fill(0.0);
        for a in [
            &mut inst.v_prev_in,
            &mut inst.v_prev_trg,
            &mut inst.s_prev_in,
            &mut inst.s_prev_trg,
            &mut inst.eps_prev,
            &mut inst.eps_tilde_prev,
        ] {
            a.fill(0.0);
        }
        inst.lif.v_th = 0.0;
        let loss = smoothed_loss(&inst, &at).unwrap();
        assert!((loss - (inst.batch() as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_is_batch_permutation_invariant() {
        let (inst, at) = instance(InstanceKind::Recurrent, 2);
        let perm: Vec<usize> = (0..inst.batch()).rev().collect();
        let p = |a: &Array2<f64>| a.select(ndarray::Axis(0), &perm);
        let mut q = inst.clone();
        q.pre_in = p(&inst.pre_in);
        if let TargetPath::Shared { pre_trg } = &inst.target {
            q.target = TargetPath::Shared { pre_trg: p(pre_trg) };
        }
        q.v_prev_in = p(&inst.v_prev_in);
        q.v_prev_trg = p(&inst.v_prev_trg);
        q.s_prev_in = p(&inst.s_prev_in);
        q.s_prev_trg = p(&inst.s_prev_trg);
        q.eps_prev = p(&inst.eps_prev);
        q.eps_tilde_prev = p(&inst.eps_tilde_prev);
        q.prev_target_traces = p(&inst.prev_target_traces);
        let a = smoothed_loss(&inst, &at).unwrap();
        let b = smoothed_loss(&q, &at).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn central_difference_is_exact_on_quadratics() {
        let f = |x: &[f64]| 3.0 * x[0] * x[0] - 2.0 * x[0] * x[1] + 0.5 * x[1] * x[1] + x[0];
        let g = central_difference(f, &[0.7, -1.3], 1e-3);
        assert!((g[0] - (6.0 * 0.7 + 2.6 + 1.0)).abs() < 1e-10);
        assert!((g[1] - (-1.4 - 1.3)).abs() < 1e-10);
    }

    #[test]
    fn richardson_step_halving() {
        let (inst, at) = instance(InstanceKind::Dense, 3);
        let a = analytic_gradient(&inst, &at, None).unwrap();
        let coarse = compare(&a, &finite_difference_grad(&inst, &at, 1e-2).unwrap()).unwrap();
        let fine = compare(&a, &finite_difference_grad(&inst, &at, 5e-3).unwrap()).unwrap();
        assert!(fine < coarse * 0.3, "coarse {coarse} fine {fine}");
    }

    #[test]
    fn disconnected_unit_has_zero_gradient() {
        let (mut inst, mut at) = instance(InstanceKind::Dense, 4);
        inst.pre_in.column_mut(0).fill(0.0);
        if let TargetPath::Shared { pre_trg } = &mut inst.target {
            pre_trg.column_mut(0).fill(0.0);
        }
        at.w.row_mut(0).fill(0.3);
        let n = finite_difference_grad(&inst, &at, DEFAULT_STEP).unwrap();
        let a = analytic_gradient(&inst, &at, None).unwrap();
        assert!(n.w.row(0).iter().all(|x| x.abs() < 1e-10));
        assert!(a.w.row(0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_modulation_gives_zero_error() {
        let (mut inst, mut at) = instance(InstanceKind::Dense, 5);
        // identical samples: z has equal entries and y is uniform
        let row = inst.pre_in.row(0).to_owned();
        for mut r in inst.pre_in.rows_mut() {
            r.assign(&row);
        }
        inst.target = TargetPath::Shared { pre_trg: inst.pre_in.clone() };
        for a in [&mut inst.v_prev_in, &mut inst.v_prev_trg, &mut inst.s_prev_in, &mut inst.s_prev_trg] {
            let r0 = a.row(0).to_owned();
            for mut r in a.rows_mut() {
                r.assign(&r0);
            }
        }
        inst.v_prev_trg.assign(&inst.v_prev_in.clone());
        inst.s_prev_trg.assign(&inst.s_prev_in.clone());
        inst.eps_prev.fill(0.0);
        inst.eps_tilde_prev.fill(0.0);
        inst.prev_target_traces.fill(1.0);
        at.r = None;
        let a = analytic_gradient(&inst, &at, None).unwrap();
        let n = finite_difference_grad(&inst, &at, DEFAULT_STEP).unwrap();
        assert!(a.w.iter().all(|x| x.abs() < 1e-15));
        assert!(n.w.iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn small_dense_instance_matches() {
        let (inst, at) = (0..)
            .map(|seed| instance(InstanceKind::Dense, seed))
            .find(|(i, w)| i.batch() == 2 && w.w.dim() == (3, 2))
            .unwrap();
        let err = compare(
            &analytic_gradient(&inst, &at, None).unwrap(),
            &finite_difference_grad(&inst, &at, DEFAULT_STEP).unwrap(),
        )
        .unwrap();
        assert!(err < PASS_THRESHOLD, "{err}");
    }

    #[test]
    fn every_kind_passes_and_mutations_are_caught() {
        let report = gradcheck(40, 2024, DEFAULT_STEP).unwrap();
        for kind in InstanceKind::ALL {
            let e = report.max_error_of(kind).unwrap();
            assert!(e < PASS_THRESHOLD, "{} {e}", kind.name());
        }
        for m in Mutation::ALL {
            let e = report.min_mutation_error(m);
            assert!(e > 1e-2, "{} {e}", m.name());
        }
        let text = report.to_text();
        assert!(text.starts_with("# gradcheck"));
        assert!(text.contains("not imply equivalence with BPTT"));
    }

    #[test]
    fn shape_errors() {
        let (inst, mut at) = instance(InstanceKind::Dense, 6);
        at.w = Array2::zeros((at.w.nrows() + 1, at.w.ncols()));
        assert!(smoothed_loss(&inst, &at).is_err());
        let (inst, mut at) = instance(InstanceKind::FirstLayer, 6);
        at.s = None;
        assert!(smoothed_loss(&inst, &at).is_err());
        let (inst, at) = instance(InstanceKind::Dense, 7);
        assert!(finite_difference_grad(&inst, &at, 0.0).is_err());
    }
}

//! `key=value` run configuration.
//!
//! One entry per line; `#` starts a comment; blank lines are ignored.
//! Unknown or repeated keys are configuration errors.
//!
//! ```text
//! input = 100              # or CxHxW, e.g. 2x16x16
//! layers = dense:64, rdense:32:diag, conv:8:3:pool:wn
//! classes = 10
//! v_th = 0.25              # every layer
//! beta.2 = 0.95            # layer 2 only
//! task = synth             # synth | order | files
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cost::ArchSpec;
use crate::data::{load_container, synth_task, temporal_order_task, FrameTensor, OrderConfig, SynthConfig, SynthTask};
use crate::error::{Result, TpError};
use crate::layer::Recurrence;
use crate::lif::LifParams;
use crate::network::{init_network, InputShape, LayerKind, LayerSpec, NetworkSpec, PoolPolicy, RuleConfig, TpNetwork};
use crate::rule::Similarity;
use crate::scalar::Scalar;
use crate::train::{CropAugment, TrainConfig, UpdateCadence};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDesc {
    pub kind: LayerKind,
    pub weight_norm: bool,
}

impl FromStr for LayerDesc {
    type Err = TpError;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || TpError::Config(format!("bad layer description `{s}`"));
        let parts: Vec<&str> = s.trim().split(':').map(str::trim).collect();
        let num = |i: usize| -> Result<usize> {
            parts.get(i).ok_or_else(bad)?.parse::<usize>().map_err(|_| bad()).and_then(|n| {
                if n == 0 {
                    Err(bad())
                } else {
                    Ok(n)
                }
            })
        };
        let (kind, used) = match parts[0] {
            "dense" => (LayerKind::Dense { units: num(1)? }, 2),
            "rdense" => {
                let diag = parts.get(2) == Some(&"diag");
                let recurrence = if diag { Recurrence::Diagonal } else { Recurrence::Full };
                (LayerKind::Recurrent { units: num(1)?, recurrence }, if diag { 3 } else { 2 })
            }
            "conv" => {
                let pool = parts.get(3) == Some(&"pool");
                (
                    LayerKind::Conv {
                        channels: num(1)?,
                        kernel: num(2)?,
                        pool,
                    },
                    if pool { 4 } else { 3 },
                )
            }
            _ => return Err(bad()),
        };
        let weight_norm = match &parts[used..] {
            [] => false,
            ["wn"] => true,
            _ => return Err(bad()),
        };
        Ok(LayerDesc { kind, weight_norm })
    }
}

fn parse_input(s: &str) -> Result<InputShape> {
    let bad = || TpError::Config(format!("bad input shape `{s}`"));
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.trim().parse::<usize>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    match dims[..] {
        [n] if n > 0 => Ok(InputShape::Flat(n)),
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok(InputShape::Image {
            channels: c,
            height: h,
            width: w,
        }),
        _ => Err(bad()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskSource {
    Synth { cfg: SynthConfig, test_samples_per_class: usize },
    Order { cfg: OrderConfig, samples_per_class: usize, test_samples_per_class: usize },
    Files { train: PathBuf, test: Option<PathBuf> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOptions {
    pub k: usize,
    pub support_fraction: f64,
    /// Fraction of units permuted per class in the synthetic user shift.
    pub shift: f64,
    pub user_samples_per_class: usize,
    pub shift_seed: u64,
    /// User data container; the synthetic shift is used when absent.
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostOptions {
    pub batch: u64,
    pub steps: u64,
    pub tess_update_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub input: Option<InputShape>,
    pub layers: Vec<LayerDesc>,
    pub classes: Option<usize>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub v_th: Vec<f64>,
    pub surrogate_scale: f64,
    pub eta: f64,
    pub readout_eta: f64,
    pub similarity: Similarity,
    pub learn_target_propagator: bool,
    pub learn_recurrent: bool,
    pub pool_policy: PoolPolicy,
    pub label_beta: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub cadence: UpdateCadence,
    pub deterministic: bool,
    pub silhouette: bool,
    pub augment_pad: usize,
    pub task: TaskSource,
    pub finetune: FinetuneOptions,
    pub cost: CostOptions,
}

fn origin(line: usize) -> String {
    if line == 0 {
        "override".to_string()
    } else {
        format!("line {line}")
    }
}

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn take<V: FromStr>(&mut self, key: &str) -> Result<Option<V>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some((line, raw)) => raw
                .parse::<V>()
                .map(Some)
                .map_err(|_| TpError::Config(format!("{}: bad value `{raw}` for `{key}`", origin(line)))),
        }
    }

    fn get<V: FromStr>(&mut self, key: &str, default: V) -> Result<V> {
        Ok(self.take(key)?.unwrap_or(default))
    }
}

fn parse_similarity(s: &str) -> Result<Similarity> {
    s.parse::<Similarity>()
        .map_err(|_| TpError::Config(format!("unknown similarity `{s}`")))
}

fn parse_pool(s: &str) -> Result<PoolPolicy> {
    match s {
        "independent" => Ok(PoolPolicy::Independent),
        "shared" => Ok(PoolPolicy::SharedIndices),
        other => Err(TpError::Config(format!("unknown pool policy `{other}`"))),
    }
}

/// Splits text into `(line, key, value)` triples.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| TpError::Config(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(TpError::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        Self::from_pairs(parse_pairs(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Config> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| TpError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Later pairs override earlier ones only through `overrides`; duplicates
    /// inside `pairs` are rejected.
    pub fn from_pairs(pairs: Vec<(usize, String, String)>) -> Result<Config> {
        Self::with_overrides(pairs, Vec::new())
    }

    pub fn with_overrides(pairs: Vec<(usize, String, String)>, overrides: Vec<(String, String)>) -> Result<Config> {
        let mut map = BTreeMap::new();
        for (line, k, v) in pairs {
            if map.insert(k.clone(), (line, v)).is_some() {
                return Err(TpError::Config(format!("line {line}: duplicate key `{k}`")));
            }
        }
        for (k, v) in overrides {
            map.insert(k, (0, v));
        }
        let mut e = Entries { map };

        let input = match e.take::<String>("input")? {
            Some(s) => Some(parse_input(&s)?),
            None => None,
        };
        let layers = match e.take::<String>("layers")? {
            Some(s) => s.split(',').map(LayerDesc::from_str).collect::<Result<Vec<_>>>()?,
            None => vec![
                LayerDesc {
                    kind: LayerKind::Dense { units: 64 },
                    weight_norm: false,
                },
                LayerDesc {
                    kind: LayerKind::Dense { units: 64 },
                    weight_norm: false,
                },
            ],
        };
        let n = layers.len();
        let mut per_layer = |name: &str, default: f64| -> Result<Vec<f64>> {
            let base = e.get(name, default)?;
            let mut v = vec![base; n];
            for (i, slot) in v.iter_mut().enumerate() {
                if let Some(x) = e.take(&format!("{name}.{}", i + 1))? {
                    *slot = x;
                }
            }
            Ok(v)
        };
        let alpha = per_layer("alpha", 0.9)?;
        let beta = per_layer("beta", 0.9)?;
        let v_th = per_layer("v_th", 1.0)?;
        let similarity = parse_similarity(&e.get("similarity", "dot".to_string())?)?;
        let pool_policy = parse_pool(&e.get("pool_policy", "independent".to_string())?)?;
        let cadence: UpdateCadence = e.get::<String>("cadence", "step".into())?.parse()?;
        let seed = e.get("seed", 0u64)?;

        let task_kind = e.get("task", "synth".to_string())?;
        let task = match task_kind.as_str() {
            "synth" => {
                let d = SynthConfig::default();
                TaskSource::Synth {
                    cfg: SynthConfig {
                        num_classes: e.get("synth.classes", d.num_classes)?,
                        units: e.get("synth.units", d.units)?,
                        steps: e.get("synth.steps", d.steps)?,
                        active_fraction: e.get("synth.active_fraction", d.active_fraction)?,
                        rate_hi: e.get("synth.rate_hi", d.rate_hi)?,
                        rate_lo: e.get("synth.rate_lo", d.rate_lo)?,
                        jitter: e.get("synth.jitter", d.jitter)?,
                        samples_per_class: e.get("synth.samples_per_class", d.samples_per_class)?,
                        seed: e.get("synth.seed", seed)?,
                    },
                    test_samples_per_class: e.get("synth.test_samples_per_class", 30)?,
                }
            }
            "order" => {
                let d = OrderConfig::default();
                TaskSource::Order {
                    cfg: OrderConfig {
                        num_classes: e.get("order.classes", d.num_classes)?,
                        groups: e.get("order.groups", d.groups)?,
                        units_per_group: e.get("order.units_per_group", d.units_per_group)?,
                        segment_steps: e.get("order.segment_steps", d.segment_steps)?,
                        rate_hi: e.get("order.rate_hi", d.rate_hi)?,
                        rate_lo: e.get("order.rate_lo", d.rate_lo)?,
                        jitter: e.get("order.jitter", d.jitter)?,
                        seed: e.get("order.seed", seed)?,
                    },
                    samples_per_class: e.get("order.samples_per_class", 60)?,
                    test_samples_per_class: e.get("order.test_samples_per_class", 30)?,
                }
            }
            "files" => TaskSource::Files {
                train: e
                    .take::<PathBuf>("train_data")?
                    .ok_or_else(|| TpError::Config("task=files needs train_data".into()))?,
                test: e.take("test_data")?,
            },
            other => return Err(TpError::Config(format!("unknown task `{other}`"))),
        };

        let cfg = Config {
            input,
            classes: e.take("classes")?,
            alpha,
            beta,
            v_th,
            surrogate_scale: e.get("surrogate_scale", 1.0)?,
            eta: e.get("eta", 1e-4)?,
            readout_eta: e.get("readout_eta", 1e-3)?,
            similarity,
            learn_target_propagator: e.get("learn_target_propagator", false)?,
            learn_recurrent: e.get("learn_recurrent", true)?,
            pool_policy,
            label_beta: e.take("label_beta")?,
            batch_size: e.get("batch_size", 8)?,
            epochs: e.get("epochs", 10)?,
            seed,
            eval_every: e.get("eval_every", 1)?,
            cadence,
            deterministic: e.get("deterministic", true)?,
            silhouette: e.get("silhouette", false)?,
            augment_pad: e.get("augment_pad", 0)?,
            finetune: FinetuneOptions {
                k: e.get("finetune.k", usize::MAX)?,
                support_fraction: e.get("finetune.support_fraction", 0.5)?,
                shift: e.get("finetune.shift", 0.5)?,
                user_samples_per_class: e.get("finetune.user_samples_per_class", 40)?,
                shift_seed: e.get("finetune.shift_seed", seed.wrapping_add(11))?,
                data: e.take("finetune.data")?,
            },
            cost: CostOptions {
                batch: e.get("cost.batch", 64)?,
                steps: e.get("cost.steps", 100)?,
                tess_update_step: e.get("cost.tess_update_step", 0)?,
            },
            layers,
            task,
        };
        if let Some((k, (line, _))) = e.map.into_iter().next() {
            return Err(TpError::Config(format!("{}: unknown key `{k}`", origin(line))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(TpError::Config("at least one layer is required".into()));
        }
        for (name, vals) in [("alpha", &self.alpha), ("beta", &self.beta)] {
            if let Some(x) = vals.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                return Err(TpError::Config(format!("{name} must lie in [0,1], got {x}")));
            }
        }
        if let Some(b) = self.label_beta.filter(|b| !(0.0..=1.0).contains(b)) {
            return Err(TpError::Config(format!("label_beta must lie in [0,1], got {b}")));
        }
        if let Some(x) = self.v_th.iter().find(|x| !(**x > 0.0)) {
            return Err(TpError::Config(format!("v_th must be positive, got {x}")));
        }
        if !(self.eta > 0.0) || !(self.readout_eta > 0.0) || !(self.surrogate_scale > 0.0) {
            return Err(TpError::Config("eta, readout_eta and surrogate_scale must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(TpError::ContrastiveBatch { batch: self.batch_size });
        }
        Ok(())
    }

    /// Input shape and class count implied by a synthetic task.
    fn task_shape(&self) -> Option<(InputShape, usize)> {
        match &self.task {
            TaskSource::Synth { cfg, .. } => Some((InputShape::Flat(cfg.units), cfg.num_classes)),
            TaskSource::Order { cfg, .. } => Some((InputShape::Flat(cfg.groups * cfg.units_per_group), cfg.num_classes)),
            TaskSource::Files { .. } => None,
        }
    }

    fn resolve_shape(&self, data: Option<&FrameTensor>) -> Result<(InputShape, usize)> {
        let implied = data.map(|d| (InputShape::Flat(d.features()), d.num_classes)).or(self.task_shape());
        let input = self.input.or(implied.map(|i| i.0));
        let classes = self.classes.or(implied.map(|i| i.1));
        match (input, classes) {
            (Some(i), Some(c)) => {
                if let Some(d) = data {
                    if i.features() != d.features() || c != d.num_classes {
                        return Err(TpError::Config(format!(
                            "config expects {} features and {c} classes, data has {} and {}",
                            i.features(),
                            d.features(),
                            d.num_classes
                        )));
                    }
                }
                Ok((i, c))
            }
            _ => Err(TpError::Config("input and classes must be given for file data".into())),
        }
    }

    pub fn network_spec<T: Scalar>(&self, data: Option<&FrameTensor>) -> Result<NetworkSpec<T>> {
        let (input, classes) = self.resolve_shape(data)?;
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, d)| LayerSpec {
                kind: d.kind,
                lif: LifParams {
                    alpha: T::of(self.alpha[i]),
                    v_th: T::of(self.v_th[i]),
                    surrogate_scale: T::of(self.surrogate_scale),
                },
                beta: T::of(self.beta[i]),
                weight_norm: d.weight_norm,
            })
            .collect();
        Ok(NetworkSpec { input, layers, classes })
    }

    pub fn rule_config<T: Scalar>(&self) -> RuleConfig<T> {
        RuleConfig {
            eta: T::of(self.eta),
            similarity: self.similarity,
            learn_target_propagator: self.learn_target_propagator,
            learn_recurrent: self.learn_recurrent,
            pool_policy: self.pool_policy,
            label_beta: T::of(self.label_beta.unwrap_or(self.beta[0])),
        }
    }

    /// Initialized network with this config's rule settings.
    pub fn build_network<T: Scalar>(&self, data: Option<&FrameTensor>) -> Result<TpNetwork<T>> {
        let mut net = init_network(&self.network_spec(data)?, self.seed)?;
        net.rule = self.rule_config();
        Ok(net)
    }

    pub fn train_config<T: Scalar>(&self) -> TrainConfig<T> {
        let augment = match (self.augment_pad, self.input) {
            (pad, Some(InputShape::Image { channels, height, width })) if pad > 0 => Some(CropAugment {
                channels,
                height,
                width,
                pad,
            }),
            _ => None,
        };
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            readout_eta: T::of(self.readout_eta),
            seed: self.seed,
            eval_every: self.eval_every,
            cadence: self.cadence,
            deterministic: self.deterministic,
            augment,
            silhouette: self.silhouette,
        }
    }

    /// Synthetic task template, when the task is synthetic.
    pub fn synth_template(&self) -> Result<Option<SynthTask>> {
        match &self.task {
            TaskSource::Synth { cfg, .. } => SynthTask::rate_coded(cfg).map(Some),
            TaskSource::Order { cfg, .. } => temporal_order_task(cfg).map(Some),
            TaskSource::Files { .. } => Ok(None),
        }
    }

    /// Training and optional test data.
    pub fn load_task(&self) -> Result<(FrameTensor, Option<FrameTensor>)> {
        match &self.task {
            TaskSource::Synth {
                cfg,
                test_samples_per_class,
            } => {
                let train = synth_task(cfg)?;
                let test = SynthTask::rate_coded(cfg)?.generate(*test_samples_per_class, cfg.seed.wrapping_add(2));
                Ok((train, Some(test)))
            }
            TaskSource::Order {
                cfg,
                samples_per_class,
                test_samples_per_class,
            } => {
                let task = temporal_order_task(cfg)?;
                Ok((
                    task.generate(*samples_per_class, cfg.seed.wrapping_add(1)),
                    Some(task.generate(*test_samples_per_class, cfg.seed.wrapping_add(2))),
                ))
            }
            TaskSource::Files { train, test } => {
                let tr = load_container(train)?;
                let te = test.as_ref().map(load_container).transpose()?;
                Ok((tr, te))
            }
        }
    }

    /// Layer widths for the cost model, taken from the built architecture.
    pub fn arch_spec(&self) -> Result<ArchSpec> {
        let net: TpNetwork<f32> = init_network(&self.network_spec(None)?, 0)?;
        let spec = ArchSpec {
            tess_update_step: self.cost.tess_update_step,
            ..ArchSpec::from_network(&net, self.cost.batch, self.cost.steps)
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = Config::parse("").unwrap();
        assert_eq!(c.layers.len(), 2);
        assert_eq!(c.eta, 1e-4);
        assert_eq!(c.batch_size, 8);
        assert_eq!(c.similarity, Similarity::Dot);
        let spec: NetworkSpec<f32> = c.network_spec(None).unwrap();
        assert_eq!(spec.input, InputShape::Flat(100));
        assert_eq!(spec.classes, 10);
    }

    #[test]
    fn full_grammar() {
        let text = "\
# a conv stack
input = 2x8x8
layers = conv:4:3:pool:wn, rdense:16:diag, dense:10:wn
classes = 5
v_th = 0.5
beta.2 = 0.95   # only the recurrent layer
similarity = neg_euclidean
learn_target_propagator = true
pool_policy = shared
cadence = sequence
task = files
train_data = /tmp/x.bin
";
        let c = Config::parse(text).unwrap();
        assert_eq!(
            c.layers[0],
            LayerDesc {
                kind: LayerKind::Conv {
                    channels: 4,
                    kernel: 3,
                    pool: true
                },
                weight_norm: true
            }
        );
        assert_eq!(
            c.layers[1].kind,
            LayerKind::Recurrent {
                units: 16,
                recurrence: Recurrence::Diagonal
            }
        );
        assert!(c.layers[2].weight_norm);
        assert_eq!(c.beta, vec![0.9, 0.95, 0.9]);
        assert_eq!(c.v_th, vec![0.5; 3]);
        assert_eq!(c.cadence, UpdateCadence::Sequence);
        assert_eq!(c.pool_policy, PoolPolicy::SharedIndices);
        let spec = c.arch_spec().unwrap();
        assert_eq!(spec.widths, vec![4 * 8 * 8, 16, 10]);
    }

    #[test]
    fn errors_are_config_errors() {
        for bad in [
            "nonsense",
            "unknown_key = 3",
            "epochs = 1\nepochs = 2",
            "layers = dense:0",
            "layers = conv:4",
            "layers = dense:4:xx",
            "input = 3x4",
            "alpha = 1.5",
            "similarity = cosine",
            "task = mnist",
            "task = files",
            "eta = -1",
            "epochs = many",
        ] {
            let err = Config::parse(bad).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{bad}: {err}");
        }
        assert!(matches!(
            Config::parse("batch_size = 1"),
            Err(TpError::ContrastiveBatch { batch: 1 })
        ));
    }

    #[test]
    fn overrides_replace_values() {
        let c = Config::with_overrides(parse_pairs("seed = 1").unwrap(), vec![("seed".into(), "9".into())]).unwrap();
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn shape_mismatch_with_data() {
        let c = Config::parse("input = 50\nclasses = 10").unwrap();
        let (train, _) = Config::parse("").unwrap().load_task().unwrap();
        assert!(c.build_network::<f32>(Some(&train)).is_err());
        let ok = Config::parse("").unwrap().build_network::<f32>(Some(&train)).unwrap();
        assert_eq!(ok.classes, 10);
    }
}

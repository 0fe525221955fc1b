//! Shared task and network setups for the integration tests.

use traceprop::data::{synth_task, temporal_order_task, FrameTensor, OrderConfig, SynthConfig, SynthTask};
use traceprop::layer::Recurrence;
use traceprop::train::TrainConfig;
use traceprop::{init_network, InputShape, LayerKind, LayerSpec, Network32, NetworkSpec};

pub const V_TH: f32 = 0.25;

/// 10 classes, 100 units, 20 steps, jitter 0.05.
pub fn desk_task() -> (SynthTask, FrameTensor, FrameTensor) {
    let cfg = SynthConfig {
        seed: 7,
        ..SynthConfig::default()
    };
    let task = SynthTask::rate_coded(&cfg).unwrap();
    let train = task.generate(100, 8);
    let test = task.generate(30, 9);
    (task, train, test)
}

pub fn desk_net(seed: u64) -> Network32 {
    let layer = || LayerSpec::dense(64).with_dynamics(0.9, 0.9, V_TH);
    let spec = NetworkSpec {
        input: InputShape::Flat(100),
        layers: vec![layer(), layer()],
        classes: 10,
    };
    init_network(&spec, seed).unwrap()
}

pub fn train_config(epochs: usize, seed: u64) -> TrainConfig<f32> {
    TrainConfig {
        epochs,
        batch_size: 8,
        readout_eta: 1e-3,
        seed,
        eval_every: 1,
        deterministic: true,
        ..TrainConfig::default()
    }
}

/// Six orders of three unit groups, 15 steps.
pub fn order_task() -> (FrameTensor, FrameTensor) {
    let task = temporal_order_task(&OrderConfig {
        seed: 3,
        ..OrderConfig::default()
    })
    .unwrap();
    (task.generate(60, 8), task.generate(30, 9))
}

pub fn order_net(seed: u64) -> Network32 {
    let mut rec = LayerSpec::dense(0).with_dynamics(0.9, 0.9, V_TH);
    rec.kind = LayerKind::Recurrent {
        units: 64,
        recurrence: Recurrence::Full,
    };
    let spec = NetworkSpec {
        input: InputShape::Flat(30),
        layers: vec![rec, LayerSpec::dense(64).with_dynamics(0.9, 0.9, V_TH)],
        classes: 6,
    };
    init_network(&spec, seed).unwrap()
}

pub fn small_synth(seed: u64) -> FrameTensor {
    synth_task(&SynthConfig {
        num_classes: 4,
        units: 30,
        steps: 8,
        samples_per_class: 8,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

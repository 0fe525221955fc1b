//! Two samples, two classes, one layer of three neurons, two steps, in f64.
//!
//! Every exactly representable intermediate (potentials, spikes, traces,
//! logits) is written out below from hand arithmetic. Quantities that involve
//! `exp` or `pi` are recomputed here with plain scalar code from those
//! constants and compared bit for bit with the engine.

use ndarray::{array, Array2};
use traceprop::network::one_hot;
use traceprop::{init_network, InputShape, LayerSpec, Network64, NetworkSpec, State64};

const ETA: f64 = 1e-4;

fn build() -> Network64 {
    let spec = NetworkSpec {
        input: InputShape::Flat(2),
        layers: vec![LayerSpec::dense(3).with_dynamics(0.5, 0.5, 1.0)],
        classes: 2,
    };
    let mut net = init_network(&spec, 0).unwrap();
    net.layers[0].weights = array![[1.5, 0.5, -0.25], [0.25, 1.25, 1.0]];
    net.target_propagator = array![[1.25, 0.0, 0.5], [0.0, 1.0, 1.5]];
    net.rule.eta = ETA;
    net
}

fn inputs() -> [Array2<f64>; 2] {
    [array![[1.0, 0.0], [0.0, 1.0]], array![[1.0, 1.0], [1.0, 0.0]]]
}

fn bits(a: &Array2<f64>) -> Vec<u64> {
    a.iter().map(|x| x.to_bits()).collect()
}

fn assert_bits(what: &str, engine: &Array2<f64>, expected: &Array2<f64>) {
    assert_eq!(engine.dim(), expected.dim(), "{what}: shape");
    assert_eq!(bits(engine), bits(expected), "{what}:\nengine   {engine:?}\nexpected {expected:?}");
}

fn softmax_row(r: [f64; 2]) -> [f64; 2] {
    let m = r[0].max(r[1]);
    let e0 = (r[0] - m).exp();
    let e1 = (r[1] - m).exp();
    let sum = 0.0 + e0 + e1;
    [e0 / sum, e1 / sum]
}

fn softmax(z: &Array2<f64>) -> Array2<f64> {
    let r0 = softmax_row([z[[0, 0]], z[[0, 1]]]);
    let r1 = softmax_row([z[[1, 0]], z[[1, 1]]]);
    array![[r0[0], r0[1]], [r1[0], r1[1]]]
}

fn theta_prime(v: f64) -> f64 {
    let x = std::f64::consts::FRAC_PI_2 * 1.0 * (v - 1.0);
    1.0 / (1.0 + x * x)
}

/// `G[b, j] = (sum_k M[b, k] eps_tilde[k, j]) * theta'(v[b, j]) / 2`.
fn post_factor(m: &Array2<f64>, eps_tilde: &Array2<f64>, v: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_fn((2, 3), |(b, j)| {
        let acc = 0.0 + m[[b, 0]] * eps_tilde[[0, j]] + m[[b, 1]] * eps_tilde[[1, j]];
        acc * theta_prime(v[[b, j]]) * 0.5
    })
}

/// `x^T G`, summed over the batch in order and skipping silent inputs.
fn outer(x: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((2, 3));
    for b in 0..2 {
        for i in 0..2 {
            if x[[b, i]] != 0.0 {
                for j in 0..3 {
                    out[[i, j]] += x[[b, i]] * g[[b, j]];
                }
            }
        }
    }
    out
}

fn step(net: &mut Network64, state: &mut State64, x: &Array2<f64>, c: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    net.forward_step(state, x.view(), Some(c.view())).unwrap();
    let sig = net.layer_signal(state, 0).unwrap();
    let g = net.layer_gradient(state, 0, &sig).unwrap();
    assert!(g.target.iter().all(|&t| t == 0.0));
    assert!(g.propagator.is_none());
    net.apply_layer(0, &g, ETA).unwrap();
    (sig.z, sig.y, g.input)
}

/// Panics on the first intermediate that differs from the hand trace.
pub fn check_algorithm_trace() {
    let mut net = build();
    let mut state = net.new_state(2);
    let c: Array2<f64> = one_hot(&[0, 1], 2);
    let [x1, x2] = inputs();
    let w0 = net.layers[0].weights.clone();

    // step 1
    let (z1, y1, dw1) = step(&mut net, &mut state, &x1, &c);
    let ls = &state.layers[0];
    let v1 = array![[1.5, 0.5, -0.25], [0.25, 1.25, 1.0]];
    assert_bits("v1", &ls.input.v, &v1);
    assert_bits("s1", &ls.input.s_prev, &array![[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]]);
    assert_bits("v~1", &ls.target.v, &array![[1.25, 0.0, 0.5], [0.0, 1.0, 1.5]]);
    assert_bits("s~1", &ls.target.s_prev, &array![[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]]);
    let eps_tilde1 = array![[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]];
    assert_bits("eps1", &ls.traces.eps, &array![[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]]);
    assert_bits("eps~1", &ls.traces.eps_tilde, &eps_tilde1);
    let z1_hand = array![[1.0, 0.0], [0.0, 2.0]];
    assert_bits("z1", &z1, &z1_hand);
    // label trace [[1,0],[0,1]] -> similarity [[1,0],[0,1]]
    let y1_ref = softmax(&array![[1.0, 0.0], [0.0, 1.0]]);
    assert_bits("y1", &y1, &y1_ref);
    let m1 = softmax(&z1_hand) - &y1_ref;
    assert_eq!(m1.row(0).to_vec(), vec![0.0, 0.0]);
    let dw1_ref = outer(&x1, &post_factor(&m1, &eps_tilde1, &v1));
    assert_bits("dW1", &dw1, &dw1_ref);
    assert_eq!(dw1_ref.row(0).to_vec(), vec![0.0; 3]);
    let w1_ref = Array2::from_shape_fn((2, 3), |(i, j)| w0[[i, j]] - ETA * dw1_ref[[i, j]]);
    assert_bits("W after step 1", &net.layers[0].weights, &w1_ref);

    // step 2
    let (z2, y2, dw2) = step(&mut net, &mut state, &x2, &c);
    let ls = &state.layers[0];
    // sample 0 sees both inputs through the updated weights; sample 1 only the untouched first row
    let v2_0: Vec<f64> = (0..3)
        .map(|j| 0.5 * v1[[0, j]] + (w1_ref[[0, j]] + w1_ref[[1, j]]) - [1.0, 0.0, 0.0][j] * 1.0)
        .collect();
    let v2 = array![[v2_0[0], v2_0[1], v2_0[2]], [1.625, 0.125, -0.75]];
    assert_bits("v2", &ls.input.v, &v2);
    assert!((v2[[0, 0]] - 1.5).abs() < 1e-3 && (v2[[0, 1]] - 2.0).abs() < 1e-3 && (v2[[0, 2]] - 0.625).abs() < 1e-3);
    assert_bits("s2", &ls.input.s_prev, &array![[1.0, 1.0, 0.0], [1.0, 0.0, 0.0]]);
    assert_bits("v~2", &ls.target.v, &array![[0.875, 0.0, 0.75], [0.0, 0.5, 1.25]]);
    assert_bits("s~2", &ls.target.s_prev, &array![[0.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
    let eps_tilde2 = array![[0.5, 0.0, 0.0], [0.0, 0.5, 1.5]];
    assert_bits("eps2", &ls.traces.eps, &array![[1.5, 1.0, 0.0], [1.0, 0.5, 0.5]]);
    assert_bits("eps~2", &ls.traces.eps_tilde, &eps_tilde2);
    let z2_hand = array![[0.75, 0.5], [0.5, 1.0]];
    assert_bits("z2", &z2, &z2_hand);
    // label trace 1.5*c -> similarity [[2.25,0],[0,2.25]]
    let y2_ref = softmax(&array![[2.25, 0.0], [0.0, 2.25]]);
    assert_bits("y2", &y2, &y2_ref);
    let m2 = softmax(&z2_hand) - &y2_ref;
    let dw2_ref = outer(&x2, &post_factor(&m2, &eps_tilde2, &v2));
    assert_bits("dW2", &dw2, &dw2_ref);
    let w2_ref = Array2::from_shape_fn((2, 3), |(i, j)| w1_ref[[i, j]] - ETA * dw2_ref[[i, j]]);
    assert_bits("W after step 2", &net.layers[0].weights, &w2_ref);

    // the fused training step takes exactly the same path
    let mut fused = build();
    let mut fstate = fused.new_state(2);
    for x in &inputs() {
        fused.train_step(&mut fstate, x.view(), c.view(), false).unwrap();
    }
    assert_bits("fused W", &fused.layers[0].weights, &w2_ref);
}

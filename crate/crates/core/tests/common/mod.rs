#![allow(dead_code)]

pub mod oracles;

use lmft::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;

/// Fourth-order central difference from `f` at offsets -2h, -h, h, 2h.
fn central(mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(-2.0 * STEP) - 8.0 * f(-STEP) + 8.0 * f(STEP) - f(2.0 * STEP)) / (12.0 * STEP)
}
pub const REL_TOL: f64 = 1e-4;
/// Elements whose analytic gradient is below this are compared absolutely,
/// with this same value as the tolerance.
pub const ABS_TOL: f64 = 1e-8;

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Error in units where `REL_TOL` is the pass mark for both regimes.
fn error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if analytic.abs() < ABS_TOL {
        diff / ABS_TOL * REL_TOL
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Reduces any output to a scalar with fixed random weights, so every output
/// element contributes to the checked gradient.
pub fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    let w = random_tensor(&shape, &mut rng(seed), -1.0, 1.0);
    let w = g.constant(w);
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

/// Largest relative error between reverse-mode gradients and central
/// differences over every input element.
pub fn check_inputs(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&mut g, &vars);
        g.value(loss).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[k].shape());
        let analytic = grads.get(*v).unwrap_or(&zeros).clone();
        for i in 0..inputs[k].len() {
            let numeric = central(|h| {
                let mut moved = inputs.to_vec();
                moved[k].data_mut()[i] += h;
                eval(&moved)
            });
            worst = worst.max(error(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Same check for parameters in a store; `f` builds the loss from the store.
pub fn check_params(store: &mut ParamStore<f64>, ids: &[ParamId], f: impl Fn(&ParamStore<f64>, &mut Graph<f64>) -> Var) -> f64 {
    let mut g = Graph::new();
    let loss = f(store, &mut g);
    let grads = g.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .map(|&id| grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.value(id).shape())))
        .collect();
    let mut worst = 0.0f64;
    for (k, &id) in ids.iter().enumerate() {
        for i in 0..store.value(id).len() {
            let orig = store.value(id).data()[i];
            let numeric = central(|h| {
                store.value_mut(id).data_mut()[i] = orig + h;
                let mut g = Graph::new();
                let l = f(store, &mut g);
                g.value(l).item()
            });
            store.value_mut(id).data_mut()[i] = orig;
            worst = worst.max(error(analytic[k].data()[i], numeric));
        }
    }
    worst
}

/// `(name, worst relative error)` for every differentiable graph op.
pub fn primitive_checks() -> Vec<(&'static str, f64)> {
    let mut r = rng(7);
    let mut out = Vec::new();
    let a = random_tensor(&[3, 4], &mut r, -1.0, 1.0);
    let b = random_tensor(&[4, 2], &mut r, -1.0, 1.0);
    let c = random_tensor(&[5, 4], &mut r, -1.0, 1.0);
    let row = random_tensor(&[4], &mut r, -1.0, 1.0);
    let same = random_tensor(&[3, 4], &mut r, -1.0, 1.0);
    // keep relu inputs away from the kink
    let away: Vec<f64> = a.data().iter().map(|v| if v.abs() < 0.05 { v + 0.1 } else { *v }).collect();
    let away = Tensor::from_f64(&[3, 4], &away).unwrap();
    let seq = random_tensor(&[4, 3, 2], &mut r, -1.0, 1.0);
    let table = random_tensor(&[6, 3], &mut r, -1.0, 1.0);

    out.push(("matmul", check_inputs(&[a.clone(), b.clone()], |g, v| {
        let o = g.matmul(v[0], v[1]).unwrap();
        weighted_sum(g, o, 1)
    })));
    out.push(("matmul_bt", check_inputs(&[a.clone(), c.clone()], |g, v| {
        let o = g.matmul_bt(v[0], v[1]).unwrap();
        weighted_sum(g, o, 2)
    })));
    out.push(("add", check_inputs(&[a.clone(), same.clone()], |g, v| {
        let o = g.add(v[0], v[1]).unwrap();
        weighted_sum(g, o, 3)
    })));
    out.push(("add_broadcast", check_inputs(&[a.clone(), row.clone()], |g, v| {
        let o = g.add(v[0], v[1]).unwrap();
        weighted_sum(g, o, 4)
    })));
    out.push(("sub", check_inputs(&[a.clone(), row.clone()], |g, v| {
        let o = g.sub(v[0], v[1]).unwrap();
        weighted_sum(g, o, 5)
    })));
    out.push(("mul", check_inputs(&[a.clone(), same.clone()], |g, v| {
        let o = g.mul(v[0], v[1]).unwrap();
        weighted_sum(g, o, 6)
    })));
    out.push(("mul_broadcast", check_inputs(&[a.clone(), row.clone()], |g, v| {
        let o = g.mul(v[0], v[1]).unwrap();
        weighted_sum(g, o, 7)
    })));
    out.push(("scale", check_inputs(std::slice::from_ref(&a), |g, v| {
        let o = g.scale(v[0], -1.7);
        weighted_sum(g, o, 8)
    })));
    out.push(("sigmoid", check_inputs(std::slice::from_ref(&a), |g, v| {
        let o = g.sigmoid(v[0]);
        weighted_sum(g, o, 9)
    })));
    out.push(("tanh", check_inputs(std::slice::from_ref(&a), |g, v| {
        let o = g.tanh(v[0]);
        weighted_sum(g, o, 10)
    })));
    out.push(("relu", check_inputs(&[away], |g, v| {
        let o = g.relu(v[0]);
        weighted_sum(g, o, 11)
    })));
    out.push(("reshape", check_inputs(std::slice::from_ref(&a), |g, v| {
        let o = g.reshape(v[0], &[2, 6]).unwrap();
        weighted_sum(g, o, 12)
    })));
    out.push(("concat", check_inputs(&[a.clone(), same.clone()], |g, v| {
        let o0 = g.concat(&[v[0], v[1]], 0).unwrap();
        let o1 = g.concat(&[v[0], v[1]], 1).unwrap();
        let s0 = weighted_sum(g, o0, 13);
        let s1 = weighted_sum(g, o1, 14);
        g.add(s0, s1).unwrap()
    })));
    out.push(("slice", check_inputs(std::slice::from_ref(&a), |g, v| {
        let o0 = g.slice(v[0], 0, 1, 3).unwrap();
        let o1 = g.slice(v[0], 1, 1, 3).unwrap();
        let s0 = weighted_sum(g, o0, 15);
        let s1 = weighted_sum(g, o1, 16);
        g.add(s0, s1).unwrap()
    })));
    out.push(("embedding", check_inputs(&[table], |g, v| {
        let o = g.embedding(v[0], &[1, 4, 1, 0, 5]).unwrap();
        weighted_sum(g, o, 17)
    })));
    out.push(("softmax", check_inputs(std::slice::from_ref(&a), |g, v| {
        let o = g.softmax(v[0]);
        weighted_sum(g, o, 18)
    })));
    out.push(("log_softmax", check_inputs(std::slice::from_ref(&a), |g, v| {
        let o = g.log_softmax(v[0]);
        weighted_sum(g, o, 19)
    })));
    out.push(("cross_entropy", check_inputs(std::slice::from_ref(&a), |g, v| g.cross_entropy(v[0], &[3, 0, 2]).unwrap())));
    let targets = Tensor::from_f64(&[3, 4], &[1., 0., 0., 1., 0., 0., 1., 1., 1., 1., 0., 0.]).unwrap();
    out.push(("bce_with_logits", check_inputs(std::slice::from_ref(&a), |g, v| g.bce_with_logits(v[0], &targets).unwrap())));
    let lengths = [4, 2, 1];
    out.push(("max_over_time", check_inputs(std::slice::from_ref(&seq), |g, v| {
        let o = g.max_over_time(v[0], &lengths).unwrap();
        weighted_sum(g, o, 20)
    })));
    out.push(("mean_over_time", check_inputs(std::slice::from_ref(&seq), |g, v| {
        let o = g.mean_over_time(v[0], &lengths).unwrap();
        weighted_sum(g, o, 21)
    })));
    out.push(("last_step", check_inputs(std::slice::from_ref(&seq), |g, v| {
        let o = g.last_step(v[0], &lengths).unwrap();
        weighted_sum(g, o, 22)
    })));
    let mask = Tensor::from_f64(&[3, 2], &[1., 0., 1., 1., 0., 1.]).unwrap();
    out.push(("dropout", check_inputs(&[seq], |g, v| {
        let o = g.dropout(v[0], &mask, 0.6).unwrap();
        weighted_sum(g, o, 23)
    })));
    out.push(("sum", check_inputs(&[a], |g, v| {
        let s = g.sum(v[0]);
        g.scale(s, 0.3)
    })));
    out
}

pub fn tiny_lm_config() -> lmft::awd_lstm::LMConfig {
    lmft::awd_lstm::LMConfig {
        vocab_size: 20,
        embedding_dim: 8,
        hidden_dim: 12,
        n_layers: 3,
        dropout: lmft::awd_lstm::DropoutRates::from_master(0.3),
        bptt_len: 5,
        batch_size: 2,
    }
}

/// Full language model with every dropout site active; masks are re-drawn
/// from the same seed on each evaluation so the function is fixed.
pub fn tiny_lm_check() -> f64 {
    use lmft::awd_lstm::{AwdLstm, HiddenState, Mode};
    let cfg = tiny_lm_config();
    let model = AwdLstm::<f64>::new(cfg.clone(), &mut rng(11)).unwrap();
    let tokens: Vec<u32> = (0..10).map(|i| ((i * 7 + 3) % 20) as u32).collect();
    let targets: Vec<usize> = (0..10).map(|i| (i * 3 + 1) % 20).collect();
    let state = {
        let mut s = HiddenState::<f64>::zeros(&cfg, 2);
        let mut r = rng(12);
        for (h, c) in &mut s.layers {
            *h = random_tensor(h.shape(), &mut r, -0.5, 0.5);
            *c = random_tensor(c.shape(), &mut r, -0.5, 0.5);
        }
        s
    };
    let ids: Vec<ParamId> = model.store().ids().collect();
    let mut store = model.store().clone();
    check_params(&mut store, &ids, |s, g| {
        let m = AwdLstm::from_store(cfg.clone(), s.clone()).unwrap();
        let out = m.forward(g, &tokens, 5, &state, Mode::Train, &mut rng(13)).unwrap();
        g.cross_entropy(out.logits, &targets).unwrap()
    })
}

/// Classifier head and pooling on top of the tiny encoder, both task kinds.
const HEAD_SCALE: f64 = 3.0;

pub fn tiny_head_check() -> f64 {
    use lmft::awd_lstm::{AwdLstm, Mode};
    use lmft::classifier::{HeadConfig, TextClassifier};
    use lmft::corpus::TaskKind;
    let cfg = tiny_lm_config();
    let head = HeadConfig {
        hidden: 5,
        dropout: 0.1,
        max_len: 400,
    };
    let batch: Vec<Vec<u32>> = vec![vec![2, 5, 9, 3], vec![2, 7, 3], vec![2, 11, 12, 13, 14, 3]];
    let mut worst = 0.0f64;
    for (kind, labels) in [
        (TaskKind::Binary, vec!["a".to_string(), "b".to_string()]),
        (TaskKind::Multilabel, vec!["x".to_string(), "y".to_string(), "z".to_string()]),
    ] {
        let mut r = rng(21);
        let lm = AwdLstm::<f64>::new(cfg.clone(), &mut r).unwrap();
        let clf = TextClassifier::new(lm, head, kind, labels.clone(), &mut r).unwrap();
        let ids: Vec<ParamId> = clf.store().ids().collect();
        let mut store = clf.store().clone();
        // larger weights keep ReLU inputs and pooled maxima away from their kinks
        for &id in &ids {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v *= HEAD_SCALE);
        }
        let targets = Tensor::from_f64(&[3, 3], &[1., 0., 1., 0., 0., 1., 1., 1., 0.]).unwrap();
        let e = check_params(&mut store, &ids, |s, g| {
            let c = TextClassifier::from_store(cfg.clone(), s.clone(), head, kind, labels.clone()).unwrap();
            let refs: Vec<&[u32]> = batch.iter().map(|b| b.as_slice()).collect();
            let logits = c.forward(g, &refs, Mode::Train, &mut rng(22)).unwrap();
            match kind {
                TaskKind::Binary => g.cross_entropy(logits, &[1, 0, 1]).unwrap(),
                TaskKind::Multilabel => g.bce_with_logits(logits, &targets).unwrap(),
            }
        });
        worst = worst.max(e);
    }
    worst
}

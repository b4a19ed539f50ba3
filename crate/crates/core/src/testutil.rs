//! Finite-difference oracle shared by the unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Reduces `y` to a scalar with fixed pseudo-random weights so that every
/// output element receives a distinct upstream gradient.
pub fn probe<'t>(y: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let shape = y.shape();
    let w = y.tape().constant(randn(&shape, 9_999));
    Ok(y.mul(w)?.sum())
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every coordinate of every input; returns the worst relative error.
pub fn fd_max_rel_err<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let eval = |i: usize, j: usize, delta: f64| {
        let mut ins = inputs.to_vec();
        ins[i].data_mut()[j] += delta;
        let tape = Tape::new();
        let vars: Vec<_> = ins.into_iter().map(|t| tape.leaf(t, false)).collect();
        let v = f(&tape, &vars).unwrap().value().item();
        v
    };
    let mut worst = 0.0f64;
    for (i, inp) in inputs.iter().enumerate() {
        let g = grads
            .wrt(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inp.shape()));
        for j in 0..inp.numel() {
            let fd = (eval(i, j, h) - eval(i, j, -h)) / (2.0 * h);
            worst = worst.max(rel_err(g.data()[j], fd));
        }
    }
    worst
}

/// Central differences over every trainable coordinate of `store` (or the
/// given subset) against the tape's parameter gradients.
pub fn fd_params_max_rel_err<F>(
    store: &crate::param::ParamStore<f64>,
    ids: Option<&[crate::param::ParamId]>,
    h: f64,
    f: F,
) -> f64
where
    F: for<'t> Fn(&crate::nn::Ctx<'t, f64>) -> Result<Var<'t, f64>>,
{
    use crate::nn::{Ctx, Mode};
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, Mode::Eval);
    let loss = f(&ctx).unwrap();
    let grads = tape.backward(loss).unwrap();
    let ids = ids.map(<[_]>::to_vec).unwrap_or_else(|| store.trainable_ids());
    let mut work = store.clone();
    let mut eval = |id, j: usize, delta: f64| {
        let orig = work.value(id).data()[j];
        work.get_mut(id).value.data_mut()[j] = orig + delta;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &work, Mode::Eval);
        let v = f(&ctx).unwrap().value().item();
        work.get_mut(id).value.data_mut()[j] = orig;
        v
    };
    let mut worst = 0.0f64;
    for id in ids {
        let n = store.value(id).numel();
        let g = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        for j in 0..n {
            let fd = (eval(id, j, h) - eval(id, j, -h)) / (2.0 * h);
            worst = worst.max(rel_err(g.data()[j], fd));
        }
    }
    worst
}

/// Input-gradient check for functions that also read parameters.
pub fn fd_inputs_max_rel_err<F>(
    store: &crate::param::ParamStore<f64>,
    inputs: &[Tensor<f64>],
    h: f64,
    f: F,
) -> f64
where
    F: for<'t> Fn(&crate::nn::Ctx<'t, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    use crate::nn::{Ctx, Mode};
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, Mode::Eval);
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&ctx, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let eval = |i: usize, j: usize, delta: f64| {
        let mut ins = inputs.to_vec();
        ins[i].data_mut()[j] += delta;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, Mode::Eval);
        let vars: Vec<_> = ins.into_iter().map(|t| tape.leaf(t, false)).collect();
        let v = f(&ctx, &vars).unwrap().value().item();
        v
    };
    let mut worst = 0.0f64;
    for (i, inp) in inputs.iter().enumerate() {
        let g = grads
            .wrt(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inp.shape()));
        for j in 0..inp.numel() {
            let fd = (eval(i, j, h) - eval(i, j, -h)) / (2.0 * h);
            worst = worst.max(rel_err(g.data()[j], fd));
        }
    }
    worst
}

/// A model small enough to train in a unit test.
pub fn tiny_cfg() -> crate::config::ModelConfig {
    crate::config::ModelConfig {
        seq_len: 2,
        hidden_channels: 3,
        embed_dim: 4,
        heads: vec![1, 2, 2],
        window_size: 2,
        mlp_ratio: 2,
        flat_hidden: 4,
        flat_decode_channels: 2,
        ..crate::config::ModelConfig::default()
    }
}

/// Synthetic wake data on a 6x6 grid with 10 turbines, 30 min horizon.
pub fn tiny_data(steps: usize) -> (crate::data::TurbineLayout, crate::data::PreparedData) {
    use crate::data::{synthesize_wake_dataset, PreparedData, TurbineLayout, WakeConfig};
    let layout = TurbineLayout::random(6, 6, 10, 3).unwrap();
    let cfg = WakeConfig {
        steps,
        seed: 1,
        ..WakeConfig::default()
    };
    let seqs = synthesize_wake_dataset(&layout, &cfg, 30, 2).unwrap();
    (layout, PreparedData::new(&seqs).unwrap())
}

pub fn tiny_train_cfg() -> crate::config::TrainConfig {
    crate::config::TrainConfig {
        batch_size: 8,
        lr: 3e-3,
        max_epochs: 3,
        ..crate::config::TrainConfig::default()
    }
}

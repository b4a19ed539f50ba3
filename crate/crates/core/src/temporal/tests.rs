use super::*;
use crate::autograd::Tape;
use crate::nn::Mode;
use crate::testutil::{fd_inputs_max_rel_err, fd_params_max_rel_err, probe, randn, rng};

fn gru(store: &mut ParamStore<f64>, c_in: usize, hidden: usize, name: &str) -> Cell {
    Cell::new(store, name, CellKind::Gru, c_in, hidden, Some(3), &mut rng(u64::from(name.as_bytes()[0])))
}

/// Rescales weights so gates are not pinned near 0.5.
fn widen(store: &mut ParamStore<f64>, factor: f64) {
    for id in store.trainable_ids() {
        let v = store.value(id).map(|x| x * factor);
        store.get_mut(id).value = v;
    }
}

fn randomize_biases(store: &mut ParamStore<f64>, seed: u64) {
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.ends_with(".bias"))
        .map(|(id, _)| id)
        .collect();
    for (k, id) in ids.into_iter().enumerate() {
        let shape = store.value(id).shape().to_vec();
        store.get_mut(id).value = randn(&shape, seed + k as u64).map(|x| 0.3 * x);
    }
}

#[test]
fn zero_state_is_a_fixed_point() {
    let mut store = ParamStore::new();
    let cell = gru(&mut store, 3, 4, "c");
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Mode::Eval);
    let x = ctx.input(Tensor::zeros(&[2, 4, 4, 3]));
    let s = cell.step(&ctx, x, &cell.zero_state(&ctx, x)).unwrap();
    assert!(s.h.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn closed_update_gate_keeps_previous_state() {
    let mut store = ParamStore::new();
    let cell = gru(&mut store, 3, 4, "c");
    let bias = cell.gates.bias();
    store.get_mut(bias).value.data_mut()[..4].fill(-30.0);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Mode::Eval);
    let x = ctx.input(randn(&[1, 5, 5, 3], 2));
    let h_prev = randn(&[1, 5, 5, 4], 3);
    let state = State {
        h: ctx.input(h_prev.clone()),
        c: None,
    };
    let h = cell.step(&ctx, x, &state).unwrap().h;
    assert!(h.value().max_abs_diff(&h_prev) < 1e-3);
}

#[test]
fn three_step_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let cell = gru(&mut store, 2, 3, "c");
    widen(&mut store, 20.0);
    randomize_biases(&mut store, 40);
    let xs: Vec<_> = (0..3).map(|t| randn(&[1, 4, 4, 2], 10 + t)).collect();
    let cell_ref = &cell;
    let input_err = fd_inputs_max_rel_err(&store, &xs, 1e-5, |ctx, vars| {
        let out = cell_ref.run(ctx, vars)?;
        probe(out[2])
    });
    assert!(input_err < 1e-3, "input grad rel err {input_err}");
    let param_err = fd_params_max_rel_err(&store, None, 1e-5, |ctx| {
        let vars: Vec<_> = xs.iter().map(|x| ctx.input(x.clone())).collect();
        let out = cell_ref.run(ctx, &vars)?;
        probe(out[2])
    });
    assert!(param_err < 1e-3, "param grad rel err {param_err}");
}

#[test]
fn lstm_and_rnn_gradients_match_finite_differences() {
    for kind in [CellKind::Lstm, CellKind::Rnn] {
        let mut store = ParamStore::new();
        let cell = Cell::new(&mut store, "c", kind, 2, 2, Some(3), &mut rng(5));
        widen(&mut store, 20.0);
        randomize_biases(&mut store, 50);
        let xs: Vec<_> = (0..2).map(|t| randn(&[1, 3, 3, 2], 20 + t)).collect();
        let err = fd_params_max_rel_err(&store, None, 1e-5, |ctx| {
            let vars: Vec<_> = xs.iter().map(|x| ctx.input(x.clone())).collect();
            probe(cell.run(ctx, &vars)?[1])
        });
        assert!(err < 1e-3, "{kind:?} rel err {err}");
    }
}

fn bi_outputs(
    store: &ParamStore<f64>,
    xs: &[Tensor<f64>],
    fwd: &Cell,
    bwd: &Cell,
) -> Vec<Tensor<f64>> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, Mode::Eval);
    let vars: Vec<_> = xs.iter().map(|x| ctx.input(x.clone())).collect();
    bidirectional(&ctx, &vars, fwd, bwd)
        .unwrap()
        .into_iter()
        .map(|v| v.value().clone())
        .collect()
}

fn halves(t: &Tensor<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for px in t.data().chunks(2 * n) {
        a.extend_from_slice(&px[..n]);
        b.extend_from_slice(&px[n..]);
    }
    (a, b)
}

#[test]
fn single_step_sequence_has_both_directions() {
    let mut store = ParamStore::new();
    let fwd = gru(&mut store, 3, 4, "f");
    let bwd = gru(&mut store, 3, 4, "b");
    widen(&mut store, 20.0);
    let out = bi_outputs(&store, &[randn(&[2, 3, 3, 3], 1)], &fwd, &bwd);
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].shape(), &[2, 3, 3, 8]);
    let (f, b) = halves(&out[0], 4);
    assert!(f.iter().any(|&v| v != 0.0) && b.iter().any(|&v| v != 0.0));
    assert_ne!(f, b);
}

#[test]
fn time_reversal_swaps_directions() {
    let mut store = ParamStore::new();
    let fwd = gru(&mut store, 2, 3, "f");
    let bwd = gru(&mut store, 2, 3, "b");
    widen(&mut store, 20.0);
    randomize_biases(&mut store, 7);
    let xs: Vec<_> = (0..4).map(|t| randn(&[1, 4, 4, 2], 30 + t)).collect();
    let out = bi_outputs(&store, &xs, &fwd, &bwd);
    let rev: Vec<_> = xs.iter().rev().cloned().collect();
    let out_rev = bi_outputs(&store, &rev, &bwd, &fwd);
    for t in 0..4 {
        let (f, b) = halves(&out[t], 3);
        let (rf, rb) = halves(&out_rev[3 - t], 3);
        assert_eq!(f, rb);
        assert_eq!(b, rf);
    }
}

#[test]
fn directions_are_causal() {
    let mut store = ParamStore::new();
    let fwd = gru(&mut store, 2, 3, "f");
    let bwd = gru(&mut store, 2, 3, "b");
    widen(&mut store, 20.0);
    let xs: Vec<_> = (0..4).map(|t| randn(&[1, 4, 4, 2], 60 + t)).collect();
    let base = bi_outputs(&store, &xs, &fwd, &bwd);
    let t = 1;
    let mut later = xs.clone();
    later[t + 1] = later[t + 1].map(|v| v + 0.5);
    let out = bi_outputs(&store, &later, &fwd, &bwd);
    assert_eq!(halves(&out[t], 3).0, halves(&base[t], 3).0);
    assert_ne!(halves(&out[t], 3).1, halves(&base[t], 3).1);
    let mut earlier = xs.clone();
    earlier[t - 1] = earlier[t - 1].map(|v| v + 0.5);
    let out = bi_outputs(&store, &earlier, &fwd, &bwd);
    assert_eq!(halves(&out[t], 3).1, halves(&base[t], 3).1);
    assert_ne!(halves(&out[t], 3).0, halves(&base[t], 3).0);
}

#[test]
fn zero_input_gives_zero_outputs() {
    let mut store = ParamStore::new();
    let fwd = gru(&mut store, 2, 3, "f");
    let bwd = gru(&mut store, 2, 3, "b");
    let xs = vec![Tensor::zeros(&[1, 3, 3, 2]); 3];
    for o in bi_outputs(&store, &xs, &fwd, &bwd) {
        assert!(o.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn every_variant_preserves_spatial_dims() {
    let cfg = ModelConfig {
        hidden_channels: 3,
        flat_hidden: 5,
        num_features: 2,
        ..ModelConfig::default()
    };
    for &v in TemporalVariant::ALL {
        let mut store = ParamStore::<f64>::new();
        let m = TemporalModule::new(&mut store, &cfg, v, (4, 3), &mut rng(0));
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Eval);
        let xs: Vec<_> = (0..2).map(|t| ctx.input(randn(&[2, 4, 3, 2], t))).collect();
        let out = m.forward(&ctx, &xs).unwrap();
        assert_eq!(out.len(), 2);
        for o in out {
            assert_eq!(o.shape(), vec![2, 4, 3, m.out_channels()], "{v}");
        }
        assert!(m.forward(&ctx, &[]).is_err());
    }
}

#[test]
fn mismatched_state_is_rejected() {
    let mut store = ParamStore::new();
    let cell = gru(&mut store, 2, 3, "c");
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Mode::Eval);
    let x = ctx.input(Tensor::zeros(&[1, 4, 4, 2]));
    let state = State {
        h: ctx.input(Tensor::zeros(&[1, 5, 4, 3])),
        c: None,
    };
    assert!(cell.step(&ctx, x, &state).is_err());
}

fn identity_embed(store: &mut ParamStore<f64>, steps: usize, channels: usize) -> TurbineEmbed {
    let e = TurbineEmbed::new(store, steps, channels, steps * channels, EmbedNorm::None, &mut rng(0));
    let d = steps * channels;
    let mut eye = Tensor::zeros(&[d, d]);
    for i in 0..d {
        eye.data_mut()[i * d + i] = 1.0;
    }
    store.get_mut(e.proj.weight).value = eye;
    e
}

#[test]
fn identity_embed_is_time_concatenation() {
    let mut store = ParamStore::new();
    let e = identity_embed(&mut store, 2, 3);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Mode::Eval);
    let a = randn(&[1, 2, 2, 3], 1);
    let b = randn(&[1, 2, 2, 3], 2);
    let y = e.forward(&ctx, &[ctx.input(a.clone()), ctx.input(b.clone())]).unwrap();
    let y = y.value();
    for cell in 0..4 {
        assert_eq!(&y.data()[cell * 6..cell * 6 + 3], &a.data()[cell * 3..cell * 3 + 3]);
        assert_eq!(&y.data()[cell * 6 + 3..cell * 6 + 6], &b.data()[cell * 3..cell * 3 + 3]);
    }
}

#[test]
fn embed_is_cell_local() {
    let mut store = ParamStore::new();
    let e = TurbineEmbed::new(&mut store, 2, 3, 5, EmbedNorm::LayerNorm, &mut rng(0));
    let run = |xs: &[Tensor<f64>]| {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Eval);
        let vars: Vec<_> = xs.iter().map(|x| ctx.input(x.clone())).collect();
        let y = e.forward(&ctx, &vars).unwrap().value().clone();
        y
    };
    let xs = vec![randn(&[1, 3, 3, 3], 1), randn(&[1, 3, 3, 3], 2)];
    let base = run(&xs);
    let mut moved = xs.clone();
    // Cell (1, 2) of step 1.
    moved[1].data_mut()[(3 + 2) * 3 + 1] += 1.0;
    let out = run(&moved);
    for cell in 0..9 {
        let same = out.data()[cell * 5..cell * 5 + 5] == base.data()[cell * 5..cell * 5 + 5];
        assert_eq!(same, cell != 5, "cell {cell}");
    }
    // Swapping two cells swaps their outputs.
    let mut swapped = xs.clone();
    for x in &mut swapped {
        for c in 0..3 {
            x.data_mut().swap(c, 8 * 3 + c);
        }
    }
    let out = run(&swapped);
    assert_eq!(&out.data()[..5], &base.data()[40..45]);
    assert_eq!(&out.data()[40..45], &base.data()[..5]);
}

#[test]
fn embed_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let e = TurbineEmbed::new(&mut store, 2, 3, 4, EmbedNorm::LayerNorm, &mut rng(0));
    widen(&mut store, 20.0);
    let xs = vec![randn(&[1, 2, 2, 3], 1), randn(&[1, 2, 2, 3], 2)];
    let err = fd_inputs_max_rel_err(&store, &xs, 1e-5, |ctx, vars| probe(e.forward(ctx, vars)?));
    assert!(err < 1e-4, "input rel err {err}");
    let err = fd_params_max_rel_err(&store, None, 1e-5, |ctx| {
        let vars: Vec<_> = xs.iter().map(|x| ctx.input(x.clone())).collect();
        probe(e.forward(ctx, &vars)?)
    });
    assert!(err < 1e-4, "param rel err {err}");
}

#[test]
fn embed_rejects_mismatched_steps() {
    let mut store = ParamStore::<f64>::new();
    let e = TurbineEmbed::new(&mut store, 2, 3, 4, EmbedNorm::None, &mut rng(0));
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Mode::Eval);
    let a = ctx.input(Tensor::zeros(&[1, 2, 2, 3]));
    let b = ctx.input(Tensor::zeros(&[1, 2, 3, 3]));
    assert!(e.forward(&ctx, &[a, b]).is_err());
}

use proptest::prelude::*;

use super::*;
use crate::autograd::Tape;
use crate::config::{AblationSpec, FusionVariant, ModelConfig, SpatialVariant, TemporalVariant};
use crate::data::TurbineLayout;
use crate::nn::{Ctx, Mode};
use crate::param::ParamStore;
use crate::spatial::window::{relative_position_index, shift_regions, window_cells};
use crate::tensor::Tensor;
use crate::testutil::{fd_inputs_max_rel_err, fd_params_max_rel_err, probe, randn, rng};

fn eval<F>(store: &ParamStore<f64>, f: F) -> Tensor<f64>
where
    F: for<'t> FnOnce(&Ctx<'t, f64>) -> crate::Result<crate::Var<'t, f64>>,
{
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, Mode::Eval);
    let v = f(&ctx).unwrap().value().clone();
    v
}

fn scale_weights(store: &mut ParamStore<f64>, factor: f64) {
    for id in store.trainable_ids() {
        if store.get(id).name.ends_with("weight") || store.get(id).name.ends_with("rel_pos_bias") {
            let v = store.value(id).map(|x| x * factor);
            store.get_mut(id).value = v;
        }
    }
}

fn set(store: &mut ParamStore<f64>, id: crate::ParamId, f: impl Fn(usize) -> f64) {
    let t = &mut store.get_mut(id).value;
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

// ---- geometry ----

#[test]
fn padding_arithmetic() {
    let tape = Tape::new();
    let x = tape.constant(randn(&[1, 8, 8, 2], 0));
    let (y, mask) = pad_to_window_multiple(x, 2, 3).unwrap();
    assert_eq!(y.shape(), vec![1, 8, 8, 2]);
    assert!(!mask.any());
    let x = tape.constant(randn(&[1, 5, 5, 2], 0));
    let (y, mask) = pad_to_window_multiple(x, 2, 3).unwrap();
    assert_eq!(y.shape(), vec![1, 8, 8, 2]);
    assert_eq!(mask.padded.iter().filter(|&&p| p).count(), 64 - 25);
    assert!(mask.padded[5] && !mask.padded[4] && mask.padded[5 * 8]);
    let coarse = PadMask::new(5, 5, 8, 8, 2);
    assert_eq!(coarse.padded, vec![false, false, false, false]);
}

#[test]
fn partition_shapes() {
    let tape = Tape::new();
    let x = tape.constant(randn(&[1, 4, 4, 3], 0));
    assert_eq!(window_partition(x, 2).unwrap().shape(), vec![4, 4, 3]);
    let single = window_partition(x, 4).unwrap();
    assert_eq!(single.shape(), vec![1, 16, 3]);
    assert_eq!(single.value().data(), x.value().data());
    assert!(window_partition(x, 3).is_err());
}

#[test]
fn partition_matches_cell_order() {
    let tape = Tape::new();
    let data: Vec<f64> = (0..2 * 8 * 4).map(|v| v as f64).collect();
    let x = tape.constant(Tensor::new(vec![2, 8, 4, 1], data).unwrap());
    let win = window_partition(x, 2).unwrap();
    let cells = window_cells(8, 4, 2);
    let v = win.value();
    for b in 0..2 {
        for (w, toks) in cells.iter().enumerate() {
            for (t, &c) in toks.iter().enumerate() {
                assert_eq!(v.data()[(b * 8 + w) * 4 + t], (b * 32 + c) as f64);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn partition_and_shift_round_trip(hw in 1usize..4, ww in 1usize..4, win in 1usize..4, seed in 0u64..500) {
        let (h, w) = (hw * win, ww * win);
        let tape = Tape::new();
        let x = tape.constant(randn(&[2, h, w, 3], seed));
        let back = window_reverse(window_partition(x, win).unwrap(), win, h, w).unwrap();
        prop_assert!(*back.value() == *x.value());
        let shift = win / 2;
        let back = reverse_shift(cyclic_shift(x, shift).unwrap(), shift).unwrap();
        prop_assert!(*back.value() == *x.value());
    }
}

#[test]
fn cyclic_shift_moves_cells_up_and_left() {
    let tape = Tape::new();
    let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
    let x = tape.constant(Tensor::new(vec![1, 4, 4, 1], data).unwrap());
    let y = cyclic_shift(x, 1).unwrap();
    let y = y.value();
    // New (0, 0) is old (1, 1); new (3, 3) is old (0, 0).
    assert_eq!(y.data()[0], 5.0);
    assert_eq!(y.data()[15], 0.0);
}

#[test]
fn zero_shift_needs_no_mask() {
    assert!(build_shift_mask(8, 8, 4, 0).iter().all(|&v| v == 0.0));
    assert!(attention_mask::<f64>(8, 8, 4, 0, None).is_none());
}

#[test]
fn shift_mask_separates_wrapped_tokens() {
    let mask = build_shift_mask(4, 4, 2, 1);
    let regions = shift_regions(4, 4, 2, 1);
    let cells = window_cells(4, 4, 2);
    // Top-left window only holds non-wrapped cells.
    assert!(mask[..16].iter().all(|&v| v == 0.0));
    // Bottom-right window holds one cell from each of four regions.
    let last = &cells[3];
    let distinct: std::collections::HashSet<_> = last.iter().map(|&c| regions[c]).collect();
    assert_eq!(distinct.len(), 4);
    let block = &mask[3 * 16..4 * 16];
    for q in 0..4 {
        for k in 0..4 {
            assert_eq!(block[q * 4 + k], if q == k { 0.0 } else { MASK_VALUE });
        }
    }
}

#[test]
fn relative_index_is_symmetric_offset() {
    let idx = relative_position_index(2);
    assert_eq!(idx.len(), 16);
    // Same token: centre of the 3x3 table.
    assert!((0..4).all(|q| idx[q * 4 + q] == 4));
    assert_eq!(idx[3], 0);
    assert_eq!(idx[3 * 4], 8);
}

// ---- attention ----

fn attention(store: &mut ParamStore<f64>, dim: usize, heads: usize, window: usize, bias: bool, seed: u64) -> WindowAttention {
    let a = WindowAttention::new(store, "attn", dim, heads, window, bias, &mut rng(seed)).unwrap();
    scale_weights(store, 25.0);
    for id in [a.qkv.bias.unwrap(), a.proj.bias.unwrap()] {
        let shape = store.value(id).shape().to_vec();
        store.get_mut(id).value = randn(&shape, seed + 100).map(|v| 0.1 * v);
    }
    a
}

/// Dense multi-head attention over all tokens, written with plain loops.
fn brute_force_attention(store: &ParamStore<f64>, a: &WindowAttention, x: &Tensor<f64>) -> Vec<f64> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let dh = c / a.heads;
    let w = store.value(a.qkv.weight).data();
    let b = store.value(a.qkv.bias.unwrap()).data();
    let pw = store.value(a.proj.weight).data();
    let pb = store.value(a.proj.bias.unwrap()).data();
    let lin = |row: usize, o: usize| -> f64 {
        b[o] + (0..c).map(|i| w[o * c + i] * x.data()[row * c + i]).sum::<f64>()
    };
    let mut concat = vec![0.0; n * c];
    for hd in 0..a.heads {
        for qi in 0..n {
            let q: Vec<f64> = (0..dh).map(|d| lin(qi, hd * dh + d)).collect();
            let scores: Vec<f64> = (0..n)
                .map(|kj| {
                    (0..dh).map(|d| q[d] * lin(kj, c + hd * dh + d)).sum::<f64>() / (dh as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for d in 0..dh {
                concat[qi * c + hd * dh + d] =
                    (0..n).map(|kj| e[kj] / z * lin(kj, 2 * c + hd * dh + d)).sum::<f64>();
            }
        }
    }
    (0..n)
        .flat_map(|r| {
            let concat = &concat;
            (0..c).map(move |o| pb[o] + (0..c).map(|i| pw[o * c + i] * concat[r * c + i]).sum::<f64>())
        })
        .collect()
}

#[test]
fn full_grid_window_equals_dense_attention() {
    for trial in 0..20u64 {
        let mut store = ParamStore::new();
        let a = attention(&mut store, 8, 2, 4, false, trial);
        let grid = randn(&[1, 4, 4, 8], 1000 + trial);
        let out = eval(&store, |ctx| {
            let win = window_partition(ctx.input(grid.clone()), 4)?;
            a.forward(ctx, win, None)
        });
        let tokens = grid.clone().reshape(&[16, 8]).unwrap();
        let oracle = brute_force_attention(&store, &a, &tokens);
        let diff = out
            .data()
            .iter()
            .zip(&oracle)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-5, "trial {trial}: {diff}");
    }
}

/// `q = k = 0`, `v = x`, identity output projection.
fn uniform_attention(store: &mut ParamStore<f64>, dim: usize) -> WindowAttention {
    let a = WindowAttention::new(store, "attn", dim, 2, 2, false, &mut rng(0)).unwrap();
    set(store, a.qkv.weight, |i| {
        let (o, c) = (i / dim, i % dim);
        if o >= 2 * dim && o - 2 * dim == c { 1.0 } else { 0.0 }
    });
    set(store, a.proj.weight, |i| if i / dim == i % dim { 1.0 } else { 0.0 });
    a
}

#[test]
fn zero_queries_and_keys_average_the_window() {
    let mut store = ParamStore::new();
    let a = uniform_attention(&mut store, 4);
    let x = randn(&[3, 4, 4], 2);
    let out = eval(&store, |ctx| a.forward(ctx, ctx.input(x.clone()), None));
    for w in 0..3 {
        for c in 0..4 {
            let mean = (0..4).map(|t| x.data()[(w * 4 + t) * 4 + c]).sum::<f64>() / 4.0;
            for t in 0..4 {
                assert!((out.data()[(w * 4 + t) * 4 + c] - mean).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn saturated_mask_row_attends_only_to_itself() {
    let mut store = ParamStore::new();
    let a = uniform_attention(&mut store, 4);
    let x = randn(&[1, 4, 4], 3);
    let mut m = vec![0.0; 16];
    for k in 0..4 {
        if k != 1 {
            m[4 + k] = MASK_VALUE;
        }
    }
    let mask = Tensor::new(vec![1, 1, 4, 4], m).unwrap();
    let out = eval(&store, |ctx| a.forward(ctx, ctx.input(x.clone()), Some(&mask)));
    assert_eq!(&out.data()[4..8], &x.data()[4..8]);
}

#[test]
fn shifted_attention_never_crosses_regions() {
    let (h, w, win, shift) = (8, 8, 4, 2);
    let mut store = ParamStore::new();
    let a = attention(&mut store, 6, 3, win, true, 11);
    let mask = attention_mask::<f64>(h, w, win, shift, None).unwrap();
    let regions = shift_regions(h, w, win, shift);
    let cells = window_cells(h, w, win);
    for seed in 0..5 {
        let x = randn(&[2, h, w, 6], 40 + seed);
        let weights = {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store, Mode::Eval);
            let win_x = window_partition(cyclic_shift(ctx.input(x.clone()), shift).unwrap(), win).unwrap();
            let (_, attn) = a.forward_with_weights(&ctx, win_x, Some(&mask)).unwrap();
            let v = attn.value().clone();
            v
        };
        let n = win * win;
        let nw = cells.len();
        let mut checked = 0;
        for bw in 0..2 * nw {
            let toks = &cells[bw % nw];
            for hd in 0..3 {
                for q in 0..n {
                    for k in 0..n {
                        let p = weights.data()[((bw * 3 + hd) * n + q) * n + k];
                        if regions[toks[q]] != regions[toks[k]] {
                            assert!(p < 1e-6, "leak {p}");
                            checked += 1;
                        }
                    }
                }
            }
        }
        assert!(checked > 0);
    }
}

#[test]
fn attention_commutes_with_token_permutation_without_bias() {
    let mut store = ParamStore::new();
    let a = attention(&mut store, 6, 2, 3, false, 5);
    let x = randn(&[2, 9, 6], 6);
    let perm = [4usize, 0, 8, 2, 7, 1, 3, 6, 5];
    let permute = |t: &Tensor<f64>| {
        let mut out = t.clone();
        for w in 0..2 {
            for (dst, &src) in perm.iter().enumerate() {
                for c in 0..6 {
                    out.data_mut()[(w * 9 + dst) * 6 + c] = t.data()[(w * 9 + src) * 6 + c];
                }
            }
        }
        out
    };
    let out = eval(&store, |ctx| a.forward(ctx, ctx.input(x.clone()), None));
    let out_p = eval(&store, |ctx| a.forward(ctx, ctx.input(permute(&x)), None));
    assert!(out_p.max_abs_diff(&permute(&out)) < 1e-12);
}

#[test]
fn indivisible_heads_are_a_config_error() {
    let mut store = ParamStore::<f64>::new();
    let err = WindowAttention::new(&mut store, "a", 10, 3, 2, true, &mut rng(0)).unwrap_err();
    assert_eq!(err.category(), "config");
}

// ---- blocks ----

fn block(store: &mut ParamStore<f64>, dim: usize, window: usize, shift: usize) -> ShiftWindowBlock {
    let b = ShiftWindowBlock::new(store, "blk", dim, 2, window, shift, 2, true, &mut rng(3)).unwrap();
    scale_weights(store, 25.0);
    b
}

#[test]
fn zero_output_projections_make_the_block_identity() {
    let mut store = ParamStore::new();
    let b = block(&mut store, 4, 2, 1);
    for id in [b.attn.proj.weight, b.attn.proj.bias.unwrap(), b.fc2.weight, b.fc2.bias.unwrap()] {
        set(&mut store, id, |_| 0.0);
    }
    let x = randn(&[2, 4, 4, 4], 1);
    let mask = attention_mask::<f64>(4, 4, 2, 1, None);
    let out = eval(&store, |ctx| b.forward(ctx, ctx.input(x.clone()), mask.as_ref()));
    assert_eq!(out.data(), x.data());
}

#[test]
fn shifted_block_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let b = block(&mut store, 4, 2, 1);
    let x = vec![randn(&[1, 4, 4, 4], 8)];
    let mask = attention_mask::<f64>(4, 4, 2, 1, None);
    let err = fd_inputs_max_rel_err(&store, &x, 1e-5, |ctx, v| probe(b.forward(ctx, v[0], mask.as_ref())?));
    assert!(err < 1e-4, "input rel err {err}");
    let err = fd_params_max_rel_err(&store, None, 1e-5, |ctx| {
        probe(b.forward(ctx, ctx.input(x[0].clone()), mask.as_ref())?)
    });
    assert!(err < 1e-4, "param rel err {err}");
}

fn stage(spatial: SpatialVariant) -> (ParamStore<f64>, Stage, Geometry) {
    stage_with(spatial, 4, 2)
}

fn stage_with(spatial: SpatialVariant, dim: usize, mlp_ratio: usize) -> (ParamStore<f64>, Stage, Geometry) {
    let cfg = ModelConfig {
        embed_dim: dim,
        heads: vec![2],
        depths: vec![2],
        window_size: 4,
        mlp_ratio,
        ..ModelConfig::default()
    };
    let mut store = ParamStore::new();
    let s = Stage::new(&mut store, &cfg, spatial, FusionVariant::Empty, 0, (8, 8), false, &mut rng(9)).unwrap();
    scale_weights(&mut store, 25.0);
    let geom = Geometry {
        height: 8,
        width: 8,
        padded_height: 8,
        padded_width: 8,
    };
    (store, s, geom)
}

/// Cells whose output changes when input cell `(1, 1)` is perturbed.
fn influenced(spatial: SpatialVariant) -> Vec<usize> {
    let (store, s, geom) = stage(spatial);
    let x = randn(&[1, 8, 8, 4], 2);
    let base = eval(&store, |ctx| s.forward_blocks(ctx, ctx.input(x.clone()), &geom));
    let mut moved = x.clone();
    moved.data_mut()[(8 + 1) * 4] += 1.0;
    let out = eval(&store, |ctx| s.forward_blocks(ctx, ctx.input(moved.clone()), &geom));
    (0..64)
        .filter(|&c| out.data()[c * 4..c * 4 + 4] != base.data()[c * 4..c * 4 + 4])
        .collect()
}

#[test]
fn shifted_windows_connect_neighbouring_windows() {
    let window_of = |c: usize| (c / 8 / 4, c % 8 / 4);
    let shifted = influenced(SpatialVariant::ShiftWindow);
    assert!(shifted.iter().any(|&c| window_of(c) != (0, 0)), "{shifted:?}");
    let plain = influenced(SpatialVariant::Window);
    assert!(!plain.is_empty());
    assert!(plain.iter().all(|&c| window_of(c) == (0, 0)), "{plain:?}");
}

#[test]
fn cnn_block_matches_attention_parameter_budget() {
    let count = |spatial| {
        let (store, _, _) = stage_with(spatial, 36, 4);
        store.num_trainable_elements() as f64
    };
    let (cnn, swin) = (count(SpatialVariant::Cnn), count(SpatialVariant::Window));
    assert!((cnn / swin - 1.0).abs() < 0.05, "cnn {cnn} vs window {swin}");
    assert_eq!(CnnBlock::matched_width(48, 4), 32);
}

// ---- merge, fusion, head ----

#[test]
fn merge_shapes_locality_and_gradients() {
    let mut store = ParamStore::new();
    let m = TurbineMerge::new(&mut store, "m", 8, &mut rng(0));
    scale_weights(&mut store, 25.0);
    let x = randn(&[1, 4, 4, 8], 1);
    let base = eval(&store, |ctx| m.forward(ctx, ctx.input(x.clone())));
    assert_eq!(base.shape(), &[1, 2, 2, 16]);
    let mut moved = x.clone();
    moved.data_mut()[(3 * 4 + 2) * 8] += 1.0; // cell (3, 2) -> merged (1, 1)
    let out = eval(&store, |ctx| m.forward(ctx, ctx.input(moved.clone())));
    for c in 0..4 {
        let same = out.data()[c * 16..c * 16 + 16] == base.data()[c * 16..c * 16 + 16];
        assert_eq!(same, c != 3);
    }
    let small = vec![randn(&[1, 2, 4, 3], 2)];
    let mut store = ParamStore::new();
    let m = TurbineMerge::new(&mut store, "m", 3, &mut rng(1));
    scale_weights(&mut store, 25.0);
    let err = fd_inputs_max_rel_err(&store, &small, 1e-5, |ctx, v| probe(m.forward(ctx, v[0])?));
    assert!(err < 1e-4, "{err}");
    let err = fd_params_max_rel_err(&store, None, 1e-5, |ctx| probe(m.forward(ctx, ctx.input(small[0].clone()))?));
    assert!(err < 1e-4, "{err}");
}

fn fusion(variant: FusionVariant, dim: usize) -> (ParamStore<f64>, ChannelFusion) {
    let mut store = ParamStore::new();
    let f = ChannelFusion::new(&mut store, "f", dim, 4, variant, &mut rng(2)).unwrap();
    (store, f)
}

#[test]
fn zero_input_gives_zero_output() {
    let (store, f) = fusion(FusionVariant::Full, 8);
    let out = eval(&store, |ctx| f.forward(ctx, ctx.input(Tensor::zeros(&[2, 3, 3, 8]))));
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_parameters_halve_the_input() {
    let (mut store, f) = fusion(FusionVariant::Full, 8);
    for id in store.trainable_ids() {
        let name = &store.get(id).name;
        if name.ends_with(".weight") || name.ends_with(".bias") {
            set(&mut store, id, |_| 0.0);
        }
    }
    let x = randn(&[2, 3, 3, 8], 4);
    for mode in [Mode::Eval, Mode::Train] {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, mode);
        let out = f.forward(&ctx, ctx.input(x.clone())).unwrap();
        assert_eq!(out.value().data(), x.map(|v| 0.5 * v).data());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gate_never_amplifies(seed in 0u64..10_000, scale in 0.1f64..100.0, variant in 0usize..3) {
        let variant = [FusionVariant::Full, FusionVariant::DetailOnly, FusionVariant::GlobalOnly][variant];
        let (mut store, f) = fusion(variant, 8);
        scale_weights(&mut store, 50.0);
        let x = randn(&[2, 3, 3, 8], seed).map(|v| v * scale);
        for mode in [Mode::Eval, Mode::Train] {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store, mode);
            let out = f.forward(&ctx, ctx.input(x.clone())).unwrap();
            for (o, i) in out.value().data().iter().zip(x.data()) {
                prop_assert!(o.abs() <= i.abs());
            }
        }
    }
}

#[test]
fn fusion_gradients_match_finite_differences() {
    for variant in [FusionVariant::Full, FusionVariant::GlobalOnly, FusionVariant::DetailOnly] {
        let (mut store, f) = fusion(variant, 8);
        scale_weights(&mut store, 25.0);
        let x = vec![randn(&[2, 2, 2, 8], 5)];
        let err = fd_inputs_max_rel_err(&store, &x, 1e-5, |ctx, v| probe(f.forward(ctx, v[0])?));
        assert!(err < 1e-4, "{variant}: {err}");
        let err = fd_params_max_rel_err(&store, None, 1e-5, |ctx| probe(f.forward(ctx, ctx.input(x[0].clone()))?));
        assert!(err < 1e-4, "{variant}: {err}");
    }
}

#[test]
fn narrow_fusion_clamps_reduction() {
    let (store, f) = fusion(FusionVariant::Full, 2);
    let d = f.detail.as_ref().unwrap();
    assert_eq!(store.value(d.proj1.weight).shape(), &[1, 2]);
    let mut s = ParamStore::<f64>::new();
    assert!(ChannelFusion::new(&mut s, "f", 8, 4, FusionVariant::Empty, &mut rng(0)).is_none());
    assert_eq!(s.len(), 0);
}

// ---- full model ----

fn small_cfg() -> ModelConfig {
    ModelConfig {
        seq_len: 2,
        hidden_channels: 3,
        embed_dim: 4,
        heads: vec![1, 2, 2],
        window_size: 2,
        mlp_ratio: 2,
        flat_hidden: 4,
        flat_decode_channels: 2,
        ..ModelConfig::default()
    }
}

fn build(cfg: &ModelConfig, spec: AblationSpec, layout: &TurbineLayout) -> (ParamStore<f64>, Windformer) {
    let mut store = ParamStore::new();
    let m = Windformer::new(cfg, spec, layout, &mut store, &mut rng(7)).unwrap();
    (store, m)
}

#[test]
fn desk_model_emits_one_value_per_turbine() {
    let layout = TurbineLayout::random(16, 16, 200, 0).unwrap();
    let (store, m) = build(&ModelConfig::default(), AblationSpec::default(), &layout);
    let x = randn(&m.input_shape(1), 1);
    let a = eval(&store, |ctx| m.forward(ctx, ctx.input(x.clone())));
    let b = eval(&store, |ctx| m.forward(ctx, ctx.input(x.clone())));
    assert_eq!(a.shape(), &[1, 200]);
    assert_eq!(a.data(), b.data());
}

#[test]
fn every_ablation_keeps_the_interface() {
    let layout = TurbineLayout::random(5, 6, 11, 2).unwrap();
    let cfg = small_cfg();
    for spec in AblationSpec::full_grid() {
        let (store, m) = build(&cfg, spec, &layout);
        let x = randn(&m.input_shape(3), 2);
        for mode in [Mode::Train, Mode::Eval] {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store, mode);
            let y = m.forward(&ctx, ctx.input(x.clone())).unwrap();
            assert_eq!(y.shape(), vec![3, 11], "{}", spec.label());
            assert!(y.value().is_finite());
        }
    }
}

#[test]
fn manifests_reflect_removed_modules() {
    let layout = TurbineLayout::random(4, 4, 6, 2).unwrap();
    let cfg = small_cfg();
    let names = |spec: AblationSpec| {
        let (store, _) = build(&cfg, spec, &layout);
        store.names().into_iter().map(String::from).collect::<Vec<_>>()
    };
    let base = AblationSpec::default();
    assert!(names(base).iter().any(|n| n.contains(".fusion.")));
    let no_fusion = names(AblationSpec { fusion: FusionVariant::Empty, ..base });
    assert!(!no_fusion.iter().any(|n| n.contains("fusion")));
    let no_temporal = names(AblationSpec { temporal: TemporalVariant::Empty, ..base });
    assert!(!no_temporal.iter().any(|n| n.starts_with("temporal")));
    assert!(no_temporal.iter().any(|n| n == "embed.proj.weight"));
    let no_spatial = names(AblationSpec { spatial: SpatialVariant::Empty, ..base });
    assert!(!no_spatial.iter().any(|n| n.starts_with("stage")));
    let global = names(AblationSpec { fusion: FusionVariant::GlobalOnly, ..base });
    assert!(!global.iter().any(|n| n.contains("detail")));
}

#[test]
fn default_spec_is_reproducible_by_construction() {
    let layout = TurbineLayout::random(4, 4, 6, 2).unwrap();
    let spec = "temporal = \"bi-convgru\"\nspatial = \"shift-window\"\nfusion = \"full\"\n";
    let parsed: AblationSpec = toml::from_str(spec).unwrap();
    let (a, ma) = build(&small_cfg(), AblationSpec::default(), &layout);
    let (b, mb) = build(&small_cfg(), parsed, &layout);
    let x = randn(&ma.input_shape(2), 3);
    let ya = eval(&a, |ctx| ma.forward(ctx, ctx.input(x.clone())));
    let yb = eval(&b, |ctx| mb.forward(ctx, ctx.input(x.clone())));
    assert_eq!(ya.data(), yb.data());
}

#[test]
fn internal_padding_equals_explicit_padding() {
    let layout = TurbineLayout::random(5, 5, 9, 4).unwrap();
    let (store, m) = build(&small_cfg(), AblationSpec::default(), &layout);
    assert_eq!(m.geometry.padded_height, 8);
    let x = randn(&m.input_shape(2), 5);
    let direct = eval(&store, |ctx| m.forward(ctx, ctx.input(x.clone())));
    let via_prepadded = eval(&store, |ctx| {
        let xs: Vec<_> = (0..2)
            .map(|t| ctx.input(x.clone()).slice(1, t, 1)?.reshape(&[2, 5, 5, 6]))
            .collect::<crate::Result<_>>()?;
        let e = m.embed.forward(ctx, &m.temporal.forward(ctx, &xs)?)?;
        let zeros_right = ctx.input(Tensor::zeros(&[2, 5, 3, 4]));
        let zeros_below = ctx.input(Tensor::zeros(&[2, 3, 8, 4]));
        let e = crate::Var::concat(&[e, zeros_right], 2)?;
        let e = crate::Var::concat(&[e, zeros_below], 1)?;
        m.forward_padded_embedding(ctx, e)
    });
    assert_eq!(direct.data(), via_prepadded.data());
}

#[test]
fn padded_cells_do_not_leak_into_predictions() {
    let layout = TurbineLayout::random(5, 5, 9, 4).unwrap();
    let (store, m) = build(&small_cfg(), AblationSpec::default(), &layout);
    let x = randn(&m.input_shape(1), 5);
    let run = |fill: f64| {
        eval(&store, |ctx| {
            let e = m.forward_segment(ctx, 0, ctx.input(x.clone()))?;
            let pad = m.geometry.pad_mask(0);
            let junk: Vec<f64> = pad
                .padded
                .iter()
                .flat_map(|&p| std::iter::repeat(if p { fill } else { 0.0 }).take(4))
                .collect();
            let e = e.add(ctx.input(Tensor::new(vec![1, 8, 8, 4], junk)?))?;
            m.forward_padded_embedding(ctx, e)
        })
    };
    assert!(run(0.0).max_abs_diff(&run(3.0)) < 1e-12);
}

#[test]
fn head_with_zero_weights_returns_bias() {
    for (h, w, l) in [(4, 4, 6), (16, 16, 200)] {
        let layout = TurbineLayout::random(h, w, l, 1).unwrap();
        let (mut store, m) = build(&small_cfg(), AblationSpec::default(), &layout);
        set(&mut store, m.head.weight, |_| 0.0);
        set(&mut store, m.head.bias.unwrap(), |i| i as f64);
        let y = eval(&store, |ctx| m.forward(ctx, ctx.input(randn(&m.input_shape(1), 1))));
        assert_eq!(y.data(), (0..l).map(|i| i as f64).collect::<Vec<_>>().as_slice());
    }
}

#[test]
fn head_gradients_match_finite_differences() {
    let layout = TurbineLayout::random(4, 4, 5, 1).unwrap();
    let (mut store, m) = build(&small_cfg(), AblationSpec::default(), &layout);
    scale_weights(&mut store, 25.0);
    let last = m.num_segments() - 1;
    let feats = vec![randn(&[2, 2, 2, 16], 3)];
    let err = fd_inputs_max_rel_err(&store, &feats, 1e-5, |ctx, v| probe(m.forward_segment(ctx, last, v[0])?));
    assert!(err < 1e-6, "{err}");
    let head_ids: Vec<_> = store.trainable_ids().into_iter().filter(|id| store.get(*id).name.starts_with("head")).collect();
    let err = fd_params_max_rel_err(&store, Some(&head_ids), 1e-5, |ctx| {
        probe(m.forward_segment(ctx, last, ctx.input(feats[0].clone()))?)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn mismatched_input_is_a_config_error() {
    let layout = TurbineLayout::random(4, 4, 5, 1).unwrap();
    let (store, m) = build(&small_cfg(), AblationSpec::default(), &layout);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Mode::Eval);
    let err = m.forward(&ctx, ctx.input(Tensor::zeros(&[1, 2, 5, 4, 6]))).err().unwrap();
    assert_eq!(err.category(), "config");
}

#[test]
fn segments_partition_the_parameters() {
    let layout = TurbineLayout::random(4, 4, 5, 1).unwrap();
    let (store, m) = build(&small_cfg(), AblationSpec::default(), &layout);
    assert_eq!(m.num_segments(), 5);
    let mut next = 0;
    for k in 0..m.num_segments() {
        let r = m.segment_params(k);
        assert_eq!(r.start, next);
        next = r.end;
    }
    assert_eq!(next, store.len());
}

//! Central finite differences against reverse-mode gradients, in `f64`.
//!
//! Models expose a chain of segments so that perturbing a parameter only
//! re-runs the segments from its own onwards, starting from cached inputs.

use std::ops::Range;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{apply_updates, Ctx, Mode};
use crate::param::{ParamKind, ParamStore};
use crate::spatial::Windformer;
use crate::tensor::Tensor;
use crate::training::loss::mse_loss;

/// A model written as `f = f_{n-1} ∘ ... ∘ f_0`, where segment `k` reads only
/// the parameters in `segment_params(k)`.
pub trait Segmented {
    fn num_segments(&self) -> usize;

    fn segment_params(&self, k: usize) -> Range<usize>;

    fn forward_segment<'t>(
        &self,
        ctx: &Ctx<'t, f64>,
        k: usize,
        x: Var<'t, f64>,
    ) -> Result<Var<'t, f64>>;

    fn forward_from<'t>(
        &self,
        ctx: &Ctx<'t, f64>,
        from: usize,
        mut x: Var<'t, f64>,
    ) -> Result<Var<'t, f64>> {
        for k in from..self.num_segments() {
            x = self.forward_segment(ctx, k, x)?;
        }
        Ok(x)
    }
}

impl Segmented for Windformer {
    fn num_segments(&self) -> usize {
        Windformer::num_segments(self)
    }

    fn segment_params(&self, k: usize) -> Range<usize> {
        Windformer::segment_params(self, k)
    }

    fn forward_segment<'t>(
        &self,
        ctx: &Ctx<'t, f64>,
        k: usize,
        x: Var<'t, f64>,
    ) -> Result<Var<'t, f64>> {
        Windformer::forward_segment(self, ctx, k, x)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Share of trainable coordinates to check, in `(0, 1]`.
    pub fraction: f64,
    pub h: f64,
    pub seed: u64,
    /// Denominator floor of the relative error.
    pub abs_floor: f64,
    /// Coordinates whose `±h` evaluations straddle a ReLU kink are retried
    /// with `h / 10` down to this step before falling back to a one-sided
    /// difference.
    pub min_h: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            fraction: 0.01,
            h: 1e-4,
            seed: 0,
            abs_floor: 1e-8,
            min_h: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoordinateError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    /// Step used for `numeric`.
    pub h: f64,
    pub scheme: Scheme,
}

/// How `numeric` was formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Scheme {
    Central,
    /// One-sided (second order where `±2h` stays on the same piece), on
    /// the side that keeps every ReLU on its unperturbed piece.
    Forward,
    Backward,
    /// Both sides leave the unperturbed ReLU pattern even at `min_h`.
    Unresolved,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub h: f64,
    pub checked: usize,
    pub total: usize,
    /// Maximum over every coordinate at the nominal step.
    pub max_rel_err_raw: f64,
    /// Coordinates whose nominal perturbation moved some ReLU across zero.
    pub kinks: usize,
    /// Kink coordinates resolved by a smaller central step.
    pub refined: usize,
    /// Kink coordinates checked one-sided.
    pub one_sided: usize,
    pub unresolved: usize,
    /// Maxima over the resolved coordinates.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst: Option<CoordinateError>,
    /// Every checked coordinate, in store order.
    pub coordinates: Vec<CoordinateError>,
    pub seconds: f64,
}

impl GradCheckReport {
    /// True when every resolved coordinate is within `tolerance`.
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > self.unresolved && self.max_rel_err.is_finite() && self.max_rel_err < tolerance
    }
}

fn loss_of<'t, M: Segmented>(
    model: &M,
    ctx: &Ctx<'t, f64>,
    from: usize,
    x: Var<'t, f64>,
    target: &Tensor<f64>,
) -> Result<Var<'t, f64>> {
    let out = model.forward_from(ctx, from, x)?;
    let n = out.shape().get(1).copied().unwrap_or(1);
    mse_loss(out, target, &vec![true; n])
}

/// The `(param, element)` coordinates to check, drawn without replacement
/// and in store order.
fn sample_coordinates(
    params: &ParamStore<f64>,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<(usize, usize)>, usize)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} is not in (0, 1]")));
    }
    let ids = params.trainable_ids();
    let mut offsets = Vec::with_capacity(ids.len());
    let mut total = 0usize;
    for &id in &ids {
        offsets.push(total);
        total += params.value(id).numel();
    }
    if total == 0 {
        return Err(Error::Contract("no trainable parameters to check".into()));
    }
    let count = ((fraction * total as f64).ceil() as usize).clamp(1, total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = rand::seq::index::sample(&mut rng, total, count).into_vec();
    picks.sort_unstable();
    let coords = picks
        .into_iter()
        .map(|flat| {
            let slot = offsets.partition_point(|&o| o <= flat) - 1;
            (ids[slot].index(), flat - offsets[slot])
        })
        .collect();
    Ok((coords, total))
}

/// Analytic gradient plus the input of every segment, for `params` in eval
/// mode.
fn analytic<M: Segmented>(
    model: &M,
    params: &ParamStore<f64>,
    input: &Tensor<f64>,
    target: &Tensor<f64>,
) -> Result<(ParamStore<f64>, Vec<Tensor<f64>>)> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, params, Mode::Eval);
    let mut x = ctx.input(input.clone());
    let mut acts = Vec::with_capacity(model.num_segments());
    for k in 0..model.num_segments() {
        acts.push(x.value().clone());
        x = model.forward_segment(&ctx, k, x)?;
    }
    let n = x.shape().get(1).copied().unwrap_or(1);
    let loss = mse_loss(x, target, &vec![true; n])?;
    let grads = tape.backward(loss)?;
    let mut with_grads = params.clone();
    with_grads.zero_grad();
    with_grads.accumulate_grads(&grads);
    Ok((with_grads, acts))
}

#[allow(clippy::too_many_arguments)]
fn check_coordinates<M: Segmented>(
    model: &M,
    params: &ParamStore<f64>,
    analytic: &ParamStore<f64>,
    acts: &[Tensor<f64>],
    target: &Tensor<f64>,
    coords: &[(usize, usize)],
    cfg: &GradCheckConfig,
    h: f64,
) -> Result<Vec<(CoordinateError, f64)>> {
    let segment_of = |p: usize| {
        (0..model.num_segments())
            .find(|&k| model.segment_params(k).contains(&p))
            .unwrap_or(0)
    };
    let eval = |store: &ParamStore<f64>, seg: usize| -> Result<(f64, Vec<i8>)> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, Mode::Eval);
        let x = ctx.input(acts[seg].clone());
        let l = loss_of(model, &ctx, seg, x, target)?.value().item();
        Ok((l, tape.relu_signs()))
    };
    let base = (0..model.num_segments())
        .map(|k| eval(params, k))
        .collect::<Result<Vec<_>>>()?;
    let mut work = params.clone();
    let mut out = Vec::with_capacity(coords.len());
    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    for &(p, j) in coords {
        let id = ids[p];
        let seg = segment_of(p);
        let orig = work.value(id).data()[j];
        let a = analytic
            .get(id)
            .grad
            .as_ref()
            .map_or(0.0, |g| g.data()[j]);
        let rel = |n: f64| (a - n).abs() / a.abs().max(n.abs()).max(cfg.abs_floor);
        let mut at = |v: f64| -> Result<(f64, Vec<i8>)> {
            work.get_mut(id).value.data_mut()[j] = v;
            let r = eval(&work, seg);
            work.get_mut(id).value.data_mut()[j] = orig;
            r
        };
        let (f0, s0) = &base[seg];
        let mut step = h;
        let mut raw = None;
        let (numeric, scheme) = loop {
            let (plus, minus) = (at(orig + step)?, at(orig - step)?);
            let central = (plus.0 - minus.0) / (2.0 * step);
            raw.get_or_insert(central);
            if same_piece(&plus.1, &minus.1) {
                break (central, Scheme::Central);
            }
            // A ReLU flips on one side only: the other side stays on the
            // piece the analytic gradient was taken on.
            let side = if same_piece(&plus.1, s0) {
                Some((1.0, plus.0, Scheme::Forward))
            } else if same_piece(&minus.1, s0) {
                Some((-1.0, minus.0, Scheme::Backward))
            } else {
                None
            };
            let last = step / 10.0 < cfg.min_h * (1.0 - 1e-9);
            if let Some((dir, f1, scheme)) = side {
                let far = at(orig + dir * 2.0 * step)?;
                if same_piece(&far.1, s0) {
                    break (dir * (4.0 * f1 - 3.0 * f0 - far.0) / (2.0 * step), scheme);
                }
                if last {
                    break (dir * (f1 - f0) / step, scheme);
                }
            } else if last {
                break (central, Scheme::Unresolved);
            }
            step /= 10.0;
        };
        let raw = raw.unwrap_or(numeric);
        out.push((
            CoordinateError {
                param: params.get(id).name.clone(),
                index: j,
                analytic: a,
                numeric,
                rel_err: rel(numeric),
                h: step,
                scheme,
            },
            rel(raw),
        ));
    }
    Ok(out)
}

/// Every ReLU input on the same side of zero, counting zero as inactive.
fn same_piece(a: &[i8], b: &[i8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (*x > 0) == (*y > 0))
}

fn summarize(h: f64, total: usize, errs: Vec<(CoordinateError, f64)>, seconds: f64) -> GradCheckReport {
    let count = |f: &dyn Fn(&CoordinateError) -> bool| errs.iter().filter(|(e, _)| f(e)).count();
    let resolved = || {
        errs.iter()
            .map(|(e, _)| e)
            .filter(|e| e.scheme != Scheme::Unresolved)
    };
    let worst = resolved().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).cloned();
    GradCheckReport {
        h,
        checked: errs.len(),
        total,
        max_rel_err_raw: errs.iter().map(|(_, raw)| *raw).fold(0.0, f64::max),
        kinks: count(&|e| e.scheme != Scheme::Central || e.h < h),
        refined: count(&|e| e.scheme == Scheme::Central && e.h < h),
        one_sided: count(&|e| matches!(e.scheme, Scheme::Forward | Scheme::Backward)),
        unresolved: count(&|e| e.scheme == Scheme::Unresolved),
        max_rel_err: worst.as_ref().map_or(0.0, |w| w.rel_err),
        max_abs_err: resolved().map(|e| (e.analytic - e.numeric).abs()).fold(0.0, f64::max),
        worst,
        coordinates: errs.into_iter().map(|(e, _)| e).collect(),
        seconds,
    }
}

/// Compares the analytic gradient of the MSE between `model(input)` and
/// `target` with central differences on a random share of the trainable
/// coordinates. Runs in eval mode so batch norm uses its running
/// statistics.
pub fn gradient_check<M: Segmented>(
    model: &M,
    params: &ParamStore<f64>,
    input: &Tensor<f64>,
    target: &Tensor<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let started = Instant::now();
    let (coords, total) = sample_coordinates(params, cfg.fraction, cfg.seed)?;
    let (grads, acts) = analytic(model, params, input, target)?;
    let errs = check_coordinates(model, params, &grads, &acts, target, &coords, cfg, cfg.h)?;
    Ok(summarize(cfg.h, total, errs, started.elapsed().as_secs_f64()))
}

/// The same coordinates checked at each step size in `hs`.
pub fn h_sweep<M: Segmented>(
    model: &M,
    params: &ParamStore<f64>,
    input: &Tensor<f64>,
    target: &Tensor<f64>,
    cfg: &GradCheckConfig,
    hs: &[f64],
) -> Result<Vec<GradCheckReport>> {
    let (coords, total) = sample_coordinates(params, cfg.fraction, cfg.seed)?;
    let (grads, acts) = analytic(model, params, input, target)?;
    hs.iter()
        .map(|&h| {
            let started = Instant::now();
            let errs =
                check_coordinates(model, params, &grads, &acts, target, &coords, cfg, h)?;
            Ok(summarize(h, total, errs, started.elapsed().as_secs_f64()))
        })
        .collect()
}

/// One train-mode pass so batch-norm running statistics reflect `input`
/// rather than their initial values.
pub fn warm_batch_norm(model: &Windformer, params: &mut ParamStore<f64>, input: &Tensor<f64>) -> Result<()> {
    if !params.iter().any(|(_, p)| p.kind == ParamKind::Buffer) {
        return Ok(());
    }
    let updates = {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &*params, Mode::Train);
        model.forward(&ctx, ctx.input(input.clone()))?;
        ctx.into_updates()
    };
    apply_updates(params, updates);
    Ok(())
}

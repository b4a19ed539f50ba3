//! Parameterized layers built on the tape.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Once;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::param::{ParamId, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: the tape being recorded, the parameter values it reads,
/// and the running-statistic updates produced along the way.
pub struct Ctx<'t, T: Scalar> {
    tape: &'t Tape<T>,
    store: &'t ParamStore<T>,
    mode: Mode,
    cache: RefCell<HashMap<ParamId, Var<'t, T>>>,
    updates: RefCell<Vec<(ParamId, Tensor<T>)>>,
}

impl<'t, T: Scalar> Ctx<'t, T> {
    pub fn new(tape: &'t Tape<T>, store: &'t ParamStore<T>, mode: Mode) -> Self {
        Self {
            tape,
            store,
            mode,
            cache: RefCell::new(HashMap::new()),
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'t ParamStore<T> {
        self.store
    }

    /// The parameter as a tape leaf; repeated lookups share one leaf.
    pub fn p(&self, id: ParamId) -> Var<'t, T> {
        *self
            .cache
            .borrow_mut()
            .entry(id)
            .or_insert_with(|| self.tape.param(id, self.store.value(id).clone()))
    }

    pub fn input(&self, value: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(value)
    }

    fn record_update(&self, id: ParamId, value: Tensor<T>) {
        self.updates.borrow_mut().push((id, value));
    }

    /// Buffer updates (batch-norm running stats) to apply after the step.
    pub fn into_updates(self) -> Vec<(ParamId, Tensor<T>)> {
        self.updates.into_inner()
    }
}

pub fn apply_updates<T: Scalar>(store: &mut ParamStore<T>, updates: Vec<(ParamId, Tensor<T>)>) {
    for (id, v) in updates {
        store.get_mut(id).value = v;
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::trunc_normal(&[d_out, d_in], INIT_STD, rng),
            ParamKind::Trainable,
        );
        let bias = bias.then(|| {
            store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), ParamKind::Trainable)
        });
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.linear(ctx.p(self.weight), self.bias.map(|b| ctx.p(b)))
    }
}

/// Same-padded 2-D convolution over channels-last maps.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::trunc_normal(&[c_out, c_in, kernel, kernel], INIT_STD, rng),
            ParamKind::Trainable,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), ParamKind::Trainable);
        Self {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(ctx.p(self.weight), Some(ctx.p(self.bias)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim]), ParamKind::Trainable),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), ParamKind::Trainable),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(ctx.p(self.gamma), ctx.p(self.beta), NORM_EPS)
    }
}

/// Batch norm over the trailing channel axis with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batches_tracked: ParamId,
}

static UNTRACKED_EVAL: Once = Once::new();

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim]), ParamKind::Trainable),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), ParamKind::Trainable),
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros(&[dim]),
                ParamKind::Buffer,
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::ones(&[dim]),
                ParamKind::Buffer,
            ),
            batches_tracked: store.add(
                format!("{name}.batches_tracked"),
                Tensor::zeros(&[1]),
                ParamKind::Buffer,
            ),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (gamma, beta) = (ctx.p(self.gamma), ctx.p(self.beta));
        match ctx.mode() {
            Mode::Train => {
                let (y, stats) = x.batch_norm_train(gamma, beta, NORM_EPS)?;
                let m = T::lit(BN_MOMENTUM);
                let blend = |id: ParamId, batch: &Tensor<T>| {
                    let old = ctx.store().value(id);
                    let data = old
                        .data()
                        .iter()
                        .zip(batch.data())
                        .map(|(o, b)| (T::one() - m) * *o + m * *b)
                        .collect();
                    Tensor::from_parts(old.shape().to_vec(), data)
                };
                ctx.record_update(self.running_mean, blend(self.running_mean, &stats.mean));
                ctx.record_update(self.running_var, blend(self.running_var, &stats.var));
                let tracked = ctx.store().value(self.batches_tracked).map(|v| v + T::one());
                ctx.record_update(self.batches_tracked, tracked);
                Ok(y)
            }
            Mode::Eval => {
                let store = ctx.store();
                if store.value(self.batches_tracked).item() == T::zero() {
                    UNTRACKED_EVAL.call_once(|| {
                        log::warn!(
                            "batch norm evaluated before any training step; using identity statistics"
                        )
                    });
                }
                x.batch_norm_eval(
                    gamma,
                    beta,
                    store.value(self.running_mean),
                    store.value(self.running_var),
                    NORM_EPS,
                )
            }
        }
    }
}

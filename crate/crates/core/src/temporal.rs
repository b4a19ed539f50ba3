//! Time feature extraction: recurrent cells over the scene sequence and the
//! per-cell turbine embedding that collapses the time axis.
//!
//! All maps are channels-last, `[B, H, W, C]`. The flattened Bi-GRU variant
//! works on `[B, H*W*F]` instead and decodes back to a grid.

use rand::Rng;

use crate::autograd::Var;
use crate::config::{EmbedNorm, ModelConfig, TemporalVariant};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, LayerNorm, Linear};
use crate::param::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// A projection over the trailing channel axis: a same-padded convolution
/// for gridded states, a dense layer for flattened ones.
#[derive(Clone, Debug)]
pub enum Proj {
    Conv(Conv2d),
    Dense(Linear),
}

impl Proj {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: Option<usize>,
        rng: &mut R,
    ) -> Self {
        match kernel {
            Some(k) => Proj::Conv(Conv2d::new(store, name, c_in, c_out, k, rng)),
            None => Proj::Dense(Linear::new(store, name, c_in, c_out, true, rng)),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            Proj::Conv(c) => c.forward(ctx, x),
            Proj::Dense(l) => l.forward(ctx, x),
        }
    }

    /// Bias parameter, for tests that force gate saturation.
    pub fn bias(&self) -> crate::param::ParamId {
        match self {
            Proj::Conv(c) => c.bias,
            Proj::Dense(l) => l.bias.expect("recurrent projections carry a bias"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Gru,
    Rnn,
    Lstm,
}

/// One recurrent cell. `gates` produces `[z, r]` for the GRU, `[i, f, o, g]`
/// for the LSTM and the new state directly for the plain RNN; `cand` is the
/// GRU candidate projection.
#[derive(Clone, Debug)]
pub struct Cell {
    pub kind: CellKind,
    pub hidden: usize,
    pub gates: Proj,
    pub cand: Option<Proj>,
}

pub struct State<'t, T: Scalar> {
    pub h: Var<'t, T>,
    pub c: Option<Var<'t, T>>,
}

impl Cell {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: CellKind,
        c_in: usize,
        hidden: usize,
        kernel: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let width = match kind {
            CellKind::Gru => 2 * hidden,
            CellKind::Rnn => hidden,
            CellKind::Lstm => 4 * hidden,
        };
        let gates = Proj::new(store, &format!("{name}.gates"), c_in + hidden, width, kernel, rng);
        let cand = (kind == CellKind::Gru).then(|| {
            Proj::new(store, &format!("{name}.cand"), c_in + hidden, hidden, kernel, rng)
        });
        Self {
            kind,
            hidden,
            gates,
            cand,
        }
    }

    pub fn zero_state<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> State<'t, T> {
        let mut shape = x.shape();
        *shape.last_mut().expect("rank >= 1") = self.hidden;
        let zeros = || ctx.input(Tensor::zeros(&shape));
        State {
            h: zeros(),
            c: (self.kind == CellKind::Lstm).then(zeros),
        }
    }

    /// One step. For the GRU: `z, r = σ(P[x, h])`, `h̃ = tanh(P'[x, r⊙h])`,
    /// `h ← (1 − z)⊙h + z⊙h̃`.
    pub fn step<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        x: Var<'t, T>,
        state: &State<'t, T>,
    ) -> Result<State<'t, T>> {
        let (xs, hs) = (x.shape(), state.h.shape());
        if xs[..xs.len() - 1] != hs[..hs.len() - 1] {
            return Err(Error::shape("recurrent step", &xs, &hs));
        }
        let axis = xs.len() - 1;
        let h = state.h;
        let n = self.hidden;
        let xh = Var::concat(&[x, h], axis)?;
        match self.kind {
            CellKind::Gru => {
                let zr = self.gates.forward(ctx, xh)?.sigmoid();
                let z = zr.slice(axis, 0, n)?;
                let r = zr.slice(axis, n, n)?;
                let xrh = Var::concat(&[x, r.mul(h)?], axis)?;
                let cand = self.cand.as_ref().expect("gru has a candidate");
                let h_tilde = cand.forward(ctx, xrh)?.tanh();
                let h_new = h.add(z.mul(h_tilde.sub(h)?)?)?;
                Ok(State { h: h_new, c: None })
            }
            CellKind::Rnn => Ok(State {
                h: self.gates.forward(ctx, xh)?.tanh(),
                c: None,
            }),
            CellKind::Lstm => {
                let g = self.gates.forward(ctx, xh)?;
                let i = g.slice(axis, 0, n)?.sigmoid();
                let f = g.slice(axis, n, n)?.sigmoid();
                let o = g.slice(axis, 2 * n, n)?.sigmoid();
                let cand = g.slice(axis, 3 * n, n)?.tanh();
                let c_prev = state.c.expect("lstm carries a cell state");
                let c = f.mul(c_prev)?.add(i.mul(cand)?)?;
                Ok(State {
                    h: o.mul(c.tanh())?,
                    c: Some(c),
                })
            }
        }
    }

    /// Hidden state after each step, in input order.
    pub fn run<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, xs: &[Var<'t, T>]) -> Result<Vec<Var<'t, T>>> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Contract("empty input sequence".into()))?;
        let mut state = self.zero_state(ctx, first);
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            state = self.step(ctx, x, &state)?;
            out.push(state.h);
        }
        Ok(out)
    }
}

/// Runs `fwd` over `t = 1..T` and `bwd` over `t = T..1`; step `t` of the
/// result is `[→H_t, ←H_t]` along channels.
pub fn bidirectional<'t, T: Scalar>(
    ctx: &Ctx<'t, T>,
    xs: &[Var<'t, T>],
    fwd: &Cell,
    bwd: &Cell,
) -> Result<Vec<Var<'t, T>>> {
    let forward = fwd.run(ctx, xs)?;
    let reversed: Vec<_> = xs.iter().rev().copied().collect();
    let mut backward = bwd.run(ctx, &reversed)?;
    backward.reverse();
    let axis = forward[0].shape().len() - 1;
    forward
        .into_iter()
        .zip(backward)
        .map(|(f, b)| Var::concat(&[f, b], axis))
        .collect()
}

/// Temporal stack for every ablation variant.
#[derive(Clone, Debug)]
pub enum TemporalModule {
    /// Raw scenes pass straight to the embedding.
    Empty { channels: usize },
    Conv { fwd: Cell, bwd: Option<Cell> },
    /// Non-convolutional Bi-GRU on flattened scenes, decoded back to a
    /// `[B, H, W, k]` grid per step.
    Flat {
        fwd: Cell,
        bwd: Cell,
        decoder: Linear,
        grid: (usize, usize),
        channels: usize,
    },
}

impl TemporalModule {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        variant: TemporalVariant,
        grid: (usize, usize),
        rng: &mut R,
    ) -> Self {
        let (f, h, k) = (cfg.num_features, cfg.hidden_channels, Some(cfg.gru_kernel));
        let mut cell = |name: &str, kind, c_in, hidden, kernel| {
            Cell::new(store, &format!("temporal.{name}"), kind, c_in, hidden, kernel, rng)
        };
        match variant {
            TemporalVariant::Empty => TemporalModule::Empty { channels: f },
            TemporalVariant::Convgru => TemporalModule::Conv {
                fwd: cell("fwd", CellKind::Gru, f, h, k),
                bwd: None,
            },
            TemporalVariant::BiConvgru | TemporalVariant::BiConvrnn | TemporalVariant::BiConvlstm => {
                let kind = match variant {
                    TemporalVariant::BiConvgru => CellKind::Gru,
                    TemporalVariant::BiConvrnn => CellKind::Rnn,
                    _ => CellKind::Lstm,
                };
                let fwd = cell("fwd", kind, f, h, k);
                let bwd = cell("bwd", kind, f, h, k);
                TemporalModule::Conv {
                    fwd,
                    bwd: Some(bwd),
                }
            }
            TemporalVariant::BiGru => {
                let flat_in = grid.0 * grid.1 * f;
                let fh = cfg.flat_hidden;
                let fwd = cell("fwd", CellKind::Gru, flat_in, fh, None);
                let bwd = cell("bwd", CellKind::Gru, flat_in, fh, None);
                let channels = cfg.flat_decode_channels;
                let decoder = Linear::new(
                    store,
                    "temporal.decoder",
                    2 * fh,
                    grid.0 * grid.1 * channels,
                    true,
                    rng,
                );
                TemporalModule::Flat {
                    fwd,
                    bwd,
                    decoder,
                    grid,
                    channels,
                }
            }
        }
    }

    /// Channels per cell per step handed to the embedding.
    pub fn out_channels(&self) -> usize {
        match self {
            TemporalModule::Empty { channels } | TemporalModule::Flat { channels, .. } => *channels,
            TemporalModule::Conv { fwd, bwd } => fwd.hidden * if bwd.is_some() { 2 } else { 1 },
        }
    }

    /// `xs[t]` is `[B, H, W, F]`; returns one `[B, H, W, out_channels]` map
    /// per step.
    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        xs: &[Var<'t, T>],
    ) -> Result<Vec<Var<'t, T>>> {
        if xs.is_empty() {
            return Err(Error::Contract("empty input sequence".into()));
        }
        match self {
            TemporalModule::Empty { .. } => Ok(xs.to_vec()),
            TemporalModule::Conv { fwd, bwd: None } => fwd.run(ctx, xs),
            TemporalModule::Conv {
                fwd,
                bwd: Some(bwd),
            } => bidirectional(ctx, xs, fwd, bwd),
            TemporalModule::Flat {
                fwd,
                bwd,
                decoder,
                grid,
                channels,
            } => {
                let shape = xs[0].shape();
                let b = shape[0];
                let flat: Vec<_> = xs
                    .iter()
                    .map(|x| x.reshape(&[b, shape[1] * shape[2] * shape[3]]))
                    .collect::<Result<_>>()?;
                bidirectional(ctx, &flat, fwd, bwd)?
                    .into_iter()
                    .map(|h| decoder.forward(ctx, h)?.reshape(&[b, grid.0, grid.1, *channels]))
                    .collect()
            }
        }
    }
}

/// Concatenates each cell's features across all steps and projects them to
/// the embedding width, followed by an optional LayerNorm.
#[derive(Clone, Debug)]
pub struct TurbineEmbed {
    pub proj: Linear,
    pub norm: Option<LayerNorm>,
}

impl TurbineEmbed {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        steps: usize,
        channels: usize,
        embed_dim: usize,
        norm: EmbedNorm,
        rng: &mut R,
    ) -> Self {
        let proj = Linear::new(store, "embed.proj", steps * channels, embed_dim, true, rng);
        let norm = (norm == EmbedNorm::LayerNorm).then(|| LayerNorm::new(store, "embed.norm", embed_dim));
        Self { proj, norm }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        hidden_seq: &[Var<'t, T>],
    ) -> Result<Var<'t, T>> {
        let first = hidden_seq
            .first()
            .ok_or_else(|| Error::Contract("empty hidden sequence".into()))?;
        let shape = first.shape();
        if let Some(other) = hidden_seq.iter().find(|v| v.shape() != shape) {
            return Err(Error::shape("turbine_embed", &shape, &other.shape()));
        }
        let cat = Var::concat(hidden_seq, shape.len() - 1)?;
        let y = self.proj.forward(ctx, cat)?;
        match &self.norm {
            Some(n) => n.forward(ctx, y),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests;

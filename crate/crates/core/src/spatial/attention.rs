use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, LayerNorm, Linear, INIT_STD};
use crate::param::{ParamId, ParamKind, ParamStore};
use crate::spatial::window::{
    cyclic_shift, relative_position_index, reverse_shift, window_partition, window_reverse,
};
use crate::tensor::{Scalar, Tensor};

/// Multi-head self-attention inside fixed-size windows.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
    pub window: usize,
    pub bias_table: Option<ParamId>,
    rel_index: Vec<usize>,
}

impl WindowAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        rel_pos_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        let bias_table = rel_pos_bias.then(|| {
            let span = 2 * window - 1;
            store.add(
                format!("{name}.rel_pos_bias"),
                Tensor::trunc_normal(&[span * span, heads], INIT_STD, rng),
                ParamKind::Trainable,
            )
        });
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, true, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, true, rng),
            heads,
            dim,
            window,
            bias_table,
            rel_index: relative_position_index(window),
        })
    }

    /// `windows` is `[B * nW, N, C]`; `mask` is `[nW, 1, N, N]`. Returns the
    /// projected output and the post-softmax weights `[B * nW, heads, N, N]`.
    pub fn forward_with_weights<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        windows: Var<'t, T>,
        mask: Option<&Tensor<T>>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let s = windows.shape();
        let (bw, n, c) = (s[0], s[1], s[2]);
        if c != self.dim {
            return Err(Error::shape("window_attention", &s, &[bw, n, self.dim]));
        }
        let (nh, dh) = (self.heads, c / self.heads);
        let qkv = self
            .qkv
            .forward(ctx, windows)?
            .reshape(&[bw, n, 3, nh, dh])?
            .permute(&[2, 0, 3, 1, 4])?;
        let part = |i| qkv.slice(0, i, 1)?.reshape(&[bw * nh, n, dh]);
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let mut scores = q
            .bmm(k, true)?
            .scale(1.0 / (dh as f64).sqrt())
            .reshape(&[bw, nh, n, n])?;
        if let Some(table) = self.bias_table {
            if n != self.window * self.window {
                return Err(Error::Contract(format!(
                    "relative position bias expects {} tokens per window, got {n}",
                    self.window * self.window
                )));
            }
            let bias = ctx
                .p(table)
                .gather_rows(&self.rel_index)?
                .reshape(&[n, n, nh])?
                .permute(&[2, 0, 1])?;
            scores = scores.add(bias)?;
        }
        if let Some(m) = mask {
            let nw = m.shape()[0];
            scores = scores
                .reshape(&[bw / nw, nw, nh, n, n])?
                .add(ctx.input(m.clone()))?
                .reshape(&[bw, nh, n, n])?;
        }
        let attn = scores.softmax()?;
        let out = attn
            .reshape(&[bw * nh, n, n])?
            .bmm(v, false)?
            .reshape(&[bw, nh, n, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[bw, n, c])?;
        Ok((self.proj.forward(ctx, out)?, attn))
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        windows: Var<'t, T>,
        mask: Option<&Tensor<T>>,
    ) -> Result<Var<'t, T>> {
        Ok(self.forward_with_weights(ctx, windows, mask)?.0)
    }
}

/// `x + Attn(LN(x))` then `x + MLP(LN(x))`, attention over windows that are
/// cyclically shifted by `shift` cells (0 for W-MSA).
#[derive(Clone, Debug)]
pub struct ShiftWindowBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub window: usize,
    pub shift: usize,
}

impl ShiftWindowBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        shift: usize,
        mlp_ratio: usize,
        rel_pos_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: WindowAttention::new(
                store,
                &format!("{name}.attn"),
                dim,
                heads,
                window,
                rel_pos_bias,
                rng,
            )?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), dim, mlp_ratio * dim, true, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), mlp_ratio * dim, dim, true, rng),
            window,
            shift,
        })
    }

    /// `x` is `[B, H, W, C]`; `mask` must match this block's shift.
    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        x: Var<'t, T>,
        mask: Option<&Tensor<T>>,
    ) -> Result<Var<'t, T>> {
        let s = x.shape();
        let (h, w) = (s[1], s[2]);
        let mut y = self.norm1.forward(ctx, x)?;
        if self.shift > 0 {
            y = cyclic_shift(y, self.shift)?;
        }
        let win = window_partition(y, self.window)?;
        let attended = self.attn.forward(ctx, win, mask)?;
        let mut y = window_reverse(attended, self.window, h, w)?;
        if self.shift > 0 {
            y = reverse_shift(y, self.shift)?;
        }
        let x = x.add(y)?;
        let m = self.fc2.forward(ctx, self.fc1.forward(ctx, self.norm2.forward(ctx, x)?)?.relu())?;
        x.add(m)
    }
}

/// Convolutional stand-in for a shift-window block:
/// `x + Conv3(ReLU(Conv3(LN(x))))`.
#[derive(Clone, Debug)]
pub struct CnnBlock {
    pub norm: LayerNorm,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl CnnBlock {
    /// Inner width chosen so the block has about as many weights as a
    /// shift-window block of the same width: `(4 + 2r) C / 18`.
    pub fn matched_width(dim: usize, mlp_ratio: usize) -> usize {
        ((4 + 2 * mlp_ratio) * dim / 18).max(1)
    }

    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Self {
        let inner = Self::matched_width(dim, mlp_ratio);
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), dim, inner, 3, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), inner, dim, 3, rng),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.conv1.forward(ctx, self.norm.forward(ctx, x)?)?.relu();
        x.add(self.conv2.forward(ctx, y)?)
    }
}

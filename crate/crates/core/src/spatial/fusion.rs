use rand::Rng;

use crate::autograd::Var;
use crate::config::FusionVariant;
use crate::error::Result;
use crate::nn::{BatchNorm, Ctx, Linear};
use crate::param::ParamStore;
use crate::tensor::Scalar;

/// `proj2 -> BN -> ReLU -> proj1 -> BN`, read right to left. On the detail
/// branch the projections are 1x1 convolutions, which on channels-last maps
/// are dense layers over the channel axis.
#[derive(Clone, Debug)]
pub struct Branch {
    pub proj1: Linear,
    pub bn1: BatchNorm,
    pub proj2: Linear,
    pub bn2: BatchNorm,
}

impl Branch {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        reduced: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            proj1: Linear::new(store, &format!("{name}.conv1"), dim, reduced, true, rng),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), reduced),
            proj2: Linear::new(store, &format!("{name}.conv2"), reduced, dim, true, rng),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), dim),
        }
    }

    fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.bn1.forward(ctx, self.proj1.forward(ctx, x)?)?.relu();
        self.bn2.forward(ctx, self.proj2.forward(ctx, y)?)
    }
}

/// `X' = X ⊗ σ(D(X) + G(X))` with a pointwise detail branch `D` and a pooled
/// global branch `G` broadcast over space. Ablations drop a branch entirely.
#[derive(Clone, Debug)]
pub struct ChannelFusion {
    pub detail: Option<Branch>,
    pub global: Option<Branch>,
}

impl ChannelFusion {
    /// Returns `None` for the `empty` variant.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        reduction: usize,
        variant: FusionVariant,
        rng: &mut R,
    ) -> Option<Self> {
        let mut reduced = dim / reduction;
        if reduced == 0 {
            log::warn!("channel fusion width {dim} < reduction {reduction}; using 1 channel");
            reduced = 1;
        }
        let (detail, global) = match variant {
            FusionVariant::Empty => return None,
            FusionVariant::Full => (true, true),
            FusionVariant::DetailOnly => (true, false),
            FusionVariant::GlobalOnly => (false, true),
        };
        let detail = detail.then(|| Branch::new(store, &format!("{name}.detail"), dim, reduced, rng));
        let global = global.then(|| Branch::new(store, &format!("{name}.global"), dim, reduced, rng));
        Some(Self { detail, global })
    }

    /// The gate `σ(D + G)`; `[B, 1, 1, C]` when only the global branch is kept.
    pub fn gate<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        let d = self.detail.as_ref().map(|b| b.forward(ctx, x)).transpose()?;
        let g = match &self.global {
            Some(b) => {
                let pooled = x.global_avg_pool()?;
                Some(b.forward(ctx, pooled)?.reshape(&[s[0], 1, 1, s[3]])?)
            }
            None => None,
        };
        let logits = match (d, g) {
            (Some(d), Some(g)) => d.add(g)?,
            (Some(d), None) => d,
            (None, Some(g)) => g,
            (None, None) => unreachable!("empty fusion is not constructed"),
        };
        Ok(logits.sigmoid())
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.mul(self.gate(ctx, x)?)
    }
}

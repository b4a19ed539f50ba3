use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Ctx, LayerNorm, Linear};
use crate::param::ParamStore;
use crate::tensor::Scalar;

/// 2x2 neighbourhood merge: `[B, H, W, C] -> [B, H/2, W/2, 2C]` by
/// concatenating the four cells, LayerNorm over `4C`, then a bias-free
/// projection to `2C`.
#[derive(Clone, Debug)]
pub struct TurbineMerge {
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl TurbineMerge {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), 4 * dim),
            reduction: Linear::new(store, &format!("{name}.reduction"), 4 * dim, 2 * dim, false, rng),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Contract(format!("turbine merge needs even dims, got {h}x{w}")));
        }
        // Neighbour order (0,0), (1,0), (0,1), (1,1).
        let cat = x
            .reshape(&[b, h / 2, 2, w / 2, 2, c])?
            .permute(&[0, 1, 3, 4, 2, 5])?
            .reshape(&[b, h / 2, w / 2, 4 * c])?;
        self.reduction.forward(ctx, self.norm.forward(ctx, cat)?)
    }
}

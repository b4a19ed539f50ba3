use std::ops::Range;

use rand::Rng;

use crate::autograd::Var;
use crate::config::{AblationSpec, FusionVariant, ModelConfig, SpatialVariant};
use crate::data::{SceneSequence, TurbineLayout};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear};
use crate::param::ParamStore;
use crate::spatial::attention::{CnnBlock, ShiftWindowBlock};
use crate::spatial::fusion::ChannelFusion;
use crate::spatial::merge::TurbineMerge;
use crate::spatial::window::{attention_mask, pad_to_window_multiple, round_up, PadMask};
use crate::temporal::{TemporalModule, TurbineEmbed};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub enum Block {
    Swin(ShiftWindowBlock),
    Cnn(CnnBlock),
}

/// Grid sizes before and after padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
}

impl Geometry {
    pub fn pad_mask(&self, level: usize) -> PadMask {
        PadMask::new(
            self.height,
            self.width,
            self.padded_height,
            self.padded_width,
            level,
        )
    }
}

/// Two blocks, an optional 2x2 merge and an optional channel fusion.
#[derive(Clone, Debug)]
pub struct Stage {
    pub level: usize,
    pub dim: usize,
    pub blocks: Vec<Block>,
    pub merge: Option<TurbineMerge>,
    pub fusion: Option<ChannelFusion>,
}

impl Stage {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        spatial: SpatialVariant,
        fusion: FusionVariant,
        level: usize,
        map: (usize, usize),
        merge: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let dim = cfg.stage_dim(level);
        let name = format!("stage{}", level + 1);
        let window = cfg.window_size;
        // A map no larger than one window has nothing to shift across.
        let shift = if spatial == SpatialVariant::ShiftWindow && map.0.min(map.1) > window {
            window / 2
        } else {
            0
        };
        let blocks = (0..2)
            .map(|i| {
                let bname = format!("{name}.block{}", i + 1);
                Ok(match spatial {
                    SpatialVariant::Cnn => Block::Cnn(CnnBlock::new(store, &bname, dim, cfg.mlp_ratio, rng)),
                    _ => Block::Swin(ShiftWindowBlock::new(
                        store,
                        &bname,
                        dim,
                        cfg.heads[level],
                        window,
                        if i == 1 { shift } else { 0 },
                        cfg.mlp_ratio,
                        cfg.rel_pos_bias,
                        rng,
                    )?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let merge = merge.then(|| TurbineMerge::new(store, &format!("{name}.merge"), dim, rng));
        let out_dim = if merge.is_some() { 2 * dim } else { dim };
        let fusion = ChannelFusion::new(
            store,
            &format!("{name}.fusion"),
            out_dim,
            cfg.fusion_reduction,
            fusion,
            rng,
        );
        Ok(Self {
            level,
            dim,
            blocks,
            merge,
            fusion,
        })
    }

    pub fn out_dim(&self) -> usize {
        if self.merge.is_some() {
            2 * self.dim
        } else {
            self.dim
        }
    }

    /// Runs both blocks. Padded cells are masked as attention keys and reset
    /// to zero after every block so they carry no signal into the merge.
    pub fn forward_blocks<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        mut x: Var<'t, T>,
        geom: &Geometry,
    ) -> Result<Var<'t, T>> {
        let pad = geom.pad_mask(self.level);
        let keep = pad.any().then(|| ctx.input(pad.keep()));
        let (h, w) = (pad.height, pad.width);
        for block in &self.blocks {
            x = match block {
                Block::Swin(b) => {
                    let mask = attention_mask::<T>(h, w, b.window, b.shift, Some(&pad));
                    b.forward(ctx, x, mask.as_ref())?
                }
                Block::Cnn(b) => b.forward(ctx, x)?,
            };
            if let Some(k) = keep {
                x = x.mul(k)?;
            }
        }
        Ok(x)
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        x: Var<'t, T>,
        geom: &Geometry,
    ) -> Result<Var<'t, T>> {
        let mut x = self.forward_blocks(ctx, x, geom)?;
        if let Some(m) = &self.merge {
            x = m.forward(ctx, x)?;
            let pad = geom.pad_mask(self.level + 1);
            if pad.any() {
                x = x.mul(ctx.input(pad.keep()))?;
            }
        }
        if let Some(f) = &self.fusion {
            x = f.forward(ctx, x)?;
        }
        Ok(x)
    }
}

/// The full forecaster: temporal stack, turbine embedding, hierarchical
/// spatial stages and a linear head over the flattened final map.
///
/// The forward pass is split into segments (embedding, one per stage, head)
/// so that callers can restart it from a cached intermediate map.
#[derive(Clone, Debug)]
pub struct Windformer {
    pub cfg: ModelConfig,
    pub spec: AblationSpec,
    pub geometry: Geometry,
    pub num_turbines: usize,
    pub temporal: TemporalModule,
    pub embed: TurbineEmbed,
    pub stages: Vec<Stage>,
    pub head: Linear,
    segments: Vec<Range<usize>>,
}

impl Windformer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        cfg: &ModelConfig,
        spec: AblationSpec,
        layout: &TurbineLayout,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        layout.validate()?;
        let (h, w) = (layout.grid_height, layout.grid_width);
        let n = cfg.num_stages();
        let spatial = spec.spatial != SpatialVariant::Empty;
        let m = cfg.pad_multiple();
        let geometry = if spatial {
            Geometry {
                height: h,
                width: w,
                padded_height: round_up(h, m),
                padded_width: round_up(w, m),
            }
        } else {
            Geometry {
                height: h,
                width: w,
                padded_height: h,
                padded_width: w,
            }
        };
        let mut segments = Vec::new();
        let mut start = store.len();
        let mut close = |store: &ParamStore<T>, segments: &mut Vec<Range<usize>>| {
            segments.push(start..store.len());
            start = store.len();
        };
        let temporal = TemporalModule::new(store, cfg, spec.temporal, (h, w), rng);
        let embed = TurbineEmbed::new(
            store,
            cfg.seq_len,
            temporal.out_channels(),
            cfg.embed_dim,
            cfg.embed_norm,
            rng,
        );
        close(store, &mut segments);
        let mut stages = Vec::new();
        if spatial {
            for level in 0..n {
                let map = (geometry.padded_height >> level, geometry.padded_width >> level);
                stages.push(Stage::new(
                    store,
                    cfg,
                    spec.spatial,
                    spec.fusion,
                    level,
                    map,
                    level + 1 < n,
                    rng,
                )?);
                close(store, &mut segments);
            }
        }
        let head_in = match stages.last() {
            Some(s) => {
                let level = n - 1;
                (geometry.padded_height >> level) * (geometry.padded_width >> level) * s.out_dim()
            }
            None => h * w * cfg.embed_dim,
        };
        let head = Linear::new(store, "head", head_in, layout.num_turbines(), true, rng);
        close(store, &mut segments);
        Ok(Self {
            cfg: cfg.clone(),
            spec,
            geometry,
            num_turbines: layout.num_turbines(),
            temporal,
            embed,
            stages,
            head,
            segments,
        })
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    /// Indices of the parameters created by segment `k`.
    pub fn segment_params(&self, k: usize) -> Range<usize> {
        self.segments[k].clone()
    }

    /// Expected input shape `[B, T, H, W, F]` for batch size `b`.
    pub fn input_shape(&self, b: usize) -> Vec<usize> {
        vec![
            b,
            self.cfg.seq_len,
            self.geometry.height,
            self.geometry.width,
            self.cfg.num_features,
        ]
    }

    /// Segment 0 maps `[B, T, H, W, F]` to the padded embedding, segments
    /// `1..=stages` run one stage each and the last one applies the head.
    pub fn forward_segment<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        k: usize,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        if k == 0 {
            let s = x.shape();
            if s.len() != 5 || s[1..] != self.input_shape(s[0])[1..] {
                return Err(Error::Config(format!(
                    "input {s:?} does not match the model's [B, {}, {}, {}, {}]",
                    self.cfg.seq_len, self.geometry.height, self.geometry.width, self.cfg.num_features
                )));
            }
            let (b, t) = (s[0], s[1]);
            let xs = (0..t)
                .map(|i| x.slice(1, i, 1)?.reshape(&[b, s[2], s[3], s[4]]))
                .collect::<Result<Vec<_>>>()?;
            let hidden = self.temporal.forward(ctx, &xs)?;
            let e = self.embed.forward(ctx, &hidden)?;
            if self.stages.is_empty() {
                return Ok(e);
            }
            return Ok(pad_to_window_multiple(e, self.cfg.window_size, self.cfg.num_stages())?.0);
        }
        if k <= self.stages.len() {
            return self.stages[k - 1].forward(ctx, x, &self.geometry);
        }
        let s = x.shape();
        let flat = x.reshape(&[s[0], s[1..].iter().product()])?;
        self.head.forward(ctx, flat)
    }

    /// Runs segments `from..` on `x`.
    pub fn forward_from<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        from: usize,
        mut x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        for k in from..self.num_segments() {
            x = self.forward_segment(ctx, k, x)?;
        }
        Ok(x)
    }

    /// `[B, T, H, W, F] -> [B, L]`.
    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.forward_from(ctx, 0, x)
    }

    /// Runs the embedding and stage segments on an already padded map with
    /// the model's pad mask, then the head.
    pub fn forward_padded_embedding<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        embedding: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        self.forward_from(ctx, 1, embedding)
    }
}

/// Stacks sequences into the channels-last model input `[B, T, H, W, F]`
/// and the targets `[B, L]`.
pub fn stack_batch<T: Scalar>(seqs: &[&SceneSequence]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    let t = first.len();
    let s0 = &first.scenes[0];
    let (f, h, w) = (s0.num_features(), s0.height(), s0.width());
    let l = first.target.numel();
    let plane = h * w;
    let mut x = Vec::with_capacity(seqs.len() * t * plane * f);
    let mut y = Vec::with_capacity(seqs.len() * l);
    for seq in seqs {
        if seq.len() != t || seq.target.numel() != l {
            return Err(Error::Contract("sequences in a batch differ in length or turbines".into()));
        }
        for scene in &seq.scenes {
            let d = scene.features.data();
            if d.len() != f * plane {
                return Err(Error::shape("stack_batch", scene.features.shape(), &[f, h, w]));
            }
            for cell in 0..plane {
                for c in 0..f {
                    x.push(T::lit(d[c * plane + cell]));
                }
            }
        }
        y.extend(seq.target.data().iter().map(|&v| T::lit(v)));
    }
    Ok((
        Tensor::new(vec![seqs.len(), t, h, w, f], x)?,
        Tensor::new(vec![seqs.len(), l], y)?,
    ))
}

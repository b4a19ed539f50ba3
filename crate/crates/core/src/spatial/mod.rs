//! Spatial feature extraction: windowed self-attention stages, turbine
//! merging, channel fusion and the end-to-end model.

pub mod attention;
pub mod fusion;
pub mod merge;
pub mod model;
pub mod window;

pub use attention::{CnnBlock, ShiftWindowBlock, WindowAttention};
pub use fusion::ChannelFusion;
pub use merge::TurbineMerge;
pub use model::{stack_batch, Block, Geometry, Stage, Windformer};
pub use window::{
    attention_mask, build_shift_mask, cyclic_shift, pad_to_window_multiple, reverse_shift,
    window_partition, window_reverse, PadMask, MASK_VALUE,
};

#[cfg(test)]
mod tests;

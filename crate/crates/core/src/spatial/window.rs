//! Window geometry on channels-last maps `[B, H, W, C]`: padding, window
//! partitioning, cyclic shifts and the additive attention masks.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Additive logit for forbidden query/key pairs.
pub const MASK_VALUE: f64 = -1e9;

/// Which cells of a padded grid were added by padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PadMask {
    pub height: usize,
    pub width: usize,
    pub padded: Vec<bool>,
}

impl PadMask {
    /// Padding of an `h x w` grid up to `hp x wp`, viewed at a resolution
    /// `2^level` times coarser.
    pub fn new(h: usize, w: usize, hp: usize, wp: usize, level: usize) -> Self {
        let (height, width) = (hp >> level, wp >> level);
        let padded = (0..height * width)
            .map(|k| ((k / width) << level) >= h || ((k % width) << level) >= w)
            .collect();
        Self {
            height,
            width,
            padded,
        }
    }

    pub fn any(&self) -> bool {
        self.padded.iter().any(|&p| p)
    }

    /// `[1, H, W, 1]` with 0 at padded cells and 1 elsewhere.
    pub fn keep<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .padded
            .iter()
            .map(|&p| if p { T::zero() } else { T::one() })
            .collect();
        Tensor::new(vec![1, self.height, self.width, 1], data).expect("mask shape")
    }
}

pub fn round_up(n: usize, multiple: usize) -> usize {
    n.div_ceil(multiple) * multiple
}

/// Zero-pads `H` and `W` up to a multiple of `window * 2^(n_stages - 1)`.
pub fn pad_to_window_multiple<'t, T: Scalar>(
    x: Var<'t, T>,
    window: usize,
    n_stages: usize,
) -> Result<(Var<'t, T>, PadMask)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Contract(format!("expected [B, H, W, C], got {s:?}")));
    }
    let m = window << (n_stages - 1);
    let (hp, wp) = (round_up(s[1], m), round_up(s[2], m));
    let mask = PadMask::new(s[1], s[2], hp, wp, 0);
    let x = if hp != s[1] { x.pad(1, hp)? } else { x };
    let x = if wp != s[2] { x.pad(2, wp)? } else { x };
    Ok((x, mask))
}

/// `[B, H, W, C] -> [B * nW, w * w, C]`, windows in row-major order.
pub fn window_partition<'t, T: Scalar>(x: Var<'t, T>, window: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    if h % window != 0 || w % window != 0 {
        return Err(Error::Contract(format!(
            "{h}x{w} map is not divisible into {window}x{window} windows"
        )));
    }
    x.reshape(&[b, h / window, window, w / window, window, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b * (h / window) * (w / window), window * window, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse<'t, T: Scalar>(
    windows: Var<'t, T>,
    window: usize,
    h: usize,
    w: usize,
) -> Result<Var<'t, T>> {
    let s = windows.shape();
    let c = s[2];
    let b = s[0] / ((h / window) * (w / window));
    windows
        .reshape(&[b, h / window, w / window, window, window, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, h, w, c])
}

/// Rolls rows and columns by `-shift`.
pub fn cyclic_shift<'t, T: Scalar>(x: Var<'t, T>, shift: usize) -> Result<Var<'t, T>> {
    let s = -(shift as isize);
    x.roll(1, s)?.roll(2, s)
}

pub fn reverse_shift<'t, T: Scalar>(x: Var<'t, T>, shift: usize) -> Result<Var<'t, T>> {
    let s = shift as isize;
    x.roll(1, s)?.roll(2, s)
}

/// Region id of every cell of the shifted map: cells that wrapped around
/// get ids distinct from their new window neighbours.
pub fn shift_regions(h: usize, w: usize, window: usize, shift: usize) -> Vec<usize> {
    let band = |i: usize, n: usize| {
        if shift == 0 || i < n - window {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    (0..h * w)
        .map(|k| band(k / w, h) * 3 + band(k % w, w))
        .collect()
}

/// Token order within each window, as produced by [`window_partition`] on a
/// single-channel `h x w` grid: `out[win][tok]` is a flat cell index.
pub fn window_cells(h: usize, w: usize, window: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for wi in 0..h / window {
        for wj in 0..w / window {
            let mut cells = Vec::with_capacity(window * window);
            for i in 0..window {
                for j in 0..window {
                    cells.push((wi * window + i) * w + wj * window + j);
                }
            }
            out.push(cells);
        }
    }
    out
}

/// `[nW, N, N]` additive mask: `MASK_VALUE` between tokens from different
/// pre-shift regions, 0 otherwise.
pub fn build_shift_mask(h: usize, w: usize, window: usize, shift: usize) -> Vec<f64> {
    let regions = shift_regions(h, w, window, shift);
    let mut out = Vec::new();
    for cells in window_cells(h, w, window) {
        for &q in &cells {
            for &k in &cells {
                out.push(if regions[q] == regions[k] { 0.0 } else { MASK_VALUE });
            }
        }
    }
    out
}

/// The combined shift and padding mask for one block as `[nW, 1, N, N]`,
/// or `None` when nothing is masked. Padded cells are masked as keys.
pub fn attention_mask<T: Scalar>(
    h: usize,
    w: usize,
    window: usize,
    shift: usize,
    pad: Option<&PadMask>,
) -> Option<Tensor<T>> {
    let pad = pad.filter(|p| p.any());
    if shift == 0 && pad.is_none() {
        return None;
    }
    let mut data = build_shift_mask(h, w, window, shift);
    if let Some(p) = pad {
        // Padded flags follow the cells through the cyclic shift.
        let shifted: Vec<bool> = (0..h * w)
            .map(|k| {
                let (i, j) = ((k / w + shift) % h, (k % w + shift) % w);
                p.padded[i * w + j]
            })
            .collect();
        let n = window * window;
        for (wi, cells) in window_cells(h, w, window).iter().enumerate() {
            for q in 0..n {
                for (kk, &cell) in cells.iter().enumerate() {
                    if shifted[cell] {
                        data[(wi * n + q) * n + kk] = MASK_VALUE;
                    }
                }
            }
        }
    }
    let nw = (h / window) * (w / window);
    let n = window * window;
    Some(Tensor::from_parts(
        vec![nw, 1, n, n],
        data.into_iter().map(T::lit).collect(),
    ))
}

/// For each (query, key) token pair of a window, the row of the relative
/// position bias table: `(di + w - 1) * (2w - 1) + (dj + w - 1)`.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let n = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(n * n);
    for q in 0..n {
        for k in 0..n {
            let di = (q / window) as isize - (k / window) as isize + window as isize - 1;
            let dj = (q % window) as isize - (k % window) as isize + window as isize - 1;
            idx.push(di as usize * span + dj as usize);
        }
    }
    idx
}

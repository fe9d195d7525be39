//! Binary masks for masked convolutions.
//!
//! A mask hides every kernel cell that would read the current pixel's
//! future in raster order. Cells strictly before the current-pixel cell
//! (rows above, or the same row to the left) are visible to all channels.
//! At the current-pixel cell itself, channels are split into successive
//! colour groups (R, G, B) and output group `g` may read input group `g'`
//! iff `g' < g` (type A) or `g' <= g` (type B).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskType {
    /// Excludes the current pixel's own colour group.
    A,
    /// Includes it.
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MaskSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub mask_type: MaskType,
    pub color_groups: usize,
    /// Kernel cell aligned with the pixel being predicted.
    pub center: (usize, usize),
}

impl MaskSpec {
    /// Square-style kernel whose current-pixel cell is the geometric centre.
    pub fn centered(kernel_h: usize, kernel_w: usize, mask_type: MaskType, color_groups: usize) -> Self {
        Self {
            kernel_h,
            kernel_w,
            mask_type,
            color_groups,
            center: (kernel_h / 2, kernel_w / 2),
        }
    }

    /// `1 x k` row kernel ending at the current pixel (used with left-only padding).
    pub fn row_causal(k: usize, mask_type: MaskType, color_groups: usize) -> Self {
        Self {
            kernel_h: 1,
            kernel_w: k,
            mask_type,
            color_groups,
            center: (0, k - 1),
        }
    }

    pub fn pointwise(mask_type: MaskType, color_groups: usize) -> Self {
        Self::centered(1, 1, mask_type, color_groups)
    }

    fn group_allowed(&self, out_group: usize, in_group: usize) -> bool {
        match self.mask_type {
            MaskType::A => in_group < out_group,
            MaskType::B => in_group <= out_group,
        }
    }

    /// Whether kernel cell `(r, c)` may connect input group `gi` to output group `go`.
    pub fn allowed(&self, r: usize, c: usize, go: usize, gi: usize) -> bool {
        let (cr, cc) = self.center;
        if r < cr || (r == cr && c < cc) {
            true
        } else if (r, c) == (cr, cc) {
            self.group_allowed(go, gi)
        } else {
            false
        }
    }
}

/// Colour group of channel `i` when `channels` are split into `groups` blocks.
pub fn channel_group(i: usize, channels: usize, groups: usize) -> usize {
    i / (channels / groups)
}

/// `[out_ch, in_ch, kh, kw]` mask with 1.0 where `spec` allows a connection.
pub fn build_mask(spec: &MaskSpec, in_ch: usize, out_ch: usize) -> Result<Tensor> {
    let g = spec.color_groups;
    if g == 0 || !in_ch.is_multiple_of(g) || !out_ch.is_multiple_of(g) {
        return Err(Error::Invalid(format!(
            "channels {in_ch}->{out_ch} not divisible into {g} colour groups"
        )));
    }
    if spec.center.0 >= spec.kernel_h || spec.center.1 >= spec.kernel_w {
        return Err(Error::Invalid(format!("mask centre outside kernel: {spec:?}")));
    }
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let mut mask = Tensor::zeros(&[out_ch, in_ch, kh, kw]);
    let data = mask.data_mut();
    for o in 0..out_ch {
        let go = channel_group(o, out_ch, g);
        for i in 0..in_ch {
            let gi = channel_group(i, in_ch, g);
            for r in 0..kh {
                for c in 0..kw {
                    if spec.allowed(r, c, go, gi) {
                        data[((o * in_ch + i) * kh + r) * kw + c] = 1.0;
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// Mask for a combined gate convolution: `halves` stacked copies of the
/// `half_ch`-output mask, so channel `k` of every half carries the same
/// colour group and the halves can be multiplied elementwise.
pub fn build_split_mask(spec: &MaskSpec, in_ch: usize, half_ch: usize, halves: usize) -> Result<Tensor> {
    let one = build_mask(spec, in_ch, half_ch)?;
    let parts = vec![one; halves];
    Tensor::stack(&parts)
}

//! Mask-driven alpha blending: `f(I, I_ctx, y) = y * I + (1 - y) * I_ctx`.
//!
//! Masks are single-channel and broadcast over colour channels. The same
//! kernel backs the differentiable blend node used in training.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::raster::{Raster, SoftMask};

/// Blends channel-planar `fg`/`bg` (`C x HW`) under an `HW` mask into `out`.
pub fn blend_planar<T: Float>(fg: &[T], bg: &[T], mask: &[T], out: &mut [T]) {
    let hw = mask.len();
    debug_assert_eq!(fg.len() % hw, 0);
    for ((o, f), b) in out.chunks_exact_mut(hw).zip(fg.chunks_exact(hw)).zip(bg.chunks_exact(hw)) {
        for p in 0..hw {
            let m = mask[p];
            o[p] = m * f[p] + (T::one() - m) * b[p];
        }
    }
}

pub fn superimpose(i: &Raster, i_ctx: &Raster, y: &SoftMask) -> Result<Raster> {
    if !i.same_shape(i_ctx) || i.height() != y.height() || i.width() != y.width() {
        return Err(Error::Contract(format!(
            "superimpose shapes differ: image {}x{}x{}, context {}x{}x{}, mask {}x{}",
            i.height(),
            i.width(),
            i.channels(),
            i_ctx.height(),
            i_ctx.width(),
            i_ctx.channels(),
            y.height(),
            y.width()
        )));
    }
    let c = i.channels();
    let mut out = Vec::with_capacity(i.data().len());
    for ((fp, bp), m) in i.data().chunks_exact(c).zip(i_ctx.data().chunks_exact(c)).zip(y.values()) {
        for ch in 0..c {
            let v = m * fp[ch] + (1.0 - m) * bp[ch];
            // rounding can step a hair outside the convex hull of the inputs
            out.push(v.clamp(fp[ch].min(bp[ch]), fp[ch].max(bp[ch])));
        }
    }
    Raster::new(i.height(), i.width(), c, out)
}

/// Object pasted into the context: `y_hat * I_R + (1 - y_hat) * I_ctx`.
pub fn make_fake_positive(i_r: &Raster, i_ctx: &Raster, y_hat: &SoftMask) -> Result<Raster> {
    superimpose(i_r, i_ctx, y_hat)
}

/// Background of `I_R` with the masked region replaced from the context.
pub fn make_fake_negative(i_r: &Raster, i_ctx: &Raster, y_hat: &SoftMask) -> Result<Raster> {
    superimpose(i_r, i_ctx, &y_hat.complement())
}

//! Small image-tensor helpers shared by augmentation, inference and the model.
//!
//! All tensors here are channel-major `(C, H, W)`.

use ndarray::{Array3, ArrayView3, Axis};

use crate::Real;

/// Bilinear resize with half-pixel centres and edge clamping (the
/// `align_corners = false` convention).
pub fn resize_bilinear<R: Real>(x: ArrayView3<'_, R>, out_h: usize, out_w: usize) -> Array3<R> {
    let (c, h, w) = x.dim();
    assert!(out_h > 0 && out_w > 0, "resize target must be non-empty");
    if (h, w) == (out_h, out_w) {
        return x.to_owned();
    }
    let rows = axis_weights(h, out_h);
    let cols = axis_weights(w, out_w);
    let mut out = Array3::<R>::zeros((c, out_h, out_w));
    for ch in 0..c {
        let src = x.index_axis(Axis(0), ch);
        let mut dst = out.index_axis_mut(Axis(0), ch);
        for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                let top = src[[y0, x0]] * (R::one() - fx) + src[[y0, x1]] * fx;
                let bottom = src[[y1, x0]] * (R::one() - fx) + src[[y1, x1]] * fx;
                dst[[oy, ox]] = top * (R::one() - fy) + bottom * fy;
            }
        }
    }
    out
}

fn axis_weights<R: Real>(src: usize, dst: usize) -> Vec<(usize, usize, R)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if hi == lo { 0.0 } else { pos - lo as f64 };
            (lo, hi, R::lit(frac))
        })
        .collect()
}

/// Mirror along the width axis.
pub fn hflip<R: Real>(x: ArrayView3<'_, R>) -> Array3<R> {
    x.slice(ndarray::s![.., .., ..;-1]).to_owned()
}

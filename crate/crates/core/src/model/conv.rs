//! Square-kernel 2-D convolution on a single `(C, H, W)` image, lowered to a
//! matrix product via im2col.

use ndarray::{Array1, Array2, Array3, ArrayView3, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<R: Real> {
    /// `(out, in · k · k)`, rows ordered channel-major then kernel row/col.
    pub(crate) weight: Array2<R>,
    pub(crate) bias: Array1<R>,
    pub(crate) in_channels: usize,
    pub(crate) kernel: usize,
    pub(crate) stride: usize,
    pub(crate) padding: usize,
}

/// What backward needs from a forward call.
#[derive(Debug)]
pub struct ConvTrace<R: Real> {
    cols: Array2<R>,
    input_hw: (usize, usize),
}

impl<R: Real> Conv2d<R> {
    /// Kaiming-normal weights, zero bias.
    pub fn init(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let weight = Array2::from_shape_simple_fn((out_channels, fan_in), || R::lit(normal.sample(rng)));
        Self {
            weight,
            bias: Array1::zeros(out_channels),
            in_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let o = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (o(h), o(w))
    }

    pub fn forward(&self, x: ArrayView3<'_, R>) -> (Array3<R>, ConvTrace<R>) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (ho, wo) = self.output_size(h, w);
        let cols = self.im2col(x, ho, wo);
        let mut out = self.weight.dot(&cols);
        for (mut row, &b) in out.outer_iter_mut().zip(self.bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        let out = out
            .into_shape_with_order((self.out_channels(), ho, wo))
            .expect("conv output shape");
        (out, ConvTrace { cols, input_hw: (h, w) })
    }

    /// Accumulates weight/bias gradients and, when `need_input` is set,
    /// returns the gradient w.r.t. the input.
    pub fn backward(
        &self,
        trace: ConvTrace<R>,
        grad_out: &Array3<R>,
        mut grad_weight: ArrayViewMut2<'_, R>,
        mut grad_bias: ArrayViewMut1<'_, R>,
        need_input: bool,
    ) -> Option<Array3<R>> {
        let (co, ho, wo) = grad_out.dim();
        let g = grad_out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((co, ho * wo))
            .expect("grad shape");
        ndarray::linalg::general_mat_mul(R::one(), &g, &trace.cols.t(), R::one(), &mut grad_weight);
        grad_bias.scaled_add(R::one(), &g.sum_axis(Axis(1)));
        if !need_input {
            return None;
        }
        let dcols = self.weight.t().dot(&g);
        Some(self.col2im(&dcols, trace.input_hw, (ho, wo)))
    }

    fn im2col(&self, x: ArrayView3<'_, R>, ho: usize, wo: usize) -> Array2<R> {
        let (c, h, w) = x.dim();
        let k = self.kernel;
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        if k == 1 && self.stride == 1 && self.padding == 0 {
            return Array2::from_shape_vec((c, h * w), src.to_vec()).expect("1x1 cols");
        }
        let plane = ho * wo;
        let mut out = vec![R::zero(); c * k * k * plane];
        for ch in 0..c {
            let chan = &src[ch * h * w..(ch + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ch * k + ky) * k + kx;
                    let dst = &mut out[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &chan[iy as usize * w..(iy as usize + 1) * w];
                        let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        Array2::from_shape_vec((c * k * k, plane), out).expect("cols shape")
    }

    fn col2im(&self, cols: &Array2<R>, (h, w): (usize, usize), (ho, wo): (usize, usize)) -> Array3<R> {
        let c = self.in_channels;
        let k = self.kernel;
        let cols = cols.as_standard_layout();
        let src = cols.as_slice().expect("standard layout");
        if k == 1 && self.stride == 1 && self.padding == 0 {
            return Array3::from_shape_vec((c, h, w), src.to_vec()).expect("1x1 col2im");
        }
        let plane = ho * wo;
        let mut out = vec![R::zero(); c * h * w];
        for ch in 0..c {
            let chan = &mut out[ch * h * w..(ch + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ch * k + ky) * k + kx;
                    let col = &src[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut chan[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] = dst_row[ix as usize] + col[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        Array3::from_shape_vec((c, h, w), out).expect("col2im shape")
    }
}

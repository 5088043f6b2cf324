//! Square convolution with zero padding, forward and backward.
//!
//! Convolutions are lowered to matrix products over an im2col buffer of shape
//! `[c_in * k * k, out_h * out_w]`, which the backward pass reuses.

use crate::tensor::Tensor;

pub(crate) const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }
}

pub(crate) fn im2col(input: &Tensor, g: &ConvGeometry) -> Vec<f64> {
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let (oh, ow) = g.out_size(h, w);
    let p = oh * ow;
    let mut cols = vec![0.0; g.patch_len() * p];
    let data = input.data();
    for ci in 0..g.c_in {
        let plane = &data[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (ci * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *o = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeometry, h: usize, w: usize) -> Tensor {
    let (oh, ow) = g.out_size(h, w);
    let p = oh * ow;
    let mut out = Tensor::zeros(&[g.c_in, h, w]);
    let data = out.data_mut();
    for ci in 0..g.c_in {
        let plane = &mut data[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (ci * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Dot product with four independent accumulators. Summation order is fixed,
/// so results are reproducible.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Pre-activation output of a convolution, plus the im2col buffer.
pub(crate) fn conv_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, g: &ConvGeometry) -> (Tensor, Vec<f64>) {
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let (oh, ow) = g.out_size(h, w);
    let p = oh * ow;
    let k = g.patch_len();
    let cols = im2col(input, g);
    let mut out = Tensor::zeros(&[g.c_out, oh, ow]);
    let wd = weight.data();
    let od = out.data_mut();
    for co in 0..g.c_out {
        let orow = &mut od[co * p..(co + 1) * p];
        orow.fill(bias.data()[co]);
        for kk in 0..k {
            let wv = wd[co * k + kk];
            if wv != 0.0 {
                axpy(wv, &cols[kk * p..(kk + 1) * p], orow);
            }
        }
    }
    (out, cols)
}

/// Gradients of a convolution. `d_out` is the gradient w.r.t. the
/// pre-activation output. Weight/bias gradients are skipped when `params` is
/// false, the input gradient when `input_grad` is false.
pub(crate) fn conv_backward(
    d_out: &Tensor,
    cols: &[f64],
    weight: &Tensor,
    g: &ConvGeometry,
    in_hw: (usize, usize),
    params: bool,
    input_grad: bool,
) -> (Option<(Tensor, Tensor)>, Option<Tensor>) {
    let p = d_out.shape()[1] * d_out.shape()[2];
    let k = g.patch_len();
    let dd = d_out.data();
    let param_grads = params.then(|| {
        let mut dw = Tensor::zeros(weight.shape());
        let mut db = Tensor::zeros(&[g.c_out]);
        for co in 0..g.c_out {
            let drow = &dd[co * p..(co + 1) * p];
            db.data_mut()[co] = drow.iter().sum();
            let dwrow = &mut dw.data_mut()[co * k..(co + 1) * k];
            for (kk, slot) in dwrow.iter_mut().enumerate() {
                *slot = dot(drow, &cols[kk * p..(kk + 1) * p]);
            }
        }
        (dw, db)
    });
    let d_input = input_grad.then(|| {
        let mut dcols = vec![0.0; k * p];
        let wd = weight.data();
        for co in 0..g.c_out {
            let drow = &dd[co * p..(co + 1) * p];
            for kk in 0..k {
                let wv = wd[co * k + kk];
                if wv != 0.0 {
                    axpy(wv, drow, &mut dcols[kk * p..(kk + 1) * p]);
                }
            }
        }
        col2im(&dcols, g, in_hw.0, in_hw.1)
    });
    (param_grads, d_input)
}

pub(crate) fn leaky_relu_inplace(t: &mut Tensor) {
    for v in t.data_mut() {
        if *v <= 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// Turns a gradient w.r.t. the activation output into one w.r.t. the
/// pre-activation, using the sign of the stored output.
pub(crate) fn leaky_relu_backward_inplace(grad: &mut Tensor, output: &Tensor) {
    for (gv, &o) in grad.data_mut().iter_mut().zip(output.data()) {
        if o <= 0.0 {
            *gv *= LEAKY_SLOPE;
        }
    }
}

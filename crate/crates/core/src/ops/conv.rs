//! 2-D cross-correlation with bias.
//!
//! Weight layout is (C_out, C_in, kH, kW) stored as a 4-D tensor with
//! N = C_out; bias is (1, C_out, 1, 1). Kernels are 1x1 or 3x3, which covers
//! every convolution in this crate: channel-modifying 1x1 kernels, 3x3 stem
//! and block kernels, and dilated 3x3 kernels.
//!
//! Per output element the accumulation order is fixed: input channels
//! ascending, then kernel rows, then kernel columns, with the bias added
//! last. The per-pixel oracle tests rely on that order being stable.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{GradBufs, NodeView, OpRecord, Tape, Var};
use crate::tensor::Shape;

/// Stride, zero padding, and dilation of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dCfg {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2dCfg {
    /// 1x1 convolution: stride 1, no padding, no dilation.
    pub fn unit() -> Conv2dCfg {
        Conv2dCfg { stride: 1, padding: 0, dilation: 1 }
    }

    pub fn new(stride: usize, padding: usize, dilation: usize) -> Conv2dCfg {
        Conv2dCfg { stride, padding, dilation }
    }

    /// Output extent for one spatial axis, `None` when non-positive.
    pub fn out_extent(&self, input: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            None
        } else {
            Some((padded - span) / self.stride + 1)
        }
    }
}

struct Conv2dOp {
    x: Var,
    weight: Var,
    bias: Var,
    out: Var,
    cfg: Conv2dCfg,
}

/// Valid output range along one axis for a given kernel tap offset, so the
/// inner loops never branch on bounds.
#[inline]
fn tap_range(offset: isize, input: usize, output: usize, stride: usize) -> (usize, usize) {
    // valid o satisfy 0 <= o*stride + offset <= input-1
    let lo = if offset >= 0 { 0 } else { ((-offset) as usize).div_ceil(stride) };
    let hi_num = input as isize - 1 - offset;
    if hi_num < 0 {
        return (1, 0); // empty
    }
    let hi = (hi_num as usize / stride).min(output - 1);
    (lo, hi)
}

impl<S: Scalar> OpRecord<S> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn output(&self) -> Var {
        self.out
    }

    fn backward(&self, nodes: &NodeView<S>, grads: &mut GradBufs<S>) {
        let Some(og) = grads.take(self.out) else { return };
        let xs = nodes.shape(self.x);
        let ws = nodes.shape(self.weight);
        let os = nodes.shape(self.out);
        let (cout, cin, kh, kw) = (ws.n, ws.c, ws.h, ws.w);
        let (stride, pad, dil) = (self.cfg.stride, self.cfg.padding, self.cfg.dilation);
        let xd = nodes.data(self.x);
        let wd = nodes.data(self.weight);

        {
            let gb = grads.acc(self.bias);
            for n in 0..os.n {
                for co in 0..cout {
                    let base = (n * cout + co) * os.h * os.w;
                    let mut acc = S::zero();
                    for &g in &og[base..base + os.h * os.w] {
                        acc = acc + g;
                    }
                    gb[co] = gb[co] + acc;
                }
            }
        }

        {
            let gw = grads.acc(self.weight);
            for n in 0..os.n {
                for co in 0..cout {
                    let obase = (n * cout + co) * os.h * os.w;
                    for ci in 0..cin {
                        let xbase = (n * cin + ci) * xs.h * xs.w;
                        for ky in 0..kh {
                            let off_y = (ky * dil) as isize - pad as isize;
                            let (oy_lo, oy_hi) = tap_range(off_y, xs.h, os.h, stride);
                            for kx in 0..kw {
                                let off_x = (kx * dil) as isize - pad as isize;
                                let (ox_lo, ox_hi) = tap_range(off_x, xs.w, os.w, stride);
                                let mut acc = S::zero();
                                for oy in oy_lo..=oy_hi {
                                    let iy = (oy * stride) as isize + off_y;
                                    let orow = obase + oy * os.w;
                                    let xrow = xbase + iy as usize * xs.w;
                                    for ox in ox_lo..=ox_hi {
                                        let ix = (ox * stride) as isize + off_x;
                                        acc = acc + og[orow + ox] * xd[xrow + ix as usize];
                                    }
                                }
                                let wi = ((co * cin + ci) * kh + ky) * kw + kx;
                                gw[wi] = gw[wi] + acc;
                            }
                        }
                    }
                }
            }
        }

        {
            let gx = grads.acc(self.x);
            for n in 0..os.n {
                for co in 0..cout {
                    let obase = (n * cout + co) * os.h * os.w;
                    for ci in 0..cin {
                        let xbase = (n * cin + ci) * xs.h * xs.w;
                        for ky in 0..kh {
                            let off_y = (ky * dil) as isize - pad as isize;
                            let (oy_lo, oy_hi) = tap_range(off_y, xs.h, os.h, stride);
                            for kx in 0..kw {
                                let off_x = (kx * dil) as isize - pad as isize;
                                let (ox_lo, ox_hi) = tap_range(off_x, xs.w, os.w, stride);
                                let wv = wd[((co * cin + ci) * kh + ky) * kw + kx];
                                for oy in oy_lo..=oy_hi {
                                    let iy = (oy * stride) as isize + off_y;
                                    let orow = obase + oy * os.w;
                                    let xrow = xbase + iy as usize * xs.w;
                                    for ox in ox_lo..=ox_hi {
                                        let ix = ((ox * stride) as isize + off_x) as usize;
                                        gx[xrow + ix] = gx[xrow + ix] + wv * og[orow + ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }

        grads.restore(self.out, og);
    }
}

/// 2-D cross-correlation of `x` with `weight` plus `bias`, differentiable
/// with respect to all three.
pub fn conv2d<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    weight: Var,
    bias: Var,
    cfg: &Conv2dCfg,
) -> Result<Var> {
    let xs = tape.shape(x);
    let ws = tape.shape(weight);
    let bs = tape.shape(bias);
    let (cout, cin, kh, kw) = (ws.n, ws.c, ws.h, ws.w);

    if kh != kw || !(kh == 1 || kh == 3) {
        return Err(Error::Shape(format!("kernel must be 1x1 or 3x3, got {kh}x{kw}")));
    }
    if cfg.stride == 0 || cfg.dilation == 0 {
        return Err(Error::Shape("stride and dilation must be positive".into()));
    }
    if cfg.dilation > 1 && kh != 3 {
        return Err(Error::Shape("dilation > 1 requires a 3x3 kernel".into()));
    }
    if xs.c != cin {
        return Err(Error::Shape(format!(
            "input has {} channels but the kernel expects {cin}",
            xs.c
        )));
    }
    if bs != Shape::new(1, cout, 1, 1) {
        return Err(Error::Shape(format!("bias must have shape (1,{cout},1,1), got {bs}")));
    }
    let oh = cfg
        .out_extent(xs.h, kh)
        .ok_or_else(|| Error::Shape(format!("non-positive output height for input {xs}")))?;
    let ow = cfg
        .out_extent(xs.w, kw)
        .ok_or_else(|| Error::Shape(format!("non-positive output width for input {xs}")))?;

    let os = Shape::new(xs.n, cout, oh, ow);
    let mut out = vec![S::zero(); os.len()];
    {
        let xd = tape.value(x);
        let wd = tape.value(weight);
        let bd = tape.value(bias);
        let (stride, pad, dil) = (cfg.stride, cfg.padding, cfg.dilation);
        for n in 0..xs.n {
            for co in 0..cout {
                let obase = (n * cout + co) * oh * ow;
                for ci in 0..cin {
                    let xbase = (n * cin + ci) * xs.h * xs.w;
                    for ky in 0..kh {
                        let off_y = (ky * dil) as isize - pad as isize;
                        let (oy_lo, oy_hi) = tap_range(off_y, xs.h, oh, stride);
                        for kx in 0..kw {
                            let off_x = (kx * dil) as isize - pad as isize;
                            let (ox_lo, ox_hi) = tap_range(off_x, xs.w, ow, stride);
                            let wv = wd[((co * cin + ci) * kh + ky) * kw + kx];
                            for oy in oy_lo..=oy_hi {
                                let iy = ((oy * stride) as isize + off_y) as usize;
                                let orow = obase + oy * ow;
                                let xrow = xbase + iy * xs.w;
                                for ox in ox_lo..=ox_hi {
                                    let ix = ((ox * stride) as isize + off_x) as usize;
                                    out[orow + ox] = out[orow + ox] + wv * xd[xrow + ix];
                                }
                            }
                        }
                    }
                }
                let bv = bd[co];
                for v in &mut out[obase..obase + oh * ow] {
                    *v = *v + bv;
                }
            }
        }
    }
    let out = tape.push_output(os, out);
    tape.record(Box::new(Conv2dOp { x, weight, bias, out, cfg: *cfg }));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::sum;
    use crate::tensor::Tensor;

    fn leaf<S: Scalar>(tape: &mut Tape<S>, shape: Shape, vals: &[f64]) -> Var {
        tape.leaf(Tensor::from_f64(shape, vals).unwrap().with_grad())
    }

    #[test]
    fn one_by_one_conv_is_a_per_pixel_dot_product() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, Shape::new(1, 2, 1, 1), &[2.0, 3.0]);
        let w = leaf(&mut tape, Shape::new(1, 2, 1, 1), &[1.0, -1.0]);
        let b = leaf(&mut tape, Shape::new(1, 1, 1, 1), &[0.0]);
        let y = conv2d(&mut tape, x, w, b, &Conv2dCfg::unit()).unwrap();
        assert_eq!(tape.value(y), &[-1.0]);
    }

    #[test]
    fn identity_one_by_one_conv_preserves_input() {
        let mut tape = Tape::<f64>::new();
        let mut stream = crate::rng::Stream::new(5);
        let input = Tensor::<f64>::random(Shape::new(2, 3, 4, 4), &mut stream, -2.0, 2.0);
        let x = tape.leaf(input.clone());
        // weight[k][m] = 1 if k == m else 0
        let mut wt = Tensor::zeros(Shape::new(3, 3, 1, 1));
        for k in 0..3 {
            wt.set(k, k, 0, 0, 1.0);
        }
        let w = tape.leaf(wt);
        let b = tape.leaf(Tensor::zeros(Shape::new(1, 3, 1, 1)));
        let y = conv2d(&mut tape, x, w, b, &Conv2dCfg::unit()).unwrap();
        assert_eq!(tape.value(y), input.data());
    }

    #[test]
    fn strided_three_by_three_shape() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 8, 8)));
        let w = tape.leaf(Tensor::zeros(Shape::new(4, 1, 3, 3)));
        let b = tape.leaf(Tensor::zeros(Shape::new(1, 4, 1, 1)));
        let y = conv2d(&mut tape, x, w, b, &Conv2dCfg::new(2, 1, 1)).unwrap();
        assert_eq!(tape.shape(y), Shape::new(1, 4, 4, 4));
    }

    #[test]
    fn rejects_channel_mismatch_and_bad_kernels() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 2, 4, 4)));
        let w3 = tape.leaf(Tensor::zeros(Shape::new(1, 3, 1, 1)));
        let b = tape.leaf(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        assert!(conv2d(&mut tape, x, w3, b, &Conv2dCfg::unit()).is_err());
        let w5 = tape.leaf(Tensor::zeros(Shape::new(1, 2, 5, 5)));
        assert!(conv2d(&mut tape, x, w5, b, &Conv2dCfg::unit()).is_err());
        // dilation on a 1x1 kernel is rejected
        let w1 = tape.leaf(Tensor::zeros(Shape::new(1, 2, 1, 1)));
        assert!(conv2d(&mut tape, x, w1, b, &Conv2dCfg::new(1, 0, 2)).is_err());
    }

    #[test]
    fn rejects_non_positive_output() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        let w = tape.leaf(Tensor::zeros(Shape::new(1, 1, 3, 3)));
        let b = tape.leaf(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        assert!(conv2d(&mut tape, x, w, b, &Conv2dCfg::new(1, 0, 1)).is_err());
    }

    #[test]
    fn dilated_conv_preserves_extent_with_matching_padding() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 8, 8)));
        let w = tape.leaf(Tensor::zeros(Shape::new(2, 1, 3, 3)));
        let b = tape.leaf(Tensor::zeros(Shape::new(1, 2, 1, 1)));
        let y = conv2d(&mut tape, x, w, b, &Conv2dCfg::new(1, 3, 3)).unwrap();
        assert_eq!(tape.shape(y), Shape::new(1, 2, 8, 8));
    }

    #[test]
    fn backward_of_bias_counts_output_elements() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 4, 4)));
        let w = tape.leaf(Tensor::zeros(Shape::new(1, 1, 3, 3)));
        let b = leaf(&mut tape, Shape::new(1, 1, 1, 1), &[0.0]);
        let y = conv2d(&mut tape, x, w, b, &Conv2dCfg::new(1, 1, 1)).unwrap();
        let loss = sum(&mut tape, y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b), &[16.0]);
    }
}

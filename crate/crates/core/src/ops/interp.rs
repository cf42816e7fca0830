//! Bilinear up-sampling with half-pixel centers (no corner alignment).
//!
//! A source coordinate for output index `o` is `(o + 0.5) * in/out - 0.5`,
//! clamped into the source extent. The same precomputed corner indices and
//! fractions drive both the forward gather and the backward scatter.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{GradBufs, NodeView, OpRecord, Tape, Var};
use crate::tensor::Shape;

/// One output coordinate's two source taps and interpolation fraction.
#[derive(Clone, Copy)]
struct Tap<S> {
    lo: usize,
    hi: usize,
    frac: S,
}

fn axis_taps<S: Scalar>(input: usize, output: usize) -> Vec<Tap<S>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            // frac = 0 when both taps collapse keeps constants bit-exact
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac: S::of(frac) }
        })
        .collect()
}

struct BilinearOp<S> {
    x: Var,
    out: Var,
    ys: Vec<Tap<S>>,
    xs: Vec<Tap<S>>,
}

impl<S: Scalar> OpRecord<S> for BilinearOp<S> {
    fn name(&self) -> &'static str {
        "bilinear_upsample"
    }

    fn output(&self) -> Var {
        self.out
    }

    fn backward(&self, nodes: &NodeView<S>, grads: &mut GradBufs<S>) {
        let Some(og) = grads.take(self.out) else { return };
        let ishape = nodes.shape(self.x);
        let oshape = nodes.shape(self.out);
        let (ih, iw) = (ishape.h, ishape.w);
        let (oh, ow) = (oshape.h, oshape.w);
        {
            let gx = grads.acc(self.x);
            for nc in 0..ishape.n * ishape.c {
                let ibase = nc * ih * iw;
                let obase = nc * oh * ow;
                for oy in 0..oh {
                    let ty = self.ys[oy];
                    let wy1 = ty.frac;
                    let wy0 = S::one() - wy1;
                    for ox in 0..ow {
                        let tx = self.xs[ox];
                        let wx1 = tx.frac;
                        let wx0 = S::one() - wx1;
                        let g = og[obase + oy * ow + ox];
                        gx[ibase + ty.lo * iw + tx.lo] =
                            gx[ibase + ty.lo * iw + tx.lo] + g * wy0 * wx0;
                        gx[ibase + ty.lo * iw + tx.hi] =
                            gx[ibase + ty.lo * iw + tx.hi] + g * wy0 * wx1;
                        gx[ibase + ty.hi * iw + tx.lo] =
                            gx[ibase + ty.hi * iw + tx.lo] + g * wy1 * wx0;
                        gx[ibase + ty.hi * iw + tx.hi] =
                            gx[ibase + ty.hi * iw + tx.hi] + g * wy1 * wx1;
                    }
                }
            }
        }
        grads.restore(self.out, og);
    }
}

/// Bilinear interpolation to a larger (or equal) spatial size.
pub fn bilinear_upsample<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    let ishape = tape.shape(x);
    if out_h < ishape.h || out_w < ishape.w {
        return Err(Error::Shape(format!(
            "bilinear_upsample cannot shrink {} to ({out_h},{out_w}); use avg_pool_down",
            ishape
        )));
    }
    let ys = axis_taps::<S>(ishape.h, out_h);
    let xs = axis_taps::<S>(ishape.w, out_w);
    let oshape = Shape::new(ishape.n, ishape.c, out_h, out_w);
    let mut out = vec![S::zero(); oshape.len()];
    {
        let xd = tape.value(x);
        let (ih, iw) = (ishape.h, ishape.w);
        for nc in 0..ishape.n * ishape.c {
            let ibase = nc * ih * iw;
            let obase = nc * out_h * out_w;
            for (oy, ty) in ys.iter().enumerate() {
                let wy1 = ty.frac;
                let wy0 = S::one() - wy1;
                let row_lo = ibase + ty.lo * iw;
                let row_hi = ibase + ty.hi * iw;
                for (ox, tx) in xs.iter().enumerate() {
                    let wx1 = tx.frac;
                    let wx0 = S::one() - wx1;
                    let top = wx0 * xd[row_lo + tx.lo] + wx1 * xd[row_lo + tx.hi];
                    let bot = wx0 * xd[row_hi + tx.lo] + wx1 * xd[row_hi + tx.hi];
                    out[obase + oy * out_w + ox] = wy0 * top + wy1 * bot;
                }
            }
        }
    }
    let out = tape.push_output(oshape, out);
    tape.record(Box::new(BilinearOp { x, out, ys, xs }));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn constant_input_upsamples_to_the_same_constant() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::filled(Shape::new(1, 1, 2, 2), 5.0));
        let y = bilinear_upsample(&mut tape, x, 4, 4).unwrap();
        assert_eq!(tape.shape(y), Shape::new(1, 1, 4, 4));
        for &v in tape.value(y) {
            assert_eq!(v, 5.0);
        }
    }

    #[test]
    fn half_pixel_values_match_the_scalar_formula() {
        // 1x2 row [0, 2] upsampled to 1x4
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(Shape::new(1, 1, 1, 2), &[0.0, 2.0]).unwrap());
        let y = bilinear_upsample(&mut tape, x, 1, 4).unwrap();

        // independent per-pixel evaluation of the half-pixel formula
        let reference: Vec<f64> = (0..4)
            .map(|o| {
                let src = ((o as f64 + 0.5) * 2.0 / 4.0 - 0.5).max(0.0);
                let lo = (src.floor() as usize).min(1);
                let hi = (lo + 1).min(1);
                let f = if hi == lo { 0.0 } else { src - lo as f64 };
                let vals = [0.0, 2.0];
                (1.0 - f) * vals[lo] + f * vals[hi]
            })
            .collect();
        assert_eq!(tape.value(y), reference.as_slice());
        assert_eq!(tape.value(y), &[0.0, 0.5, 1.5, 2.0]);
    }

    #[test]
    fn rejects_shrinking() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 4, 4)));
        assert!(bilinear_upsample(&mut tape, x, 2, 4).is_err());
    }

    #[test]
    fn output_stays_within_input_range() {
        let mut tape = Tape::<f64>::new();
        let mut stream = crate::rng::Stream::new(8);
        let input = Tensor::<f64>::random(Shape::new(1, 3, 3, 5), &mut stream, -4.0, 4.0);
        let (lo, hi) = input
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let x = tape.leaf(input);
        let y = bilinear_upsample(&mut tape, x, 9, 10).unwrap();
        for &v in tape.value(y) {
            assert!(v >= lo && v <= hi);
        }
    }
}

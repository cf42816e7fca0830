//! Average-pooling scale-transfer primitives: fixed-factor down-sampling and
//! the adaptive pooling used by pyramid levels.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{GradBufs, NodeView, OpRecord, Tape, Var};
use crate::tensor::Shape;

struct AvgPoolOp<S> {
    x: Var,
    out: Var,
    factor: usize,
    inv: S,
}

impl<S: Scalar> OpRecord<S> for AvgPoolOp<S> {
    fn name(&self) -> &'static str {
        "avg_pool_down"
    }

    fn output(&self) -> Var {
        self.out
    }

    fn backward(&self, nodes: &NodeView<S>, grads: &mut GradBufs<S>) {
        let Some(og) = grads.take(self.out) else { return };
        let ishape = nodes.shape(self.x);
        let oshape = nodes.shape(self.out);
        let f = self.factor;
        {
            let gx = grads.acc(self.x);
            for nc in 0..ishape.n * ishape.c {
                let ibase = nc * ishape.h * ishape.w;
                let obase = nc * oshape.h * oshape.w;
                for oy in 0..oshape.h {
                    for ox in 0..oshape.w {
                        let g = og[obase + oy * oshape.w + ox] * self.inv;
                        for dy in 0..f {
                            let row = ibase + (oy * f + dy) * ishape.w + ox * f;
                            for dx in 0..f {
                                gx[row + dx] = gx[row + dx] + g;
                            }
                        }
                    }
                }
            }
        }
        grads.restore(self.out, og);
    }
}

/// Non-overlapping factor x factor mean pooling. Both spatial extents must be
/// divisible by the factor.
pub fn avg_pool_down<S: Scalar>(tape: &mut Tape<S>, x: Var, factor: usize) -> Result<Var> {
    let ishape = tape.shape(x);
    if factor == 0 {
        return Err(Error::Shape("pooling factor must be positive".into()));
    }
    if ishape.h % factor != 0 || ishape.w % factor != 0 {
        return Err(Error::Shape(format!(
            "extents of {ishape} are not divisible by pooling factor {factor}"
        )));
    }
    let oshape = Shape::new(ishape.n, ishape.c, ishape.h / factor, ishape.w / factor);
    let inv = S::of(1.0 / (factor * factor) as f64);
    let mut out = vec![S::zero(); oshape.len()];
    {
        let xd = tape.value(x);
        for nc in 0..ishape.n * ishape.c {
            let ibase = nc * ishape.h * ishape.w;
            let obase = nc * oshape.h * oshape.w;
            for oy in 0..oshape.h {
                for ox in 0..oshape.w {
                    let mut acc = S::zero();
                    for dy in 0..factor {
                        let row = ibase + (oy * factor + dy) * ishape.w + ox * factor;
                        for dx in 0..factor {
                            acc = acc + xd[row + dx];
                        }
                    }
                    out[obase + oy * oshape.w + ox] = acc * inv;
                }
            }
        }
    }
    let out = tape.push_output(oshape, out);
    tape.record(Box::new(AvgPoolOp { x, out, factor, inv }));
    Ok(out)
}

/// Bin edges of adaptive pooling: bin `i` covers
/// `[floor(i*extent/bins), ceil((i+1)*extent/bins))`.
fn bin_bounds(i: usize, extent: usize, bins: usize) -> (usize, usize) {
    (i * extent / bins, ((i + 1) * extent).div_ceil(bins))
}

struct AdaptivePoolOp {
    x: Var,
    out: Var,
    bins_h: usize,
    bins_w: usize,
}

impl<S: Scalar> OpRecord<S> for AdaptivePoolOp {
    fn name(&self) -> &'static str {
        "adaptive_avg_pool"
    }

    fn output(&self) -> Var {
        self.out
    }

    fn backward(&self, nodes: &NodeView<S>, grads: &mut GradBufs<S>) {
        let Some(og) = grads.take(self.out) else { return };
        let ishape = nodes.shape(self.x);
        {
            let gx = grads.acc(self.x);
            for nc in 0..ishape.n * ishape.c {
                let ibase = nc * ishape.h * ishape.w;
                let obase = nc * self.bins_h * self.bins_w;
                for by in 0..self.bins_h {
                    let (y0, y1) = bin_bounds(by, ishape.h, self.bins_h);
                    for bx in 0..self.bins_w {
                        let (x0, x1) = bin_bounds(bx, ishape.w, self.bins_w);
                        let count = S::of(((y1 - y0) * (x1 - x0)) as f64);
                        let g = og[obase + by * self.bins_w + bx] / count;
                        for y in y0..y1 {
                            let row = ibase + y * ishape.w;
                            for x in x0..x1 {
                                gx[row + x] = gx[row + x] + g;
                            }
                        }
                    }
                }
            }
        }
        grads.restore(self.out, og);
    }
}

/// Adaptive average pooling to a (bins_h, bins_w) grid of region means.
pub fn adaptive_avg_pool<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    bins_h: usize,
    bins_w: usize,
) -> Result<Var> {
    let ishape = tape.shape(x);
    if bins_h == 0 || bins_w == 0 {
        return Err(Error::Shape("bins must be positive".into()));
    }
    if bins_h > ishape.h || bins_w > ishape.w {
        return Err(Error::Shape(format!(
            "bins ({bins_h},{bins_w}) exceed input extents {ishape}"
        )));
    }
    let oshape = Shape::new(ishape.n, ishape.c, bins_h, bins_w);
    let mut out = vec![S::zero(); oshape.len()];
    {
        let xd = tape.value(x);
        for nc in 0..ishape.n * ishape.c {
            let ibase = nc * ishape.h * ishape.w;
            let obase = nc * bins_h * bins_w;
            for by in 0..bins_h {
                let (y0, y1) = bin_bounds(by, ishape.h, bins_h);
                for bx in 0..bins_w {
                    let (x0, x1) = bin_bounds(bx, ishape.w, bins_w);
                    let mut acc = S::zero();
                    for y in y0..y1 {
                        let row = ibase + y * ishape.w;
                        for x in x0..x1 {
                            acc = acc + xd[row + x];
                        }
                    }
                    let count = S::of(((y1 - y0) * (x1 - x0)) as f64);
                    out[obase + by * bins_w + bx] = acc / count;
                }
            }
        }
    }
    let out = tape.push_output(oshape, out);
    tape.record(Box::new(AdaptivePoolOp { x, out, bins_h, bins_w }));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn avg_pool_matches_the_hand_mean() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .leaf(Tensor::from_f64(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 5.0]).unwrap());
        let y = avg_pool_down(&mut tape, x, 2).unwrap();
        assert_eq!(tape.value(y), &[2.75]);
    }

    #[test]
    fn avg_pool_preserves_constants_and_factor_one_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::filled(Shape::new(1, 2, 4, 4), -1.5));
        let y = avg_pool_down(&mut tape, x, 2).unwrap();
        for &v in tape.value(y) {
            assert_eq!(v, -1.5);
        }
        let mut stream = crate::rng::Stream::new(2);
        let input = Tensor::<f64>::random(Shape::new(1, 1, 3, 3), &mut stream, -1.0, 1.0);
        let z = tape.leaf(input.clone());
        let id = avg_pool_down(&mut tape, z, 1).unwrap();
        assert_eq!(tape.value(id), input.data());
    }

    #[test]
    fn avg_pool_rejects_indivisible_extents() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 3, 4)));
        assert!(avg_pool_down(&mut tape, x, 2).is_err());
    }

    #[test]
    fn adaptive_pool_single_bin_is_the_global_mean() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .leaf(Tensor::from_f64(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 6.0]).unwrap());
        let y = adaptive_avg_pool(&mut tape, x, 1, 1).unwrap();
        assert_eq!(tape.value(y), &[3.0]);
    }

    #[test]
    fn adaptive_pool_at_input_size_is_identity() {
        let mut tape = Tape::<f64>::new();
        let mut stream = crate::rng::Stream::new(3);
        let input = Tensor::<f64>::random(Shape::new(1, 2, 3, 4), &mut stream, -1.0, 1.0);
        let x = tape.leaf(input.clone());
        let y = adaptive_avg_pool(&mut tape, x, 3, 4).unwrap();
        assert_eq!(tape.value(y), input.data());
    }

    #[test]
    fn adaptive_pool_overlapping_bins_follow_the_floor_ceil_rule() {
        // column [1, 2, 4] with 2 bins: [0,2) -> 1.5 and [1,3) -> 3.0
        let mut tape = Tape::<f64>::new();
        let x = tape
            .leaf(Tensor::from_f64(Shape::new(1, 1, 3, 1), &[1.0, 2.0, 4.0]).unwrap());
        let y = adaptive_avg_pool(&mut tape, x, 2, 1).unwrap();
        assert_eq!(tape.value(y), &[1.5, 3.0]);
    }

    #[test]
    fn adaptive_pool_rejects_oversized_bins() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        assert!(adaptive_avg_pool(&mut tape, x, 3, 1).is_err());
    }
}

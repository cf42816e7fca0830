//! Channel concatenation.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{GradBufs, NodeView, OpRecord, Tape, Var};
use crate::tensor::Shape;

struct ConcatOp {
    inputs: Vec<Var>,
    out: Var,
}

impl<S: Scalar> OpRecord<S> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn output(&self) -> Var {
        self.out
    }

    fn backward(&self, nodes: &NodeView<S>, grads: &mut GradBufs<S>) {
        let Some(og) = grads.take(self.out) else { return };
        let oshape = nodes.shape(self.out);
        let plane = oshape.h * oshape.w;
        let mut offset = 0;
        for &input in &self.inputs {
            let c = nodes.shape(input).c;
            let gx = grads.acc(input);
            for n in 0..oshape.n {
                let src = (n * oshape.c + offset) * plane;
                let dst = n * c * plane;
                for i in 0..c * plane {
                    gx[dst + i] = gx[dst + i] + og[src + i];
                }
            }
            offset += c;
        }
        grads.restore(self.out, og);
    }
}

/// Stacks tensors along the channel dimension in list order. A single-element
/// list returns its input unchanged.
pub fn concat_channels<S: Scalar>(tape: &mut Tape<S>, inputs: &[Var]) -> Result<Var> {
    if inputs.is_empty() {
        return Err(Error::Shape("concat_channels needs at least one input".into()));
    }
    if inputs.len() == 1 {
        return Ok(inputs[0]);
    }
    let first = tape.shape(inputs[0]);
    let mut total_c = 0;
    for &v in inputs {
        let s = tape.shape(v);
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::Shape(format!(
                "concat members must share batch and spatial extents, got {first} and {s}"
            )));
        }
        total_c += s.c;
    }
    let oshape = Shape::new(first.n, total_c, first.h, first.w);
    let plane = first.h * first.w;
    let mut out = vec![S::zero(); oshape.len()];
    let mut offset = 0;
    for &v in inputs {
        let c = tape.shape(v).c;
        let xd = tape.value(v);
        for n in 0..first.n {
            let dst = (n * total_c + offset) * plane;
            let src = n * c * plane;
            out[dst..dst + c * plane].copy_from_slice(&xd[src..src + c * plane]);
        }
        offset += c;
    }
    let out = tape.push_output(oshape, out);
    tape.record(Box::new(ConcatOp { inputs: inputs.to_vec(), out }));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::sum;
    use crate::tensor::Tensor;

    #[test]
    fn concat_stacks_channels_in_order() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::filled(Shape::new(1, 2, 4, 4), 1.0));
        let b = tape.leaf(Tensor::filled(Shape::new(1, 3, 4, 4), 2.0));
        let y = concat_channels(&mut tape, &[a, b]).unwrap();
        assert_eq!(tape.shape(y), Shape::new(1, 5, 4, 4));
        let out = tape.export(y);
        assert_eq!(out.at(0, 0, 0, 0), 1.0);
        assert_eq!(out.at(0, 1, 3, 3), 1.0);
        assert_eq!(out.at(0, 2, 0, 0), 2.0);
        assert_eq!(out.at(0, 4, 3, 3), 2.0);
    }

    #[test]
    fn single_input_is_identity() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::filled(Shape::new(1, 2, 2, 2), 7.0));
        let y = concat_channels(&mut tape, &[a]).unwrap();
        assert_eq!(y, a);
    }

    #[test]
    fn backward_scatters_ones_to_every_input() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::filled(Shape::new(2, 1, 2, 2), 1.0).with_grad());
        let b = tape.leaf(Tensor::filled(Shape::new(2, 2, 2, 2), 2.0).with_grad());
        let y = concat_channels(&mut tape, &[a, b]).unwrap();
        let loss = sum(&mut tape, y);
        tape.backward(loss).unwrap();
        assert!(tape.grad(a).iter().all(|&g| g == 1.0));
        assert!(tape.grad(b).iter().all(|&g| g == 1.0));
    }

    #[test]
    fn rejects_spatial_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        let b = tape.leaf(Tensor::zeros(Shape::new(1, 1, 4, 4)));
        assert!(concat_channels(&mut tape, &[a, b]).is_err());
    }
}

//! Element-wise operations and the full reduction used to form losses.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{GradBufs, NodeView, OpRecord, Tape, Var};
use crate::tensor::Shape;

/// Numerically stable sigmoid; output is pinned into the open interval
/// (0, 1) so gate values never saturate to exactly 0 or 1.
fn stable_sigmoid<S: Scalar>(x: S) -> S {
    let y = if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    };
    y.max(S::min_positive_value()).min(S::BELOW_ONE)
}

struct ReluOp {
    x: Var,
    out: Var,
}

impl<S: Scalar> OpRecord<S> for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn output(&self) -> Var {
        self.out
    }

    fn backward(&self, nodes: &NodeView<S>, grads: &mut GradBufs<S>) {
        let Some(og) = grads.take(self.out) else { return };
        {
            let xs = nodes.data(self.x);
            let gx = grads.acc(self.x);
            // subgradient at exactly 0 is 0
            for i in 0..xs.len() {
                if xs[i] > S::zero() {
                    gx[i] = gx[i] + og[i];
                }
            }
        }
        grads.restore(self.out, og);
    }
}

pub fn relu<S: Scalar>(tape: &mut Tape<S>, x: Var) -> Var {
    let shape = tape.shape(x);
    let data: Vec<S> =
        tape.value(x).iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect();
    let out = tape.push_output(shape, data);
    tape.record(Box::new(ReluOp { x, out }));
    out
}

struct SigmoidOp {
    x: Var,
    out: Var,
}

impl<S: Scalar> OpRecord<S> for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn output(&self) -> Var {
        self.out
    }

    fn backward(&self, nodes: &NodeView<S>, grads: &mut GradBufs<S>) {
        let Some(og) = grads.take(self.out) else { return };
        {
            let ys = nodes.data(self.out);
            let gx = grads.acc(self.x);
            for i in 0..ys.len() {
                gx[i] = gx[i] + og[i] * ys[i] * (S::one() - ys[i]);
            }
        }
        grads.restore(self.out, og);
    }
}

pub fn sigmoid<S: Scalar>(tape: &mut Tape<S>, x: Var) -> Var {
    let shape = tape.shape(x);
    let data: Vec<S> = tape.value(x).iter().map(|&v| stable_sigmoid(v)).collect();
    let out = tape.push_output(shape, data);
    tape.record(Box::new(SigmoidOp { x, out }));
    out
}

struct AddOp {
    a: Var,
    b: Var,
    out: Var,
}

impl<S: Scalar> OpRecord<S> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }

    fn output(&self) -> Var {
        self.out
    }

    fn backward(&self, _nodes: &NodeView<S>, grads: &mut GradBufs<S>) {
        let Some(og) = grads.take(self.out) else { return };
        for side in [self.a, self.b] {
            let g = grads.acc(side);
            for i in 0..og.len() {
                g[i] = g[i] + og[i];
            }
        }
        grads.restore(self.out, og);
    }
}

/// Element-wise sum of two same-shape tensors.
pub fn add<S: Scalar>(tape: &mut Tape<S>, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(Error::Shape(format!("add requires equal shapes, got {sa} and {sb}")));
    }
    let data: Vec<S> =
        tape.value(a).iter().zip(tape.value(b)).map(|(&x, &y)| x + y).collect();
    let out = tape.push_output(sa, data);
    tape.record(Box::new(AddOp { a, b, out }));
    Ok(out)
}

struct MulOp {
    a: Var,
    b: Var,
    out: Var,
}

impl<S: Scalar> OpRecord<S> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn output(&self) -> Var {
        self.out
    }

    fn backward(&self, nodes: &NodeView<S>, grads: &mut GradBufs<S>) {
        let Some(og) = grads.take(self.out) else { return };
        {
            let bs = nodes.data(self.b);
            let ga = grads.acc(self.a);
            for i in 0..og.len() {
                ga[i] = ga[i] + og[i] * bs[i];
            }
        }
        {
            let xs = nodes.data(self.a);
            let gb = grads.acc(self.b);
            for i in 0..og.len() {
                gb[i] = gb[i] + og[i] * xs[i];
            }
        }
        grads.restore(self.out, og);
    }
}

/// Element-wise product of two same-shape tensors.
pub fn mul<S: Scalar>(tape: &mut Tape<S>, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(Error::Shape(format!("mul requires equal shapes, got {sa} and {sb}")));
    }
    let data: Vec<S> =
        tape.value(a).iter().zip(tape.value(b)).map(|(&x, &y)| x * y).collect();
    let out = tape.push_output(sa, data);
    tape.record(Box::new(MulOp { a, b, out }));
    Ok(out)
}

struct MulScalarOp<S> {
    x: Var,
    k: S,
    out: Var,
}

impl<S: Scalar> OpRecord<S> for MulScalarOp<S> {
    fn name(&self) -> &'static str {
        "mul_scalar"
    }

    fn output(&self) -> Var {
        self.out
    }

    fn backward(&self, _nodes: &NodeView<S>, grads: &mut GradBufs<S>) {
        let Some(og) = grads.take(self.out) else { return };
        {
            let gx = grads.acc(self.x);
            for i in 0..og.len() {
                gx[i] = gx[i] + og[i] * self.k;
            }
        }
        grads.restore(self.out, og);
    }
}

/// Multiplication by a compile-time constant (not a tape value).
pub fn mul_scalar<S: Scalar>(tape: &mut Tape<S>, x: Var, k: f64) -> Var {
    let k = S::of(k);
    let shape = tape.shape(x);
    let data: Vec<S> = tape.value(x).iter().map(|&v| v * k).collect();
    let out = tape.push_output(shape, data);
    tape.record(Box::new(MulScalarOp { x, k, out }));
    out
}

struct SumOp {
    x: Var,
    out: Var,
}

impl<S: Scalar> OpRecord<S> for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn output(&self) -> Var {
        self.out
    }

    fn backward(&self, _nodes: &NodeView<S>, grads: &mut GradBufs<S>) {
        let Some(og) = grads.take(self.out) else { return };
        {
            let seed = og[0];
            let gx = grads.acc(self.x);
            for g in gx.iter_mut() {
                *g = *g + seed;
            }
        }
        grads.restore(self.out, og);
    }
}

/// Full reduction to a scalar-shaped tensor, summing in index order.
pub fn sum<S: Scalar>(tape: &mut Tape<S>, x: Var) -> Var {
    let total = tape.value(x).iter().fold(S::zero(), |acc, &v| acc + v);
    let out = tape.push_output(Shape::scalar(), vec![total]);
    tape.record(Box::new(SumOp { x, out }));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn relu_clamps_negatives_and_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .leaf(Tensor::from_f64(Shape::new(1, 1, 1, 3), &[-1.0, 0.0, 2.0]).unwrap());
        let y = relu(&mut tape, x);
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .leaf(Tensor::from_f64(Shape::new(1, 1, 1, 3), &[-1.0, 0.0, 2.0]).unwrap().with_grad());
        let y = relu(&mut tape, x);
        let loss = sum(&mut tape, y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = sigmoid(&mut tape, x);
        assert_eq!(tape.value(y), &[0.5]);
    }

    #[test]
    fn sigmoid_stays_strictly_inside_unit_interval() {
        for &v in &[-40.0, -500.0, -1e6, 40.0, 500.0, 1e6, f64::MIN, f64::MAX] {
            let y = stable_sigmoid(v);
            assert!(y > 0.0 && y < 1.0, "sigmoid({v}) = {y}");
            assert!(y.is_finite());
        }
        for &v in &[-200.0f32, 200.0, f32::MIN, f32::MAX] {
            let y = stable_sigmoid(v);
            assert!(y > 0.0 && y < 1.0, "sigmoid({v}) = {y}");
        }
        assert!(stable_sigmoid(-40.0f64) > 0.0);
    }

    #[test]
    fn sum_and_scale_compose() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            Tensor::from_f64(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]).unwrap().with_grad(),
        );
        let s = sum(&mut tape, x);
        let y = mul_scalar(&mut tape, s, 0.5);
        assert_eq!(tape.value(y), &[5.0]);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn add_rejects_shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        let b = tape.leaf(Tensor::zeros(Shape::new(1, 2, 2, 2)));
        assert!(add(&mut tape, a, b).is_err());
    }
}

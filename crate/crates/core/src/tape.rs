//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! A forward pass pushes value nodes onto a [`Tape`] and records one backward
//! rule per operation. [`Tape::backward`] replays the rules in reverse tape
//! order, accumulating gradients additively; the tape order never changes, so
//! gradients are bit-reproducible. The finite-difference oracle used by all
//! gradient audits lives here as well.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Handle to a value node on a tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

struct Node<S> {
    shape: Shape,
    data: Vec<S>,
    requires_grad: bool,
    /// True when the node is the output of a recorded operation.
    from_op: bool,
}

/// Read-only view of node values handed to backward rules.
pub(crate) struct NodeView<'a, S> {
    nodes: &'a [Node<S>],
}

impl<'a, S: Scalar> NodeView<'a, S> {
    pub(crate) fn data(&self, v: Var) -> &[S] {
        &self.nodes[v.0].data
    }

    pub(crate) fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }
}

/// Per-node gradient buffers, allocated lazily so untouched subgraphs cost
/// nothing during backward.
pub(crate) struct GradBufs<S> {
    bufs: Vec<Option<Vec<S>>>,
    lens: Vec<usize>,
}

impl<S: Scalar> GradBufs<S> {
    fn new(lens: Vec<usize>) -> Self {
        GradBufs { bufs: lens.iter().map(|_| None).collect(), lens }
    }

    /// Removes the accumulated gradient of `v`; `None` means no gradient has
    /// reached it, in which case the rule can skip its work entirely.
    pub(crate) fn take(&mut self, v: Var) -> Option<Vec<S>> {
        self.bufs[v.0].take()
    }

    pub(crate) fn restore(&mut self, v: Var, buf: Vec<S>) {
        self.bufs[v.0] = Some(buf);
    }

    /// Mutable access for accumulation, allocating zeros on first touch.
    pub(crate) fn acc(&mut self, v: Var) -> &mut [S] {
        let slot = &mut self.bufs[v.0];
        if slot.is_none() {
            *slot = Some(vec![S::zero(); self.lens[v.0]]);
        }
        slot.as_mut().unwrap()
    }
}

/// Backward rule of one recorded operation.
pub(crate) trait OpRecord<S: Scalar> {
    fn name(&self) -> &'static str;
    fn output(&self) -> Var;
    fn backward(&self, nodes: &NodeView<S>, grads: &mut GradBufs<S>);
}

/// Recording tape. One tape per forward pass; single-threaded.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    records: Vec<Box<dyn OpRecord<S>>>,
    grads: Option<Vec<Vec<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Tape<S> {
        Tape { nodes: Vec::new(), records: Vec::new(), grads: None }
    }

    /// Pushes a leaf value. Its `requires_grad` flag controls nothing during
    /// backward (all reachable gradients are computed) but marks intent.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let var = Var(self.nodes.len());
        self.nodes.push(Node {
            shape: t.shape(),
            requires_grad: t.requires_grad(),
            data: t.data().to_vec(),
            from_op: false,
        });
        var
    }

    /// Leaf filled with a constant, not tracked for gradients.
    pub fn constant(&mut self, shape: Shape, v: S) -> Var {
        self.leaf(Tensor::filled(shape, v))
    }

    pub(crate) fn push_output(&mut self, shape: Shape, data: Vec<S>) -> Var {
        debug_assert_eq!(shape.len(), data.len());
        let var = Var(self.nodes.len());
        self.nodes.push(Node { shape, data, requires_grad: false, from_op: true });
        var
    }

    pub(crate) fn record(&mut self, rec: Box<dyn OpRecord<S>>) {
        self.records.push(rec);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].data
    }

    /// Copies a node's value (and gradient, when backward has run) out of the
    /// tape as a standalone tensor.
    pub fn export(&self, v: Var) -> Tensor<S> {
        let node = &self.nodes[v.0];
        let mut t = Tensor::new(node.shape, node.data.clone()).expect("node data is consistent");
        t.set_requires_grad(node.requires_grad);
        if let Some(grads) = &self.grads {
            t.set_grad(grads[v.0].clone()).expect("gradient shape matches");
        }
        t
    }

    /// Gradient of the last backward pass with respect to `v`.
    ///
    /// Panics if `backward` has not been run; nodes the loss does not reach
    /// hold zeros.
    pub fn grad(&self, v: Var) -> &[S] {
        self.grads
            .as_ref()
            .expect("backward() must run before gradients are read")[v.0]
            .as_slice()
    }

    pub fn grad_tensor(&self, v: Var) -> Tensor<S> {
        Tensor::new(self.shape(v), self.grad(v).to_vec()).expect("gradient shape matches node")
    }

    pub fn has_grads(&self) -> bool {
        self.grads.is_some()
    }

    /// Discards gradients so another backward pass may run.
    pub fn reset_gradients(&mut self) {
        self.grads = None;
    }

    /// Populates gradients of `loss` with respect to every node on the tape.
    ///
    /// `loss` must be scalar-shaped and produced by a recorded operation.
    /// Calling backward a second time without [`Tape::reset_gradients`] is an
    /// error rather than silent accumulation.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Tape(
                "backward already ran on this tape; call reset_gradients() first".into(),
            ));
        }
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Tape("loss handle does not belong to this tape".into()))?;
        if !node.shape.is_scalar() {
            return Err(Error::Shape(format!(
                "loss must have shape (1,1,1,1), got {}",
                node.shape
            )));
        }
        if !node.from_op {
            return Err(Error::Tape(
                "loss is detached: it was not produced by a tape-recorded operation".into(),
            ));
        }

        let lens: Vec<usize> = self.nodes.iter().map(|n| n.data.len()).collect();
        let mut grads = GradBufs::new(lens);
        grads.acc(loss)[0] = S::one();
        let view = NodeView { nodes: &self.nodes };
        for rec in self.records.iter().rev() {
            rec.backward(&view, &mut grads);
        }
        let GradBufs { bufs, lens } = grads;
        self.grads = Some(
            bufs.into_iter()
                .zip(lens)
                .map(|(b, len)| b.unwrap_or_else(|| vec![S::zero(); len]))
                .collect(),
        );
        Ok(())
    }
}

/// Central-difference gradient of a scalar-valued function, the ground-truth
/// oracle for every analytic gradient in the crate.
///
/// Returns per-element `(f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps)`.
pub fn finite_diff_grad<S: Scalar>(
    mut f: impl FnMut(&Tensor<S>) -> Result<S>,
    x: &Tensor<S>,
    eps: f64,
) -> Result<Tensor<S>> {
    if !(eps > 0.0) {
        return Err(Error::Numeric(format!("finite-difference eps must be > 0, got {eps}")));
    }
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.shape().len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + S::of(eps);
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - S::of(eps);
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "function returned a non-finite value while probing element {i}"
            )));
        }
        out.data_mut()[i] = S::of((fp.as_f64() - fm.as_f64()) / (2.0 * eps));
    }
    Ok(out)
}

/// One offending element in a gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Result of comparing an analytic gradient against the numeric oracle.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
    /// Worst offenders, largest relative error first (up to five).
    pub worst: Vec<GradCheckEntry>,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<40} {} max_rel_err={:.3e} (tol {:.1e}, {} elements)",
            self.op,
            if self.pass { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.tol,
            self.checked
        )?;
        if !self.pass {
            for e in &self.worst {
                write!(
                    f,
                    "\n  [{}] analytic={:.9e} numeric={:.9e} rel_err={:.3e}",
                    e.index, e.analytic, e.numeric, e.rel_err
                )?;
            }
        }
        Ok(())
    }
}

/// Per-element relative error `|a - n| / max(1e-8, |a| + |n|)`; passes iff the
/// maximum stays below `tol`.
pub fn grad_check<S: Scalar>(
    op: &str,
    analytic: &Tensor<S>,
    numeric: &Tensor<S>,
    tol: f64,
) -> Result<GradCheckReport> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::Shape(format!(
            "gradient shapes differ: {} vs {}",
            analytic.shape(),
            numeric.shape()
        )));
    }
    let mut entries: Vec<GradCheckEntry> = Vec::new();
    let mut max_rel_err = 0.0f64;
    for (i, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let (a, n) = (a.as_f64(), n.as_f64());
        let rel = (a - n).abs() / (a.abs() + n.abs()).max(1e-8);
        max_rel_err = max_rel_err.max(rel);
        entries.push(GradCheckEntry { index: i, analytic: a, numeric: n, rel_err: rel });
    }
    entries.sort_by(|x, y| y.rel_err.total_cmp(&x.rel_err));
    entries.truncate(5);
    Ok(GradCheckReport {
        op: op.to_string(),
        checked: analytic.shape().len(),
        max_rel_err,
        tol,
        pass: max_rel_err < tol,
        worst: entries,
    })
}

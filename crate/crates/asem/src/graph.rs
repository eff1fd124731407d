//! Reverse-mode automatic differentiation over a computation tape.
//!
//! Operations evaluate eagerly as they are pushed: the tape holds every
//! node's forward value, and [`Graph::backward`] replays it in reverse to
//! accumulate gradients. Construction order is a topological order, so the
//! reverse sweep visits each node exactly once. Every op validates shapes
//! up front and checks its output for non-finite values, naming itself in
//! the error.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Neg(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Recip(NodeId),
    Elu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, #[allow(dead_code)] f64),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    SubRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    ScaleSlices(NodeId, NodeId),
    SumAxis(NodeId, usize),
    MeanAxis(NodeId, usize),
    MeanAll(NodeId),
    Softmax(NodeId, usize),
    LogSumExp(NodeId, usize),
    L2Normalize(NodeId, usize),
    Concat(Vec<NodeId>, usize),
    Narrow {
        input: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
}

/// Computation tape. One `Graph` is built per forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: &'static str, operation: Op, value: Tensor, needs_grad: bool) -> Result<NodeId> {
        value.check_finite(op)?;
        self.nodes.push(Node {
            op: operation,
            value,
            grad: None,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(Error::UnknownNode(id.0))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` output w.r.t. this node; exact zeros
    /// if the node did not participate.
    pub fn grad(&self, id: NodeId) -> Tensor {
        match &self.nodes[id.0].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[id.0].value.shape()),
        }
    }

    // ----- leaves -----

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push("constant", Op::Leaf, value, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Result<NodeId> {
        self.constant(Tensor::scalar(v))
    }

    pub fn param(&mut self, value: Tensor) -> Result<NodeId> {
        self.push("param", Op::Leaf, value, true)
    }

    // ----- elementwise unary -----

    fn unary(
        &mut self,
        name: &'static str,
        input: NodeId,
        make: impl Fn(NodeId) -> Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<NodeId> {
        let value = self.node(input)?.value.map(f);
        let needs = self.needs(input);
        self.push(name, make(input), value, needs)
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("neg", x, Op::Neg, |v| -v)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("exp", x, Op::Exp, f64::exp)
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("ln", x, Op::Ln, f64::ln)
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("sqrt", x, Op::Sqrt, f64::sqrt)
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("square", x, Op::Square, |v| v * v)
    }

    pub fn recip(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("recip", x, Op::Recip, f64::recip)
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("elu", x, Op::Elu, |v| if v > 0.0 { v } else { v.exp() - 1.0 })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("sigmoid", x, Op::Sigmoid, sigmoid)
    }

    /// log(1 + e^x), evaluated stably.
    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("softplus", x, Op::Softplus, softplus)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary("scale", x, |id| Op::Scale(id, c), |v| c * v)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary("add_scalar", x, |id| Op::AddScalar(id, c), |v| v + c)
    }

    // ----- elementwise binary -----

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        make: impl Fn(NodeId, NodeId) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch {
                op: name.to_string(),
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let value = av.zip(bv, f);
        let needs = self.needs(a) || self.needs(b);
        self.push(name, make(a, b), value, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b, Op::Mul, |x, y| x * y)
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul".to_string(),
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let value = av.matmul(bv);
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", Op::Matmul(a, b), value, needs)
    }

    // ----- last-axis row broadcasts: [..., d] (op) [d] -----

    fn row_broadcast(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        make: impl Fn(NodeId, NodeId) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        let ok = av.rank() >= 1
            && bv.rank() == 1
            && av.shape()[av.rank() - 1] == bv.shape()[0];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: name.to_string(),
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let d = bv.shape()[0];
        let mut data = Vec::with_capacity(av.len());
        for (i, &x) in av.data().iter().enumerate() {
            data.push(f(x, bv.data()[i % d]));
        }
        let value = Tensor::from_vec(av.shape(), data);
        // from_vec re-checks finiteness; surface errors under this op's name
        let value = match value {
            Ok(t) => t,
            Err(_) => return Err(Error::NonFinite { op: name.to_string() }),
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(name, make(a, b), value, needs)
    }

    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.row_broadcast("add_row", a, b, Op::AddRow, |x, y| x + y)
    }

    pub fn sub_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.row_broadcast("sub_row", a, b, Op::SubRow, |x, y| x - y)
    }

    pub fn mul_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.row_broadcast("mul_row", a, b, Op::MulRow, |x, y| x * y)
    }

    /// Scale each last-axis slice of `a` by the matching entry of `w`,
    /// where `w.shape == a.shape[..rank-1]`.
    pub fn scale_slices(&mut self, a: NodeId, w: NodeId) -> Result<NodeId> {
        let (av, wv) = (&self.node(a)?.value, &self.node(w)?.value);
        if av.rank() < 1 || wv.shape() != &av.shape()[..av.rank() - 1] {
            return Err(Error::ShapeMismatch {
                op: "scale_slices".to_string(),
                lhs: av.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let d = av.shape()[av.rank() - 1];
        let mut data = Vec::with_capacity(av.len());
        for (l, &wl) in wv.data().iter().enumerate() {
            for &x in &av.data()[l * d..(l + 1) * d] {
                data.push(x * wl);
            }
        }
        let value = Tensor::from_vec(av.shape(), data)
            .map_err(|_| Error::NonFinite { op: "scale_slices".to_string() })?;
        let needs = self.needs(a) || self.needs(w);
        self.push("scale_slices", Op::ScaleSlices(a, w), value, needs)
    }

    // ----- reductions -----

    fn check_axis(&self, name: &'static str, id: NodeId, axis: usize) -> Result<()> {
        let v = &self.node(id)?.value;
        if axis >= v.rank() {
            return Err(Error::invalid(
                name,
                format!("axis {} out of range for shape {:?}", axis, v.shape()),
            ));
        }
        Ok(())
    }

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut s = shape.to_vec();
        s.remove(axis);
        s
    }

    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.check_axis("sum_axis", x, axis)?;
        let xv = &self.nodes[x.0].value;
        let (outer, mid, inner) = Tensor::axis_split(xv.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                for i in 0..inner {
                    data[o * inner + i] += xv.data()[(o * mid + m) * inner + i];
                }
            }
        }
        let shape = Self::reduced_shape(xv.shape(), axis);
        let value = Tensor::from_vec(&shape, data)
            .map_err(|_| Error::NonFinite { op: "sum_axis".to_string() })?;
        let needs = self.needs(x);
        self.push("sum_axis", Op::SumAxis(x, axis), value, needs)
    }

    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.check_axis("mean_axis", x, axis)?;
        let xv = &self.nodes[x.0].value;
        let (outer, mid, inner) = Tensor::axis_split(xv.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                for i in 0..inner {
                    data[o * inner + i] += xv.data()[(o * mid + m) * inner + i];
                }
            }
        }
        for v in data.iter_mut() {
            *v /= mid as f64;
        }
        let shape = Self::reduced_shape(xv.shape(), axis);
        let value = Tensor::from_vec(&shape, data)
            .map_err(|_| Error::NonFinite { op: "mean_axis".to_string() })?;
        let needs = self.needs(x);
        self.push("mean_axis", Op::MeanAxis(x, axis), value, needs)
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        if xv.is_empty() {
            return Err(Error::invalid("mean_all", "empty tensor"));
        }
        let value = Tensor::scalar(xv.data().iter().sum::<f64>() / xv.len() as f64);
        value.check_finite("mean_all")?;
        let needs = self.needs(x);
        self.push("mean_all", Op::MeanAll(x), value, needs)
    }

    // ----- stabilized exponentials over an axis -----

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.check_axis("softmax", x, axis)?;
        let xv = &self.nodes[x.0].value;
        let (outer, mid, inner) = Tensor::axis_split(xv.shape(), axis);
        let mut data = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |m: usize| xv.data()[(o * mid + m) * inner + i];
                let max = (0..mid).map(at).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for m in 0..mid {
                    let e = (at(m) - max).exp();
                    data[(o * mid + m) * inner + i] = e;
                    sum += e;
                }
                for m in 0..mid {
                    data[(o * mid + m) * inner + i] /= sum;
                }
            }
        }
        let value = Tensor::from_vec(xv.shape(), data)
            .map_err(|_| Error::NonFinite { op: "softmax".to_string() })?;
        let needs = self.needs(x);
        self.push("softmax", Op::Softmax(x, axis), value, needs)
    }

    pub fn logsumexp(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.check_axis("logsumexp", x, axis)?;
        let xv = &self.nodes[x.0].value;
        let (outer, mid, inner) = Tensor::axis_split(xv.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |m: usize| xv.data()[(o * mid + m) * inner + i];
                let max = (0..mid).map(at).fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = (0..mid).map(|m| (at(m) - max).exp()).sum();
                data[o * inner + i] = max + sum.ln();
            }
        }
        let shape = Self::reduced_shape(xv.shape(), axis);
        let value = Tensor::from_vec(&shape, data)
            .map_err(|_| Error::NonFinite { op: "logsumexp".to_string() })?;
        let needs = self.needs(x);
        self.push("logsumexp", Op::LogSumExp(x, axis), value, needs)
    }

    pub fn l2_normalize(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.check_axis("l2_normalize", x, axis)?;
        let xv = &self.nodes[x.0].value;
        let (outer, mid, inner) = Tensor::axis_split(xv.shape(), axis);
        let mut data = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |m: usize| xv.data()[(o * mid + m) * inner + i];
                let norm = (0..mid).map(|m| at(m) * at(m)).sum::<f64>().sqrt();
                for m in 0..mid {
                    data[(o * mid + m) * inner + i] = at(m) / norm;
                }
            }
        }
        let value = Tensor::from_vec(xv.shape(), data)
            .map_err(|_| Error::NonFinite { op: "l2_normalize".to_string() })?;
        let needs = self.needs(x);
        self.push("l2_normalize", Op::L2Normalize(x, axis), value, needs)
    }

    // ----- shape plumbing -----

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let first = self.node(inputs[0])?.value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {} out of range for shape {:?}", axis, first),
            ));
        }
        let mut total = 0;
        for &id in inputs {
            let s = self.node(id)?.value.shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(k, (a, b))| k == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat".to_string(),
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = Tensor::axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &id in inputs {
                let v = &self.nodes[id.0].value;
                let mid_k = v.shape()[axis];
                let block = mid_k * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let needs = inputs.iter().any(|&id| self.needs(id));
        let value = Tensor::from_vec(&shape, data)
            .map_err(|_| Error::NonFinite { op: "concat".to_string() })?;
        self.push("concat", Op::Concat(inputs.to_vec(), axis), value, needs)
    }

    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.check_axis("narrow", x, axis)?;
        let xv = &self.nodes[x.0].value;
        let extent = xv.shape()[axis];
        if start + len > extent || len == 0 {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} out of axis extent {extent}", start + len),
            ));
        }
        let (outer, mid, inner) = Tensor::axis_split(xv.shape(), axis);
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * mid + start) * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let needs = self.needs(x);
        let value = Tensor::from_vec(&shape, data)
            .map_err(|_| Error::NonFinite { op: "narrow".to_string() })?;
        self.push(
            "narrow",
            Op::Narrow {
                input: x,
                axis,
                start,
                len,
            },
            value,
            needs,
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        let expected: usize = shape.iter().product();
        if expected != xv.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape".to_string(),
                lhs: xv.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::from_vec(shape, xv.data().to_vec())
            .map_err(|_| Error::NonFinite { op: "reshape".to_string() })?;
        let needs = self.needs(x);
        self.push("reshape", Op::Reshape(x), value, needs)
    }

    // ----- backward -----

    /// Reverse sweep from a scalar output. Gradients accumulate on every
    /// participating node and are read back with [`Graph::grad`].
    pub fn backward(&mut self, output: NodeId) -> Result<()> {
        let out = self.node(output)?;
        if out.value.len() != 1 {
            return Err(Error::NonScalarBackward {
                shape: out.value.shape().to_vec(),
            });
        }
        for n in self.nodes.iter_mut() {
            n.grad = None;
        }
        let ones = Tensor::filled(self.nodes[output.0].value.shape(), 1.0);
        self.nodes[output.0].grad = Some(ones);

        let mut pending: Vec<(NodeId, Tensor)> = Vec::new();
        for i in (0..=output.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = self.nodes[i].grad.clone().expect("grad present");
            pending.clear();
            self.local_grads(i, &g, &mut pending);
            for (id, t) in pending.drain(..) {
                if !self.nodes[id.0].needs_grad {
                    continue;
                }
                match &mut self.nodes[id.0].grad {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            }
        }
        Ok(())
    }

    /// Gradients this node sends to its inputs, given its own gradient `g`.
    fn local_grads(&self, i: usize, g: &Tensor, out: &mut Vec<(NodeId, Tensor)>) {
        let node = &self.nodes[i];
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Neg(x) => out.push((*x, g.map(|v| -v))),
            Op::Exp(x) => out.push((*x, g.zip(&node.value, |gv, y| gv * y))),
            Op::Ln(x) => out.push((*x, g.zip(val(*x), |gv, xv| gv / xv))),
            Op::Sqrt(x) => out.push((*x, g.zip(&node.value, |gv, y| gv / (2.0 * y)))),
            Op::Square(x) => out.push((*x, g.zip(val(*x), |gv, xv| 2.0 * xv * gv))),
            Op::Recip(x) => out.push((*x, g.zip(&node.value, |gv, y| -gv * y * y))),
            Op::Elu(x) => out.push((
                *x,
                g.zip(val(*x), |gv, xv| if xv > 0.0 { gv } else { gv * xv.exp() }),
            )),
            Op::Sigmoid(x) => out.push((*x, g.zip(&node.value, |gv, y| gv * y * (1.0 - y)))),
            Op::Softplus(x) => out.push((*x, g.zip(val(*x), |gv, xv| gv * sigmoid(xv)))),
            Op::Scale(x, c) => {
                let c = *c;
                out.push((*x, g.map(|v| c * v)));
            }
            Op::AddScalar(x, _) => out.push((*x, g.clone())),
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                out.push((*a, g.zip(val(*b), |gv, bv| gv * bv)));
                out.push((*b, g.zip(val(*a), |gv, av| gv * av)));
            }
            Op::Matmul(a, b) => {
                out.push((*a, g.matmul_nt(val(*b))));
                out.push((*b, val(*a).matmul_tn(g)));
            }
            Op::AddRow(a, b) | Op::SubRow(a, b) => {
                let sign = if matches!(node.op, Op::SubRow(..)) {
                    -1.0
                } else {
                    1.0
                };
                out.push((*a, g.clone()));
                let d = val(*b).len();
                let mut db = vec![0.0; d];
                for (i, &gv) in g.data().iter().enumerate() {
                    db[i % d] += sign * gv;
                }
                out.push((*b, Tensor::from_fn(&[d], |j| db[j])));
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let d = bv.len();
                let mut da = Vec::with_capacity(g.len());
                let mut db = vec![0.0; d];
                for (i, &gv) in g.data().iter().enumerate() {
                    da.push(gv * bv.data()[i % d]);
                    db[i % d] += gv * av.data()[i];
                }
                out.push((*a, Tensor::from_fn(av.shape(), |i| da[i])));
                out.push((*b, Tensor::from_fn(&[d], |j| db[j])));
            }
            Op::ScaleSlices(a, w) => {
                let (av, wv) = (val(*a), val(*w));
                let d = av.shape()[av.rank() - 1];
                let mut da = Vec::with_capacity(av.len());
                let mut dw = vec![0.0; wv.len()];
                for l in 0..wv.len() {
                    let wl = wv.data()[l];
                    for j in 0..d {
                        let gv = g.data()[l * d + j];
                        da.push(gv * wl);
                        dw[l] += gv * av.data()[l * d + j];
                    }
                }
                out.push((*a, Tensor::from_fn(av.shape(), |i| da[i])));
                out.push((*w, Tensor::from_fn(wv.shape(), |i| dw[i])));
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let xv = val(*x);
                let (outer, mid, inner) = Tensor::axis_split(xv.shape(), *axis);
                let scale = if matches!(node.op, Op::MeanAxis(..)) {
                    1.0 / mid as f64
                } else {
                    1.0
                };
                let mut dx = Tensor::zeros(xv.shape());
                for o in 0..outer {
                    for m in 0..mid {
                        for i in 0..inner {
                            dx.data_mut()[(o * mid + m) * inner + i] =
                                g.data()[o * inner + i] * scale;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::MeanAll(x) => {
                let xv = val(*x);
                let gv = g.item() / xv.len() as f64;
                out.push((*x, Tensor::filled(xv.shape(), gv)));
            }
            Op::Softmax(x, axis) => {
                let y = &node.value;
                let (outer, mid, inner) = Tensor::axis_split(y.shape(), *axis);
                let mut dx = Tensor::zeros(y.shape());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |m: usize| (o * mid + m) * inner + i;
                        let dot: f64 = (0..mid)
                            .map(|m| g.data()[idx(m)] * y.data()[idx(m)])
                            .sum();
                        for m in 0..mid {
                            dx.data_mut()[idx(m)] =
                                y.data()[idx(m)] * (g.data()[idx(m)] - dot);
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::LogSumExp(x, axis) => {
                let xv = val(*x);
                let (outer, mid, inner) = Tensor::axis_split(xv.shape(), *axis);
                let mut dx = Tensor::zeros(xv.shape());
                for o in 0..outer {
                    for i in 0..inner {
                        let lse = node.value.data()[o * inner + i];
                        let gv = g.data()[o * inner + i];
                        for m in 0..mid {
                            let idx = (o * mid + m) * inner + i;
                            dx.data_mut()[idx] = gv * (xv.data()[idx] - lse).exp();
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::L2Normalize(x, axis) => {
                let xv = val(*x);
                let y = &node.value;
                let (outer, mid, inner) = Tensor::axis_split(xv.shape(), *axis);
                let mut dx = Tensor::zeros(xv.shape());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |m: usize| (o * mid + m) * inner + i;
                        let norm = (0..mid)
                            .map(|m| xv.data()[idx(m)] * xv.data()[idx(m)])
                            .sum::<f64>()
                            .sqrt();
                        let dot: f64 = (0..mid)
                            .map(|m| g.data()[idx(m)] * y.data()[idx(m)])
                            .sum();
                        for m in 0..mid {
                            dx.data_mut()[idx(m)] =
                                (g.data()[idx(m)] - y.data()[idx(m)] * dot) / norm;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Concat(inputs, axis) => {
                let shape = node.value.shape();
                let (outer, _, inner) = Tensor::axis_split(shape, *axis);
                let mut offset = 0;
                for &id in inputs {
                    let v = val(id);
                    let mid_k = v.shape()[*axis];
                    let total_mid = shape[*axis];
                    let mut dk = Tensor::zeros(v.shape());
                    for o in 0..outer {
                        let src = (o * total_mid + offset) * inner;
                        let dst = o * mid_k * inner;
                        dk.data_mut()[dst..dst + mid_k * inner]
                            .copy_from_slice(&g.data()[src..src + mid_k * inner]);
                    }
                    out.push((id, dk));
                    offset += mid_k;
                }
            }
            Op::Narrow {
                input,
                axis,
                start,
                len,
            } => {
                let xv = val(*input);
                let (outer, mid, inner) = Tensor::axis_split(xv.shape(), *axis);
                let mut dx = Tensor::zeros(xv.shape());
                for o in 0..outer {
                    let dst = (o * mid + start) * inner;
                    let src = o * len * inner;
                    dx.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[src..src + len * inner]);
                }
                out.push((*input, dx));
            }
            Op::Reshape(x) => {
                let xv = val(*x);
                out.push((
                    *x,
                    Tensor::from_fn(xv.shape(), |i| g.data()[i]),
                ));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::GradCheck;
    use crate::rng::rng_from;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn square_forward_and_backward() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.value(y).item(), 9.0);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).item(), 6.0);
    }

    #[test]
    fn elu_forward_and_backward_at_negative_one() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(-1.0)).unwrap();
        let y = g.elu(x).unwrap();
        let expected = (-1.0_f64).exp() - 1.0;
        assert!((g.value(y).item() - expected).abs() < 1e-15);
        g.backward(y).unwrap();
        assert!((g.grad(x).item() - (-1.0_f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        for a in [-3.0, 0.0, 7.5] {
            let mut g = Graph::new();
            let x = g.constant(t(&[1, 3], &[a, a, a])).unwrap();
            let y = g.softmax(x, 1).unwrap();
            for &v in g.value(y).data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut r = rng_from(5, "softmax", 0);
        for _ in 0..20 {
            let x = Tensor::randn(&[3, 5], 2.0, &mut r);
            let shifted = x.map(|v| v + 123.456);
            let mut g = Graph::new();
            let a = g.constant(x).unwrap();
            let b = g.constant(shifted).unwrap();
            let sa = g.softmax(a, 1).unwrap();
            let sb = g.softmax(b, 1).unwrap();
            for row in 0..3 {
                let sum: f64 = g.value(sa).data()[row * 5..(row + 1) * 5].iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
            for (va, vb) in g.value(sa).data().iter().zip(g.value(sb).data()) {
                assert!((va - vb).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn unused_input_gets_exact_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0)).unwrap();
        let unused = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        let y = g.square(x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        let y = g.square(x).unwrap();
        assert!(matches!(
            g.backward(y),
            Err(Error::NonScalarBackward { .. })
        ));
    }

    #[test]
    fn shape_mismatch_names_the_op_and_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0])).unwrap();
        let b = g.constant(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        match g.add(a, b) {
            Err(Error::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2]);
                assert_eq!(rhs, vec![3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_intermediate_names_the_primitive() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(-1.0)).unwrap();
        match g.ln(x) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "ln"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn linearity_of_backward() {
        // backward of (a*f + b*g) == a*backward(f) + b*backward(g)
        let mut r = rng_from(9, "linearity", 0);
        let x0 = Tensor::randn(&[4], 1.0, &mut r);
        let (a, b) = (1.7, -0.4);

        let grad_of = |build: &dyn Fn(&mut Graph, NodeId) -> NodeId| -> Tensor {
            let mut g = Graph::new();
            let x = g.param(x0.clone()).unwrap();
            let out = build(&mut g, x);
            g.backward(out).unwrap();
            g.grad(x)
        };

        let f = |g: &mut Graph, x: NodeId| {
            let s = g.square(x).unwrap();
            g.mean_all(s).unwrap()
        };
        let h = |g: &mut Graph, x: NodeId| {
            let e = g.elu(x).unwrap();
            g.mean_all(e).unwrap()
        };
        let combined = |g: &mut Graph, x: NodeId| {
            let fa = f(g, x);
            let hb = h(g, x);
            let fa = g.scale(fa, a).unwrap();
            let hb = g.scale(hb, b).unwrap();
            g.add(fa, hb).unwrap()
        };

        let gf = grad_of(&f);
        let gh = grad_of(&h);
        let gc = grad_of(&combined);
        for i in 0..4 {
            let want = a * gf.data()[i] + b * gh.data()[i];
            assert!((gc.data()[i] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let run = || {
            let mut r = rng_from(2, "det", 0);
            let x0 = Tensor::randn(&[3, 4], 1.0, &mut r);
            let w0 = Tensor::randn(&[4, 2], 1.0, &mut r);
            let mut g = Graph::new();
            let x = g.param(x0).unwrap();
            let w = g.param(w0).unwrap();
            let h = g.matmul(x, w).unwrap();
            let e = g.elu(h).unwrap();
            let s = g.softmax(e, 1).unwrap();
            let l = g.mean_all(s).unwrap();
            g.backward(l).unwrap();
            let vbits: Vec<u64> = g.value(l).data().iter().map(|v| v.to_bits()).collect();
            let gbits: Vec<u64> = g
                .grad(w)
                .data()
                .iter()
                .chain(g.grad(x).data())
                .map(|v| v.to_bits())
                .collect();
            (vbits, gbits)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn finite_differences_validate_every_primitive() {
        let check = GradCheck::default();
        let mut r = rng_from(31, "prim", 0);

        // positive-domain unaries
        let xp = Tensor::from_fn(&[2, 3], |_| 0.5 + crate::rng::uniform(&mut r) * 1.5);
        for name in ["ln", "sqrt", "recip"] {
            check.assert(&[xp.clone()], |g, ids| {
                let y = match name {
                    "ln" => g.ln(ids[0])?,
                    "sqrt" => g.sqrt(ids[0])?,
                    _ => g.recip(ids[0])?,
                };
                g.mean_all(y)
            });
        }

        // full-domain unaries (keep elu inputs away from the x=0 kink)
        let x = Tensor::from_fn(&[2, 3], |_| {
            let v = crate::rng::uniform(&mut r) * 4.0 - 2.0;
            if v.abs() < 0.05 {
                0.1
            } else {
                v
            }
        });
        for name in ["neg", "exp", "square", "elu", "sigmoid", "softplus", "scale", "add_scalar"] {
            check.assert(&[x.clone()], |g, ids| {
                let y = match name {
                    "neg" => g.neg(ids[0])?,
                    "exp" => g.exp(ids[0])?,
                    "square" => g.square(ids[0])?,
                    "elu" => g.elu(ids[0])?,
                    "sigmoid" => g.sigmoid(ids[0])?,
                    "softplus" => g.softplus(ids[0])?,
                    "scale" => g.scale(ids[0], -1.3)?,
                    _ => g.add_scalar(ids[0], 0.7)?,
                };
                g.mean_all(y)
            });
        }

        // binaries and broadcasts
        let a = Tensor::randn(&[3, 4], 1.0, &mut r);
        let b = Tensor::randn(&[3, 4], 1.0, &mut r);
        for name in ["add", "sub", "mul"] {
            check.assert(&[a.clone(), b.clone()], |g, ids| {
                let y = match name {
                    "add" => g.add(ids[0], ids[1])?,
                    "sub" => g.sub(ids[0], ids[1])?,
                    _ => g.mul(ids[0], ids[1])?,
                };
                g.mean_all(y)
            });
        }
        let row = Tensor::randn(&[4], 1.0, &mut r);
        for name in ["add_row", "sub_row", "mul_row"] {
            check.assert(&[a.clone(), row.clone()], |g, ids| {
                let y = match name {
                    "add_row" => g.add_row(ids[0], ids[1])?,
                    "sub_row" => g.sub_row(ids[0], ids[1])?,
                    _ => g.mul_row(ids[0], ids[1])?,
                };
                g.mean_all(y)
            });
        }

        let m1 = Tensor::randn(&[3, 4], 1.0, &mut r);
        let m2 = Tensor::randn(&[4, 2], 1.0, &mut r);
        check.assert(&[m1, m2], |g, ids| {
            let y = g.matmul(ids[0], ids[1])?;
            let s = g.square(y)?;
            g.mean_all(s)
        });

        let frames = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
        let weights = Tensor::randn(&[2, 3], 0.5, &mut r);
        check.assert(&[frames.clone(), weights], |g, ids| {
            let y = g.scale_slices(ids[0], ids[1])?;
            g.mean_all(y)
        });

        // reductions and axis ops on a rank-3 tensor, every axis
        for axis in 0..3 {
            for name in ["sum_axis", "mean_axis", "softmax", "logsumexp", "l2_normalize"] {
                check.assert(&[frames.clone()], |g, ids| {
                    let y = match name {
                        "sum_axis" => g.sum_axis(ids[0], axis)?,
                        "mean_axis" => g.mean_axis(ids[0], axis)?,
                        "softmax" => g.softmax(ids[0], axis)?,
                        "logsumexp" => g.logsumexp(ids[0], axis)?,
                        _ => g.l2_normalize(ids[0], axis)?,
                    };
                    let s = g.square(y)?;
                    g.mean_all(s)
                });
            }
        }

        // shape plumbing
        let p1 = Tensor::randn(&[2, 3], 1.0, &mut r);
        let p2 = Tensor::randn(&[2, 2], 1.0, &mut r);
        check.assert(&[p1.clone(), p2], |g, ids| {
            let c = g.concat(&[ids[0], ids[1]], 1)?;
            let s = g.square(c)?;
            g.mean_all(s)
        });
        check.assert(&[p1.clone()], |g, ids| {
            let n = g.narrow(ids[0], 1, 1, 2)?;
            let s = g.square(n)?;
            g.mean_all(s)
        });
        check.assert(&[p1], |g, ids| {
            let rsh = g.reshape(ids[0], &[3, 2])?;
            let s = g.square(rsh)?;
            g.mean_all(s)
        });
    }

    #[test]
    fn concat_and_narrow_round_trip() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = g.constant(t(&[2, 1], &[5.0, 6.0])).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(c_value(&g, c), vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = g.narrow(c, 1, 0, 2).unwrap();
        assert_eq!(c_value(&g, back), vec![1.0, 2.0, 3.0, 4.0]);
        let tail = g.narrow(c, 1, 2, 1).unwrap();
        assert_eq!(c_value(&g, tail), vec![5.0, 6.0]);
    }

    fn c_value(g: &Graph, id: NodeId) -> Vec<f64> {
        g.value(id).data().to_vec()
    }
}

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use super::kernels::{self, ElementwiseOp};
use super::Tensor;
use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Local gradient rule: maps the upstream gradient (and the node's own
/// output) to one optional gradient per parent.
type BackwardFn = Box<dyn Fn(&[f64], &Tensor, &[Var]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    id: u64,
    op: &'static str,
    value: Tensor,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    grad: RefCell<Option<Vec<f64>>>,
}

/// A tensor in the autodiff graph.
///
/// Cloning is cheap (reference counted). Nodes only keep their parents when
/// some input requires grad, so a forward pass over constant leaves frees
/// intermediates as soon as they go out of scope. The graph is `!Send`: one
/// graph belongs to one thread.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("op", &self.0.op)
            .field("requires_grad", &self.0.requires_grad)
            .field("value", &self.0.value)
            .finish()
    }
}

impl Var {
    fn leaf(value: Tensor, requires_grad: bool) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            op: "leaf",
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
            grad: RefCell::new(None),
        }))
    }

    /// A trainable leaf: gradients accumulate into it on every backward.
    pub fn param(value: Tensor) -> Var {
        Var::leaf(value, true)
    }

    pub fn constant(value: Tensor) -> Var {
        Var::leaf(value, false)
    }

    fn from_op(
        op: &'static str,
        value: Tensor,
        parents: Vec<Var>,
        backward: impl Fn(&[f64], &Tensor, &[Var]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Var {
        if !parents.iter().any(Var::requires_grad) {
            return Var::constant(value);
        }
        Var(Rc::new(Node {
            id: next_id(),
            op,
            value,
            requires_grad: true,
            parents,
            backward: Some(Box::new(backward)),
            grad: RefCell::new(None),
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn op_name(&self) -> &'static str {
        self.0.op
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Tensor> {
        self.0
            .grad
            .borrow()
            .as_ref()
            .map(|g| Tensor::from_parts(self.shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Populates `grad` on every leaf that requires grad with ∂self/∂leaf.
    /// Gradients accumulate across calls until [`Var::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.value().len() != 1 {
            return Err(Error::NotScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Err(Error::NotOnTape);
        }
        Tape::record(self).run(vec![1.0]);
        Ok(())
    }

    // ------------------------------------------------------------------
    // Elementwise
    // ------------------------------------------------------------------

    pub fn elementwise(&self, op: ElementwiseOp, other: Option<&Var>) -> Result<Var> {
        match (op.is_binary(), other) {
            (true, Some(b)) => self.binary(op, b),
            (false, None) => Ok(self.unary(op)),
            _ => kernels::elementwise(op, self.value(), other.map(Var::value)).map(Var::constant),
        }
    }

    fn binary(&self, op: ElementwiseOp, other: &Var) -> Result<Var> {
        let value = kernels::elementwise(op, self.value(), Some(other.value()))?;
        Ok(Var::from_op(
            op_label(op),
            value,
            vec![self.clone(), other.clone()],
            move |g, out, p| binary_backward(op, g, out.shape(), &p[0], &p[1]),
        ))
    }

    fn unary(&self, op: ElementwiseOp) -> Var {
        let value = self.value().map(|v| op.unary(v));
        Var::from_op(op_label(op), value, vec![self.clone()], move |g, out, p| {
            let x = p[0].value().data();
            let y = out.data();
            let dx = match op {
                ElementwiseOp::Relu => g
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect(),
                ElementwiseOp::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                ElementwiseOp::Gelu => g
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| g * kernels::gelu_grad(x))
                    .collect(),
                ElementwiseOp::Sqrt => g
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| if y > 0.0 { 0.5 * g / y } else { 0.0 })
                    .collect(),
                ElementwiseOp::Scale(c) => g.iter().map(|g| g * c).collect(),
                _ => unreachable!(),
            };
            vec![Some(dx)]
        })
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(ElementwiseOp::Add, other)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(ElementwiseOp::Sub, other)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(ElementwiseOp::Mul, other)
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary(ElementwiseOp::Div, other)
    }

    pub fn relu(&self) -> Var {
        self.unary(ElementwiseOp::Relu)
    }

    pub fn exp(&self) -> Var {
        self.unary(ElementwiseOp::Exp)
    }

    pub fn gelu(&self) -> Var {
        self.unary(ElementwiseOp::Gelu)
    }

    /// Square root with zero subgradient at 0.
    pub fn sqrt(&self) -> Var {
        self.unary(ElementwiseOp::Sqrt)
    }

    pub fn scale(&self, factor: f64) -> Var {
        self.unary(ElementwiseOp::Scale(factor))
    }

    // ------------------------------------------------------------------
    // Linear algebra and shape
    // ------------------------------------------------------------------

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let (m, k, n) = kernels::matmul_dims(self.shape(), other.shape())?;
        let value = Tensor::from_parts(
            vec![m, n],
            kernels::matmul_raw(self.value().data(), other.value().data(), m, k, n),
        );
        Ok(Var::from_op(
            "matmul",
            value,
            vec![self.clone(), other.clone()],
            move |g, _, p| {
                let (a, b) = (&p[0], &p[1]);
                let da = a
                    .requires_grad()
                    .then(|| kernels::matmul_grad_lhs(g, b.value().data(), m, k, n));
                let db = b
                    .requires_grad()
                    .then(|| kernels::matmul_grad_rhs(a.value().data(), g, m, k, n));
                vec![da, db]
            },
        ))
    }

    pub fn transpose(&self) -> Result<Var> {
        let value = kernels::transpose(self.value())?;
        let (m, n) = (self.shape()[0], self.shape()[1]);
        Ok(Var::from_op("transpose", value, vec![self.clone()], move |g, _, _| {
            vec![Some(kernels::transpose_raw(g, n, m))]
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let value = self.value().reshape(shape)?;
        Ok(Var::from_op("reshape", value, vec![self.clone()], |g, _, _| {
            vec![Some(g.to_vec())]
        }))
    }

    pub fn sum(&self) -> Var {
        let value = Tensor::scalar(self.value().sum());
        let n = self.value().len();
        Var::from_op("sum", value, vec![self.clone()], move |g, _, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len();
        self.sum().scale(1.0 / n as f64)
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Var> {
        let value = kernels::sum_axis(self.value(), axis)?;
        let in_shape = self.shape().to_vec();
        Ok(Var::from_op("sum_axis", value, vec![self.clone()], move |g, _, _| {
            let (outer, n, inner) = kernels::split_axis(&in_shape, axis).expect("checked");
            let mut dx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for t in 0..n {
                    dx[(o * n + t) * inner..(o * n + t + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(dx)]
        }))
    }

    pub fn concat(parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(Var::value).collect();
        let value = kernels::concat(&values, axis)?;
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let outer: usize = value.shape()[..axis].iter().product();
        let inner: usize = value.shape()[axis + 1..].iter().product();
        let total: usize = widths.iter().sum();
        Ok(Var::from_op("concat", value, parts.to_vec(), move |g, _, p| {
            let mut start = 0;
            widths
                .iter()
                .zip(p)
                .map(|(&w, part)| {
                    let grad = part.requires_grad().then(|| {
                        let mut d = Vec::with_capacity(outer * w * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            d.extend_from_slice(&g[base..base + w * inner]);
                        }
                        d
                    });
                    start += w;
                    grad
                })
                .collect()
        }))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = kernels::narrow(self.value(), axis, start, len)?;
        let in_shape = self.shape().to_vec();
        Ok(Var::from_op("narrow", value, vec![self.clone()], move |g, _, _| {
            let (outer, n, inner) = kernels::split_axis(&in_shape, axis).expect("checked");
            let mut dx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                let base = (o * n + start) * inner;
                dx[base..base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(dx)]
        }))
    }

    // ------------------------------------------------------------------
    // Normalizations
    // ------------------------------------------------------------------

    pub fn softmax(&self, axis: usize) -> Result<Var> {
        let value = kernels::softmax(self.value(), axis)?;
        Ok(Var::from_op("softmax", value, vec![self.clone()], move |g, out, _| {
            vec![Some(kernels::softmax_backward(out, g, axis))]
        }))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let (value, cache) = kernels::layer_norm(self.value(), gamma.value(), beta.value(), eps)?;
        Ok(Var::from_op(
            "layer_norm",
            value,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g, _, p| {
                let (dx, dgamma, dbeta) =
                    kernels::layer_norm_backward(&cache, p[1].value().data(), g);
                vec![
                    p[0].requires_grad().then_some(dx),
                    p[1].requires_grad().then_some(dgamma),
                    p[2].requires_grad().then_some(dbeta),
                ]
            },
        ))
    }

    /// Divides every last-axis row by max(‖row‖₂, eps).
    pub fn normalize_rows(&self, eps: f64) -> Result<Var> {
        let (value, norms) = kernels::normalize_rows(self.value(), eps)?;
        Ok(Var::from_op("normalize_rows", value, vec![self.clone()], move |g, out, _| {
            vec![Some(kernels::normalize_rows_backward(out, &norms, eps, g))]
        }))
    }

    /// Separable bilinear resize (align-corners false) of the given axes,
    /// applied one axis at a time in list order.
    pub fn bilinear_resize(&self, axes: &[usize], sizes: &[usize]) -> Result<Var> {
        kernels::validate_resize(self.shape(), axes, sizes)?;
        let mut out = self.clone();
        for (&axis, &size) in axes.iter().zip(sizes) {
            out = out.resize_axis(axis, size);
        }
        Ok(out)
    }

    fn resize_axis(&self, axis: usize, size: usize) -> Var {
        let value = kernels::resize_axis(self.value(), axis, size);
        let in_shape = self.shape().to_vec();
        Var::from_op("resize_axis", value, vec![self.clone()], move |g, _, _| {
            vec![Some(kernels::resize_axis_backward(g, &in_shape, axis, size))]
        })
    }

    /// Rotates interleaved coordinate pairs of each row of a (T, D) matrix
    /// by precomputed angles; `cos`/`sin` are (T, D/2) row-major.
    pub fn rotate_pairs(&self, cos: Rc<[f64]>, sin: Rc<[f64]>) -> Result<Var> {
        let &[t, d] = self.shape() else {
            return Err(Error::invalid("rotate_pairs expects a (T, D) matrix"));
        };
        if d % 2 != 0 || cos.len() != t * d / 2 || sin.len() != cos.len() {
            return Err(Error::invalid(format!(
                "rotation tables of length {} do not fit a ({t}, {d}) input",
                cos.len()
            )));
        }
        let value = Tensor::from_parts(
            vec![t, d],
            kernels::rotate_pairs(self.value().data(), &cos, &sin, d, false),
        );
        Ok(Var::from_op("rotate_pairs", value, vec![self.clone()], move |g, _, _| {
            vec![Some(kernels::rotate_pairs(g, &cos, &sin, d, true))]
        }))
    }
}

fn op_label(op: ElementwiseOp) -> &'static str {
    match op {
        ElementwiseOp::Add => "add",
        ElementwiseOp::Sub => "sub",
        ElementwiseOp::Mul => "mul",
        ElementwiseOp::Div => "div",
        ElementwiseOp::Relu => "relu",
        ElementwiseOp::Exp => "exp",
        ElementwiseOp::Gelu => "gelu",
        ElementwiseOp::Sqrt => "sqrt",
        ElementwiseOp::Scale(_) => "scale",
    }
}

fn binary_backward(
    op: ElementwiseOp,
    g: &[f64],
    out_shape: &[usize],
    a: &Var,
    b: &Var,
) -> Vec<Option<Vec<f64>>> {
    let (ad, bd) = (a.value().data(), b.value().data());
    let mut da = a.requires_grad().then(|| vec![0.0; ad.len()]);
    let mut db = b.requires_grad().then(|| vec![0.0; bd.len()]);
    let mut step = |o: usize, ia: usize, ib: usize| {
        let (ga, gb) = match op {
            ElementwiseOp::Add => (g[o], g[o]),
            ElementwiseOp::Sub => (g[o], -g[o]),
            ElementwiseOp::Mul => (g[o] * bd[ib], g[o] * ad[ia]),
            ElementwiseOp::Div => (g[o] / bd[ib], -g[o] * ad[ia] / (bd[ib] * bd[ib])),
            _ => unreachable!(),
        };
        if let Some(d) = da.as_mut() {
            d[ia] += ga;
        }
        if let Some(d) = db.as_mut() {
            d[ib] += gb;
        }
    };
    if a.shape() == b.shape() {
        for o in 0..g.len() {
            step(o, o, o);
        }
    } else {
        kernels::for_each_broadcast(out_shape, a.shape(), b.shape(), step);
    }
    vec![da, db]
}

/// The recorded computation reachable from a root, in topological order
/// (every node after all of its inputs).
pub struct Tape {
    nodes: Vec<Var>,
}

impl Tape {
    /// Linearizes every grad-requiring node reachable from `root`.
    pub fn record(root: &Var) -> Tape {
        let mut seen = HashSet::new();
        let mut nodes = Vec::new();
        let mut stack = vec![root.clone()];
        while let Some(v) = stack.pop() {
            if !v.requires_grad() || !seen.insert(v.id()) {
                continue;
            }
            stack.extend(v.0.parents.iter().cloned());
            nodes.push(v);
        }
        // Ids grow monotonically with creation, and a node is always created
        // after its parents.
        nodes.sort_by_key(Var::id);
        Tape { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Var] {
        &self.nodes
    }

    /// Replays the tape in reverse from the last node with the given seed
    /// gradient, visiting each node once.
    pub fn run(&self, seed: Vec<f64>) -> usize {
        let Some(root) = self.nodes.last() else {
            return 0;
        };
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(root.id(), seed);
        let mut visited = 0;
        for node in self.nodes.iter().rev() {
            visited += 1;
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.backward {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(rule) => {
                    let grads = rule(&g, node.value(), &node.0.parents);
                    for (parent, grad) in node.0.parents.iter().zip(grads) {
                        let Some(grad) = grad else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        match pending.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(parent.id(), grad);
                            }
                        }
                    }
                }
            }
        }
        visited
    }
}

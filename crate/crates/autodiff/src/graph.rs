use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{AutodiffError, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// One recorded operation. Inputs are node ids of the owning [`Graph`].
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sqrt(usize),
    /// `a * (m > 0)`; the mask operand carries no gradient.
    ReluMask(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Expand(usize),
    ReduceSum(usize),
    Slice {
        src: usize,
        start: usize,
    },
    Embed {
        src: usize,
        start: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    ConvInputGrad {
        gy: usize,
        w: usize,
        geom: ConvGeom,
    },
    ConvWeightGrad {
        x: usize,
        gy: usize,
        geom: ConvGeom,
    },
    AvgPool {
        x: usize,
        k: usize,
    },
    PoolSpread {
        g: usize,
        k: usize,
    },
    Softmax(usize),
    CrossEntropy {
        logits: usize,
        targets: Rc<[usize]>,
    },
    InstanceNorm {
        x: usize,
        eps: f64,
    },
    /// Backward of [`Op::InstanceNorm`]: `y` is its output, `g` the cotangent.
    InstanceNormGrad {
        y: usize,
        g: usize,
        x: usize,
        eps: f64,
    },
}

impl Op {
    fn inputs(&self) -> ([usize; 3], usize) {
        use Op::*;
        match *self {
            Leaf => ([0, 0, 0], 0),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | ReluMask(a, b) | MatMul(a, b) => ([a, b, 0], 2),
            Conv2d { x, w, .. } => ([x, w, 0], 2),
            ConvInputGrad { gy, w, .. } => ([gy, w, 0], 2),
            ConvWeightGrad { x, gy, .. } => ([x, gy, 0], 2),
            Scale(a, _)
            | AddScalar(a)
            | Sqrt(a)
            | Transpose(a)
            | Reshape(a)
            | Expand(a)
            | ReduceSum(a)
            | Softmax(a) => ([a, 0, 0], 1),
            Slice { src, .. } | Embed { src, .. } => ([src, 0, 0], 1),
            AvgPool { x, .. } => ([x, 0, 0], 1),
            PoolSpread { g, .. } => ([g, 0, 0], 1),
            CrossEntropy { logits, .. } => ([logits, 0, 0], 1),
            InstanceNorm { x, .. } => ([x, 0, 0], 1),
            InstanceNormGrad { y, g, x, .. } => ([y, g, x], 3),
        }
    }

    fn differentiable_inputs(&self) -> ([usize; 3], usize) {
        match *self {
            Op::ReluMask(a, _) => ([a, 0, 0], 1),
            _ => self.inputs(),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    /// Leaf holding a gradient computed without `create_graph`.
    detached_grad: bool,
}

/// Define-by-run computation graph. Nodes are appended in topological order;
/// a graph is confined to the thread that created it.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GradOptions {
    /// Record the backward pass so the returned gradients are differentiable.
    pub create_graph: bool,
    /// Return zeros for targets the output does not depend on instead of failing.
    pub allow_unused: bool,
}

impl GradOptions {
    pub fn create_graph() -> Self {
        GradOptions { create_graph: true, allow_unused: false }
    }
}

/// Gradients of a scalar with respect to every trainable leaf it depends on.
#[derive(Debug, Default)]
pub struct Gradients {
    by_id: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.by_id.get(&v.id)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Trainable leaf.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.leaf(t, true, false)
    }

    /// Non-trainable leaf.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.leaf(t, false, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    fn leaf(&self, t: Tensor, requires_grad: bool, detached_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(t), op: Op::Leaf, requires_grad, detached_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn push(&self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op_name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let (ins, n) = op.differentiable_inputs();
        let requires_grad = ins[..n].iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node { value: Rc::new(value), op, requires_grad, detached_grad: false });
        Ok(Var { graph: self, id: nodes.len() - 1 })
    }

    /// Gradients of the scalar `y` with respect to each of `wrt`.
    ///
    /// With `create_graph`, the backward computation is itself recorded and the
    /// returned variables can be differentiated again.
    pub fn grad<'g>(&'g self, y: Var<'g>, wrt: &[Var<'g>], opts: GradOptions) -> Result<Vec<Var<'g>>> {
        let yshape = y.shape();
        if yshape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarLoss(yshape));
        }
        let top = y.id;
        // needed[i]: node i lies on a differentiable path to some target
        let mut needed = vec![false; top + 1];
        for w in wrt {
            if w.id <= top {
                needed[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in 0..=top {
                if needed[i] || !nodes[i].requires_grad {
                    continue;
                }
                let (ins, n) = nodes[i].op.differentiable_inputs();
                needed[i] = ins[..n].iter().any(|&j| needed[j]);
            }
        }

        let mut grads: Vec<Option<Var<'g>>> = vec![None; top + 1];
        if needed[top] {
            grads[top] = Some(self.constant(Tensor::full(&yshape, 1.0)));
        }
        for i in (0..=top).rev() {
            if !needed[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes.borrow()[i].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            for (input, gi) in self.vjp(i, &op, g, &needed)? {
                grads[input] = Some(match grads[input] {
                    Some(prev) => prev.add(gi)?,
                    None => gi,
                });
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for w in wrt {
            let g = if w.id <= top { grads[w.id] } else { None };
            let g = match g {
                Some(g) => g,
                None => {
                    if self.depends_on_detached_grad(top) {
                        return Err(AutodiffError::DetachedGradient);
                    }
                    if !opts.allow_unused {
                        return Err(AutodiffError::Disconnected(w.id));
                    }
                    self.constant(Tensor::zeros(&w.shape()))
                }
            };
            out.push(if opts.create_graph {
                g
            } else {
                let v = (*self.value_of(g.id)).clone();
                self.leaf(v, false, true)
            });
        }
        Ok(out)
    }

    /// Gradients of `y` with respect to every trainable leaf it reaches.
    pub fn backward(&self, y: Var<'_>) -> Result<Gradients> {
        let leaves: Vec<Var<'_>> = {
            let nodes = self.nodes.borrow();
            (0..=y.id)
                .filter(|&i| matches!(nodes[i].op, Op::Leaf) && nodes[i].requires_grad)
                .map(|id| Var { graph: self, id })
                .collect()
        };
        let opts = GradOptions { create_graph: false, allow_unused: true };
        let grads = self.grad(y, &leaves, opts)?;
        let mut by_id = HashMap::with_capacity(leaves.len());
        for (leaf, g) in leaves.iter().zip(grads) {
            by_id.insert(leaf.id, (*self.value_of(g.id)).clone());
        }
        Ok(Gradients { by_id })
    }

    fn depends_on_detached_grad(&self, top: usize) -> bool {
        let nodes = self.nodes.borrow();
        let mut seen = vec![false; top + 1];
        let mut stack = vec![top];
        while let Some(i) = stack.pop() {
            if seen[i] {
                continue;
            }
            seen[i] = true;
            if nodes[i].detached_grad {
                return true;
            }
            let (ins, n) = nodes[i].op.inputs();
            stack.extend_from_slice(&ins[..n]);
        }
        false
    }

    /// Vector-Jacobian products of node `id` for each input on a needed path.
    fn vjp<'g>(&'g self, id: usize, op: &Op, g: Var<'g>, needed: &[bool]) -> Result<Vec<(usize, Var<'g>)>> {
        let var = |i: usize| Var { graph: self, id: i };
        let out = var(id);
        let mut res = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needed[a] {
                    res.push((a, g));
                }
                if needed[b] {
                    res.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if needed[a] {
                    res.push((a, g));
                }
                if needed[b] {
                    res.push((b, g.neg()?));
                }
            }
            Op::Mul(a, b) => {
                if needed[a] {
                    res.push((a, g.mul(var(b))?));
                }
                if needed[b] {
                    res.push((b, g.mul(var(a))?));
                }
            }
            Op::Div(a, b) => {
                if needed[a] {
                    res.push((a, g.div(var(b))?));
                }
                if needed[b] {
                    res.push((b, g.mul(out)?.div(var(b))?.neg()?));
                }
            }
            Op::Scale(a, c) => res.push((a, g.scale(c)?)),
            Op::AddScalar(a) => res.push((a, g)),
            Op::Sqrt(a) => res.push((a, g.scale(0.5)?.div(out)?)),
            Op::ReluMask(a, m) => res.push((a, g.relu_mask(var(m))?)),
            Op::MatMul(a, b) => {
                if needed[a] {
                    res.push((a, g.matmul(var(b).transpose()?)?));
                }
                if needed[b] {
                    res.push((b, var(a).transpose()?.matmul(g)?));
                }
            }
            Op::Transpose(a) => res.push((a, g.transpose()?)),
            Op::Reshape(a) => res.push((a, g.reshape(&var(a).shape())?)),
            Op::Expand(a) => res.push((a, g.sum_to(&var(a).shape())?)),
            Op::ReduceSum(a) => res.push((a, g.expand(&var(a).shape())?)),
            Op::Slice { src, start } => {
                res.push((src, g.embed(start, &var(src).shape())?));
            }
            Op::Embed { src, start } => {
                res.push((src, g.slice(start, &var(src).shape())?));
            }
            Op::Conv2d { x, w, geom } => {
                if needed[x] {
                    res.push((x, self.conv_input_grad(g, var(w), geom)?));
                }
                if needed[w] {
                    res.push((w, self.conv_weight_grad(var(x), g, geom)?));
                }
            }
            Op::ConvInputGrad { gy, w, geom } => {
                // <G, T(gy, w)> = <gy, conv(G, w)>
                if needed[gy] {
                    res.push((gy, self.conv(g, var(w), geom)?));
                }
                if needed[w] {
                    res.push((w, self.conv_weight_grad(g, var(gy), geom)?));
                }
            }
            Op::ConvWeightGrad { x, gy, geom } => {
                // <G, W(x, gy)> = <gy, conv(x, G)>
                if needed[x] {
                    res.push((x, self.conv_input_grad(var(gy), g, geom)?));
                }
                if needed[gy] {
                    res.push((gy, self.conv(var(x), g, geom)?));
                }
            }
            Op::AvgPool { x, k } => res.push((x, g.pool_spread(k)?)),
            Op::PoolSpread { g: src, k } => res.push((src, g.avg_pool2d(k)?)),
            Op::Softmax(a) => {
                // s * (g - rowsum(g * s))
                let shape = out.shape();
                let rows = g.mul(out)?.sum_to(&[shape[0], 1])?.expand(&shape)?;
                res.push((a, out.mul(g.sub(rows)?)?));
            }
            Op::CrossEntropy { logits, ref targets } => {
                let lv = var(logits);
                let shape = lv.shape();
                let mut onehot = Tensor::zeros(&shape);
                for (r, &t) in targets.iter().enumerate() {
                    onehot.data_mut()[r * shape[1] + t] = 1.0;
                }
                let delta = lv.softmax()?.sub(self.constant(onehot))?;
                let gcol = g.reshape(&[shape[0], 1])?.expand(&shape)?;
                res.push((logits, delta.mul(gcol)?));
            }
            Op::InstanceNorm { x, eps } => res.push((x, self.instance_norm_grad(out, g, var(x), eps)?)),
            Op::InstanceNormGrad { y, g: gy, x, eps } => {
                // out = r * (gy - m(gy) - y m(gy y)) with r = (var(x) + eps)^(-1/2),
                // m the per-instance spatial mean and y = (x - mean(x)) r.
                let (yv, gv, xv) = (var(y), var(gy), var(x));
                let shape = xv.shape();
                let stat = [shape[0], shape[1], 1, 1];
                let inv = 1.0 / (shape[2] * shape[3]) as f64;
                let smean = |v: Var<'g>| v.sum_to(&stat)?.scale(inv);
                let r = {
                    let c = xv.sub(smean(xv)?.expand(&shape)?)?;
                    let sd = smean(c.mul(c)?)?.add_scalar(eps)?.sqrt()?;
                    self.constant(Tensor::full(&stat, 1.0)).div(sd)?
                };
                if needed[gy] {
                    res.push((gy, self.instance_norm_grad(yv, g, xv, eps)?));
                }
                if needed[y] {
                    let t =
                        g.mul(smean(gv.mul(yv)?)?.expand(&shape)?)?.add(gv.mul(smean(g.mul(yv)?)?.expand(&shape)?)?)?;
                    res.push((y, t.mul(r.expand(&shape)?)?.neg()?));
                }
                if needed[x] {
                    let coef = r.mul(smean(g.mul(out)?)?)?.expand(&shape)?;
                    res.push((x, yv.mul(coef)?.neg()?));
                }
            }
        }
        Ok(res)
    }

    fn instance_norm_grad<'g>(&'g self, y: Var<'g>, g: Var<'g>, x: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let shape = x.shape();
        let gx = kernels::instance_norm_grad(y.value().data(), g.value().data(), x.value().data(), &shape, eps);
        self.push(
            "instance_norm_grad",
            Tensor::from_parts(shape, gx),
            Op::InstanceNormGrad { y: y.id, g: g.id, x: x.id, eps },
        )
    }

    fn conv<'g>(&'g self, x: Var<'g>, w: Var<'g>, geom: ConvGeom) -> Result<Var<'g>> {
        let y = kernels::conv2d(x.value().data(), w.value().data(), &geom);
        self.push("conv2d", Tensor::from_parts(geom.output_shape(), y), Op::Conv2d { x: x.id, w: w.id, geom })
    }

    fn conv_input_grad<'g>(&'g self, gy: Var<'g>, w: Var<'g>, geom: ConvGeom) -> Result<Var<'g>> {
        let gx = kernels::conv2d_input_grad(gy.value().data(), w.value().data(), &geom);
        self.push(
            "conv2d_input_grad",
            Tensor::from_parts(geom.input_shape(), gx),
            Op::ConvInputGrad { gy: gy.id, w: w.id, geom },
        )
    }

    fn conv_weight_grad<'g>(&'g self, x: Var<'g>, gy: Var<'g>, geom: ConvGeom) -> Result<Var<'g>> {
        let gw = kernels::conv2d_weight_grad(x.value().data(), gy.value().data(), &geom);
        self.push(
            "conv2d_weight_grad",
            Tensor::from_parts(geom.weight_shape(), gw),
            Op::ConvWeightGrad { x: x.id, gy: gy.id, geom },
        )
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(AutodiffError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() });
    }
    Ok(())
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.numel()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn binary(self, other: Var<'g>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        same_shape(name, a.shape(), b.shape())?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        self.graph.push(name, Tensor::from_parts(a.shape().to_vec(), data), op)
    }

    fn unary(self, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'g>> {
        let a = self.value();
        let data = a.data().iter().map(|x| f(*x)).collect();
        self.graph.push(name, Tensor::from_parts(a.shape().to_vec(), data), op)
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Result<Var<'g>> {
        self.unary("scale", |a| a * c, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Result<Var<'g>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'g>> {
        self.unary("add_scalar", |a| a + c, Op::AddScalar(self.id))
    }

    pub fn sqrt(self) -> Result<Var<'g>> {
        self.unary("sqrt", f64::sqrt, Op::Sqrt(self.id))
    }

    pub fn relu(self) -> Result<Var<'g>> {
        self.relu_mask(self)
    }

    /// `self` where `mask > 0`, zero elsewhere.
    pub fn relu_mask(self, mask: Var<'g>) -> Result<Var<'g>> {
        self.binary(mask, "relu", |a, m| if m > 0.0 { a } else { 0.0 }, Op::ReluMask(self.id, mask.id))
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let c = kernels::matmul(a.data(), b.data(), sa[0], sa[1], sb[1]);
        self.graph.push("matmul", Tensor::from_parts(vec![sa[0], sb[1]], c), Op::MatMul(self.id, other.id))
    }

    pub fn transpose(self) -> Result<Var<'g>> {
        let a = self.value();
        let s = a.shape();
        if s.len() != 2 {
            return Err(AutodiffError::InvalidArgument { op: "transpose", msg: format!("expected 2-D, got {s:?}") });
        }
        let t = kernels::transpose(a.data(), s[0], s[1]);
        self.graph.push("transpose", Tensor::from_parts(vec![s[1], s[0]], t), Op::Transpose(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        if shape.iter().product::<usize>() != a.numel() || shape.contains(&0) {
            return Err(AutodiffError::ShapeMismatch { op: "reshape", lhs: a.shape().to_vec(), rhs: shape.to_vec() });
        }
        self.graph.push("reshape", Tensor::from_parts(shape.to_vec(), a.data().to_vec()), Op::Reshape(self.id))
    }

    /// Collapses all but the leading dimension.
    pub fn flatten(self) -> Result<Var<'g>> {
        let s = self.shape();
        let rest: usize = s[1..].iter().product();
        self.reshape(&[s[0], rest])
    }

    /// Broadcasts size-1 dims up to `shape` (same rank).
    pub fn expand(self, shape: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        let s = a.shape();
        if s.len() != shape.len() || s.iter().zip(shape).any(|(&x, &y)| x != y && x != 1) {
            return Err(AutodiffError::ShapeMismatch { op: "expand", lhs: s.to_vec(), rhs: shape.to_vec() });
        }
        if s == shape {
            return Ok(self);
        }
        let y = kernels::expand(a.data(), s, shape);
        self.graph.push("expand", Tensor::from_parts(shape.to_vec(), y), Op::Expand(self.id))
    }

    /// Sums over the dims where `shape` has size 1 (same rank).
    pub fn sum_to(self, shape: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        let s = a.shape();
        if s.len() != shape.len() || s.iter().zip(shape).any(|(&x, &y)| x != y && y != 1) {
            return Err(AutodiffError::ShapeMismatch { op: "sum_to", lhs: s.to_vec(), rhs: shape.to_vec() });
        }
        if s == shape {
            return Ok(self);
        }
        let y = kernels::reduce_sum(a.data(), s, shape);
        self.graph.push("sum_to", Tensor::from_parts(shape.to_vec(), y), Op::ReduceSum(self.id))
    }

    pub fn sum(self) -> Result<Var<'g>> {
        let s = self.shape();
        let ones = vec![1; s.len()];
        self.sum_to(&ones)?.reshape(&[1])
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let n = self.numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    pub fn dot(self, other: Var<'g>) -> Result<Var<'g>> {
        self.mul(other)?.sum()
    }

    /// Euclidean norm of all elements.
    pub fn norm(self) -> Result<Var<'g>> {
        self.dot(self)?.sqrt()
    }

    /// Contiguous run of the flattened values starting at `start`, viewed as `shape`.
    pub fn slice(self, start: usize, shape: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        let len: usize = shape.iter().product();
        if start + len > a.numel() || len == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{} outside {} values", start + len, a.numel()),
            });
        }
        let data = a.data()[start..start + len].to_vec();
        self.graph.push("slice", Tensor::from_parts(shape.to_vec(), data), Op::Slice { src: self.id, start })
    }

    /// Zero tensor of `shape` whose flattened values at `start..` hold `self`.
    pub fn embed(self, start: usize, shape: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        let total: usize = shape.iter().product();
        if start + a.numel() > total {
            return Err(AutodiffError::InvalidArgument {
                op: "embed",
                msg: format!("{} values at {start} overflow {total}", a.numel()),
            });
        }
        let mut data = vec![0.0; total];
        data[start..start + a.numel()].copy_from_slice(a.data());
        self.graph.push("embed", Tensor::from_parts(shape.to_vec(), data), Op::Embed { src: self.id, start })
    }

    /// 2-D cross-correlation of `[n, c, h, w]` with `[o, c, kh, kw]`.
    pub fn conv2d(self, weight: Var<'g>, stride: usize, pad: usize) -> Result<Var<'g>> {
        let (xs, ws) = (self.shape(), weight.shape());
        let geom = ConvGeom::new(&xs, &ws, stride, pad).ok_or(AutodiffError::ShapeMismatch {
            op: "conv2d",
            lhs: xs,
            rhs: ws,
        })?;
        self.graph.conv(self, weight, geom)
    }

    /// Adds a per-channel bias `[c]` to `[n, c, ...]`.
    pub fn add_bias(self, bias: Var<'g>) -> Result<Var<'g>> {
        let (s, b) = (self.shape(), bias.shape());
        if s.len() < 2 || b != [s[1]] {
            return Err(AutodiffError::ShapeMismatch { op: "add_bias", lhs: s, rhs: b });
        }
        let mut bshape = vec![1; s.len()];
        bshape[1] = s[1];
        self.add(bias.reshape(&bshape)?.expand(&s)?)
    }

    pub fn avg_pool2d(self, k: usize) -> Result<Var<'g>> {
        let a = self.value();
        let s = a.shape();
        if s.len() != 4 || k == 0 || !s[2].is_multiple_of(k) || !s[3].is_multiple_of(k) {
            return Err(AutodiffError::InvalidArgument { op: "avg_pool2d", msg: format!("window {k} on {s:?}") });
        }
        let y = kernels::avg_pool(a.data(), s, k);
        self.graph.push(
            "avg_pool2d",
            Tensor::from_parts(vec![s[0], s[1], s[2] / k, s[3] / k], y),
            Op::AvgPool { x: self.id, k },
        )
    }

    fn pool_spread(self, k: usize) -> Result<Var<'g>> {
        let a = self.value();
        let s = a.shape();
        let y = kernels::pool_spread(a.data(), s, k);
        self.graph.push(
            "pool_spread",
            Tensor::from_parts(vec![s[0], s[1], s[2] * k, s[3] * k], y),
            Op::PoolSpread { g: self.id, k },
        )
    }

    /// Per-sample, per-channel normalisation over the spatial dims (no affine).
    pub fn instance_norm(self, eps: f64) -> Result<Var<'g>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(AutodiffError::InvalidArgument {
                op: "instance_norm",
                msg: format!("expected 4-D, got {s:?}"),
            });
        }
        if !(eps > 0.0) {
            return Err(AutodiffError::InvalidArgument {
                op: "instance_norm",
                msg: format!("eps {eps} must be positive"),
            });
        }
        let y = kernels::instance_norm(self.value().data(), &s, eps);
        self.graph.push("instance_norm", Tensor::from_parts(s, y), Op::InstanceNorm { x: self.id, eps })
    }

    /// Row-wise softmax of a `[rows, classes]` matrix.
    pub fn softmax(self) -> Result<Var<'g>> {
        let a = self.value();
        let s = a.shape();
        if s.len() != 2 {
            return Err(AutodiffError::InvalidArgument { op: "softmax", msg: format!("expected 2-D, got {s:?}") });
        }
        let y = kernels::softmax_rows(a.data(), s[0], s[1]);
        self.graph.push("softmax", Tensor::from_parts(s.to_vec(), y), Op::Softmax(self.id))
    }

    /// Per-row cross-entropy of logits `[rows, classes]` against class indices.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        let s = a.shape();
        if s.len() != 2 || targets.len() != s[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy",
                lhs: s.to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= s[1]) {
            return Err(AutodiffError::InvalidArgument {
                op: "cross_entropy",
                msg: format!("target {t} outside {} classes", s[1]),
            });
        }
        let y = kernels::cross_entropy_rows(a.data(), targets, s[1]);
        self.graph.push(
            "cross_entropy",
            Tensor::from_parts(vec![s[0]], y),
            Op::CrossEntropy { logits: self.id, targets: targets.into() },
        )
    }
}

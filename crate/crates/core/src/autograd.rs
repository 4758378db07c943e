//! Static computation graph with reverse-mode differentiation and gradient hooks.
//!
//! A graph is built once, then run any number of forward/backward cycles.
//! Node ids follow creation order, which is also the default schedule.
//! Backward visits nodes in reverse schedule order; at each node the
//! gradient contributions of its successors are summed (ascending successor
//! id, then operand slot) before that node's hooks fire, and the hooks fire
//! before anything is emitted to the predecessors.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::ops::Deref;
use std::rc::{Rc, Weak};

use crate::error::{Error, Result};
use crate::linalg::{matmul, MatmulStrategy};
use crate::nn::functional as F;
use crate::precision::{self, Precision, Tracked, UnaryFn};
use crate::ptensor::{ew_binary, ew_unary, reduce, BinaryOp, PTensor, ReduceOp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Values supplied for input and parameter nodes at forward time.
pub type Feed = BTreeMap<NodeId, PTensor>;

#[derive(Clone, Debug)]
pub enum Op {
    /// Placeholder fed at forward time.
    Input {
        name: String,
        requires_grad: bool,
    },
    Constant(PTensor),
    Binary(BinaryOp),
    Unary(UnaryFn),
    MatMul(MatmulStrategy),
    Transpose,
    Reshape(Vec<usize>),
    /// Keeps the leading axis and flattens the rest.
    Flatten,
    Reduce {
        op: ReduceOp,
        axis: Option<usize>,
    },
    /// Operands: input, kernel, bias.
    Conv2d {
        stride: usize,
    },
    /// Operands: prediction, target.
    MseLoss,
    /// Operands: logits, labels (class indices stored as values).
    CrossEntropy,
}

impl Op {
    pub fn name(&self) -> String {
        match self {
            Op::Input { name, .. } => format!("input:{name}"),
            Op::Constant(_) => "const".into(),
            Op::Binary(b) => b.name().into(),
            Op::Unary(f) => f.name().into(),
            Op::MatMul(s) => format!("matmul:{s}"),
            Op::Transpose => "transpose".into(),
            Op::Reshape(_) => "reshape".into(),
            Op::Flatten => "flatten".into(),
            Op::Reduce { op, axis: None } => op.name().into(),
            Op::Reduce { op, axis: Some(a) } => format!("{}:{a}", op.name()),
            Op::Conv2d { stride } => format!("conv2d:{stride}"),
            Op::MseLoss => "mse".into(),
            Op::CrossEntropy => "xent".into(),
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Input { .. } | Op::Constant(_) => 0,
            Op::Unary(_) | Op::Transpose | Op::Reshape(_) | Op::Flatten | Op::Reduce { .. } => 1,
            Op::Binary(_) | Op::MatMul(_) | Op::MseLoss | Op::CrossEntropy => 2,
            Op::Conv2d { .. } => 3,
        }
    }
}

/// A forward value kept alive by the graph until backward finishes.
///
/// Every live instance is counted by the owning graph.
#[derive(Debug)]
pub struct Temporary {
    tensor: PTensor,
    live: Rc<Cell<usize>>,
}

impl Temporary {
    fn new(tensor: PTensor, live: &Rc<Cell<usize>>) -> Rc<Self> {
        live.set(live.get() + 1);
        Rc::new(Temporary {
            tensor,
            live: Rc::clone(live),
        })
    }

    pub fn tensor(&self) -> &PTensor {
        &self.tensor
    }
}

impl Deref for Temporary {
    type Target = PTensor;

    fn deref(&self) -> &PTensor {
        &self.tensor
    }
}

impl Drop for Temporary {
    fn drop(&mut self) {
        self.live.set(self.live.get() - 1);
    }
}

/// Once-callable gradient hook: receives the node's summed gradient and the
/// temporaries it asked for, returns the exact bits to install on the gradient.
pub type HookFn = Box<dyn FnOnce(&PTensor, &[Rc<Temporary>]) -> Vec<u8>>;

struct HookEntry {
    temps: Vec<NodeId>,
    refs: Option<Vec<Weak<Temporary>>>,
    f: HookFn,
}

#[derive(Clone, Debug)]
struct NodeStats {
    shape: Vec<usize>,
    bits_min: Option<u8>,
    bits_max: Option<u8>,
}

struct Node {
    op: Op,
    preds: Vec<NodeId>,
    succs: Vec<NodeId>,
    needs_grad: bool,
    value: Option<Rc<Temporary>>,
    stats: Option<NodeStats>,
    hooks: Vec<HookEntry>,
}

/// Gradients produced by one backward pass, keyed by node.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<NodeId, PTensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&PTensor> {
        self.map.get(&id)
    }

    pub fn remove(&mut self, id: NodeId) -> Option<PTensor> {
        self.map.remove(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &PTensor)> {
        self.map.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

pub struct Graph {
    precision: Precision,
    nodes: Vec<Node>,
    schedule: Vec<NodeId>,
    live: Rc<Cell<usize>>,
    evals: u64,
    forwarded: bool,
    in_backward: bool,
    hooks_fired: u64,
    hooks_skipped: u64,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("precision", &self.precision)
            .field("nodes", &self.nodes.len())
            .field("forwarded", &self.forwarded)
            .finish()
    }
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            precision,
            nodes: Vec::new(),
            schedule: Vec::new(),
            live: Rc::new(Cell::new(0)),
            evals: 0,
            forwarded: false,
            in_backward: false,
            hooks_fired: 0,
            hooks_skipped: 0,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// # Panics
    ///
    /// Panics if an operand id does not belong to this graph or the operand
    /// count does not match the operation.
    pub fn push(&mut self, op: Op, preds: &[NodeId]) -> NodeId {
        assert_eq!(op.arity(), preds.len(), "wrong operand count for {}", op.name());
        let id = NodeId(self.nodes.len());
        for p in preds {
            assert!(p.0 < id.0, "operand {p} is not a node of this graph");
        }
        let needs_grad = match &op {
            Op::Input { requires_grad, .. } => *requires_grad,
            Op::Constant(_) => false,
            _ => preds.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        for p in preds {
            let succs = &mut self.nodes[p.0].succs;
            if !succs.contains(&id) {
                succs.push(id);
            }
        }
        self.nodes.push(Node {
            op,
            preds: preds.to_vec(),
            succs: Vec::new(),
            needs_grad,
            value: None,
            stats: None,
            hooks: Vec::new(),
        });
        self.schedule.push(id);
        id
    }

    /// A fed placeholder that does not take gradients (data, targets, labels).
    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(
            Op::Input {
                name: name.into(),
                requires_grad: false,
            },
            &[],
        )
    }

    /// A fed placeholder that takes gradients.
    pub fn parameter(&mut self, name: &str) -> NodeId {
        self.push(
            Op::Input {
                name: name.into(),
                requires_grad: true,
            },
            &[],
        )
    }

    pub fn constant(&mut self, t: PTensor) -> NodeId {
        self.push(Op::Constant(t), &[])
    }

    pub fn binary(&mut self, op: BinaryOp, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Binary(op), &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, f: UnaryFn, a: NodeId) -> NodeId {
        self.push(Op::Unary(f), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryFn::Relu, a)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId, s: MatmulStrategy) -> NodeId {
        self.push(Op::MatMul(s), &[a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose, &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape(shape.to_vec()), &[a])
    }

    pub fn flatten(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Flatten, &[a])
    }

    pub fn reduce(&mut self, op: ReduceOp, a: NodeId, axis: Option<usize>) -> NodeId {
        self.push(Op::Reduce { op, axis }, &[a])
    }

    pub fn sum(&mut self, a: NodeId, axis: Option<usize>) -> NodeId {
        self.reduce(ReduceOp::Sum, a, axis)
    }

    pub fn mean(&mut self, a: NodeId, axis: Option<usize>) -> NodeId {
        self.reduce(ReduceOp::Mean, a, axis)
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId, stride: usize) -> NodeId {
        self.push(Op::Conv2d { stride }, &[x, kernel, bias])
    }

    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> NodeId {
        self.push(Op::MseLoss, &[pred, target])
    }

    pub fn cross_entropy(&mut self, logits: NodeId, labels: NodeId) -> NodeId {
        self.push(Op::CrossEntropy, &[logits, labels])
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn preds(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].preds
    }

    pub fn succs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].succs
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Forward value of a node, available between forward and backward.
    pub fn value(&self, id: NodeId) -> Option<&PTensor> {
        self.nodes.get(id.0)?.value.as_deref().map(Temporary::tensor)
    }

    pub fn schedule(&self) -> &[NodeId] {
        &self.schedule
    }

    /// Replaces the evaluation order with another valid linearization.
    pub fn set_schedule(&mut self, order: Vec<NodeId>) -> Result<()> {
        let n = self.nodes.len();
        if order.len() != n {
            return Err(Error::graph(format!(
                "schedule lists {} nodes, graph has {n}",
                order.len()
            )));
        }
        let mut pos = vec![usize::MAX; n];
        for (i, id) in order.iter().enumerate() {
            if id.0 >= n || pos[id.0] != usize::MAX {
                return Err(Error::graph(format!("schedule entry {id} is invalid or repeated")));
            }
            pos[id.0] = i;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(p) = node.preds.iter().find(|p| pos[p.0] > pos[i]) {
                return Err(Error::graph(format!("schedule puts node {i} before its operand {p}")));
            }
        }
        self.schedule = order;
        Ok(())
    }

    /// Temporaries currently alive (forward values not yet released).
    pub fn live_temporaries(&self) -> usize {
        self.live.get()
    }

    /// Total node evaluations performed by forward passes.
    pub fn forward_evals(&self) -> u64 {
        self.evals
    }

    pub fn hooks_fired(&self) -> u64 {
        self.hooks_fired
    }

    pub fn hooks_skipped(&self) -> u64 {
        self.hooks_skipped
    }

    pub fn pending_hooks(&self) -> usize {
        self.nodes.iter().map(|n| n.hooks.len()).sum()
    }

    /// Attaches a once-callable hook to `node`.
    ///
    /// `temps` names the nodes whose forward values the hook reads. The hook
    /// holds only weak references to them: it binds to the values alive at
    /// registration, or to those of the next forward pass if none are. A hook
    /// whose references are no longer valid when its turn comes is skipped,
    /// and so is a hook on a node that receives no gradient.
    pub fn register_hook<H>(&mut self, node: NodeId, temps: &[NodeId], hook: H) -> Result<()>
    where
        H: FnOnce(&PTensor, &[Rc<Temporary>]) -> Vec<u8> + 'static,
    {
        if self.in_backward {
            return Err(Error::graph("hooks cannot be registered during backward"));
        }
        if node.0 >= self.nodes.len() {
            return Err(Error::graph(format!("no node {node}")));
        }
        if let Some(t) = temps.iter().find(|t| t.0 >= self.nodes.len()) {
            return Err(Error::graph(format!("no node {t}")));
        }
        let refs = if self.forwarded {
            Some(self.weak_refs(temps))
        } else {
            None
        };
        self.nodes[node.0].hooks.push(HookEntry {
            temps: temps.to_vec(),
            refs,
            f: Box::new(hook),
        });
        Ok(())
    }

    fn weak_refs(&self, temps: &[NodeId]) -> Vec<Weak<Temporary>> {
        temps
            .iter()
            .map(|t| self.nodes[t.0].value.as_ref().map(Rc::downgrade).unwrap_or_default())
            .collect()
    }

    /// Evaluates every node in schedule order and returns the value of the
    /// last scheduled node.
    pub fn forward(&mut self, feed: &Feed) -> Result<PTensor> {
        for node in &mut self.nodes {
            node.value = None;
        }
        self.forwarded = false;
        let order = self.schedule.clone();
        for id in order {
            let v = self.eval_node(id, feed).map_err(|e| Error::Node {
                node: id.0,
                op: self.nodes[id.0].op.name(),
                source: Box::new(e),
            });
            let v = match v {
                Ok(v) => v,
                Err(e) => {
                    for node in &mut self.nodes {
                        node.value = None;
                    }
                    return Err(e);
                }
            };
            self.evals += 1;
            let node = &mut self.nodes[id.0];
            node.stats = Some(NodeStats {
                shape: v.shape().to_vec(),
                bits_min: v.min_bits(),
                bits_max: v.max_bits(),
            });
            node.value = Some(Temporary::new(v, &self.live));
        }
        self.forwarded = true;
        for i in 0..self.nodes.len() {
            for h in 0..self.nodes[i].hooks.len() {
                if self.nodes[i].hooks[h].refs.is_none() {
                    let refs = self.weak_refs(&self.nodes[i].hooks[h].temps);
                    self.nodes[i].hooks[h].refs = Some(refs);
                }
            }
        }
        match self.schedule.last() {
            Some(&last) => Ok(self.operand(last).clone()),
            None => Err(Error::graph("empty graph")),
        }
    }

    fn operand(&self, id: NodeId) -> &PTensor {
        let v = self.nodes[id.0].value.as_deref();
        debug_assert!(v.is_some(), "schedule evaluated a node before its operand {id}");
        v.map(Temporary::tensor)
            .expect("operand evaluated earlier in the schedule")
    }

    fn eval_node(&self, id: NodeId, feed: &Feed) -> Result<PTensor> {
        let node = &self.nodes[id.0];
        let arg = |i: usize| self.operand(node.preds[i]);
        let v = match &node.op {
            Op::Input { name, .. } => feed
                .get(&id)
                .cloned()
                .ok_or_else(|| Error::graph(format!("missing input `{name}`")))?,
            Op::Constant(t) => t.clone(),
            Op::Binary(op) => ew_binary(*op, arg(0), arg(1))?,
            Op::Unary(f) => ew_unary(*f, arg(0)),
            Op::MatMul(s) => matmul(arg(0), arg(1), *s)?,
            Op::Transpose => arg(0).transpose2d()?,
            Op::Reshape(shape) => arg(0).reshape(shape)?,
            Op::Flatten => {
                let x = arg(0);
                let lead = *x
                    .shape()
                    .first()
                    .ok_or_else(|| Error::shape("cannot flatten a scalar"))?;
                let rest = x.numel().checked_div(lead).unwrap_or(0);
                x.reshape(&[lead, rest])?
            }
            Op::Reduce { op, axis } => reduce(*op, arg(0), *axis)?,
            Op::Conv2d { stride } => F::conv2d_forward(arg(0), arg(1), arg(2), *stride)?,
            Op::MseLoss => F::mse_loss(arg(0), arg(1))?,
            Op::CrossEntropy => {
                let logits = arg(0);
                let (rows, classes) = match logits.shape() {
                    [r, c] => (*r, *c),
                    s => return Err(Error::shape(format!("logits must be 2-D, got {s:?}"))),
                };
                let labels = F::labels_from_tensor(arg(1), rows, classes)?;
                F::cross_entropy(logits, &labels)?
            }
        };
        if v.precision() != self.precision {
            return Err(Error::PrecisionMismatch {
                expected: self.precision,
                actual: v.precision(),
            });
        }
        Ok(v)
    }

    /// Reverse pass from the scalar `loss`; releases all temporaries afterwards,
    /// whether it succeeds or fails.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if !self.forwarded {
            return Err(Error::graph("backward requires a completed forward pass"));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::graph(format!("no node {loss}")));
        }
        self.in_backward = true;
        let result = self.backward_inner(loss);
        self.in_backward = false;
        self.release_temporaries();
        result
    }

    fn backward_inner(&mut self, loss: NodeId) -> Result<Gradients> {
        let seed_shape = self.operand(loss).shape().to_vec();
        if self.operand(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, node {loss} has shape {seed_shape:?}"
            )));
        }
        let n = self.nodes.len();
        let mut reaches = vec![false; n];
        reaches[loss.0] = true;
        for id in self.schedule.iter().rev() {
            if reaches[id.0] {
                for p in &self.nodes[id.0].preds {
                    reaches[p.0] = true;
                }
            }
        }
        let has_grad: Vec<bool> = (0..n).map(|i| reaches[i] && self.nodes[i].needs_grad).collect();

        let mut pending: Vec<Vec<(NodeId, usize, PTensor)>> = (0..n).map(|_| Vec::new()).collect();
        let mut grads = Gradients::default();
        let order: Vec<NodeId> = self.schedule.iter().rev().copied().collect();
        for id in order {
            if !has_grad[id.0] {
                continue;
            }
            let grad = if id == loss {
                PTensor::full(&seed_shape, 1.0, self.precision)
            } else {
                let mut parts = std::mem::take(&mut pending[id.0]);
                let expected: usize = self.nodes[id.0]
                    .succs
                    .iter()
                    .filter(|s| has_grad[s.0])
                    .map(|s| self.nodes[s.0].preds.iter().filter(|&&p| p == id).count())
                    .sum();
                debug_assert_eq!(
                    parts.len(),
                    expected,
                    "node {id} summed before all contributions arrived"
                );
                parts.sort_by_key(|(s, slot, _)| (*s, *slot));
                let mut it = parts.into_iter().map(|(_, _, g)| g);
                let first = it
                    .next()
                    .ok_or_else(|| Error::graph(format!("node {id} received no gradient")))?;
                it.try_fold(first, |acc, g| ew_binary(BinaryOp::Add, &acc, &g))
                    .map_err(|e| self.node_error(id, e))?
            };
            let grad = self.run_hooks(id, grad)?;

            let node = &self.nodes[id.0];
            let wanted: Vec<bool> = node.preds.iter().map(|p| has_grad[p.0]).collect();
            if wanted.iter().any(|&w| w) {
                let parts = self
                    .backward_op(id, &grad, &wanted)
                    .map_err(|e| self.node_error(id, e))?;
                for (slot, (pred, part)) in node.preds.iter().zip(parts).enumerate() {
                    if let Some(g) = part {
                        pending[pred.0].push((id, slot, g));
                    }
                }
            }
            grads.map.insert(id, grad);
        }
        Ok(grads)
    }

    fn node_error(&self, id: NodeId, e: Error) -> Error {
        Error::Node {
            node: id.0,
            op: self.nodes[id.0].op.name(),
            source: Box::new(e),
        }
    }

    fn run_hooks(&mut self, id: NodeId, mut grad: PTensor) -> Result<PTensor> {
        let hooks = std::mem::take(&mut self.nodes[id.0].hooks);
        let mut hooks = hooks.into_iter();
        while let Some(h) = hooks.next() {
            let temps: Option<Vec<Rc<Temporary>>> = h
                .refs
                .unwrap_or_default()
                .iter()
                .map(Weak::upgrade)
                .collect::<Option<Vec<_>>>()
                .filter(|t| t.len() == h.temps.len());
            let Some(temps) = temps else {
                self.hooks_skipped += 1;
                continue;
            };
            self.hooks_fired += 1;
            let bits = (h.f)(&grad, &temps);
            drop(temps);
            grad = match grad.with_bits(bits) {
                Ok(g) => g,
                Err(e) => {
                    self.hooks_skipped += hooks.len() as u64;
                    return Err(self.node_error(id, e));
                }
            };
        }
        Ok(grad)
    }

    /// Drops every forward value and any hook that did not fire.
    pub fn release_temporaries(&mut self) {
        for node in &mut self.nodes {
            node.value = None;
            self.hooks_skipped += node.hooks.len() as u64;
            node.hooks.clear();
        }
        self.forwarded = false;
    }

    fn backward_op(&self, id: NodeId, g: &PTensor, wanted: &[bool]) -> Result<Vec<Option<PTensor>>> {
        let node = &self.nodes[id.0];
        let p = self.precision;
        let arg = |i: usize| self.operand(node.preds[i]);
        let out = self.operand(id);
        let keep = |i: usize, f: &dyn Fn() -> Result<PTensor>| -> Result<Option<PTensor>> {
            if wanted[i] {
                f().map(Some)
            } else {
                Ok(None)
            }
        };
        let parts = match &node.op {
            Op::Input { .. } | Op::Constant(_) => vec![],
            Op::Binary(op) => {
                let (a, b) = (arg(0), arg(1));
                let neg = |t: PTensor| t.map_tracked(|x| Tracked::new(-x.value, x.bits));
                match op {
                    BinaryOp::Add => vec![
                        keep(0, &|| g.sum_to_shape(a.shape()))?,
                        keep(1, &|| g.sum_to_shape(b.shape()))?,
                    ],
                    BinaryOp::Sub => vec![
                        keep(0, &|| g.sum_to_shape(a.shape()))?,
                        keep(1, &|| neg(g.sum_to_shape(b.shape())?).into_ok())?,
                    ],
                    BinaryOp::Mul => vec![
                        keep(0, &|| ew_binary(BinaryOp::Mul, g, b)?.sum_to_shape(a.shape()))?,
                        keep(1, &|| ew_binary(BinaryOp::Mul, g, a)?.sum_to_shape(b.shape()))?,
                    ],
                    BinaryOp::Div => vec![
                        keep(0, &|| ew_binary(BinaryOp::Div, g, b)?.sum_to_shape(a.shape()))?,
                        keep(1, &|| {
                            let t = ew_binary(BinaryOp::Mul, g, out)?;
                            neg(ew_binary(BinaryOp::Div, &t, b)?).sum_to_shape(b.shape())
                        })?,
                    ],
                }
            }
            Op::Unary(f) => vec![Some(unary_backward(p, *f, arg(0), out, g)?)],
            Op::MatMul(s) => {
                let (a, b) = (arg(0), arg(1));
                vec![
                    keep(0, &|| matmul(g, &b.transpose2d()?, *s))?,
                    keep(1, &|| matmul(&a.transpose2d()?, g, *s))?,
                ]
            }
            Op::Transpose => vec![Some(g.transpose2d()?)],
            Op::Reshape(_) | Op::Flatten => vec![Some(g.reshape(arg(0).shape())?)],
            Op::Reduce { op, axis } => vec![Some(reduce_backward(*op, *axis, arg(0), g)?)],
            Op::Conv2d { stride } => {
                let (gx, gw, gb) = F::conv2d_backward(arg(0), arg(1), arg(2), *stride, g)?;
                vec![
                    wanted[0].then_some(gx),
                    wanted[1].then_some(gw),
                    wanted[2].then_some(gb),
                ]
            }
            Op::MseLoss => {
                let (gp, gt) = F::mse_backward(arg(0), arg(1), g.item()?)?;
                vec![wanted[0].then_some(gp), wanted[1].then_some(gt)]
            }
            Op::CrossEntropy => {
                let logits = arg(0);
                let (rows, classes) = (logits.shape()[0], logits.shape()[1]);
                let labels = F::labels_from_tensor(arg(1), rows, classes)?;
                vec![
                    keep(0, &|| F::cross_entropy_backward(logits, &labels, g.item()?))?,
                    // class indices are not differentiable
                    wanted[1].then(|| PTensor::zeros(arg(1).shape(), p)),
                ]
            }
        };
        Ok(parts)
    }

    /// Same operations and schedule at another precision, without values or hooks.
    ///
    /// Constants are converted with [`PTensor::convert`].
    pub fn rebuild_at(&self, p: Precision) -> Graph {
        let mut g = Graph::new(p);
        for node in &self.nodes {
            let op = match &node.op {
                Op::Constant(t) => Op::Constant(t.convert(p)),
                other => other.clone(),
            };
            g.push(op, &node.preds);
        }
        g.schedule = self.schedule.clone();
        g
    }

    /// One line per node: `id op shape bits_min bits_max preds=[..] succs=[..]`.
    ///
    /// Shapes and bit ranges are those of the latest forward pass, so the
    /// dump stays available after the temporaries are released.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let list = |ids: &[NodeId]| ids.iter().map(|i| i.0.to_string()).collect::<Vec<_>>().join(",");
        for (i, node) in self.nodes.iter().enumerate() {
            let (shape, lo, hi) = match &node.stats {
                Some(s) => (
                    format!(
                        "[{}]",
                        s.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
                    ),
                    s.bits_min.map_or("-".into(), |b| b.to_string()),
                    s.bits_max.map_or("-".into(), |b| b.to_string()),
                ),
                None => ("?".into(), "-".into(), "-".into()),
            };
            let _ = writeln!(
                out,
                "{i} {} {shape} {lo} {hi} preds=[{}] succs=[{}]",
                node.op.name(),
                list(&node.preds),
                list(&node.succs)
            );
        }
        out
    }
}

trait IntoOk: Sized {
    fn into_ok(self) -> Result<Self> {
        Ok(self)
    }
}

impl IntoOk for PTensor {}

fn unary_backward(p: Precision, f: UnaryFn, x: &PTensor, z: &PTensor, g: &PTensor) -> Result<PTensor> {
    if g.shape() != x.shape() {
        return Err(Error::shape("gradient shape differs from operand"));
    }
    let one = Tracked::exact(1.0, p);
    let two = Tracked::exact(2.0, p);
    let mut values = Vec::with_capacity(x.numel());
    let mut bits = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let (xi, zi, gi) = (x.get(i), z.get(i), g.get(i));
        let t = match f {
            UnaryFn::Relu => {
                if xi.bits == 0 {
                    // the sign of the exact input is unknown
                    Tracked::new(if xi.value > 0.0 { gi.value } else { 0.0 }, 0)
                } else if xi.value > 0.0 {
                    gi
                } else {
                    Tracked::exact(0.0, p)
                }
            }
            UnaryFn::Abs => {
                let s = if xi.value > 0.0 {
                    1.0
                } else if xi.value < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                if xi.bits == 0 {
                    Tracked::new(s * gi.value, 0)
                } else {
                    Tracked::new(s * gi.value, if s == 0.0 { p.max_bits() } else { gi.bits })
                }
            }
            UnaryFn::Neg => Tracked::new(-gi.value, gi.bits),
            UnaryFn::Exp => precision::mul(p, gi, zi),
            UnaryFn::Log => precision::div(p, gi, xi),
            UnaryFn::Tanh => {
                let d = precision::sub(p, one, precision::mul(p, zi, zi));
                precision::mul(p, gi, d)
            }
            UnaryFn::Sigmoid => {
                let d = precision::mul(p, zi, precision::sub(p, one, zi));
                precision::mul(p, gi, d)
            }
            UnaryFn::Sqrt => precision::div(p, gi, precision::mul(p, zi, two)),
        };
        values.push(t.value);
        bits.push(if t.value.is_finite() { t.bits } else { 0 });
    }
    PTensor::from_parts(x.shape(), values, bits, p)
}

/// Index of the reduced element each input element feeds.
fn reduced_index(shape: &[usize], axis: Option<usize>) -> (Vec<usize>, usize) {
    let n: usize = shape.iter().product();
    match axis {
        None => (vec![0; n], n),
        Some(ax) => {
            let len = shape[ax];
            let inner: usize = shape[ax + 1..].iter().product();
            let idx = (0..n).map(|i| (i / (len * inner)) * inner + i % inner).collect();
            (idx, len)
        }
    }
}

fn reduce_backward(op: ReduceOp, axis: Option<usize>, x: &PTensor, g: &PTensor) -> Result<PTensor> {
    let p = x.precision();
    let (idx, len) = reduced_index(x.shape(), axis);
    match op {
        ReduceOp::Sum => g.gather_flat(&idx, x.shape()),
        ReduceOp::Mean => {
            let n = crate::ptensor::count_literal(len.max(1), p);
            let scaled = g.map_tracked(|t| precision::div(p, t, n));
            scaled.gather_flat(&idx, x.shape())
        }
        ReduceOp::Max => {
            let groups = g.numel();
            let mut winner = vec![usize::MAX; groups];
            for (i, &o) in idx.iter().enumerate() {
                let w = winner[o];
                let v = x.values()[i];
                if w == usize::MAX || (!x.values()[w].is_nan() && (v.is_nan() || v > x.values()[w])) {
                    winner[o] = i;
                }
            }
            // the routing is only certain if no other element can be the exact maximum
            let mut certain = vec![true; groups];
            let lower: Vec<f64> = winner
                .iter()
                .map(|&w| {
                    let t = x.get(w);
                    t.value + t.span(p).lo
                })
                .collect();
            for (i, &o) in idx.iter().enumerate() {
                if i != winner[o] {
                    let t = x.get(i);
                    if (t.value + t.span(p).hi).partial_cmp(&lower[o]) != Some(std::cmp::Ordering::Less) {
                        certain[o] = false;
                    }
                }
            }
            let mut values = Vec::with_capacity(x.numel());
            let mut bits = Vec::with_capacity(x.numel());
            for (i, &o) in idx.iter().enumerate() {
                let gi = g.get(o);
                let v = if i == winner[o] { gi.value } else { 0.0 };
                values.push(v);
                bits.push(if !certain[o] {
                    0
                } else if i == winner[o] {
                    gi.bits
                } else {
                    p.max_bits()
                });
            }
            PTensor::from_parts(x.shape(), values, bits, p)
        }
    }
}

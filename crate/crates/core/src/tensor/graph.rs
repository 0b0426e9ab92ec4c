//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every primitive appends a node holding its forward value. Inputs always
//! precede the node that consumes them, so the tape is already in
//! topological order and `backward` is a single reverse sweep.

use std::fmt;

use super::value::{broadcast_shape, Tensor};
use super::TensorError;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Handle to a mutable per-graph state vector shared by custom ops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotId(usize);

impl SlotId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A primitive with a hand-written backward rule.
///
/// `backward` receives the gradient of the node output and returns one
/// gradient per input, in input order. It may read and update graph state
/// slots, which is how running statistics are carried across several uses
/// of the same layer within one backward sweep.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        grad_out: &Tensor,
        slots: &mut [Vec<f64>],
    ) -> Result<Vec<Tensor>, TensorError>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Neg,
    Square,
    Sqrt,
    Abs,
    /// Three-valued sign with `sign(0) = 0`; zero derivative everywhere.
    Sign,
    LeakyRelu(f64),
    AddScalar(f64),
    MulScalar(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    MatMul(Var, Var),
    Sum {
        x: Var,
        axes: Vec<usize>,
        keepdims: bool,
    },
    Mean {
        x: Var,
        axes: Vec<usize>,
        keepdims: bool,
    },
    MinAll(Var),
    Detach(Var),
    Reshape(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Unary(_, x)
            | Op::Sum { x, .. }
            | Op::Mean { x, .. }
            | Op::MinAll(x)
            | Op::Detach(x)
            | Op::Reshape(x) => vec![*x],
            Op::Binary(_, a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    slot_keys: Vec<u64>,
    slots: Vec<Vec<f64>>,
    differentiated: bool,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("slots", &self.slots.len())
            .field("differentiated", &self.differentiated)
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that gradients flow to.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Returns the slot registered under `key`, creating it from `init` on
    /// first use.
    pub fn bind_slot(&mut self, key: u64, init: &[f64]) -> SlotId {
        if let Some(i) = self.slot_keys.iter().position(|&k| k == key) {
            return SlotId(i);
        }
        self.slot_keys.push(key);
        self.slots.push(init.to_vec());
        SlotId(self.slots.len() - 1)
    }

    pub fn slot(&self, id: SlotId) -> &[f64] {
        &self.slots[id.0]
    }

    pub fn find_slot(&self, key: u64) -> Option<&[f64]> {
        let i = self.slot_keys.iter().position(|&k| k == key)?;
        Some(&self.slots[i])
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let value = match kind {
            Unary::Neg => xv.map(|a| -a),
            Unary::Square => xv.map(|a| a * a),
            Unary::Sqrt => {
                if let Some(&bad) = xv.data().iter().find(|&&a| a < 0.0 || a.is_nan()) {
                    return Err(TensorError::Domain(format!("sqrt of {bad}")));
                }
                xv.map(f64::sqrt)
            }
            Unary::Abs => xv.map(f64::abs),
            Unary::Sign => xv.map(sign),
            Unary::LeakyRelu(slope) => xv.map(|a| if a > 0.0 { a } else { slope * a }),
            Unary::AddScalar(c) => xv.map(|a| a + c),
            Unary::MulScalar(k) => xv.map(|a| a * k),
        };
        let rg = !matches!(kind, Unary::Sign) && self.requires_grad(x);
        Ok(self.push(value, Op::Unary(kind, x), rg))
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let value = match kind {
            Binary::Add => av.add(bv)?,
            Binary::Sub => av.sub(bv)?,
            Binary::Mul => av.mul(bv)?,
            Binary::Div => {
                broadcast_shape(av.shape(), bv.shape())?;
                if bv.data().iter().any(|&d| d == 0.0) {
                    return Err(TensorError::Domain("division by zero".into()));
                }
                av.div(bv)?
            }
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Div, a, b)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Neg, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Square, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Sqrt, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Abs, x)
    }

    pub fn sign(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Sign, x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var, TensorError> {
        self.unary(Unary::LeakyRelu(slope), x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(Unary::LeakyRelu(0.0), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        self.unary(Unary::AddScalar(c), x)
    }

    pub fn mul_scalar(&mut self, x: Var, k: f64) -> Result<Var, TensorError> {
        self.unary(Unary::MulScalar(k), x)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn sum(&mut self, x: Var, axes: &[usize], keepdims: bool) -> Result<Var, TensorError> {
        let value = self.value(x).sum_axes(axes, keepdims)?;
        let rg = self.requires_grad(x);
        Ok(self.push(
            value,
            Op::Sum {
                x,
                axes: axes.to_vec(),
                keepdims,
            },
            rg,
        ))
    }

    /// Sum of every entry, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var, TensorError> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.sum(x, &axes, false)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize], keepdims: bool) -> Result<Var, TensorError> {
        let value = self.value(x).mean_axes(axes, keepdims)?;
        let rg = self.requires_grad(x);
        Ok(self.push(
            value,
            Op::Mean {
                x,
                axes: axes.to_vec(),
                keepdims,
            },
            rg,
        ))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var, TensorError> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.mean(x, &axes, false)
    }

    /// Minimum over all entries as a scalar that broadcasts against any
    /// shape. The gradient goes to the lowest-index minimizer.
    pub fn min_all(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = Tensor::scalar(self.value(x).min());
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::MinAll(x), rg))
    }

    /// Same value, no gradient through this edge.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Detach(x), false)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Records a node whose forward value was computed by the caller and
    /// whose backward is `op`.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.any_grad(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar root. A graph can be differentiated once.
    pub fn backward(&mut self, root: Var) -> Result<Gradients, TensorError> {
        if self.differentiated {
            return Err(TensorError::AlreadyDifferentiated);
        }
        let root_shape = self.value(root).shape().to_vec();
        if self.value(root).len() != 1 {
            return Err(TensorError::NonScalarRoot(root_shape));
        }
        self.differentiated = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients {
                grads,
                requires: Vec::new(),
            });
        }
        grads[root.0] = Some(Tensor::full(&root_shape, 1.0)?);

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let inputs = node.op.inputs();
            if inputs.iter().any(|v| v.0 >= id) {
                return Err(TensorError::Cycle(id));
            }
            let contributions = local_backward(&self.nodes, &mut self.slots, id, &g)?;
            for (input, contribution) in inputs.into_iter().zip(contributions) {
                let Some(c) = contribution else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                let expected = self.nodes[input.0].value.shape();
                if c.shape() != expected {
                    return Err(TensorError::ShapeMismatch {
                        op: "backward",
                        lhs: c.shape().to_vec(),
                        rhs: expected.to_vec(),
                    });
                }
                grads[input.0] = Some(match grads[input.0].take() {
                    Some(acc) => acc.add(&c)?,
                    None => c,
                });
            }
            grads[id] = Some(g);
        }
        let requires = self.nodes[..=root.0]
            .iter()
            .map(|n| n.requires_grad)
            .collect();
        Ok(Gradients { grads, requires })
    }
}

fn local_backward(
    nodes: &[Node],
    slots: &mut [Vec<f64>],
    id: usize,
    g: &Tensor,
) -> Result<Vec<Option<Tensor>>, TensorError> {
    let node = &nodes[id];
    let val = |v: Var| &nodes[v.0].value;
    Ok(match &node.op {
        Op::Leaf => Vec::new(),
        Op::Detach(_) => vec![None],
        Op::Unary(kind, x) => {
            let xv = val(*x);
            let gx = match *kind {
                Unary::Neg => g.scale(-1.0),
                Unary::Square => g.zip_map(xv, |g, x| 2.0 * x * g)?,
                Unary::Sqrt => g.zip_map(&node.value, |g, y| g / (2.0 * y))?,
                Unary::Abs => g.zip_map(xv, |g, x| g * sign(x))?,
                Unary::Sign => g.scale(0.0),
                Unary::LeakyRelu(slope) => {
                    g.zip_map(xv, |g, x| if x > 0.0 { g } else { slope * g })?
                }
                Unary::AddScalar(_) => g.clone(),
                Unary::MulScalar(k) => g.scale(k),
            };
            vec![Some(gx)]
        }
        Op::Binary(kind, a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (ga, gb) = match kind {
                Binary::Add => (g.clone(), g.clone()),
                Binary::Sub => (g.clone(), g.scale(-1.0)),
                Binary::Mul => (g.mul(bv)?, g.mul(av)?),
                Binary::Div => {
                    let ga = g.div(bv)?;
                    let gb = g.mul(av)?.zip_map(bv, |n, d| -n / (d * d))?;
                    (ga, gb)
                }
            };
            vec![Some(ga.sum_to(av.shape())?), Some(gb.sum_to(bv.shape())?)]
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let ga = g.matmul(&bv.transpose()?)?;
            let gb = av.transpose()?.matmul(g)?;
            vec![Some(ga), Some(gb)]
        }
        Op::Sum { x, axes, keepdims } | Op::Mean { x, axes, keepdims } => {
            let xv = val(*x);
            let kept: Vec<usize> = xv
                .shape()
                .iter()
                .enumerate()
                .map(|(i, &s)| if axes.contains(&i) { 1 } else { s })
                .collect();
            let g = if *keepdims {
                g.clone()
            } else {
                g.reshape(&kept)?
            };
            let mut gx = g.broadcast_to(xv.shape())?;
            if matches!(node.op, Op::Mean { .. }) {
                let count: usize = axes.iter().map(|&a| xv.shape()[a]).product();
                gx = gx.scale(1.0 / count as f64);
            }
            vec![Some(gx)]
        }
        Op::MinAll(x) => {
            let xv = val(*x);
            let mut data = vec![0.0; xv.len()];
            data[xv.argmin()] = g.item()?;
            vec![Some(Tensor::new(xv.shape().to_vec(), data)?)]
        }
        Op::Reshape(x) => vec![Some(g.reshape(val(*x).shape())?)],
        Op::Custom { op, .. } => {
            let out = op.backward(g, slots)?;
            out.into_iter().map(Some).collect()
        }
    })
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    requires: Vec<bool>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, present only for nodes that
    /// require gradients and are reachable from the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if !self.requires.get(v.0).copied().unwrap_or(false) {
            return None;
        }
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

use std::fmt;
use std::sync::Arc;

use super::ops;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BATCHNORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-supplied primitive with its own backward rule.
pub trait CustomOp: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// Gradient with respect to each input given the output gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>>;
}

#[derive(Clone, Debug)]
pub enum BatchNormMode {
    /// Normalize with the batch statistics.
    Train,
    /// Normalize with fixed running statistics.
    Eval {
        running_mean: Tensor,
        running_var: Tensor,
    },
}

/// Differentiable primitive operations.
///
/// Binary elementwise ops broadcast their right operand when its shape is a
/// suffix of the left operand's shape, or when it holds a single value.
#[derive(Clone, Debug)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    Offset(f64),
    Sum,
    Mean,
    Abs,
    Square,
    Sqrt,
    Log,
    Exp,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Reshape { shape: Vec<usize> },
    Tanh,
    Relu,
    LeakyRelu { slope: f64 },
    Softplus,
    Sigmoid,
    /// Along the last axis.
    Softmax,
    /// Along the last axis.
    LogSoftmax,
    /// Inputs `x [B, Cin, T]`, `w [Cout, Cin, K]`, optional `bias [Cout]`.
    /// Cross-correlation, stride 1, zero padding that preserves `T`.
    Conv1d,
    /// Inputs `x [B, C]` or `x [B, C, T]`, `gamma [C]`, `beta [C]`.
    BatchNorm1d(BatchNormMode),
    FrobeniusNorm,
    Custom(Arc<dyn CustomOp>),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Scale(_) => "scale",
            Primitive::Offset(_) => "offset",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Abs => "abs",
            Primitive::Square => "square",
            Primitive::Sqrt => "sqrt",
            Primitive::Log => "log",
            Primitive::Exp => "exp",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::LeakyRelu { .. } => "leaky_relu",
            Primitive::Softplus => "softplus",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::Conv1d => "conv1d",
            Primitive::BatchNorm1d(_) => "batchnorm1d",
            Primitive::FrobeniusNorm => "frobenius_norm",
            Primitive::Custom(op) => op.name(),
        }
    }
}

/// Values kept from the forward pass for the backward rule.
#[derive(Debug)]
pub(crate) enum Saved {
    BatchNorm {
        normalized: Tensor,
        inv_std: Vec<f64>,
        mean: Tensor,
        var: Tensor,
    },
}

#[derive(Debug)]
enum Origin {
    Leaf,
    Op {
        prim: Primitive,
        parents: Vec<Var>,
        saved: Option<Saved>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    origin: Origin,
    requires_grad: bool,
}

/// Append-only computation graph for reverse-mode differentiation.
///
/// Nodes only reference earlier nodes, so insertion order is a topological order.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to the leaves that require them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros shaped like `like` when the root does not depend on it.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// While disabled, new parameters are recorded as constants.
    pub fn set_grad_enabled(&mut self, enabled: bool) {
        self.grad_enabled = enabled;
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            origin: Origin::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf (a constant while gradients are disabled).
    pub fn param(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.leaf(value, rg)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A constant copy of `var`'s value; gradients do not flow through it.
    pub fn detach(&mut self, var: Var) -> Var {
        let v = self.nodes[var.0].value.clone();
        self.constant(v)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Batch mean and (biased) variance computed by a training-mode batchnorm node.
    pub fn batch_stats(&self, var: Var) -> Option<(&Tensor, &Tensor)> {
        match &self.nodes.get(var.0)?.origin {
            Origin::Op {
                saved: Some(Saved::BatchNorm { mean, var, .. }),
                ..
            } => Some((mean, var)),
            _ => None,
        }
    }

    fn check_var(&self, var: Var) -> Result<()> {
        if var.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("unknown node {}", var.0)));
        }
        Ok(())
    }

    /// Applies `prim` to `inputs` and records the result.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        for &v in inputs {
            self.check_var(v)?;
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, saved) = ops::forward(&prim, &values)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: prim.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            origin: Origin::Op {
                prim,
                parents: inputs.to_vec(),
                saved,
            },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check_var(root)?;
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward requires a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Origin::Op {
                prim,
                parents,
                saved,
            } = &node.origin
            else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            if parents.iter().any(|p| p.0 >= i) {
                return Err(Error::Graph(format!("cycle detected at node {i}")));
            }
            let inputs: Vec<&Tensor> = parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> = parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let parent_grads =
                ops::backward(prim, &inputs, &node.value, saved.as_ref(), &grad, &needs)?;
            for ((p, g), need) in parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(g), true) = (g, *need) else {
                    continue;
                };
                match &mut grads[p.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // Only leaf gradients are meaningful to callers; interior ones were consumed above.
        Ok(Gradients { grads })
    }
}

macro_rules! unary {
    ($($name:ident => $prim:expr),* $(,)?) => {
        impl Graph {
            $(
                pub fn $name(&mut self, a: Var) -> Result<Var> {
                    self.apply($prim, &[a])
                }
            )*
        }
    };
}

macro_rules! binary {
    ($($name:ident => $prim:expr),* $(,)?) => {
        impl Graph {
            $(
                pub fn $name(&mut self, a: Var, b: Var) -> Result<Var> {
                    self.apply($prim, &[a, b])
                }
            )*
        }
    };
}

unary! {
    sum => Primitive::Sum,
    mean => Primitive::Mean,
    abs => Primitive::Abs,
    square => Primitive::Square,
    sqrt => Primitive::Sqrt,
    log => Primitive::Log,
    exp => Primitive::Exp,
    tanh => Primitive::Tanh,
    relu => Primitive::Relu,
    softplus => Primitive::Softplus,
    sigmoid => Primitive::Sigmoid,
    softmax => Primitive::Softmax,
    log_softmax => Primitive::LogSoftmax,
    frobenius_norm => Primitive::FrobeniusNorm,
}

binary! {
    matmul => Primitive::MatMul,
    add => Primitive::Add,
    sub => Primitive::Sub,
    mul => Primitive::Mul,
    div => Primitive::Div,
}

impl Graph {
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[a])
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Offset(c), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.apply(Primitive::LeakyRelu { slope }, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat { axis }, parts)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Primitive::Slice { axis, start, len }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(
            Primitive::Reshape {
                shape: shape.to_vec(),
            },
            &[a],
        )
    }

    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        match bias {
            Some(b) => self.apply(Primitive::Conv1d, &[x, w, b]),
            None => self.apply(Primitive::Conv1d, &[x, w]),
        }
    }

    pub fn batchnorm1d(&mut self, x: Var, gamma: Var, beta: Var, mode: BatchNormMode) -> Result<Var> {
        self.apply(Primitive::BatchNorm1d(mode), &[x, gamma, beta])
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        self.apply(Primitive::Custom(op), inputs)
    }
}

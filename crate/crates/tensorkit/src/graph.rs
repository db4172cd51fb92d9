//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in creation order, so the node vector is already a
//! topological order and the backward pass is a single reverse sweep.

use std::collections::HashMap;

use crate::conv::ConvGeom;
use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::shape::{numel, Shape};

/// Handle to a tensor recorded in a [`Graph`]. Only valid until the next
/// [`Graph::backward`] or [`Graph::clear`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch-norm uses batch statistics and reports running-stat updates.
    Train,
    /// Batch-norm is the fixed affine map given by its running statistics.
    Eval,
}

/// Backward rule for operations defined outside this crate.
pub trait CustomOp<T: Scalar>: Send {
    fn name(&self) -> &str;

    /// `grads[i]` arrives zeroed with the length of `inputs[i]`; accumulate
    /// the vector-Jacobian product for that input into it.
    fn backward(&self, inputs: &[&[T]], output: &[T], grad_out: &[T], grads: &mut [Vec<T>]);
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Option<Vec<T>> },
    Depthwise { x: Var, w: Var, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Sum { x: Var },
    Concat { parts: Vec<Var> },
    Gather { table: Var, indices: Vec<u32> },
    Bce { logits: Var, targets: Vec<T>, weights: Vec<T>, total_weight: T, clip: T },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Origin {
    Param(ParamId),
    Input,
    Computed,
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) value: Vec<T>,
    pub(crate) shape: Shape,
    grad: Option<Vec<T>>,
    pub(crate) requires_grad: bool,
    origin: Origin,
    pub(crate) op: Op<T>,
}

/// Batch statistics observed by a train-mode batch-norm, to be folded into
/// the running statistics by the optimizer loop.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStatUpdate<T> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance.
    pub batch_var: Vec<T>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    pub params: HashMap<ParamId, Vec<T>>,
    pub inputs: HashMap<Var, Vec<T>>,
}

impl<T> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(&id).map(|v| v.as_slice())
    }

    pub fn input(&self, v: Var) -> Option<&[T]> {
        self.inputs.get(&v).map(|v| v.as_slice())
    }
}

pub struct Graph<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    mode: Mode,
    record: bool,
    pub(crate) track_kinks: bool,
    pub(crate) kink_signature: u64,
    pub(crate) stat_updates: Vec<RunningStatUpdate<T>>,
}

impl<T: Scalar> Graph<T> {
    /// A graph that records everything needed for [`Graph::backward`].
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            record: true,
            track_kinks: false,
            kink_signature: 0,
            stat_updates: Vec::new(),
        }
    }

    /// Forward-only graph; intermediate buffers needed for backward are
    /// dropped as soon as possible.
    pub fn inference(mode: Mode) -> Self {
        Graph { record: false, ..Graph::new(mode) }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    /// Hash every ReLU's input sign pattern into [`Graph::kink_signature`].
    pub fn track_kinks(&mut self, on: bool) {
        self.track_kinks = on;
    }

    pub fn kink_signature(&self) -> u64 {
        self.kink_signature
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn take_stat_updates(&mut self) -> Vec<RunningStatUpdate<T>> {
        std::mem::take(&mut self.stat_updates)
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.kink_signature = 0;
    }

    fn push_leaf(&mut self, value: Vec<T>, shape: Shape, requires_grad: bool, origin: Origin) -> Var {
        assert_eq!(value.len(), numel(shape), "leaf value does not match shape {shape:?}");
        self.nodes.push(Node { value, shape, grad: None, requires_grad, origin, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of a stored parameter. Gradients flow to it only when the
    /// parameter is trainable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let rg = p.trainable && self.record;
        self.push_leaf(p.value.clone(), p.shape, rg, Origin::Param(id))
    }

    pub fn input(&mut self, value: Vec<T>, shape: Shape, requires_grad: bool) -> Var {
        let rg = requires_grad && self.record;
        self.push_leaf(value, shape, rg, Origin::Input)
    }

    pub fn constant(&mut self, value: Vec<T>, shape: Shape) -> Var {
        self.push_leaf(value, shape, false, Origin::Input)
    }

    pub(crate) fn push_op(&mut self, value: Vec<T>, shape: Shape, inputs: &[Var], op: Op<T>) -> Var {
        debug_assert_eq!(value.len(), numel(shape));
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, shape, grad: None, requires_grad, origin: Origin::Computed, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an externally defined differentiable operation.
    pub fn custom(&mut self, inputs: &[Var], value: Vec<T>, shape: Shape, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        if value.len() != numel(shape) {
            return Err(TensorError::Shape {
                op: "custom",
                detail: format!("`{}` produced {} values for shape {shape:?}", op.name(), value.len()),
            });
        }
        Ok(self.push_op(value, shape, inputs, Op::Custom { inputs: inputs.to_vec(), op }))
    }

    pub(crate) fn accumulate(&mut self, v: Var, contribution: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contribution) {
                    *a += b;
                }
            }
            None => node.grad = Some(contribution),
        }
    }

    /// Back-propagates from a scalar `loss`, returning gradients for every
    /// parameter and gradient-requiring input reachable from it. The graph is
    /// cleared afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if !self.record {
            return Err(TensorError::Usage("backward on an inference graph".into()));
        }
        if numel(self.nodes[loss.0].shape) != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut out = Gradients { params: HashMap::new(), inputs: HashMap::new() };
        if self.nodes[loss.0].requires_grad {
            self.nodes[loss.0].grad = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[i].grad.take() else { continue };
            match self.nodes[i].origin {
                Origin::Param(id) => {
                    match out.params.get_mut(&id) {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&grad) {
                                *a += *b;
                            }
                        }
                        None => {
                            out.params.insert(id, grad);
                        }
                    }
                    continue;
                }
                Origin::Input => {
                    out.inputs.insert(Var(i), grad);
                    continue;
                }
                Origin::Computed => {}
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(i, op, &grad)?;
        }
        self.clear();
        let finite = out.params.values().chain(out.inputs.values()).all(|g| g.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(TensorError::NonFinite("gradients after backward".into()));
        }
        Ok(out)
    }

    fn backprop(&mut self, node: usize, op: Op<T>, grad: &[T]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, cols } => self.conv2d_backward(x, w, b, &geom, cols, grad),
            Op::Depthwise { x, w, geom } => self.depthwise_backward(x, w, &geom, grad),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                self.batch_norm_backward(x, gamma, beta, &xhat, &inv_std, train, grad)
            }
            Op::Relu { x } => {
                let xv = &self.nodes[x.0].value;
                let gx = xv.iter().zip(grad).map(|(&v, &g)| if v > T::zero() { g } else { T::zero() }).collect();
                self.accumulate(x, gx);
            }
            Op::Add { a, b } => {
                if self.nodes[a.0].requires_grad {
                    self.accumulate(a, grad.to_vec());
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(b, grad.to_vec());
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].requires_grad {
                    let ga = self.nodes[b.0].value.iter().zip(grad).map(|(&v, &g)| v * g).collect();
                    self.accumulate(a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let gb = self.nodes[a.0].value.iter().zip(grad).map(|(&v, &g)| v * g).collect();
                    self.accumulate(b, gb);
                }
            }
            Op::Scale { x, factor } => {
                self.accumulate(x, grad.iter().map(|&g| g * factor).collect());
            }
            Op::Sum { x } => {
                let n = self.nodes[x.0].value.len();
                self.accumulate(x, vec![grad[0]; n]);
            }
            Op::Concat { parts } => self.concat_backward(node, &parts, grad),
            Op::Gather { table, indices } => {
                let [k, _, _, c] = self.nodes[table.0].shape;
                let mut gt = vec![T::zero(); k * c];
                for (p, &idx) in indices.iter().enumerate() {
                    let dst = &mut gt[idx as usize * c..(idx as usize + 1) * c];
                    for (d, &g) in dst.iter_mut().zip(&grad[p * c..(p + 1) * c]) {
                        *d += g;
                    }
                }
                self.accumulate(table, gt);
            }
            Op::Bce { logits, targets, weights, total_weight, clip } => {
                let lv = &self.nodes[logits.0].value;
                let scale = grad[0] / total_weight;
                let gl = lv
                    .iter()
                    .zip(targets.iter().zip(&weights))
                    .map(|(&l, (&t, &w))| {
                        if w == T::zero() || l.abs() >= clip {
                            T::zero()
                        } else {
                            let s = T::one() / (T::one() + (-l).exp());
                            scale * w * (s - t)
                        }
                    })
                    .collect();
                self.accumulate(logits, gl);
            }
            Op::Custom { inputs, op } => {
                let mut grads: Vec<Vec<T>> =
                    inputs.iter().map(|v| vec![T::zero(); self.nodes[v.0].value.len()]).collect();
                {
                    let ins: Vec<&[T]> = inputs.iter().map(|v| self.nodes[v.0].value.as_slice()).collect();
                    op.backward(&ins, &self.nodes[node].value, grad, &mut grads);
                }
                for (v, g) in inputs.into_iter().zip(grads) {
                    if self.nodes[v.0].requires_grad {
                        self.accumulate(v, g);
                    }
                }
            }
        }
        Ok(())
    }
}

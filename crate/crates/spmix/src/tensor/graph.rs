//! Operation tape and reverse-mode backward pass.

use super::ops::{self, vjp};
use super::{debug_check_finite, Tensor};
use crate::error::{Result, SpmixError};
use std::collections::{HashMap, HashSet};

/// One recorded operation. `inputs`/`output` are handles (clones share
/// buffers), so keeping them alive on the tape is cheap.
pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<Tensor>,
    pub output: Tensor,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Add,
    Sub,
    Mul,
    Div,
    AddScalar(f64),
    MulScalar(f64),
    Exp,
    Log,
    Sqrt,
    Relu,
    Matmul,
    Conv2d { stride: usize, pad: usize },
    LayerNorm { eps: f64 },
    Softmax,
    SumAxis { axis: usize, keepdim: bool },
    MeanAxis { axis: usize, keepdim: bool },
    SumAll,
    MeanAll,
    Reshape,
    Permute { perm: Vec<usize> },
    Concat { axis: usize },
}

/// Tape of executed operations for one forward pass. Graphs are not reused
/// across steps and are confined to a single thread.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn record(&mut self, op: Op, inputs: Vec<Tensor>, output: &Tensor) {
        if output.needs_grad() {
            self.nodes.push(Node {
                op,
                inputs,
                output: output.clone(),
            });
        }
    }

    fn run(&mut self, op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
        let (shape, data) = ops::forward(&op, inputs)?;
        debug_check_finite(&data, &format!("{op:?}"))?;
        let requires = inputs.iter().any(|t| t.needs_grad());
        let out = Tensor::from_parts(shape, data, requires);
        self.record(op, inputs.iter().map(|t| (*t).clone()).collect(), &out);
        Ok(out)
    }

    // -- elementwise (numpy-style broadcasting) --

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.run(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.run(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.run(Op::Mul, &[a, b])
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.run(Op::Div, &[a, b])
    }

    pub fn add_scalar(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.run(Op::AddScalar(c), &[a])
    }

    pub fn mul_scalar(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.run(Op::MulScalar(c), &[a])
    }

    pub fn exp(&mut self, a: &Tensor) -> Result<Tensor> {
        self.run(Op::Exp, &[a])
    }

    pub fn log(&mut self, a: &Tensor) -> Result<Tensor> {
        self.run(Op::Log, &[a])
    }

    pub fn sqrt(&mut self, a: &Tensor) -> Result<Tensor> {
        self.run(Op::Sqrt, &[a])
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        self.run(Op::Relu, &[a])
    }

    // -- linear algebra --

    /// Matrix product on the trailing two axes. Leading axes must match
    /// exactly, or the right operand may be rank-2 (shared across batches).
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.run(Op::Matmul, &[a, b])
    }

    /// 2-d convolution, NHWC input `[B,H,W,C]`, kernel `[KH,KW,C,OC]`,
    /// zero padding. No dilation or groups.
    pub fn conv2d(
        &mut self,
        input: &Tensor,
        kernel: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        self.run(Op::Conv2d { stride, pad }, &[input, kernel])
    }

    /// Layer normalization over the last axis with affine gain/bias.
    pub fn layer_norm(
        &mut self,
        x: &Tensor,
        gain: &Tensor,
        bias: &Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        self.run(Op::LayerNorm { eps }, &[x, gain, bias])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: &Tensor) -> Result<Tensor> {
        self.run(Op::Softmax, &[x])
    }

    // -- reductions and movement --

    pub fn sum_axis(&mut self, x: &Tensor, axis: usize, keepdim: bool) -> Result<Tensor> {
        self.run(Op::SumAxis { axis, keepdim }, &[x])
    }

    pub fn mean_axis(&mut self, x: &Tensor, axis: usize, keepdim: bool) -> Result<Tensor> {
        self.run(Op::MeanAxis { axis, keepdim }, &[x])
    }

    pub fn sum_all(&mut self, x: &Tensor) -> Result<Tensor> {
        self.run(Op::SumAll, &[x])
    }

    pub fn mean_all(&mut self, x: &Tensor) -> Result<Tensor> {
        self.run(Op::MeanAll, &[x])
    }

    /// Reshape shares the underlying buffer; only the shape changes.
    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        if len != x.len() {
            return Err(SpmixError::contract(format!(
                "reshape {:?} -> {:?} changes element count",
                x.shape(),
                shape
            )));
        }
        let out = Tensor {
            shape: shape.to_vec(),
            data: std::rc::Rc::clone(&x.data),
            requires_grad: x.needs_grad(),
            grad: std::rc::Rc::new(std::cell::RefCell::new(None)),
            id: super::fresh_id(),
        };
        self.record(Op::Reshape, vec![x.clone()], &out);
        Ok(out)
    }

    pub fn permute(&mut self, x: &Tensor, perm: &[usize]) -> Result<Tensor> {
        self.run(Op::Permute { perm: perm.to_vec() }, &[x])
    }

    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        self.run(Op::Concat { axis }, parts)
    }

    /// Reverse pass from a scalar loss. Fills the gradient cell of every
    /// requires-grad tensor on a path to the loss with d(loss)/d(tensor);
    /// gradients accumulate additively across fan-out. Repeated calls on the
    /// same graph produce bit-identical results (cells are overwritten, not
    /// accumulated across calls).
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if !loss.is_scalar() {
            return Err(SpmixError::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }

        // Mark tensors on a path to the loss, walking the tape backwards.
        let mut needed: HashSet<u64> = HashSet::new();
        needed.insert(loss.id());
        for node in self.nodes.iter().rev() {
            if needed.contains(&node.output.id()) {
                for input in &node.inputs {
                    if input.needs_grad() {
                        needed.insert(input.id());
                    }
                }
            }
        }

        let mut acc: HashMap<u64, Vec<f64>> = HashMap::new();
        acc.insert(loss.id(), vec![1.0]);

        let mut cells: HashMap<u64, Tensor> = HashMap::new();
        cells.insert(loss.id(), loss.clone());

        // Reverse execution order, visiting each node exactly once.
        for node in self.nodes.iter().rev() {
            let out_id = node.output.id();
            if !needed.contains(&out_id) {
                continue;
            }
            let Some(gout) = acc.get(&out_id) else {
                continue; // reached only through pruned paths
            };
            let input_grads = vjp(node, gout)?;
            cells.entry(out_id).or_insert_with(|| node.output.clone());
            for (input, grad) in node.inputs.iter().zip(input_grads) {
                let Some(grad) = grad else { continue };
                debug_assert_eq!(grad.len(), input.len());
                cells.entry(input.id()).or_insert_with(|| input.clone());
                match acc.get_mut(&input.id()) {
                    Some(buf) => {
                        for (dst, src) in buf.iter_mut().zip(&grad) {
                            *dst += src;
                        }
                    }
                    None => {
                        acc.insert(input.id(), grad);
                    }
                }
            }
        }

        for (id, grad) in acc {
            if let Some(tensor) = cells.get(&id) {
                tensor.set_grad(grad);
            }
        }
        Ok(())
    }
}

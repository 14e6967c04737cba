//! Layer-level reverse-mode differentiation.
//!
//! A [`Tape`] owns every tensor it records. Leaves are registered with
//! [`Tape::leaf`]; each layer op appends one record holding the handles of its
//! inputs and the context its backward pass needs. [`Tape::backward`] replays
//! the records in exact reverse order and leaves the result in the `grad`
//! slot of every leaf tensor.

use crate::error::TensorError;
use crate::ops;
use crate::tensor::{Real, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Relu {
        input: Var,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Flatten {
        input: Var,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
}

/// Name of the operation recorded at a position, for inspection and tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Relu,
    MaxPool2,
    Flatten,
    Dense,
    SoftmaxXent,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Tape { nodes: Vec::new() }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kinds(&self) -> Vec<OpKind> {
        self.nodes
            .iter()
            .map(|n| match n.op {
                Op::Leaf => OpKind::Leaf,
                Op::Conv2d { .. } => OpKind::Conv2d,
                Op::Relu { .. } => OpKind::Relu,
                Op::MaxPool2 { .. } => OpKind::MaxPool2,
                Op::Flatten { .. } => OpKind::Flatten,
                Op::Dense { .. } => OpKind::Dense,
                Op::SoftmaxXent { .. } => OpKind::SoftmaxXent,
            })
            .collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, mut value: Tensor<T>) -> Var {
        value.clear_grad();
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    /// Gradient left on `var` by the last backward pass.
    pub fn grad(&self, var: Var) -> Option<&[T]> {
        self.nodes[var.0].value.grad()
    }

    pub fn take_grad(&mut self, var: Var) -> Option<Vec<T>> {
        self.nodes[var.0].value.take_grad()
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let out = ops::conv2d(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            padding,
        )?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        self.push(out, Op::Relu { input })
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var, TensorError> {
        let (out, argmax) = ops::maxpool2(self.value(input))?;
        Ok(self.push(out, Op::MaxPool2 { input, argmax }))
    }

    /// Collapses every axis after the first: `[N, ...] -> [N, F]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var, TensorError> {
        let v = self.value(input);
        let n = v.dim(0);
        let f = v.len() / n;
        let out = v.clone().reshape(&[n, f])?;
        Ok(self.push(out, Op::Flatten { input }))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let out = ops::dense(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(
            out,
            Op::Dense {
                input,
                weight,
                bias,
            },
        ))
    }

    /// Mean cross-entropy as a one-element tensor; probabilities are kept as
    /// backward context and are readable through [`Tape::probs`].
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let (loss, probs) = ops::softmax_xent(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn probs(&self, loss: Var) -> Option<Tensor<T>> {
        match &self.nodes[loss.0].op {
            Op::SoftmaxXent { probs, .. } => Some(probs.clone()),
            _ => None,
        }
    }

    /// Backward pass seeded with d(loss)/d(loss) = 1.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        self.backward_with_seed(loss, T::one())
    }

    /// Backward pass with an explicit upstream seed on the scalar `loss`.
    ///
    /// Gradients accumulate additively on tensors that feed several ops.
    /// After the pass, every leaf carries its gradient (zeros if the loss does
    /// not depend on it); intermediate gradients are discarded.
    pub fn backward_with_seed(&mut self, loss: Var, seed: T) -> Result<(), TensorError> {
        if self.nodes.is_empty() {
            return Err(TensorError::Usage("backward on an empty tape".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::Usage(format!(
                "loss handle {} is not on this tape",
                loss.0
            )));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                self.nodes[loss.0].value.shape()
            )));
        }

        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![seed]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let cg = ops::conv2d_backward(
                        &self.nodes[input.0].value,
                        &self.nodes[weight.0].value,
                        &g,
                        *stride,
                        *padding,
                    )?;
                    accumulate(&mut grads, *input, cg.input);
                    accumulate(&mut grads, *weight, cg.weight);
                    accumulate(&mut grads, *bias, cg.bias);
                }
                Op::Relu { input } => {
                    let gi = ops::relu_backward(&self.nodes[input.0].value, &g);
                    accumulate(&mut grads, *input, gi);
                }
                Op::MaxPool2 { input, argmax } => {
                    let gi =
                        ops::maxpool2_backward(self.nodes[input.0].value.len(), argmax, &g);
                    accumulate(&mut grads, *input, gi);
                }
                Op::Flatten { input } => {
                    accumulate(&mut grads, *input, g);
                }
                Op::Dense {
                    input,
                    weight,
                    bias,
                } => {
                    let dg = ops::dense_backward(
                        &self.nodes[input.0].value,
                        &self.nodes[weight.0].value,
                        &g,
                    )?;
                    accumulate(&mut grads, *input, dg.input);
                    accumulate(&mut grads, *weight, dg.weight);
                    accumulate(&mut grads, *bias, dg.bias);
                }
                Op::SoftmaxXent {
                    logits,
                    labels,
                    probs,
                } => {
                    let gl = ops::softmax_xent_backward(probs, labels, g[0]);
                    accumulate(&mut grads, *logits, gl);
                }
            }
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) {
                let g = g.unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                node.value.set_grad(g)?;
            } else {
                node.value.clear_grad();
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], var: Var, g: Vec<T>) {
    match &mut grads[var.0] {
        Some(existing) => ops::add_assign(existing, &g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_empty_and_non_scalar() {
        let mut tape = Tape::<f64>::new();
        assert!(matches!(
            tape.backward(Var(0)),
            Err(TensorError::Usage(_))
        ));
        let x = tape.leaf(Tensor::zeros(&[2, 2]).unwrap());
        assert!(matches!(tape.backward(x), Err(TensorError::Usage(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        // The same weight leaf feeds two dense layers.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![0.5, -1.0]).unwrap());
        let w = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.leaf(Tensor::zeros(&[2]).unwrap());
        let h = tape.dense(x, w, b).unwrap();
        let z = tape.dense(h, w, b).unwrap();
        let loss = tape.softmax_xent(z, &[1]).unwrap();
        tape.backward(loss).unwrap();
        // With W = I, z = x; dL/dz = p - onehot and W is used twice, so
        // dL/dW = h^T g + x^T g = 2 x^T g.
        let probs = tape.probs(loss).unwrap();
        let g = [probs.data()[0], probs.data()[1] - 1.0];
        let gw = tape.grad(w).unwrap();
        let xs = [0.5, -1.0];
        for f in 0..2 {
            for u in 0..2 {
                assert!((gw[f * 2 + u] - 2.0 * xs[f] * g[u]).abs() < 1e-12);
            }
        }
        let gb = tape.grad(b).unwrap();
        assert!((gb[0] - 2.0 * g[0]).abs() < 1e-12);
    }

    #[test]
    fn intermediate_grads_are_discarded() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap());
        let r = tape.relu(x);
        let loss = tape.softmax_xent(r, &[0]).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_some());
        assert!(tape.grad(r).is_none());
        assert_eq!(
            tape.kinds(),
            vec![OpKind::Leaf, OpKind::Relu, OpKind::SoftmaxXent]
        );
    }
}

//! Tape-based reverse-mode differentiation over the primitive kernels.
//!
//! A [`Graph`] records every op whose inputs depend on a leaf. Values are
//! reference counted so an inference graph (which records nothing) frees
//! intermediates as soon as the caller drops them.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ops::{activation, conv, norm, pool, shape};
use crate::ops::{BnMode, ConvParams};
use crate::tensor::{Element, Shape, Tensor};

#[derive(Clone)]
pub struct Var<T> {
    value: Rc<Tensor<T>>,
    node: Option<usize>,
}

impl<T: Element> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn node(&self) -> Option<usize> {
        self.node
    }

    pub fn into_value(self) -> Tensor<T> {
        Rc::try_unwrap(self.value).unwrap_or_else(|rc| (*rc).clone())
    }
}

enum Op<T> {
    Leaf,
    Conv {
        input: Var<T>,
        weight: Var<T>,
        bias: Option<Var<T>>,
        params: ConvParams,
    },
    BatchNorm {
        input: Var<T>,
        gamma: Var<T>,
        beta: Var<T>,
        saved: norm::BnSaved<T>,
    },
    Prelu {
        input: Var<T>,
        alpha: Var<T>,
    },
    Swish {
        input: Var<T>,
    },
    Sigmoid {
        input: Var<T>,
        output: Rc<Tensor<T>>,
    },
    GlobalAvgPool {
        input: Var<T>,
    },
    Add {
        a: Var<T>,
        b: Var<T>,
    },
    ScaleChannels {
        input: Var<T>,
        scale: Var<T>,
    },
    Permute {
        input: Var<T>,
        perm: Vec<usize>,
    },
    Slice {
        input: Var<T>,
        start: usize,
    },
    Concat {
        parts: Vec<Var<T>>,
    },
    Sum {
        input: Var<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Prelu { .. } => "prelu",
            Op::Swish { .. } => "swish",
            Op::Sigmoid { .. } => "sigmoid",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Add { .. } => "add",
            Op::ScaleChannels { .. } => "scale_channels",
            Op::Permute { .. } => "permute_channels",
            Op::Slice { .. } => "slice_channels",
            Op::Concat { .. } => "concat_channels",
            Op::Sum { .. } => "sum",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    shape: Shape,
}

/// Ordered record of executed ops.
pub struct GradTape<T> {
    nodes: Vec<Node<T>>,
}

impl<T> GradTape<T> {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Op names in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }
}

pub struct Graph<T> {
    tape: RefCell<GradTape<T>>,
    recording: bool,
    consumed: Cell<bool>,
}

/// Gradients produced by one backward replay, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    visit_order: Vec<usize>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.node.and_then(|i| self.grads[i].as_ref())
    }

    /// Gradient for `var`, or zeros if nothing downstream depended on it.
    pub fn get_or_zeros(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    pub fn take(&mut self, var: &Var<T>) -> Option<Tensor<T>> {
        var.node.and_then(|i| self.grads[i].take())
    }

    /// Node indices in the order backward processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visit_order
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Graph::new()
    }
}

impl<T: Element> Graph<T> {
    /// A recording graph.
    pub fn new() -> Self {
        Graph {
            tape: RefCell::new(GradTape { nodes: Vec::new() }),
            recording: true,
            consumed: Cell::new(false),
        }
    }

    /// A graph that never records; every op returns a constant.
    pub fn inference() -> Self {
        Graph {
            recording: false,
            ..Graph::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn tape(&self) -> std::cell::Ref<'_, GradTape<T>> {
        self.tape.borrow()
    }

    /// Clears the tape so the graph can be reused.
    pub fn reset(&self) {
        self.tape.borrow_mut().nodes.clear();
        self.consumed.set(false);
    }

    fn push(&self, op: Op<T>, value: Tensor<T>) -> Var<T> {
        let shape = value.shape();
        let mut tape = self.tape.borrow_mut();
        tape.nodes.push(Node { op, shape });
        Var {
            value: Rc::new(value),
            node: Some(tape.nodes.len() - 1),
        }
    }

    fn constant_value(value: Tensor<T>) -> Var<T> {
        Var {
            value: Rc::new(value),
            node: None,
        }
    }

    fn finish(&self, inputs: &[&Var<T>], op: impl FnOnce() -> Op<T>, value: Tensor<T>) -> Var<T> {
        debug_assert!(value.all_finite(), "non-finite output");
        if self.recording && inputs.iter().any(|v| v.node.is_some()) {
            self.push(op(), value)
        } else {
            Graph::constant_value(value)
        }
    }

    /// A differentiable input (parameter or data).
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        if self.recording {
            self.push(Op::Leaf, value)
        } else {
            Graph::constant_value(value)
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Graph::constant_value(value)
    }

    pub fn conv2d(
        &self,
        input: &Var<T>,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        params: ConvParams,
    ) -> Result<Var<T>> {
        let out = conv::conv2d(&input.value, &weight.value, bias.map(|b| &*b.value), params)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        Ok(self.finish(
            &deps,
            || Op::Conv {
                input: input.clone(),
                weight: weight.clone(),
                bias: bias.cloned(),
                params,
            },
            out,
        ))
    }

    /// Batch normalization. In train mode the returned statistics feed the
    /// running-stat update.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &self,
        input: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
        mode: BnMode,
    ) -> Result<(Var<T>, norm::BnSaved<T>)> {
        let params = norm::BnParams {
            gamma: &gamma.value,
            beta: &beta.value,
            running_mean,
            running_var,
            eps,
        };
        let (out, saved) = norm::batch_norm(&input.value, &params, mode)?;
        let stats = saved.clone();
        let var = self.finish(
            &[input, gamma, beta],
            || Op::BatchNorm {
                input: input.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                saved,
            },
            out,
        );
        Ok((var, stats))
    }

    pub fn prelu(&self, input: &Var<T>, alpha: &Var<T>) -> Result<Var<T>> {
        let out = activation::prelu(&input.value, &alpha.value)?;
        Ok(self.finish(
            &[input, alpha],
            || Op::Prelu {
                input: input.clone(),
                alpha: alpha.clone(),
            },
            out,
        ))
    }

    pub fn swish(&self, input: &Var<T>) -> Var<T> {
        let out = activation::swish(&input.value);
        self.finish(&[input], || Op::Swish { input: input.clone() }, out)
    }

    pub fn sigmoid(&self, input: &Var<T>) -> Var<T> {
        let out = activation::sigmoid(&input.value);
        if self.recording && input.node.is_some() {
            let out = Rc::new(out);
            let shape = out.shape();
            let mut tape = self.tape.borrow_mut();
            tape.nodes.push(Node {
                op: Op::Sigmoid {
                    input: input.clone(),
                    output: out.clone(),
                },
                shape,
            });
            Var {
                value: out,
                node: Some(tape.nodes.len() - 1),
            }
        } else {
            Graph::constant_value(out)
        }
    }

    pub fn global_avg_pool(&self, input: &Var<T>) -> Result<Var<T>> {
        let out = pool::global_avg_pool(&input.value)?;
        Ok(self.finish(&[input], || Op::GlobalAvgPool { input: input.clone() }, out))
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value.add(&b.value)?;
        Ok(self.finish(
            &[a, b],
            || Op::Add {
                a: a.clone(),
                b: b.clone(),
            },
            out,
        ))
    }

    pub fn scale_channels(&self, input: &Var<T>, scale: &Var<T>) -> Result<Var<T>> {
        let out = shape::scale_channels(&input.value, &scale.value)?;
        Ok(self.finish(
            &[input, scale],
            || Op::ScaleChannels {
                input: input.clone(),
                scale: scale.clone(),
            },
            out,
        ))
    }

    pub fn channel_shuffle(&self, input: &Var<T>, groups: usize) -> Result<Var<T>> {
        let perm = shape::shuffle_permutation(input.shape().c, groups)?;
        self.permute_channels(input, perm)
    }

    pub fn permute_channels(&self, input: &Var<T>, perm: Vec<usize>) -> Result<Var<T>> {
        let out = shape::permute_channels(&input.value, &perm)?;
        Ok(self.finish(
            &[input],
            || Op::Permute {
                input: input.clone(),
                perm,
            },
            out,
        ))
    }

    pub fn slice_channels(&self, input: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
        let out = input.value.slice_channels(start, len)?;
        Ok(self.finish(
            &[input],
            || Op::Slice {
                input: input.clone(),
                start,
            },
            out,
        ))
    }

    pub fn concat_channels(&self, parts: &[Var<T>]) -> Result<Var<T>> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| &*p.value).collect();
        let out = Tensor::concat_channels(&values)?;
        let deps: Vec<&Var<T>> = parts.iter().collect();
        Ok(self.finish(
            &deps,
            || Op::Concat {
                parts: parts.to_vec(),
            },
            out,
        ))
    }

    /// Sum of all elements as a `(1, 1, 1, 1)` scalar.
    pub fn sum(&self, input: &Var<T>) -> Var<T> {
        let out = Tensor::scalar(input.value.sum());
        self.finish(&[input], || Op::Sum { input: input.clone() }, out)
    }

    /// Replays the tape from a scalar `loss` seeded with `d loss = seed`.
    pub fn backward(&self, loss: &Var<T>, seed: T) -> Result<Gradients<T>> {
        if loss.value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {}",
                loss.shape()
            )));
        }
        self.backward_with(loss, Tensor::full(loss.shape(), seed))
    }

    /// Replays the tape seeding `output` with an arbitrary upstream gradient.
    pub fn backward_with(&self, output: &Var<T>, grad: Tensor<T>) -> Result<Gradients<T>> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        grad.expect_shape(output.shape(), "backward seed")?;
        let tape = self.tape.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..tape.nodes.len()).map(|_| None).collect();
        let mut visit_order = Vec::new();
        let Some(root) = output.node else {
            self.consumed.set(true);
            return Ok(Gradients { grads, visit_order });
        };
        grads[root] = Some(grad);
        for idx in (0..=root).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            visit_order.push(idx);
            let node = &tape.nodes[idx];
            debug_assert_eq!(node.shape, gy.shape());
            propagate(&node.op, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        self.consumed.set(true);
        Ok(Gradients { grads, visit_order })
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], var: &Var<T>, g: Tensor<T>) -> Result<()> {
    if let Some(i) = var.node {
        match &mut grads[i] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
    }
    Ok(())
}

fn propagate<T: Element>(op: &Op<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
    match op {
        Op::Leaf => {}
        Op::Conv {
            input,
            weight,
            bias,
            params,
        } => {
            let g = conv::conv2d_backward(&input.value, &weight.value, bias.is_some(), *params, gy)?;
            accumulate(grads, input, g.input)?;
            accumulate(grads, weight, g.weight)?;
            if let (Some(b), Some(gb)) = (bias, g.bias) {
                let gb = gb.reshape(b.shape())?;
                accumulate(grads, b, gb)?;
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            saved,
        } => {
            let g = norm::batch_norm_backward(&input.value, &gamma.value, saved, gy)?;
            accumulate(grads, input, g.input)?;
            accumulate(grads, gamma, g.gamma.reshape(gamma.shape())?)?;
            accumulate(grads, beta, g.beta.reshape(beta.shape())?)?;
        }
        Op::Prelu { input, alpha } => {
            let (dx, da) = activation::prelu_backward(&input.value, &alpha.value, gy)?;
            accumulate(grads, input, dx)?;
            accumulate(grads, alpha, da.reshape(alpha.shape())?)?;
        }
        Op::Swish { input } => {
            accumulate(grads, input, activation::swish_backward(&input.value, gy)?)?;
        }
        Op::Sigmoid { input, output } => {
            accumulate(grads, input, activation::sigmoid_backward(output, gy)?)?;
        }
        Op::GlobalAvgPool { input } => {
            accumulate(grads, input, pool::global_avg_pool_backward(input.shape(), gy)?)?;
        }
        Op::Add { a, b } => {
            accumulate(grads, a, gy.clone())?;
            accumulate(grads, b, gy.clone())?;
        }
        Op::ScaleChannels { input, scale } => {
            let (dx, ds) = shape::scale_channels_backward(&input.value, &scale.value, gy)?;
            accumulate(grads, input, dx)?;
            accumulate(grads, scale, ds)?;
        }
        Op::Permute { input, perm } => {
            let inv = shape::inverse_permutation(perm);
            accumulate(grads, input, shape::permute_channels(gy, &inv)?)?;
        }
        Op::Slice { input, start } => {
            let s = input.shape();
            let len = gy.shape().c;
            let mut full = Tensor::zeros(s);
            let plane = s.plane();
            for n in 0..s.n {
                let dst = (n * s.c + start) * plane;
                let src = n * len * plane;
                full.data_mut()[dst..dst + len * plane]
                    .copy_from_slice(&gy.data()[src..src + len * plane]);
            }
            accumulate(grads, input, full)?;
        }
        Op::Concat { parts } => {
            let mut start = 0;
            for p in parts {
                let c = p.shape().c;
                accumulate(grads, p, gy.slice_channels(start, c)?)?;
                start += c;
            }
        }
        Op::Sum { input } => {
            let g = gy.data()[0];
            accumulate(grads, input, Tensor::full(input.shape(), g))?;
        }
    }
    Ok(())
}

use std::borrow::Cow;

use super::kernels::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, maxpool2_backward, maxpool2_forward,
    ConvGeom, DenseGeom,
};
use super::{Real, Tensor};
use crate::error::{contract, Result};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d { input: Var, kernels: Var, bias: Var, geom: ConvGeom },
    MaxPool2 { input: Var, argmax: Vec<u32> },
    Dense { input: Var, weights: Var, bias: Var, geom: DenseGeom },
    Relu { input: Var },
    /// Concatenation along the first non-batch axis.
    Concat { inputs: Vec<(Var, usize)>, batch: usize },
    Reshape { input: Var },
    L1 { pred: Var, target: Var },
    WeightedSum { terms: Vec<(Var, T)> },
}

struct Node<'p, T: Real> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records primitive applications so that gradients of a scalar can be
/// computed by a single reverse sweep.
///
/// Parameters are borrowed rather than copied, so a tape lives no longer
/// than the parameter set it differentiates.
pub struct GradTape<'p, T: Real> {
    nodes: Vec<Node<'p, T>>,
}

impl<T: Real> Default for GradTape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> GradTape<'p, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Cow<'p, Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A borrowed leaf whose gradient will be reported.
    pub fn param(&mut self, t: &'p Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// A borrowed leaf excluded from differentiation.
    pub fn input(&mut self, t: &'p Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    /// An owned leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// Copies `v` into a new leaf that stops gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var, padding: usize) -> Result<Var> {
        let (x, k, b) = (self.value(input), self.value(kernels), self.value(bias));
        let geom = ConvGeom::new(x.shape(), k.shape(), b.shape(), padding)?;
        let out = Tensor::new(geom.out_shape(), conv2d_forward(x.data(), k.data(), b.data(), &geom))?;
        out.ensure_finite("conv2d")?;
        let needs = self.needs(input) || self.needs(kernels) || self.needs(bias);
        Ok(self.push(Cow::Owned(out), Op::Conv2d { input, kernels, bias, geom }, needs))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = maxpool2_forward(self.value(input))?;
        let needs = self.needs(input);
        Ok(self.push(Cow::Owned(out), Op::MaxPool2 { input, argmax }, needs))
    }

    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weights), self.value(bias));
        let geom = DenseGeom::new(x.shape(), w.shape(), b.shape())?;
        let out = Tensor::new(geom.out_shape(), dense_forward(x.data(), w.data(), b.data(), &geom))?;
        out.ensure_finite("dense")?;
        let needs = self.needs(input) || self.needs(weights) || self.needs(bias);
        Ok(self.push(Cow::Owned(out), Op::Dense { input, weights, bias, geom }, needs))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = super::relu(self.value(input));
        let needs = self.needs(input);
        self.push(Cow::Owned(out), Op::Relu { input }, needs)
    }

    /// Concatenates along axis 1 of batched tensors (`[N, ...]`), i.e. the
    /// per-sample flattened blocks are joined in argument order. The result
    /// keeps the trailing dims of the inputs when they agree, else it is
    /// flattened to `[N, total]`.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(contract("concat of zero tensors"));
        }
        let batch = self.value(inputs[0]).shape()[0];
        let mut parts = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() < 2 || s[0] != batch {
                return Err(contract(format!("concat expects batched tensors with batch {batch}, got {s:?}")));
            }
            parts.push((v, self.value(v).len() / batch));
        }
        let total: usize = parts.iter().map(|p| p.1).sum();
        let mut data = Vec::with_capacity(batch * total);
        for n in 0..batch {
            for &(v, w) in &parts {
                data.extend_from_slice(&self.value(v).data()[n * w..(n + 1) * w]);
            }
        }
        let first = self.value(inputs[0]).shape();
        let same_tail = inputs.iter().all(|&v| self.value(v).shape()[2..] == first[2..]);
        let shape = if same_tail && first.len() > 2 {
            let ch: usize = inputs.iter().map(|&v| self.value(v).shape()[1]).sum();
            let mut s = vec![batch, ch];
            s.extend_from_slice(&first[2..]);
            s
        } else {
            vec![batch, total]
        };
        let needs = inputs.iter().any(|&v| self.needs(v));
        let out = Tensor::new(shape, data)?;
        Ok(self.push(Cow::Owned(out), Op::Concat { inputs: parts, batch }, needs))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        let needs = self.needs(input);
        Ok(self.push(Cow::Owned(out), Op::Reshape { input }, needs))
    }

    /// Mean absolute error; a one-element result.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let l = super::l1_loss(self.value(pred), self.value(target))?;
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(Cow::Owned(Tensor::scalar(l)), Op::L1 { pred, target }, needs))
    }

    /// `Σ cᵢ·xᵢ` over equally shaped tensors.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(contract("weighted_sum of zero terms"));
        };
        let shape = self.value(first).shape().to_vec();
        let mut acc = Tensor::zeros(&shape);
        for &(v, c) in terms {
            let x = self.value(v);
            if x.shape() != shape.as_slice() {
                return Err(contract(format!("weighted_sum shapes differ: {shape:?} vs {:?}", x.shape())));
            }
            for (a, &b) in acc.data_mut().iter_mut().zip(x.data()) {
                *a += c * b;
            }
        }
        acc.ensure_finite("weighted_sum")?;
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(Cow::Owned(acc), Op::WeightedSum { terms: terms.to_vec() }, needs))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }

        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| if matches!(n.op, Op::Leaf) && n.needs_grad { grads[i].take() } else { None })
            .collect();
        Ok(Gradients { grads: leaves })
    }

    fn propagate(&self, node: &Node<'p, T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let mut accumulate = |v: Var, data: Vec<T>| -> Result<()> {
            let t = Tensor::new(self.value(v).shape().to_vec(), data)?;
            match grads[v.0].as_mut() {
                Some(acc) => acc.add_assign(&t),
                None => grads[v.0] = Some(t),
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernels, bias, geom } => {
                let need = [self.needs(*input), self.needs(*kernels), self.needs(*bias)];
                let r = conv2d_backward(self.value(*input).data(), self.value(*kernels).data(), g.data(), geom, need);
                if let Some(d) = r.input {
                    accumulate(*input, d)?;
                }
                if let Some(d) = r.kernels {
                    accumulate(*kernels, d)?;
                }
                if let Some(d) = r.bias {
                    accumulate(*bias, d)?;
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let d = maxpool2_backward(argmax, g.data(), self.value(*input).len());
                accumulate(*input, d)?;
            }
            Op::Dense { input, weights, bias, geom } => {
                let need = [self.needs(*input), self.needs(*weights), self.needs(*bias)];
                let r = dense_backward(self.value(*input).data(), self.value(*weights).data(), g.data(), geom, need);
                if let Some(d) = r.input {
                    accumulate(*input, d)?;
                }
                if let Some(d) = r.weights {
                    accumulate(*weights, d)?;
                }
                if let Some(d) = r.bias {
                    accumulate(*bias, d)?;
                }
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let d = x
                    .iter()
                    .zip(g.data())
                    .map(|(&xi, &gi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                accumulate(*input, d)?;
            }
            Op::Concat { inputs, batch } => {
                let total: usize = inputs.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(v, w) in inputs {
                    if self.needs(v) {
                        let mut d = Vec::with_capacity(batch * w);
                        for n in 0..*batch {
                            d.extend_from_slice(&g.data()[n * total + offset..n * total + offset + w]);
                        }
                        accumulate(v, d)?;
                    }
                    offset += w;
                }
            }
            Op::Reshape { input } => accumulate(*input, g.data().to_vec())?,
            Op::L1 { pred, target } => {
                let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                let scale = g.item() / T::from_usize(p.len()).expect("length fits");
                let sign: Vec<T> = p
                    .iter()
                    .zip(t)
                    .map(|(&a, &b)| {
                        if a > b {
                            scale
                        } else if a < b {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if self.needs(*target) {
                    accumulate(*target, sign.iter().map(|&s| -s).collect())?;
                }
                if self.needs(*pred) {
                    accumulate(*pred, sign)?;
                }
            }
            Op::WeightedSum { terms } => {
                for &(v, c) in terms {
                    if self.needs(v) {
                        accumulate(v, g.data().iter().map(|&gi| c * gi).collect())?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Gradients of the leaves marked with [`GradTape::param`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when `v` is not a parameter or did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node appended after its
//! operands, so node order is a topological order and the reverse pass is a
//! single backwards sweep. Each graph belongs to one sequence; batches build
//! one graph per clip.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Option<Var> },
    Dense { input: Var, weights: Var, bias: Option<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    MaxPool2 { input: Var, argmax: Vec<usize> },
    ScaleChannels { attention: Var, map: Var },
    WeightedPool { weights: Var, map: Var },
    AddChannelVector { map: Var, vector: Var },
    SliceChannels { input: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    NegLogAt { input: Var, index: usize, floor: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when no path reaches it from the loss.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, zero-filled with the node's shape when unreached.
    pub fn get_or_zeros(&self, var: Var, graph: &Graph) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(var).shape()))
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient (inputs, masks).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let value = ops::conv2d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
        )?;
        let rg = self.needs(&[input, kernel]) || bias.is_some_and(|b| self.needs(&[b]));
        Ok(self.push(value, Op::Conv2d { input, kernel, bias }, rg))
    }

    pub fn dense(&mut self, input: Var, weights: Var, bias: Option<Var>) -> Result<Var> {
        let value = ops::dense(
            self.value(input),
            self.value(weights),
            bias.map(|b| self.value(b)),
        )?;
        let rg = self.needs(&[input, weights]) || bias.is_some_and(|b| self.needs(&[b]));
        Ok(self.push(value, Op::Dense { input, weights, bias }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Entrywise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "hadamard", |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.needs(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(ops::sigmoid);
        let rg = self.needs(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.needs(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.needs(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    /// Softmax over all entries of `a` (class scores or an `N×N` score map).
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = ops::softmax_all(self.value(a));
        let rg = self.needs(&[a]);
        self.push(value, Op::Softmax(a), rg)
    }

    pub fn spatial_softmax(&mut self, z: Var) -> Result<Var> {
        let value = ops::spatial_softmax(self.value(z))?;
        let rg = self.needs(&[z]);
        Ok(self.push(value, Op::Softmax(z), rg))
    }

    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let (value, argmax) = ops::max_pool2(self.value(input))?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::MaxPool2 { input, argmax }, rg))
    }

    /// `out(i,j,c) = attention(i,j) · map(i,j,c)`.
    pub fn scale_channels(&mut self, attention: Var, map: Var) -> Result<Var> {
        let value = ops::scale_channels(self.value(attention), self.value(map))?;
        let rg = self.needs(&[attention, map]);
        Ok(self.push(value, Op::ScaleChannels { attention, map }, rg))
    }

    /// `Σ_r weights_r · map_r` over the spatial positions of `map`.
    pub fn weighted_pool(&mut self, weights: Var, map: Var) -> Result<Var> {
        let value = ops::weighted_pool(self.value(weights), self.value(map))?;
        let rg = self.needs(&[weights, map]);
        Ok(self.push(value, Op::WeightedPool { weights, map }, rg))
    }

    pub fn add_channel_vector(&mut self, map: Var, vector: Var) -> Result<Var> {
        let value = ops::add_channel_vector(self.value(map), self.value(vector))?;
        let rg = self.needs(&[map, vector]);
        Ok(self.push(value, Op::AddChannelVector { map, vector }, rg))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let value = ops::slice_channels(self.value(input), start, len)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::SliceChannels { input, start }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::Reshape(input), rg))
    }

    pub fn flatten(&mut self, input: Var) -> Var {
        let len = self.value(input).len();
        self.reshape(input, &[len]).expect("flatten preserves length")
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.needs(&[input]);
        self.push(value, Op::Sum(input), rg)
    }

    /// `−ln(max(input[index], floor))`; the gradient is zero where the floor
    /// is active.
    pub fn neg_log_at(&mut self, input: Var, index: usize, floor: f64) -> Result<Var> {
        let len = self.value(input).len();
        if index >= len {
            return Err(Error::Usage(format!("index {index} out of range for {len} entries")));
        }
        let p = self.value(input).data()[index];
        let value = Tensor::scalar(-p.max(floor).ln());
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::NegLogAt { input, index, floor }, rg))
    }

    /// Reverse pass from a scalar node, seeded with gradient 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let seed = self.value(loss);
        if seed.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                seed.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(seed.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &grad, &mut grads);
            }
            grads[id] = Some(grad);
        }
        Ok(Gradients { grads })
    }

    /// Moves the accumulator for `var` out of `grads` (zero-filled when new)
    /// so several operands can be updated at once.
    fn take_grad(&self, grads: &mut [Option<Tensor>], var: Var) -> Option<Tensor> {
        let n = &self.nodes[var.0];
        if !n.requires_grad {
            return None;
        }
        Some(
            grads[var.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(n.value.shape())),
        )
    }

    fn propagate(&self, node: &Node, grad: &Tensor, grads: &mut [Option<Tensor>]) {
        macro_rules! slot {
            ($var:expr) => {{
                let var: Var = $var;
                let n = &self.nodes[var.0];
                if n.requires_grad {
                    Some(
                        grads[var.0]
                            .get_or_insert_with(|| Tensor::zeros(n.value.shape()))
                            .data_mut(),
                    )
                } else {
                    None
                }
            }};
        }
        match node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias } => {
                let mut gi = self.take_grad(grads, input);
                let mut gk = self.take_grad(grads, kernel);
                let mut gb = bias.and_then(|b| self.take_grad(grads, b));
                ops::conv2d_backward(
                    self.value(input),
                    self.value(kernel),
                    grad,
                    gi.as_mut().map(Tensor::data_mut),
                    gk.as_mut().map(Tensor::data_mut),
                    gb.as_mut().map(Tensor::data_mut),
                );
                grads[input.0] = grads[input.0].take().or(gi);
                grads[kernel.0] = grads[kernel.0].take().or(gk);
                if let Some(b) = bias {
                    grads[b.0] = grads[b.0].take().or(gb);
                }
            }
            Op::Dense { input, weights, bias } => {
                let mut gi = self.take_grad(grads, input);
                let mut gw = self.take_grad(grads, weights);
                let mut gb = bias.and_then(|b| self.take_grad(grads, b));
                ops::dense_backward(
                    self.value(input),
                    self.value(weights),
                    grad,
                    gi.as_mut().map(Tensor::data_mut),
                    gw.as_mut().map(Tensor::data_mut),
                    gb.as_mut().map(Tensor::data_mut),
                );
                grads[input.0] = grads[input.0].take().or(gi);
                grads[weights.0] = grads[weights.0].take().or(gw);
                if let Some(b) = bias {
                    grads[b.0] = grads[b.0].take().or(gb);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(s) = slot!(v) {
                        axpy(s, 1.0, grad.data());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if let Some(s) = slot!(a) {
                    for ((g, &d), &y) in s.iter_mut().zip(grad.data()).zip(vb) {
                        *g += d * y;
                    }
                }
                if let Some(s) = slot!(b) {
                    for ((g, &d), &x) in s.iter_mut().zip(grad.data()).zip(va) {
                        *g += d * x;
                    }
                }
            }
            Op::Scale(a, factor) => {
                if let Some(s) = slot!(a) {
                    axpy(s, factor, grad.data());
                }
            }
            Op::Sigmoid(a) => {
                if let Some(s) = slot!(a) {
                    for ((g, &d), &y) in s.iter_mut().zip(grad.data()).zip(node.value.data()) {
                        *g += d * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(s) = slot!(a) {
                    for ((g, &d), &y) in s.iter_mut().zip(grad.data()).zip(node.value.data()) {
                        *g += d * (1.0 - y * y);
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(s) = slot!(a) {
                    for ((g, &d), &y) in s.iter_mut().zip(grad.data()).zip(node.value.data()) {
                        if y > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(s) = slot!(a) {
                    ops::softmax_backward(&node.value, grad, s);
                }
            }
            Op::MaxPool2 { input, ref argmax } => {
                if let Some(s) = slot!(input) {
                    for (&at, &d) in argmax.iter().zip(grad.data()) {
                        s[at] += d;
                    }
                }
            }
            Op::ScaleChannels { attention, map } => {
                let c = self.value(map).channels();
                let (va, vx) = (self.value(attention).data(), self.value(map).data());
                if let Some(s) = slot!(attention) {
                    for (r, g) in s.iter_mut().enumerate() {
                        let span = r * c..(r + 1) * c;
                        *g += dot(&grad.data()[span.clone()], &vx[span]);
                    }
                }
                if let Some(s) = slot!(map) {
                    for (r, &av) in va.iter().enumerate() {
                        let span = r * c..(r + 1) * c;
                        axpy(&mut s[span.clone()], av, &grad.data()[span]);
                    }
                }
            }
            Op::WeightedPool { weights, map } => {
                let c = self.value(map).channels();
                let (vw, vx) = (self.value(weights).data(), self.value(map).data());
                if let Some(s) = slot!(weights) {
                    for (r, g) in s.iter_mut().enumerate() {
                        *g += dot(grad.data(), &vx[r * c..(r + 1) * c]);
                    }
                }
                if let Some(s) = slot!(map) {
                    for (r, &wv) in vw.iter().enumerate() {
                        axpy(&mut s[r * c..(r + 1) * c], wv, grad.data());
                    }
                }
            }
            Op::AddChannelVector { map, vector } => {
                if let Some(s) = slot!(map) {
                    axpy(s, 1.0, grad.data());
                }
                let c = self.value(vector).len();
                if let Some(s) = slot!(vector) {
                    for px in grad.data().chunks_exact(c) {
                        axpy(s, 1.0, px);
                    }
                }
            }
            Op::SliceChannels { input, start } => {
                let c = self.value(input).channels();
                let len = node.value.channels();
                if let Some(s) = slot!(input) {
                    for (dst, src) in s.chunks_exact_mut(c).zip(grad.data().chunks_exact(len)) {
                        axpy(&mut dst[start..start + len], 1.0, src);
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(s) = slot!(a) {
                    axpy(s, 1.0, grad.data());
                }
            }
            Op::Sum(a) => {
                let d = grad.data()[0];
                if let Some(s) = slot!(a) {
                    s.iter_mut().for_each(|g| *g += d);
                }
            }
            Op::NegLogAt { input, index, floor } => {
                let p = self.value(input).data()[index];
                if p > floor {
                    if let Some(s) = slot!(input) {
                        s[index] -= grad.data()[0] / p;
                    }
                }
            }
        }
    }
}

fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

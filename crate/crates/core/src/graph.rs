//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node whose inputs are earlier nodes, so tape
//! order is already a topological order. [`Graph::backward`] walks the tape
//! once from the loss towards the leaves.

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeometry};
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param,
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeometry },
    Add(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    MaxPool2 { input: Var, argmax: Vec<u32> },
    Upsample2(Var),
    Concat(Var, Var),
    SliceChannels { input: Var, start: usize },
    SoftmaxSpatial(Var),
    KlDivergence { target: Var, pred: Var, eps: T },
    WeightedSum { input: Var, weights: Tensor<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Tape of recorded operations.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss with respect to the tracked leaves of a graph.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, shape: &[usize], delta: Vec<T>) {
    match slot {
        Some(t) => {
            for (a, d) in t.data_mut().iter_mut().zip(delta) {
                *a = *a + d;
            }
        }
        None => *slot = Some(Tensor::new(shape, delta).expect("gradient shape")),
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Constant, tracked: false });
        Var(self.nodes.len() - 1)
    }

    /// Adds a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Param, tracked: true });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {}", op_name(&op))));
        }
        let tracked = inputs.iter().any(|&v| self.tracked(v));
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Cross-correlation of `input [C_in,H,W]` with `kernel [C_out,C_in,kH,kW]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        let (o, kc, kh, kw) = match self.value(kernel).shape() {
            &[o, kc, kh, kw] => (o, kc, kh, kw),
            s => return Err(Error::ShapeMismatch(format!("kernel must be rank 4, got {s:?}"))),
        };
        if kc != c {
            return Err(Error::ShapeMismatch(format!(
                "kernel expects {kc} input channels, input has {c}"
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [o] {
                return Err(Error::ShapeMismatch(format!(
                    "bias shape {:?} for {o} output channels",
                    self.value(b).shape()
                )));
            }
        }
        let geom = ConvGeometry {
            in_channels: c,
            height: h,
            width: w,
            out_channels: o,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
        };
        let (oh, ow) = geom.output_size().ok_or_else(|| {
            Error::ShapeMismatch(format!(
                "kernel {kh}x{kw} stride {stride} padding {padding} does not tile {h}x{w}"
            ))
        })?;
        let out = ops::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(&[o, oh, ow], out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(value, Op::Conv2d { input, kernel, bias, geom }, &inputs)
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(a);
        Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = self.zip(a, b, |p, q| p + q);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = self.zip(a, b, |p, q| p * q);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, ops::sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, T::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a), &[a])
    }

    /// 2x2 max pooling with stride 2.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::ShapeMismatch(format!("max-pool needs even extents, got {h}x{w}")));
        }
        let (out, argmax) = ops::maxpool2_forward(self.value(input).data(), c, h, w);
        let value = Tensor::new(&[c, h / 2, w / 2], out)?;
        self.push(value, Op::MaxPool2 { input, argmax }, &[input])
    }

    /// Nearest-neighbour upsampling by 2.
    pub fn upsample2d(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        let out = ops::upsample2_forward(self.value(input).data(), c, h, w);
        let value = Tensor::new(&[c, 2 * h, 2 * w], out)?;
        self.push(value, Op::Upsample2(input), &[input])
    }

    /// Channels of `a` followed by channels of `b`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, ha, wa) = self.value(a).dims3()?;
        let (cb, hb, wb) = self.value(b).dims3()?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::ShapeMismatch(format!(
                "concat of {ha}x{wa} with {hb}x{wb}"
            )));
        }
        let mut data = Vec::with_capacity((ca + cb) * ha * wa);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(&[ca + cb, ha, wa], data)?;
        self.push(value, Op::Concat(a, b), &[a, b])
    }

    /// Channels `start..start + len` of a `[C,H,W]` tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        if len == 0 || start + len > c {
            return Err(Error::ShapeMismatch(format!(
                "channel slice {start}..{} of {c}",
                start + len
            )));
        }
        let plane = h * w;
        let data = self.value(input).data()[start * plane..(start + len) * plane].to_vec();
        let value = Tensor::new(&[len, h, w], data)?;
        self.push(value, Op::SliceChannels { input, start }, &[input])
    }

    /// Softmax over all pixels of a single-channel map.
    pub fn softmax_spatial(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        if c != 1 {
            return Err(Error::ShapeMismatch(format!("spatial softmax needs 1 channel, got {c}")));
        }
        if !self.value(input).is_finite() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let value = Tensor::new(&[1, h, w], ops::softmax(self.value(input).data()))?;
        self.push(value, Op::SoftmaxSpatial(input), &[input])
    }

    /// `sum_p t[p] * ln((t[p] + eps) / (q[p] + eps))` as a `[1]` tensor.
    ///
    /// The target is treated as data: no gradient flows into it.
    pub fn kl_divergence(&mut self, target: Var, pred: Var, eps: T) -> Result<Var> {
        self.same_shape(target, pred)?;
        let tol = T::from_f64_lossy(1e-4);
        for (name, v) in [("target", target), ("prediction", pred)] {
            let t = self.value(v);
            let s = t.sum();
            if (s - T::one()).abs() > tol || t.data().iter().any(|&x| x < T::zero()) {
                return Err(Error::NotNormalized(format!("{name} sums to {s}")));
            }
        }
        let (t, q) = (self.value(target).data(), self.value(pred).data());
        let loss = t.iter().zip(q).fold(T::zero(), |acc, (&tp, &qp)| {
            if tp > T::zero() {
                acc + tp * ((tp + eps) / (qp + eps)).ln()
            } else {
                acc
            }
        });
        let value = Tensor::scalar(loss);
        self.push(value, Op::KlDivergence { target, pred, eps }, &[target, pred])
    }

    /// `sum_i w[i] * x[i]` as a `[1]` tensor.
    pub fn weighted_sum(&mut self, input: Var, weights: Tensor<T>) -> Result<Var> {
        if weights.shape() != self.value(input).shape() {
            return Err(Error::ShapeMismatch(format!(
                "weights {:?} vs input {:?}",
                weights.shape(),
                self.value(input).shape()
            )));
        }
        let s = self
            .value(input)
            .data()
            .iter()
            .zip(weights.data())
            .fold(T::zero(), |acc, (&x, &w)| acc + x * w);
        self.push(Tensor::scalar(s), Op::WeightedSum { input, weights }, &[input])
    }

    /// Back-propagates from a single-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "loss must be a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked || matches!(node.op, Op::Constant | Op::Param) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let g = g.data();
            match &node.op {
                Op::Constant | Op::Param => unreachable!(),
                Op::Conv2d { input, kernel, bias, geom } => {
                    let want = (
                        self.tracked(*input),
                        self.tracked(*kernel),
                        bias.is_some_and(|b| self.tracked(b)),
                    );
                    let cg = ops::conv2d_backward(
                        self.value(*input).data(),
                        self.value(*kernel).data(),
                        g,
                        geom,
                        want,
                    );
                    if let Some(d) = cg.input {
                        accumulate(&mut grads[input.0], self.value(*input).shape(), d);
                    }
                    if let Some(d) = cg.kernel {
                        accumulate(&mut grads[kernel.0], self.value(*kernel).shape(), d);
                    }
                    if let (Some(d), Some(b)) = (cg.bias, bias) {
                        accumulate(&mut grads[b.0], self.value(*b).shape(), d);
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if self.tracked(*v) {
                            accumulate(&mut grads[v.0], self.value(*v).shape(), g.to_vec());
                        }
                    }
                }
                Op::Mul(a, b) => {
                    for (v, other) in [(a, b), (b, a)] {
                        if self.tracked(*v) {
                            let o = self.value(*other).data();
                            let d = g.iter().zip(o).map(|(&gi, &oi)| gi * oi).collect();
                            accumulate(&mut grads[v.0], self.value(*v).shape(), d);
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let d = g.iter().zip(y).map(|(&gi, &s)| gi * s * (T::one() - s)).collect();
                    accumulate(&mut grads[a.0], self.value(*a).shape(), d);
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    let d = g.iter().zip(y).map(|(&gi, &t)| gi * (T::one() - t * t)).collect();
                    accumulate(&mut grads[a.0], self.value(*a).shape(), d);
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    let d = g
                        .iter()
                        .zip(x)
                        .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                        .collect();
                    accumulate(&mut grads[a.0], self.value(*a).shape(), d);
                }
                Op::MaxPool2 { input, argmax } => {
                    let mut d = vec![T::zero(); self.value(*input).len()];
                    for (&gi, &src) in g.iter().zip(argmax) {
                        d[src as usize] = d[src as usize] + gi;
                    }
                    accumulate(&mut grads[input.0], self.value(*input).shape(), d);
                }
                Op::Upsample2(input) => {
                    let (c, h, w) = self.value(*input).dims3()?;
                    let d = ops::upsample2_backward(g, c, h, w);
                    accumulate(&mut grads[input.0], self.value(*input).shape(), d);
                }
                Op::Concat(a, b) => {
                    let split = self.value(*a).len();
                    if self.tracked(*a) {
                        accumulate(&mut grads[a.0], self.value(*a).shape(), g[..split].to_vec());
                    }
                    if self.tracked(*b) {
                        accumulate(&mut grads[b.0], self.value(*b).shape(), g[split..].to_vec());
                    }
                }
                Op::SliceChannels { input, start } => {
                    let src = self.value(*input);
                    let plane = src.shape()[1] * src.shape()[2];
                    let mut d = vec![T::zero(); src.len()];
                    d[start * plane..start * plane + g.len()].copy_from_slice(g);
                    accumulate(&mut grads[input.0], src.shape(), d);
                }
                Op::SoftmaxSpatial(input) => {
                    let y = node.value.data();
                    let dot = g.iter().zip(y).fold(T::zero(), |a, (&gi, &yi)| a + gi * yi);
                    let d = g.iter().zip(y).map(|(&gi, &yi)| yi * (gi - dot)).collect();
                    accumulate(&mut grads[input.0], self.value(*input).shape(), d);
                }
                Op::KlDivergence { target, pred, eps } => {
                    if self.tracked(*pred) {
                        let t = self.value(*target).data();
                        let q = self.value(*pred).data();
                        let d = t
                            .iter()
                            .zip(q)
                            .map(|(&tp, &qp)| {
                                if tp > T::zero() {
                                    -g[0] * tp / (qp + *eps)
                                } else {
                                    T::zero()
                                }
                            })
                            .collect();
                        accumulate(&mut grads[pred.0], self.value(*pred).shape(), d);
                    }
                }
                Op::WeightedSum { input, weights } => {
                    let d = weights.data().iter().map(|&w| w * g[0]).collect();
                    accumulate(&mut grads[input.0], self.value(*input).shape(), d);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Constant => "constant",
        Op::Param => "param",
        Op::Conv2d { .. } => "conv2d",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Sigmoid(_) => "sigmoid",
        Op::Tanh(_) => "tanh",
        Op::Relu(_) => "relu",
        Op::MaxPool2 { .. } => "maxpool2d",
        Op::Upsample2(_) => "upsample2d",
        Op::Concat(..) => "concat_channels",
        Op::SliceChannels { .. } => "slice_channels",
        Op::SoftmaxSpatial(_) => "softmax_spatial",
        Op::KlDivergence { .. } => "kl_divergence",
        Op::WeightedSum { .. } => "weighted_sum",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t3(c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(&[c, h, w], data).unwrap()
    }

    #[test]
    fn identity_conv() {
        let mut g = Graph::new();
        let x = g.constant(t3(1, 1, 1, vec![5.0]));
        let k = g.param(Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap());
        let b = g.param(Tensor::new(&[1], vec![0.0]).unwrap());
        let y = g.conv2d(x, k, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[5.0]);
    }

    #[test]
    fn averaging_conv_of_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 3, 3], 1.0));
        let k = g.param(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0));
        let b = g.param(Tensor::new(&[1], vec![0.0]).unwrap());
        let y = g.conv2d(x, k, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1]);
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 4, 4]));
        let k = g.param(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(g.conv2d(x, k, None, 1, 1), Err(Error::ShapeMismatch(_))));
        let k = g.param(Tensor::zeros(&[1, 2, 2, 2]));
        // (4 + 0 - 2) / 3 is not integral
        assert!(matches!(g.conv2d(x, k, None, 3, 0), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn maxpool_example_and_ties() {
        let mut g = Graph::new();
        let x = g.param(t3(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.maxpool2d(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[1, 4, 4], 7.0));
        let y = g.maxpool2d(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 7.0));
        let loss = g.weighted_sum(y, Tensor::full(&[1, 2, 2], 1.0)).unwrap();
        let grads = g.backward(loss).unwrap();
        let d = grads.get(x).unwrap().data();
        let expected = [
            1.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, //
            1.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(d, &expected);
    }

    #[test]
    fn maxpool_rejects_odd() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 4]));
        assert!(g.maxpool2d(x).is_err());
    }

    #[test]
    fn upsample_replicates_and_sums_gradient() {
        let mut g = Graph::new();
        let x = g.param(t3(1, 1, 1, vec![5.0]));
        let y = g.upsample2d(x).unwrap();
        assert_eq!(g.value(y).data(), &[5.0; 4]);
        let loss = g.weighted_sum(y, Tensor::full(&[1, 2, 2], 1.0)).unwrap();
        assert_eq!(g.backward(loss).unwrap().get(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn concat_then_slice_is_identity() {
        let mut g = Graph::new();
        let a = g.constant(t3(1, 1, 1, vec![1.5]));
        let b = g.constant(t3(2, 1, 1, vec![-2.0, 3.0]));
        let ab = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(ab).data(), &[1.5, -2.0, 3.0]);
        let a2 = g.slice_channels(ab, 0, 1).unwrap();
        let b2 = g.slice_channels(ab, 1, 2).unwrap();
        assert_eq!(g.value(a2), g.value(a));
        assert_eq!(g.value(b2), g.value(b));
        let c = g.constant(t3(1, 2, 1, vec![0.0, 0.0]));
        assert!(g.concat_channels(a, c).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 2, 2], 3.0));
        let y = g.softmax_spatial(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let x = g.constant(t3(1, 1, 2, vec![0.0, 3f64.ln()]));
        let y = g.softmax_spatial(x).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);

        let x = g.constant(Tensor::zeros(&[2, 1, 1]));
        assert!(g.softmax_spatial(x).is_err());
    }

    #[test]
    fn kl_examples() {
        let mut g = Graph::new();
        let t = g.constant(t3(1, 1, 2, vec![0.5, 0.5]));
        let q = g.constant(t3(1, 1, 2, vec![0.25, 0.75]));
        let kl = g.kl_divergence(t, q, 0.0).unwrap();
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((g.value(kl).data()[0] - expected).abs() < 1e-12);
        assert!((g.value(kl).data()[0] - 0.143841).abs() < 1e-5);

        let same = g.kl_divergence(q, q, 1e-8).unwrap();
        assert!(g.value(same).data()[0].abs() < 1e-9);

        let bad = g.constant(t3(1, 1, 2, vec![0.5, 0.6]));
        assert!(matches!(g.kl_divergence(bad, q, 1e-8), Err(Error::NotNormalized(_))));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::new();
        let x = g.constant(t3(1, 1, 2, vec![f64::MAX, f64::MAX]));
        assert!(matches!(g.add(x, x), Err(Error::NonFinite(_))));
        let y = g.constant(t3(1, 1, 2, vec![f64::NAN, 0.0]));
        assert!(matches!(g.softmax_spatial(y), Err(Error::NonFinite(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(t3(1, 1, 1, vec![2.0]));
        let b = g.param(t3(1, 1, 1, vec![3.0]));
        let p = g.mul(a, b).unwrap();
        let loss = g.weighted_sum(p, Tensor::full(&[1, 1, 1], 1.0)).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[2.0]);
    }
}

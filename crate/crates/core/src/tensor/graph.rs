use super::kernels::{self, ConvGeometry, Layout};
use super::{Element, Tensor, TensorError};

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, transpose_b: bool },
    Conv2d { x: NodeId, k: NodeId, geom: ConvGeometry, cols: Vec<f64> },
    MaxPool2 { x: NodeId, argmax: Vec<usize> },
    Relu(NodeId),
    Mul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias { x: NodeId, b: NodeId },
    Reshape(NodeId),
    Sum(NodeId),
    SoftmaxXent { logits: NodeId, labels: Vec<usize>, probs: Vec<f64> },
    StraightThrough(NodeId),
}

#[derive(Debug)]
struct Node<T: Element> {
    value: Tensor<T>,
    op: Op,
    trainable: bool,
    needs_grad: bool,
}

/// Append-only record of tensor operations. Nodes are stored in creation
/// order, which is a topological order, so `backward` is a single reverse scan.
#[derive(Debug)]
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss w.r.t. every trainable leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T: Element = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; `backward` reports its gradient.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push_node(value, Op::Leaf, true, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_node(value, Op::Leaf, false, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op, trainable: bool, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            trainable,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[NodeId]) -> NodeId {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.push_node(value, op, false, needs_grad)
    }

    fn mismatch(&self, op: &'static str, a: NodeId, b: NodeId) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    /// `a[m×n] · b[n×p]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×n] · b[p×n]ᵀ`, the dense-layer product `x·Wᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId, TensorError> {
        let (m, n) = self.value(a).dims2("matmul")?;
        let (r, c) = self.value(b).dims2("matmul")?;
        let (inner, p) = if transpose_b { (c, r) } else { (r, c) };
        if inner != n {
            return Err(self.mismatch("matmul", a, b));
        }
        let lb = if transpose_b { Layout::Transposed } else { Layout::RowMajor };
        let out = kernels::gemm(
            m,
            n,
            p,
            &self.value(a).to_f64_vec(),
            Layout::RowMajor,
            &self.value(b).to_f64_vec(),
            lb,
        );
        let value = from_f64(vec![m, p], out);
        Ok(self.push(value, Op::MatMul { a, b, transpose_b }, &[a, b]))
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId) -> Result<NodeId, TensorError> {
        let geom = ConvGeometry::new(self.value(x).shape(), self.value(k).shape())?;
        let (out, cols) =
            kernels::conv2d_forward(&geom, &self.value(x).to_f64_vec(), &self.value(k).to_f64_vec());
        let value = from_f64(geom.output_shape().to_vec(), out);
        Ok(self.push(value, Op::Conv2d { x, k, geom, cols }, &[x, k]))
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4("maxpool2")?;
        let (out, argmax, shape) = kernels::maxpool2_forward([n, c, h, w], xv.data());
        let value = Tensor::new(shape.to_vec(), out)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, &[x]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(x), &[x])
    }

    /// Elementwise product of equal-shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch("ewise_mul", a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch("add", a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds `b[F]` along axis 1 of `x[N×F]` or `x[N×F×H×W]`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.value(x).shape();
        let bs = self.value(b).shape();
        if xs.len() < 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(self.mismatch("add_bias", x, b));
        }
        let channels = xs[1];
        let inner: usize = xs[2..].iter().product();
        let bias = self.value(b).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v = *v + bias[(i / inner) % channels];
        }
        Ok(self.push(value, Op::AddBias { x, b }, &[x, b]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(T::of_f64(self.value(x).sum()));
        self.push(value, Op::Sum(x), &[x])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId, TensorError> {
        let (n, classes) = self.value(logits).dims2("softmax_xent")?;
        if labels.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_xent",
                left: vec![n, classes],
                right: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::LabelOutOfRange { label, classes });
        }
        let z = self.value(logits).to_f64_vec();
        let mut probs = vec![0.0; n * classes];
        let mut loss = 0.0;
        for (row, &label) in labels.iter().enumerate() {
            let zr = &z[row * classes..(row + 1) * classes];
            let max = zr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = zr.iter().map(|v| (v - max).exp()).sum();
            let log_denom = denom.ln();
            for (p, v) in probs[row * classes..(row + 1) * classes].iter_mut().zip(zr) {
                *p = (v - max).exp() / denom;
            }
            loss += log_denom - (zr[label] - max);
        }
        let value = Tensor::scalar(T::of_f64(loss / n as f64));
        Ok(self.push(
            value,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Node whose value is `realized` and whose gradient passes to `source`
    /// unchanged (derivative taken as 1).
    pub fn straight_through(&mut self, source: NodeId, realized: Tensor<T>) -> Result<NodeId, TensorError> {
        if self.value(source).shape() != realized.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "straight_through",
                left: self.value(source).shape().to_vec(),
                right: realized.shape().to_vec(),
            });
        }
        Ok(self.push(realized, Op::StraightThrough(source), &[source]))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, TensorError> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                }
                Op::MatMul { a, b, transpose_b } => {
                    let (m, n) = self.value(*a).dims2("matmul")?;
                    let p = node.value.shape()[1];
                    if self.nodes[a.0].needs_grad {
                        // da = dy · B̃ᵀ where B̃ is the logical right operand
                        let lb = if *transpose_b { Layout::RowMajor } else { Layout::Transposed };
                        let da = kernels::gemm(m, p, n, &dy, Layout::RowMajor, &self.value(*b).to_f64_vec(), lb);
                        accumulate(&mut grads, *a, da);
                    }
                    if self.nodes[b.0].needs_grad {
                        let av = self.value(*a).to_f64_vec();
                        let db = if *transpose_b {
                            kernels::gemm(p, m, n, &dy, Layout::Transposed, &av, Layout::RowMajor)
                        } else {
                            kernels::gemm(n, m, p, &av, Layout::Transposed, &dy, Layout::RowMajor)
                        };
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Conv2d { x, k, geom, cols } => {
                    if self.nodes[k.0].needs_grad {
                        accumulate(&mut grads, *k, kernels::conv2d_kernel_grad(geom, cols, &dy));
                    }
                    if self.nodes[x.0].needs_grad {
                        let kv = self.value(*k).to_f64_vec();
                        accumulate(&mut grads, *x, kernels::conv2d_input_grad(geom, &kv, &dy));
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut dx = vec![0.0; self.value(*x).len()];
                    for (g, &src) in dy.iter().zip(argmax) {
                        dx[src] += g;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Relu(x) => {
                    let dx = dy
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&g, &v)| if v > T::zero() { g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        let da = dy.iter().zip(self.value(*b).data()).map(|(g, v)| g * v.as_f64()).collect();
                        accumulate(&mut grads, *a, da);
                    }
                    if self.nodes[b.0].needs_grad {
                        let db = dy.iter().zip(self.value(*a).data()).map(|(g, v)| g * v.as_f64()).collect();
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads, *a, dy.clone());
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut grads, *b, dy);
                    }
                }
                Op::AddBias { x, b } => {
                    if self.nodes[b.0].needs_grad {
                        let shape = node.value.shape();
                        let channels = shape[1];
                        let inner: usize = shape[2..].iter().product();
                        let mut db = vec![0.0; channels];
                        for (i, g) in dy.iter().enumerate() {
                            db[(i / inner) % channels] += g;
                        }
                        accumulate(&mut grads, *b, db);
                    }
                    if self.nodes[x.0].needs_grad {
                        accumulate(&mut grads, *x, dy);
                    }
                }
                Op::Reshape(x) | Op::StraightThrough(x) => {
                    accumulate(&mut grads, *x, dy);
                }
                Op::Sum(x) => {
                    let dx = vec![dy[0]; self.value(*x).len()];
                    accumulate(&mut grads, *x, dx);
                }
                Op::SoftmaxXent { logits, labels, probs } => {
                    let classes = self.value(*logits).shape()[1];
                    let scale = dy[0] / labels.len() as f64;
                    let mut dz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (row, &label) in labels.iter().enumerate() {
                        dz[row * classes + label] -= scale;
                    }
                    accumulate(&mut grads, *logits, dz);
                }
            }
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !node.trainable {
                    return None;
                }
                let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                Some(from_f64(node.value.shape().to_vec(), data))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, contribution: Vec<f64>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn from_f64<T: Element>(shape: Vec<usize>, data: Vec<f64>) -> Tensor<T> {
    Tensor {
        shape,
        data: data.into_iter().map(T::of_f64).collect(),
    }
}

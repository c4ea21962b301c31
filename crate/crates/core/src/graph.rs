//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records operations eagerly: every node stores its forward
//! value, and node ids are handed out in creation order, so the tape is
//! topologically sorted by construction. Parameter leaves reference a
//! window of the flat parameter vector; [`Graph::backward`] scatters their
//! gradients straight into a vector with the same layout.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param { offset: usize },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Square(NodeId),
    Exp(NodeId),
    Relu(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    MatMul(NodeId, NodeId),
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, dims: ConvDims, cols: Vec<f64> },
    MaxPool2d { x: NodeId, argmax: Vec<usize> },
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Recorded computation with a single scalar output.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    param_len: usize,
    consumed: bool,
}

/// `c = beta * c + a * b` for strided row/column-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= last(m, k, a_strides));
    assert!(b.len() >= last(k, n, b_strides));
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, contribution: Vec<f64>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn accumulate_with(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[id.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

impl Graph {
    /// Empty graph whose parameter leaves index a vector of `param_len` values.
    pub fn new(param_len: usize) -> Self {
        Graph { nodes: Vec::new(), param_len, consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param_len(&self) -> usize {
        self.param_len
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    /// Hash of every piecewise branch taken in the forward pass: ReLU
    /// activity and max-pool winners. Equal signatures at two parameter
    /// vectors mean the loss is smooth along the segment between them only if
    /// no branch flipped in between; unequal signatures prove a kink.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.nodes[x.0].value.data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool2d { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if let Some(bad) = value.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss(*bad));
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn unary(&mut self, x: NodeId, op: Op, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.push(op, value)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Constant, value)
    }

    /// Leaf bound to `params[offset..offset + product(shape)]`.
    pub fn param(&mut self, params: &[f64], offset: usize, shape: Vec<usize>) -> Result<NodeId> {
        let len: usize = shape.iter().product();
        if offset + len > self.param_len || params.len() != self.param_len {
            return Err(Error::ShapeMismatch(format!(
                "parameter window {offset}..{} outside vector of {} (graph expects {})",
                offset + len,
                params.len(),
                self.param_len
            )));
        }
        let value = Tensor::new(shape, params[offset..offset + len].to_vec())?;
        self.push(Op::Param { offset }, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(Op::Add(a, b), value)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(Op::Mul(a, b), value)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    /// Sum of all elements, accumulated left to right.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.nodes[x.0].value.data().iter().fold(0.0, |acc, v| acc + v);
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let data = self.nodes[x.0].value.data();
        if data.is_empty() {
            return Err(Error::ShapeMismatch("mean of an empty tensor".into()));
        }
        let s = data.iter().fold(0.0, |acc, v| acc + v) / data.len() as f64;
        self.push(Op::Mean(x), Tensor::scalar(s))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        self.push(Op::Reshape(x), value)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.nodes[a.0].value.data(),
            (k, 1),
            self.nodes[b.0].value.data(),
            (n, 1),
            0.0,
            &mut out,
        );
        self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], out)?)
    }

    /// Fully connected layer: `x [N, in]`, `w [out, in]`, `b [out]` -> `[N, out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::ShapeMismatch(format!("linear input {sx:?} with weight {sw:?}")));
        }
        let (n, fan_in, fan_out) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return Err(Error::ShapeMismatch(format!("linear bias {:?}", self.shape(b))));
            }
        }
        let mut out = vec![0.0; n * fan_out];
        if let Some(b) = b {
            let bias = self.nodes[b.0].value.data();
            for row in out.chunks_exact_mut(fan_out) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            n,
            fan_in,
            fan_out,
            self.nodes[x.0].value.data(),
            (fan_in, 1),
            self.nodes[w.0].value.data(),
            (1, fan_in),
            1.0,
            &mut out,
        );
        self.push(Op::Linear { x, w, b }, Tensor::new(vec![n, fan_out], out)?)
    }

    /// 2-D convolution: `x [N, C, H, W]`, `w [O, C, kh, kw]`, `b [O]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeometry) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || geom.stride == 0 {
            return Err(Error::ShapeMismatch(format!("conv2d input {sx:?} with kernel {sw:?}")));
        }
        let (hp, wp) = (sx[2] + 2 * geom.padding, sx[3] + 2 * geom.padding);
        if hp < sw[2] || wp < sw[3] {
            return Err(Error::ShapeMismatch(format!("kernel {sw:?} larger than padded input {sx:?}")));
        }
        let dims = ConvDims {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            o: sw[0],
            kh: sw[2],
            kw: sw[3],
            ho: (hp - sw[2]) / geom.stride + 1,
            wo: (wp - sw[3]) / geom.stride + 1,
            stride: geom.stride,
            pad: geom.padding,
        };
        if let Some(b) = b {
            if self.shape(b) != [dims.o] {
                return Err(Error::ShapeMismatch(format!("conv bias {:?}", self.shape(b))));
            }
        }
        let cols = im2col(self.nodes[x.0].value.data(), &dims);
        let (patch, np, p) = (dims.patch(), dims.n * dims.positions(), dims.positions());
        let mut tmp = vec![0.0; dims.o * np];
        gemm(dims.o, patch, np, self.nodes[w.0].value.data(), (patch, 1), &cols, (np, 1), 0.0, &mut tmp);
        let mut out = vec![0.0; dims.n * dims.o * p];
        let bias = b.map(|b| self.nodes[b.0].value.data().to_vec());
        for o in 0..dims.o {
            let bo = bias.as_ref().map_or(0.0, |bv| bv[o]);
            for n in 0..dims.n {
                let src = &tmp[o * np + n * p..o * np + (n + 1) * p];
                let dst = &mut out[(n * dims.o + o) * p..(n * dims.o + o + 1) * p];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bo;
                }
            }
        }
        let value = Tensor::new(vec![dims.n, dims.o, dims.ho, dims.wo], out)?;
        self.push(Op::Conv2d { x, w, b, dims, cols }, value)
    }

    /// Non-overlapping max pooling with a `size x size` window.
    pub fn max_pool2d(&mut self, x: NodeId, size: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || size == 0 || sx[2] < size || sx[3] < size {
            return Err(Error::ShapeMismatch(format!("max_pool2d({size}) on {sx:?}")));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (ho, wo) = (h / size, w / size);
        let src = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * size * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = base + (oy * size + dy) * w + ox * size + dx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        self.push(Op::MaxPool2d { x, argmax }, value)
    }

    /// Mean softmax cross-entropy of `logits [N, C]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() || sl[0] == 0 {
            return Err(Error::ShapeMismatch(format!(
                "cross-entropy logits {sl:?} with {} labels",
                labels.len()
            )));
        }
        let (n, classes) = (sl[0], sl[1]);
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::BadLabel { index, label, classes });
        }
        let z = self.nodes[logits.0].value.data();
        let mut probs = vec![0.0; n * classes];
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &z[i * classes..(i + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom = row.iter().fold(0.0, |acc, v| acc + (v - max).exp());
            for (p, v) in probs[i * classes..(i + 1) * classes].iter_mut().zip(row) {
                *p = (v - max).exp() / denom;
            }
            total += max + denom.ln() - row[y];
        }
        let loss = total / n as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(loss));
        }
        let op = Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs };
        self.push(op, Tensor::scalar(loss))
    }

    /// Reverse pass from the scalar `root`. Returns the gradient with respect
    /// to the flat parameter vector; entries without a parameter leaf are 0.
    pub fn backward(&mut self, root: NodeId) -> Result<Vec<f64>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        self.consumed = true;
        let mut param_grad = vec![0.0; self.param_len];
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param { offset } => {
                    for (p, g) in param_grad[*offset..*offset + gy.len()].iter_mut().zip(&gy) {
                        *p += g;
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, gy.clone());
                    accumulate(&mut grads, *a, gy);
                }
                Op::Mul(a, b) => {
                    let va = self.nodes[a.0].value.data();
                    let vb = self.nodes[b.0].value.data();
                    let ga = gy.iter().zip(vb).map(|(g, y)| g * y).collect();
                    let gb = gy.iter().zip(va).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(x, c) => {
                    accumulate(&mut grads, *x, gy.iter().map(|g| g * c).collect());
                }
                Op::Square(x) => {
                    let vx = self.nodes[x.0].value.data();
                    accumulate(&mut grads, *x, gy.iter().zip(vx).map(|(g, v)| 2.0 * v * g).collect());
                }
                Op::Exp(x) => {
                    let out = node.value.data();
                    accumulate(&mut grads, *x, gy.iter().zip(out).map(|(g, e)| g * e).collect());
                }
                Op::Relu(x) => {
                    let vx = self.nodes[x.0].value.data();
                    let gx = gy.iter().zip(vx).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let len = self.nodes[x.0].value.len();
                    accumulate(&mut grads, *x, vec![gy[0]; len]);
                }
                Op::Mean(x) => {
                    let len = self.nodes[x.0].value.len();
                    accumulate(&mut grads, *x, vec![gy[0] / len as f64; len]);
                }
                Op::Reshape(x) => accumulate(&mut grads, *x, gy),
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let va = self.nodes[a.0].value.data();
                    let vb = self.nodes[b.0].value.data();
                    // dA = dY B^T, dB = A^T dY
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, &gy, (n, 1), vb, (1, n), 0.0, &mut ga);
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, va, (1, k), &gy, (n, 1), 0.0, &mut gb);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Linear { x, w, b } => {
                    let sx = self.shape(*x);
                    let (n, fan_in) = (sx[0], sx[1]);
                    let fan_out = self.shape(*w)[0];
                    let vx = self.nodes[x.0].value.data();
                    let vw = self.nodes[w.0].value.data();
                    if let Some(b) = b {
                        let mut gb = vec![0.0; fan_out];
                        for row in gy.chunks_exact(fan_out) {
                            for (acc, g) in gb.iter_mut().zip(row) {
                                *acc += g;
                            }
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                    // dW = dY^T X, dX = dY W
                    accumulate_with(&mut grads, *w, fan_out * fan_in, |gw| {
                        gemm(fan_out, n, fan_in, &gy, (1, fan_out), vx, (fan_in, 1), 1.0, gw)
                    });
                    if !matches!(self.nodes[x.0].op, Op::Constant) {
                        accumulate_with(&mut grads, *x, n * fan_in, |gx| {
                            gemm(n, fan_out, fan_in, &gy, (fan_out, 1), vw, (fan_in, 1), 1.0, gx)
                        });
                    }
                }
                Op::Conv2d { x, w, b, dims, cols } => {
                    let d = *dims;
                    let (patch, p) = (d.patch(), d.positions());
                    let np = d.n * p;
                    // [N, O, P] -> [O, N*P]
                    let mut gt = vec![0.0; d.o * np];
                    for n in 0..d.n {
                        for o in 0..d.o {
                            let src = &gy[(n * d.o + o) * p..(n * d.o + o + 1) * p];
                            gt[o * np + n * p..o * np + (n + 1) * p].copy_from_slice(src);
                        }
                    }
                    if let Some(b) = b {
                        let gb = gt.chunks_exact(np).map(|row| row.iter().fold(0.0, |a, v| a + v)).collect();
                        accumulate(&mut grads, *b, gb);
                    }
                    accumulate_with(&mut grads, *w, d.o * patch, |gw| {
                        gemm(d.o, np, patch, &gt, (np, 1), cols, (1, np), 1.0, gw)
                    });
                    if !matches!(self.nodes[x.0].op, Op::Constant) {
                        let vw = self.nodes[w.0].value.data();
                        let mut gcols = vec![0.0; patch * np];
                        gemm(patch, d.o, np, vw, (1, patch), &gt, (np, 1), 0.0, &mut gcols);
                        accumulate_with(&mut grads, *x, d.n * d.c * d.h * d.w, |gx| col2im(&gcols, &d, gx));
                    }
                }
                Op::MaxPool2d { x, argmax } => {
                    let len = self.nodes[x.0].value.len();
                    accumulate_with(&mut grads, *x, len, |gx| {
                        for (g, &idx) in gy.iter().zip(argmax) {
                            gx[idx] += g;
                        }
                    });
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let n = labels.len();
                    let classes = probs.len() / n;
                    let scale = gy[0] / n as f64;
                    let mut gz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &y) in labels.iter().enumerate() {
                        gz[i * classes + y] -= scale;
                    }
                    accumulate(&mut grads, *logits, gz);
                }
            }
        }
        if let Some(i) = param_grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(i));
        }
        Ok(param_grad)
    }
}

fn im2col(x: &[f64], d: &ConvDims) -> Vec<f64> {
    let (p, np) = (d.positions(), d.n * d.positions());
    let mut cols = vec![0.0; d.patch() * np];
    for c in 0..d.c {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let dst_row = &mut cols[row * np..(row + 1) * np];
                for n in 0..d.n {
                    let plane = &x[(n * d.c + c) * d.h * d.w..(n * d.c + c + 1) * d.h * d.w];
                    for oy in 0..d.ho {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for ox in 0..d.wo {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if ix >= 0 && ix < d.w as isize {
                                dst_row[n * p + oy * d.wo + ox] = plane[iy as usize * d.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], d: &ConvDims, gx: &mut [f64]) {
    let (p, np) = (d.positions(), d.n * d.positions());
    for c in 0..d.c {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let src_row = &cols[row * np..(row + 1) * np];
                for n in 0..d.n {
                    let plane = &mut gx[(n * d.c + c) * d.h * d.w..(n * d.c + c + 1) * d.h * d.w];
                    for oy in 0..d.ho {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for ox in 0..d.wo {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if ix >= 0 && ix < d.w as isize {
                                plane[iy as usize * d.w + ix as usize] += src_row[n * p + oy * d.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

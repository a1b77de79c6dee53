//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Leaves are registered from
//! parameter tensors, operations append nodes in topological order, and
//! [`Graph::backward`] walks the node list in reverse, accumulating each
//! leaf's gradient from all of its consumers.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId, f64),
    MulScalar(NodeId, f64),
    Relu(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Exp(NodeId),
    Threshold(NodeId, f64),
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    AvgPool2(NodeId),
    Flatten(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumAxis(NodeId, usize),
    LogSoftmax(NodeId),
    SelectCols(NodeId, Vec<usize>),
    ScatterCols(NodeId, Vec<usize>, usize),
    ConcatCols(NodeId, NodeId),
    DivRows(NodeId, NodeId),
    Nll(NodeId, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Recorded forward pass; owns every intermediate value.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf; gradient tracking follows the tensor's flag.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        let rg = t.requires_grad();
        self.push(Op::Leaf, t.clone(), rg)
    }

    /// Registers a constant input; never tracked.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, t.clone(), false)
    }

    pub fn constant_owned(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Accumulates the graph-side gradient of `id` into the parameter tensor.
    pub fn grad_into(&self, id: NodeId, param: &mut Tensor) {
        match self.nodes[id.0].grad.as_deref() {
            Some(g) => param.accumulate_grad(g),
            None => param.ensure_grad(),
        }
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    fn mismatch(op: &'static str, detail: alloc::string::String) -> Error {
        Error::ShapeMismatch { op, detail }
    }

    // ── Elementwise and scalar ops ──────────────────────────────────────

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::mismatch(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(op, value, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(
        &mut self,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> NodeId {
        let data: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let value = Tensor::new(self.shape(a), data).expect("unary preserves shape");
        let rg = self.rg(&[a]);
        self.push(op, value, rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| x + c, Op::AddScalar(a, c))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| x * c, Op::MulScalar(a, c))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, libm::sqrt, Op::Sqrt(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, libm::exp, Op::Exp(a))
    }

    /// Zeroes entries below `eps`, passes the rest through unchanged.
    pub fn threshold(&mut self, a: NodeId, eps: f64) -> NodeId {
        self.unary(a, |x| if x < eps { 0.0 } else { x }, Op::Threshold(a, eps))
    }

    // ── Neural-net ops ──────────────────────────────────────────────────

    /// 2-D convolution with zero padding. `x`: B×Ci×H×W, `w`: Co×Ci×K×K, `b`: Co.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 {
            return Err(Self::mismatch(
                "conv2d",
                format!("ranks: input {xs:?}, kernel {ws:?}, bias {bs:?}"),
            ));
        }
        let (bn, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, wci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if ci != wci || bs[0] != co {
            return Err(Self::mismatch(
                "conv2d",
                format!("input channels {ci} vs kernel {wci}, bias {} vs {co}", bs[0]),
            ));
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Self::mismatch(
                "conv2d",
                format!("kernel {kh}x{kw} too large for input {h}x{wd} with pad {pad}"),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;

        let mut out = vec![0.0; bn * co * oh * ow];
        {
            let xd = self.data(x);
            let wdta = self.data(w);
            let bd = self.data(b);
            for bi in 0..bn {
                for o in 0..co {
                    let bias = bd[o];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = bias;
                            for c in 0..ci {
                                let xbase = ((bi * ci + c) * h) * wd;
                                let wbase = ((o * ci + c) * kh) * kw;
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy as usize >= h {
                                        continue;
                                    }
                                    let xrow = xbase + iy as usize * wd;
                                    let wrow = wbase + ky * kw;
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix as usize >= wd {
                                            continue;
                                        }
                                        acc += xd[xrow + ix as usize] * wdta[wrow + kx];
                                    }
                                }
                            }
                            out[((bi * co + o) * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[bn, co, oh, ow], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Op::Conv2d { x, w, b, stride, pad }, value, rg))
    }

    /// Fully connected layer. `x`: B×F, `w`: O×F, `b`: O.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || ws[0] != bs[0] {
            return Err(Self::mismatch(
                "linear",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (bn, fin) = (xs[0], xs[1]);
        let fout = ws[0];
        let mut out = vec![0.0; bn * fout];
        {
            let xd = self.data(x);
            let wd = self.data(w);
            let bd = self.data(b);
            for i in 0..bn {
                let xrow = &xd[i * fin..(i + 1) * fin];
                for o in 0..fout {
                    let wrow = &wd[o * fin..(o + 1) * fin];
                    let mut acc = bd[o];
                    for f in 0..fin {
                        acc += xrow[f] * wrow[f];
                    }
                    out[i * fout + o] = acc;
                }
            }
        }
        let value = Tensor::new(&[bn, fout], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Op::Linear { x, w, b }, value, rg))
    }

    /// Non-overlapping 2×2 average pooling; requires even spatial dims.
    pub fn avg_pool2(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Self::mismatch(
                "avg_pool2",
                format!("need rank-4 with even spatial dims, got {s:?}"),
            ));
        }
        let (bn, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; bn * c * oh * ow];
        let xd = self.data(a);
        for bc in 0..bn * c {
            let ibase = bc * h * w;
            let obase = bc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = ibase + (2 * oy) * w + 2 * ox;
                    out[obase + oy * ow + ox] = 0.25 * (xd[i] + xd[i + 1] + xd[i + w] + xd[i + w + 1]);
                }
            }
        }
        let value = Tensor::new(&[bn, c, oh, ow], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::AvgPool2(a), value, rg))
    }

    /// Collapses all trailing dims into one: B×… → B×D.
    pub fn flatten(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.is_empty() {
            return Err(Self::mismatch("flatten", format!("scalar input {s:?}")));
        }
        let bn = s[0];
        let d: usize = s[1..].iter().product();
        let value = Tensor::new(&[bn, d], self.data(a).to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Flatten(a), value, rg))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.data(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(Op::SumAll(a), Tensor::scalar(total), rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.data(a).len().max(1);
        let total: f64 = self.data(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(Op::MeanAll(a), Tensor::scalar(total / n as f64), rg)
    }

    /// Sums out one axis, e.g. B×C×H×W with axis 1 → B×H×W.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Self::mismatch("sum_axis", format!("axis {axis} for shape {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let alen = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let xd = self.data(a);
        for o in 0..outer {
            for j in 0..alen {
                let base = (o * alen + j) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    out[obase + i] += xd[base + i];
                }
            }
        }
        let mut oshape: Vec<usize> = s[..axis].to_vec();
        oshape.extend_from_slice(&s[axis + 1..]);
        let value = Tensor::new(&oshape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SumAxis(a, axis), value, rg))
    }

    /// Row-wise log-softmax over the last axis of a B×C tensor.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Self::mismatch("log_softmax", format!("need rank-2, got {s:?}")));
        }
        let (bn, c) = (s[0], s[1]);
        let xd = self.data(a);
        let mut out = vec![0.0; bn * c];
        for i in 0..bn {
            let row = &xd[i * c..(i + 1) * c];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut z = 0.0;
            for &v in row {
                z += libm::exp(v - max);
            }
            let lz = libm::log(z) + max;
            for (j, &v) in row.iter().enumerate() {
                out[i * c + j] = v - lz;
            }
        }
        let value = Tensor::new(&[bn, c], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::LogSoftmax(a), value, rg))
    }

    // ── Column selection and composition ────────────────────────────────

    fn check_cols(name: &'static str, cols: &[usize], c: usize) -> Result<()> {
        if cols.is_empty() {
            return Err(Self::mismatch(name, format!("empty column list for width {c}")));
        }
        for w in cols.windows(2) {
            if w[1] <= w[0] {
                return Err(Self::mismatch(
                    name,
                    format!("column indices must be strictly increasing, got {cols:?}"),
                ));
            }
        }
        if *cols.last().unwrap() >= c {
            return Err(Self::mismatch(
                name,
                format!("column index {} out of range for width {c}", cols.last().unwrap()),
            ));
        }
        Ok(())
    }

    /// Picks the given columns of a B×C tensor, order-preserving.
    pub fn select_cols(&mut self, a: NodeId, cols: &[usize]) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Self::mismatch("select_cols", format!("need rank-2, got {s:?}")));
        }
        let (bn, c) = (s[0], s[1]);
        Self::check_cols("select_cols", cols, c)?;
        let xd = self.data(a);
        let mut out = vec![0.0; bn * cols.len()];
        for i in 0..bn {
            for (j, &col) in cols.iter().enumerate() {
                out[i * cols.len() + j] = xd[i * c + col];
            }
        }
        let value = Tensor::new(&[bn, cols.len()], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SelectCols(a, cols.to_vec()), value, rg))
    }

    /// Scatters a B×K tensor into B×`width` at the given columns; other columns are zero.
    pub fn scatter_cols(&mut self, a: NodeId, cols: &[usize], width: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 2 || s[1] != cols.len() {
            return Err(Self::mismatch(
                "scatter_cols",
                format!("input {s:?} vs {} columns", cols.len()),
            ));
        }
        Self::check_cols("scatter_cols", cols, width)?;
        let bn = s[0];
        let xd = self.data(a);
        let mut out = vec![0.0; bn * width];
        for i in 0..bn {
            for (j, &col) in cols.iter().enumerate() {
                out[i * width + col] = xd[i * cols.len() + j];
            }
        }
        let value = Tensor::new(&[bn, width], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::ScatterCols(a, cols.to_vec(), width), value, rg))
    }

    /// Concatenates two rank-2 tensors along the column axis.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Self::mismatch("concat_cols", format!("{sa:?} vs {sb:?}")));
        }
        let (bn, ca, cb) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; bn * (ca + cb)];
        for i in 0..bn {
            out[i * (ca + cb)..i * (ca + cb) + ca].copy_from_slice(&ad[i * ca..(i + 1) * ca]);
            out[i * (ca + cb) + ca..(i + 1) * (ca + cb)].copy_from_slice(&bd[i * cb..(i + 1) * cb]);
        }
        let value = Tensor::new(&[bn, ca + cb], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::ConcatCols(a, b), value, rg))
    }

    /// Divides each row of `a` (B×D) by the matching entry of `d` (length B).
    /// Rows with a zero denominator yield zeros and propagate no gradient.
    pub fn div_rows(&mut self, a: NodeId, d: NodeId) -> Result<NodeId> {
        let (sa, sd) = (self.shape(a), self.shape(d));
        if sa.len() != 2 || sd.len() != 1 || sa[0] != sd[0] {
            return Err(Self::mismatch("div_rows", format!("{sa:?} vs {sd:?}")));
        }
        let (bn, c) = (sa[0], sa[1]);
        let (ad, dd) = (self.data(a), self.data(d));
        let mut out = vec![0.0; bn * c];
        for i in 0..bn {
            if dd[i] != 0.0 {
                for j in 0..c {
                    out[i * c + j] = ad[i * c + j] / dd[i];
                }
            }
        }
        let value = Tensor::new(&[bn, c], out)?;
        let rg = self.rg(&[a, d]);
        Ok(self.push(Op::DivRows(a, d), value, rg))
    }

    /// Negative log-likelihood of log-probabilities `a` (B×C) at the labels,
    /// averaged over the batch.
    pub fn nll(&mut self, a: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Self::mismatch(
                "nll",
                format!("log-probs {s:?} vs {} labels", labels.len()),
            ));
        }
        let (bn, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label: bad, num_classes: c });
        }
        let xd = self.data(a);
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            total -= xd[i * c + y];
        }
        let value = Tensor::scalar(total / bn as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Nll(a, labels.to_vec()), value, rg))
    }

    // ── Backward pass ───────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Fills the graph-side gradient
    /// of every tracked node; leaves keep zeros when the loss does not
    /// depend on them.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss { elements: self.nodes[loss.0].value.numel() });
        }
        for node in self.nodes.iter_mut() {
            node.grad = if node.requires_grad {
                Some(vec![0.0; node.value.numel()])
            } else {
                None
            };
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(()); // constant loss: all leaf gradients stay zero
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let grad = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &grad);
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn add_grad(&mut self, id: NodeId, f: impl Fn(usize) -> f64) {
        if let Some(g) = self.nodes[id.0].grad.as_mut() {
            for (k, gv) in g.iter_mut().enumerate() {
                *gv += f(k);
            }
        }
    }

    fn propagate(&mut self, out_idx: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(*a, |k| g[k]);
                self.add_grad(*b, |k| g[k]);
            }
            Op::Sub(a, b) => {
                self.add_grad(*a, |k| g[k]);
                self.add_grad(*b, |k| -g[k]);
            }
            Op::Mul(a, b) => {
                let ad = self.nodes[a.0].value.data().to_vec();
                let bd = self.nodes[b.0].value.data().to_vec();
                self.add_grad(*a, |k| g[k] * bd[k]);
                self.add_grad(*b, |k| g[k] * ad[k]);
            }
            Op::AddScalar(a, _) => self.add_grad(*a, |k| g[k]),
            Op::MulScalar(a, c) => {
                let c = *c;
                self.add_grad(*a, |k| g[k] * c);
            }
            Op::Relu(a) => {
                let xd = self.nodes[a.0].value.data().to_vec();
                self.add_grad(*a, |k| if xd[k] > 0.0 { g[k] } else { 0.0 });
            }
            Op::Square(a) => {
                let xd = self.nodes[a.0].value.data().to_vec();
                self.add_grad(*a, |k| 2.0 * xd[k] * g[k]);
            }
            Op::Sqrt(a) => {
                let yd = self.nodes[out_idx].value.data().to_vec();
                // Subgradient 0 at the boundary keeps gradients finite.
                self.add_grad(*a, |k| if yd[k] > 0.0 { 0.5 * g[k] / yd[k] } else { 0.0 });
            }
            Op::Exp(a) => {
                let yd = self.nodes[out_idx].value.data().to_vec();
                self.add_grad(*a, |k| g[k] * yd[k]);
            }
            Op::Threshold(a, eps) => {
                let eps = *eps;
                let xd = self.nodes[a.0].value.data().to_vec();
                self.add_grad(*a, |k| if xd[k] >= eps { g[k] } else { 0.0 });
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                self.conv2d_backward(*x, *w, *b, *stride, *pad, out_idx, g);
            }
            Op::Linear { x, w, b } => self.linear_backward(*x, *w, *b, g),
            Op::AvgPool2(a) => {
                let s = self.nodes[a.0].value.shape().to_vec();
                let (w, ow) = (s[3], s[3] / 2);
                let oh = s[2] / 2;
                self.add_grad(*a, |k| {
                    let wpos = k % w;
                    let hpos = (k / w) % s[2];
                    let bc = k / (w * s[2]);
                    0.25 * g[(bc * oh + hpos / 2) * ow + wpos / 2]
                });
            }
            Op::Flatten(a) => self.add_grad(*a, |k| g[k]),
            Op::SumAll(a) => self.add_grad(*a, |_| g[0]),
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.numel().max(1) as f64;
                self.add_grad(*a, |_| g[0] / n);
            }
            Op::SumAxis(a, axis) => {
                let s = self.nodes[a.0].value.shape().to_vec();
                let alen = s[*axis];
                let inner: usize = s[*axis + 1..].iter().product();
                self.add_grad(*a, |k| {
                    let o = k / (alen * inner);
                    let i = k % inner;
                    g[o * inner + i]
                });
            }
            Op::LogSoftmax(a) => {
                let yd = self.nodes[out_idx].value.data().to_vec();
                let s = self.nodes[out_idx].value.shape().to_vec();
                let c = s[1];
                let mut rowsum = vec![0.0; s[0]];
                for i in 0..s[0] {
                    rowsum[i] = g[i * c..(i + 1) * c].iter().sum();
                }
                self.add_grad(*a, |k| g[k] - libm::exp(yd[k]) * rowsum[k / c]);
            }
            Op::SelectCols(a, cols) => {
                let c = self.nodes[a.0].value.shape()[1];
                let k = cols.len();
                let mut pos = vec![usize::MAX; c];
                for (j, &col) in cols.iter().enumerate() {
                    pos[col] = j;
                }
                self.add_grad(*a, |idx| {
                    let col = idx % c;
                    if pos[col] == usize::MAX { 0.0 } else { g[(idx / c) * k + pos[col]] }
                });
            }
            Op::ScatterCols(a, cols, width) => {
                let k = cols.len();
                let width = *width;
                let cols = cols.clone();
                self.add_grad(*a, |idx| g[(idx / k) * width + cols[idx % k]]);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.nodes[a.0].value.shape()[1];
                let cb = self.nodes[b.0].value.shape()[1];
                let ct = ca + cb;
                self.add_grad(*a, |k| g[(k / ca) * ct + k % ca]);
                self.add_grad(*b, |k| g[(k / cb) * ct + ca + k % cb]);
            }
            Op::DivRows(a, d) => {
                let ad = self.nodes[a.0].value.data().to_vec();
                let dd = self.nodes[d.0].value.data().to_vec();
                let c = self.nodes[a.0].value.shape()[1];
                self.add_grad(*a, |k| {
                    let den = dd[k / c];
                    if den != 0.0 { g[k] / den } else { 0.0 }
                });
                self.add_grad(*d, |i| {
                    let den = dd[i];
                    if den == 0.0 {
                        return 0.0;
                    }
                    let mut acc = 0.0;
                    for j in 0..c {
                        acc -= g[i * c + j] * ad[i * c + j];
                    }
                    acc / (den * den)
                });
            }
            Op::Nll(a, labels) => {
                let c = self.nodes[a.0].value.shape()[1];
                let bn = labels.len() as f64;
                let labels = labels.clone();
                self.add_grad(*a, |k| {
                    if labels[k / c] == k % c { -g[0] / bn } else { 0.0 }
                });
            }
        }
    }

    fn conv2d_backward(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        out_idx: usize,
        g: &[f64],
    ) {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let ws = self.nodes[w.0].value.shape().to_vec();
        let os = self.nodes[out_idx].value.shape().to_vec();
        let (bn, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let (oh, ow) = (os[2], os[3]);

        if self.nodes[b.0].requires_grad {
            let mut db = vec![0.0; co];
            for bi in 0..bn {
                for o in 0..co {
                    let base = ((bi * co + o) * oh) * ow;
                    for k in 0..oh * ow {
                        db[o] += g[base + k];
                    }
                }
            }
            self.add_grad(b, |o| db[o]);
        }

        if self.nodes[w.0].requires_grad {
            let xd = self.nodes[x.0].value.data().to_vec();
            let mut dw = vec![0.0; co * ci * kh * kw];
            for bi in 0..bn {
                for o in 0..co {
                    let gbase = ((bi * co + o) * oh) * ow;
                    for c in 0..ci {
                        let xbase = ((bi * ci + c) * h) * wd;
                        let wbase = ((o * ci + c) * kh) * kw;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let mut acc = 0.0;
                                for oy in 0..oh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy as usize >= h {
                                        continue;
                                    }
                                    let xrow = xbase + iy as usize * wd;
                                    let grow = gbase + oy * ow;
                                    for ox in 0..ow {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix as usize >= wd {
                                            continue;
                                        }
                                        acc += g[grow + ox] * xd[xrow + ix as usize];
                                    }
                                }
                                dw[wbase + ky * kw + kx] += acc;
                            }
                        }
                    }
                }
            }
            self.add_grad(w, |k| dw[k]);
        }

        if self.nodes[x.0].requires_grad {
            let wdta = self.nodes[w.0].value.data().to_vec();
            let mut dx = vec![0.0; bn * ci * h * wd];
            for bi in 0..bn {
                for o in 0..co {
                    let gbase = ((bi * co + o) * oh) * ow;
                    for c in 0..ci {
                        let xbase = ((bi * ci + c) * h) * wd;
                        let wbase = ((o * ci + c) * kh) * kw;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[gbase + oy * ow + ox];
                                if gv == 0.0 {
                                    continue;
                                }
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy as usize >= h {
                                        continue;
                                    }
                                    let xrow = xbase + iy as usize * wd;
                                    let wrow = wbase + ky * kw;
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix as usize >= wd {
                                            continue;
                                        }
                                        dx[xrow + ix as usize] += gv * wdta[wrow + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            self.add_grad(x, |k| dx[k]);
        }
    }

    fn linear_backward(&mut self, x: NodeId, w: NodeId, b: NodeId, g: &[f64]) {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let (bn, fin) = (xs[0], xs[1]);
        let fout = self.nodes[w.0].value.shape()[0];

        if self.nodes[b.0].requires_grad {
            let mut db = vec![0.0; fout];
            for i in 0..bn {
                for o in 0..fout {
                    db[o] += g[i * fout + o];
                }
            }
            self.add_grad(b, |o| db[o]);
        }
        if self.nodes[w.0].requires_grad {
            let xd = self.nodes[x.0].value.data().to_vec();
            let mut dw = vec![0.0; fout * fin];
            for i in 0..bn {
                for o in 0..fout {
                    let gv = g[i * fout + o];
                    let wrow = o * fin;
                    let xrow = i * fin;
                    for f in 0..fin {
                        dw[wrow + f] += gv * xd[xrow + f];
                    }
                }
            }
            self.add_grad(w, |k| dw[k]);
        }
        if self.nodes[x.0].requires_grad {
            let wd = self.nodes[w.0].value.data().to_vec();
            let mut dx = vec![0.0; bn * fin];
            for i in 0..bn {
                for o in 0..fout {
                    let gv = g[i * fout + o];
                    let wrow = o * fin;
                    let xrow = i * fin;
                    for f in 0..fin {
                        dx[xrow + f] += gv * wd[wrow + f];
                    }
                }
            }
            self.add_grad(x, |k| dx[k]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn leaf(g: &mut Graph, shape: &[usize], data: Vec<f64>) -> NodeId {
        let mut t = Tensor::new(shape, data).unwrap();
        t.set_requires_grad(true);
        g.leaf(&t)
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn one_by_one_kernel_is_scalar_multiply() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::filled(&[1, 1, 3, 3], 1.0));
        let w = g.constant(&Tensor::filled(&[1, 1, 1, 1], 2.0));
        let b = g.constant(&Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn square_sum_gradient() {
        // loss = sum(w*w), w = [3] → dloss/dw = [6]
        let mut g = Graph::new();
        let w = leaf(&mut g, &[1], vec![3.0]);
        let sq = g.square(w);
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let mut g = Graph::new();
        let w = leaf(&mut g, &[2], vec![1.0, 2.0]);
        let c = g.constant(&Tensor::scalar(5.0));
        let loss = g.sum_all(c);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = leaf(&mut g, &[2], vec![1.0, 2.0]);
        let y = g.square(w);
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss { elements: 2 })));
    }

    #[test]
    fn shape_mismatch_names_operator() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::zeros(&[2]));
        let b = g.constant(&Tensor::zeros(&[3]));
        match g.add(a, b) {
            Err(Error::ShapeMismatch { op, .. }) => assert_eq!(op, "add"),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn select_scatter_roundtrip() {
        let mut g = Graph::new();
        let z = g.constant(&Tensor::new(&[1, 4], vec![2.0, -1.0, 0.5, 3.0]).unwrap());
        let sel = g.select_cols(z, &[2, 3]).unwrap();
        assert_eq!(g.value(sel).data(), &[0.5, 3.0]);
        let back = g.scatter_cols(sel, &[2, 3], 4).unwrap();
        assert_eq!(g.value(back).data(), &[0.0, 0.0, 0.5, 3.0]);
    }

    #[test]
    fn log_softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let z = g.constant(&Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap());
        let lp = g.log_softmax(z).unwrap();
        for i in 0..2 {
            let s: f64 = g.value(lp).data()[i * 3..(i + 1) * 3].iter().map(|&v| libm::exp(v)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn div_rows_zero_denominator_yields_zeros() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let d = g.constant(&Tensor::new(&[2], vec![2.0, 0.0]).unwrap());
        let y = g.div_rows(a, d).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 1.0, 0.0, 0.0]);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn nll_matches_hand_value() {
        // uniform logits over 10 classes → loss = ln 10
        let mut g = Graph::new();
        let z = g.constant(&Tensor::zeros(&[1, 10]));
        let lp = g.log_softmax(z).unwrap();
        let loss = g.nll(lp, &[4]).unwrap();
        assert!((g.value(loss).data()[0] - libm::log(10.0)).abs() < 1e-12);
    }

    #[test]
    fn grad_accumulates_over_consumers() {
        // loss = sum(w) + sum(w) → grad = 2 per element
        let mut g = Graph::new();
        let w = leaf(&mut g, &[2], vec![1.0, 1.0]);
        let s1 = g.sum_all(w);
        let s2 = g.sum_all(w);
        let loss = g.add(s1, s2).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 2.0]);
    }
}

use super::{bce_with_logits, gemm, sigmoid, softplus, Layout, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    LogSoftmax(NodeId),
    Sum(NodeId),
    SliceCols(NodeId, usize),
    Bce(NodeId, NodeId),
    BceRows(NodeId, NodeId),
    BceCross(NodeId, NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations. Parents always precede children, so a
/// single reverse sweep is a valid topological traversal.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient buffers produced by a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `id`, or `None` when the node did not influence the seed.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, materializing zeros for unreachable nodes.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    /// Record a constant input (no gradient is propagated into it).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Record a trainable parameter.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `x + bias` with `bias` broadcast across the rows of `x`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(dim_err("add_row bias width", xv.cols(), bv.len()));
        }
        let mut value = xv.clone();
        let c = value.cols();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % c];
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    fn same_shape(&self, ctx: &str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(dim_err(ctx, format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor {
            shape: av.shape().to_vec(),
            data,
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(softplus);
        let rg = self.rg(&[x]);
        self.push(value, Op::Softplus(x), rg)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::exp);
        let rg = self.rg(&[x]);
        self.push(value, Op::Exp(x), rg)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if !xv.is_finite() {
            return Err(Error::Numeric("log_softmax received non-finite logits".into()));
        }
        let value = super::log_softmax_rows(xv);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::LogSoftmax(x), rg))
    }

    /// Row-wise softmax, recorded as `exp(log_softmax(x))`.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let ls = self.log_softmax(x)?;
        Ok(self.exp(ls))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    /// `sum(x * weights)` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Tensor) -> Result<NodeId> {
        let w = self.constant(weights);
        let p = self.mul(x, w)?;
        Ok(self.sum(p))
    }

    /// Columns `start..end` of a 2-D value.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let c = xv.cols();
        if start > end || end > c {
            return Err(dim_err("slice_cols range", format!("within 0..{c}"), format!("{start}..{end}")));
        }
        let r = xv.rows();
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[start..end]);
        }
        let value = Tensor {
            shape: vec![r, end - start],
            data,
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceCols(x, start), rg))
    }

    fn check_targets(&self, ctx: &str, targets: NodeId) -> Result<()> {
        let tv = self.value(targets);
        if let Some(bad) = tv.data().iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Domain(format!("{ctx}: target {bad} outside [0, 1]")));
        }
        Ok(())
    }

    /// Summed binary cross-entropy between Bernoulli logits and targets.
    pub fn bce_loss(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        self.same_shape("bce_loss", logits, targets)?;
        self.check_targets("bce_loss", targets)?;
        let (lv, tv) = (self.value(logits), self.value(targets));
        let total: f64 = lv
            .data()
            .iter()
            .zip(tv.data())
            .map(|(&l, &t)| bce_with_logits(l, t))
            .sum();
        let rg = self.rg(&[logits, targets]);
        Ok(self.push(Tensor::scalar(total), Op::Bce(logits, targets), rg))
    }

    /// Per-row binary cross-entropy sums, shape `[rows]`.
    pub fn bce_rows(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        self.same_shape("bce_rows", logits, targets)?;
        self.check_targets("bce_rows", targets)?;
        let (lv, tv) = (self.value(logits), self.value(targets));
        let data = (0..lv.rows())
            .map(|r| {
                lv.row(r)
                    .iter()
                    .zip(tv.row(r))
                    .map(|(&l, &t)| bce_with_logits(l, t))
                    .sum()
            })
            .collect::<Vec<f64>>();
        let rg = self.rg(&[logits, targets]);
        Ok(self.push(Tensor::vector(data), Op::BceRows(logits, targets), rg))
    }

    /// All-pairs binary cross-entropy: `logits` is `K x P`, `targets` is
    /// `B x P`, and entry `[b, z]` of the `B x K` result is the summed BCE of
    /// logit row `z` against target row `b`.
    pub fn bce_cross(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        self.check_targets("bce_cross", targets)?;
        let (lv, tv) = (self.value(logits), self.value(targets));
        let (k, p) = (lv.rows(), lv.cols());
        let b = tv.rows();
        if tv.cols() != p {
            return Err(dim_err("bce_cross pixel width", p, tv.cols()));
        }
        let sp: Vec<f64> = (0..k).map(|z| lv.row(z).iter().map(|&l| softplus(l)).sum()).collect();
        // out = sp[z] - T L^T
        let mut out = vec![0.0; b * k];
        gemm(
            Layout::normal(tv.data(), b, p),
            Layout::transposed(lv.data(), k, p),
            &mut out,
            0.0,
        );
        for r in 0..b {
            for z in 0..k {
                let v = &mut out[r * k + z];
                *v = sp[z] - *v;
            }
        }
        let value = Tensor {
            shape: vec![b, k],
            data: out,
        };
        let rg = self.rg(&[logits, targets]);
        Ok(self.push(value, Op::BceCross(logits, targets), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        self.backward_from(loss, Tensor::full(lv.shape(), 1.0))
    }

    /// Vector-Jacobian product: propagate `seed` (shaped like `node`) back
    /// through the tape.
    pub fn backward_from(&self, node: NodeId, seed: Tensor) -> Result<Gradients> {
        if node.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("node {} is not on this tape", node.0)));
        }
        if seed.len() != self.value(node).len() {
            return Err(dim_err("backward seed", self.value(node).len(), seed.len()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[node.0] = Some(seed.reshape(self.value(node).shape().to_vec())?);
        for i in (0..=node.0).rev() {
            let n = &self.nodes[i];
            if !n.requires_grad || matches!(n.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&n.op, &n.value, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.requires_grad(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        Layout::normal(g.data(), m, n),
                        Layout::transposed(bv.data(), k, n),
                        &mut da,
                        0.0,
                    );
                    self.acc(grads, a, da);
                }
                if self.requires_grad(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        Layout::transposed(av.data(), m, k),
                        Layout::normal(g.data(), m, n),
                        &mut db,
                        0.0,
                    );
                    self.acc(grads, b, db);
                }
            }
            Op::AddRow(x, bias) => {
                if self.requires_grad(x) {
                    self.acc(grads, x, g.data().to_vec());
                }
                if self.requires_grad(bias) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for r in 0..g.rows() {
                        for (d, v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    self.acc(grads, bias, db);
                }
            }
            Op::Add(a, b) => {
                for p in [a, b] {
                    if self.requires_grad(p) {
                        self.acc(grads, p, g.data().to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.requires_grad(a) {
                    self.acc(grads, a, g.data().to_vec());
                }
                if self.requires_grad(b) {
                    self.acc(grads, b, g.data().iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(a) {
                    let d = mul(g.data(), self.value(b).data());
                    self.acc(grads, a, d);
                }
                if self.requires_grad(b) {
                    let d = mul(g.data(), self.value(a).data());
                    self.acc(grads, b, d);
                }
            }
            Op::Scale(x, c) => {
                self.acc(grads, x, g.data().iter().map(|v| v * c).collect());
            }
            Op::Relu(x) => {
                let xv = self.value(x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                self.acc(grads, x, d);
            }
            Op::Sigmoid(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gi, &s)| gi * s * (1.0 - s))
                    .collect();
                self.acc(grads, x, d);
            }
            Op::Softplus(x) => {
                let xv = self.value(x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gi, &xi)| gi * sigmoid(xi))
                    .collect();
                self.acc(grads, x, d);
            }
            Op::Exp(x) => {
                self.acc(grads, x, mul(g.data(), out.data()));
            }
            Op::LogSoftmax(x) => {
                // d x_j = g_j - softmax_j * sum(g)
                let c = out.cols();
                let mut d = vec![0.0; out.len()];
                for r in 0..out.rows() {
                    let gr = g.row(r);
                    let s: f64 = gr.iter().sum();
                    let orow = out.row(r);
                    for j in 0..c {
                        d[r * c + j] = gr[j] - orow[j].exp() * s;
                    }
                }
                self.acc(grads, x, d);
            }
            Op::Sum(x) => {
                let n = self.value(x).len();
                self.acc(grads, x, vec![g.item(); n]);
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(x);
                let (r, c, w) = (xv.rows(), xv.cols(), out.cols());
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                }
                self.acc(grads, x, d);
            }
            Op::Bce(l, t) => self.bce_backward(l, t, |_| g.item(), grads),
            Op::BceRows(l, t) => {
                let c = self.value(l).cols();
                self.bce_backward(l, t, |i| g.data()[i / c], grads)
            }
            Op::BceCross(l, t) => {
                let (lv, tv) = (self.value(l), self.value(t));
                let (k, p, b) = (lv.rows(), lv.cols(), tv.rows());
                if self.requires_grad(l) {
                    // dL[z,p] = colsum(g)[z] * sigma(L[z,p]) - (g^T T)[z,p]
                    let mut gtt = vec![0.0; k * p];
                    gemm(
                        Layout::transposed(g.data(), b, k),
                        Layout::normal(tv.data(), b, p),
                        &mut gtt,
                        0.0,
                    );
                    let mut colsum = vec![0.0; k];
                    for r in 0..b {
                        for (c, v) in colsum.iter_mut().zip(g.row(r)) {
                            *c += v;
                        }
                    }
                    for z in 0..k {
                        for j in 0..p {
                            let idx = z * p + j;
                            gtt[idx] = colsum[z] * sigmoid(lv.data()[idx]) - gtt[idx];
                        }
                    }
                    self.acc(grads, l, gtt);
                }
                if self.requires_grad(t) {
                    // dT = -g L
                    let mut dt = vec![0.0; b * p];
                    gemm(
                        Layout::normal(g.data(), b, k),
                        Layout::normal(lv.data(), k, p),
                        &mut dt,
                        0.0,
                    );
                    for v in &mut dt {
                        *v = -*v;
                    }
                    self.acc(grads, t, dt);
                }
            }
        }
    }

    fn bce_backward(
        &self,
        l: NodeId,
        t: NodeId,
        upstream: impl Fn(usize) -> f64,
        grads: &mut [Option<Tensor>],
    ) {
        let (lv, tv) = (self.value(l), self.value(t));
        if self.requires_grad(l) {
            let d = lv
                .data()
                .iter()
                .zip(tv.data())
                .enumerate()
                .map(|(i, (&li, &ti))| upstream(i) * (sigmoid(li) - ti))
                .collect();
            self.acc(grads, l, d);
        }
        if self.requires_grad(t) {
            let d = lv
                .data()
                .iter()
                .enumerate()
                .map(|(i, &li)| -upstream(i) * li)
                .collect();
            self.acc(grads, t, d);
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Vec<f64>) {
        if !self.requires_grad(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(&delta) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor {
                    shape: self.value(id).shape().to_vec(),
                    data: delta,
                });
            }
        }
    }
}

fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

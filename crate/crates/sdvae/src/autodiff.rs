//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A `Tape` records every primitive application during the forward pass.
//! `backward` replays the record in reverse, accumulating gradients
//! additively into every reachable node. Tapes are rebuilt per minibatch
//! and confined to one thread for the duration of a forward/backward pass.

use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite output of {op} at node {node}")]
    NonFinite { op: &'static str, node: NodeId },
    #[error("log requires strictly positive inputs (node {node})")]
    LogDomain { node: NodeId },
    #[error("backward root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("non-deterministic function detected by repeated evaluation")]
    NonDeterministic,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvMeta {
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvMeta {
    pub fn out_h(&self) -> usize {
        (self.in_h - self.kernel) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.in_w - self.kernel) / self.stride + 1
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// [n,m] + [1,m] row-vector bias.
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softplus(NodeId),
    SoftmaxRows(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SliceCols(NodeId, usize, usize),
    ConcatCols(NodeId, NodeId),
    /// [n,1] replicated across m columns.
    BroadcastCols(NodeId, usize),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        meta: ConvMeta,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn rows(shape: &[usize]) -> usize {
    shape[0]
}
fn cols(shape: &[usize]) -> usize {
    shape[1]
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].values
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].grad
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            for g in &mut n.grad {
                *g = 0.0;
            }
        }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let grad = vec![0.0; values.len()];
        self.nodes.push(Node {
            shape,
            values,
            grad,
            op,
        });
        self.nodes.len() - 1
    }

    fn check_finite(&self, id: NodeId, op: &'static str) -> Result<NodeId, AdError> {
        if self.nodes[id].values.iter().all(|v| v.is_finite()) {
            Ok(id)
        } else {
            Err(AdError::NonFinite { op, node: id })
        }
    }

    /// New leaf node; no inputs, gradient sink.
    pub fn leaf(&mut self, values: Vec<f64>, shape: Vec<usize>) -> NodeId {
        self.push(shape, values, Op::Leaf)
    }

    /// Leaf holding a copy of another node's values; gradients do not flow back.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let values = self.nodes[id].values.clone();
        let shape = self.nodes[id].shape.clone();
        self.push(shape, values, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(vec![v], vec![1, 1])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa.len() != 2 || sb.len() != 2 || cols(sa) != rows(sb) {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (rows(sa), cols(sa), cols(sb));
        let mut out = vec![0.0; m * n];
        {
            let av = &self.nodes[a].values;
            let bv = &self.nodes[b].values;
            for i in 0..m {
                for p in 0..k {
                    let aip = av[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    let crow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        crow[j] += aip * brow[j];
                    }
                }
            }
        }
        let id = self.push(vec![m, n], out, Op::MatMul(a, b));
        self.check_finite(id, "matmul")
    }

    /// Elementwise add; also accepts a [1,m] right operand as a row bias.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let (sa, sb) = (
            self.nodes[a].shape.clone(),
            self.nodes[b].shape.clone(),
        );
        if sa == sb {
            let out: Vec<f64> = self.nodes[a]
                .values
                .iter()
                .zip(&self.nodes[b].values)
                .map(|(x, y)| x + y)
                .collect();
            let id = self.push(sa, out, Op::Add(a, b));
            return self.check_finite(id, "add");
        }
        if sb.len() == 2 && rows(&sb) == 1 && sa.len() == 2 && cols(&sa) == cols(&sb) {
            let (n, m) = (rows(&sa), cols(&sa));
            let mut out = Vec::with_capacity(n * m);
            for i in 0..n {
                for j in 0..m {
                    out.push(self.nodes[a].values[i * m + j] + self.nodes[b].values[j]);
                }
            }
            let id = self.push(sa, out, Op::AddRow(a, b));
            return self.check_finite(id, "add");
        }
        Err(AdError::ShapeMismatch {
            op: "add",
            lhs: sa,
            rhs: sb,
        })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let (sa, sb) = (
            self.nodes[a].shape.clone(),
            self.nodes[b].shape.clone(),
        );
        if sa != sb {
            return Err(AdError::ShapeMismatch {
                op: "sub",
                lhs: sa,
                rhs: sb,
            });
        }
        let out: Vec<f64> = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| x - y)
            .collect();
        let id = self.push(sa, out, Op::Sub(a, b));
        self.check_finite(id, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let (sa, sb) = (
            self.nodes[a].shape.clone(),
            self.nodes[b].shape.clone(),
        );
        if sa != sb {
            return Err(AdError::ShapeMismatch {
                op: "mul",
                lhs: sa,
                rhs: sb,
            });
        }
        let out: Vec<f64> = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| x * y)
            .collect();
        let id = self.push(sa, out, Op::Mul(a, b));
        self.check_finite(id, "mul")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, AdError> {
        let out: Vec<f64> = self.nodes[a].values.iter().map(|x| x * c).collect();
        let shape = self.nodes[a].shape.clone();
        let id = self.push(shape, out, Op::Scale(a, c));
        self.check_finite(id, "scale")
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, AdError> {
        let out: Vec<f64> = self.nodes[a].values.iter().map(|x| x + c).collect();
        let shape = self.nodes[a].shape.clone();
        let id = self.push(shape, out, { let _ = c; Op::AddScalar(a) });
        self.check_finite(id, "add_scalar")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let out: Vec<f64> = self.nodes[a].values.iter().map(|&x| sigmoid(x)).collect();
        let shape = self.nodes[a].shape.clone();
        let id = self.push(shape, out, Op::Sigmoid(a));
        self.check_finite(id, "sigmoid")
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let out: Vec<f64> = self.nodes[a].values.iter().map(|x| x.tanh()).collect();
        let shape = self.nodes[a].shape.clone();
        let id = self.push(shape, out, Op::Tanh(a));
        self.check_finite(id, "tanh")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let out: Vec<f64> = self.nodes[a].values.iter().map(|x| x.max(0.0)).collect();
        let shape = self.nodes[a].shape.clone();
        let id = self.push(shape, out, Op::Relu(a));
        self.check_finite(id, "relu")
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let out: Vec<f64> = self.nodes[a].values.iter().map(|x| x.exp()).collect();
        let shape = self.nodes[a].shape.clone();
        let id = self.push(shape, out, Op::Exp(a));
        self.check_finite(id, "exp")
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        if self.nodes[a].values.iter().any(|&x| x <= 0.0) {
            return Err(AdError::LogDomain { node: a });
        }
        let out: Vec<f64> = self.nodes[a].values.iter().map(|x| x.ln()).collect();
        let shape = self.nodes[a].shape.clone();
        let id = self.push(shape, out, Op::Log(a));
        self.check_finite(id, "log")
    }

    /// log(1 + e^x), stable for large |x|.
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let out: Vec<f64> = self.nodes[a].values.iter().map(|&x| softplus(x)).collect();
        let shape = self.nodes[a].shape.clone();
        let id = self.push(shape, out, Op::Softplus(a));
        self.check_finite(id, "softplus")
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let shape = self.nodes[a].shape.clone();
        let (n, m) = (rows(&shape), cols(&shape));
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &self.nodes[a].values[i * m..(i + 1) * m];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..m {
                let e = (row[j] - mx).exp();
                out[i * m + j] = e;
                z += e;
            }
            for j in 0..m {
                out[i * m + j] /= z;
            }
        }
        let id = self.push(shape, out, Op::SoftmaxRows(a));
        self.check_finite(id, "softmax_rows")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let s: f64 = self.nodes[a].values.iter().sum();
        let id = self.push(vec![1, 1], vec![s], Op::Sum(a));
        self.check_finite(id, "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let len = self.nodes[a].values.len() as f64;
        let s: f64 = self.nodes[a].values.iter().sum::<f64>() / len;
        let id = self.push(vec![1, 1], vec![s], Op::Mean(a));
        self.check_finite(id, "mean")
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, AdError> {
        let shape = self.nodes[a].shape.clone();
        let (n, m) = (rows(&shape), cols(&shape));
        if start >= end || end > m {
            return Err(AdError::ShapeMismatch {
                op: "slice_cols",
                lhs: shape,
                rhs: vec![start, end],
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(n * w);
        for i in 0..n {
            out.extend_from_slice(&self.nodes[a].values[i * m + start..i * m + end]);
        }
        let id = self.push(vec![n, w], out, Op::SliceCols(a, start, end));
        self.check_finite(id, "slice_cols")
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let (sa, sb) = (
            self.nodes[a].shape.clone(),
            self.nodes[b].shape.clone(),
        );
        if rows(&sa) != rows(&sb) {
            return Err(AdError::ShapeMismatch {
                op: "concat_cols",
                lhs: sa,
                rhs: sb,
            });
        }
        let (n, ma, mb) = (rows(&sa), cols(&sa), cols(&sb));
        let mut out = Vec::with_capacity(n * (ma + mb));
        for i in 0..n {
            out.extend_from_slice(&self.nodes[a].values[i * ma..(i + 1) * ma]);
            out.extend_from_slice(&self.nodes[b].values[i * mb..(i + 1) * mb]);
        }
        let id = self.push(vec![n, ma + mb], out, Op::ConcatCols(a, b));
        self.check_finite(id, "concat_cols")
    }

    /// Replicate a [n,1] column vector across m columns.
    pub fn broadcast_cols(&mut self, a: NodeId, m: usize) -> Result<NodeId, AdError> {
        let shape = self.nodes[a].shape.clone();
        if cols(&shape) != 1 {
            return Err(AdError::ShapeMismatch {
                op: "broadcast_cols",
                lhs: shape,
                rhs: vec![1, m],
            });
        }
        let n = rows(&shape);
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let v = self.nodes[a].values[i];
            out.extend(std::iter::repeat(v).take(m));
        }
        let id = self.push(vec![n, m], out, Op::BroadcastCols(a, m));
        self.check_finite(id, "broadcast_cols")
    }

    /// Per-example row sum: [n,m] -> [n,1]. Composed as matmul with a ones column.
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let m = cols(&self.nodes[a].shape);
        let ones = self.leaf(vec![1.0; m], vec![m, 1]);
        self.matmul(a, ones)
    }

    /// Valid-padding 2-D convolution. Input rows are flattened [in_ch, h, w]
    /// images; weight is [out_ch, in_ch*k*k]; output rows are flattened
    /// [out_ch, out_h, out_w].
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        meta: ConvMeta,
    ) -> Result<NodeId, AdError> {
        let si = self.nodes[input].shape.clone();
        let sw = self.nodes[weight].shape.clone();
        let in_len = meta.in_ch * meta.in_h * meta.in_w;
        let wk = meta.in_ch * meta.kernel * meta.kernel;
        if cols(&si) != in_len || sw != vec![meta.out_ch, wk] {
            return Err(AdError::ShapeMismatch {
                op: "conv2d",
                lhs: si,
                rhs: sw,
            });
        }
        let n = rows(&si);
        let (oh, ow) = (meta.out_h(), meta.out_w());
        let mut out = vec![0.0; n * meta.out_ch * oh * ow];
        {
            let iv = &self.nodes[input].values;
            let wv = &self.nodes[weight].values;
            for b in 0..n {
                let img = &iv[b * in_len..(b + 1) * in_len];
                for oc in 0..meta.out_ch {
                    let w = &wv[oc * wk..(oc + 1) * wk];
                    for y in 0..oh {
                        for x in 0..ow {
                            let mut acc = 0.0;
                            for ic in 0..meta.in_ch {
                                for ky in 0..meta.kernel {
                                    for kx in 0..meta.kernel {
                                        let iy = y * meta.stride + ky;
                                        let ix = x * meta.stride + kx;
                                        acc += img[ic * meta.in_h * meta.in_w
                                            + iy * meta.in_w
                                            + ix]
                                            * w[ic * meta.kernel * meta.kernel
                                                + ky * meta.kernel
                                                + kx];
                                    }
                                }
                            }
                            out[b * meta.out_ch * oh * ow + oc * oh * ow + y * ow + x] = acc;
                        }
                    }
                }
            }
        }
        let id = self.push(
            vec![n, meta.out_ch * oh * ow],
            out,
            Op::Conv2d {
                input,
                weight,
                meta,
            },
        );
        self.check_finite(id, "conv2d")
    }

    /// Reverse sweep from a scalar root. Gradients accumulate additively;
    /// callers wanting fresh gradients must `zero_grads` first.
    pub fn backward(&mut self, root: NodeId) -> Result<(), AdError> {
        let rshape = self.nodes[root].shape.clone();
        if rshape.iter().product::<usize>() != 1 {
            return Err(AdError::NonScalarRoot { shape: rshape });
        }
        self.nodes[root].grad[0] += 1.0;
        for id in (0..=root).rev() {
            let op = self.nodes[id].op.clone();
            let g = self.nodes[id].grad.clone();
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = (
                        rows(&self.nodes[a].shape),
                        cols(&self.nodes[a].shape),
                    );
                    let n = cols(&self.nodes[b].shape);
                    // dA += g · Bᵀ
                    let bv = self.nodes[b].values.clone();
                    {
                        let ga = &mut self.nodes[a].grad;
                        for i in 0..m {
                            for j in 0..n {
                                let gij = g[i * n + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    ga[i * k + p] += gij * bv[p * n + j];
                                }
                            }
                        }
                    }
                    // dB += Aᵀ · g
                    let av = self.nodes[a].values.clone();
                    let gb = &mut self.nodes[b].grad;
                    for p in 0..k {
                        for i in 0..m {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for (i, &gi) in g.iter().enumerate() {
                        self.nodes[a].grad[i] += gi;
                    }
                    for (i, &gi) in g.iter().enumerate() {
                        self.nodes[b].grad[i] += gi;
                    }
                }
                Op::AddRow(a, b) => {
                    let m = cols(&self.nodes[b].shape);
                    for (i, &gi) in g.iter().enumerate() {
                        self.nodes[a].grad[i] += gi;
                    }
                    for (i, &gi) in g.iter().enumerate() {
                        self.nodes[b].grad[i % m] += gi;
                    }
                }
                Op::Sub(a, b) => {
                    for (i, &gi) in g.iter().enumerate() {
                        self.nodes[a].grad[i] += gi;
                    }
                    for (i, &gi) in g.iter().enumerate() {
                        self.nodes[b].grad[i] -= gi;
                    }
                }
                Op::Mul(a, b) => {
                    let bv = self.nodes[b].values.clone();
                    for (i, &gi) in g.iter().enumerate() {
                        self.nodes[a].grad[i] += gi * bv[i];
                    }
                    let av = self.nodes[a].values.clone();
                    for (i, &gi) in g.iter().enumerate() {
                        self.nodes[b].grad[i] += gi * av[i];
                    }
                }
                Op::Scale(a, c) => {
                    for (i, &gi) in g.iter().enumerate() {
                        self.nodes[a].grad[i] += gi * c;
                    }
                }
                Op::AddScalar(a) => {
                    for (i, &gi) in g.iter().enumerate() {
                        self.nodes[a].grad[i] += gi;
                    }
                }
                Op::Sigmoid(a) => {
                    let sv = self.nodes[id].values.clone();
                    for (i, &gi) in g.iter().enumerate() {
                        self.nodes[a].grad[i] += gi * sv[i] * (1.0 - sv[i]);
                    }
                }
                Op::Tanh(a) => {
                    let tv = self.nodes[id].values.clone();
                    for (i, &gi) in g.iter().enumerate() {
                        self.nodes[a].grad[i] += gi * (1.0 - tv[i] * tv[i]);
                    }
                }
                Op::Relu(a) => {
                    // subgradient 0 at exactly 0
                    let av = self.nodes[a].values.clone();
                    for (i, &gi) in g.iter().enumerate() {
                        if av[i] > 0.0 {
                            self.nodes[a].grad[i] += gi;
                        }
                    }
                }
                Op::Exp(a) => {
                    let ev = self.nodes[id].values.clone();
                    for (i, &gi) in g.iter().enumerate() {
                        self.nodes[a].grad[i] += gi * ev[i];
                    }
                }
                Op::Log(a) => {
                    let av = self.nodes[a].values.clone();
                    for (i, &gi) in g.iter().enumerate() {
                        self.nodes[a].grad[i] += gi / av[i];
                    }
                }
                Op::Softplus(a) => {
                    let av = self.nodes[a].values.clone();
                    for (i, &gi) in g.iter().enumerate() {
                        self.nodes[a].grad[i] += gi * sigmoid(av[i]);
                    }
                }
                Op::SoftmaxRows(a) => {
                    // JVP form: da = p ⊙ (g − <g,p>)
                    let shape = self.nodes[id].shape.clone();
                    let (n, m) = (rows(&shape), cols(&shape));
                    let pv = self.nodes[id].values.clone();
                    for i in 0..n {
                        let p = &pv[i * m..(i + 1) * m];
                        let gr = &g[i * m..(i + 1) * m];
                        let dot: f64 = gr.iter().zip(p).map(|(x, y)| x * y).sum();
                        for j in 0..m {
                            self.nodes[a].grad[i * m + j] += p[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::Sum(a) => {
                    let gi = g[0];
                    for ga in self.nodes[a].grad.iter_mut() {
                        *ga += gi;
                    }
                }
                Op::Mean(a) => {
                    let len = self.nodes[a].values.len() as f64;
                    let gi = g[0] / len;
                    for ga in self.nodes[a].grad.iter_mut() {
                        *ga += gi;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let m = cols(&self.nodes[a].shape);
                    let w = end - start;
                    let n = rows(&self.nodes[a].shape);
                    for i in 0..n {
                        for j in 0..w {
                            self.nodes[a].grad[i * m + start + j] += g[i * w + j];
                        }
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (ma, mb) = (
                        cols(&self.nodes[a].shape),
                        cols(&self.nodes[b].shape),
                    );
                    let n = rows(&self.nodes[a].shape);
                    for i in 0..n {
                        for j in 0..ma {
                            self.nodes[a].grad[i * ma + j] += g[i * (ma + mb) + j];
                        }
                        for j in 0..mb {
                            self.nodes[b].grad[i * mb + j] += g[i * (ma + mb) + ma + j];
                        }
                    }
                }
                Op::BroadcastCols(a, m) => {
                    let n = rows(&self.nodes[a].shape);
                    for i in 0..n {
                        let s: f64 = g[i * m..(i + 1) * m].iter().sum();
                        self.nodes[a].grad[i] += s;
                    }
                }
                Op::Conv2d {
                    input,
                    weight,
                    meta,
                } => {
                    let n = rows(&self.nodes[input].shape);
                    let in_len = meta.in_ch * meta.in_h * meta.in_w;
                    let wk = meta.in_ch * meta.kernel * meta.kernel;
                    let (oh, ow) = (meta.out_h(), meta.out_w());
                    let iv = self.nodes[input].values.clone();
                    let wv = self.nodes[weight].values.clone();
                    for b in 0..n {
                        for oc in 0..meta.out_ch {
                            for y in 0..oh {
                                for x in 0..ow {
                                    let go =
                                        g[b * meta.out_ch * oh * ow + oc * oh * ow + y * ow + x];
                                    if go == 0.0 {
                                        continue;
                                    }
                                    for ic in 0..meta.in_ch {
                                        for ky in 0..meta.kernel {
                                            for kx in 0..meta.kernel {
                                                let iy = y * meta.stride + ky;
                                                let ix = x * meta.stride + kx;
                                                let ii = b * in_len
                                                    + ic * meta.in_h * meta.in_w
                                                    + iy * meta.in_w
                                                    + ix;
                                                let wi = oc * wk
                                                    + ic * meta.kernel * meta.kernel
                                                    + ky * meta.kernel
                                                    + kx;
                                                self.nodes[input].grad[ii] += go * wv[wi];
                                                self.nodes[weight].grad[wi] += go * iv[ii];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_coord: usize,
}

/// Compares an analytic gradient against central differences.
///
/// `f` maps a flat parameter vector to (scalar value, full analytic gradient).
/// Central differences use only the value. Relative error per coordinate is
/// |analytic − numeric| / max(1, |numeric|). Determinism is verified by
/// evaluating twice at the base point.
pub fn finite_difference_check<F>(
    f: F,
    point: &[f64],
    h: f64,
) -> Result<GradCheckReport, AdError>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>), AdError>,
{
    assert!(h > 0.0 && h <= 1e-3, "h must lie in (0, 1e-3]");
    let (v0, analytic) = f(point)?;
    let (v1, _) = f(point)?;
    if v0.to_bits() != v1.to_bits() {
        return Err(AdError::NonDeterministic);
    }
    assert_eq!(analytic.len(), point.len());
    let mut max_rel = 0.0;
    let mut worst = 0;
    let mut p = point.to_vec();
    for i in 0..point.len() {
        let orig = p[i];
        p[i] = orig + h;
        let (vp, _) = f(&p)?;
        p[i] = orig - h;
        let (vm, _) = f(&p)?;
        p[i] = orig;
        let numeric = (vp - vm) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst_coord: worst,
    })
}

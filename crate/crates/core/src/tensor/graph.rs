use super::Tensor;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Gelu(NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    LogSumExpRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    Rows {
        x: NodeId,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    Transpose(NodeId),
    NormalizeRows {
        x: NodeId,
        norms: Vec<f64>,
    },
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Pick {
        x: NodeId,
        idx: Vec<(usize, usize)>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// A recording of one forward computation.
///
/// Ops validate shapes eagerly and return [`Error::Shape`] on mismatch. Only
/// 1-D and 2-D tensors are supported; the only broadcasts are row-bias adds
/// and row-wise reductions.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn transpose_raw(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

/// `a[m×k] · b[k×n]`, i-k-j loop order.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Clears all gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    fn dims2(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| f(a)).collect();
        let t = Tensor {
            shape: v.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[x]);
        self.push(t, rg, op)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            rg,
            Op::MatMul(a, b),
        ))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        self.same_shape(name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape, data }, rg, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a[m×n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2("add_row", a)?;
        if self.shape(bias) != [n] {
            return Err(Error::shape("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.data(bias);
        let data = self
            .data(a)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let rg = self.rg(&[a, bias]);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            rg,
            Op::AddRow(a, bias),
        ))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.scale(x, -1.0)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| gelu_parts(v).0, Op::Gelu(x))
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    fn check_no_nan(&self, op: &'static str, x: NodeId) -> Result<()> {
        if self.data(x).iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric(format!("{op}: NaN input")));
        }
        Ok(())
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2("softmax_rows", x)?;
        self.check_no_nan("softmax_rows", x)?;
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            rg,
            Op::SoftmaxRows(x),
        ))
    }

    /// Stable `log Σ_j exp(x_ij)` per row, giving a length-`m` vector.
    pub fn logsumexp_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2("logsumexp_rows", x)?;
        self.check_no_nan("logsumexp_rows", x)?;
        let data = self
            .data(x)
            .chunks(n)
            .map(|row| {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
            })
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![m],
                data,
            },
            rg,
            Op::LogSumExpRows(x),
        ))
    }

    /// Per-row normalization to zero mean and unit (biased) variance, then
    /// `gain * x̂ + bias`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (m, n) = self.dims2("layer_norm", x)?;
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(Error::shape("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for (i, row) in self.data(x).chunks(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Inverted dropout. Element `i` survives iff
    /// `unit(mix(mix(seed, tag), i)) >= p`; survivors are scaled by `1/(1-p)`.
    /// With `p == 0` the input node is returned unchanged.
    pub fn dropout(&mut self, x: NodeId, p: f64, seed: u64, tag: u64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(self.value(x).numel(), p, seed, tag);
        let data = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data }, rg, Op::Dropout { x, mask }))
    }

    /// Gathers rows of a matrix (embedding lookup when `x` is a table).
    pub fn rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (m, n) = self.dims2("rows", x)?;
        if idx.is_empty() {
            return Err(Error::Usage("rows: empty index list".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::shape("rows", self.shape(x), &[bad]));
        }
        let src = self.data(x);
        let data = idx
            .iter()
            .flat_map(|&i| src[i * n..(i + 1) * n].iter().copied())
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![idx.len(), n],
                data,
            },
            rg,
            Op::Rows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_rows: no inputs".into()));
        }
        let (_, n) = self.dims2("concat_rows", parts[0])?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, n2) = self.dims2("concat_rows", p)?;
            if n2 != n {
                return Err(Error::shape(
                    "concat_rows",
                    self.shape(parts[0]),
                    self.shape(p),
                ));
            }
            rows += m;
            data.extend_from_slice(self.data(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor {
                shape: vec![rows, n],
                data,
            },
            rg,
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.dims2("slice_cols", x)?;
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, len]));
        }
        let data = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![m, len],
                data,
            },
            rg,
            Op::SliceCols { x, start },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_cols: no inputs".into()));
        }
        let (m, _) = self.dims2("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (m2, n) = self.dims2("concat_cols", p)?;
            if m2 != m {
                return Err(Error::shape(
                    "concat_cols",
                    self.shape(parts[0]),
                    self.shape(p),
                ));
            }
            widths.push(n);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor {
                shape: vec![m, total],
                data,
            },
            rg,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2("transpose", x)?;
        let data = transpose_raw(self.data(x), m, n);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![n, m],
                data,
            },
            rg,
            Op::Transpose(x),
        ))
    }

    /// Scales every row to unit Euclidean norm. Zero rows are rejected.
    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2("normalize_rows", x)?;
        let mut norms = Vec::with_capacity(m);
        let mut data = self.data(x).to_vec();
        for (i, row) in data.chunks_mut(n).enumerate() {
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nrm == 0.0 || !nrm.is_finite() {
                return Err(Error::Degenerate(format!(
                    "row {i} has norm {nrm}; cosine similarity is undefined"
                )));
            }
            row.iter_mut().for_each(|v| *v /= nrm);
            norms.push(nrm);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            rg,
            Op::NormalizeRows { x, norms },
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let data = self.data(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            rg,
            Op::Reshape(x),
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Mean(x))
    }

    /// Gathers `x[i, j]` for each `(i, j)` into a vector.
    pub fn pick(&mut self, x: NodeId, idx: &[(usize, usize)]) -> Result<NodeId> {
        let (m, n) = self.dims2("pick", x)?;
        if idx.is_empty() {
            return Err(Error::Usage("pick: empty index list".into()));
        }
        if let Some(&(i, j)) = idx.iter().find(|&&(i, j)| i >= m || j >= n) {
            return Err(Error::shape("pick", self.shape(x), &[i, j]));
        }
        let src = self.data(x);
        let data = idx.iter().map(|&(i, j)| src[i * n + j]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![idx.len()],
                data,
            },
            rg,
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Cosine similarity of two equally long vectors, as a scalar node.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 1 || sa != sb {
            return Err(Error::shape("cosine", &sa, &sb));
        }
        let a2 = self.reshape(a, &[1, sa[0]])?;
        let b2 = self.reshape(b, &[1, sb[0]])?;
        let na = self.normalize_rows(a2)?;
        let nb = self.normalize_rows(b2)?;
        let prod = self.mul(na, nb)?;
        Ok(self.sum(prod))
    }

    /// `S[i, j] = cos(a_i, b_j)` for row sets `a[m×d]`, `b[n×d]`.
    pub fn cosine_matrix(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let na = self.normalize_rows(a)?;
        let nb = self.normalize_rows(b)?;
        let nbt = self.transpose(nb)?;
        self.matmul(na, nbt)
    }

    /// Propagates gradients from a scalar root to every requires-grad
    /// ancestor. Calling it twice without [`Graph::zero_grad`] is an error.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward already ran on this graph; call zero_grad first".into(),
            ));
        }
        if !self.value(root).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        self.backward_done = true;
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (id, c) in contribs {
                if !self.nodes[id.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[id.0].grad {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, v)| *a += v),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let want = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if want(*a) {
                    let bt = transpose_raw(self.data(*b), k, n);
                    res.push((*a, matmul_raw(g, &bt, m, n, k)));
                }
                if want(*b) {
                    let at = transpose_raw(self.data(*a), m, k);
                    res.push((*b, matmul_raw(&at, g, k, m, n)));
                }
            }
            Op::Add(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                if want(*a) {
                    res.push((*a, g.iter().zip(db).map(|(x, y)| x * y).collect()));
                }
                if want(*b) {
                    res.push((*b, g.iter().zip(da).map(|(x, y)| x * y).collect()));
                }
            }
            Op::AddRow(a, bias) => {
                res.push((*a, g.to_vec()));
                if want(*bias) {
                    let n = self.shape(*bias)[0];
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    res.push((*bias, db));
                }
            }
            Op::Scale(x, c) => res.push((*x, g.iter().map(|v| v * c).collect())),
            Op::Tanh(x) => res.push((
                *x,
                g.iter()
                    .zip(out)
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect(),
            )),
            Op::Gelu(x) => res.push((
                *x,
                g.iter()
                    .zip(self.data(*x))
                    .map(|(gv, &xv)| gv * gelu_parts(xv).1)
                    .collect(),
            )),
            Op::Relu(x) => res.push((
                *x,
                g.iter()
                    .zip(self.data(*x))
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect(),
            )),
            Op::SoftmaxRows(x) => {
                let n = self.shape(*x)[1];
                let mut dx = vec![0.0; g.len()];
                for ((drow, grow), yrow) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                res.push((*x, dx));
            }
            Op::LogSumExpRows(x) => {
                let n = self.shape(*x)[1];
                let xd = self.data(*x);
                let mut dx = vec![0.0; xd.len()];
                for (r, (drow, xrow)) in dx.chunks_mut(n).zip(xd.chunks(n)).enumerate() {
                    for j in 0..n {
                        drow[j] = g[r] * (xrow[j] - out[r]).exp();
                    }
                }
                res.push((*x, dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = self.shape(*gain)[0];
                let gv = self.data(*gain);
                if want(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..inv_std.len() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let m1 = dxhat.iter().sum::<f64>() / n as f64;
                        let m2 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            dx[r * n + j] = inv_std[r] * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                    res.push((*x, dx));
                }
                if want(*gain) || want(*bias) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += grow[j] * hrow[j];
                            db[j] += grow[j];
                        }
                    }
                    res.push((*gain, dg));
                    res.push((*bias, db));
                }
            }
            Op::Dropout { x, mask } => {
                res.push((*x, g.iter().zip(mask).map(|(a, b)| a * b).collect()))
            }
            Op::Rows { x, idx } => {
                let n = self.shape(*x)[1];
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..n {
                        dx[src * n + j] += g[r * n + j];
                    }
                }
                res.push((*x, dx));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    res.push((p, g[off..off + len].to_vec()));
                    off += len;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let w = g.len() / m;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                res.push((*x, dx));
            }
            Op::ConcatCols(parts) => {
                let m = self.shape(parts[0])[0];
                let total = g.len() / m;
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    let mut dp = Vec::with_capacity(m * w);
                    for i in 0..m {
                        dp.extend_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    res.push((p, dp));
                    off += w;
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                res.push((*x, transpose_raw(g, n, m)));
            }
            Op::NormalizeRows { x, norms } => {
                let n = self.shape(*x)[1];
                let mut dx = vec![0.0; g.len()];
                for (r, nrm) in norms.iter().enumerate() {
                    let y = &out[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[r * n + j] = (gr[j] - y[j] * dot) / nrm;
                    }
                }
                res.push((*x, dx));
            }
            Op::Reshape(x) => res.push((*x, g.to_vec())),
            Op::Sum(x) => res.push((*x, vec![g[0]; self.value(*x).numel()])),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                res.push((*x, vec![g[0] / n as f64; n]));
            }
            Op::Pick { x, idx } => {
                let n = self.shape(*x)[1];
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (r, &(i, j)) in idx.iter().enumerate() {
                    dx[i * n + j] += g[r];
                }
                res.push((*x, dx));
            }
        }
        res.retain(|(id, _)| want(*id));
        res
    }
}

/// Multiplicative dropout mask: `0` for dropped elements, `1/(1-p)` otherwise.
pub(crate) fn dropout_mask(n: usize, p: f64, seed: u64, tag: u64) -> Vec<f64> {
    let key = seed::mix(seed, tag);
    let keep = 1.0 / (1.0 - p);
    (0..n as u64)
        .map(|i| {
            if seed::unit(seed::mix(key, i)) >= p {
                keep
            } else {
                0.0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let m = g.constant(mat(&[&[1.5, -2.0], &[0.25, 4.0]]));
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p), g.value(m));

        let a = g.constant(mat(&[&[1.0, 2.0]]));
        let b = g.constant(mat(&[&[3.0], &[4.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);

        let z = g.constant(Tensor::zeros(&[2, 2]));
        let zc = g.matmul(z, m).unwrap();
        assert!(g.value(zc).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(mat(&[
            &[0.0, 0.0, 0.0],
            &[1000.0, 0.0, -3.0],
            &[1.0, 2.0, f64::NEG_INFINITY],
        ]));
        let s = g.softmax_rows(x).unwrap();
        let v = g.value(s);
        for r in 0..3 {
            assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(v.row(0).iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
        assert!((v.row(1)[0] - 1.0).abs() < 1e-15 && v.row(1)[1] < 1e-300);
        let e = std::f64::consts::E;
        assert!((v.row(2)[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((v.row(2)[1] - e / (1.0 + e)).abs() < 1e-15);
        assert_eq!(v.row(2)[2], 0.0);

        let bad = g.constant(mat(&[&[f64::NAN, 0.0]]));
        assert!(matches!(g.softmax_rows(bad), Err(Error::Numeric(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::filled(&[2], 1.0));
        let zeros = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(mat(&[&[3.0, 3.0], &[1.0, -1.0]]));
        let y = g.layer_norm(x, ones, zeros, 1e-12).unwrap();
        assert_eq!(g.value(y).row(0), &[0.0, 0.0]);
        let r1 = g.value(y).row(1);
        assert!((r1[0] - 1.0).abs() < 1e-11 && (r1[1] + 1.0).abs() < 1e-11);

        let z3 = g.constant(Tensor::zeros(&[3]));
        let b3 = g.constant(Tensor::vector(vec![0.5, -1.0, 2.0]));
        let x3 = g.constant(mat(&[&[1.0, 5.0, -2.0]]));
        let y3 = g.layer_norm(x3, z3, b3, 1e-12).unwrap();
        assert_eq!(g.value(y3).row(0), &[0.5, -1.0, 2.0]);

        assert!(g.layer_norm(x3, ones, zeros, 1e-12).is_err());
    }

    #[test]
    fn dropout_contract() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[100, 100], 1.0));
        assert_eq!(g.dropout(x, 0.0, 1, 2).unwrap(), x);
        let a = g.dropout(x, 0.1, 9, 0).unwrap();
        let b = g.dropout(x, 0.1, 9, 0).unwrap();
        let c = g.dropout(x, 0.1, 9, 1).unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert_ne!(g.value(a), g.value(c));
        let kept = g.value(a).data().iter().filter(|&&v| v != 0.0).count() as f64 / 10_000.0;
        assert!((kept - 0.9).abs() <= 0.01, "kept fraction {kept}");
        let scaled = g
            .value(a)
            .data()
            .iter()
            .find(|&&v| v != 0.0)
            .copied()
            .unwrap();
        assert!((scaled - 1.0 / 0.9).abs() < 1e-15);
        assert!(matches!(g.dropout(x, 1.0, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn cosine_examples_and_projection_gradient() {
        let mut g = Graph::new();
        let v = g.param(Tensor::vector(vec![0.6, 0.8]));
        let w = g.constant(Tensor::vector(vec![0.6, 0.8]));
        let nv = g.constant(Tensor::vector(vec![-0.6, -0.8]));
        let c1 = g.cosine(v, w).unwrap();
        let c2 = g.cosine(w, nv).unwrap();
        assert!((g.value(c1).item() - 1.0).abs() < 1e-15);
        assert!((g.value(c2).item() + 1.0).abs() < 1e-15);
        g.backward(c1).unwrap();
        let grad = g.grad(v).unwrap();
        let dot = grad[0] * 0.6 + grad[1] * 0.8;
        assert!(dot.abs() < 1e-15, "gradient not orthogonal: {grad:?}");

        let z = g.constant(Tensor::vector(vec![0.0, 0.0]));
        assert!(matches!(g.cosine(z, w), Err(Error::Degenerate(_))));
    }

    #[test]
    fn sum_backward_is_ones_and_double_backward_errors() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
        assert!(matches!(g.backward(s), Err(Error::Usage(_))));
        g.zero_grad();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_never_receive_gradients() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::filled(&[2, 2], 0.5));
        let x = g.param(Tensor::filled(&[1, 2], 1.0));
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(w).is_none());
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }
}

//! Define-by-run tape: forward ops append nodes, `backward` replays them in
//! reverse topological order (which is just reverse insertion order, since
//! every node's inputs are created before it).

use super::{Real, Tensor, TensorError};

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul,
    Add,
    Sub,
    Mul,
    BroadcastAddRow,
    Relu,
    Gelu,
    Sigmoid,
    SoftmaxLastDim,
    LayerNormLastDim { eps: Real },
    MeanLastDim,
    MaxLastDim { argmax: Vec<usize> },
    ConcatLastDim { widths: Vec<usize> },
    Slice { start: usize, stride: usize },
    Reshape,
    TransposeLast2,
    BceWithLogits,
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    values: Vec<Real>,
    requires_grad: bool,
    grad: Option<Vec<Real>>,
}

/// Append-only record of one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    strict: bool,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Strict graphs reject non-finite values at leaves and op outputs.
    pub fn strict() -> Self {
        Graph { strict: true, ..Graph::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[Real] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient of the last backward pass w.r.t. `v`, if one was computed.
    pub fn grad(&self, v: Var) -> Option<&[Real]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Snapshot a node as a standalone tensor (values only).
    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].values.clone())
            .expect("node shape is consistent")
    }

    fn push(
        &mut self,
        op: Op,
        inputs: Vec<usize>,
        shape: Vec<usize>,
        values: Vec<Real>,
        requires_grad: bool,
    ) -> Result<Var, TensorError> {
        if self.strict && !values.iter().all(|x| x.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name(&op) });
        }
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node { op, inputs, shape, values, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers an external tensor as a graph leaf, copying its values.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var, TensorError> {
        self.push(Op::Leaf, vec![], t.shape().to_vec(), t.values().to_vec(), t.requires_grad())
    }

    /// Non-differentiable input data.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<Real>) -> Result<Var, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(TensorError::BadLength { expected, actual: values.len(), shape });
        }
        self.push(Op::Constant, vec![], shape, values, false)
    }

    pub fn constant_full(&mut self, shape: Vec<usize>, value: Real) -> Result<Var, TensorError> {
        let n = shape.iter().product();
        self.push(Op::Constant, vec![], shape, vec![value; n], false)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ----- arithmetic -----

    /// `a [m, k] @ b [k, n] -> [m, n]`. Rank-2 operands only.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", "[m,k] x [k,n]", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let values = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Op::MatMul, vec![a.0, b.0], vec![m, n], values, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise_binary("add", Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise_binary("sub", Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise_binary("mul", Op::Mul, a, b, |x, y| x * y)
    }

    fn elementwise_binary(
        &mut self,
        name: &'static str,
        op: Op,
        a: Var,
        b: Var,
        f: impl Fn(Real, Real) -> Real,
    ) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, "identical shapes", &[self.shape(a), self.shape(b)]));
        }
        let values: Vec<Real> =
            self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(op, vec![a.0, b.0], shape, values, rg)
    }

    /// Adds a row vector `[d]` (or `[1, d]`) to every row of `x [m, d]`.
    pub fn broadcast_add_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        let d = *sx.last().unwrap_or(&0);
        let row_ok = sr == [d] || sr == [1, d];
        if sx.len() != 2 || !row_ok {
            return Err(shape_err("broadcast_add_row", "[m,d] + [d]", &[sx, sr]));
        }
        let m = sx[0];
        let mut values = self.value(x).to_vec();
        let rv = self.value(row);
        for i in 0..m {
            for j in 0..d {
                values[i * d + j] += rv[j];
            }
        }
        let shape = sx.to_vec();
        let rg = self.rg(&[x, row]);
        self.push(Op::BroadcastAddRow, vec![x.0, row.0], shape, values, rg)
    }

    // ----- activations -----

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.elementwise_unary(Op::Relu, x, |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.elementwise_unary(Op::Sigmoid, x, sigmoid_stable)
    }

    /// Gelu, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.elementwise_unary(Op::Gelu, x, gelu_approx)
    }

    fn elementwise_unary(
        &mut self,
        op: Op,
        x: Var,
        f: impl Fn(Real) -> Real,
    ) -> Result<Var, TensorError> {
        let values: Vec<Real> = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(op, vec![x.0], shape, values, rg)
    }

    // ----- row-wise ops over the last dimension -----

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var, TensorError> {
        let d = self.lastdim("softmax_lastdim", x)?;
        let mut values = self.value(x).to_vec();
        for row in values.chunks_mut(d) {
            let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Op::SoftmaxLastDim, vec![x.0], shape, values, rg)
    }

    /// Normalizes each row to zero mean / unit variance. Affine terms are the
    /// caller's business (see `nn::LayerNorm`).
    pub fn layernorm_lastdim(&mut self, x: Var, eps: Real) -> Result<Var, TensorError> {
        let d = self.lastdim("layernorm_lastdim", x)?;
        let mut values = self.value(x).to_vec();
        for row in values.chunks_mut(d) {
            let mean = row.iter().sum::<Real>() / d as Real;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / d as Real;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Op::LayerNormLastDim { eps }, vec![x.0], shape, values, rg)
    }

    pub fn mean_lastdim(&mut self, x: Var) -> Result<Var, TensorError> {
        let d = self.lastdim("mean_lastdim", x)?;
        let values: Vec<Real> =
            self.value(x).chunks(d).map(|row| row.iter().sum::<Real>() / d as Real).collect();
        let shape = reduce_shape(self.shape(x));
        let rg = self.rg(&[x]);
        self.push(Op::MeanLastDim, vec![x.0], shape, values, rg)
    }

    /// Row-wise max; ties resolve to the first maximal entry.
    pub fn max_lastdim(&mut self, x: Var) -> Result<Var, TensorError> {
        let d = self.lastdim("max_lastdim", x)?;
        let mut values = Vec::with_capacity(self.value(x).len() / d);
        let mut argmax = Vec::with_capacity(values.capacity());
        for row in self.value(x).chunks(d) {
            let (mut bi, mut bv) = (0usize, row[0]);
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > bv {
                    bi = j;
                    bv = v;
                }
            }
            values.push(bv);
            argmax.push(bi);
        }
        let shape = reduce_shape(self.shape(x));
        let rg = self.rg(&[x]);
        self.push(Op::MaxLastDim { argmax }, vec![x.0], shape, values, rg)
    }

    fn lastdim(&self, op: &'static str, x: Var) -> Result<usize, TensorError> {
        match self.shape(x).last() {
            Some(&d) if d > 0 => Ok(d),
            _ => Err(shape_err(op, "rank >= 1 with nonempty last dim", &[self.shape(x)])),
        }
    }

    // ----- shape ops -----

    /// Concatenates along the last dimension; leading dimensions must agree.
    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::EmptyGraph)?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        let rank = self.shape(first).len();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != rank || &s[..rank - 1] != lead {
                return Err(shape_err(
                    "concat_lastdim",
                    "equal leading dims",
                    &[self.shape(first), s],
                ));
            }
            widths.push(s[rank - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut values = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for r in 0..rows {
                values[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = self.rg(parts);
        self.push(
            Op::ConcatLastDim { widths },
            parts.iter().map(|v| v.0).collect(),
            shape,
            values,
            rg,
        )
    }

    /// Slice along the first axis: rows `start..end` of a matrix, or elements
    /// `start..end` of a vector.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let s = self.shape(x);
        if s.is_empty() || start >= end || end > s[0] {
            return Err(shape_err("slice", "0 <= start < end <= dim0", &[s]));
        }
        let stride: usize = s[1..].iter().product();
        let values = self.value(x)[start * stride..end * stride].to_vec();
        let mut shape = s.to_vec();
        shape[0] = end - start;
        let rg = self.rg(&[x]);
        self.push(Op::Slice { start, stride }, vec![x.0], shape, values, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(shape_err("reshape", "same element count", &[self.shape(x), &shape]));
        }
        let values = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Op::Reshape, vec![x.0], shape, values, rg)
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(shape_err("transpose_last2", "rank 2", &[s]));
        }
        let (m, n) = (s[0], s[1]);
        let xv = self.value(x);
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                values[j * m + i] = xv[i * n + j];
            }
        }
        let rg = self.rg(&[x]);
        self.push(Op::TransposeLast2, vec![x.0], vec![n, m], values, rg)
    }

    // ----- loss -----

    /// Numerically stable binary cross-entropy on logits, averaged over all
    /// elements. `labels` must not require grad.
    pub fn bce_with_logits(&mut self, logits: Var, labels: Var) -> Result<Var, TensorError> {
        if self.shape(logits) != self.shape(labels) {
            return Err(shape_err(
                "bce_with_logits",
                "identical shapes",
                &[self.shape(logits), self.shape(labels)],
            ));
        }
        let n = self.value(logits).len() as Real;
        let loss = self
            .value(logits)
            .iter()
            .zip(self.value(labels))
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<Real>()
            / n;
        let rg = self.rg(&[logits]);
        self.push(Op::BceWithLogits, vec![logits.0, labels.0], vec![1], vec![loss], rg)
    }

    // ----- composite helpers (built from the ops above) -----

    /// Multiplies every element by a compile-time-known scalar.
    pub fn scale(&mut self, x: Var, c: Real) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let k = self.constant_full(shape, c)?;
        self.mul(x, k)
    }

    /// tanh via `2*sigmoid(2x) - 1`.
    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        let x2 = self.scale(x, 2.0)?;
        let s = self.sigmoid(x2)?;
        let s2 = self.scale(s, 2.0)?;
        let shape = self.shape(x).to_vec();
        let one = self.constant_full(shape, 1.0)?;
        self.sub(s2, one)
    }

    // ----- backward -----

    /// Reverse pass from a scalar `loss`. Populates gradients on every node
    /// that requires grad; read them back with [`Graph::grad`]. Each graph
    /// can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyGraph);
        }
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        if self.nodes[loss.0].values.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let op = self.nodes[i].op.clone();
            let inputs = self.nodes[i].inputs.clone();
            match op {
                Op::Leaf | Op::Constant => {
                    // Keep the gradient available on leaves.
                    self.nodes[i].grad = Some(g);
                    continue;
                }
                Op::MatMul => self.backward_matmul(&g, i, &inputs),
                Op::Add => {
                    self.accum(inputs[0], &g);
                    self.accum(inputs[1], &g);
                }
                Op::Sub => {
                    self.accum(inputs[0], &g);
                    let neg: Vec<Real> = g.iter().map(|v| -v).collect();
                    self.accum(inputs[1], &neg);
                }
                Op::Mul => {
                    let ga: Vec<Real> =
                        g.iter().zip(&self.nodes[inputs[1]].values).map(|(gi, b)| gi * b).collect();
                    let gb: Vec<Real> =
                        g.iter().zip(&self.nodes[inputs[0]].values).map(|(gi, a)| gi * a).collect();
                    self.accum(inputs[0], &ga);
                    self.accum(inputs[1], &gb);
                }
                Op::BroadcastAddRow => {
                    let d = *self.nodes[i].shape.last().unwrap();
                    let mut grow = vec![0.0; d];
                    for row in g.chunks(d) {
                        for (acc, v) in grow.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accum(inputs[0], &g);
                    self.accum(inputs[1], &grow);
                }
                Op::Relu => {
                    let gx: Vec<Real> = g
                        .iter()
                        .zip(&self.nodes[inputs[0]].values)
                        .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                        .collect();
                    self.accum(inputs[0], &gx);
                }
                Op::Sigmoid => {
                    let gx: Vec<Real> = g
                        .iter()
                        .zip(&self.nodes[i].values)
                        .map(|(gi, &y)| gi * y * (1.0 - y))
                        .collect();
                    self.accum(inputs[0], &gx);
                }
                Op::Gelu => {
                    let gx: Vec<Real> = g
                        .iter()
                        .zip(&self.nodes[inputs[0]].values)
                        .map(|(gi, &x)| gi * gelu_approx_grad(x))
                        .collect();
                    self.accum(inputs[0], &gx);
                }
                Op::SoftmaxLastDim => {
                    let d = *self.nodes[i].shape.last().unwrap();
                    let y = &self.nodes[i].values;
                    let mut gx = vec![0.0; y.len()];
                    for (r, grow) in g.chunks(d).enumerate() {
                        let yrow = &y[r * d..(r + 1) * d];
                        let dot: Real = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    self.accum(inputs[0], &gx);
                }
                Op::LayerNormLastDim { eps } => {
                    let d = *self.nodes[i].shape.last().unwrap();
                    let x = &self.nodes[inputs[0]].values;
                    let y = &self.nodes[i].values;
                    let mut gx = vec![0.0; x.len()];
                    for r in 0..x.len() / d {
                        let xr = &x[r * d..(r + 1) * d];
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mean = xr.iter().sum::<Real>() / d as Real;
                        let var =
                            xr.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / d as Real;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gmean = gr.iter().sum::<Real>() / d as Real;
                        let gdoty = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<Real>() / d as Real;
                        for j in 0..d {
                            gx[r * d + j] = inv * (gr[j] - gmean - yr[j] * gdoty);
                        }
                    }
                    self.accum(inputs[0], &gx);
                }
                Op::MeanLastDim => {
                    let d = *self.nodes[inputs[0]].shape.last().unwrap();
                    let mut gx = vec![0.0; self.nodes[inputs[0]].values.len()];
                    for (r, &gr) in g.iter().enumerate() {
                        for j in 0..d {
                            gx[r * d + j] = gr / d as Real;
                        }
                    }
                    self.accum(inputs[0], &gx);
                }
                Op::MaxLastDim { argmax } => {
                    let d = *self.nodes[inputs[0]].shape.last().unwrap();
                    let mut gx = vec![0.0; self.nodes[inputs[0]].values.len()];
                    for (r, &gr) in g.iter().enumerate() {
                        gx[r * d + argmax[r]] = gr;
                    }
                    self.accum(inputs[0], &gx);
                }
                Op::ConcatLastDim { widths } => {
                    let total: usize = widths.iter().sum();
                    let rows = g.len() / total;
                    let mut offset = 0;
                    for (idx, &w) in widths.iter().enumerate() {
                        let mut gp = vec![0.0; rows * w];
                        for r in 0..rows {
                            gp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accum(inputs[idx], &gp);
                        offset += w;
                    }
                }
                Op::Slice { start, stride } => {
                    let mut gx = vec![0.0; self.nodes[inputs[0]].values.len()];
                    gx[start * stride..start * stride + g.len()].copy_from_slice(&g);
                    self.accum(inputs[0], &gx);
                }
                Op::Reshape => self.accum(inputs[0], &g),
                Op::TransposeLast2 => {
                    let [n, m] = self.nodes[i].shape[..] else { unreachable!() };
                    let mut gx = vec![0.0; g.len()];
                    for j in 0..n {
                        for k in 0..m {
                            gx[k * n + j] = g[j * m + k];
                        }
                    }
                    self.accum(inputs[0], &gx);
                }
                Op::BceWithLogits => {
                    let logits = &self.nodes[inputs[0]].values;
                    let labels = &self.nodes[inputs[1]].values;
                    let n = logits.len() as Real;
                    let gx: Vec<Real> = logits
                        .iter()
                        .zip(labels)
                        .map(|(&z, &y)| g[0] * (sigmoid_stable(z) - y) / n)
                        .collect();
                    self.accum(inputs[0], &gx);
                }
            }
        }
        Ok(())
    }

    fn backward_matmul(&mut self, g: &[Real], node: usize, inputs: &[usize]) {
        let (a, b) = (inputs[0], inputs[1]);
        let m = self.nodes[node].shape[0];
        let n = self.nodes[node].shape[1];
        let k = self.nodes[a].shape[1];
        // dA = dC * B^T
        let bv = &self.nodes[b].values;
        let mut ga = vec![0.0; m * k];
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
        // dB = A^T * dC
        let av = &self.nodes[a].values;
        let mut gb = vec![0.0; k * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for j in 0..n {
                    gb[p * n + j] += aip * g[i * n + j];
                }
            }
        }
        self.accum(a, &ga);
        self.accum(b, &gb);
    }

    fn accum(&mut self, idx: usize, delta: &[Real]) {
        let node = &mut self.nodes[idx];
        if !node.requires_grad {
            return;
        }
        let g = node.grad.get_or_insert_with(|| vec![0.0; node.values.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }
}

fn reduce_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() <= 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

fn shape_err(op: &'static str, expected: &str, actual: &[&[usize]]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        expected: expected.to_string(),
        actual: actual.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(" and "),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Constant => "constant",
        Op::MatMul => "matmul",
        Op::Add => "add",
        Op::Sub => "sub",
        Op::Mul => "mul",
        Op::BroadcastAddRow => "broadcast_add_row",
        Op::Relu => "relu",
        Op::Gelu => "gelu",
        Op::Sigmoid => "sigmoid",
        Op::SoftmaxLastDim => "softmax_lastdim",
        Op::LayerNormLastDim { .. } => "layernorm_lastdim",
        Op::MeanLastDim => "mean_lastdim",
        Op::MaxLastDim { .. } => "max_lastdim",
        Op::ConcatLastDim { .. } => "concat_lastdim",
        Op::Slice { .. } => "slice",
        Op::Reshape => "reshape",
        Op::TransposeLast2 => "transpose_last2",
        Op::BceWithLogits => "bce_with_logits",
    }
}

pub(crate) fn matmul_raw(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

/// Numerically stable logistic function.
pub fn sigmoid(z: Real) -> Real {
    sigmoid_stable(z)
}

pub(crate) fn sigmoid_stable(z: Real) -> Real {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn gelu_approx(x: Real) -> Real {
    const C: Real = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: Real = 0.044_715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_approx_grad(x: Real) -> Real {
    const C: Real = 0.797_884_560_802_865_4;
    const A: Real = 0.044_715;
    let t = (C * (x + A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, shape: Vec<usize>, values: Vec<Real>) -> Var {
        let t = Tensor::param(shape, values).unwrap();
        g.leaf(&t).unwrap()
    }

    #[test]
    fn softmax_of_equal_entries_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(vec![3], vec![0.0, 0.0, 0.0]).unwrap();
        let y = g.softmax_lastdim(x).unwrap();
        for &v in g.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = g.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = g.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let mut g = Graph::new();
        let z = g.constant(vec![1], vec![0.0]).unwrap();
        let y = g.constant(vec![1], vec![1.0]).unwrap();
        let l = g.bce_with_logits(z, y).unwrap();
        assert!((g.value(l)[0] - (2.0 as Real).ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_is_nonnegative_and_stable_at_huge_logits() {
        for &z in &[-1e4 as Real, -100.0, 0.0, 100.0, 1e4] {
            for &y in &[0.0 as Real, 1.0] {
                let mut g = Graph::new();
                let zv = g.constant(vec![1], vec![z]).unwrap();
                let yv = g.constant(vec![1], vec![y]).unwrap();
                let l = g.bce_with_logits(zv, yv).unwrap();
                let v = g.value(l)[0];
                assert!(v.is_finite(), "bce not finite at z={z}, y={y}");
                assert!(v >= 0.0, "bce negative at z={z}, y={y}");
            }
        }
    }

    #[test]
    fn grad_of_sum_of_squares() {
        // loss = sum(x * x), dl/dx = 2x
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![3], vec![1.0, 2.0, 3.0]);
        let sq = g.mul(x, x).unwrap();
        let m = g.mean_lastdim(sq).unwrap();
        let loss = g.scale(m, 3.0).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        assert_eq!(grad, &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn grad_of_sigmoid_dot() {
        // loss = sigmoid(w * x), w = 0, x = 5 -> dloss/dw = 5 * 0.25 = 1.25
        let mut g = Graph::new();
        let w = leaf(&mut g, vec![1, 1], vec![0.0]);
        let x = g.constant(vec![1, 1], vec![5.0]).unwrap();
        let wx = g.matmul(w, x).unwrap();
        let s = g.sigmoid(wx).unwrap();
        let loss = g.reshape(s, vec![1]).unwrap();
        g.backward(loss).unwrap();
        assert!((g.grad(w).unwrap()[0] - 1.25).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut g = Graph::new();
        let x = g
            .constant(vec![3, 4], (0..12).map(|i| (i as Real) * 0.3 - 1.7).collect())
            .unwrap();
        let y = g.softmax_lastdim(x).unwrap();
        for row in g.value(y).chunks(4) {
            let sum: Real = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn layernorm_rows_are_standardized() {
        let mut g = Graph::new();
        let vals: Vec<Real> = (0..20).map(|i| ((i * 37 % 11) as Real) * 0.71 - 2.0).collect();
        let x = g.constant(vec![4, 5], vals).unwrap();
        let y = g.layernorm_lastdim(x, 1e-8).unwrap();
        for row in g.value(y).chunks(5) {
            let mean: Real = row.iter().sum::<Real>() / 5.0;
            let var: Real = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / 5.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2], vec![1.0, 2.0]);
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1], vec![2.0]);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::GraphConsumed)));
    }

    #[test]
    fn backward_on_empty_graph_is_an_error() {
        let mut g = Graph::new();
        assert!(matches!(g.backward(Var(0)), Err(TensorError::EmptyGraph)));
    }

    #[test]
    fn strict_mode_rejects_non_finite_input() {
        let mut g = Graph::strict();
        let err = g.constant(vec![2], vec![1.0, Real::NAN]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    #[test]
    fn forward_values_are_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let x = g.constant(vec![2, 3], vec![0.3, -1.2, 2.0, 0.7, 0.0, -0.5]).unwrap();
            let s = g.softmax_lastdim(x).unwrap();
            let n = g.layernorm_lastdim(s, 1e-8).unwrap();
            let e = g.gelu(n).unwrap();
            g.value(e).to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "bit-identical forward values expected");
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut g = Graph::new();
        let a = g.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = g.constant(vec![2, 1], vec![5.0, 6.0]).unwrap();
        let c = g.concat_lastdim(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[2, 3]);
        assert_eq!(g.value(c), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let top = g.slice(c, 0, 1).unwrap();
        assert_eq!(g.value(top), &[1.0, 2.0, 5.0]);
    }

    #[test]
    fn mul_broadcast_row_and_transpose_shapes() {
        let mut g = Graph::new();
        let x = g.constant(vec![2, 3], vec![1.0; 6]).unwrap();
        let row = g.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = g.broadcast_add_row(x, row).unwrap();
        assert_eq!(g.value(y), &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
        let t = g.transpose_last2(y).unwrap();
        assert_eq!(g.shape(t), &[3, 2]);
        assert_eq!(g.value(t), &[2.0, 2.0, 3.0, 3.0, 4.0, 4.0]);
    }
}

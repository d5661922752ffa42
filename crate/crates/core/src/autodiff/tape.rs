use super::array::DiffArray;
use super::kernels;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous block of rows forming one causal attention sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Log(Var),
    Exp(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Softmax { input: Var, temperature: f64, cols: usize },
    LogSoftmax { input: Var, temperature: f64, cols: usize },
    Gather { input: Var, indices: Vec<usize> },
    GatherRows { input: Var, rows: Vec<usize>, cols: usize },
    Concat(Vec<Var>),
    PairwiseDiff(Var),
    LayerNorm { input: Var, gamma: Var, beta: Var, normed: Vec<f64>, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, segments: Vec<Segment>, heads: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    data: DiffArray,
    op: Op,
}

/// Reverse-mode tape over dense arrays.
///
/// Operations are appended in evaluation order, so every input of a node has a
/// smaller index than the node itself and a reverse sweep visits each recorded
/// operation once. Gradients are only propagated through nodes that (transitively)
/// depend on a leaf created with `requires_grad`.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite input to {what}")))
    }
}

fn accumulate<'a>(adj: &'a mut [Option<Vec<f64>>], var: Var, len: usize) -> &'a mut Vec<f64> {
    adj[var.0].get_or_insert_with(|| vec![0.0; len])
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

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> Result<Var> {
        let data = DiffArray::new(shape, values)?.with_requires_grad(requires_grad);
        self.nodes.push(Node { data, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, var: Var) -> &DiffArray {
        &self.nodes[var.0].data
    }

    fn tracks(&self, var: Var) -> bool {
        self.nodes[var.0].data.requires_grad()
    }

    /// Records a leaf holding a copy of `array` (its `requires_grad` flag is kept).
    pub fn leaf(&mut self, array: &DiffArray) -> Var {
        let data = DiffArray::new(array.shape().to_vec(), array.values().to_vec())
            .expect("DiffArray invariants already hold")
            .with_requires_grad(array.requires_grad());
        self.nodes.push(Node { data, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that takes ownership of `array`.
    pub fn leaf_owned(&mut self, array: DiffArray) -> Var {
        let requires_grad = array.requires_grad();
        let (shape, values) = array.into_parts();
        let data = DiffArray::new(shape, values)
            .expect("DiffArray invariants already hold")
            .with_requires_grad(requires_grad);
        self.nodes.push(Node { data, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        self.push(shape, values, false, Op::Leaf)
    }

    pub fn variable(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        self.push(shape, values, true, Op::Leaf)
    }

    /// Constant copy of `var`: gradients do not flow back through the result.
    pub fn detach(&mut self, var: Var) -> Var {
        let (shape, values) = {
            let n = self.node(var);
            (n.shape().to_vec(), n.values().to_vec())
        };
        self.push(shape, values, false, Op::Leaf).expect("shape already valid")
    }

    pub fn value(&self, var: Var) -> &[f64] {
        self.node(var).values()
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.node(var).shape()
    }

    pub fn array(&self, var: Var) -> &DiffArray {
        self.node(var)
    }

    /// Value of a scalar node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.node(var).values()[0]
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.tracks(var)
    }

    /// Accumulated gradient of `var`, if any backward pass reached it.
    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        self.node(var).grad()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.data.zero_grad();
        }
    }

    fn dims2(&self, var: Var, what: &str) -> Result<(usize, usize)> {
        match *self.shape(var) {
            [r, c] => Ok((r, c)),
            [c] => Ok((1, c)),
            ref s => Err(Error::Dimension(format!("{what} expects a matrix, got shape {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(Error::Dimension(format!(
                "matmul of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.tracks(a) || self.tracks(b);
        self.push(vec![m, n], out, rg, Op::MatMul(a, b))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.tracks(a) || self.tracks(b);
        self.push(self.shape(a).to_vec(), out, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `a [m×n] + bias [n]`, broadcasting the bias over rows.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_row_bias")?;
        if self.node(bias).numel() != n {
            return Err(Error::Dimension(format!(
                "bias of {} values for rows of width {n}",
                self.node(bias).numel()
            )));
        }
        let b = self.value(bias);
        let mut out = self.value(a).to_vec();
        for r in 0..m {
            for (o, bv) in out[r * n..(r + 1) * n].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.tracks(a) || self.tracks(bias);
        self.push(self.shape(a).to_vec(), out, rg, Op::AddRowBias(a, bias))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|v| v * factor).collect();
        self.push(self.shape(a).to_vec(), out, self.tracks(a), Op::Scale(a, factor))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(a).iter().map(|&v| f(v)).collect();
        self.push(self.shape(a).to_vec(), out, self.tracks(a), op)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, kernels::gelu, Op::Gelu(a))
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(v) = self.value(a).iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Numeric(format!("log of non-positive value {v}")));
        }
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// `max(a, floor)`; the gradient passes only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary(a, |v| v.max(floor), Op::ClampMin(a, floor))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], self.tracks(a), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a).numel() as f64;
        let s = self.value(a).iter().sum::<f64>() / n;
        self.push(vec![1], vec![s], self.tracks(a), Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let values = self.value(a).to_vec();
        self.push(shape, values, self.tracks(a), Op::Reshape(a))
    }

    fn softmax_like(&mut self, z: Var, temperature: f64, log: bool) -> Result<Var> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Contract(format!("temperature must be positive, got {temperature}")));
        }
        check_finite(self.value(z), "softmax")?;
        let (rows, cols) = self.dims2(z, "softmax")?;
        let input = self.value(z);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &input[r * cols..(r + 1) * cols];
            if log {
                out.extend(kernels::log_softmax(row, temperature));
            } else {
                out.extend(kernels::softmax(row, temperature));
            }
        }
        let op = if log {
            Op::LogSoftmax { input: z, temperature, cols }
        } else {
            Op::Softmax { input: z, temperature, cols }
        };
        self.push(self.shape(z).to_vec(), out, self.tracks(z), op)
    }

    /// Softmax of `z / temperature`; matrices are normalized row by row.
    pub fn softmax(&mut self, z: Var, temperature: f64) -> Result<Var> {
        self.softmax_like(z, temperature, false)
    }

    /// Row-wise log-softmax of `z / temperature`.
    pub fn log_softmax(&mut self, z: Var, temperature: f64) -> Result<Var> {
        self.softmax_like(z, temperature, true)
    }

    /// Picks flat positions of `a` into a 1-D result.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let len = self.node(a).numel();
        if indices.is_empty() {
            return Err(Error::Contract("gather with no indices".into()));
        }
        if let Some(&index) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::Bounds { index, len });
        }
        let src = self.value(a);
        let out = indices.iter().map(|&i| src[i]).collect();
        let op = Op::Gather { input: a, indices: indices.to_vec() };
        self.push(vec![indices.len()], out, self.tracks(a), op)
    }

    /// Picks whole rows of a matrix; rows may repeat.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, cols) = self.dims2(a, "gather_rows")?;
        if rows.is_empty() {
            return Err(Error::Contract("gather_rows with no rows".into()));
        }
        if let Some(&index) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Bounds { index, len: m });
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        let op = Op::GatherRows { input: a, rows: rows.to_vec(), cols };
        self.push(vec![rows.len(), cols], out, self.tracks(a), op)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_rows of nothing".into()));
        };
        let (_, cols) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(Error::Dimension(format!("concat_rows widths {cols} and {c}")));
            }
            rows += r;
        }
        let (values, rg) = self.concat_values(parts);
        self.push(vec![rows, cols], values, rg, Op::Concat(parts.to_vec()))
    }

    /// Flattens and joins arrays into one 1-D array.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of nothing".into()));
        }
        let (values, rg) = self.concat_values(parts);
        self.push(vec![values.len()], values, rg, Op::Concat(parts.to_vec()))
    }

    fn concat_values(&self, parts: &[Var]) -> (Vec<f64>, bool) {
        let mut values = Vec::new();
        let mut rg = false;
        for &p in parts {
            values.extend_from_slice(self.value(p));
            rg |= self.tracks(p);
        }
        (values, rg)
    }

    /// `[v_m - v_n for m < n]` in lexicographic pair order.
    pub fn pairwise_differences(&mut self, v: Var) -> Result<Var> {
        let values = self.value(v);
        let k = values.len();
        if k < 2 {
            return Err(Error::Contract(format!("pairwise differences need k >= 2, got {k}")));
        }
        let mut out = Vec::with_capacity(k * (k - 1) / 2);
        for m in 0..k {
            for n in m + 1..k {
                out.push(values[m] - values[n]);
            }
        }
        self.push(vec![out.len()], out, self.tracks(v), Op::PairwiseDiff(v))
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "layer_norm")?;
        if self.node(gamma).numel() != cols || self.node(beta).numel() != cols {
            return Err(Error::Dimension(format!("layer_norm affine params must have {cols} values")));
        }
        let input = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut normed = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &input[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let nv = (row[c] - mean) * is;
                normed.push(nv);
                out.push(nv * g[c] + b[c]);
            }
        }
        let rg = self.tracks(x) || self.tracks(gamma) || self.tracks(beta);
        let op = Op::LayerNorm { input: x, gamma, beta, normed, inv_std };
        self.push(self.shape(x).to_vec(), out, rg, op)
    }

    /// Multi-head causal self-attention over `q, k, v [rows × d]`.
    ///
    /// Each segment is an independent sequence; a row attends to itself and to
    /// earlier rows of the same segment only. Heads split `d` evenly.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, segments: &[Segment], heads: usize) -> Result<Var> {
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        let (rows, d) = self.dims2(q, "attention")?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!("width {d} not divisible into {heads} heads")));
        }
        let mut covered = 0;
        for s in segments {
            if s.start != covered || s.len == 0 {
                return Err(Error::Contract("attention segments must tile the rows in order".into()));
            }
            covered += s.len;
        }
        if covered != rows {
            return Err(Error::Contract(format!("segments cover {covered} of {rows} rows")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![0.0; rows * d];
        let mut probs = Vec::with_capacity(segments.iter().map(|s| s.len * s.len * heads).sum());
        let mut scores = Vec::new();
        for seg in segments {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..seg.len {
                    let qi = &qv[(seg.start + i) * d + col..][..dh];
                    scores.clear();
                    for j in 0..=i {
                        let kj = &kv[(seg.start + j) * d + col..][..dh];
                        scores.push(kernels::dot(qi, kj) * scale);
                    }
                    let p = kernels::softmax(&scores, 1.0);
                    let orow = &mut out[(seg.start + i) * d + col..][..dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vv[(seg.start + j) * d + col..][..dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += pj * x;
                        }
                    }
                    probs.extend_from_slice(&p);
                    probs.extend(std::iter::repeat(0.0).take(seg.len - i - 1));
                }
            }
        }
        let rg = self.tracks(q) || self.tracks(k) || self.tracks(v);
        let op = Op::Attention { q, k, v, segments: segments.to_vec(), heads, probs };
        self.push(vec![rows, d], out, rg, op)
    }

    /// Reverse sweep from a scalar `root`, accumulating into every tracked node.
    ///
    /// Gradients add up across calls; use [`Tape::zero_grad`] to reset them.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Contract("backward root is not on this tape".into()));
        }
        if !self.node(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].data.requires_grad() {
                continue;
            }
            let Some(upstream) = adj[i].take() else { continue };
            self.propagate(i, &upstream, &mut adj);
            self.nodes[i]
                .data
                .accumulate_grad(&upstream)
                .expect("adjoint matches node size");
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.data.values();
        let numel = |v: Var| self.node(v).numel();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.dims2(a, "").expect("checked");
                let n = self.shape(b)[1];
                if self.tracks(a) {
                    let da = kernels::matmul_nt(g, self.value(b), m, n, k);
                    add_into(accumulate(adj, a, m * k), &da);
                }
                if self.tracks(b) {
                    let db = kernels::matmul_tn(self.value(a), g, m, k, n);
                    add_into(accumulate(adj, b, k * n), &db);
                }
            }
            &Op::Add(a, b) => {
                for x in [a, b] {
                    if self.tracks(x) {
                        add_into(accumulate(adj, x, g.len()), g);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if self.tracks(a) {
                    add_into(accumulate(adj, a, g.len()), g);
                }
                if self.tracks(b) {
                    let acc = accumulate(adj, b, g.len());
                    for (o, d) in acc.iter_mut().zip(g) {
                        *o -= d;
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.tracks(a) {
                    let bv = self.value(b);
                    let acc = accumulate(adj, a, g.len());
                    for ((o, d), y) in acc.iter_mut().zip(g).zip(bv) {
                        *o += d * y;
                    }
                }
                if self.tracks(b) {
                    let av = self.value(a);
                    let acc = accumulate(adj, b, g.len());
                    for ((o, d), x) in acc.iter_mut().zip(g).zip(av) {
                        *o += d * x;
                    }
                }
            }
            &Op::AddRowBias(a, bias) => {
                if self.tracks(a) {
                    add_into(accumulate(adj, a, g.len()), g);
                }
                if self.tracks(bias) {
                    let n = numel(bias);
                    let acc = accumulate(adj, bias, n);
                    for row in g.chunks(n) {
                        add_into(acc, row);
                    }
                }
            }
            &Op::Scale(a, factor) => {
                let acc = accumulate(adj, a, g.len());
                for (o, d) in acc.iter_mut().zip(g) {
                    *o += d * factor;
                }
            }
            &Op::Gelu(a) => {
                let x = self.value(a);
                let acc = accumulate(adj, a, g.len());
                for ((o, d), &xv) in acc.iter_mut().zip(g).zip(x) {
                    *o += d * kernels::gelu_grad(xv);
                }
            }
            &Op::Log(a) => {
                let x = self.value(a);
                let acc = accumulate(adj, a, g.len());
                for ((o, d), xv) in acc.iter_mut().zip(g).zip(x) {
                    *o += d / xv;
                }
            }
            &Op::Exp(a) => {
                let acc = accumulate(adj, a, g.len());
                for ((o, d), y) in acc.iter_mut().zip(g).zip(out) {
                    *o += d * y;
                }
            }
            &Op::ClampMin(a, floor) => {
                let x = self.value(a);
                let acc = accumulate(adj, a, g.len());
                for ((o, d), &xv) in acc.iter_mut().zip(g).zip(x) {
                    if xv > floor {
                        *o += d;
                    }
                }
            }
            &Op::Sum(a) => {
                let acc = accumulate(adj, a, numel(a));
                acc.iter_mut().for_each(|o| *o += g[0]);
            }
            &Op::Mean(a) => {
                let n = numel(a);
                let acc = accumulate(adj, a, n);
                let d = g[0] / n as f64;
                acc.iter_mut().for_each(|o| *o += d);
            }
            &Op::Reshape(a) => add_into(accumulate(adj, a, g.len()), g),
            &Op::Softmax { input, temperature, cols } => {
                let acc = accumulate(adj, input, g.len());
                for ((gr, yr), ar) in g.chunks(cols).zip(out.chunks(cols)).zip(acc.chunks_mut(cols)) {
                    let inner = kernels::dot(gr, yr);
                    for ((o, &d), &y) in ar.iter_mut().zip(gr).zip(yr) {
                        *o += y * (d - inner) / temperature;
                    }
                }
            }
            &Op::LogSoftmax { input, temperature, cols } => {
                let acc = accumulate(adj, input, g.len());
                for ((gr, yr), ar) in g.chunks(cols).zip(out.chunks(cols)).zip(acc.chunks_mut(cols)) {
                    let total: f64 = gr.iter().sum();
                    for ((o, &d), &y) in ar.iter_mut().zip(gr).zip(yr) {
                        *o += (d - y.exp() * total) / temperature;
                    }
                }
            }
            Op::Gather { input, indices } => {
                let acc = accumulate(adj, *input, numel(*input));
                for (&idx, d) in indices.iter().zip(g) {
                    acc[idx] += d;
                }
            }
            Op::GatherRows { input, rows, cols } => {
                let cols = *cols;
                let acc = accumulate(adj, *input, numel(*input));
                for (&r, gr) in rows.iter().zip(g.chunks(cols)) {
                    add_into(&mut acc[r * cols..(r + 1) * cols], gr);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = numel(p);
                    if self.tracks(p) {
                        add_into(accumulate(adj, p, n), &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            &Op::PairwiseDiff(v) => {
                let k = numel(v);
                let acc = accumulate(adj, v, k);
                let mut idx = 0;
                for m in 0..k {
                    for n in m + 1..k {
                        acc[m] += g[idx];
                        acc[n] -= g[idx];
                        idx += 1;
                    }
                }
            }
            Op::LayerNorm { input, gamma, beta, normed, inv_std } => {
                let cols = numel(*gamma);
                let gv = self.value(*gamma);
                if self.tracks(*gamma) {
                    let acc = accumulate(adj, *gamma, cols);
                    for (gr, nr) in g.chunks(cols).zip(normed.chunks(cols)) {
                        for ((o, d), nv) in acc.iter_mut().zip(gr).zip(nr) {
                            *o += d * nv;
                        }
                    }
                }
                if self.tracks(*beta) {
                    let acc = accumulate(adj, *beta, cols);
                    for gr in g.chunks(cols) {
                        add_into(acc, gr);
                    }
                }
                if self.tracks(*input) {
                    let acc = accumulate(adj, *input, g.len());
                    let nf = cols as f64;
                    for (r, ((gr, nr), ar)) in g
                        .chunks(cols)
                        .zip(normed.chunks(cols))
                        .zip(acc.chunks_mut(cols))
                        .enumerate()
                    {
                        // dxhat = g * gamma
                        let mut sum_dx = 0.0;
                        let mut sum_dx_x = 0.0;
                        for c in 0..cols {
                            let dxh = gr[c] * gv[c];
                            sum_dx += dxh;
                            sum_dx_x += dxh * nr[c];
                        }
                        for c in 0..cols {
                            let dxh = gr[c] * gv[c];
                            ar[c] += inv_std[r] * (dxh - sum_dx / nf - nr[c] * sum_dx_x / nf);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, segments, heads, probs } => {
                self.attention_backward(*q, *k, *v, segments, *heads, probs, g, adj);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
        probs: &[f64],
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
    ) {
        let d = self.shape(q)[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![0.0; g.len()];
        let mut dk = vec![0.0; g.len()];
        let mut dv = vec![0.0; g.len()];
        let mut offset = 0;
        let mut dp = Vec::new();
        for seg in segments {
            let l = seg.len;
            for h in 0..heads {
                let col = h * dh;
                for i in 0..l {
                    let p = &probs[offset + i * l..offset + i * l + i + 1];
                    let gi = &g[(seg.start + i) * d + col..][..dh];
                    dp.clear();
                    for (j, &pj) in p.iter().enumerate() {
                        let row = (seg.start + j) * d + col;
                        dp.push(kernels::dot(gi, &vv[row..row + dh]));
                        for (o, &x) in dv[row..row + dh].iter_mut().zip(gi) {
                            *o += pj * x;
                        }
                    }
                    let inner = kernels::dot(p, &dp);
                    let qrow = (seg.start + i) * d + col;
                    for (j, &pj) in p.iter().enumerate() {
                        let ds = pj * (dp[j] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = (seg.start + j) * d + col;
                        for c in 0..dh {
                            dq[qrow + c] += ds * kv[krow + c];
                            dk[krow + c] += ds * qv[qrow + c];
                        }
                    }
                }
                offset += l * l;
            }
        }
        for (var, grad) in [(q, dq), (k, dk), (v, dv)] {
            if self.tracks(var) {
                add_into(accumulate(adj, var, grad.len()), &grad);
            }
        }
    }
}

fn add_into(acc: &mut [f64], delta: &[f64]) {
    for (o, d) in acc.iter_mut().zip(delta) {
        *o += d;
    }
}

/// Indices of `values` ordered by descending value.
///
/// Stable: equal values keep ascending original index. Not differentiable.
pub fn sort_descending_indices(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| {
        values[j]
            .partial_cmp(&values[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

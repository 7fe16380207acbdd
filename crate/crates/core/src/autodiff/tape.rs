//! Reverse-mode differentiation over a dynamic tape.
//!
//! A [`Tape`] records every operation as it executes; operands are referred
//! to by [`Var`] handles whose indices are topologically ordered by
//! construction (an operand always precedes its consumers). `backward`
//! sweeps the records in reverse, propagating adjoints through each one, and
//! adds the result into per-node gradient buffers, so calling it twice
//! doubles every gradient.
//!
//! The tape is rebuilt per episode; nothing is cached across episodes.
//! All arithmetic is `f64` and every loop runs in a fixed order, so replays
//! with identical inputs are bitwise identical.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: bool },
    /// out = x @ w + b, x: [batch, d_in], w: [d_in, d_out], b: [d_out]
    Affine { x: Var, w: Var, b: Var },
    Relu { x: Var },
    /// Row-wise log-softmax with max subtraction.
    LogSoftmax { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Square { x: Var },
    Exp { x: Var },
    Log { x: Var },
    Softplus { x: Var },
    Neg { x: Var },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    /// Repeat a vector as every row of a matrix.
    BroadcastRows { x: Var },
    /// out[i, :] = x[idx[i], :]
    GatherRows { x: Var, idx: Vec<usize> },
    /// out[i] = x[i, cols[i]]
    TakePerRow { x: Var, cols: Vec<usize> },
    /// out[g, :] = mean over rows i with labels[i] == g.
    GroupMeanRows { x: Var, labels: Vec<usize>, counts: Vec<usize> },
    /// out[q, k] = sum_m (f[q,m] - p[k,m])^2
    SqDist { f: Var, protos: Var },
    /// out[q, k] = sum_m a[k,m] * (f[q,m] - p[k,m])^2
    WeightedSqDist { f: Var, protos: Var, prec: Var },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

/// Record of one forward pass, consumed by `backward`.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    // max(x, 0) + ln(1 + exp(-|x|)) never overflows.
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node { shape, value, grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Record a constant input. Gradients are still computed for it but it
    /// is not flagged as a parameter.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf { param: false })
    }

    /// Record a parameter leaf; `backward` leaves d(loss)/d(param) in its
    /// gradient buffer, readable via [`Tape::grad`].
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf { param: true })
    }

    pub fn is_param(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf { param: true })
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a scalar node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1, "scalar() on non-scalar node");
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.clone())
            .expect("tape node shapes are consistent")
    }

    /// Add this node's accumulated gradient into `t.grad`.
    pub fn accumulate_grad_into(&self, v: Var, t: &mut Tensor) {
        t.accumulate_grad(&self.nodes[v.0].grad);
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape(format!("{what}: expected a matrix, got {other:?}"))),
        }
    }

    // ── forward ops ────────────────────────────────────────────────────

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, d_in) = self.dims2(x, "affine input")?;
        let (wr, d_out) = self.dims2(w, "affine weight")?;
        if d_in != wr {
            return Err(Error::Shape(format!(
                "affine: input width {d_in} does not match weight rows {wr}"
            )));
        }
        if self.nodes[b.0].shape.as_slice() != [d_out] {
            return Err(Error::Shape(format!(
                "affine: bias shape {:?} does not match output width {d_out}",
                self.nodes[b.0].shape
            )));
        }
        let xs = &self.nodes[x.0].value;
        let ws = &self.nodes[w.0].value;
        let bs = &self.nodes[b.0].value;
        let mut out = vec![0.0; n * d_out];
        for i in 0..n {
            for k in 0..d_in {
                let xv = xs[i * d_in + k];
                let wrow = &ws[k * d_out..(k + 1) * d_out];
                let orow = &mut out[i * d_out..(i + 1) * d_out];
                for (o, wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
            for (o, bv) in out[i * d_out..(i + 1) * d_out].iter_mut().zip(bs) {
                *o += bv;
            }
        }
        Ok(self.push(vec![n, d_out], out, Op::Affine { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, value, Op::Relu { x })
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.dims2(x, "log_softmax")?;
        if c == 0 {
            return Err(Error::Shape("log_softmax: zero classes".into()));
        }
        let xs = &self.nodes[x.0].value;
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &xs[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
            for (o, &z) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = z - lse;
            }
        }
        Ok(self.push(vec![n, c], out, Op::LogSoftmax { x }))
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape(format!(
                "{name}: operand shapes {:?} and {:?} differ",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, value, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, value, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, value, Op::Mul { a, b }))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[x.0].value.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, value, op)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square { x }, |v| v * v)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp { x }, f64::exp)
    }

    /// Natural log; inputs must be positive.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log { x }, f64::ln)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus { x }, softplus)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg { x }, |v| -v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale { x, c }, |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar { x }, |v| v + c)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        self.push(vec![], vec![s], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len();
        assert!(n > 0, "mean of an empty tensor");
        let s = self.nodes[x.0].value.iter().sum::<f64>() / n as f64;
        self.push(vec![], vec![s], Op::Mean { x })
    }

    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let d = match self.nodes[x.0].shape.as_slice() {
            [d] => *d,
            other => {
                return Err(Error::Shape(format!(
                    "broadcast_rows: expected a vector, got {other:?}"
                )))
            }
        };
        let mut value = Vec::with_capacity(n * d);
        for _ in 0..n {
            value.extend_from_slice(&self.nodes[x.0].value);
        }
        Ok(self.push(vec![n, d], value, Op::BroadcastRows { x }))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Invalid(format!(
                "gather_rows: row index {bad} out of range for {r} rows"
            )));
        }
        let xs = &self.nodes[x.0].value;
        let mut value = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            value.extend_from_slice(&xs[i * c..(i + 1) * c]);
        }
        Ok(self.push(vec![idx.len(), c], value, Op::GatherRows { x, idx: idx.to_vec() }))
    }

    pub fn take_per_row(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x, "take_per_row")?;
        if cols.len() != r {
            return Err(Error::Shape(format!(
                "take_per_row: {} indices for {r} rows",
                cols.len()
            )));
        }
        if let Some((row, &bad)) = cols.iter().enumerate().find(|(_, &j)| j >= c) {
            return Err(Error::Invalid(format!(
                "take_per_row: column {bad} out of range for {c} columns at row {row}"
            )));
        }
        let xs = &self.nodes[x.0].value;
        let value: Vec<f64> = cols.iter().enumerate().map(|(i, &j)| xs[i * c + j]).collect();
        Ok(self.push(vec![r], value, Op::TakePerRow { x, cols: cols.to_vec() }))
    }

    pub fn group_mean_rows(&mut self, x: Var, labels: &[usize], n_groups: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "group_mean_rows")?;
        if labels.len() != r {
            return Err(Error::Shape(format!(
                "group_mean_rows: {} labels for {r} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&g| g >= n_groups) {
            return Err(Error::Invalid(format!(
                "group_mean_rows: label {bad} out of range for {n_groups} groups"
            )));
        }
        let mut counts = vec![0usize; n_groups];
        for &g in labels {
            counts[g] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Invalid(format!("group_mean_rows: group {empty} has no rows")));
        }
        let xs = &self.nodes[x.0].value;
        let mut value = vec![0.0; n_groups * c];
        for (i, &g) in labels.iter().enumerate() {
            for m in 0..c {
                value[g * c + m] += xs[i * c + m];
            }
        }
        for g in 0..n_groups {
            let inv = 1.0 / counts[g] as f64;
            for v in &mut value[g * c..(g + 1) * c] {
                *v *= inv;
            }
        }
        Ok(self.push(
            vec![n_groups, c],
            value,
            Op::GroupMeanRows { x, labels: labels.to_vec(), counts },
        ))
    }

    /// Squared Euclidean distance between every row of `f` and every row of
    /// `protos`.
    pub fn sq_dist(&mut self, f: Var, protos: Var) -> Result<Var> {
        let (q, d) = self.dims2(f, "sq_dist features")?;
        let (k, dp) = self.dims2(protos, "sq_dist prototypes")?;
        if d != dp {
            return Err(Error::Shape(format!(
                "sq_dist: feature width {d} does not match prototype width {dp}"
            )));
        }
        let fs = &self.nodes[f.0].value;
        let ps = &self.nodes[protos.0].value;
        let mut value = vec![0.0; q * k];
        for i in 0..q {
            let frow = &fs[i * d..(i + 1) * d];
            for j in 0..k {
                let prow = &ps[j * d..(j + 1) * d];
                let mut acc = 0.0;
                for m in 0..d {
                    let diff = frow[m] - prow[m];
                    acc += diff * diff;
                }
                value[i * k + j] = acc;
            }
        }
        Ok(self.push(vec![q, k], value, Op::SqDist { f, protos }))
    }

    /// Squared Mahalanobis distance with per-class diagonal precision.
    /// Rejects nonpositive precision entries.
    pub fn weighted_sq_dist(&mut self, f: Var, protos: Var, prec: Var) -> Result<Var> {
        let (q, d) = self.dims2(f, "weighted_sq_dist features")?;
        let (k, dp) = self.dims2(protos, "weighted_sq_dist prototypes")?;
        if d != dp {
            return Err(Error::Shape(format!(
                "weighted_sq_dist: feature width {d} does not match prototype width {dp}"
            )));
        }
        if self.nodes[prec.0].shape != self.nodes[protos.0].shape {
            return Err(Error::Shape(format!(
                "weighted_sq_dist: precision shape {:?} does not match prototype shape {:?}",
                self.nodes[prec.0].shape, self.nodes[protos.0].shape
            )));
        }
        if let Some(&bad) = self.nodes[prec.0].value.iter().find(|&&a| a.is_nan() || a <= 0.0) {
            return Err(Error::Invalid(format!(
                "weighted_sq_dist: nonpositive precision entry {bad}"
            )));
        }
        let fs = &self.nodes[f.0].value;
        let ps = &self.nodes[protos.0].value;
        let als = &self.nodes[prec.0].value;
        let mut value = vec![0.0; q * k];
        for i in 0..q {
            let frow = &fs[i * d..(i + 1) * d];
            for j in 0..k {
                let prow = &ps[j * d..(j + 1) * d];
                let arow = &als[j * d..(j + 1) * d];
                let mut acc = 0.0;
                for m in 0..d {
                    let diff = frow[m] - prow[m];
                    acc += arow[m] * diff * diff;
                }
                value[i * k + j] = acc;
            }
        }
        Ok(self.push(vec![q, k], value, Op::WeightedSqDist { f, protos, prec }))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Adjoints are propagated through a
    /// scratch buffer and then added into every node's gradient, so repeated
    /// calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Invalid("backward: loss was not produced on this tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let n = self.nodes.len();
        let mut adj: Vec<Vec<f64>> = self.nodes.iter().map(|nd| vec![0.0; nd.value.len()]).collect();
        adj[loss.0][0] = 1.0;

        for i in (0..n).rev() {
            // Operands always precede node i, so taking adj[i] out while
            // writing adj[j < i] is safe.
            let upstream = std::mem::take(&mut adj[i]);
            if upstream.iter().all(|&g| g == 0.0) {
                adj[i] = upstream;
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf { .. } => {}
                Op::Affine { x, w, b } => {
                    let (nb, d_in) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    let d_out = self.nodes[w.0].shape[1];
                    // gx = G w^T, gw = x^T G, gb = column sums of G
                    for r in 0..nb {
                        let grow = &upstream[r * d_out..(r + 1) * d_out];
                        for kk in 0..d_in {
                            let wrow = &self.nodes[w.0].value[kk * d_out..(kk + 1) * d_out];
                            let mut acc = 0.0;
                            for j in 0..d_out {
                                acc += grow[j] * wrow[j];
                            }
                            adj[x.0][r * d_in + kk] += acc;
                        }
                    }
                    for kk in 0..d_in {
                        for j in 0..d_out {
                            let mut acc = 0.0;
                            for r in 0..nb {
                                acc += self.nodes[x.0].value[r * d_in + kk] * upstream[r * d_out + j];
                            }
                            adj[w.0][kk * d_out + j] += acc;
                        }
                    }
                    for j in 0..d_out {
                        let mut acc = 0.0;
                        for r in 0..nb {
                            acc += upstream[r * d_out + j];
                        }
                        adj[b.0][j] += acc;
                    }
                }
                Op::Relu { x } => {
                    for (e, (&xv, &g)) in self.nodes[x.0].value.iter().zip(&upstream).enumerate() {
                        if xv > 0.0 {
                            adj[x.0][e] += g;
                        }
                    }
                }
                Op::LogSoftmax { x } => {
                    let c = self.nodes[i].shape[1];
                    let rows = self.nodes[i].shape[0];
                    for r in 0..rows {
                        let grow = &upstream[r * c..(r + 1) * c];
                        let yrow = &self.nodes[i].value[r * c..(r + 1) * c];
                        let gsum: f64 = grow.iter().sum();
                        for j in 0..c {
                            adj[x.0][r * c + j] += grow[j] - yrow[j].exp() * gsum;
                        }
                    }
                }
                Op::Add { a, b } => {
                    for (e, &g) in upstream.iter().enumerate() {
                        adj[a.0][e] += g;
                        adj[b.0][e] += g;
                    }
                }
                Op::Sub { a, b } => {
                    for (e, &g) in upstream.iter().enumerate() {
                        adj[a.0][e] += g;
                        adj[b.0][e] -= g;
                    }
                }
                Op::Mul { a, b } => {
                    for (e, &g) in upstream.iter().enumerate() {
                        let av = self.nodes[a.0].value[e];
                        let bv = self.nodes[b.0].value[e];
                        adj[a.0][e] += g * bv;
                        adj[b.0][e] += g * av;
                    }
                }
                Op::Square { x } => {
                    for (e, &g) in upstream.iter().enumerate() {
                        adj[x.0][e] += 2.0 * self.nodes[x.0].value[e] * g;
                    }
                }
                Op::Exp { x } => {
                    for (e, &g) in upstream.iter().enumerate() {
                        adj[x.0][e] += self.nodes[i].value[e] * g;
                    }
                }
                Op::Log { x } => {
                    for (e, &g) in upstream.iter().enumerate() {
                        adj[x.0][e] += g / self.nodes[x.0].value[e];
                    }
                }
                Op::Softplus { x } => {
                    for (e, &g) in upstream.iter().enumerate() {
                        adj[x.0][e] += g * sigmoid(self.nodes[x.0].value[e]);
                    }
                }
                Op::Neg { x } => {
                    for (e, &g) in upstream.iter().enumerate() {
                        adj[x.0][e] -= g;
                    }
                }
                Op::Scale { x, c } => {
                    for (e, &g) in upstream.iter().enumerate() {
                        adj[x.0][e] += c * g;
                    }
                }
                Op::AddScalar { x } => {
                    for (e, &g) in upstream.iter().enumerate() {
                        adj[x.0][e] += g;
                    }
                }
                Op::Sum { x } => {
                    let g = upstream[0];
                    for a in adj[x.0].iter_mut() {
                        *a += g;
                    }
                }
                Op::Mean { x } => {
                    let g = upstream[0] / self.nodes[x.0].value.len() as f64;
                    for a in adj[x.0].iter_mut() {
                        *a += g;
                    }
                }
                Op::BroadcastRows { x } => {
                    let d = self.nodes[x.0].value.len();
                    let rows = self.nodes[i].shape[0];
                    for r in 0..rows {
                        for m in 0..d {
                            adj[x.0][m] += upstream[r * d + m];
                        }
                    }
                }
                Op::GatherRows { x, idx } => {
                    let c = self.nodes[i].shape[1];
                    for (r, &src) in idx.iter().enumerate() {
                        for m in 0..c {
                            adj[x.0][src * c + m] += upstream[r * c + m];
                        }
                    }
                }
                Op::TakePerRow { x, cols } => {
                    let c = self.nodes[x.0].shape[1];
                    for (r, &j) in cols.iter().enumerate() {
                        adj[x.0][r * c + j] += upstream[r];
                    }
                }
                Op::GroupMeanRows { x, labels, counts } => {
                    let c = self.nodes[i].shape[1];
                    for (r, &g) in labels.iter().enumerate() {
                        let inv = 1.0 / counts[g] as f64;
                        for m in 0..c {
                            adj[x.0][r * c + m] += upstream[g * c + m] * inv;
                        }
                    }
                }
                Op::SqDist { f, protos } => {
                    let d = self.nodes[f.0].shape[1];
                    let k = self.nodes[i].shape[1];
                    let q = self.nodes[i].shape[0];
                    for iq in 0..q {
                        for jk in 0..k {
                            let g = upstream[iq * k + jk];
                            if g == 0.0 {
                                continue;
                            }
                            for m in 0..d {
                                let diff = self.nodes[f.0].value[iq * d + m]
                                    - self.nodes[protos.0].value[jk * d + m];
                                let t = 2.0 * g * diff;
                                adj[f.0][iq * d + m] += t;
                                adj[protos.0][jk * d + m] -= t;
                            }
                        }
                    }
                }
                Op::WeightedSqDist { f, protos, prec } => {
                    let d = self.nodes[f.0].shape[1];
                    let k = self.nodes[i].shape[1];
                    let q = self.nodes[i].shape[0];
                    for iq in 0..q {
                        for jk in 0..k {
                            let g = upstream[iq * k + jk];
                            if g == 0.0 {
                                continue;
                            }
                            for m in 0..d {
                                let diff = self.nodes[f.0].value[iq * d + m]
                                    - self.nodes[protos.0].value[jk * d + m];
                                let a = self.nodes[prec.0].value[jk * d + m];
                                let t = 2.0 * g * a * diff;
                                adj[f.0][iq * d + m] += t;
                                adj[protos.0][jk * d + m] -= t;
                                adj[prec.0][jk * d + m] += g * diff * diff;
                            }
                        }
                    }
                }
            }
            adj[i] = upstream;
        }

        for (node, a) in self.nodes.iter_mut().zip(&adj) {
            for (g, &d) in node.grad.iter_mut().zip(a) {
                *g += d;
            }
        }
        Ok(())
    }
}

//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations are coarse (matmul, layer norm, fused multi-head attention,
//! cross-entropy) so that a Transformer step records a few hundred nodes
//! rather than millions. Nodes are appended in evaluation order; the reverse
//! sweep walks indices downward, which visits every node after all of its
//! consumers.

use crate::error::{ArithError, Result};
use crate::rng::RngState;
use crate::tensor::{softmax_in_place, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a fused attention call. Queries are `[batch·q_len, d]`, keys
/// and values `[batch·k_len, d]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub causal: bool,
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Sum(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> ArithError {
    ArithError::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn accumulate<'a, T: Scalar>(adj: &'a mut [Option<Vec<T>>], v: Var, len: usize) -> &'a mut Vec<T> {
    adj[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn gelu<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let one = T::one();
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let value = half * x * (one + t);
    let dinner = c * (one + T::of(3.0) * a * x * x);
    let deriv = half * (one + t) + half * x * (one - t * t) * dinner;
    (value, deriv)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a tensor; it is tracked when the tensor requires grad.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let req = t.requires_grad();
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, req);
        if req {
            self.nodes[v.0].grad = Some(vec![T::zero(); t.numel()]);
        }
        v
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.leaf(&t))
    }

    pub fn tracked(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?.tracked();
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Accumulated gradient of a tracked leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            s => Err(shape_err(op, s, &[])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            (self.value(a), k as isize, 1),
            (self.value(b), n as isize, 1),
            T::zero(),
            &mut out,
        );
        let req = self.req(a) || self.req(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), req))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let req = self.req(a) || self.req(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let req = self.req(a) || self.req(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), req))
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.matrix(x, "add_bias")?;
        if self.shape(bias) != [n] {
            return Err(shape_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let req = self.req(x) || self.req(bias);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias(x, bias), req))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let req = self.req(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s), req)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        let req = self.req(x);
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), req)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v).0).collect();
        let req = self.req(x);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), req)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let req = self.req(x);
        self.push(vec![1], vec![s], Op::Sum(x), req)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.matrix(x, "softmax_rows")?;
        if self.value(x).iter().any(|v| !v.is_finite()) {
            return Err(ArithError::Numeric("softmax_rows"));
        }
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            softmax_in_place(row);
        }
        let req = self.req(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::SoftmaxRows(x), req))
    }

    /// Row-wise layer normalisation with affine parameters `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.matrix(x, "layer_norm")?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xs = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let nf = T::of(n as f64);
        let eps = T::of(LN_EPS);
        let mut out = vec![T::zero(); m * n];
        let mut means = Vec::with_capacity(m);
        let mut rstds = Vec::with_capacity(m);
        for (row, orow) in xs.chunks(n).zip(out.chunks_mut(n)) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..n {
                orow[j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            mean: means,
            rstd: rstds,
        };
        Ok(self.push(vec![m, n], out, op, req))
    }

    /// Row lookup: `table[V×d]` indexed by `ids`, giving `[ids.len()×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.matrix(table, "embedding")?;
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(ArithError::Index {
                    what: "embedding",
                    index: id,
                    limit: vocab,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let req = self.req(table);
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(vec![ids.len(), d], out, op, req))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, d) = self.matrix(x, "gather_rows")?;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= m {
                return Err(ArithError::Index {
                    what: "gather_rows",
                    index: r,
                    limit: m,
                });
            }
            out.extend_from_slice(&xv[r * d..(r + 1) * d]);
        }
        let req = self.req(x);
        let op = Op::GatherRows {
            x,
            rows: rows.to_vec(),
        };
        Ok(self.push(vec![rows.len(), d], out, op, req))
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut RngState) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = T::of(1.0 / (1.0 - p));
        let threshold = (p * 4_294_967_296.0) as u64;
        let mut words = vec![0u32; self.value(x).len()];
        rng.fill_u32(&mut words);
        let mask: Vec<T> = words
            .iter()
            .map(|&w| if (w as u64) < threshold { T::zero() } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let req = self.req(x);
        self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }, req)
    }

    /// Scaled dot-product attention over `heads` heads, optionally causal.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape) -> Result<Var> {
        let (qm, d) = self.matrix(q, "attention")?;
        let (km, kd) = self.matrix(k, "attention")?;
        let AttentionShape {
            batch,
            q_len,
            k_len,
            heads,
            causal,
        } = shape;
        if qm != batch * q_len || km != batch * k_len || kd != d || self.shape(v) != self.shape(k) {
            return Err(shape_err("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 || (causal && k_len < q_len) {
            return Err(ArithError::Config(format!(
                "attention with d={d}, heads={heads}, causal={causal}, q_len={q_len}, k_len={k_len}"
            )));
        }
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); batch * heads * q_len * k_len];
        let mut out = vec![T::zero(); qm * d];
        let offset = k_len - q_len;
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..q_len {
                    let qrow = &qv[(b * q_len + i) * d + col..][..dh];
                    let jmax = if causal { i + offset + 1 } else { k_len };
                    let p = &mut probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                    for j in 0..jmax {
                        let krow = &kv[(b * k_len + j) * d + col..][..dh];
                        p[j] = scale * qrow.iter().zip(krow).map(|(&a, &c)| a * c).sum::<T>();
                    }
                    softmax_in_place(&mut p[..jmax]);
                    let orow = &mut out[(b * q_len + i) * d + col..][..dh];
                    for j in 0..jmax {
                        let vrow = &vv[(b * k_len + j) * d + col..][..dh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += p[j] * x;
                        }
                    }
                }
            }
        }
        let req = self.req(q) || self.req(k) || self.req(v);
        let op = Op::Attention {
            q,
            k,
            v,
            shape,
            probs,
        };
        Ok(self.push(vec![qm, d], out, op, req))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, vocab) = self.matrix(logits, "cross_entropy")?;
        if m != targets.len() {
            return Err(shape_err("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(ArithError::Index {
                what: "cross_entropy target",
                index: bad,
                limit: vocab,
            });
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = T::zero();
        for (row, &t) in probs.chunks_mut(vocab).zip(targets) {
            let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - row[t];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = total / T::of(m.max(1) as f64);
        let req = self.req(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(vec![1], vec![loss], op, req))
    }

    /// Accumulates `d loss / d leaf` into every tracked leaf's gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(ArithError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((i, g));
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        for (i, g) in leaf_grads {
            if let Some(buf) = self.nodes[i].grad.as_mut() {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let len = |v: Var| nodes[v.0].value.len();
        let req = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if req(*a) {
                    let ga = accumulate(adj, *a, m * k);
                    T::gemm(m, n, k, T::one(), (g, n as isize, 1), (val(*b), 1, n as isize), T::one(), ga);
                }
                if req(*b) {
                    let gb = accumulate(adj, *b, k * n);
                    T::gemm(k, m, n, T::one(), (val(*a), 1, k as isize), (g, n as isize, 1), T::one(), gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if req(v) {
                        let gv = accumulate(adj, v, g.len());
                        gv.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                if req(*a) {
                    let bv = val(*b);
                    let ga = accumulate(adj, *a, g.len());
                    for ((x, &y), &o) in ga.iter_mut().zip(g).zip(bv) {
                        *x += y * o;
                    }
                }
                if req(*b) {
                    let av = val(*a);
                    let gb = accumulate(adj, *b, g.len());
                    for ((x, &y), &o) in gb.iter_mut().zip(g).zip(av) {
                        *x += y * o;
                    }
                }
            }
            Op::AddBias(x, b) => {
                if req(*x) {
                    let gx = accumulate(adj, *x, g.len());
                    gx.iter_mut().zip(g).for_each(|(a, &y)| *a += y);
                }
                if req(*b) {
                    let n = len(*b);
                    let gb = accumulate(adj, *b, n);
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, &y)| *a += y);
                    }
                }
            }
            Op::Scale(x, s) => {
                let gx = accumulate(adj, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(a, &y)| *a += *s * y);
            }
            Op::Relu(x) => {
                let out = &node.value;
                let gx = accumulate(adj, *x, g.len());
                for ((a, &y), &o) in gx.iter_mut().zip(g).zip(out) {
                    if o > T::zero() {
                        *a += y;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                let gx = accumulate(adj, *x, g.len());
                for ((a, &y), &xi) in gx.iter_mut().zip(g).zip(xv) {
                    *a += y * gelu(xi).1;
                }
            }
            Op::Sum(x) => {
                let gx = accumulate(adj, *x, len(*x));
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
            Op::SoftmaxRows(x) => {
                let n = node.shape[1];
                let y = &node.value;
                let gx = accumulate(adj, *x, g.len());
                for ((grow, yrow), gxrow) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        gxrow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let n = node.shape[1];
                let nf = T::of(n as f64);
                let xv = val(*x);
                let gam = val(*gamma);
                if req(*gamma) || req(*beta) {
                    let mut dg = vec![T::zero(); n];
                    let mut db = vec![T::zero(); n];
                    for (r, (grow, xrow)) in g.chunks(n).zip(xv.chunks(n)).enumerate() {
                        for j in 0..n {
                            let xhat = (xrow[j] - mean[r]) * rstd[r];
                            dg[j] += grow[j] * xhat;
                            db[j] += grow[j];
                        }
                    }
                    if req(*gamma) {
                        let a = accumulate(adj, *gamma, n);
                        a.iter_mut().zip(&dg).for_each(|(p, &q)| *p += q);
                    }
                    if req(*beta) {
                        let a = accumulate(adj, *beta, n);
                        a.iter_mut().zip(&db).for_each(|(p, &q)| *p += q);
                    }
                }
                if req(*x) {
                    let gx = accumulate(adj, *x, g.len());
                    let mut dxhat = vec![T::zero(); n];
                    for (r, ((grow, xrow), gxrow)) in g.chunks(n).zip(xv.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            dxhat[j] = grow[j] * gam[j];
                            let xhat = (xrow[j] - mean[r]) * rstd[r];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xhat;
                        }
                        s1 = s1 / nf;
                        s2 = s2 / nf;
                        for j in 0..n {
                            let xhat = (xrow[j] - mean[r]) * rstd[r];
                            gxrow[j] += rstd[r] * (dxhat[j] - s1 - xhat * s2);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.shape[1];
                let gt = accumulate(adj, *table, len(*table));
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * d..(id + 1) * d];
                    dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, &y)| *a += y);
                }
            }
            Op::GatherRows { x, rows } => {
                let d = node.shape[1];
                let gx = accumulate(adj, *x, len(*x));
                for (r, &src) in rows.iter().enumerate() {
                    let dst = &mut gx[src * d..(src + 1) * d];
                    dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, &y)| *a += y);
                }
            }
            Op::Dropout { x, mask } => {
                let gx = accumulate(adj, *x, g.len());
                for ((a, &y), &m) in gx.iter_mut().zip(g).zip(mask) {
                    *a += y * m;
                }
            }
            Op::Attention { q, k, v, shape, probs } => {
                self.attention_backward(g, *q, *k, *v, *shape, probs, adj);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vocab = nodes[logits.0].shape[1];
                let scale = g[0] / T::of(targets.len().max(1) as f64);
                let gl = accumulate(adj, *logits, probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    let prow = &probs[r * vocab..(r + 1) * vocab];
                    let grow = &mut gl[r * vocab..(r + 1) * vocab];
                    for j in 0..vocab {
                        grow[j] += scale * prow[j];
                    }
                    grow[t] -= scale;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: &[T],
        adj: &mut [Option<Vec<T>>],
    ) {
        let AttentionShape {
            batch,
            q_len,
            k_len,
            heads,
            causal,
        } = shape;
        let d = self.nodes[q.0].shape[1];
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut gq = vec![T::zero(); qv.len()];
        let mut gk = vec![T::zero(); kv.len()];
        let mut gv = vec![T::zero(); vv.len()];
        let mut ds = vec![T::zero(); k_len];
        let offset = k_len - q_len;
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..q_len {
                    let jmax = if causal { i + offset + 1 } else { k_len };
                    let p = &probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                    let go = &g[(b * q_len + i) * d + col..][..dh];
                    let mut dot = T::zero();
                    for j in 0..jmax {
                        let vrow = &vv[(b * k_len + j) * d + col..][..dh];
                        let dp: T = go.iter().zip(vrow).map(|(&a, &c)| a * c).sum();
                        ds[j] = dp;
                        dot += p[j] * dp;
                        let gvrow = &mut gv[(b * k_len + j) * d + col..][..dh];
                        for (a, &y) in gvrow.iter_mut().zip(go) {
                            *a += p[j] * y;
                        }
                    }
                    let qrow = &qv[(b * q_len + i) * d + col..][..dh];
                    for j in 0..jmax {
                        let s = p[j] * (ds[j] - dot) * scale;
                        let krow = &kv[(b * k_len + j) * d + col..][..dh];
                        let gqrow = &mut gq[(b * q_len + i) * d + col..][..dh];
                        for (a, &c) in gqrow.iter_mut().zip(krow) {
                            *a += s * c;
                        }
                        let gkrow = &mut gk[(b * k_len + j) * d + col..][..dh];
                        for (a, &c) in gkrow.iter_mut().zip(qrow) {
                            *a += s * c;
                        }
                    }
                }
            }
        }
        for (var, grad) in [(q, gq), (k, gk), (v, gv)] {
            if self.nodes[var.0].requires_grad {
                let dst = accumulate(adj, var, grad.len());
                dst.iter_mut().zip(grad).for_each(|(a, y)| *a += y);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape_with(data: &[f64]) -> (Tape<f64>, Var) {
        let mut t = Tape::new();
        let x = t.tracked(&[data.len()], data.to_vec()).unwrap();
        (t, x)
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let (mut t, x) = tape_with(&[1.0, -2.0, 3.0]);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_square_sum_is_2x() {
        let (mut t, x) = tape_with(&[1.0, -2.0, 3.0]);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn fan_out_sums_contributions() {
        let (mut t, x) = tape_with(&[0.5]);
        let y = t.add(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let (mut t, x) = tape_with(&[1.0, 2.0]);
        let s = t.sum(x);
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0]);
        t.zero_grad();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let (mut t, x) = tape_with(&[1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(ArithError::Contract(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::<f64>::new();
        let l = t.constant(&[1, 5], vec![0.0; 5]).unwrap();
        let loss = t.cross_entropy(l, &[3]).unwrap();
        assert!((t.value(loss)[0] - 5f64.ln()).abs() < 1e-12);

        let l = t
            .constant(&[2, 5], vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0])
            .unwrap();
        let loss = t.cross_entropy(l, &[0, 0]).unwrap();
        let want = 0.5 * (5f64.ln() + (-1.0 + (1f64.exp() + 4.0).ln()));
        assert!((t.value(loss)[0] - want).abs() < 1e-12);

        let l = t.constant(&[1, 5], vec![0.0, 0.0, 80.0, 0.0, 0.0]).unwrap();
        let loss = t.cross_entropy(l, &[2]).unwrap();
        assert!(t.value(loss)[0] < 1e-30);

        assert!(matches!(t.cross_entropy(l, &[5]), Err(ArithError::Index { .. })));
    }

    #[test]
    fn causal_attention_ignores_future_keys() {
        let mut t = Tape::<f64>::new();
        let mut r = RngState::new(1);
        let data: Vec<f64> = (0..3 * 4).map(|_| r.normal()).collect();
        let shape = AttentionShape {
            batch: 1,
            q_len: 3,
            k_len: 3,
            heads: 2,
            causal: true,
        };
        let x = t.constant(&[3, 4], data.clone()).unwrap();
        let a = t.attention(x, x, x, shape).unwrap();
        let mut changed = data.clone();
        changed[8..].iter_mut().for_each(|v| *v += 1.0);
        let y = t.constant(&[3, 4], changed).unwrap();
        let q = t.constant(&[3, 4], data).unwrap();
        let b = t.attention(q, y, y, shape).unwrap();
        assert_eq!(&t.value(a)[..8], &t.value(b)[..8]);
    }
}

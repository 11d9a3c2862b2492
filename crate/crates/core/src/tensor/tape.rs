use super::linalg::gemm;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Silu,
    /// Exact erf-based GeLU.
    Gelu,
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl UnaryKind {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryKind::Silu => x * sigmoid(x),
            UnaryKind::Gelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Sigmoid => sigmoid(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            UnaryKind::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            UnaryKind::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
            UnaryKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            UnaryKind::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Unary(usize, UnaryKind),
    Custom {
        x: usize,
        df: fn(f64) -> f64,
    },
    Softmax(usize),
    Reduce {
        x: usize,
        kind: ReduceKind,
        axis: Option<usize>,
    },
    RmsNorm {
        x: usize,
        scale: Option<usize>,
        width: usize,
        norms: Vec<f64>,
    },
    DynTanh {
        x: usize,
        alpha: usize,
        gamma: usize,
        beta: usize,
    },
    Rope {
        x: usize,
        seq_len: usize,
        d_head: usize,
        base: f64,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        seq_len: usize,
        heads: usize,
        d_head: usize,
        probs: Vec<f64>,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    RepeatCols {
        x: usize,
        times: usize,
    },
    BroadcastRows(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Default)]
pub struct Grads {
    bufs: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// `None` when `v` does not influence the loss or does not require grad.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.bufs.get(v.0).and_then(|b| b.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.bufs.get_mut(v.0).and_then(Option::take)
    }
}

/// Append-only record of a computation. Nodes are stored in creation order,
/// which is a topological order of the graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn rope_angles(seq_len: usize, d_head: usize, base: f64) -> Vec<(f64, f64)> {
    let half = d_head / 2;
    let mut table = Vec::with_capacity(seq_len * half);
    for p in 0..seq_len {
        for j in 0..half {
            let theta = p as f64 * base.powf(-2.0 * j as f64 / d_head as f64);
            table.push(theta.sin_cos());
        }
    }
    table
}

/// Rotate coordinate pairs in place; `sign = -1` applies the inverse rotation.
fn rotate_pairs(
    data: &mut [f64],
    cols: usize,
    seq_len: usize,
    d_head: usize,
    table: &[(f64, f64)],
    sign: f64,
) {
    let half = d_head / 2;
    for (r, row) in data.chunks_mut(cols).enumerate() {
        let p = r % seq_len;
        for head in row.chunks_mut(d_head) {
            for j in 0..half {
                let (sin, cos) = table[p * half + j];
                let sin = sign * sin;
                let x0 = head[2 * j];
                let x1 = head[2 * j + 1];
                head[2 * j] = x0 * cos - x1 * sin;
                head[2 * j + 1] = x0 * sin + x1 * cos;
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Attention probabilities saved by [`Tape::causal_attention`], laid out
    /// as `[batch, heads, seq_len, seq_len]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul of {:?} by {:?}{}: inner dimensions differ",
                self.shape(a),
                self.shape(b),
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b,
            },
            &[a.0, b.0],
        ))
    }

    /// `a · b` for `a: [m×k]`, `b: [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
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

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).scale(c);
        self.push(value, Op::Scale(x.0, c), &[x.0])
    }

    pub fn unary(&mut self, x: Var, kind: UnaryKind) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| kind.apply(v)).collect();
        let value = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        self.push(value, Op::Unary(x.0, kind), &[x.0])
    }

    /// Elementwise op with a caller-supplied derivative. The tape trusts `df`;
    /// a wrong derivative yields wrong gradients, which is what
    /// [`finite_diff_check`](super::finite_diff_check) is for.
    pub fn custom_unary(&mut self, x: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var {
        let src = self.value(x);
        let value = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|&v| f(v)).collect(),
        };
        self.push(value, Op::Custom { x: x.0, df }, &[x.0])
    }

    /// Row-wise softmax of a matrix. `mask` entries must be `0` or `-inf` and
    /// are treated as constants.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if let Some(m) = mask {
            if m.shape() != self.shape(x) {
                return Err(Error::Dimension(format!(
                    "mask shape {:?} does not match {:?}",
                    m.shape(),
                    self.shape(x)
                )));
            }
            if let Some(bad) = m.data().iter().find(|&&v| v != 0.0 && v != f64::NEG_INFINITY) {
                return Err(Error::Contract(format!(
                    "mask entries must be 0 or -inf, found {bad}"
                )));
            }
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let masked = |c: usize| mask.is_some_and(|m| m.data()[r * cols + c] == f64::NEG_INFINITY);
            let mut max = f64::NEG_INFINITY;
            for (c, &v) in row.iter().enumerate() {
                if !masked(c) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row: r });
            }
            let dst = &mut out[r * cols..(r + 1) * cols];
            let mut total = 0.0;
            for (c, &v) in row.iter().enumerate() {
                if !masked(c) {
                    let e = (v - max).exp();
                    dst[c] = e;
                    total += e;
                }
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(value, Op::Softmax(x.0), &[x.0]))
    }

    /// Sum or mean over one axis (removed from the shape) or over everything
    /// (scalar result).
    pub fn reduce(&mut self, x: Var, kind: ReduceKind, axis: Option<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let src = self.value(x).data();
        let value = match axis {
            None => {
                let s: f64 = src.iter().sum();
                let v = match kind {
                    ReduceKind::Sum => s,
                    ReduceKind::Mean => s / src.len().max(1) as f64,
                };
                Tensor::scalar(v)
            }
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::Dimension(format!(
                        "axis {ax} out of range for shape {shape:?}"
                    )));
                }
                let (outer, len, inner) = split_axis(&shape, ax);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for a in 0..len {
                        for i in 0..inner {
                            out[o * inner + i] += src[(o * len + a) * inner + i];
                        }
                    }
                }
                if kind == ReduceKind::Mean {
                    for v in &mut out {
                        *v /= len as f64;
                    }
                }
                let mut new_shape = shape.clone();
                new_shape.remove(ax);
                Tensor::new(new_shape, out)?
            }
        };
        Ok(self.push(value, Op::Reduce { x: x.0, kind, axis }, &[x.0]))
    }

    /// RMS normalization over contiguous groups of `width` columns:
    /// `√width · h / √(‖h‖² + eps²)`, then multiplied by `scale` when given.
    pub fn rmsnorm(&mut self, x: Var, scale: Option<Var>, width: usize, eps: f64) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if width == 0 || cols % width != 0 {
            return Err(Error::Dimension(format!(
                "rmsnorm group width {width} does not divide {cols} columns"
            )));
        }
        if let Some(s) = scale {
            if self.shape(s) != [width] {
                return Err(Error::Dimension(format!(
                    "rmsnorm scale shape {:?}, expected [{width}]",
                    self.shape(s)
                )));
            }
        }
        let src = self.value(x).data();
        let sc = scale.map(|s| self.value(s).data());
        let root = (width as f64).sqrt();
        let mut out = vec![0.0; rows * cols];
        let mut norms = Vec::with_capacity(rows * cols / width);
        for (h, y) in src.chunks(width).zip(out.chunks_mut(width)) {
            let n = (h.iter().map(|v| v * v).sum::<f64>() + eps * eps).sqrt();
            norms.push(n);
            for j in 0..width {
                let s = sc.map_or(1.0, |s| s[j]);
                y[j] = root * h[j] / n * s;
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        let mut inputs = vec![x.0];
        inputs.extend(scale.map(|s| s.0));
        Ok(self.push(
            value,
            Op::RmsNorm {
                x: x.0,
                scale: scale.map(|s| s.0),
                width,
                norms,
            },
            &inputs,
        ))
    }

    /// Elementwise `gamma ⊙ tanh(alpha · x) + beta`, `alpha` a 1-element tensor.
    pub fn dyn_tanh(&mut self, x: Var, alpha: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if self.value(alpha).numel() != 1
            || self.shape(gamma) != [cols]
            || self.shape(beta) != [cols]
        {
            return Err(Error::Dimension(
                "dynamic tanh expects scalar alpha and per-column gamma/beta".into(),
            ));
        }
        let a = self.value(alpha).data()[0];
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for (h, y) in src.chunks(cols).zip(out.chunks_mut(cols)) {
            for j in 0..cols {
                y[j] = gm[j] * (a * h[j]).tanh() + bt[j];
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(
            value,
            Op::DynTanh {
                x: x.0,
                alpha: alpha.0,
                gamma: gamma.0,
                beta: beta.0,
            },
            &[x.0, alpha.0, gamma.0, beta.0],
        ))
    }

    /// Rotary position embedding over rows `[batch·seq_len × heads·d_head]`;
    /// row `r` sits at position `r % seq_len`.
    pub fn rope(&mut self, x: Var, seq_len: usize, d_head: usize, base: f64) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if d_head == 0 || d_head % 2 != 0 || cols % d_head != 0 {
            return Err(Error::Config(format!(
                "rope needs an even head width dividing {cols}, got {d_head}"
            )));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::Dimension(format!(
                "{rows} rows are not a whole number of length-{seq_len} sequences"
            )));
        }
        let table = rope_angles(seq_len, d_head, base);
        let mut data = self.value(x).data().to_vec();
        rotate_pairs(&mut data, cols, seq_len, d_head, &table, 1.0);
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(
            value,
            Op::Rope {
                x: x.0,
                seq_len,
                d_head,
                base,
            },
            &[x.0],
        ))
    }

    /// Causal multi-head scaled dot-product attention. `q`, `k`, `v` are
    /// `[batch·seq_len × heads·d_head]`; the result has the same layout with
    /// head outputs concatenated along columns.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        d_head: usize,
    ) -> Result<Var> {
        let (rows, cols) = self.value(q).dims2()?;
        if self.shape(k) != [rows, cols] || self.shape(v) != [rows, cols] {
            return Err(Error::Dimension("q, k, v shapes differ".into()));
        }
        if cols != heads * d_head || seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::Dimension(format!(
                "attention layout [{rows}×{cols}] incompatible with {heads} heads × {d_head}, T = {seq_len}"
            )));
        }
        let batch = rows / seq_len;
        let inv = 1.0 / (d_head as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; batch * heads * seq_len * seq_len];
        let mut out = vec![0.0; rows * cols];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq_len * seq_len..][..seq_len * seq_len];
                for t in 0..seq_len {
                    let qt = &qd[(b * seq_len + t) * cols + h * d_head..][..d_head];
                    let prow = &mut p[t * seq_len..(t + 1) * seq_len];
                    let mut max = f64::NEG_INFINITY;
                    for s in 0..=t {
                        let ks = &kd[(b * seq_len + s) * cols + h * d_head..][..d_head];
                        let logit = qt.iter().zip(ks).map(|(a, b)| a * b).sum::<f64>() * inv;
                        prow[s] = logit;
                        max = max.max(logit);
                    }
                    let mut total = 0.0;
                    for x in &mut prow[..=t] {
                        *x = (*x - max).exp();
                        total += *x;
                    }
                    let ot = &mut out[(b * seq_len + t) * cols + h * d_head..][..d_head];
                    for s in 0..=t {
                        prow[s] /= total;
                        let vs = &vd[(b * seq_len + s) * cols + h * d_head..][..d_head];
                        for (o, x) in ot.iter_mut().zip(vs) {
                            *o += prow[s] * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                seq_len,
                heads,
                d_head,
                probs,
            },
            &[q.0, k.0, v.0],
        ))
    }

    /// Row lookup: `out[r] = table[ids[r]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, cols) = self.value(table).dims2()?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= n {
                return Err(Error::Vocab { id, vocab: n });
            }
            out.extend_from_slice(&src[id * cols..(id + 1) * cols]);
        }
        let value = Tensor::new(vec![ids.len(), cols], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table.0],
        ))
    }

    /// `[n × c] → [n × c·times]`, each column repeated `times` times in place.
    pub fn repeat_cols(&mut self, x: Var, times: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * cols * times);
        for &v in src {
            out.extend(std::iter::repeat_n(v, times));
        }
        let value = Tensor::new(vec![rows, cols * times], out)?;
        Ok(self.push(value, Op::RepeatCols { x: x.0, times }, &[x.0]))
    }

    /// `[1 × c] → [rows × c]`.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let (r, cols) = self.value(x).dims2()?;
        if r != 1 {
            return Err(Error::Dimension(format!(
                "broadcast_rows expects one row, got {r}"
            )));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            out.extend_from_slice(src);
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(value, Op::BroadcastRows(x.0), &[x.0]))
    }

    /// Weighted token cross-entropy: `Σ_r w_r · (−log softmax(z_r)[t_r])`.
    /// Rows with zero weight contribute nothing to the value or the gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (rows, vocab) = self.value(logits).dims2()?;
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::Dimension(format!(
                "{rows} logit rows but {} targets and {} weights",
                targets.len(),
                weights.len()
            )));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; rows * vocab];
        let mut loss = 0.0;
        for r in 0..rows {
            let t = targets[r];
            if t >= vocab {
                return Err(Error::Vocab { id: t, vocab });
            }
            if weights[r] == 0.0 {
                continue;
            }
            let z = &src[r * vocab..(r + 1) * vocab];
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            let mut total = 0.0;
            for (pi, zi) in p.iter_mut().zip(z) {
                *pi = (zi - max).exp();
                total += *pi;
            }
            for pi in p.iter_mut() {
                *pi /= total;
            }
            loss += weights[r] * (max + total.ln() - z[t]);
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[logits.0],
        ))
    }

    /// Reverse pass from a scalar `loss`. Contributions are accumulated in
    /// reverse tape order, so repeated runs give bit-identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut bufs: Vec<Option<Vec<f64>>> = Vec::new();
        bufs.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(Grads { bufs });
        }
        bufs[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = bufs[i].take() else { continue };
            self.backward_node(node, &g, &mut bufs);
        }
        Ok(Grads { bufs })
    }

    fn accumulate<'a>(&self, bufs: &'a mut [Option<Vec<f64>>], idx: usize) -> Option<&'a mut [f64]> {
        if !self.nodes[idx].requires_grad {
            return None;
        }
        let n = self.nodes[idx].value.numel();
        Some(bufs[idx].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    fn backward_node(&self, node: &Node, g: &[f64], bufs: &mut [Option<Vec<f64>>]) {
        let val = |i: usize| self.nodes[i].value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let k = self.nodes[a].value.shape()[1];
                if let Some(da) = self.accumulate(bufs, a) {
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, g, false, val(b), !trans_b, da, true);
                }
                if let Some(db) = self.accumulate(bufs, b) {
                    if trans_b {
                        // B is [n×k]: dB = dCᵀ · A
                        gemm(n, m, k, g, true, val(a), false, db, true);
                    } else {
                        // B is [k×n]: dB = Aᵀ · dC
                        gemm(k, m, n, val(a), true, g, false, db, true);
                    }
                }
            }
            &Op::Add(a, b) => {
                for idx in [a, b] {
                    if let Some(d) = self.accumulate(bufs, idx) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::Mul(a, b) => {
                for (idx, other) in [(a, b), (b, a)] {
                    if let Some(d) = self.accumulate(bufs, idx) {
                        for ((d, g), o) in d.iter_mut().zip(g).zip(val(other)) {
                            *d += g * o;
                        }
                    }
                }
            }
            &Op::Scale(x, c) => {
                if let Some(d) = self.accumulate(bufs, x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
                }
            }
            &Op::Unary(x, kind) => {
                if let Some(d) = self.accumulate(bufs, x) {
                    for ((d, g), xv) in d.iter_mut().zip(g).zip(val(x)) {
                        *d += g * kind.derivative(*xv);
                    }
                }
            }
            &Op::Custom { x, df } => {
                if let Some(d) = self.accumulate(bufs, x) {
                    for ((d, g), xv) in d.iter_mut().zip(g).zip(val(x)) {
                        *d += g * df(*xv);
                    }
                }
            }
            &Op::Softmax(x) => {
                let cols = node.value.shape()[1];
                let y = node.value.data();
                if let Some(d) = self.accumulate(bufs, x) {
                    for ((d, g), y) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            d[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
            }
            &Op::Reduce { x, kind, axis } => {
                let shape = self.nodes[x].value.shape().to_vec();
                if let Some(d) = self.accumulate(bufs, x) {
                    match axis {
                        None => {
                            let c = match kind {
                                ReduceKind::Sum => g[0],
                                ReduceKind::Mean => g[0] / d.len().max(1) as f64,
                            };
                            d.iter_mut().for_each(|d| *d += c);
                        }
                        Some(ax) => {
                            let (outer, len, inner) = split_axis(&shape, ax);
                            let f = match kind {
                                ReduceKind::Sum => 1.0,
                                ReduceKind::Mean => 1.0 / len as f64,
                            };
                            for o in 0..outer {
                                for a in 0..len {
                                    for i in 0..inner {
                                        d[(o * len + a) * inner + i] += f * g[o * inner + i];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::RmsNorm {
                x,
                scale,
                width,
                norms,
            } => {
                let (x, width) = (*x, *width);
                let root = (width as f64).sqrt();
                let h = val(x);
                let sc = scale.map(|s| val(s));
                if let Some(ds) = scale.and_then(|s| self.accumulate(bufs, s)) {
                    for ((hg, gg), n) in h.chunks(width).zip(g.chunks(width)).zip(norms) {
                        for j in 0..width {
                            ds[j] += root * hg[j] / n * gg[j];
                        }
                    }
                }
                if let Some(dx) = self.accumulate(bufs, x) {
                    let mut gu = vec![0.0; width];
                    for (((dg, hg), gg), &n) in dx
                        .chunks_mut(width)
                        .zip(h.chunks(width))
                        .zip(g.chunks(width))
                        .zip(norms)
                    {
                        for j in 0..width {
                            gu[j] = root * gg[j] * sc.map_or(1.0, |s| s[j]);
                        }
                        let dot: f64 = gu.iter().zip(hg).map(|(a, b)| a * b).sum();
                        let n3 = n * n * n;
                        for j in 0..width {
                            dg[j] += gu[j] / n - hg[j] * dot / n3;
                        }
                    }
                }
            }
            &Op::DynTanh {
                x,
                alpha,
                gamma,
                beta,
            } => {
                let cols = node.value.shape()[1];
                let a = val(alpha)[0];
                let gm = val(gamma);
                let h = val(x);
                let mut d_alpha = 0.0;
                let mut d_gamma = vec![0.0; cols];
                let mut d_beta = vec![0.0; cols];
                let mut d_x = vec![0.0; h.len()];
                for ((hr, gr), dxr) in h.chunks(cols).zip(g.chunks(cols)).zip(d_x.chunks_mut(cols)) {
                    for j in 0..cols {
                        let t = (a * hr[j]).tanh();
                        let sech2 = 1.0 - t * t;
                        dxr[j] = gr[j] * gm[j] * a * sech2;
                        d_alpha += gr[j] * gm[j] * hr[j] * sech2;
                        d_gamma[j] += gr[j] * t;
                        d_beta[j] += gr[j];
                    }
                }
                for (idx, src) in [(x, d_x), (gamma, d_gamma), (beta, d_beta), (alpha, vec![d_alpha])] {
                    if let Some(d) = self.accumulate(bufs, idx) {
                        d.iter_mut().zip(&src).for_each(|(d, s)| *d += s);
                    }
                }
            }
            &Op::Rope {
                x,
                seq_len,
                d_head,
                base,
            } => {
                if let Some(d) = self.accumulate(bufs, x) {
                    let cols = node.value.shape()[1];
                    let table = rope_angles(seq_len, d_head, base);
                    let mut back = g.to_vec();
                    rotate_pairs(&mut back, cols, seq_len, d_head, &table, -1.0);
                    d.iter_mut().zip(&back).for_each(|(d, b)| *d += b);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                d_head,
                probs,
            } => {
                let (q, k, v, seq_len, heads, d_head) = (*q, *k, *v, *seq_len, *heads, *d_head);
                let cols = heads * d_head;
                let rows = node.value.shape()[0];
                let batch = rows / seq_len;
                let inv = 1.0 / (d_head as f64).sqrt();
                let (qd, kd, vd) = (val(q), val(k), val(v));
                let mut dq = vec![0.0; rows * cols];
                let mut dk = vec![0.0; rows * cols];
                let mut dv = vec![0.0; rows * cols];
                let mut dp = vec![0.0; seq_len];
                for b in 0..batch {
                    for h in 0..heads {
                        let p = &probs[(b * heads + h) * seq_len * seq_len..][..seq_len * seq_len];
                        let off = |t: usize| (b * seq_len + t) * cols + h * d_head;
                        for t in 0..seq_len {
                            let prow = &p[t * seq_len..(t + 1) * seq_len];
                            let go = &g[off(t)..off(t) + d_head];
                            let mut dot = 0.0;
                            for s in 0..=t {
                                let vs = &vd[off(s)..off(s) + d_head];
                                dp[s] = go.iter().zip(vs).map(|(a, b)| a * b).sum();
                                dot += prow[s] * dp[s];
                                let dvs = &mut dv[off(s)..off(s) + d_head];
                                for (d, x) in dvs.iter_mut().zip(go) {
                                    *d += prow[s] * x;
                                }
                            }
                            let qt = &qd[off(t)..off(t) + d_head];
                            for s in 0..=t {
                                let ds = prow[s] * (dp[s] - dot) * inv;
                                if ds == 0.0 {
                                    continue;
                                }
                                let ks = &kd[off(s)..off(s) + d_head];
                                let dqt = &mut dq[off(t)..off(t) + d_head];
                                for (d, x) in dqt.iter_mut().zip(ks) {
                                    *d += ds * x;
                                }
                                let dks = &mut dk[off(s)..off(s) + d_head];
                                for (d, x) in dks.iter_mut().zip(qt) {
                                    *d += ds * x;
                                }
                            }
                        }
                    }
                }
                for (idx, src) in [(q, dq), (k, dk), (v, dv)] {
                    if let Some(d) = self.accumulate(bufs, idx) {
                        d.iter_mut().zip(&src).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let cols = node.value.shape()[1];
                if let Some(d) = self.accumulate(bufs, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut d[id * cols..(id + 1) * cols];
                        dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]).for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::RepeatCols { x, times } => {
                if let Some(d) = self.accumulate(bufs, x) {
                    for (d, chunk) in d.iter_mut().zip(g.chunks(times)) {
                        *d += chunk.iter().sum::<f64>();
                    }
                }
            }
            &Op::BroadcastRows(x) => {
                let cols = node.value.shape()[1];
                if let Some(d) = self.accumulate(bufs, x) {
                    for row in g.chunks(cols) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let vocab = self.nodes[*logits].value.shape()[1];
                if let Some(d) = self.accumulate(bufs, *logits) {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let c = g[0] * w;
                        let dr = &mut d[r * vocab..(r + 1) * vocab];
                        for (dj, pj) in dr.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                            *dj += c * pj;
                        }
                        dr[t] -= c;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_arithmetic() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1., 2., 3., 4.]);

        let a = tape.constant(t(&[1, 2], &[1., 2.]));
        let b = tape.constant(t(&[2, 1], &[3., 4.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[0.0, 5.0]));
        let mask = t(&[1, 2], &[0.0, f64::NEG_INFINITY]);
        let y = tape.softmax_rows(x, Some(&mask)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);

        for c in [-1e3, 0.0, 7.5, 1e3] {
            let x = tape.constant(Tensor::full(&[1, 3], c));
            let y = tape.softmax_rows(x, None).unwrap();
            for v in tape.value(y).data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }

        let x = tape.constant(t(&[1, 3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let y = tape.softmax_rows(x, None).unwrap();
        for (v, e) in tape.value(y).data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_fully_masked_row_is_degenerate() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        let mask = t(&[2, 2], &[0.0, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]);
        assert!(matches!(
            tape.softmax_rows(x, Some(&mask)),
            Err(Error::DegenerateRow { row: 1 })
        ));
    }

    #[test]
    fn unary_values() {
        assert_eq!(UnaryKind::Silu.apply(0.0), 0.0);
        assert!((UnaryKind::Silu.apply(1.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert_eq!(UnaryKind::Tanh.apply(0.0), 0.0);
        assert_eq!(UnaryKind::Sigmoid.apply(0.0), 0.5);
        // Φ(1) = 0.841344746068543
        assert!((UnaryKind::Gelu.apply(1.0) - 0.841_344_746_068_543).abs() < 1e-14);
    }

    #[test]
    fn reduce_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1., 2., 3.]));
        let s = tape.reduce(x, ReduceKind::Sum, None).unwrap();
        assert_eq!(tape.value(s).data(), &[6.0]);

        let c = tape.constant(Tensor::full(&[2, 5], 4.25));
        let m = tape.reduce(c, ReduceKind::Mean, None).unwrap();
        assert_eq!(tape.value(m).data(), &[4.25]);

        let x = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let m = tape.reduce(x, ReduceKind::Mean, Some(0)).unwrap();
        assert_eq!(tape.value(m).shape(), &[2]);
        assert_eq!(tape.value(m).data(), &[2., 3.]);

        assert!(matches!(
            tape.reduce(x, ReduceKind::Sum, Some(2)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1., 2., 3.]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.reduce(sq, ReduceKind::Sum, None).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2., 4., 6.]);

        let mut tape = Tape::new();
        let a = tape.param(t(&[3], &[0.5, -1., 2.]));
        let b = tape.param(t(&[3], &[4., 5., 6.]));
        let ab = tape.mul(a, b).unwrap();
        let loss = tape.reduce(ab, ReduceKind::Sum, None).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[4., 5., 6.]);
        assert_eq!(grads.get(b).unwrap(), &[0.5, -1., 2.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[2]));
        let y = tape.param(Tensor::ones(&[2]));
        let loss = tape.reduce(x, ReduceKind::Sum, None).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(y).is_none());
        assert_eq!(grads.get(x).unwrap(), &[1., 1.]);
    }

    #[test]
    fn rope_quarter_turn() {
        // position 1, d_head 2, base chosen so the angle is π/2
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1., 0., 1., 0.]));
        let base = 10_000.0;
        let y = tape.rope(x, 2, 2, base).unwrap();
        let v = tape.value(y).data();
        assert_eq!(&v[..2], &[1.0, 0.0]);
        assert!((v[2] - 1f64.cos()).abs() < 1e-15 && (v[3] - 1f64.sin()).abs() < 1e-15);
    }
}

use super::kernels::{self, Layout};
pub use super::kernels::Segment;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale(Var, f64),
    Sum(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
        causal: bool,
        probs: Vec<f64>,
    },
    SoftmaxRows(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    ScaleRows {
        x: Var,
        scales: Vec<f64>,
    },
    ScatterRows {
        base: Var,
        src: Var,
        rows: Vec<usize>,
    },
    MaskedMse {
        pred: Var,
        target: Vec<f64>,
        mask: Vec<bool>,
        count: usize,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation tape.
///
/// Node inputs always precede the node, so append order is a topological
/// order and [`Graph::backward`] is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient stored on a leaf by the last [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].value.take_grad()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            1.0,
            self.data(a),
            Layout::rows(k),
            self.data(b),
            Layout::rows(n),
            0.0,
            &mut out,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = zip_map(self.data(a), self.data(b), |x, y| x * y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    /// `x [m×n] + bias [n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims(x)?;
        if self.value(bias).numel() != n {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let data: Vec<f64> = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(t, Op::AddRow { x, bias }, needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.data(x).iter().map(|v| v * c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::Scale(x, c), needs)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// Exact-erf GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| kernels::gelu(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::Gelu(x), needs)
    }

    /// Per-row normalization over the last dimension followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&1);
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (y, xhat, rstd) =
            kernels::layer_norm_forward(self.data(x), d, self.data(gain), self.data(bias), eps);
        let t = Tensor::new(self.shape(x).to_vec(), y)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Multi-head attention over a single sequence: `q, k, v` are `[n × d]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        causal: bool,
        heads: usize,
    ) -> Result<Var> {
        let (nq, _) = self.dims(q)?;
        let (nk, _) = self.dims(k)?;
        let seg = Segment {
            q_start: 0,
            q_len: nq,
            k_start: 0,
            k_len: nk,
        };
        self.attention_segments(q, k, v, vec![seg], causal, heads)
    }

    /// Multi-head attention over packed sequences. Each segment's queries only
    /// see keys of the same segment; `causal` hides later keys.
    pub fn attention_segments(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        causal: bool,
        heads: usize,
    ) -> Result<Var> {
        let (mq, d) = self.dims(q)?;
        let (mk, dk) = self.dims(k)?;
        if dk != d || self.shape(v) != self.shape(k) {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        for s in &segments {
            if s.q_start + s.q_len > mq || s.k_start + s.k_len > mk || s.k_len == 0 {
                return Err(Error::Contract(format!("attention segment {s:?} out of range")));
            }
            if causal && s.q_len > s.k_len {
                return Err(Error::Contract(
                    "causal attention needs at least as many keys as queries".into(),
                ));
            }
        }
        let (out, probs) = kernels::attention_forward(
            self.data(q),
            self.data(k),
            self.data(v),
            d,
            &segments,
            heads,
            causal,
        );
        let t = Tensor::new(vec![mq, d], out)?;
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                causal,
                probs,
            },
            needs,
        ))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.dims(x)?;
        let mut data = self.data(x).to_vec();
        data.chunks_mut(n).for_each(kernels::softmax_in_place);
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::SoftmaxRows(x), needs))
    }

    /// Mean over unmasked rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let (n, v) = self.dims(logits)?;
        if targets.len() != n || mask.len() != n {
            return Err(Error::shape("softmax_cross_entropy", &[n, v], &[targets.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let mut probs = self.data(logits).to_vec();
        let mut total = 0.0;
        for (i, row) in probs.chunks_mut(v).enumerate() {
            if !mask[i] {
                continue;
            }
            let t = targets[i];
            if t >= v {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: t,
                    size: v,
                });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            kernels::softmax_in_place(row);
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            needs,
        ))
    }

    /// Rows of `table [V×d]` selected by `ids`, giving `[ids.len() × d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims(table)?;
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    size: rows,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let needs = self.needs(table);
        Ok(self.push(
            t,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Multiplies row `i` of `x` by the constant `scales[i]`.
    pub fn scale_rows(&mut self, x: Var, scales: &[f64]) -> Result<Var> {
        let (m, d) = self.dims(x)?;
        if scales.len() != m {
            return Err(Error::shape("scale_rows", self.shape(x), &[scales.len()]));
        }
        let data = self
            .data(x)
            .chunks(d)
            .zip(scales)
            .flat_map(|(row, s)| row.iter().map(move |v| v * s))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(
            t,
            Op::ScaleRows {
                x,
                scales: scales.to_vec(),
            },
            needs,
        ))
    }

    /// Copy of `base` whose rows `rows[i]` are replaced by row `i` of `src`.
    pub fn scatter_rows(&mut self, base: Var, src: Var, rows: &[usize]) -> Result<Var> {
        let (m, d) = self.dims(base)?;
        let (k, ds) = self.dims(src)?;
        if ds != d || k != rows.len() {
            return Err(Error::shape("scatter_rows", self.shape(base), self.shape(src)));
        }
        let mut out = self.data(base).to_vec();
        let s = self.data(src);
        for (i, &r) in rows.iter().enumerate() {
            if r >= m {
                return Err(Error::Index {
                    what: "scatter target",
                    index: r,
                    size: m,
                });
            }
            out[r * d..(r + 1) * d].copy_from_slice(&s[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![m, d], out)?;
        let needs = self.needs(base) || self.needs(src);
        Ok(self.push(
            t,
            Op::ScatterRows {
                base,
                src,
                rows: rows.to_vec(),
            },
            needs,
        ))
    }

    /// Mean over masked entries of `(pred - target)²`; 0 when nothing is masked in.
    pub fn masked_mse(&mut self, pred: Var, target: &[f64], mask: &[bool]) -> Result<Var> {
        let p = self.data(pred);
        if p.len() != target.len() || p.len() != mask.len() {
            return Err(Error::shape("masked_mse", self.shape(pred), &[target.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        let total: f64 = p
            .iter()
            .zip(target)
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|((p, t), _)| (p - t) * (p - t))
            .sum();
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        let needs = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(value),
            Op::MaskedMse {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// Reverse sweep from a scalar `loss`; stores `∂loss/∂leaf` on every leaf
    /// that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.set_grad(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for node in &mut self.nodes[..=loss.0] {
            if matches!(node.op, Op::Leaf) && node.needs_grad && node.value.grad().is_none() {
                node.value.set_grad(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a).expect("matrix");
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let da = slot(grads, *a, m * k);
                    kernels::gemm(
                        m,
                        n,
                        k,
                        1.0,
                        g,
                        Layout::rows(n),
                        self.data(*b),
                        Layout::transposed(n),
                        1.0,
                        da,
                    );
                }
                if self.needs(*b) {
                    let db = slot(grads, *b, k * n);
                    kernels::gemm(
                        k,
                        m,
                        n,
                        1.0,
                        self.data(*a),
                        Layout::transposed(k),
                        g,
                        Layout::rows(n),
                        1.0,
                        db,
                    );
                }
            }
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    if self.needs(x) {
                        axpy(slot(grads, x, g.len()), g, 1.0);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.data(*b);
                    let da = slot(grads, *a, g.len());
                    for ((d, g), b) in da.iter_mut().zip(g).zip(bv) {
                        *d += g * b;
                    }
                }
                if self.needs(*b) {
                    let av = self.data(*a);
                    let db = slot(grads, *b, g.len());
                    for ((d, g), a) in db.iter_mut().zip(g).zip(av) {
                        *d += g * a;
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if self.needs(*x) {
                    axpy(slot(grads, *x, g.len()), g, 1.0);
                }
                if self.needs(*bias) {
                    let n = self.value(*bias).numel();
                    let db = slot(grads, *bias, n);
                    for row in g.chunks(n) {
                        axpy(db, row, 1.0);
                    }
                }
            }
            Op::Scale(x, c) => {
                axpy(slot(grads, *x, g.len()), g, *c);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                slot(grads, *x, n).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Gelu(x) => {
                let xv = self.data(*x);
                let dx = slot(grads, *x, g.len());
                for ((d, g), &x) in dx.iter_mut().zip(g).zip(xv) {
                    *d += g * kernels::gelu_grad(x);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).numel();
                let mut dgain = self.needs(*gain).then(|| vec![0.0; d]);
                let mut dbias = self.needs(*bias).then(|| vec![0.0; d]);
                let dx = kernels::layer_norm_backward(
                    g,
                    xhat,
                    rstd,
                    self.data(*gain),
                    d,
                    dgain.as_deref_mut(),
                    dbias.as_deref_mut(),
                );
                if self.needs(*x) {
                    axpy(slot(grads, *x, dx.len()), &dx, 1.0);
                }
                if let Some(dg) = dgain {
                    axpy(slot(grads, *gain, d), &dg, 1.0);
                }
                if let Some(db) = dbias {
                    axpy(slot(grads, *bias, d), &db, 1.0);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                causal,
                probs,
            } => {
                let d = self.shape(*q)[1];
                let mut dq = self.needs(*q).then(|| vec![0.0; self.value(*q).numel()]);
                let mut dk = self.needs(*k).then(|| vec![0.0; self.value(*k).numel()]);
                let mut dv = self.needs(*v).then(|| vec![0.0; self.value(*v).numel()]);
                kernels::attention_backward(
                    g,
                    self.data(*q),
                    self.data(*k),
                    self.data(*v),
                    probs,
                    d,
                    segments,
                    *heads,
                    *causal,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                for (var, grad) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(grad) = grad {
                        axpy(slot(grads, var, grad.len()), &grad, 1.0);
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap_or(&1);
                let dx = slot(grads, *x, g.len());
                for ((dxr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let inner: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for c in 0..n {
                        dxr[c] += yr[c] * (gr[c] - inner);
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = self.shape(*logits)[1];
                let scale = g[0] / *count as f64;
                let dl = slot(grads, *logits, probs.len());
                for (r, (dr, pr)) in dl.chunks_mut(v).zip(probs.chunks(v)).enumerate() {
                    if !mask[r] {
                        continue;
                    }
                    for c in 0..v {
                        dr[c] += scale * pr[c];
                    }
                    dr[targets[r]] -= scale;
                }
            }
            Op::GatherRows { table, ids } => {
                let d = self.shape(*table)[1];
                let dt = slot(grads, *table, self.value(*table).numel());
                for (i, &id) in ids.iter().enumerate() {
                    axpy(&mut dt[id * d..(id + 1) * d], &g[i * d..(i + 1) * d], 1.0);
                }
            }
            Op::ScaleRows { x, scales } => {
                let d = g.len() / scales.len();
                let dx = slot(grads, *x, g.len());
                for ((dr, gr), s) in dx.chunks_mut(d).zip(g.chunks(d)).zip(scales) {
                    axpy(dr, gr, *s);
                }
            }
            Op::ScatterRows { base, src, rows } => {
                let d = self.shape(*base)[1];
                if self.needs(*base) {
                    let mut gb = g.to_vec();
                    for &r in rows {
                        gb[r * d..(r + 1) * d].iter_mut().for_each(|v| *v = 0.0);
                    }
                    axpy(slot(grads, *base, g.len()), &gb, 1.0);
                }
                if self.needs(*src) {
                    let ds = slot(grads, *src, rows.len() * d);
                    for (i, &r) in rows.iter().enumerate() {
                        axpy(&mut ds[i * d..(i + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                    }
                }
            }
            Op::MaskedMse {
                pred,
                target,
                mask,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let p = self.data(*pred);
                let scale = 2.0 * g[0] / *count as f64;
                let dp = slot(grads, *pred, p.len());
                for i in 0..p.len() {
                    if mask[i] {
                        dp[i] += scale * (p[i] - target[i]);
                    }
                }
            }
            Op::Reshape(x) => {
                axpy(slot(grads, *x, g.len()), g, 1.0);
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let eye = g.leaf(mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let m = g.leaf(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let p = g.matmul(eye, m).unwrap();
        assert_eq!(g.data(p), &[1.0, 2.0, 3.0, 4.0]);

        let row = g.leaf(mat(&[vec![1.0, 2.0]]));
        let col = g.leaf(mat(&[vec![3.0], vec![4.0]]));
        let p = g.matmul(row, col).unwrap();
        assert_eq!(g.data(p), &[11.0]);

        let z = g.leaf(Tensor::zeros(vec![2, 3]).unwrap());
        let any = g.leaf(mat(&[vec![1.0, -2.0], vec![3.5, 4.0], vec![9.0, 0.25]]));
        let p = g.matmul(z, any).unwrap();
        assert_eq!(g.data(p), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]).unwrap());
        let b = g.leaf(Tensor::zeros(vec![2, 3]).unwrap());
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn gelu_fixed_points() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![0.0, 10.0]).unwrap());
        let y = g.gelu(x);
        assert_eq!(g.data(y)[0], 0.0);
        assert!((g.data(y)[1] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::full(vec![3, 4], 0.7).unwrap());
        let l = g
            .softmax_cross_entropy(logits, &[0, 2, 3], &[true, true, true])
            .unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let sat = g.leaf(mat(&[vec![0.0, 1e6, 0.0]]));
        let l = g.softmax_cross_entropy(sat, &[1], &[true]).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_errors() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(vec![2, 3]).unwrap());
        assert!(matches!(
            g.softmax_cross_entropy(logits, &[0, 1], &[false, false]),
            Err(Error::EmptyLoss)
        ));
        assert!(matches!(
            g.softmax_cross_entropy(logits, &[0, 3], &[true, true]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let x = g.leaf(mat(&[vec![3.0, 3.0, 3.0], vec![1.0, -1.0, 0.0]]));
        let gain = g.leaf(Tensor::full(vec![3], 1.0).unwrap());
        let bias = g.leaf(Tensor::zeros(vec![3]).unwrap());
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(&g.data(y)[..3], &[0.0, 0.0, 0.0]);

        let x = g.leaf(mat(&[vec![1.0, -1.0]]));
        let gain = g.leaf(Tensor::full(vec![2], 1.0).unwrap());
        let bias = g.leaf(Tensor::zeros(vec![2]).unwrap());
        let y = g.layer_norm(x, gain, bias, 1e-14).unwrap();
        for (a, b) in g.data(y).iter().zip([1.0, -1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_single_key_returns_value_row() {
        let mut g = Graph::new();
        let q = g.leaf(mat(&[vec![0.3, -1.0, 2.0, 0.5]]));
        let k = g.leaf(mat(&[vec![1.0, 2.0, 3.0, 4.0]]));
        let v = g.leaf(mat(&[vec![5.0, 6.0, 7.0, 8.0]]));
        let o = g.attention(q, k, v, false, 2).unwrap();
        assert_eq!(g.data(o), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn causal_first_position_sees_only_itself() {
        let mut g = Graph::new();
        let x = g.leaf(mat(&[vec![0.1, 0.2], vec![3.0, -4.0], vec![1.0, 1.0]]));
        let v = g.leaf(mat(&[vec![7.0, 8.0], vec![1.0, 2.0], vec![3.0, 4.0]]));
        let o = g.attention(x, x, v, true, 1).unwrap();
        assert_eq!(&g.data(o)[..2], &[7.0, 8.0]);
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![2, 6]).unwrap());
        assert!(matches!(g.attention(x, x, x, false, 4), Err(Error::Config(_))));
    }

    #[test]
    fn backward_sum_and_quadratic() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0])
                .unwrap()
                .requiring_grad(),
        );
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);

        let mut g = Graph::new();
        let data = vec![1.0, -2.0, 0.5, 3.0];
        let x = g.leaf(Tensor::new(vec![4], data.clone()).unwrap().requiring_grad());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let half = g.scale(s, 0.5);
        g.backward(half).unwrap();
        assert_eq!(g.grad(x).unwrap(), data.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![2]).unwrap().requiring_grad());
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates_both_partials() {
        // loss = sum(3x) + sum(x ⊙ x), split by hand: d/dx = 3 + 2x.
        let data = vec![0.5, -1.5, 2.0];
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], data.clone()).unwrap().requiring_grad());
        let a = g.scale(x, 3.0);
        let sa = g.sum(a);
        let b = g.mul(x, x).unwrap();
        let sb = g.sum(b);
        let total = g.add(sa, sb).unwrap();
        g.backward(total).unwrap();
        let want: Vec<f64> = data.iter().map(|x| 3.0 + 2.0 * x).collect();
        assert_eq!(g.grad(x).unwrap(), want.as_slice());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.leaf(Tensor::full(vec![2], 2.0).unwrap());
        let w = g.leaf(Tensor::full(vec![2], 1.0).unwrap().requiring_grad());
        let p = g.mul(c, w).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(w).unwrap(), &[2.0, 2.0]);
    }
}

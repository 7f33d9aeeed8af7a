//! Raw numeric kernels behind the graph operations.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Strided matrix view: element `(r, c)` lives at `r * rs + c * cs`.
#[derive(Clone, Copy)]
pub(crate) struct Layout {
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    /// Row-major `[_ × cols]`.
    pub fn rows(cols: usize) -> Self {
        Layout {
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transposed view of a row-major `[_ × cols]` matrix.
    pub fn transposed(cols: usize) -> Self {
        Layout {
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c = alpha * a·b + beta * c` with `a: [m×k]`, `b: [k×n]`, `c: [m×n]` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() == m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the strided views can touch.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Standard normal CDF via the exact error function.
pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub(crate) fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub(crate) fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

/// In-place numerically stable softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Per-row layer norm. Returns `(y, xhat, rstd)`.
pub(crate) fn layer_norm_forward(
    x: &[f64],
    d: usize,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (xr[c] - mean) * rs;
            xhat[r * d + c] = h;
            y[r * d + c] = h * gain[c] + bias[c];
        }
    }
    (y, xhat, rstd)
}

/// Gradients of layer norm: returns `dx` and accumulates into `dgain`/`dbias`.
pub(crate) fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gain: &[f64],
    d: usize,
    dgain: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
) -> Vec<f64> {
    let rows = rstd.len();
    if let Some(dg) = dgain {
        for r in 0..rows {
            for c in 0..d {
                dg[c] += dy[r * d + c] * xhat[r * d + c];
            }
        }
    }
    if let Some(db) = dbias {
        for r in 0..rows {
            for c in 0..d {
                db[c] += dy[r * d + c];
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    let inv_d = 1.0 / d as f64;
    for r in 0..rows {
        let base = r * d;
        let mut sum_dh = 0.0;
        let mut sum_dh_h = 0.0;
        for c in 0..d {
            let dh = dy[base + c] * gain[c];
            sum_dh += dh;
            sum_dh_h += dh * xhat[base + c];
        }
        for c in 0..d {
            let dh = dy[base + c] * gain[c];
            dx[base + c] = rstd[r] * (dh - inv_d * sum_dh - xhat[base + c] * inv_d * sum_dh_h);
        }
    }
    dx
}

/// Row ranges of one attention segment in the packed query and key matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

impl Segment {
    /// Number of visible keys for query `i` under causal masking. Queries are
    /// aligned to the end of the key range.
    fn visible(&self, i: usize, causal: bool) -> usize {
        if causal {
            (i + 1 + self.k_len - self.q_len).min(self.k_len)
        } else {
            self.k_len
        }
    }
}

/// Multi-head scaled dot-product attention. Returns `(out, probs)`; `probs`
/// stores each query row's full key row (masked entries are exactly 0).
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    spans: &[Segment],
    heads: usize,
    causal: bool,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q_rows = q.len() / d;
    let mut out = vec![0.0; q_rows * d];
    let prob_len: usize = spans.iter().map(|s| s.q_len * s.k_len * heads).sum();
    let mut probs = vec![0.0; prob_len];
    let mut off = 0;
    for s in spans {
        for h in 0..heads {
            let col = h * dh;
            for i in 0..s.q_len {
                let qi = &q[(s.q_start + i) * d + col..(s.q_start + i) * d + col + dh];
                let row = &mut probs[off..off + s.k_len];
                let vis = s.visible(i, causal);
                for (j, p) in row.iter_mut().enumerate().take(vis) {
                    let kj = &k[(s.k_start + j) * d + col..(s.k_start + j) * d + col + dh];
                    *p = scale * dot(qi, kj);
                }
                softmax_in_place(&mut row[..vis]);
                let o = &mut out[(s.q_start + i) * d + col..(s.q_start + i) * d + col + dh];
                for (j, &p) in row.iter().enumerate().take(vis) {
                    let vj = &v[(s.k_start + j) * d + col..(s.k_start + j) * d + col + dh];
                    for c in 0..dh {
                        o[c] += p * vj[c];
                    }
                }
                off += s.k_len;
            }
        }
    }
    (out, probs)
}

/// Backward pass of [`attention_forward`]; accumulates into the given buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    dout: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    d: usize,
    spans: &[Segment],
    heads: usize,
    causal: bool,
    mut dq: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
    mut dv: Option<&mut [f64]>,
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut off = 0;
    let mut ds = Vec::new();
    for s in spans {
        for h in 0..heads {
            let col = h * dh;
            for i in 0..s.q_len {
                let qrow = (s.q_start + i) * d + col;
                let d_out = &dout[qrow..qrow + dh];
                let p = &probs[off..off + s.k_len];
                let vis = s.visible(i, causal);
                ds.clear();
                ds.resize(vis, 0.0);
                let mut weighted = 0.0;
                for j in 0..vis {
                    let vrow = (s.k_start + j) * d + col;
                    let dp = dot(d_out, &v[vrow..vrow + dh]);
                    ds[j] = dp;
                    weighted += p[j] * dp;
                }
                for j in 0..vis {
                    ds[j] = p[j] * (ds[j] - weighted) * scale;
                }
                if let Some(dv) = dv.as_deref_mut() {
                    for j in 0..vis {
                        let vrow = (s.k_start + j) * d + col;
                        for c in 0..dh {
                            dv[vrow + c] += p[j] * d_out[c];
                        }
                    }
                }
                if let Some(dq) = dq.as_deref_mut() {
                    for j in 0..vis {
                        let krow = (s.k_start + j) * d + col;
                        for c in 0..dh {
                            dq[qrow + c] += ds[j] * k[krow + c];
                        }
                    }
                }
                if let Some(dk) = dk.as_deref_mut() {
                    for j in 0..vis {
                        let krow = (s.k_start + j) * d + col;
                        for c in 0..dh {
                            dk[krow + c] += ds[j] * q[qrow + c];
                        }
                    }
                }
                off += s.k_len;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_with_transposed_views() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, 1.0, &a, Layout::rows(2), &b, Layout::rows(2), 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // aᵀ·b
        gemm(2, 2, 2, 1.0, &a, Layout::transposed(2), &b, Layout::rows(2), 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn softmax_row_sums_to_one() {
        let mut row = [1000.0, 1001.0, -5.0, 0.0];
        softmax_in_place(&mut row);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

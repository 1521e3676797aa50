//! Parameter layout plus forward/backward for layer norm and the pre-LN
//! transformer block, in a training form (whole sequence, cached
//! activations) and an incremental inference form (one row, KV cache).

use super::linalg::{add_bias, add_col_sums, dot, gemm, row_affine, softmax_in_place};

pub const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// A contiguous slice of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seg {
    pub off: usize,
    pub len: usize,
}

impl Seg {
    pub fn of<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.off..self.off + self.len]
    }

    pub fn of_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        &mut p[self.off..self.off + self.len]
    }
}

#[derive(Debug, Default)]
pub struct LayoutBuilder {
    pub n: usize,
}

impl LayoutBuilder {
    pub fn seg(&mut self, len: usize) -> Seg {
        let s = Seg { off: self.n, len };
        self.n += len;
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    pub ln1_g: Seg,
    pub ln1_b: Seg,
    pub w_qkv: Seg,
    pub b_qkv: Seg,
    pub w_o: Seg,
    pub b_o: Seg,
    pub ln2_g: Seg,
    pub ln2_b: Seg,
    pub w_1: Seg,
    pub b_1: Seg,
    pub w_2: Seg,
    pub b_2: Seg,
    pub d: usize,
    pub heads: usize,
}

impl BlockLayout {
    pub fn new(b: &mut LayoutBuilder, d: usize, heads: usize) -> Self {
        BlockLayout {
            ln1_g: b.seg(d),
            ln1_b: b.seg(d),
            w_qkv: b.seg(d * 3 * d),
            b_qkv: b.seg(3 * d),
            w_o: b.seg(d * d),
            b_o: b.seg(d),
            ln2_g: b.seg(d),
            ln2_b: b.seg(d),
            w_1: b.seg(d * 4 * d),
            b_1: b.seg(4 * d),
            w_2: b.seg(4 * d * d),
            b_2: b.seg(d),
            d,
            heads,
        }
    }

    pub fn param_count(d: usize) -> usize {
        12 * d * d + 13 * d
    }

    /// (segment, is_gain, is_matrix) for initialization.
    pub fn segments(&self) -> Vec<(Seg, SegKind)> {
        use SegKind::*;
        vec![
            (self.ln1_g, Gain),
            (self.ln1_b, Zero),
            (self.w_qkv, Matrix),
            (self.b_qkv, Zero),
            (self.w_o, Matrix),
            (self.b_o, Zero),
            (self.ln2_g, Gain),
            (self.ln2_b, Zero),
            (self.w_1, Matrix),
            (self.b_1, Zero),
            (self.w_2, Matrix),
            (self.b_2, Zero),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegKind {
    Matrix,
    Gain,
    Zero,
}

pub fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

pub fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

#[derive(Debug, Clone, Default)]
pub struct LnCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Row-wise layer norm of a `rows x d` matrix.
pub fn ln_forward(x: &[f64], g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let d = g.len();
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut cache = LnCache { xhat: vec![0.0; x.len()], rstd: vec![0.0; rows] };
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        cache.rstd[r] = rstd;
        for j in 0..d {
            let xh = (xr[j] - mean) * rstd;
            cache.xhat[r * d + j] = xh;
            y[r * d + j] = xh * g[j] + b[j];
        }
    }
    (y, cache)
}

/// Returns dx; accumulates dg, db.
pub fn ln_backward(dy: &[f64], cache: &LnCache, g: &[f64], dg: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let d = g.len();
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for (r, &rstd) in cache.rstd.iter().enumerate() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dot(&dxhat, xh) / d as f64;
        for j in 0..d {
            dx[r * d + j] = rstd * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

/// Single-row layer norm for inference.
pub fn ln_row(x: &[f64], g: &[f64], b: &[f64], out: &mut [f64]) {
    let d = g.len();
    let mean = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for j in 0..d {
        out[j] = (x[j] - mean) * rstd * g[j] + b[j];
    }
}

#[derive(Debug, Clone, Default)]
pub struct BlockCache {
    t: usize,
    ln1: LnCache,
    a: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    o: Vec<f64>,
    ln2: LnCache,
    m: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

/// Causal self-attention + MLP over a `t x d` input.
pub fn block_forward(p: &[f64], l: &BlockLayout, x: &[f64]) -> (Vec<f64>, BlockCache) {
    let d = l.d;
    let t = x.len() / d;
    let (h, dh) = (l.heads, d / l.heads);
    let scale = 1.0 / (dh as f64).sqrt();

    let (a, ln1) = ln_forward(x, l.ln1_g.of(p), l.ln1_b.of(p));
    let mut qkv = vec![0.0; t * 3 * d];
    gemm(t, d, 3 * d, &a, false, l.w_qkv.of(p), false, &mut qkv, 0.0);
    add_bias(&mut qkv, l.b_qkv.of(p));

    let mut probs = vec![0.0; h * t * t];
    let mut o = vec![0.0; t * d];
    for hi in 0..h {
        let (qo, ko, vo) = (hi * dh, d + hi * dh, 2 * d + hi * dh);
        for i in 0..t {
            let q = &qkv[i * 3 * d + qo..i * 3 * d + qo + dh];
            let row = &mut probs[(hi * t + i) * t..(hi * t + i) * t + i + 1];
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(q, &qkv[j * 3 * d + ko..j * 3 * d + ko + dh]) * scale;
            }
            softmax_in_place(row);
            let out = &mut o[i * d + hi * dh..i * d + hi * dh + dh];
            for (j, pij) in row.iter().enumerate() {
                let v = &qkv[j * 3 * d + vo..j * 3 * d + vo + dh];
                out.iter_mut().zip(v).for_each(|(ov, vv)| *ov += pij * vv);
            }
        }
    }
    let mut y = x.to_vec();
    gemm(t, d, d, &o, false, l.w_o.of(p), false, &mut y, 1.0);
    add_bias(&mut y, l.b_o.of(p));

    let (m, ln2) = ln_forward(&y, l.ln2_g.of(p), l.ln2_b.of(p));
    let mut u = vec![0.0; t * 4 * d];
    gemm(t, d, 4 * d, &m, false, l.w_1.of(p), false, &mut u, 0.0);
    add_bias(&mut u, l.b_1.of(p));
    let g: Vec<f64> = u.iter().map(|&v| gelu(v)).collect();
    gemm(t, 4 * d, d, &g, false, l.w_2.of(p), false, &mut y, 1.0);
    add_bias(&mut y, l.b_2.of(p));
    (y, BlockCache { t, ln1, a, qkv, probs, o, ln2, m, u, g })
}

/// Backpropagates `dy` through the block; accumulates into `grad`, returns dx.
pub fn block_backward(p: &[f64], l: &BlockLayout, c: &BlockCache, dy: &[f64], grad: &mut [f64]) -> Vec<f64> {
    let d = l.d;
    let t = c.t;
    let (h, dh) = (l.heads, d / l.heads);
    let scale = 1.0 / (dh as f64).sqrt();

    // MLP branch.
    gemm(4 * d, t, d, &c.g, true, dy, false, l.w_2.of_mut(grad), 1.0);
    add_col_sums(dy, l.b_2.of_mut(grad));
    let mut dg = vec![0.0; t * 4 * d];
    gemm(t, d, 4 * d, dy, false, l.w_2.of(p), true, &mut dg, 0.0);
    dg.iter_mut().zip(&c.u).for_each(|(v, u)| *v *= gelu_grad(*u));
    gemm(d, t, 4 * d, &c.m, true, &dg, false, l.w_1.of_mut(grad), 1.0);
    add_col_sums(&dg, l.b_1.of_mut(grad));
    let mut dm = vec![0.0; t * d];
    gemm(t, 4 * d, d, &dg, false, l.w_1.of(p), true, &mut dm, 0.0);
    let (dg2, db2) = split2(grad, l.ln2_g, l.ln2_b);
    let dmid = ln_backward(&dm, &c.ln2, l.ln2_g.of(p), dg2, db2);
    let mut dx_mid: Vec<f64> = dy.iter().zip(&dmid).map(|(a, b)| a + b).collect();

    // Attention branch.
    gemm(d, t, d, &c.o, true, &dx_mid, false, l.w_o.of_mut(grad), 1.0);
    add_col_sums(&dx_mid, l.b_o.of_mut(grad));
    let mut d_o = vec![0.0; t * d];
    gemm(t, d, d, &dx_mid, false, l.w_o.of(p), true, &mut d_o, 0.0);
    let mut dqkv = vec![0.0; t * 3 * d];
    let mut dp = vec![0.0; t];
    for hi in 0..h {
        let (qo, ko, vo) = (hi * dh, d + hi * dh, 2 * d + hi * dh);
        for i in 0..t {
            let prow = &c.probs[(hi * t + i) * t..(hi * t + i) * t + i + 1];
            let doi = &d_o[i * d + hi * dh..i * d + hi * dh + dh];
            for j in 0..=i {
                dp[j] = dot(doi, &c.qkv[j * 3 * d + vo..j * 3 * d + vo + dh]);
                let dv = &mut dqkv[j * 3 * d + vo..j * 3 * d + vo + dh];
                dv.iter_mut().zip(doi).for_each(|(a, b)| *a += prow[j] * b);
            }
            let s: f64 = (0..=i).map(|j| prow[j] * dp[j]).sum();
            for j in 0..=i {
                let ds = prow[j] * (dp[j] - s) * scale;
                if ds == 0.0 {
                    continue;
                }
                for e in 0..dh {
                    dqkv[i * 3 * d + qo + e] += ds * c.qkv[j * 3 * d + ko + e];
                    dqkv[j * 3 * d + ko + e] += ds * c.qkv[i * 3 * d + qo + e];
                }
            }
        }
    }
    gemm(d, t, 3 * d, &c.a, true, &dqkv, false, l.w_qkv.of_mut(grad), 1.0);
    add_col_sums(&dqkv, l.b_qkv.of_mut(grad));
    let mut da = vec![0.0; t * d];
    gemm(t, 3 * d, d, &dqkv, false, l.w_qkv.of(p), true, &mut da, 0.0);
    let (dg1, db1) = split2(grad, l.ln1_g, l.ln1_b);
    let dx_ln = ln_backward(&da, &c.ln1, l.ln1_g.of(p), dg1, db1);
    dx_mid.iter_mut().zip(&dx_ln).for_each(|(a, b)| *a += b);
    dx_mid
}

/// Two disjoint mutable segments; `a` must precede `b`.
pub fn split2(p: &mut [f64], a: Seg, b: Seg) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.off + a.len <= b.off);
    let (lo, hi) = p.split_at_mut(b.off);
    (&mut lo[a.off..a.off + a.len], &mut hi[..b.len])
}

/// Keys and values of one layer for a processed prefix.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerKv {
    pub k: Vec<f64>,
    pub v: Vec<f64>,
}

impl LayerKv {
    pub fn len(&self, d: usize) -> usize {
        self.k.len() / d
    }

    pub fn truncate(&mut self, len: usize, d: usize) {
        self.k.truncate(len * d);
        self.v.truncate(len * d);
    }
}

/// Processes one position given the cached prefix; appends its key/value.
pub fn block_step(p: &[f64], l: &BlockLayout, x: &[f64], kv: &mut LayerKv) -> Vec<f64> {
    let d = l.d;
    let (h, dh) = (l.heads, d / l.heads);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut a = vec![0.0; d];
    ln_row(x, l.ln1_g.of(p), l.ln1_b.of(p), &mut a);
    let mut qkv = vec![0.0; 3 * d];
    row_affine(&a, l.w_qkv.of(p), l.b_qkv.of(p), &mut qkv);
    kv.k.extend_from_slice(&qkv[d..2 * d]);
    kv.v.extend_from_slice(&qkv[2 * d..]);
    let n = kv.len(d);
    let mut o = vec![0.0; d];
    let mut s = vec![0.0; n];
    for hi in 0..h {
        let q = &qkv[hi * dh..(hi + 1) * dh];
        for (j, sj) in s.iter_mut().enumerate() {
            *sj = dot(q, &kv.k[j * d + hi * dh..j * d + hi * dh + dh]) * scale;
        }
        softmax_in_place(&mut s);
        let out = &mut o[hi * dh..(hi + 1) * dh];
        for (j, pj) in s.iter().enumerate() {
            let v = &kv.v[j * d + hi * dh..j * d + hi * dh + dh];
            out.iter_mut().zip(v).for_each(|(ov, vv)| *ov += pj * vv);
        }
    }
    let mut y = vec![0.0; d];
    row_affine(&o, l.w_o.of(p), l.b_o.of(p), &mut y);
    y.iter_mut().zip(x).for_each(|(a, b)| *a += b);
    let mut m = vec![0.0; d];
    ln_row(&y, l.ln2_g.of(p), l.ln2_b.of(p), &mut m);
    let mut u = vec![0.0; 4 * d];
    row_affine(&m, l.w_1.of(p), l.b_1.of(p), &mut u);
    u.iter_mut().for_each(|v| *v = gelu(*v));
    let mut z = vec![0.0; d];
    row_affine(&u, l.w_2.of(p), l.b_2.of(p), &mut z);
    y.iter_mut().zip(&z).for_each(|(a, b)| *a += b);
    y
}

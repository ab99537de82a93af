//! Forward/backward kernels for the heavier graph operations.

use crate::par;
use crate::tensor::{gemm, Real, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<F: Real>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    half * x * (F::ONE + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (F::ONE + three * a * x * x);
    half * (F::ONE + t) + half * x * (F::ONE - t * t) * du
}

pub(crate) fn layer_norm_forward<F: Real>(
    x: &Tensor<F>,
    gamma: &[F],
    beta: &[F],
    eps: F,
) -> (Tensor<F>, Vec<F>, Vec<F>) {
    let d = x.last_dim();
    assert_eq!(gamma.len(), d, "layer_norm: gamma length");
    assert_eq!(beta.len(), d, "layer_norm: beta length");
    let rows = x.rows();
    let inv_d = F::ONE / F::from_f64(d as f64);
    let mut out = vec![F::ZERO; x.numel()];
    let mut xhat = vec![F::ZERO; x.numel()];
    let mut rstd = vec![F::ZERO; rows];
    for r in 0..rows {
        let xr = &x.data()[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<F>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::ONE / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gamma[j] + beta[j];
        }
    }
    (Tensor::from_vec(x.shape(), out), xhat, rstd)
}

pub(crate) fn layer_norm_backward<F: Real>(
    g: &[F],
    gamma: &[F],
    xhat: &[F],
    rstd: &[F],
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let d = gamma.len();
    let inv_d = F::ONE / F::from_f64(d as f64);
    let mut dx = vec![F::ZERO; g.len()];
    let mut dgamma = vec![F::ZERO; d];
    let mut dbeta = vec![F::ZERO; d];
    for (r, &rs) in rstd.iter().enumerate() {
        let gr = &g[r * d..(r + 1) * d];
        let hr = &xhat[r * d..(r + 1) * d];
        let mut mean_dh = F::ZERO;
        let mut mean_dh_h = F::ZERO;
        for j in 0..d {
            let dh = gr[j] * gamma[j];
            mean_dh += dh;
            mean_dh_h += dh * hr[j];
            dgamma[j] += gr[j] * hr[j];
            dbeta[j] += gr[j];
        }
        mean_dh *= inv_d;
        mean_dh_h *= inv_d;
        for j in 0..d {
            let dh = gr[j] * gamma[j];
            dx[r * d + j] = rs * (dh - mean_dh - hr[j] * mean_dh_h);
        }
    }
    (dx, dgamma, dbeta)
}

/// Shape bookkeeping for an NHWC convolution with square kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        batch: usize,
        h: usize,
        w: usize,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        assert!(stride >= 1 && k >= 1, "conv: stride and kernel must be positive");
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "conv: kernel larger than padded input");
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (w + 2 * pad - k) / stride + 1;
        ConvGeometry {
            batch,
            h,
            w,
            c_in,
            c_out,
            k,
            stride,
            pad,
            h_out,
            w_out,
        }
    }

    /// Output spatial size for an input side length.
    pub fn out_len(side: usize, k: usize, stride: usize, pad: usize) -> usize {
        (side + 2 * pad - k) / stride + 1
    }

    fn taps(&self) -> usize {
        self.k * self.k * self.c_in
    }

    fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Visit `(col_offset, input_offset)` pairs for one image; padding taps are skipped.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let kc = self.taps();
        for oy in 0..self.h_out {
            for ox in 0..self.w_out {
                let row = (oy * self.w_out + ox) * kc;
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let col = row + (ky * self.k + kx) * self.c_in;
                        let src = (iy as usize * self.w + ix as usize) * self.c_in;
                        f(col, src);
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<F: Real>(
    geom: &ConvGeometry,
    x: &[F],
    w: &[F],
    b: &[F],
) -> (Vec<F>, Vec<F>) {
    let kc = geom.taps();
    let per_image_cols = geom.out_pixels() * kc;
    let per_image_in = geom.h * geom.w * geom.c_in;
    let mut cols = vec![F::ZERO; geom.batch * per_image_cols];
    par::for_each_chunk_mut(&mut cols, per_image_cols, |bi, chunk| {
        let xb = &x[bi * per_image_in..(bi + 1) * per_image_in];
        geom.for_each_tap(|col, src| {
            chunk[col..col + geom.c_in].copy_from_slice(&xb[src..src + geom.c_in]);
        });
    });
    let m = geom.batch * geom.out_pixels();
    let mut out = vec![F::ZERO; m * geom.c_out];
    gemm(m, kc, geom.c_out, &cols, false, w, false, F::ZERO, &mut out);
    for row in out.chunks_mut(geom.c_out) {
        for (o, &bias) in row.iter_mut().zip(b) {
            *o += bias;
        }
    }
    (out, cols)
}

pub(crate) type ConvGrads<F> = (Option<Vec<F>>, Vec<F>, Vec<F>);

pub(crate) fn conv2d_backward<F: Real>(
    geom: &ConvGeometry,
    g: &[F],
    cols: &[F],
    w: &[F],
    need_dx: bool,
) -> ConvGrads<F> {
    let kc = geom.taps();
    let m = geom.batch * geom.out_pixels();
    let mut dw = vec![F::ZERO; kc * geom.c_out];
    gemm(kc, m, geom.c_out, cols, true, g, false, F::ZERO, &mut dw);
    let mut db = vec![F::ZERO; geom.c_out];
    for row in g.chunks(geom.c_out) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    let dx = need_dx.then(|| {
        let mut dcols = vec![F::ZERO; m * kc];
        gemm(m, geom.c_out, kc, g, false, w, true, F::ZERO, &mut dcols);
        let per_image_cols = geom.out_pixels() * kc;
        let per_image_in = geom.h * geom.w * geom.c_in;
        let mut dx = vec![F::ZERO; geom.batch * per_image_in];
        par::for_each_chunk_mut(&mut dx, per_image_in, |bi, dxb| {
            let cb = &dcols[bi * per_image_cols..(bi + 1) * per_image_cols];
            geom.for_each_tap(|col, src| {
                for c in 0..geom.c_in {
                    dxb[src + c] += cb[col + c];
                }
            });
        });
        dx
    });
    (dx, dw, db)
}

pub(crate) fn max_pool2_forward<F: Real>(x: &Tensor<F>) -> (Tensor<F>, Vec<usize>) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "max_pool2: input must be NHWC");
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h / 2, w / 2);
    assert!(ho > 0 && wo > 0, "max_pool2: input too small");
    let mut out = vec![F::ZERO; b * ho * wo * c];
    let mut argmax = vec![0usize; out.len()];
    let data = x.data();
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best_idx = ((bi * h + 2 * oy) * w + 2 * ox) * c + ch;
                    let mut best = data[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ((bi * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                    let o = ((bi * ho + oy) * wo + ox) * c + ch;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }
    (Tensor::from_vec(&[b, ho, wo, c], out), argmax)
}

pub(crate) fn attention_forward<F: Real>(qkv: &Tensor<F>, heads: usize) -> (Tensor<F>, Vec<F>) {
    let s = qkv.shape();
    assert_eq!(s.len(), 3, "attention: input must be [B, T, 3d]");
    let (b, t, d3) = (s[0], s[1], s[2]);
    assert_eq!(d3 % 3, 0, "attention: packed width must be 3d");
    let d = d3 / 3;
    assert!(heads >= 1 && d % heads == 0, "attention: heads must divide d");
    let dh = d / heads;
    let scale = F::ONE / F::from_f64(dh as f64).sqrt();
    let data = qkv.data();
    let parts = par::map_range(b, |bi| {
        let x = &data[bi * t * d3..(bi + 1) * t * d3];
        let mut out = vec![F::ZERO; t * d];
        let mut probs = vec![F::ZERO; heads * t * t];
        let mut row = vec![F::ZERO; t];
        for hh in 0..heads {
            let qo = hh * dh;
            let ko = d + hh * dh;
            let vo = 2 * d + hh * dh;
            for i in 0..t {
                let qi = &x[i * d3 + qo..i * d3 + qo + dh];
                let mut mx = F::from_f64(f64::NEG_INFINITY);
                for (j, r) in row.iter_mut().enumerate() {
                    let kj = &x[j * d3 + ko..j * d3 + ko + dh];
                    let dot: F = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum();
                    *r = dot * scale;
                    mx = mx.max(*r);
                }
                let mut z = F::ZERO;
                for r in row.iter_mut() {
                    *r = (*r - mx).exp();
                    z += *r;
                }
                let p = &mut probs[(hh * t + i) * t..(hh * t + i + 1) * t];
                for (pj, &r) in p.iter_mut().zip(&row) {
                    *pj = r / z;
                }
                let oi = &mut out[i * d + qo..i * d + qo + dh];
                for (j, &pj) in p.iter().enumerate() {
                    let vj = &x[j * d3 + vo..j * d3 + vo + dh];
                    for (o, &v) in oi.iter_mut().zip(vj) {
                        *o += pj * v;
                    }
                }
            }
        }
        (out, probs)
    });
    let mut out = Vec::with_capacity(b * t * d);
    let mut probs = Vec::with_capacity(b * heads * t * t);
    for (o, p) in parts {
        out.extend(o);
        probs.extend(p);
    }
    (Tensor::from_vec(&[b, t, d], out), probs)
}

pub(crate) fn attention_backward<F: Real>(
    qkv: &Tensor<F>,
    heads: usize,
    probs: &[F],
    g: &[F],
) -> Vec<F> {
    let s = qkv.shape();
    let (b, t, d3) = (s[0], s[1], s[2]);
    let d = d3 / 3;
    let dh = d / heads;
    let scale = F::ONE / F::from_f64(dh as f64).sqrt();
    let data = qkv.data();
    let mut dqkv = vec![F::ZERO; b * t * d3];
    par::for_each_chunk_mut(&mut dqkv, t * d3, |bi, dx| {
        let x = &data[bi * t * d3..(bi + 1) * t * d3];
        let gb = &g[bi * t * d..(bi + 1) * t * d];
        let pb = &probs[bi * heads * t * t..(bi + 1) * heads * t * t];
        let mut ds = vec![F::ZERO; t];
        for hh in 0..heads {
            let qo = hh * dh;
            let ko = d + hh * dh;
            let vo = 2 * d + hh * dh;
            for i in 0..t {
                let p = &pb[(hh * t + i) * t..(hh * t + i + 1) * t];
                let go = &gb[i * d + qo..i * d + qo + dh];
                // dP_ij = <dO_i, V_j>; dV_j += P_ij dO_i
                let mut weighted = F::ZERO;
                for j in 0..t {
                    let vj = &x[j * d3 + vo..j * d3 + vo + dh];
                    let dp: F = go.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                    ds[j] = dp;
                    weighted += dp * p[j];
                    let dvj = &mut dx[j * d3 + vo..j * d3 + vo + dh];
                    for (dv, &gv) in dvj.iter_mut().zip(go) {
                        *dv += p[j] * gv;
                    }
                }
                for j in 0..t {
                    ds[j] = p[j] * (ds[j] - weighted) * scale;
                }
                for j in 0..t {
                    let sj = ds[j];
                    for c in 0..dh {
                        let kjc = x[j * d3 + ko + c];
                        let qic = x[i * d3 + qo + c];
                        dx[i * d3 + qo + c] += sj * kjc;
                        dx[j * d3 + ko + c] += sj * qic;
                    }
                }
            }
        }
    });
    dqkv
}

pub(crate) fn soft_ce_forward<F: Real>(
    logits: &Tensor<F>,
    targets: &Tensor<F>,
    weights: &[F],
) -> (F, Vec<F>) {
    let c = logits.last_dim();
    let mut probs = vec![F::ZERO; logits.numel()];
    let mut loss = F::ZERO;
    for (r, &w) in weights.iter().enumerate() {
        let l = &logits.data()[r * c..(r + 1) * c];
        let t = &targets.data()[r * c..(r + 1) * c];
        let mx = l.iter().copied().fold(F::from_f64(f64::NEG_INFINITY), F::max);
        let z: F = l.iter().map(|&v| (v - mx).exp()).sum();
        let lse = mx + z.ln();
        let mut row = F::ZERO;
        for j in 0..c {
            probs[r * c + j] = (l[j] - lse).exp();
            if t[j] != F::ZERO {
                row -= t[j] * (l[j] - lse);
            }
        }
        loss += w * row;
    }
    (loss, probs)
}

//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every node that depends on a trainable leaf.

mod kernels;

use crate::tensor::{gemm, Real, Tensor};

pub use kernels::ConvGeometry;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, F),
    ScaleBy(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
        cols: Vec<F>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<F>,
    },
    RowScale {
        x: Var,
        scales: Vec<F>,
    },
    MeanMiddle {
        x: Var,
        outer: usize,
        middle: usize,
        inner: usize,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<F>,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    PrependToken(Var, Var),
    SliceTokens {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    SoftCrossEntropy {
        logits: Var,
        targets: Tensor<F>,
        weights: Vec<F>,
        probs: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Operation tape.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(va.shape(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// `x + y` with `y` repeated along the leading axes of `x`.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Var {
        let (vx, vy) = (self.value(x), self.value(y));
        let n = vy.numel();
        assert!(
            n > 0 && vx.numel() % n == 0 && vx.shape().ends_with(vy.shape()),
            "add_broadcast: {:?} + {:?}",
            vx.shape(),
            vy.shape()
        );
        let mut data = vx.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (a, &b) in chunk.iter_mut().zip(vy.data()) {
                *a += b;
            }
        }
        let out = Tensor::from_vec(vx.shape(), data);
        let ng = self.needs(x) || self.needs(y);
        self.push(out, Op::AddBroadcast(x, y), ng)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let out = self.value(x).map(|v| v * c);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    /// Multiply `x` by a scalar node.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        let c = self.value(s).item();
        let out = self.value(x).map(|v| v * c);
        let ng = self.needs(x) || self.needs(s);
        self.push(out, Op::ScaleBy(x, s), ng)
    }

    /// `op(a) · op(b)`.
    ///
    /// Without transposes `a` may have any rank and is treated as
    /// `[rows, last_dim]`; the output keeps `a`'s leading axes. With
    /// `trans_a` both operands must be 2-D.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(vb.shape().len(), 2, "matmul: rhs must be 2-D");
        let (m, k) = if trans_a {
            assert_eq!(va.shape().len(), 2, "matmul: transposed lhs must be 2-D");
            (va.shape()[1], va.shape()[0])
        } else {
            (va.rows(), va.last_dim())
        };
        let (kb, n) = if trans_b {
            (vb.shape()[1], vb.shape()[0])
        } else {
            (vb.shape()[0], vb.shape()[1])
        };
        assert_eq!(k, kb, "matmul: inner dims {k} vs {kb}");
        let mut out = vec![F::ZERO; m * n];
        gemm(m, k, n, va.data(), trans_a, vb.data(), trans_b, F::ZERO, &mut out);
        let shape = if trans_a {
            vec![m, n]
        } else {
            let mut s = va.shape().to_vec();
            *s.last_mut().unwrap() = n;
            s
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(
            Tensor::from_vec(&shape, out),
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            ng,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > F::ZERO { v } else { F::ZERO });
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        let ng = self.needs(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Layer normalization over the trailing axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let (out, xhat, rstd) = kernels::layer_norm_forward(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// 2-D convolution over NHWC input; `w` is `[kh*kw*c_in, c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape().len(), 4, "conv2d: input must be NHWC");
        let vw = self.value(w);
        let (batch, h, wd, c_in) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let c_out = vw.shape()[1];
        let taps = vw.shape()[0] / c_in;
        let k = (taps as f64).sqrt().round() as usize;
        assert_eq!(k * k * c_in, vw.shape()[0], "conv2d: weight rows must be k*k*c_in");
        let geom = ConvGeometry::new(batch, h, wd, c_in, c_out, k, stride, pad);
        let (out, cols) = kernels::conv2d_forward(&geom, vx.data(), vw.data(), self.value(b).data());
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            Tensor::from_vec(&[batch, geom.h_out, geom.w_out, c_out], out),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            ng,
        )
    }

    /// 2×2 max pooling with stride 2 over NHWC input.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (out, argmax) = kernels::max_pool2_forward(self.value(x));
        let ng = self.needs(x);
        self.push(out, Op::MaxPool2 { x, argmax }, ng)
    }

    /// Multi-head softmax attention over packed `[B, T, 3d]` projections.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Var {
        let (out, probs) = kernels::attention_forward(self.value(qkv), heads);
        let ng = self.needs(qkv);
        self.push(out, Op::Attention { qkv, heads, probs }, ng)
    }

    /// Scale each leading-axis slice `x[i]` by `scales[i]`.
    pub fn row_scale(&mut self, x: Var, scales: Vec<F>) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape()[0], scales.len(), "row_scale: length mismatch");
        let inner = vx.numel() / scales.len().max(1);
        let mut data = vx.data().to_vec();
        for (chunk, &s) in data.chunks_mut(inner.max(1)).zip(&scales) {
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        let out = Tensor::from_vec(vx.shape(), data);
        let ng = self.needs(x);
        self.push(out, Op::RowScale { x, scales }, ng)
    }

    /// Mean over axis 1 of a rank-3 tensor: `[A, B, C] -> [A, C]`.
    pub fn mean_axis1(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape().len(), 3, "mean_axis1: rank-3 input required");
        let (outer, middle, inner) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert!(middle > 0, "mean_axis1: empty axis");
        let inv = F::ONE / F::from_f64(middle as f64);
        let mut out = vec![F::ZERO; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for m in 0..middle {
                let base = (o * middle + m) * inner;
                for (d, &v) in dst.iter_mut().zip(&vx.data()[base..base + inner]) {
                    *d += v;
                }
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let ng = self.needs(x);
        self.push(
            Tensor::from_vec(&[outer, inner], out),
            Op::MeanMiddle {
                x,
                outer,
                middle,
                inner,
            },
            ng,
        )
    }

    /// Scale every row (trailing axis) to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let d = vx.last_dim();
        let tiny = F::from_f64(1e-30);
        let mut norms = Vec::with_capacity(vx.rows());
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d) {
            let n = row.iter().map(|&v| v * v).sum::<F>().sqrt().max(tiny);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let out = Tensor::from_vec(vx.shape(), data);
        let ng = self.needs(x);
        self.push(out, Op::L2NormalizeRows { x, norms }, ng)
    }

    /// Select rows of a `[R, d]` view; output is `[index.len(), d]`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Var {
        let vx = self.value(x);
        let d = vx.last_dim();
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in &index {
            data.extend_from_slice(vx.row(i));
        }
        let out = Tensor::from_vec(&[index.len(), d], data);
        let ng = self.needs(x);
        self.push(out, Op::GatherRows { x, index }, ng)
    }

    /// `[B, T, d]` with a shared `[d]` token in front -> `[B, T + 1, d]`.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Var {
        let (vx, vt) = (self.value(x), self.value(token));
        assert_eq!(vx.shape().len(), 3, "prepend_token: rank-3 input required");
        let (b, t, d) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert_eq!(vt.numel(), d, "prepend_token: token width");
        let mut data = Vec::with_capacity(b * (t + 1) * d);
        for bi in 0..b {
            data.extend_from_slice(vt.data());
            data.extend_from_slice(&vx.data()[bi * t * d..(bi + 1) * t * d]);
        }
        let out = Tensor::from_vec(&[b, t + 1, d], data);
        let ng = self.needs(x) || self.needs(token);
        self.push(out, Op::PrependToken(x, token), ng)
    }

    /// Tokens `start..start + len` of a `[B, T, d]` tensor.
    pub fn slice_tokens(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape().len(), 3, "slice_tokens: rank-3 input required");
        let (b, t, d) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert!(start + len <= t, "slice_tokens: range out of bounds");
        let mut data = Vec::with_capacity(b * len * d);
        for bi in 0..b {
            let base = (bi * t + start) * d;
            data.extend_from_slice(&vx.data()[base..base + len * d]);
        }
        let out = Tensor::from_vec(&[b, len, d], data);
        let ng = self.needs(x);
        self.push(out, Op::SliceTokens { x, start }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        let ng = self.needs(x);
        self.push(out, Op::Reshape(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: F = self.value(x).data().iter().copied().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// `Σ_i w_i · H(softmax(logits_i), targets_i)` with `H(p, q) = −Σ q log p`.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Tensor<F>, weights: Vec<F>) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.shape(), targets.shape(), "soft_cross_entropy: target shape");
        assert_eq!(vl.rows(), weights.len(), "soft_cross_entropy: weight count");
        let (loss, probs) = kernels::soft_ce_forward(vl, &targets, &weights);
        let ng = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy {
                logits,
                targets,
                weights,
                probs,
            },
            ng,
        )
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(self.value(root).numel(), 1, "backward: root must be scalar");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), F::ONE));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, delta: Tensor<F>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddBroadcast(x, y) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*y) {
                    let vy = self.value(*y);
                    let n = vy.numel();
                    let mut dy = vec![F::ZERO; n];
                    for chunk in g.data().chunks(n) {
                        for (d, &v) in dy.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *y, Tensor::from_vec(vy.shape(), dy));
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::ScaleBy(x, s) => {
                let c = self.value(*s).item();
                if self.needs(*x) {
                    self.accumulate(grads, *x, g.map(|v| v * c));
                }
                if self.needs(*s) {
                    let ds: F = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&a, &b)| a * b)
                        .sum();
                    self.accumulate(grads, *s, Tensor::full(self.value(*s).shape(), ds));
                }
            }
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = if *trans_a {
                    (va.shape()[1], va.shape()[0])
                } else {
                    (va.rows(), va.last_dim())
                };
                let n = g.last_dim();
                if self.needs(*a) {
                    // dA = G · op(B)^T, laid out to match A's storage.
                    let mut da = vec![F::ZERO; m * k];
                    if *trans_a {
                        // A stored [k, m]: dA_stored = op(B) · G^T
                        gemm(k, n, m, vb.data(), *trans_b, g.data(), true, F::ZERO, &mut da);
                    } else {
                        gemm(m, n, k, g.data(), false, vb.data(), !*trans_b, F::ZERO, &mut da);
                    }
                    self.accumulate(grads, *a, Tensor::from_vec(va.shape(), da));
                }
                if self.needs(*b) {
                    let mut db = vec![F::ZERO; k * n];
                    if *trans_b {
                        // B stored [n, k]: dB_stored = G^T · op(A)
                        gemm(n, m, k, g.data(), true, va.data(), *trans_a, F::ZERO, &mut db);
                    } else {
                        gemm(k, m, n, va.data(), !*trans_a, g.data(), false, F::ZERO, &mut db);
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(vb.shape(), db));
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(&gv, &xv)| if xv > F::ZERO { gv } else { F::ZERO })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(vx.shape(), data));
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(&gv, &xv)| gv * kernels::gelu_grad(xv))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(vx.shape(), data));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gamma_v = self.value(*gamma).data();
                let (dx, dgamma, dbeta) = kernels::layer_norm_backward(g.data(), gamma_v, xhat, rstd);
                if self.needs(*x) {
                    self.accumulate(grads, *x, Tensor::from_vec(self.value(*x).shape(), dx));
                }
                self.accumulate(grads, *gamma, Tensor::from_vec(self.value(*gamma).shape(), dgamma));
                self.accumulate(grads, *beta, Tensor::from_vec(self.value(*beta).shape(), dbeta));
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let vw = self.value(*w);
                let (dx, dw, db) =
                    kernels::conv2d_backward(geom, g.data(), cols, vw.data(), self.needs(*x));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::from_vec(self.value(*x).shape(), dx));
                }
                self.accumulate(grads, *w, Tensor::from_vec(vw.shape(), dw));
                self.accumulate(grads, *b, Tensor::from_vec(self.value(*b).shape(), db));
            }
            Op::MaxPool2 { x, argmax } => {
                let vx = self.value(*x);
                let mut dx = vec![F::ZERO; vx.numel()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dx[src] += gv;
                }
                self.accumulate(grads, *x, Tensor::from_vec(vx.shape(), dx));
            }
            Op::Attention { qkv, heads, probs } => {
                let vq = self.value(*qkv);
                let dqkv = kernels::attention_backward(vq, *heads, probs, g.data());
                self.accumulate(grads, *qkv, Tensor::from_vec(vq.shape(), dqkv));
            }
            Op::RowScale { x, scales } => {
                let inner = g.numel() / scales.len().max(1);
                let mut data = g.data().to_vec();
                for (chunk, &s) in data.chunks_mut(inner.max(1)).zip(scales) {
                    chunk.iter_mut().for_each(|v| *v *= s);
                }
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), data));
            }
            Op::MeanMiddle {
                x,
                outer,
                middle,
                inner,
            } => {
                let inv = F::ONE / F::from_f64(*middle as f64);
                let mut dx = vec![F::ZERO; outer * middle * inner];
                for o in 0..*outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for m in 0..*middle {
                        let base = (o * middle + m) * inner;
                        for (d, &v) in dx[base..base + inner].iter_mut().zip(src) {
                            *d = v * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(self.value(*x).shape(), dx));
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let d = y.last_dim();
                let mut dx = vec![F::ZERO; y.numel()];
                for (r, &n) in norms.iter().enumerate() {
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(y.shape(), dx));
            }
            Op::GatherRows { x, index } => {
                let vx = self.value(*x);
                let d = vx.last_dim();
                let mut dx = vec![F::ZERO; vx.numel()];
                for (r, &i) in index.iter().enumerate() {
                    for j in 0..d {
                        dx[i * d + j] += g.data()[r * d + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(vx.shape(), dx));
            }
            Op::PrependToken(x, token) => {
                let vx = self.value(*x);
                let (b, t, d) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let mut dx = Vec::with_capacity(vx.numel());
                let mut dt = vec![F::ZERO; d];
                for bi in 0..b {
                    let base = bi * (t + 1) * d;
                    for (a, &v) in dt.iter_mut().zip(&g.data()[base..base + d]) {
                        *a += v;
                    }
                    dx.extend_from_slice(&g.data()[base + d..base + (t + 1) * d]);
                }
                self.accumulate(grads, *x, Tensor::from_vec(vx.shape(), dx));
                self.accumulate(grads, *token, Tensor::from_vec(self.value(*token).shape(), dt));
            }
            Op::SliceTokens { x, start } => {
                let vx = self.value(*x);
                let (b, t, d) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let len = g.shape()[1];
                let mut dx = vec![F::ZERO; vx.numel()];
                for bi in 0..b {
                    let dst = (bi * t + start) * d;
                    let src = bi * len * d;
                    dx[dst..dst + len * d].copy_from_slice(&g.data()[src..src + len * d]);
                }
                self.accumulate(grads, *x, Tensor::from_vec(vx.shape(), dx));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape));
            }
            Op::Sum(x) => {
                let vx = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(vx.shape(), g.item()));
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let scale = g.item();
                let c = targets.last_dim();
                let mut dl = vec![F::ZERO; probs.len()];
                for (r, &w) in weights.iter().enumerate() {
                    let t = &targets.data()[r * c..(r + 1) * c];
                    let mass: F = t.iter().copied().sum();
                    for j in 0..c {
                        dl[r * c + j] = scale * w * (probs[r * c + j] * mass - t[j]);
                    }
                }
                self.accumulate(grads, *logits, Tensor::from_vec(targets.shape(), dl));
            }
        }
    }
}

#[cfg(test)]
mod tests;

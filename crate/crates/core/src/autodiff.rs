//! Reverse-mode automatic differentiation on a define-by-run tape.
//!
//! Every operation appends a node holding its output value and the indices
//! of its inputs. `backward` walks the tape once in reverse, accumulating
//! gradients only through nodes marked `needs_grad`, so constants and
//! detached values receive exactly zero gradient by construction rather
//! than by numerical accident.
//!
//! Shape errors here are programming errors and panic; fallible validation
//! belongs to the public model APIs layered on top.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Tanh(Var),
    Silu(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Matmul(Var, Var),
    Bmm { a: Var, b: Var, transpose_b: bool },
    AddBiasRows(Var, Var),
    AddBiasChannels(Var, Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    Upsample2x(Var),
    AvgPool2x(Var),
    LayerNorm { x: Var, eps: f64 },
    SoftmaxLast(Var),
    MeanAll(Var),
    Reshape(Var),
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    Patchify { x: Var, patch: usize },
    Unpatchify { x: Var, patch: usize, channels: usize, height: usize, width: usize },
    CatAxis1(Vec<Var>),
    SliceAxis1 { x: Var, start: usize, len: usize },
    MulBcastTokens(Var, Var),
    AddBcastTokens(Var, Var),
    AddBcastRows(Var, Var),
    EmbedRows { table: Var, idx: Vec<usize> },
    DiffH(Var),
    DiffW(Var),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T: Scalar> {
    g: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.g[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.g[v.0].take()
    }
}

/// A linear record of operations supporting a single reverse sweep.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies the value onto a fresh leaf that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        let ng = self.any_grad(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        let ng = self.any_grad(&[a, b]);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).mul(self.value(b));
        let ng = self.any_grad(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(T::of_f64(c));
        let ng = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let cc = T::of_f64(c);
        let value = self.value(a).map(|x| x + cc);
        let ng = self.any_grad(&[a]);
        self.push(value, Op::AddScalar(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.exp());
        let ng = self.any_grad(&[a]);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        let ng = self.any_grad(&[a]);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.any_grad(&[a]);
        self.push(value, Op::Silu(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.abs());
        let ng = self.any_grad(&[a]);
        self.push(value, Op::Abs(a), ng)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi, "clamp bounds out of order");
        let (l, h) = (T::of_f64(lo), T::of_f64(hi));
        let value = self.value(a).map(|x| if x < l { l } else if x > h { h } else { x });
        let ng = self.any_grad(&[a]);
        self.push(value, Op::Clamp(a, lo, hi), ng)
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.any_grad(&[a, b]);
        self.push(value, Op::Matmul(a, b), ng)
    }

    /// Batched product over matching leading groups.
    /// `[g,m,k] x [g,k,n] -> [g,m,n]`, or with `transpose_b`
    /// `[g,m,k] x [g,n,k] -> [g,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let (g, m, k) = dims3(self.value(a).shape());
        let (gb, b0, b1) = dims3(self.value(b).shape());
        assert_eq!(g, gb, "bmm group mismatch");
        let n = if transpose_b {
            assert_eq!(b1, k, "bmm inner dimension mismatch");
            b0
        } else {
            assert_eq!(b0, k, "bmm inner dimension mismatch");
            b1
        };
        let mut out = vec![T::zero(); g * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for gi in 0..g {
                let ag = ArrayView2::from_shape((m, k), &av[gi * m * k..(gi + 1) * m * k]).unwrap();
                let bg = ArrayView2::from_shape((b0, b1), &bv[gi * b0 * b1..(gi + 1) * b0 * b1]).unwrap();
                let bg = if transpose_b { bg.reversed_axes() } else { bg };
                let mut og = ArrayViewMut2::from_shape((m, n), &mut out[gi * m * n..(gi + 1) * m * n]).unwrap();
                general_mat_mul(T::one(), &ag, &bg, T::zero(), &mut og);
            }
        }
        let value = Tensor::new(vec![g, m, n], out);
        let ng = self.any_grad(&[a, b]);
        self.push(value, Op::Bmm { a, b, transpose_b }, ng)
    }

    /// `[r,d] + [d]` broadcast over rows.
    pub fn add_bias_rows(&mut self, x: Var, bias: Var) -> Var {
        let (r, d) = dims2(self.value(x).shape());
        assert_eq!(self.value(bias).shape(), &[d], "bias width mismatch");
        let mut out = self.value(x).data().to_vec();
        let bv = self.value(bias).data();
        for i in 0..r {
            for j in 0..d {
                out[i * d + j] = out[i * d + j] + bv[j];
            }
        }
        let value = Tensor::new(vec![r, d], out);
        let ng = self.any_grad(&[x, bias]);
        self.push(value, Op::AddBiasRows(x, bias), ng)
    }

    /// `[b,c,h,w] + [c]` broadcast over batch and spatial dims.
    pub fn add_bias_channels(&mut self, x: Var, bias: Var) -> Var {
        let (b, c, h, w) = dims4(self.value(x).shape());
        assert_eq!(self.value(bias).shape(), &[c], "bias channel mismatch");
        let hw = h * w;
        let mut out = self.value(x).data().to_vec();
        let bv = self.value(bias).data();
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                for e in 0..hw {
                    out[base + e] = out[base + e] + bv[ci];
                }
            }
        }
        let value = Tensor::new(vec![b, c, h, w], out);
        let ng = self.any_grad(&[x, bias]);
        self.push(value, Op::AddBiasChannels(x, bias), ng)
    }

    /// 2D convolution, `x: [b,cin,h,w]`, `w: [cout,cin,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (b, cin, h, wd) = dims4(self.value(x).shape());
        let (cout, cin2, kh, kw) = dims4(self.value(w).shape());
        assert_eq!(cin, cin2, "conv2d channel mismatch");
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d kernel larger than input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let kk = cin * kh * kw;
        let mut out = vec![T::zero(); b * cout * ho * wo];
        let mut cols = vec![T::zero(); kk * ho * wo];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let wmat = ArrayView2::from_shape((cout, kk), wv).unwrap();
            for bi in 0..b {
                im2col(&xv[bi * cin * h * wd..], cin, h, wd, kh, kw, stride, pad, ho, wo, &mut cols);
                let cmat = ArrayView2::from_shape((kk, ho * wo), &cols[..]).unwrap();
                let mut og = ArrayViewMut2::from_shape(
                    (cout, ho * wo),
                    &mut out[bi * cout * ho * wo..(bi + 1) * cout * ho * wo],
                )
                .unwrap();
                general_mat_mul(T::one(), &wmat, &cmat, T::zero(), &mut og);
            }
        }
        let value = Tensor::new(vec![b, cout, ho, wo], out);
        let ng = self.any_grad(&[x, w]);
        self.push(value, Op::Conv2d { x, w, stride, pad }, ng)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (b, c, h, w) = dims4(self.value(x).shape());
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * c * 4 * h * w];
        for bc in 0..b * c {
            for i in 0..h {
                for j in 0..w {
                    let v = xv[(bc * h + i) * w + j];
                    let base = bc * 4 * h * w;
                    out[base + (2 * i) * 2 * w + 2 * j] = v;
                    out[base + (2 * i) * 2 * w + 2 * j + 1] = v;
                    out[base + (2 * i + 1) * 2 * w + 2 * j] = v;
                    out[base + (2 * i + 1) * 2 * w + 2 * j + 1] = v;
                }
            }
        }
        let value = Tensor::new(vec![b, c, 2 * h, 2 * w], out);
        let ng = self.any_grad(&[x]);
        self.push(value, Op::Upsample2x(x), ng)
    }

    /// 2x2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2x(&mut self, x: Var) -> Var {
        let (b, c, h, w) = dims4(self.value(x).shape());
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2x needs even spatial dims");
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let quarter = T::of_f64(0.25);
        let mut out = vec![T::zero(); b * c * ho * wo];
        for bc in 0..b * c {
            for i in 0..ho {
                for j in 0..wo {
                    let base = bc * h * w;
                    let s = xv[base + (2 * i) * w + 2 * j]
                        + xv[base + (2 * i) * w + 2 * j + 1]
                        + xv[base + (2 * i + 1) * w + 2 * j]
                        + xv[base + (2 * i + 1) * w + 2 * j + 1];
                    out[(bc * ho + i) * wo + j] = s * quarter;
                }
            }
        }
        let value = Tensor::new(vec![b, c, ho, wo], out);
        let ng = self.any_grad(&[x]);
        self.push(value, Op::AvgPool2x(x), ng)
    }

    /// Normalizes over the last axis without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let shape = self.value(x).shape().to_vec();
        let last = *shape.last().expect("layer_norm on scalar");
        let rows = self.value(x).numel() / last;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * last..(r + 1) * last];
            let (mean, var) = row_moments(row);
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..last {
                out[r * last + j] = T::of_f64((row[j].as_f64() - mean) * inv);
            }
        }
        let value = Tensor::new(shape, out);
        let ng = self.any_grad(&[x]);
        self.push(value, Op::LayerNorm { x, eps }, ng)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let shape = self.value(x).shape().to_vec();
        let last = *shape.last().expect("softmax on scalar");
        let rows = self.value(x).numel() / last;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * last..(r + 1) * last];
            let mut max = row[0];
            for &v in row.iter() {
                if v > max {
                    max = v;
                }
            }
            let mut sum = T::zero();
            for j in 0..last {
                let e = (row[j] - max).exp();
                out[r * last + j] = e;
                sum = sum + e;
            }
            for j in 0..last {
                out[r * last + j] = out[r * last + j] / sum;
            }
        }
        let value = Tensor::new(shape, out);
        let ng = self.any_grad(&[x]);
        self.push(value, Op::SoftmaxLast(x), ng)
    }

    /// Mean over every element, producing a `[1]` tensor.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let m = self.value(x).mean_f64();
        let ng = self.any_grad(&[x]);
        self.push(Tensor::scalar(T::of_f64(m)), Op::MeanAll(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Var {
        let value = self.value(x).reshaped(shape);
        let ng = self.any_grad(&[x]);
        self.push(value, Op::Reshape(x), ng)
    }

    /// `[b,t,d] -> [b*heads,t,d/heads]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Var {
        let (b, t, d) = dims3(self.value(x).shape());
        assert_eq!(d % heads, 0, "width not divisible by heads");
        let dh = d / heads;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for hh in 0..heads {
                for tt in 0..t {
                    let src = (bi * t + tt) * d + hh * dh;
                    let dst = ((bi * heads + hh) * t + tt) * dh;
                    out[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        let value = Tensor::new(vec![b * heads, t, dh], out);
        let ng = self.any_grad(&[x]);
        self.push(value, Op::SplitHeads { x, heads }, ng)
    }

    /// `[b*heads,t,d/heads] -> [b,t,d]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Var {
        let (bh, t, dh) = dims3(self.value(x).shape());
        assert_eq!(bh % heads, 0, "group count not divisible by heads");
        let b = bh / heads;
        let d = dh * heads;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for hh in 0..heads {
                for tt in 0..t {
                    let src = ((bi * heads + hh) * t + tt) * dh;
                    let dst = (bi * t + tt) * d + hh * dh;
                    out[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        let value = Tensor::new(vec![b, t, d], out);
        let ng = self.any_grad(&[x]);
        self.push(value, Op::MergeHeads { x, heads }, ng)
    }

    /// `[b,c,h,w] -> [b,(h/p)*(w/p),c*p*p]` row-major over the patch grid.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Var {
        let (b, c, h, w) = dims4(self.value(x).shape());
        assert!(h % patch == 0 && w % patch == 0, "patch does not tile input");
        let (gh, gw) = (h / patch, w / patch);
        let (t, p) = (gh * gw, c * patch * patch);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for gi in 0..gh {
                for gj in 0..gw {
                    let tt = gi * gw + gj;
                    for ci in 0..c {
                        for di in 0..patch {
                            for dj in 0..patch {
                                let src = ((bi * c + ci) * h + gi * patch + di) * w + gj * patch + dj;
                                let dst = (bi * t + tt) * p + (ci * patch + di) * patch + dj;
                                out[dst] = xv[src];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, t, p], out);
        let ng = self.any_grad(&[x]);
        self.push(value, Op::Patchify { x, patch }, ng)
    }

    /// Inverse of [`Tape::patchify`] for the given output geometry.
    pub fn unpatchify(&mut self, x: Var, patch: usize, channels: usize, height: usize, width: usize) -> Var {
        let (b, t, p) = dims3(self.value(x).shape());
        assert!(height % patch == 0 && width % patch == 0, "patch does not tile output");
        let (gh, gw) = (height / patch, width / patch);
        assert_eq!(t, gh * gw, "token count does not match grid");
        assert_eq!(p, channels * patch * patch, "token width does not match patch");
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for gi in 0..gh {
                for gj in 0..gw {
                    let tt = gi * gw + gj;
                    for ci in 0..channels {
                        for di in 0..patch {
                            for dj in 0..patch {
                                let dst = ((bi * channels + ci) * height + gi * patch + di) * width + gj * patch + dj;
                                let src = (bi * t + tt) * p + (ci * patch + di) * patch + dj;
                                out[dst] = xv[src];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, channels, height, width], out);
        let ng = self.any_grad(&[x]);
        self.push(value, Op::Unpatchify { x, patch, channels, height, width }, ng)
    }

    /// Concatenation along axis 1 of same-rank tensors.
    pub fn cat_axis1(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "cat of nothing");
        let first = self.value(parts[0]).shape().to_vec();
        assert!(first.len() >= 2, "cat_axis1 needs rank >= 2");
        let outer = first[0];
        let inner: usize = first[2..].iter().product();
        let mut total = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(s[0], outer, "cat_axis1 outer mismatch");
            assert_eq!(&s[2..], &first[2..], "cat_axis1 trailing mismatch");
            total += s[1];
        }
        let mut shape = first.clone();
        shape[1] = total;
        let mut out = vec![T::zero(); outer * total * inner];
        let mut offset = 0usize;
        for &p in parts {
            let s1 = self.value(p).shape()[1];
            let pv = self.value(p).data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                let src = o * s1 * inner;
                out[dst..dst + s1 * inner].copy_from_slice(&pv[src..src + s1 * inner]);
            }
            offset += s1;
        }
        let value = Tensor::new(shape, out);
        let ng = self.any_grad(parts);
        self.push(value, Op::CatAxis1(parts.to_vec()), ng)
    }

    /// Contiguous slice `[start, start+len)` along axis 1.
    pub fn slice_axis1(&mut self, x: Var, start: usize, len: usize) -> Var {
        let shape = self.value(x).shape().to_vec();
        assert!(shape.len() >= 2, "slice_axis1 needs rank >= 2");
        let (outer, mid) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        assert!(start + len <= mid, "slice_axis1 out of range");
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            let src = (o * mid + start) * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&xv[src..src + len * inner]);
        }
        let mut oshape = shape.clone();
        oshape[1] = len;
        let value = Tensor::new(oshape, out);
        let ng = self.any_grad(&[x]);
        self.push(value, Op::SliceAxis1 { x, start, len }, ng)
    }

    /// `[b,t,d] * [b,d]` with the factor broadcast over tokens.
    pub fn mul_bcast_tokens(&mut self, x: Var, s: Var) -> Var {
        let (b, t, d) = dims3(self.value(x).shape());
        assert_eq!(self.value(s).shape(), &[b, d], "broadcast factor shape mismatch");
        let xv = self.value(x).data();
        let sv = self.value(s).data();
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for tt in 0..t {
                let base = (bi * t + tt) * d;
                for j in 0..d {
                    out[base + j] = xv[base + j] * sv[bi * d + j];
                }
            }
        }
        let value = Tensor::new(vec![b, t, d], out);
        let ng = self.any_grad(&[x, s]);
        self.push(value, Op::MulBcastTokens(x, s), ng)
    }

    /// `[b,t,d] + [b,d]` with the shift broadcast over tokens.
    pub fn add_bcast_tokens(&mut self, x: Var, s: Var) -> Var {
        let (b, t, d) = dims3(self.value(x).shape());
        assert_eq!(self.value(s).shape(), &[b, d], "broadcast shift shape mismatch");
        let xv = self.value(x).data();
        let sv = self.value(s).data();
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for tt in 0..t {
                let base = (bi * t + tt) * d;
                for j in 0..d {
                    out[base + j] = xv[base + j] + sv[bi * d + j];
                }
            }
        }
        let value = Tensor::new(vec![b, t, d], out);
        let ng = self.any_grad(&[x, s]);
        self.push(value, Op::AddBcastTokens(x, s), ng)
    }

    /// `[b,t,d] + [t,d]` with the addend broadcast over the batch.
    pub fn add_bcast_rows(&mut self, x: Var, p: Var) -> Var {
        let (b, t, d) = dims3(self.value(x).shape());
        assert_eq!(self.value(p).shape(), &[t, d], "broadcast rows shape mismatch");
        let xv = self.value(x).data();
        let pv = self.value(p).data();
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for e in 0..t * d {
                out[bi * t * d + e] = xv[bi * t * d + e] + pv[e];
            }
        }
        let value = Tensor::new(vec![b, t, d], out);
        let ng = self.any_grad(&[x, p]);
        self.push(value, Op::AddBcastRows(x, p), ng)
    }

    /// Gathers rows of `table: [n,d]` at the given indices into `[idx.len(),d]`.
    pub fn embed_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let (n, d) = dims2(self.value(table).shape());
        let tv = self.value(table).data();
        let mut out = vec![T::zero(); idx.len() * d];
        for (i, &row) in idx.iter().enumerate() {
            assert!(row < n, "embedding index {row} out of range for table of {n}");
            out[i * d..(i + 1) * d].copy_from_slice(&tv[row * d..(row + 1) * d]);
        }
        let value = Tensor::new(vec![idx.len(), d], out);
        let ng = self.any_grad(&[table]);
        self.push(value, Op::EmbedRows { table, idx: idx.to_vec() }, ng)
    }

    /// Vertical forward difference: `y[i,j] = x[i+1,j] - x[i,j]`.
    pub fn diff_h(&mut self, x: Var) -> Var {
        let (b, c, h, w) = dims4(self.value(x).shape());
        assert!(h >= 2, "diff_h needs height >= 2");
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * c * (h - 1) * w];
        for bc in 0..b * c {
            for i in 0..h - 1 {
                for j in 0..w {
                    out[(bc * (h - 1) + i) * w + j] =
                        xv[(bc * h + i + 1) * w + j] - xv[(bc * h + i) * w + j];
                }
            }
        }
        let value = Tensor::new(vec![b, c, h - 1, w], out);
        let ng = self.any_grad(&[x]);
        self.push(value, Op::DiffH(x), ng)
    }

    /// Horizontal forward difference: `y[i,j] = x[i,j+1] - x[i,j]`.
    pub fn diff_w(&mut self, x: Var) -> Var {
        let (b, c, h, w) = dims4(self.value(x).shape());
        assert!(w >= 2, "diff_w needs width >= 2");
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * c * h * (w - 1)];
        for bc in 0..b * c {
            for i in 0..h {
                for j in 0..w - 1 {
                    out[(bc * h + i) * (w - 1) + j] =
                        xv[(bc * h + i) * w + j + 1] - xv[(bc * h + i) * w + j];
                }
            }
        }
        let value = Tensor::new(vec![b, c, h, w - 1], out);
        let ng = self.any_grad(&[x]);
        self.push(value, Op::DiffW(x), ng)
    }

    /// Reverse sweep from a scalar loss. Returns per-node gradients.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut g: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = g[i].clone() else { continue };
            for (j, contrib) in self.op_backward(i, &gy) {
                if !self.nodes[j].needs_grad {
                    continue;
                }
                match &mut g[j] {
                    Some(t) => t.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Grads { g }
    }

    fn op_backward(&self, i: usize, gy: &Tensor<T>) -> Vec<(usize, Tensor<T>)> {
        let v = |j: Var| &self.nodes[j.0].value;
        let y = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(a.0, gy.clone()), (b.0, gy.clone())],
            Op::Sub(a, b) => vec![(a.0, gy.clone()), (b.0, gy.scale(-T::one()))],
            Op::Mul(a, b) => vec![(a.0, gy.mul(v(*b))), (b.0, gy.mul(v(*a)))],
            Op::Scale(a, c) => vec![(a.0, gy.scale(T::of_f64(*c)))],
            Op::AddScalar(a) => vec![(a.0, gy.clone())],
            Op::Exp(a) => vec![(a.0, gy.mul(y))],
            Op::Tanh(a) => vec![(a.0, gy.zip_map(y, |g, t| g * (T::one() - t * t)))],
            Op::Silu(a) => vec![(a.0, gy.zip_map(v(*a), |g, x| {
                let s = sigmoid(x);
                g * s * (T::one() + x * (T::one() - s))
            }))],
            Op::Abs(a) => vec![(a.0, gy.zip_map(v(*a), |g, x| {
                if x > T::zero() {
                    g
                } else if x < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            }))],
            Op::Clamp(a, lo, hi) => {
                let (l, h) = (T::of_f64(*lo), T::of_f64(*hi));
                vec![(a.0, gy.zip_map(v(*a), |g, x| if x >= l && x <= h { g } else { T::zero() }))]
            }
            Op::Matmul(a, b) => {
                let mut out = Vec::new();
                if self.nodes[a.0].needs_grad {
                    out.push((a.0, gy.matmul_nt(v(*b))));
                }
                if self.nodes[b.0].needs_grad {
                    out.push((b.0, v(*a).matmul_tn(gy)));
                }
                out
            }
            Op::Bmm { a, b, transpose_b } => self.bmm_backward(*a, *b, *transpose_b, gy),
            Op::AddBiasRows(x, bias) => {
                let (r, d) = dims2(gy.shape());
                let mut out = Vec::new();
                if self.nodes[x.0].needs_grad {
                    out.push((x.0, gy.clone()));
                }
                if self.nodes[bias.0].needs_grad {
                    let gv = gy.data();
                    let mut db = vec![T::zero(); d];
                    for i in 0..r {
                        for j in 0..d {
                            db[j] = db[j] + gv[i * d + j];
                        }
                    }
                    out.push((bias.0, Tensor::new(vec![d], db)));
                }
                out
            }
            Op::AddBiasChannels(x, bias) => {
                let (b, c, h, w) = dims4(gy.shape());
                let mut out = Vec::new();
                if self.nodes[x.0].needs_grad {
                    out.push((x.0, gy.clone()));
                }
                if self.nodes[bias.0].needs_grad {
                    let gv = gy.data();
                    let mut db = vec![T::zero(); c];
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * h * w;
                            let mut acc = T::zero();
                            for e in 0..h * w {
                                acc = acc + gv[base + e];
                            }
                            db[ci] = db[ci] + acc;
                        }
                    }
                    out.push((bias.0, Tensor::new(vec![c], db)));
                }
                out
            }
            Op::Conv2d { x, w, stride, pad } => self.conv2d_backward(*x, *w, *stride, *pad, gy),
            Op::Upsample2x(x) => {
                let (b, c, h2, w2) = dims4(gy.shape());
                let (h, w) = (h2 / 2, w2 / 2);
                let gv = gy.data();
                let mut dx = vec![T::zero(); b * c * h * w];
                for bc in 0..b * c {
                    for i in 0..h {
                        for j in 0..w {
                            let base = bc * h2 * w2;
                            dx[(bc * h + i) * w + j] = gv[base + (2 * i) * w2 + 2 * j]
                                + gv[base + (2 * i) * w2 + 2 * j + 1]
                                + gv[base + (2 * i + 1) * w2 + 2 * j]
                                + gv[base + (2 * i + 1) * w2 + 2 * j + 1];
                        }
                    }
                }
                vec![(x.0, Tensor::new(vec![b, c, h, w], dx))]
            }
            Op::AvgPool2x(x) => {
                let (b, c, ho, wo) = dims4(gy.shape());
                let (h, w) = (ho * 2, wo * 2);
                let gv = gy.data();
                let quarter = T::of_f64(0.25);
                let mut dx = vec![T::zero(); b * c * h * w];
                for bc in 0..b * c {
                    for i in 0..ho {
                        for j in 0..wo {
                            let gq = gv[(bc * ho + i) * wo + j] * quarter;
                            let base = bc * h * w;
                            dx[base + (2 * i) * w + 2 * j] = gq;
                            dx[base + (2 * i) * w + 2 * j + 1] = gq;
                            dx[base + (2 * i + 1) * w + 2 * j] = gq;
                            dx[base + (2 * i + 1) * w + 2 * j + 1] = gq;
                        }
                    }
                }
                vec![(x.0, Tensor::new(vec![b, c, h, w], dx))]
            }
            Op::LayerNorm { x, eps } => {
                let shape = v(*x).shape().to_vec();
                let last = *shape.last().unwrap();
                let rows = v(*x).numel() / last;
                let xv = v(*x).data();
                let yv = y.data();
                let gv = gy.data();
                let mut dx = vec![T::zero(); xv.len()];
                for r in 0..rows {
                    let xr = &xv[r * last..(r + 1) * last];
                    let (_, var) = row_moments(xr);
                    let inv = 1.0 / (var + eps).sqrt();
                    let mut mg = 0.0f64;
                    let mut mgy = 0.0f64;
                    for j in 0..last {
                        let g = gv[r * last + j].as_f64();
                        mg += g;
                        mgy += g * yv[r * last + j].as_f64();
                    }
                    mg /= last as f64;
                    mgy /= last as f64;
                    for j in 0..last {
                        let g = gv[r * last + j].as_f64();
                        let yy = yv[r * last + j].as_f64();
                        dx[r * last + j] = T::of_f64((g - mg - yy * mgy) * inv);
                    }
                }
                vec![(x.0, Tensor::new(shape, dx))]
            }
            Op::SoftmaxLast(x) => {
                let shape = y.shape().to_vec();
                let last = *shape.last().unwrap();
                let rows = y.numel() / last;
                let yv = y.data();
                let gv = gy.data();
                let mut dx = vec![T::zero(); yv.len()];
                for r in 0..rows {
                    let mut dot = T::zero();
                    for j in 0..last {
                        dot = dot + gv[r * last + j] * yv[r * last + j];
                    }
                    for j in 0..last {
                        dx[r * last + j] = yv[r * last + j] * (gv[r * last + j] - dot);
                    }
                }
                vec![(x.0, Tensor::new(shape, dx))]
            }
            Op::MeanAll(x) => {
                let n = v(*x).numel();
                let c = gy.data()[0] / T::of_f64(n as f64);
                vec![(x.0, Tensor::full(v(*x).shape().to_vec(), c))]
            }
            Op::Reshape(x) => vec![(x.0, gy.reshaped(v(*x).shape().to_vec()))],
            Op::SplitHeads { x, heads } => {
                let (b, t, d) = dims3(v(*x).shape());
                let dh = d / heads;
                let gv = gy.data();
                let mut dx = vec![T::zero(); gv.len()];
                for bi in 0..b {
                    for hh in 0..*heads {
                        for tt in 0..t {
                            let dst = (bi * t + tt) * d + hh * dh;
                            let src = ((bi * heads + hh) * t + tt) * dh;
                            dx[dst..dst + dh].copy_from_slice(&gv[src..src + dh]);
                        }
                    }
                }
                vec![(x.0, Tensor::new(vec![b, t, d], dx))]
            }
            Op::MergeHeads { x, heads } => {
                let (bh, t, dh) = dims3(v(*x).shape());
                let b = bh / heads;
                let d = dh * heads;
                let gv = gy.data();
                let mut dx = vec![T::zero(); gv.len()];
                for bi in 0..b {
                    for hh in 0..*heads {
                        for tt in 0..t {
                            let dst = ((bi * heads + hh) * t + tt) * dh;
                            let src = (bi * t + tt) * d + hh * dh;
                            dx[dst..dst + dh].copy_from_slice(&gv[src..src + dh]);
                        }
                    }
                }
                vec![(x.0, Tensor::new(vec![bh, t, dh], dx))]
            }
            Op::Patchify { x, patch } => {
                let (b, c, h, w) = dims4(v(*x).shape());
                let (gh, gw) = (h / patch, w / patch);
                let (t, p) = (gh * gw, c * patch * patch);
                let gv = gy.data();
                let mut dx = vec![T::zero(); gv.len()];
                for bi in 0..b {
                    for gi in 0..gh {
                        for gj in 0..gw {
                            let tt = gi * gw + gj;
                            for ci in 0..c {
                                for di in 0..*patch {
                                    for dj in 0..*patch {
                                        let dst = ((bi * c + ci) * h + gi * patch + di) * w + gj * patch + dj;
                                        let src = (bi * t + tt) * p + (ci * patch + di) * patch + dj;
                                        dx[dst] = gv[src];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![(x.0, Tensor::new(vec![b, c, h, w], dx))]
            }
            Op::Unpatchify { x, patch, channels, height, width } => {
                let (b, t, p) = dims3(v(*x).shape());
                let (gh, gw) = (height / patch, width / patch);
                let gv = gy.data();
                let mut dx = vec![T::zero(); gv.len()];
                for bi in 0..b {
                    for gi in 0..gh {
                        for gj in 0..gw {
                            let tt = gi * gw + gj;
                            for ci in 0..*channels {
                                for di in 0..*patch {
                                    for dj in 0..*patch {
                                        let src = ((bi * channels + ci) * height + gi * patch + di) * width
                                            + gj * patch
                                            + dj;
                                        let dst = (bi * t + tt) * p + (ci * patch + di) * patch + dj;
                                        dx[dst] = gv[src];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![(x.0, Tensor::new(vec![b, t, p], dx))]
            }
            Op::CatAxis1(parts) => {
                let shape = y.shape();
                let outer = shape[0];
                let total = shape[1];
                let inner: usize = shape[2..].iter().product();
                let gv = gy.data();
                let mut out = Vec::new();
                let mut offset = 0usize;
                for &p in parts {
                    let s1 = v(p).shape()[1];
                    if self.nodes[p.0].needs_grad {
                        let mut dp = vec![T::zero(); outer * s1 * inner];
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * s1 * inner;
                            dp[dst..dst + s1 * inner].copy_from_slice(&gv[src..src + s1 * inner]);
                        }
                        out.push((p.0, Tensor::new(v(p).shape().to_vec(), dp)));
                    }
                    offset += s1;
                }
                out
            }
            Op::SliceAxis1 { x, start, len } => {
                let shape = v(*x).shape().to_vec();
                let (outer, mid) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let gv = gy.data();
                let mut dx = vec![T::zero(); v(*x).numel()];
                for o in 0..outer {
                    let dst = (o * mid + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&gv[src..src + len * inner]);
                }
                vec![(x.0, Tensor::new(shape, dx))]
            }
            Op::MulBcastTokens(x, s) => {
                let (b, t, d) = dims3(v(*x).shape());
                let gv = gy.data();
                let xv = v(*x).data();
                let sv = v(*s).data();
                let mut out = Vec::new();
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![T::zero(); gv.len()];
                    for bi in 0..b {
                        for tt in 0..t {
                            let base = (bi * t + tt) * d;
                            for j in 0..d {
                                dx[base + j] = gv[base + j] * sv[bi * d + j];
                            }
                        }
                    }
                    out.push((x.0, Tensor::new(vec![b, t, d], dx)));
                }
                if self.nodes[s.0].needs_grad {
                    let mut ds = vec![T::zero(); b * d];
                    for bi in 0..b {
                        for tt in 0..t {
                            let base = (bi * t + tt) * d;
                            for j in 0..d {
                                ds[bi * d + j] = ds[bi * d + j] + gv[base + j] * xv[base + j];
                            }
                        }
                    }
                    out.push((s.0, Tensor::new(vec![b, d], ds)));
                }
                out
            }
            Op::AddBcastTokens(x, s) => {
                let (b, t, d) = dims3(v(*x).shape());
                let gv = gy.data();
                let mut out = Vec::new();
                if self.nodes[x.0].needs_grad {
                    out.push((x.0, gy.clone()));
                }
                if self.nodes[s.0].needs_grad {
                    let mut ds = vec![T::zero(); b * d];
                    for bi in 0..b {
                        for tt in 0..t {
                            let base = (bi * t + tt) * d;
                            for j in 0..d {
                                ds[bi * d + j] = ds[bi * d + j] + gv[base + j];
                            }
                        }
                    }
                    out.push((s.0, Tensor::new(vec![b, d], ds)));
                }
                out
            }
            Op::AddBcastRows(x, p) => {
                let (b, t, d) = dims3(v(*x).shape());
                let gv = gy.data();
                let mut out = Vec::new();
                if self.nodes[x.0].needs_grad {
                    out.push((x.0, gy.clone()));
                }
                if self.nodes[p.0].needs_grad {
                    let mut dp = vec![T::zero(); t * d];
                    for bi in 0..b {
                        for e in 0..t * d {
                            dp[e] = dp[e] + gv[bi * t * d + e];
                        }
                    }
                    out.push((p.0, Tensor::new(vec![t, d], dp)));
                }
                out
            }
            Op::EmbedRows { table, idx } => {
                let (n, d) = dims2(v(*table).shape());
                let gv = gy.data();
                let mut dt = vec![T::zero(); n * d];
                for (i, &row) in idx.iter().enumerate() {
                    for j in 0..d {
                        dt[row * d + j] = dt[row * d + j] + gv[i * d + j];
                    }
                }
                vec![(table.0, Tensor::new(vec![n, d], dt))]
            }
            Op::DiffH(x) => {
                let (b, c, h, w) = dims4(v(*x).shape());
                let gv = gy.data();
                let mut dx = vec![T::zero(); v(*x).numel()];
                for bc in 0..b * c {
                    for i in 0..h - 1 {
                        for j in 0..w {
                            let g = gv[(bc * (h - 1) + i) * w + j];
                            dx[(bc * h + i + 1) * w + j] = dx[(bc * h + i + 1) * w + j] + g;
                            dx[(bc * h + i) * w + j] = dx[(bc * h + i) * w + j] - g;
                        }
                    }
                }
                vec![(x.0, Tensor::new(vec![b, c, h, w], dx))]
            }
            Op::DiffW(x) => {
                let (b, c, h, w) = dims4(v(*x).shape());
                let gv = gy.data();
                let mut dx = vec![T::zero(); v(*x).numel()];
                for bc in 0..b * c {
                    for i in 0..h {
                        for j in 0..w - 1 {
                            let g = gv[(bc * h + i) * (w - 1) + j];
                            dx[(bc * h + i) * w + j + 1] = dx[(bc * h + i) * w + j + 1] + g;
                            dx[(bc * h + i) * w + j] = dx[(bc * h + i) * w + j] - g;
                        }
                    }
                }
                vec![(x.0, Tensor::new(vec![b, c, h, w], dx))]
            }
        }
    }

    fn bmm_backward(&self, a: Var, b: Var, transpose_b: bool, gy: &Tensor<T>) -> Vec<(usize, Tensor<T>)> {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let (g, m, k) = dims3(va.shape());
        let (_, b0, b1) = dims3(vb.shape());
        let n = if transpose_b { b0 } else { b1 };
        let gv = gy.data();
        let mut out = Vec::new();
        if self.nodes[a.0].needs_grad {
            let mut da = vec![T::zero(); va.numel()];
            for gi in 0..g {
                let gg = ArrayView2::from_shape((m, n), &gv[gi * m * n..(gi + 1) * m * n]).unwrap();
                let bg = ArrayView2::from_shape((b0, b1), &vb.data()[gi * b0 * b1..(gi + 1) * b0 * b1]).unwrap();
                // dA = dC x B for C = A Bt, else dC x Bt
                let bg = if transpose_b { bg } else { bg.reversed_axes() };
                let mut og = ArrayViewMut2::from_shape((m, k), &mut da[gi * m * k..(gi + 1) * m * k]).unwrap();
                general_mat_mul(T::one(), &gg, &bg, T::zero(), &mut og);
            }
            out.push((a.0, Tensor::new(va.shape().to_vec(), da)));
        }
        if self.nodes[b.0].needs_grad {
            let mut db = vec![T::zero(); vb.numel()];
            for gi in 0..g {
                let gg = ArrayView2::from_shape((m, n), &gv[gi * m * n..(gi + 1) * m * n]).unwrap();
                let ag = ArrayView2::from_shape((m, k), &va.data()[gi * m * k..(gi + 1) * m * k]).unwrap();
                let mut og = ArrayViewMut2::from_shape((b0, b1), &mut db[gi * b0 * b1..(gi + 1) * b0 * b1]).unwrap();
                if transpose_b {
                    // dB = dCt x A
                    general_mat_mul(T::one(), &gg.reversed_axes(), &ag, T::zero(), &mut og);
                } else {
                    // dB = At x dC
                    general_mat_mul(T::one(), &ag.reversed_axes(), &gg, T::zero(), &mut og);
                }
            }
            out.push((b.0, Tensor::new(vb.shape().to_vec(), db)));
        }
        out
    }

    fn conv2d_backward(&self, x: Var, w: Var, stride: usize, pad: usize, gy: &Tensor<T>) -> Vec<(usize, Tensor<T>)> {
        let vx = &self.nodes[x.0].value;
        let vw = &self.nodes[w.0].value;
        let (b, cin, h, wd) = dims4(vx.shape());
        let (cout, _, kh, kw) = dims4(vw.shape());
        let (_, _, ho, wo) = dims4(gy.shape());
        let kk = cin * kh * kw;
        let gv = gy.data();
        let mut out = Vec::new();
        let mut cols = vec![T::zero(); kk * ho * wo];
        if self.nodes[x.0].needs_grad {
            let wmat = ArrayView2::from_shape((cout, kk), vw.data()).unwrap();
            let mut dx = vec![T::zero(); vx.numel()];
            for bi in 0..b {
                let gg = ArrayView2::from_shape((cout, ho * wo), &gv[bi * cout * ho * wo..(bi + 1) * cout * ho * wo])
                    .unwrap();
                let mut dc = ArrayViewMut2::from_shape((kk, ho * wo), &mut cols[..]).unwrap();
                general_mat_mul(T::one(), &wmat.reversed_axes(), &gg, T::zero(), &mut dc);
                col2im_add(&cols, cin, h, wd, kh, kw, stride, pad, ho, wo, &mut dx[bi * cin * h * wd..]);
            }
            out.push((x.0, Tensor::new(vec![b, cin, h, wd], dx)));
        }
        if self.nodes[w.0].needs_grad {
            let mut dw = vec![T::zero(); vw.numel()];
            for bi in 0..b {
                im2col(&vx.data()[bi * cin * h * wd..], cin, h, wd, kh, kw, stride, pad, ho, wo, &mut cols);
                let cmat = ArrayView2::from_shape((kk, ho * wo), &cols[..]).unwrap();
                let gg = ArrayView2::from_shape((cout, ho * wo), &gv[bi * cout * ho * wo..(bi + 1) * cout * ho * wo])
                    .unwrap();
                let mut dwm = ArrayViewMut2::from_shape((cout, kk), &mut dw[..]).unwrap();
                general_mat_mul(T::one(), &gg, &cmat.reversed_axes(), T::one(), &mut dwm);
            }
            out.push((w.0, Tensor::new(vec![cout, cin, kh, kw], dw)));
        }
        out
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn row_moments<T: Scalar>(row: &[T]) -> (f64, f64) {
    let n = row.len() as f64;
    let mut mean = 0.0;
    for &x in row {
        mean += x.as_f64();
    }
    mean /= n;
    let mut var = 0.0;
    for &x in row {
        let d = x.as_f64() - mean;
        var += d * d;
    }
    (mean, var / n)
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "expected rank 2, got {shape:?}");
    (shape[0], shape[1])
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected rank 3, got {shape:?}");
    (shape[0], shape[1], shape[2])
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected rank 4, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let mut r = 0usize;
    for c in 0..cin {
        for di in 0..kh {
            for dj in 0..kw {
                for oi in 0..ho {
                    let ii = (oi * stride + di) as isize - pad as isize;
                    let row_ok = ii >= 0 && (ii as usize) < h;
                    for oj in 0..wo {
                        let jj = (oj * stride + dj) as isize - pad as isize;
                        cols[(r * ho + oi) * wo + oj] = if row_ok && jj >= 0 && (jj as usize) < w {
                            x[(c * h + ii as usize) * w + jj as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
                r += 1;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    cols: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let mut r = 0usize;
    for c in 0..cin {
        for di in 0..kh {
            for dj in 0..kw {
                for oi in 0..ho {
                    let ii = (oi * stride + di) as isize - pad as isize;
                    if ii < 0 || (ii as usize) >= h {
                        continue;
                    }
                    let ii = ii as usize;
                    for oj in 0..wo {
                        let jj = (oj * stride + dj) as isize - pad as isize;
                        if jj >= 0 && (jj as usize) < w {
                            let dst = (c * h + ii) * w + jj as usize;
                            x[dst] = x[dst] + cols[(r * ho + oi) * wo + oj];
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Projects a tensor onto a fixed random direction so permutation bugs
    /// in backward passes cannot cancel out, then reduces to the mean.
    fn proj_loss(tape: &mut Tape<f64>, v: Var) -> Var {
        let shape = tape.value(v).shape().to_vec();
        let mut rng = ChaCha12Rng::seed_from_u64(7_777);
        let w = tape.constant(Tensor::randn(shape, &mut rng));
        let p = tape.mul(v, w);
        tape.mean_all(p)
    }

    fn fd_check(shapes: &[&[usize]], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        fd_check_seeded(shapes, 42, f)
    }

    fn fd_check_seeded(shapes: &[&[usize]], seed: u64, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| Tensor::randn(s.to_vec(), &mut rng)).collect();
        let eval = |inputs: &[Tensor<f64>]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
            let l = f(&mut tape, &vars);
            assert_eq!(tape.value(l).numel(), 1, "test loss must be scalar");
            tape.value(l).data()[0]
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = f(&mut tape, &vars);
        let grads = tape.backward(loss);
        let h = 1e-5;
        for (i, inp) in inputs.iter().enumerate() {
            let zero = Tensor::zeros(inp.shape().to_vec());
            let g = grads.get(vars[i]).unwrap_or(&zero);
            for e in 0..inp.numel() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[e] += h;
                let mut minus = inputs.clone();
                minus[i].data_mut()[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = g.data()[e];
                let denom = an.abs().max(fd.abs()).max(1e-3);
                assert!(
                    ((fd - an).abs() / denom) < 1e-5,
                    "input {i} elem {e}: finite diff {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn grad_elementwise_ops() {
        fd_check(&[&[2, 3], &[2, 3]], |t, v| {
            let s = t.add(v[0], v[1]);
            let d = t.sub(s, v[1]);
            let m = t.mul(d, v[0]);
            let sc = t.scale(m, -1.7);
            let a = t.add_scalar(sc, 0.3);
            proj_loss(t, a)
        });
    }

    #[test]
    fn grad_exp_tanh_silu() {
        fd_check(&[&[3, 4]], |t, v| {
            let e = t.exp(v[0]);
            let th = t.tanh(e);
            let si = t.silu(th);
            proj_loss(t, si)
        });
    }

    #[test]
    fn grad_abs_away_from_kink() {
        fd_check(&[&[5, 5]], |t, v| {
            let shifted = t.add_scalar(v[0], 4.0);
            let a = t.abs(shifted);
            proj_loss(t, a)
        });
    }

    #[test]
    fn grad_clamp_interior_and_exterior() {
        fd_check(&[&[4, 4]], |t, v| {
            let c = t.clamp(v[0], -0.5, 0.5);
            proj_loss(t, c)
        });
    }

    #[test]
    fn grad_matmul() {
        fd_check(&[&[3, 4], &[4, 2]], |t, v| {
            let c = t.matmul(v[0], v[1]);
            proj_loss(t, c)
        });
    }

    #[test]
    fn grad_bmm_plain_and_transposed() {
        fd_check(&[&[2, 3, 4], &[2, 4, 2]], |t, v| {
            let c = t.bmm(v[0], v[1], false);
            proj_loss(t, c)
        });
        fd_check(&[&[2, 3, 4], &[2, 5, 4]], |t, v| {
            let c = t.bmm(v[0], v[1], true);
            proj_loss(t, c)
        });
    }

    #[test]
    fn grad_bias_broadcasts() {
        fd_check(&[&[4, 3], &[3]], |t, v| {
            let y = t.add_bias_rows(v[0], v[1]);
            proj_loss(t, y)
        });
        fd_check(&[&[2, 3, 2, 2], &[3]], |t, v| {
            let y = t.add_bias_channels(v[0], v[1]);
            proj_loss(t, y)
        });
    }

    #[test]
    fn grad_conv2d_stride1() {
        fd_check(&[&[1, 2, 5, 5], &[3, 2, 3, 3]], |t, v| {
            let y = t.conv2d(v[0], v[1], 1, 1);
            proj_loss(t, y)
        });
    }

    #[test]
    fn grad_conv2d_stride2() {
        fd_check(&[&[2, 2, 6, 6], &[2, 2, 3, 3]], |t, v| {
            let y = t.conv2d(v[0], v[1], 2, 1);
            proj_loss(t, y)
        });
    }

    #[test]
    fn grad_resampling() {
        fd_check(&[&[1, 2, 3, 3]], |t, v| {
            let y = t.upsample2x(v[0]);
            proj_loss(t, y)
        });
        fd_check(&[&[1, 2, 4, 4]], |t, v| {
            let y = t.avg_pool2x(v[0]);
            proj_loss(t, y)
        });
    }

    #[test]
    fn grad_layer_norm() {
        fd_check(&[&[3, 7]], |t, v| {
            let y = t.layer_norm(v[0], 1e-6);
            proj_loss(t, y)
        });
    }

    #[test]
    fn grad_softmax() {
        fd_check(&[&[2, 3, 5]], |t, v| {
            let y = t.softmax_last(v[0]);
            proj_loss(t, y)
        });
    }

    #[test]
    fn grad_mean_all() {
        fd_check(&[&[3, 4]], |t, v| t.mean_all(v[0]));
    }

    #[test]
    fn grad_reshape_roundtrip() {
        fd_check(&[&[2, 6]], |t, v| {
            let y = t.reshape(v[0], vec![3, 4]);
            let e = t.exp(y);
            let back = t.reshape(e, vec![2, 6]);
            proj_loss(t, back)
        });
    }

    #[test]
    fn grad_attention_shapes() {
        fd_check(&[&[1, 4, 6], &[1, 4, 6], &[1, 4, 6]], |t, v| {
            let q = t.split_heads(v[0], 2);
            let k = t.split_heads(v[1], 2);
            let val = t.split_heads(v[2], 2);
            let scores = t.bmm(q, k, true);
            let scaled = t.scale(scores, 1.0 / (3.0f64).sqrt());
            let probs = t.softmax_last(scaled);
            let ctx = t.bmm(probs, val, false);
            let merged = t.merge_heads(ctx, 2);
            proj_loss(t, merged)
        });
    }

    #[test]
    fn grad_patchify_roundtrip() {
        fd_check(&[&[1, 2, 4, 4]], |t, v| {
            let tok = t.patchify(v[0], 2);
            let e = t.silu(tok);
            let img = t.unpatchify(e, 2, 2, 4, 4);
            proj_loss(t, img)
        });
    }

    #[test]
    fn patchify_then_unpatchify_is_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(vec![2, 3, 6, 6], &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let tok = tape.patchify(v, 3);
        let back = tape.unpatchify(tok, 3, 3, 6, 6);
        assert_eq!(tape.value(back), &x);
    }

    #[test]
    fn grad_cat_and_slice() {
        fd_check(&[&[2, 2, 3], &[2, 4, 3]], |t, v| {
            let c = t.cat_axis1(&[v[0], v[1]]);
            let s = t.slice_axis1(c, 1, 4);
            proj_loss(t, s)
        });
    }

    #[test]
    fn grad_token_broadcasts() {
        fd_check(&[&[2, 3, 4], &[2, 4]], |t, v| {
            let y = t.mul_bcast_tokens(v[0], v[1]);
            proj_loss(t, y)
        });
        fd_check(&[&[2, 3, 4], &[2, 4]], |t, v| {
            let y = t.add_bcast_tokens(v[0], v[1]);
            proj_loss(t, y)
        });
        fd_check(&[&[2, 3, 4], &[3, 4]], |t, v| {
            let y = t.add_bcast_rows(v[0], v[1]);
            proj_loss(t, y)
        });
    }

    #[test]
    fn grad_embedding_with_repeated_rows() {
        fd_check(&[&[5, 3]], |t, v| {
            let y = t.embed_rows(v[0], &[0, 2, 2, 4]);
            proj_loss(t, y)
        });
    }

    #[test]
    fn grad_image_differences() {
        fd_check(&[&[1, 2, 4, 5]], |t, v| {
            let dh = t.diff_h(v[0]);
            proj_loss(t, dh)
        });
        fd_check(&[&[1, 2, 4, 5]], |t, v| {
            let dw = t.diff_w(v[0]);
            proj_loss(t, dw)
        });
    }

    #[test]
    fn detach_blocks_gradient_exactly() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let x = Tensor::<f64>::randn(vec![3, 3], &mut rng);
        let mut tape = Tape::new();
        let v = tape.leaf(x, true);
        let d = tape.detach(v);
        let m = tape.mul(d, d);
        let loss = tape.mean_all(m);
        let grads = tape.backward(loss);
        assert!(grads.get(v).is_none(), "gradient leaked through detach");
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::randn(vec![2, 2], &mut rng), true);
        let c = tape.constant(Tensor::randn(vec![2, 2], &mut rng));
        let m = tape.mul(a, c);
        let loss = tape.mean_all(m);
        let grads = tape.backward(loss);
        assert!(grads.get(a).is_some());
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn repeated_input_accumulates_both_paths() {
        // d/dx mean(x * x) = 2x / n
        let x = Tensor::<f64>::new(vec![2], vec![3.0, -1.5]);
        let mut tape = Tape::new();
        let v = tape.leaf(x, true);
        let m = tape.mul(v, v);
        let loss = tape.mean_all(m);
        let grads = tape.backward(loss);
        let g = grads.get(v).unwrap();
        assert!((g.data()[0] - 3.0).abs() < 1e-12);
        assert!((g.data()[1] + 1.5).abs() < 1e-12);
    }

    #[test]
    fn composite_loss_mse_l1_kl_shapes() {
        fd_check(&[&[2, 2, 4, 4], &[2, 2, 4, 4], &[2, 8], &[2, 8]], |t, v| {
            let diff = t.sub(v[0], v[1]);
            let sq = t.mul(diff, diff);
            let mse = t.mean_all(sq);
            let a = t.abs(diff);
            let l1 = t.mean_all(a);
            let mu2 = t.mul(v[2], v[2]);
            let elv = t.exp(v[3]);
            let s = t.add(mu2, elv);
            let s = t.add_scalar(s, -1.0);
            let s = t.sub(s, v[3]);
            let kl = t.mean_all(s);
            let kl = t.scale(kl, 0.5);
            let t1 = t.add(mse, l1);
            t.add(t1, kl)
        });
    }
}

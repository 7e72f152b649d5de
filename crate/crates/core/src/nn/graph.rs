use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use super::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        dilation: usize,
        pad: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// `a * b` with `b` a single-channel tensor broadcast over channels.
    MulC(usize, usize),
    AddScalar(usize),
    Scale(usize, f64),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Concat(Vec<usize>),
    Narrow { x: usize, start: usize },
    AvgPool2(usize),
    Upsample2(usize),
    SoftmaxC(usize),
    ApplyKernel3 { img: usize, kern: usize },
    Blur { x: usize, taps: Vec<f64> },
    DiffX(usize),
    DiffY(usize),
    MeanAbs(usize),
    Mean(usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Eager computation tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    track: bool,
    /// Reusable im2col buffers for convolutions.
    scratch: RefCell<[Vec<T>; 2]>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new(true)
    }
}

impl<T: Scalar> Graph<T> {
    /// With `track == false` parameters are treated as constants and
    /// [`Graph::backward`] yields no gradients.
    pub fn new(track: bool) -> Self {
        Self {
            nodes: Vec::new(),
            track,
            scratch: RefCell::new([Vec::new(), Vec::new()]),
        }
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

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf (when the graph tracks gradients).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: self.track,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    /// 2-D convolution with zero padding. Weights are `[cout, cin, k, k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        dilation: usize,
        pad: usize,
    ) -> Var {
        let xv = self.val(x.0);
        let wv = self.val(w.0);
        let [n, cin, h, wd] = xv.shape;
        let [cout, wcin, k, _] = wv.shape;
        assert_eq!(cin, wcin, "conv input channels");
        let (ho, wo) = conv_out_dims(h, wd, k, stride, dilation, pad);
        let geo = ConvGeo {
            cin,
            h,
            w: wd,
            k,
            stride,
            dilation,
            pad,
            ho,
            wo,
        };
        let kk = cin * k * k;
        let p = ho * wo;
        let mut out = Tensor::zeros([n, cout, ho, wo]);
        let mut scratch = self.scratch.borrow_mut();
        let cols = grow(&mut scratch[0], if geo.is_pointwise() { 0 } else { kk * p });
        for ni in 0..n {
            let xs = &xv.data[ni * cin * h * wd..(ni + 1) * cin * h * wd];
            let src: &[T] = if geo.is_pointwise() {
                xs
            } else {
                im2col(xs, &geo, cols);
                cols
            };
            let dst = &mut out.data[ni * cout * p..(ni + 1) * cout * p];
            if let Some(b) = b {
                let bv = &self.val(b.0).data;
                for co in 0..cout {
                    dst[co * p..(co + 1) * p].iter_mut().for_each(|v| *v = bv[co]);
                }
            }
            unsafe {
                T::gemm(
                    cout,
                    kk,
                    p,
                    T::one(),
                    wv.data.as_ptr(),
                    kk as isize,
                    1,
                    src.as_ptr(),
                    p as isize,
                    1,
                    if b.is_some() { T::one() } else { T::zero() },
                    dst.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
        }
        drop(scratch);
        let mut inputs = vec![x.0, w.0];
        if let Some(b) = b {
            inputs.push(b.0);
        }
        self.push(
            out,
            Op::Conv {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
                stride,
                dilation,
                pad,
            },
            &inputs,
        )
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.val(a.0), self.val(b.0));
        assert_eq!(av.shape, bv.shape, "elementwise shape mismatch");
        Tensor {
            shape: av.shape,
            data: av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect(),
        }
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let av = self.val(a.0);
        Tensor {
            shape: av.shape,
            data: av.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push(v, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, |x, y| x / y);
        self.push(v, Op::Div(a.0, b.0), &[a.0, b.0])
    }

    /// Multiplies every channel of `a` by the single-channel `b`.
    pub fn mul_c(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.val(a.0), self.val(b.0));
        let [n, c, h, w] = av.shape;
        assert_eq!(bv.shape, [n, 1, h, w], "broadcast shape mismatch");
        let p = h * w;
        let mut out = Tensor::zeros(av.shape);
        for ni in 0..n {
            let m = &bv.data[ni * p..(ni + 1) * p];
            for ci in 0..c {
                let o = (ni * c + ci) * p;
                for i in 0..p {
                    out.data[o + i] = av.data[o + i] * m[i];
                }
            }
        }
        self.push(out, Op::MulC(a.0, b.0), &[a.0, b.0])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let v = self.map(a, |x| x + s);
        self.push(v, Op::AddScalar(a.0), &[a.0])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let k = T::of(s);
        let v = self.map(a, |x| x * k);
        self.push(v, Op::Scale(a.0, s), &[a.0])
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let k = T::of(slope);
        let v = self.map(a, |x| if x > T::zero() { x } else { x * k });
        self.push(v, Op::LeakyRelu(a.0, slope), &[a.0])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| T::one() / (T::one() + (-x).exp()));
        self.push(v, Op::Sigmoid(a.0), &[a.0])
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let first = self.val(parts[0].0).shape;
        let [n, _, h, w] = first;
        let p = h * w;
        let c_total: usize = parts
            .iter()
            .map(|v| {
                let s = self.val(v.0).shape;
                assert_eq!((s[0], s[2], s[3]), (n, h, w), "concat shape mismatch");
                s[1]
            })
            .sum();
        let mut out = Tensor::zeros([n, c_total, h, w]);
        for ni in 0..n {
            let mut off = ni * c_total * p;
            for v in parts {
                let t = self.val(v.0);
                let len = t.c() * p;
                out.data[off..off + len].copy_from_slice(&t.data[ni * len..(ni + 1) * len]);
                off += len;
            }
        }
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        self.push(out, Op::Concat(ids.clone()), &ids)
    }

    /// Channels `start..start + len`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.val(x.0);
        let [n, c, h, w] = xv.shape;
        assert!(start + len <= c, "narrow out of range");
        let p = h * w;
        let mut out = Tensor::zeros([n, len, h, w]);
        for ni in 0..n {
            let src = &xv.data[(ni * c + start) * p..(ni * c + start + len) * p];
            out.data[ni * len * p..(ni + 1) * len * p].copy_from_slice(src);
        }
        self.push(out, Op::Narrow { x: x.0, start }, &[x.0])
    }

    /// 2x2 average pooling; height and width must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = self.val(x.0);
        let [n, c, h, w] = xv.shape;
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        let q = T::of(0.25);
        for pl in 0..n * c {
            let s = &xv.data[pl * h * w..(pl + 1) * h * w];
            let d = &mut out.data[pl * ho * wo..(pl + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    d[y * wo + xx] = (s[i] + s[i + 1] + s[i + w] + s[i + w + 1]) * q;
                }
            }
        }
        self.push(out, Op::AvgPool2(x.0), &[x.0])
    }

    /// 2x bilinear upsampling with half-pixel centres and clamped borders.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.val(x.0);
        let [n, c, h, w] = xv.shape;
        let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
        let mut tmp = vec![T::zero(); h * 2 * w];
        for pl in 0..n * c {
            let s = &xv.data[pl * h * w..(pl + 1) * h * w];
            for y in 0..h {
                up_line(&s[y * w..(y + 1) * w], &mut tmp[y * 2 * w..(y + 1) * 2 * w]);
            }
            let d = &mut out.data[pl * 4 * h * w..(pl + 1) * 4 * h * w];
            for xx in 0..2 * w {
                up_strided(&tmp, d, xx, 2 * w, h);
            }
        }
        self.push(out, Op::Upsample2(x.0), &[x.0])
    }

    /// Softmax across channels at every pixel.
    pub fn softmax_c(&mut self, x: Var) -> Var {
        let xv = self.val(x.0);
        let [n, c, h, w] = xv.shape;
        let p = h * w;
        let mut out = Tensor::zeros(xv.shape);
        for ni in 0..n {
            let base = ni * c * p;
            for i in 0..p {
                let mut m = T::neg_infinity();
                for ci in 0..c {
                    m = m.max(xv.data[base + ci * p + i]);
                }
                let mut sum = T::zero();
                for ci in 0..c {
                    let e = (xv.data[base + ci * p + i] - m).exp();
                    out.data[base + ci * p + i] = e;
                    sum += e;
                }
                for ci in 0..c {
                    out.data[base + ci * p + i] = out.data[base + ci * p + i] / sum;
                }
            }
        }
        self.push(out, Op::SoftmaxC(x.0), &[x.0])
    }

    /// Per-pixel 3x3 filtering: `kern` holds 9 channels of taps (row-major
    /// over the neighbourhood) shared across the channels of `img`. Borders
    /// are clamped.
    pub fn apply_kernel3(&mut self, img: Var, kern: Var) -> Var {
        let (iv, kv) = (self.val(img.0), self.val(kern.0));
        let [n, c, h, w] = iv.shape;
        assert_eq!(kv.shape, [n, 9, h, w], "kernel shape mismatch");
        let p = h * w;
        let mut out = Tensor::zeros(iv.shape);
        for ni in 0..n {
            let kb = &kv.data[ni * 9 * p..(ni + 1) * 9 * p];
            for ci in 0..c {
                let s = &iv.data[(ni * c + ci) * p..(ni * c + ci + 1) * p];
                let d = &mut out.data[(ni * c + ci) * p..(ni * c + ci + 1) * p];
                for t in 0..9 {
                    let (dy, dx) = (t / 3, t % 3);
                    let kt = &kb[t * p..(t + 1) * p];
                    for y in 0..h {
                        let sy = (y + dy).saturating_sub(1).min(h - 1);
                        for x in 0..w {
                            let sx = (x + dx).saturating_sub(1).min(w - 1);
                            d[y * w + x] += kt[y * w + x] * s[sy * w + sx];
                        }
                    }
                }
            }
        }
        self.push(out, Op::ApplyKernel3 { img: img.0, kern: kern.0 }, &[img.0, kern.0])
    }

    /// Separable filtering with `taps` (odd length) along both axes; at the
    /// borders the taps that fall outside are dropped and the remainder
    /// renormalized.
    pub fn blur(&mut self, x: Var, taps: &[f64]) -> Var {
        assert!(taps.len() % 2 == 1, "blur taps must have odd length");
        let xv = self.val(x.0);
        let [n, c, h, w] = xv.shape;
        let tt: Vec<T> = taps.iter().map(|&v| T::of(v)).collect();
        let mut out = Tensor::zeros(xv.shape);
        let mut tmp = vec![T::zero(); h * w];
        for pl in 0..n * c {
            let s = &xv.data[pl * h * w..(pl + 1) * h * w];
            blur_axis(s, &mut tmp, w, h, &tt, true, false);
            blur_axis(&tmp, &mut out.data[pl * h * w..(pl + 1) * h * w], w, h, &tt, false, false);
        }
        self.push(
            out,
            Op::Blur {
                x: x.0,
                taps: taps.to_vec(),
            },
            &[x.0],
        )
    }

    /// Forward difference along x; the last column (replicate border) is 0.
    pub fn diff_x(&mut self, x: Var) -> Var {
        let xv = self.val(x.0);
        let [n, c, h, w] = xv.shape;
        let mut out = Tensor::zeros(xv.shape);
        for r in 0..n * c * h {
            let s = &xv.data[r * w..(r + 1) * w];
            for i in 0..w.saturating_sub(1) {
                out.data[r * w + i] = s[i + 1] - s[i];
            }
        }
        self.push(out, Op::DiffX(x.0), &[x.0])
    }

    /// Forward difference along y; the last row (replicate border) is 0.
    pub fn diff_y(&mut self, x: Var) -> Var {
        let xv = self.val(x.0);
        let [n, c, h, w] = xv.shape;
        let mut out = Tensor::zeros(xv.shape);
        for pl in 0..n * c {
            let o = pl * h * w;
            for y in 0..h.saturating_sub(1) {
                for i in 0..w {
                    out.data[o + y * w + i] = xv.data[o + (y + 1) * w + i] - xv.data[o + y * w + i];
                }
            }
        }
        self.push(out, Op::DiffY(x.0), &[x.0])
    }

    /// Mean absolute value, as a `[1, 1, 1, 1]` tensor.
    pub fn mean_abs(&mut self, x: Var) -> Var {
        let xv = self.val(x.0);
        let s: f64 = xv.data.iter().map(|v| v.abs().f64()).sum();
        let v = Tensor::scalar(T::of(s / xv.len() as f64));
        self.push(v, Op::MeanAbs(x.0), &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.val(x.0);
        let s: f64 = xv.data.iter().map(|v| v.f64()).sum();
        let v = Tensor::scalar(T::of(s / xv.len() as f64));
        self.push(v, Op::Mean(x.0), &[x.0])
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.val(loss.0).len(), 1, "backward needs a scalar loss");
        if !self.nodes[loss.0].requires_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let contributions = self.node_backward(id, &g);
            grads[id] = Some(g);
            for (target, t) in contributions {
                if !self.nodes[target].requires_grad {
                    continue;
                }
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            }
        }
        Gradients { grads }
    }

    fn node_backward(&self, id: usize, g: &Tensor<T>) -> Vec<(usize, Tensor<T>)> {
        let node = &self.nodes[id];
        let needs = |i: usize| self.nodes[i].requires_grad;
        let like = |i: usize, data: Vec<T>| Tensor {
            shape: self.val(i).shape,
            data,
        };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv {
                x,
                w,
                b,
                stride,
                dilation,
                pad,
            } => self.conv_backward(*x, *w, *b, *stride, *dilation, *pad, g),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => {
                let neg = g.data.iter().map(|&v| -v).collect();
                vec![(*a, g.clone()), (*b, like(*b, neg))]
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let mut out = Vec::new();
                if needs(*a) {
                    out.push((*a, like(*a, g.data.iter().zip(&bv.data).map(|(&gi, &y)| gi * y).collect())));
                }
                if needs(*b) {
                    out.push((*b, like(*b, g.data.iter().zip(&av.data).map(|(&gi, &x)| gi * x).collect())));
                }
                out
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let mut out = Vec::new();
                if needs(*a) {
                    out.push((*a, like(*a, g.data.iter().zip(&bv.data).map(|(&gi, &y)| gi / y).collect())));
                }
                if needs(*b) {
                    let d = g
                        .data
                        .iter()
                        .zip(av.data.iter().zip(&bv.data))
                        .map(|(&gi, (&x, &y))| -gi * x / (y * y))
                        .collect();
                    out.push((*b, like(*b, d)));
                }
                out
            }
            Op::MulC(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let [n, c, h, w] = av.shape;
                let p = h * w;
                let mut ga = Tensor::zeros(av.shape);
                let mut gb = Tensor::zeros(bv.shape);
                for ni in 0..n {
                    for ci in 0..c {
                        let o = (ni * c + ci) * p;
                        for i in 0..p {
                            ga.data[o + i] = g.data[o + i] * bv.data[ni * p + i];
                            gb.data[ni * p + i] += g.data[o + i] * av.data[o + i];
                        }
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Scale(a, s) => {
                let k = T::of(*s);
                vec![(*a, like(*a, g.data.iter().map(|&v| v * k).collect()))]
            }
            Op::LeakyRelu(a, slope) => {
                let k = T::of(*slope);
                let av = self.val(*a);
                let d = g
                    .data
                    .iter()
                    .zip(&av.data)
                    .map(|(&gi, &x)| if x > T::zero() { gi } else { gi * k })
                    .collect();
                vec![(*a, like(*a, d))]
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = g
                    .data
                    .iter()
                    .zip(&y.data)
                    .map(|(&gi, &s)| gi * s * (T::one() - s))
                    .collect();
                vec![(*a, like(*a, d))]
            }
            Op::Concat(parts) => {
                let [n, c_total, h, w] = g.shape;
                let p = h * w;
                let mut out = Vec::new();
                let mut c_off = 0;
                for &part in parts {
                    let c = self.val(part).c();
                    if needs(part) {
                        let mut t = Tensor::zeros(self.val(part).shape);
                        for ni in 0..n {
                            let src = &g.data[(ni * c_total + c_off) * p..(ni * c_total + c_off + c) * p];
                            t.data[ni * c * p..(ni + 1) * c * p].copy_from_slice(src);
                        }
                        out.push((part, t));
                    }
                    c_off += c;
                }
                out
            }
            Op::Narrow { x, start } => {
                let [n, c, h, w] = self.val(*x).shape;
                let len = g.c();
                let p = h * w;
                let mut t = Tensor::zeros([n, c, h, w]);
                for ni in 0..n {
                    t.data[(ni * c + start) * p..(ni * c + start + len) * p]
                        .copy_from_slice(&g.data[ni * len * p..(ni + 1) * len * p]);
                }
                vec![(*x, t)]
            }
            Op::AvgPool2(x) => {
                let [n, c, h, w] = self.val(*x).shape;
                let (ho, wo) = (h / 2, w / 2);
                let q = T::of(0.25);
                let mut t = Tensor::zeros([n, c, h, w]);
                for pl in 0..n * c {
                    let gs = &g.data[pl * ho * wo..(pl + 1) * ho * wo];
                    let d = &mut t.data[pl * h * w..(pl + 1) * h * w];
                    for y in 0..ho {
                        for xx in 0..wo {
                            let v = gs[y * wo + xx] * q;
                            let i = 2 * y * w + 2 * xx;
                            d[i] = v;
                            d[i + 1] = v;
                            d[i + w] = v;
                            d[i + w + 1] = v;
                        }
                    }
                }
                vec![(*x, t)]
            }
            Op::Upsample2(x) => {
                let [n, c, h, w] = self.val(*x).shape;
                let mut t = Tensor::zeros([n, c, h, w]);
                let mut tmp = vec![T::zero(); h * 2 * w];
                for pl in 0..n * c {
                    let gs = &g.data[pl * 4 * h * w..(pl + 1) * 4 * h * w];
                    tmp.iter_mut().for_each(|v| *v = T::zero());
                    for xx in 0..2 * w {
                        up_strided_t(gs, &mut tmp, xx, 2 * w, h);
                    }
                    let d = &mut t.data[pl * h * w..(pl + 1) * h * w];
                    for y in 0..h {
                        up_line_t(&tmp[y * 2 * w..(y + 1) * 2 * w], &mut d[y * w..(y + 1) * w]);
                    }
                }
                vec![(*x, t)]
            }
            Op::SoftmaxC(x) => {
                let y = &node.value;
                let [n, c, h, w] = y.shape;
                let p = h * w;
                let mut t = Tensor::zeros(y.shape);
                for ni in 0..n {
                    let base = ni * c * p;
                    for i in 0..p {
                        let mut dot = T::zero();
                        for ci in 0..c {
                            dot += g.data[base + ci * p + i] * y.data[base + ci * p + i];
                        }
                        for ci in 0..c {
                            let j = base + ci * p + i;
                            t.data[j] = y.data[j] * (g.data[j] - dot);
                        }
                    }
                }
                vec![(*x, t)]
            }
            Op::ApplyKernel3 { img, kern } => {
                let (iv, kv) = (self.val(*img), self.val(*kern));
                let [n, c, h, w] = iv.shape;
                let p = h * w;
                let mut gi = Tensor::zeros(iv.shape);
                let mut gk = Tensor::zeros(kv.shape);
                for ni in 0..n {
                    for ci in 0..c {
                        let o = (ni * c + ci) * p;
                        let s = &iv.data[o..o + p];
                        let gs = &g.data[o..o + p];
                        for t in 0..9 {
                            let (dy, dx) = (t / 3, t % 3);
                            let ko = (ni * 9 + t) * p;
                            for y in 0..h {
                                let sy = (y + dy).saturating_sub(1).min(h - 1);
                                for x in 0..w {
                                    let sx = (x + dx).saturating_sub(1).min(w - 1);
                                    let gv = gs[y * w + x];
                                    gk.data[ko + y * w + x] += gv * s[sy * w + sx];
                                    gi.data[o + sy * w + sx] += gv * kv.data[ko + y * w + x];
                                }
                            }
                        }
                    }
                }
                let mut out = Vec::new();
                if needs(*img) {
                    out.push((*img, gi));
                }
                if needs(*kern) {
                    out.push((*kern, gk));
                }
                out
            }
            Op::Blur { x, taps } => {
                let [n, c, h, w] = self.val(*x).shape;
                let tt: Vec<T> = taps.iter().map(|&v| T::of(v)).collect();
                let mut t = Tensor::zeros([n, c, h, w]);
                let mut tmp = vec![T::zero(); h * w];
                for pl in 0..n * c {
                    let gs = &g.data[pl * h * w..(pl + 1) * h * w];
                    blur_axis(gs, &mut tmp, w, h, &tt, false, true);
                    blur_axis(&tmp, &mut t.data[pl * h * w..(pl + 1) * h * w], w, h, &tt, true, true);
                }
                vec![(*x, t)]
            }
            Op::DiffX(x) => {
                let w = g.w();
                let mut t = Tensor::zeros(g.shape);
                for r in 0..g.len() / w {
                    for i in 0..w.saturating_sub(1) {
                        let gv = g.data[r * w + i];
                        t.data[r * w + i + 1] += gv;
                        t.data[r * w + i] -= gv;
                    }
                }
                vec![(*x, t)]
            }
            Op::DiffY(x) => {
                let [n, c, h, w] = g.shape;
                let mut t = Tensor::zeros(g.shape);
                for pl in 0..n * c {
                    let o = pl * h * w;
                    for y in 0..h.saturating_sub(1) {
                        for i in 0..w {
                            let gv = g.data[o + y * w + i];
                            t.data[o + (y + 1) * w + i] += gv;
                            t.data[o + y * w + i] -= gv;
                        }
                    }
                }
                vec![(*x, t)]
            }
            Op::MeanAbs(x) => {
                let xv = self.val(*x);
                let k = g.item() / T::of(xv.len() as f64);
                let d = xv
                    .data
                    .iter()
                    .map(|&v| {
                        if v > T::zero() {
                            k
                        } else if v < T::zero() {
                            -k
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                vec![(*x, like(*x, d))]
            }
            Op::Mean(x) => {
                let xv = self.val(*x);
                let k = g.item() / T::of(xv.len() as f64);
                vec![(*x, like(*x, vec![k; xv.len()]))]
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        dilation: usize,
        pad: usize,
        g: &Tensor<T>,
    ) -> Vec<(usize, Tensor<T>)> {
        let xv = self.val(x);
        let wv = self.val(w);
        let [n, cin, h, wd] = xv.shape;
        let [cout, _, k, _] = wv.shape;
        let (ho, wo) = (g.h(), g.w());
        let geo = ConvGeo {
            cin,
            h,
            w: wd,
            k,
            stride,
            dilation,
            pad,
            ho,
            wo,
        };
        let kk = cin * k * k;
        let p = ho * wo;
        let need_x = self.nodes[x].requires_grad;
        let need_w = self.nodes[w].requires_grad;
        let mut gx = if need_x { Some(Tensor::zeros(xv.shape)) } else { None };
        let mut gw = Tensor::zeros(wv.shape);
        let mut scratch = self.scratch.borrow_mut();
        let [cols, dcols] = &mut *scratch;
        let cols = grow(cols, if geo.is_pointwise() { 0 } else { kk * p });
        let dcols = grow(dcols, if need_x && !geo.is_pointwise() { kk * p } else { 0 });
        for ni in 0..n {
            let go = &g.data[ni * cout * p..(ni + 1) * cout * p];
            let xs = &xv.data[ni * cin * h * wd..(ni + 1) * cin * h * wd];
            if need_w {
                let src: &[T] = if geo.is_pointwise() {
                    xs
                } else {
                    im2col(xs, &geo, cols);
                    cols
                };
                unsafe {
                    T::gemm(
                        cout,
                        p,
                        kk,
                        T::one(),
                        go.as_ptr(),
                        p as isize,
                        1,
                        src.as_ptr(),
                        1,
                        p as isize,
                        T::one(),
                        gw.data.as_mut_ptr(),
                        kk as isize,
                        1,
                    );
                }
            }
            if let Some(gx) = gx.as_mut() {
                let dst = &mut gx.data[ni * cin * h * wd..(ni + 1) * cin * h * wd];
                let target: *mut T = if geo.is_pointwise() { dst.as_mut_ptr() } else { dcols.as_mut_ptr() };
                unsafe {
                    T::gemm(
                        kk,
                        cout,
                        p,
                        T::one(),
                        wv.data.as_ptr(),
                        1,
                        kk as isize,
                        go.as_ptr(),
                        p as isize,
                        1,
                        T::zero(),
                        target,
                        p as isize,
                        1,
                    );
                }
                if !geo.is_pointwise() {
                    col2im(dcols, &geo, dst);
                }
            }
        }
        let mut out = Vec::new();
        if let Some(gx) = gx {
            out.push((x, gx));
        }
        if need_w {
            out.push((w, gw));
        }
        if let Some(b) = b {
            if self.nodes[b].requires_grad {
                let mut gb = Tensor::zeros(self.val(b).shape);
                for ni in 0..n {
                    for co in 0..cout {
                        let s = &g.data[(ni * cout + co) * p..(ni * cout + co + 1) * p];
                        let mut acc = T::zero();
                        for &v in s {
                            acc += v;
                        }
                        gb.data[co] += acc;
                    }
                }
                out.push((b, gb));
            }
        }
        out
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

pub fn conv_out_dims(h: usize, w: usize, k: usize, stride: usize, dilation: usize, pad: usize) -> (usize, usize) {
    let span = dilation * (k - 1) + 1;
    ((h + 2 * pad - span) / stride + 1, (w + 2 * pad - span) / stride + 1)
}

struct ConvGeo {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeo {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose input column `ox * stride - pad + off`
    /// lies inside the image.
    fn valid_range(&self, off: usize, len_in: usize, len_out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let base = off as isize - self.pad as isize;
        let lo = if base >= 0 { 0 } else { ((-base) + s - 1) / s };
        let hi = if (len_in as isize) - base <= 0 { 0 } else { ((len_in as isize - base) + s - 1) / s };
        let lo = (lo as usize).min(len_out);
        let hi = (hi as usize).min(len_out).max(lo);
        (lo, hi)
    }
}

/// First `n` elements of `buf`, growing it if needed. Contents are stale.
fn grow<T: Scalar>(buf: &mut Vec<T>, n: usize) -> &mut [T] {
    if buf.len() < n {
        buf.resize(n, T::zero());
    }
    &mut buf[..n]
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeo, cols: &mut [T]) {
    let p = g.ho * g.wo;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi) = g.valid_range(ky * g.dilation, g.h, g.ho);
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (xlo, xhi) = g.valid_range(kx * g.dilation, g.w, g.wo);
                for oy in 0..g.ho {
                    let d = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if oy < ylo || oy >= yhi {
                        d.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let iy = oy * g.stride + ky * g.dilation - g.pad;
                    let srow = &plane[iy * g.w..(iy + 1) * g.w];
                    d[..xlo].iter_mut().for_each(|v| *v = T::zero());
                    d[xhi..].iter_mut().for_each(|v| *v = T::zero());
                    if xlo == xhi {
                        continue;
                    }
                    if g.stride == 1 {
                        let ix0 = xlo + kx * g.dilation - g.pad;
                        d[xlo..xhi].copy_from_slice(&srow[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            d[ox] = srow[ox * g.stride + kx * g.dilation - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeo, x: &mut [T]) {
    let p = g.ho * g.wo;
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi) = g.valid_range(ky * g.dilation, g.h, g.ho);
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (xlo, xhi) = g.valid_range(kx * g.dilation, g.w, g.wo);
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky * g.dilation - g.pad;
                    let s = &src[oy * g.wo..(oy + 1) * g.wo];
                    let drow = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in xlo..xhi {
                        drow[ox * g.stride + kx * g.dilation - g.pad] += s[ox];
                    }
                }
            }
        }
    }
}

/// Upsamples one contiguous line by 2 (weights 0.75 / 0.25, clamped).
fn up_line<T: Scalar>(s: &[T], d: &mut [T]) {
    let n = s.len();
    let (a, b) = (T::of(0.75), T::of(0.25));
    for i in 0..n {
        let prev = s[i.saturating_sub(1)];
        let next = s[(i + 1).min(n - 1)];
        d[2 * i] = a * s[i] + b * prev;
        d[2 * i + 1] = a * s[i] + b * next;
    }
}

fn up_line_t<T: Scalar>(g: &[T], d: &mut [T]) {
    let n = d.len();
    let (a, b) = (T::of(0.75), T::of(0.25));
    for i in 0..n {
        d[i] += a * (g[2 * i] + g[2 * i + 1]);
        d[i.saturating_sub(1)] += b * g[2 * i];
        d[(i + 1).min(n - 1)] += b * g[2 * i + 1];
    }
}

/// Upsamples column `col` of a `h x stride` buffer into a `2h x stride` one.
fn up_strided<T: Scalar>(s: &[T], d: &mut [T], col: usize, stride: usize, h: usize) {
    let (a, b) = (T::of(0.75), T::of(0.25));
    for i in 0..h {
        let cur = s[i * stride + col];
        let prev = s[i.saturating_sub(1) * stride + col];
        let next = s[(i + 1).min(h - 1) * stride + col];
        d[2 * i * stride + col] = a * cur + b * prev;
        d[(2 * i + 1) * stride + col] = a * cur + b * next;
    }
}

fn up_strided_t<T: Scalar>(g: &[T], d: &mut [T], col: usize, stride: usize, h: usize) {
    let (a, b) = (T::of(0.75), T::of(0.25));
    for i in 0..h {
        let g0 = g[2 * i * stride + col];
        let g1 = g[(2 * i + 1) * stride + col];
        d[i * stride + col] += a * (g0 + g1);
        d[i.saturating_sub(1) * stride + col] += b * g0;
        d[(i + 1).min(h - 1) * stride + col] += b * g1;
    }
}

/// Renormalized separable filtering along rows (`horizontal`) or columns.
/// With `transpose` the adjoint operator is applied instead.
fn blur_axis<T: Scalar>(s: &[T], d: &mut [T], w: usize, h: usize, taps: &[T], horizontal: bool, transpose: bool) {
    let r = (taps.len() / 2) as isize;
    let (len, lines) = if horizontal { (w, h) } else { (h, w) };
    let at = |line: usize, i: usize| if horizontal { line * w + i } else { i * w + line };
    let norms: Vec<T> = (0..len as isize)
        .map(|i| {
            let mut acc = T::zero();
            for k in -r..=r {
                let j = i + k;
                if j >= 0 && j < len as isize {
                    acc += taps[(k + r) as usize];
                }
            }
            T::one() / acc
        })
        .collect();
    if transpose {
        d.iter_mut().for_each(|v| *v = T::zero());
    }
    for line in 0..lines {
        for i in 0..len as isize {
            let lo = (-r).max(-i);
            let hi = r.min(len as isize - 1 - i);
            if transpose {
                let gv = s[at(line, i as usize)] * norms[i as usize];
                for k in lo..=hi {
                    d[at(line, (i + k) as usize)] += taps[(k + r) as usize] * gv;
                }
            } else {
                let mut acc = T::zero();
                for k in lo..=hi {
                    acc += taps[(k + r) as usize] * s[at(line, (i + k) as usize)];
                }
                d[at(line, i as usize)] = acc * norms[i as usize];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks d(sum(out * probe))/d(input) against central differences.
    fn check_unary(shape: [usize; 4], f: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = rand_tensor(shape, &mut rng);
        let eval = |x: &Tensor<f64>, probe: Option<&Tensor<f64>>| -> (f64, Option<Tensor<f64>>, Tensor<f64>) {
            let mut g = Graph::new(true);
            let xv = g.param(x.clone());
            let y = f(&mut g, xv);
            let yshape = g.shape(y);
            let p = match probe {
                Some(p) => p.clone(),
                None => Tensor::zeros(yshape),
            };
            let pv = g.input(p.clone());
            let prod = g.mul(y, pv);
            let loss = g.mean(prod);
            let grads = g.backward(loss);
            (g.value(loss).item(), grads.get(xv).cloned(), p)
        };
        let (_, _, zero_probe) = eval(&x0, None);
        let probe = rand_tensor(zero_probe.shape, &mut rng);
        let (_, grad, _) = eval(&x0, Some(&probe));
        let grad = grad.expect("gradient");
        let eps = 1e-6;
        for i in (0..x0.len()).step_by((x0.len() / 17).max(1)) {
            let mut xp = x0.clone();
            xp.data[i] += eps;
            let mut xm = x0.clone();
            xm.data[i] -= eps;
            let num = (eval(&xp, Some(&probe)).0 - eval(&xm, Some(&probe)).0) / (2.0 * eps);
            let ana = grad.data[i];
            assert!((num - ana).abs() <= 1e-7 + 1e-5 * num.abs().max(ana.abs()), "i={i}: {num} vs {ana}");
        }
    }

    #[test]
    fn conv_forward_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor([2, 3, 7, 9], &mut rng);
        let w = rand_tensor([4, 3, 3, 3], &mut rng);
        let b = rand_tensor([4, 1, 1, 1], &mut rng);
        for &(stride, dil, pad) in &[(1, 1, 1), (2, 1, 1), (1, 2, 2), (1, 3, 3), (2, 2, 0)] {
            let mut g = Graph::new(false);
            let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
            let y = g.conv2d(xv, wv, Some(bv), stride, dil, pad);
            let out = g.value(y);
            let (ho, wo) = conv_out_dims(7, 9, 3, stride, dil, pad);
            assert_eq!(out.shape, [2, 4, ho, wo]);
            for n in 0..2 {
                for co in 0..4 {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = b.data[co];
                            for ci in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let iy = (oy * stride + ky * dil) as isize - pad as isize;
                                        let ix = (ox * stride + kx * dil) as isize - pad as isize;
                                        if iy >= 0 && ix >= 0 && iy < 7 && ix < 9 {
                                            acc += w.data[((co * 3 + ci) * 3 + ky) * 3 + kx]
                                                * x.data[((n * 3 + ci) * 7 + iy as usize) * 9 + ix as usize];
                                        }
                                    }
                                }
                            }
                            let got = out.data[((n * 4 + co) * ho + oy) * wo + ox];
                            assert!((got - acc).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_gradients() {
        for &(stride, dil, pad, k) in &[(1, 1, 1, 3), (2, 1, 1, 3), (1, 3, 3, 3), (1, 1, 0, 1)] {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let w = rand_tensor([3, 2, k, k], &mut rng);
            let b = rand_tensor([3, 1, 1, 1], &mut rng);
            check_unary([2, 2, 6, 8], |g, x| {
                let wv = g.input(w.clone());
                let bv = g.input(b.clone());
                g.conv2d(x, wv, Some(bv), stride, dil, pad)
            });
            let x = rand_tensor([2, 2, 6, 8], &mut rng);
            check_unary([3, 2, k, k], |g, wv| {
                let xv = g.input(x.clone());
                g.conv2d(xv, wv, None, stride, dil, pad)
            });
        }
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let other = rand_tensor([2, 3, 4, 5], &mut rng);
        let positive = Tensor::from_vec(other.shape, other.data.iter().map(|v| v.abs() + 0.5).collect());
        let single = rand_tensor([2, 1, 4, 5], &mut rng);
        check_unary([2, 3, 4, 5], |g, x| {
            let o = g.input(other.clone());
            g.add(x, o)
        });
        check_unary([2, 3, 4, 5], |g, x| {
            let o = g.input(other.clone());
            g.sub(o, x)
        });
        check_unary([2, 3, 4, 5], |g, x| g.mul(x, x));
        check_unary([2, 3, 4, 5], |g, x| {
            let o = g.input(positive.clone());
            let a = g.div(x, o);
            let b = g.div(o, a);
            g.add(a, b)
        });
        check_unary([2, 3, 4, 5], |g, x| {
            let s = g.input(single.clone());
            g.mul_c(x, s)
        });
        check_unary([2, 1, 4, 5], |g, s| {
            let o = g.input(other.clone());
            g.mul_c(o, s)
        });
        check_unary([2, 3, 4, 5], |g, x| {
            let y = g.scale(x, 1.7);
            let y = g.add_scalar(y, -0.3);
            g.one_minus(y)
        });
        check_unary([2, 3, 4, 5], |g, x| g.leaky_relu(x, 0.2));
        check_unary([2, 3, 4, 5], |g, x| g.sigmoid(x));
    }

    #[test]
    fn structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let other = rand_tensor([2, 2, 4, 6], &mut rng);
        check_unary([2, 3, 4, 6], |g, x| {
            let o = g.input(other.clone());
            g.concat(&[o, x, o])
        });
        check_unary([2, 5, 4, 6], |g, x| g.narrow(x, 1, 3));
        check_unary([2, 3, 4, 6], |g, x| g.avg_pool2(x));
        check_unary([2, 3, 4, 5], |g, x| g.upsample2(x));
        check_unary([2, 3, 4, 5], |g, x| g.softmax_c(x));
        check_unary([2, 3, 7, 5], |g, x| g.blur(x, &[0.1, 0.2, 0.4, 0.2, 0.1]));
        check_unary([2, 3, 4, 5], |g, x| g.diff_x(x));
        check_unary([2, 3, 4, 5], |g, x| g.diff_y(x));
    }

    #[test]
    fn kernel_and_reduction_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let kern = rand_tensor([2, 9, 5, 6], &mut rng);
        let img = rand_tensor([2, 3, 5, 6], &mut rng);
        check_unary([2, 3, 5, 6], |g, x| {
            let k = g.input(kern.clone());
            g.apply_kernel3(x, k)
        });
        check_unary([2, 9, 5, 6], |g, k| {
            let i = g.input(img.clone());
            g.apply_kernel3(i, k)
        });
        check_unary([2, 3, 5, 6], |g, x| g.mean_abs(x));
        check_unary([2, 3, 5, 6], |g, x| g.mean(x));
    }

    #[test]
    fn upsample_matches_half_pixel_bilinear() {
        let mut g = Graph::<f64>::new(false);
        let x = g.input(Tensor::from_vec([1, 1, 1, 3], vec![0.0, 4.0, 8.0]));
        let y = g.upsample2(x);
        let row: Vec<f64> = g.value(y).data[..6].to_vec();
        assert_eq!(row, vec![0.0, 1.0, 3.0, 5.0, 7.0, 8.0]);
    }

    #[test]
    fn apply_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = rand_tensor([1, 3, 4, 4], &mut rng);
        let mut k = Tensor::zeros([1, 9, 4, 4]);
        k.data[4 * 16..5 * 16].iter_mut().for_each(|v| *v = 1.0);
        let mut g = Graph::new(false);
        let (i, kv) = (g.input(img.clone()), g.input(k));
        let y = g.apply_kernel3(i, kv);
        assert_eq!(g.value(y), &img);
    }

    #[test]
    fn blur_preserves_constants() {
        let mut g = Graph::<f64>::new(false);
        let x = g.input(Tensor::from_vec([1, 1, 4, 5], vec![0.3; 20]));
        let y = g.blur(x, &[1.0, 2.0, 5.0, 2.0, 1.0]);
        assert!(g.value(y).data.iter().all(|v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn constants_get_no_gradients() {
        let mut g = Graph::<f32>::new(true);
        let a = g.input(Tensor::scalar(2.0));
        let p = g.param(Tensor::scalar(3.0));
        let y = g.mul(a, p);
        let grads = g.backward(y);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(p).unwrap().item(), 2.0);
        let mut frozen = Graph::<f32>::new(false);
        let p = frozen.param(Tensor::scalar(3.0));
        let y = frozen.scale(p, 2.0);
        assert!(frozen.backward(y).get(p).is_none());
    }
}

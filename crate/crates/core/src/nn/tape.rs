//! Dynamically recorded computation graph with reverse-mode gradients.

use super::gemm::{gemm_nn, gemm_nt, gemm_tn, transpose};
use super::tensor::Tensor;
use super::{sigmoid, Real};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param,
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
        pad: usize,
        cols: Vec<T>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Tanh(Var),
    Softplus(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScaled(Var, Var, T),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SqNormRows(Var),
    WeightedSum {
        terms: Vec<Var>,
        weights: Var,
        coef: Vec<T>,
    },
    SqrtEps(Var, T),
    Sum(Var),
    Mse {
        pred: Var,
        target: Vec<T>,
    },
    Rk4Combine {
        h: Var,
        k: [Var; 4],
        dt: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records forward values so gradients can be replayed backwards.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v)
            .map_or_else(|| vec![T::zero(); len], <[T]>::to_vec)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Constant input; no gradient is tracked for it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Param, true)
    }

    /// Stride-1 convolution. `x: (B, Cin, H, W)`, `k: (Cout, Cin, kh, kw)`,
    /// `b: (Cout)`, zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(k).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be (B, C, H, W)");
        assert_eq!(ks.len(), 4, "conv2d kernel must be (Cout, Cin, kh, kw)");
        let (bn, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kcin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        assert_eq!(cin, kcin, "conv2d channel mismatch");
        let oh = h + 2 * pad + 1 - kh;
        let ow = w + 2 * pad + 1 - kw;
        let q = cin * kh * kw;
        let hw = oh * ow;

        let xv = self.value(x).data();
        let kv = self.value(k).data();
        let bv = self.value(b).data();
        // one (q x bn*hw) patch matrix for the whole batch; column `n*hw + p`
        // only ever meets its own products, so rows stay batch-independent
        let ld = bn * hw;
        let mut cols = vec![T::zero(); q * ld];
        for n in 0..bn {
            im2col(
                &xv[n * cin * h * w..(n + 1) * cin * h * w],
                cin,
                h,
                w,
                kh,
                kw,
                pad,
                oh,
                ow,
                &mut cols,
                ld,
                n * hw,
            );
        }
        let mut wide = vec![T::zero(); cout * ld];
        for co in 0..cout {
            wide[co * ld..(co + 1) * ld].fill(bv[co]);
        }
        gemm_nn(cout, ld, q, kv, &cols, &mut wide);
        let mut out = vec![T::zero(); bn * cout * hw];
        for n in 0..bn {
            for co in 0..cout {
                out[(n * cout + co) * hw..(n * cout + co + 1) * hw]
                    .copy_from_slice(&wide[co * ld + n * hw..co * ld + (n + 1) * hw]);
            }
        }
        let needs = self.ng(x) || self.ng(k) || self.ng(b);
        let value = Tensor::new(vec![bn, cout, oh, ow], out).expect("conv shape");
        self.push(value, Op::Conv2d { x, k, b, pad, cols }, needs)
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/cols are dropped.
    pub fn maxpool2(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let (bn, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(bn * c * oh * ow);
        let mut argmax = Vec::with_capacity(bn * c * oh * ow);
        for plane in 0..bn * c {
            let base = plane * h * w;
            for r in 0..oh {
                for col in 0..ow {
                    let mut best = base + 2 * r * w + 2 * col;
                    for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * r + dr) * w + 2 * col + dc;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let needs = self.ng(x);
        let value = Tensor::new(vec![bn, c, oh, ow], out).expect("pool shape");
        self.push(value, Op::MaxPool2 { x, argmax }, needs)
    }

    /// `x (B, in) * w (in, out) + b (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (bn, fin) = (self.value(x).rows(), self.value(x).row_len());
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 2, "linear weight must be (in, out)");
        assert_eq!(ws[0], fin, "linear input width mismatch");
        let fout = ws[1];
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(bn * fout);
        for _ in 0..bn {
            out.extend_from_slice(bv);
        }
        gemm_nn(
            bn,
            fout,
            fin,
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
        );
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(
            Tensor::new(vec![bn, fout], out).expect("linear shape"),
            Op::Linear { x, w, b },
            needs,
        )
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let needs = self.ng(x);
        self.push(value, op, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            Op::Relu(x),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, T::tanh, Op::Tanh(x))
    }

    /// Elementwise `log(1 + exp(x))`.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, |v| T::c(super::softplus(v.f64())), Op::Softplus(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.numel(), vb.numel(), "elementwise size mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let needs = self.ng(a) || self.ng(b);
        self.push(value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + c * b`.
    pub fn add_scaled(&mut self, a: Var, b: Var, c: T) -> Var {
        self.zip(a, b, |x, y| x + c * y, Op::AddScaled(a, b, c))
    }

    /// Flattens everything after the leading dimension.
    pub fn flatten(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let shape = vec![v.rows(), v.row_len()];
        let value = v.clone().reshape(shape).expect("flatten");
        let needs = self.ng(x);
        self.push(value, Op::Reshape(x), needs)
    }

    /// Stacks tensors along the leading dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail: Vec<usize> = self.value(parts[0]).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(
                &v.shape()[1..],
                &tail[..],
                "concat_rows trailing shape mismatch"
            );
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let needs = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::new(shape, data).expect("concat shape"),
            Op::ConcatRows(parts.to_vec()),
            needs,
        )
    }

    /// Rows `start..end` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x);
        assert!(start <= end && end <= v.rows(), "slice_rows out of range");
        let n = v.row_len();
        let mut shape = v.shape().to_vec();
        shape[0] = end - start;
        let data = v.data()[start * n..end * n].to_vec();
        let needs = self.ng(x);
        self.push(
            Tensor::new(shape, data).expect("slice shape"),
            Op::SliceRows { x, start },
            needs,
        )
    }

    /// Squared Euclidean norm of each row: `(B, ...) -> (B)`.
    pub fn sq_norm_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.row_len();
        let data: Vec<T> = v
            .data()
            .chunks(n.max(1))
            .take(v.rows())
            .map(|r| r.iter().fold(T::zero(), |s, &e| s + e * e))
            .collect();
        let needs = self.ng(x);
        self.push(Tensor::from_vec(data), Op::SqNormRows(x), needs)
    }

    /// `sum_k coef[k] * weights[k] * terms[k]` for equally shaped `terms`.
    pub fn weighted_sum(&mut self, terms: &[Var], weights: Var, coef: &[T]) -> Var {
        assert_eq!(terms.len(), coef.len());
        assert_eq!(
            self.value(weights).numel(),
            terms.len(),
            "one weight per term"
        );
        let n = self.value(terms[0]).numel();
        let shape = self.value(terms[0]).shape().to_vec();
        let mut out = vec![T::zero(); n];
        for (k, &t) in terms.iter().enumerate() {
            let s = coef[k] * self.value(weights).data()[k];
            for (o, &v) in out.iter_mut().zip(self.value(t).data()) {
                *o = *o + s * v;
            }
        }
        let needs = self.ng(weights) || terms.iter().any(|&t| self.ng(t));
        self.push(
            Tensor::new(shape, out).expect("weighted sum shape"),
            Op::WeightedSum {
                terms: terms.to_vec(),
                weights,
                coef: coef.to_vec(),
            },
            needs,
        )
    }

    /// `sqrt(x + eps)` elementwise.
    pub fn sqrt_eps(&mut self, x: Var, eps: T) -> Var {
        self.map(x, |v| (v + eps).sqrt(), Op::SqrtEps(x, eps))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let needs = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &[T]) -> Var {
        let p = self.value(pred).data();
        assert_eq!(p.len(), target.len(), "mse length mismatch");
        assert!(!target.is_empty(), "mse of an empty batch");
        let s = p
            .iter()
            .zip(target)
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
        let value = Tensor::scalar(s / T::c(target.len() as f64));
        let needs = self.ng(pred);
        self.push(
            value,
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            needs,
        )
    }

    /// One classical Runge-Kutta update `h + dt/6 (k1 + 2 k2 + 2 k3 + k4)`.
    pub fn rk4_combine(&mut self, h: Var, k: [Var; 4], dt: T) -> Var {
        let two = T::c(2.0);
        let sixth = dt / T::c(6.0);
        let hv = self.value(h);
        let n = hv.numel();
        let shape = hv.shape().to_vec();
        let mut out = Vec::with_capacity(n);
        let (k1, k2, k3, k4) = (
            self.value(k[0]).data(),
            self.value(k[1]).data(),
            self.value(k[2]).data(),
            self.value(k[3]).data(),
        );
        for i in 0..n {
            out.push(hv.data()[i] + sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]));
        }
        let needs = self.ng(h) || k.iter().any(|&v| self.ng(v));
        self.push(
            Tensor::new(shape, out).expect("rk4 shape"),
            Op::Rk4Combine { h, k, dt },
            needs,
        )
    }

    /// Smallest distance of any ReLU pre-activation from zero and smallest
    /// gap between the winner and runner-up of any max-pool window with a
    /// positive maximum. Finite differences are only trustworthy when both
    /// are comfortably larger than the step size.
    pub fn kink_margin(&self) -> T {
        let mut margin = T::infinity();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.value(*x).data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let xv = self.value(*x);
                    let s = xv.shape();
                    let (h, w) = (s[2], s[3]);
                    let (oh, ow) = (h / 2, w / 2);
                    for (o, &best) in argmax.iter().enumerate() {
                        let top = xv.data()[best as usize];
                        if top <= T::zero() {
                            continue;
                        }
                        let plane = o / (oh * ow);
                        let r = (o % (oh * ow)) / ow;
                        let c = o % ow;
                        let base = plane * h * w;
                        for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let idx = base + (2 * r + dr) * w + 2 * c + dc;
                            if idx != best as usize {
                                margin = margin.min(top - xv.data()[idx]);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse pass from the one-element value `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).numel(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        debug_assert!(
            grads
                .iter()
                .flatten()
                .all(|g| g.iter().all(|v| v.is_finite())),
            "non-finite gradient"
        );
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Conv2d { x, k, b, pad, cols } => {
                let xs = self.value(*x).shape();
                let ks = self.value(*k).shape();
                let (bn, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
                let os = node.value.shape();
                let (oh, ow) = (os[2], os[3]);
                let q = cin * kh * kw;
                let hw = oh * ow;
                if self.ng(*b) {
                    let db = accumulate(&mut grads[b.0], cout);
                    for n in 0..bn {
                        for co in 0..cout {
                            let off = (n * cout + co) * hw;
                            db[co] = db[co] + g[off..off + hw].iter().copied().sum::<T>();
                        }
                    }
                }
                let ld = bn * hw;
                let needs_k = self.ng(*k);
                let needs_x = self.ng(*x);
                if needs_k || needs_x {
                    // gradient in (cout x bn*hw) layout to match the patch matrix
                    let mut gw = vec![T::zero(); cout * ld];
                    for n in 0..bn {
                        for co in 0..cout {
                            gw[co * ld + n * hw..co * ld + (n + 1) * hw].copy_from_slice(
                                &g[(n * cout + co) * hw..(n * cout + co + 1) * hw],
                            );
                        }
                    }
                    if needs_k {
                        let dk = accumulate(&mut grads[k.0], cout * q);
                        gemm_nt(cout, q, ld, &gw, cols, dk);
                    }
                    if needs_x {
                        let kv = self.value(*k).data();
                        let mut dcol = vec![T::zero(); q * ld];
                        gemm_tn(q, ld, cout, kv, &gw, &mut dcol);
                        let dx = accumulate(&mut grads[x.0], bn * cin * h * w);
                        for n in 0..bn {
                            col2im(
                                &dcol,
                                cin,
                                h,
                                w,
                                kh,
                                kw,
                                *pad,
                                oh,
                                ow,
                                &mut dx[n * cin * h * w..(n + 1) * cin * h * w],
                                ld,
                                n * hw,
                            );
                        }
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let n = self.value(*x).numel();
                let dx = accumulate(&mut grads[x.0], n);
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src as usize] = dx[src as usize] + g[o];
                }
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let (bn, fin) = (xv.rows(), xv.row_len());
                let fout = node.value.row_len();
                if self.ng(*b) {
                    let db = accumulate(&mut grads[b.0], fout);
                    for r in 0..bn {
                        for (d, &gv) in db.iter_mut().zip(&g[r * fout..(r + 1) * fout]) {
                            *d = *d + gv;
                        }
                    }
                }
                if self.ng(*w) {
                    let dw = accumulate(&mut grads[w.0], fin * fout);
                    gemm_tn(fin, fout, bn, xv.data(), g, dw);
                }
                if self.ng(*x) {
                    let wt = transpose(fin, fout, self.value(*w).data());
                    let dx = accumulate(&mut grads[x.0], bn * fin);
                    gemm_nn(bn, fin, fout, g, &wt, dx);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = accumulate(&mut grads[x.0], xv.len());
                for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                    if v > T::zero() {
                        *d = *d + gv;
                    }
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let dx = accumulate(&mut grads[x.0], y.len());
                for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                    *d = *d + gv * (T::one() - yv * yv);
                }
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                let dx = accumulate(&mut grads[x.0], xv.len());
                for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                    *d = *d + gv * T::c(sigmoid(v.f64()));
                }
            }
            Op::Scale(x, c) => {
                let dx = accumulate(&mut grads[x.0], g.len());
                for (d, &gv) in dx.iter_mut().zip(g) {
                    *d = *d + *c * gv;
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::AddScaled(a, b, _) => {
                let cb = match &node.op {
                    Op::Add(..) => T::one(),
                    Op::Sub(..) => -T::one(),
                    Op::AddScaled(_, _, c) => *c,
                    _ => unreachable!(),
                };
                if self.ng(*a) {
                    let da = accumulate(&mut grads[a.0], g.len());
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                }
                if self.ng(*b) {
                    let db = accumulate(&mut grads[b.0], g.len());
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d = *d + cb * gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let bv = self.value(*b).data();
                    let da = accumulate(&mut grads[a.0], g.len());
                    for ((d, &gv), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d = *d + gv * y;
                    }
                }
                if self.ng(*b) {
                    let av = self.value(*a).data();
                    let db = accumulate(&mut grads[b.0], g.len());
                    for ((d, &gv), &x) in db.iter_mut().zip(g).zip(av) {
                        *d = *d + gv * x;
                    }
                }
            }
            Op::Reshape(x) => {
                let dx = accumulate(&mut grads[x.0], g.len());
                for (d, &gv) in dx.iter_mut().zip(g) {
                    *d = *d + gv;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if self.ng(*p) {
                        let dp = accumulate(&mut grads[p.0], n);
                        for (d, &gv) in dp.iter_mut().zip(&g[off..off + n]) {
                            *d = *d + gv;
                        }
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let off = start * xv.row_len();
                let dx = accumulate(&mut grads[x.0], xv.numel());
                for (d, &gv) in dx[off..off + g.len()].iter_mut().zip(g) {
                    *d = *d + gv;
                }
            }
            Op::SqNormRows(x) => {
                let xv = self.value(*x);
                let n = xv.row_len();
                let two = T::c(2.0);
                let dx = accumulate(&mut grads[x.0], xv.numel());
                for (r, &gv) in g.iter().enumerate() {
                    let s = two * gv;
                    for (d, &v) in dx[r * n..(r + 1) * n]
                        .iter_mut()
                        .zip(&xv.data()[r * n..(r + 1) * n])
                    {
                        *d = *d + s * v;
                    }
                }
            }
            Op::WeightedSum {
                terms,
                weights,
                coef,
            } => {
                let wv = self.value(*weights).data().to_vec();
                if self.ng(*weights) {
                    let mut dw = vec![T::zero(); terms.len()];
                    for (k, t) in terms.iter().enumerate() {
                        let dot = self
                            .value(*t)
                            .data()
                            .iter()
                            .zip(g)
                            .fold(T::zero(), |s, (&v, &gv)| s + v * gv);
                        dw[k] = coef[k] * dot;
                    }
                    let slot = accumulate(&mut grads[weights.0], terms.len());
                    for (s, d) in slot.iter_mut().zip(dw) {
                        *s = *s + d;
                    }
                }
                for (k, t) in terms.iter().enumerate() {
                    if self.ng(*t) {
                        let s = coef[k] * wv[k];
                        let dt = accumulate(&mut grads[t.0], g.len());
                        for (d, &gv) in dt.iter_mut().zip(g) {
                            *d = *d + s * gv;
                        }
                    }
                }
            }
            Op::SqrtEps(x, _) => {
                let y = node.value.data();
                let half = T::c(0.5);
                let dx = accumulate(&mut grads[x.0], y.len());
                for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                    *d = *d + gv * half / yv;
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                let dx = accumulate(&mut grads[x.0], n);
                for d in dx.iter_mut() {
                    *d = *d + g[0];
                }
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred).data();
                let s = T::c(2.0) * g[0] / T::c(target.len() as f64);
                let dp = accumulate(&mut grads[pred.0], p.len());
                for ((d, &pv), &tv) in dp.iter_mut().zip(p).zip(target) {
                    *d = *d + s * (pv - tv);
                }
            }
            Op::Rk4Combine { h, k, dt } => {
                let sixth = *dt / T::c(6.0);
                let factors = [sixth, T::c(2.0) * sixth, T::c(2.0) * sixth, sixth];
                if self.ng(*h) {
                    let dh = accumulate(&mut grads[h.0], g.len());
                    for (d, &gv) in dh.iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                }
                for (kv, f) in k.iter().zip(factors) {
                    if self.ng(*kv) {
                        let dk = accumulate(&mut grads[kv.0], g.len());
                        for (d, &gv) in dk.iter_mut().zip(g) {
                            *d = *d + f * gv;
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose source column `cc + j - pad` lies inside `0..w`.
#[inline]
fn valid_cols(j: usize, pad: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(j);
    let hi = (w + pad).saturating_sub(j).min(ow);
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [T],
    ld: usize,
    off: usize,
) {
    for c in 0..cin {
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                let dst = &mut col[row * ld + off..row * ld + off + oh * ow];
                let (lo, hi) = valid_cols(j, pad, w, ow);
                if lo >= hi {
                    continue;
                }
                for r in 0..oh {
                    let sr = r + i;
                    if sr < pad || sr - pad >= h {
                        continue;
                    }
                    let src = c * h * w + (sr - pad) * w;
                    dst[r * ow + lo..r * ow + hi]
                        .copy_from_slice(&x[src + lo + j - pad..src + hi + j - pad]);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    col: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
    ld: usize,
    off: usize,
) {
    for c in 0..cin {
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                let src = &col[row * ld + off..row * ld + off + oh * ow];
                let (lo, hi) = valid_cols(j, pad, w, ow);
                if lo >= hi {
                    continue;
                }
                for r in 0..oh {
                    let sr = r + i;
                    if sr < pad || sr - pad >= h {
                        continue;
                    }
                    let dst = c * h * w + (sr - pad) * w;
                    for (d, &s) in dx[dst + lo + j - pad..dst + hi + j - pad]
                        .iter_mut()
                        .zip(&src[r * ow + lo..r * ow + hi])
                    {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

//! A small tape-based reverse-mode differentiation engine over [`Tensor`].
//!
//! Every forward computation is recorded on a [`Graph`]; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients for every node that
//! depends on a parameter or an input marked as differentiable.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: &[usize], kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 {
            return Err(Error::dim(format!("expected NCHW input, got {:?}", x)));
        }
        let (n, c, h, w) = (x[0], x[1], x[2], x[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw || stride == 0 {
            return Err(Error::dim(format!(
                "kernel {}x{} (stride {}, pad {}) does not fit input {}x{}",
                kh, kw, stride, pad, h, w
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            kh,
            kw,
            ho,
            wo,
            stride,
            pad,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Input coordinate for output position (oy, ox) and kernel tap (ky, kx), if inside.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias { x: Var, b: Var },
    ScaleRows { x: Var, v: Var },
    ScaleCols { x: Var, v: Var },
    Affine { x: Var, scale: f64 },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Recip(Var),
    Sqrt(Var),
    MulScalar { x: Var, s: Var },
    LogSoftmax(Var),
    SumAll(Var),
    SumLast(Var),
    Reshape(Var),
    Transpose(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<f64> },
    ChannelBias { x: Var, b: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    SqDist { a: Var, b: Var },
    RowNormalize { x: Var, norms: Vec<f64> },
    ConcatRows(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. One graph per forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Leaf whose gradient is tracked (used for input-sensitivity checks).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls with the same id return the
    /// same node, so weight sharing accumulates into a single gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, store.trainable(id));
        self.params.insert(id, v);
        v
    }

    /// Copies the value into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim(format!("matmul needs 2-D operands, got {:?} and {:?}", sa, sb)));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::dim(format!(
                "matmul inner dimensions differ: {:?} x {:?}{}",
                sa,
                sb,
                if trans_b { "^T" } else { "" }
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
            0.0,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, trans_b }, ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{}: {:?} vs {:?}",
                what,
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, "elementwise operands")?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [n] {
            return Err(Error::dim(format!(
                "bias {:?} does not match last axis of {:?}",
                self.shape(b),
                self.shape(x)
            )));
        }
        let bv = self.value(b).data();
        let mut t = self.value(x).clone();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += bv[i % n];
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(t, Op::AddBias { x, b }, ng))
    }

    fn check_2d_vec(&self, x: Var, v: Var, axis: usize) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 2 || self.shape(v) != [s[axis]] {
            return Err(Error::dim(format!(
                "cannot broadcast {:?} over axis {} of {:?}",
                self.shape(v),
                axis,
                s
            )));
        }
        Ok((s[0], s[1]))
    }

    /// `x[i, j] * v[i]`.
    pub fn scale_rows(&mut self, x: Var, v: Var) -> Result<Var> {
        let (_, n) = self.check_2d_vec(x, v, 0)?;
        let vv = self.value(v).data();
        let mut t = self.value(x).clone();
        for (i, val) in t.data_mut().iter_mut().enumerate() {
            *val *= vv[i / n];
        }
        let ng = self.ng(x) || self.ng(v);
        Ok(self.push(t, Op::ScaleRows { x, v }, ng))
    }

    /// `x[i, j] * v[j]`.
    pub fn scale_cols(&mut self, x: Var, v: Var) -> Result<Var> {
        let (_, n) = self.check_2d_vec(x, v, 1)?;
        let vv = self.value(v).data();
        let mut t = self.value(x).clone();
        for (i, val) in t.data_mut().iter_mut().enumerate() {
            *val *= vv[i % n];
        }
        let ng = self.ng(x) || self.ng(v);
        Ok(self.push(t, Op::ScaleCols { x, v }, ng))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(x).map(|v| scale * v + shift);
        let ng = self.ng(x);
        self.push(t, Op::Affine { x, scale }, ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(t, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, Op::Recip(x), |v| 1.0 / v)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim(format!("scalar factor has shape {:?}", self.shape(s))));
        }
        let sv = self.value(s).data()[0];
        let t = self.value(x).map(|v| v * sv);
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(t, Op::MulScalar { x, s }, ng))
    }

    /// Row-wise log-softmax of a 2-D array.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim("log_softmax expects a 2-D array"));
        }
        let n = s[1];
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let ng = self.ng(x);
        Ok(self.push(t, Op::LogSoftmax(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let l = *shape.last().unwrap_or(&1);
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(l.max(1))
            .map(|c| c.iter().sum())
            .collect();
        let out_shape = &shape[..shape.len().saturating_sub(1)];
        let t = Tensor::new(out_shape, data).expect("reduced shape");
        let ng = self.ng(x);
        self.push(t, Op::SumLast(x), ng)
    }

    pub fn mean_last(&mut self, x: Var) -> Var {
        let l = *self.shape(x).last().unwrap_or(&1) as f64;
        let s = self.sum_last(x);
        self.scale(s, 1.0 / l)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim("transpose expects a 2-D array"));
        }
        let (r, c) = (s[0], s[1]);
        let t = Tensor::new(&[c, r], transpose(r, c, self.value(x).data()))?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Transpose(x), ng))
    }

    /// 2-D convolution, NCHW input and OIHW kernel, square stride and zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 {
            return Err(Error::dim(format!("kernel must be OIHW, got {:?}", ws)));
        }
        let geom = ConvGeom::new(self.shape(x), ws[2], ws[3], stride, pad)?;
        if ws[1] != geom.c {
            return Err(Error::dim(format!(
                "kernel expects {} input channels, input has {}",
                ws[1], geom.c
            )));
        }
        let o = ws[0];
        let (pk, np) = (geom.patch(), geom.n * geom.positions());
        let cols = im2col(self.value(x).data(), &geom);
        let mut tmp = vec![0.0; o * np];
        gemm(o, pk, np, self.value(w).data(), false, &cols, false, &mut tmp, 0.0);
        // (O, N*P) -> (N, O, P)
        let p = geom.positions();
        let mut out = vec![0.0; o * np];
        for oc in 0..o {
            for n in 0..geom.n {
                let src = &tmp[oc * np + n * p..oc * np + (n + 1) * p];
                out[(n * o + oc) * p..(n * o + oc + 1) * p].copy_from_slice(src);
            }
        }
        let t = Tensor::new(&[geom.n, o, geom.ho, geom.wo], out)?;
        let ng = self.ng(x) || self.ng(w);
        let cols = if self.ng(w) { cols } else { Vec::new() };
        Ok(self.push(t, Op::Conv2d { x, w, geom, cols }, ng))
    }

    /// Adds a per-channel bias to an NCHW array.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || self.shape(b) != [s[1]] {
            return Err(Error::dim(format!(
                "channel bias {:?} does not match {:?}",
                self.shape(b),
                s
            )));
        }
        let hw = s[2] * s[3];
        let bv = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += bv[(i / hw) % s[1]];
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(t, Op::ChannelBias { x, b }, ng))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), k, k, stride, pad)?;
        let xv = self.value(x).data();
        let (hw, p) = (geom.h * geom.w, geom.positions());
        let mut out = vec![0.0; geom.n * geom.c * p];
        let mut argmax = vec![0usize; out.len()];
        for nc in 0..geom.n * geom.c {
            for oy in 0..geom.ho {
                for ox in 0..geom.wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = usize::MAX;
                    for ky in 0..k {
                        for kx in 0..k {
                            if let Some((y, xx)) = geom.source(oy, ox, ky, kx) {
                                let idx = nc * hw + y * geom.w + xx;
                                if xv[idx] > best {
                                    best = xv[idx];
                                    arg = idx;
                                }
                            }
                        }
                    }
                    let o = nc * p + oy * geom.wo + ox;
                    out[o] = best;
                    argmax[o] = arg;
                }
            }
        }
        let t = Tensor::new(&[geom.n, geom.c, geom.ho, geom.wo], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::MaxPool { x, argmax }, ng))
    }

    /// Pairwise squared Euclidean distances between the rows of `a` and `b`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim(format!(
                "pairwise distance needs matching row widths, got {:?} and {:?}",
                sa, sb
            )));
        }
        let (b1, b2, d) = (sa[0], sb[0], sa[1]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; b1 * b2];
        for i in 0..b1 {
            let ra = &va[i * d..(i + 1) * d];
            for j in 0..b2 {
                let rb = &vb[j * d..(j + 1) * d];
                out[i * b2 + j] = ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&[b1, b2], out)?, Op::SqDist { a, b }, ng))
    }

    /// Scales each row to unit L2 norm; all-zero rows stay zero.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim("row_normalize expects a 2-D array"));
        }
        let d = s[1];
        let mut t = self.value(x).clone();
        let mut norms = Vec::with_capacity(s[0]);
        for row in t.data_mut().chunks_mut(d.max(1)) {
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nrm > 0.0 {
                row.iter_mut().for_each(|v| *v /= nrm);
            }
            norms.push(nrm);
        }
        let ng = self.ng(x);
        Ok(self.push(t, Op::RowNormalize { x, norms }, ng))
    }

    /// Concatenates arrays along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero arrays"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::dim(format!("cannot concat {:?} onto rows of {:?}", s, tail)));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(&shape, data)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.shape(out), 1.0));
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of every parameter leaf on this graph, keyed by parameter id.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads.get(v).map(|g| (id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let acc = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.ng(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (a, b) in existing.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(t),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Constant | Op::Input | Op::Param => {}
            Op::MatMul { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = y.shape()[1];
                if self.ng(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, vb.data(), !trans_b, &mut da, 0.0);
                    acc(*a, Tensor::new(va.shape(), da).unwrap(), grads);
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; k * n];
                    if *trans_b {
                        gemm(n, m, k, gd, true, va.data(), false, &mut db, 0.0);
                    } else {
                        gemm(k, m, n, va.data(), true, gd, false, &mut db, 0.0);
                    }
                    acc(*b, Tensor::new(vb.shape(), db).unwrap(), grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.map(|v| -v), grads);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, zip_with(g, vb, |g, b| g * b), grads);
                acc(*b, zip_with(g, va, |g, a| g * a), grads);
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, zip_with(g, vb, |g, b| g / b), grads);
                let db: Vec<f64> = gd
                    .iter()
                    .zip(va.data().iter().zip(vb.data()))
                    .map(|(g, (a, b))| -g * a / (b * b))
                    .collect();
                acc(*b, Tensor::new(vb.shape(), db).unwrap(), grads);
            }
            Op::AddBias { x, b } => {
                acc(*x, g.clone(), grads);
                let n = self.shape(*b)[0];
                let mut db = vec![0.0; n];
                for (i, v) in gd.iter().enumerate() {
                    db[i % n] += v;
                }
                acc(*b, Tensor::new(&[n], db).unwrap(), grads);
            }
            Op::ScaleRows { x, v } => {
                let (vx, vv) = (self.value(*x), self.value(*v));
                let n = vx.shape()[1];
                let dx: Vec<f64> = gd.iter().enumerate().map(|(i, g)| g * vv.data()[i / n]).collect();
                acc(*x, Tensor::new(vx.shape(), dx).unwrap(), grads);
                let mut dv = vec![0.0; vv.len()];
                for (i, (g, xv)) in gd.iter().zip(vx.data()).enumerate() {
                    dv[i / n] += g * xv;
                }
                acc(*v, Tensor::new(vv.shape(), dv).unwrap(), grads);
            }
            Op::ScaleCols { x, v } => {
                let (vx, vv) = (self.value(*x), self.value(*v));
                let n = vx.shape()[1];
                let dx: Vec<f64> = gd.iter().enumerate().map(|(i, g)| g * vv.data()[i % n]).collect();
                acc(*x, Tensor::new(vx.shape(), dx).unwrap(), grads);
                let mut dv = vec![0.0; n];
                for (i, (g, xv)) in gd.iter().zip(vx.data()).enumerate() {
                    dv[i % n] += g * xv;
                }
                acc(*v, Tensor::new(vv.shape(), dv).unwrap(), grads);
            }
            Op::Affine { x, scale } => acc(*x, g.map(|v| v * scale), grads),
            Op::Relu(x) => acc(*x, zip_with(g, y, |g, y| if y > 0.0 { g } else { 0.0 }), grads),
            Op::Sigmoid(x) => acc(*x, zip_with(g, y, |g, y| g * y * (1.0 - y)), grads),
            Op::Exp(x) => acc(*x, zip_with(g, y, |g, y| g * y), grads),
            Op::Square(x) => acc(*x, zip_with(g, self.value(*x), |g, x| 2.0 * g * x), grads),
            Op::Recip(x) => acc(*x, zip_with(g, y, |g, y| -g * y * y), grads),
            Op::Sqrt(x) => acc(*x, zip_with(g, y, |g, y| g / (2.0 * y)), grads),
            Op::MulScalar { x, s } => {
                let sv = self.value(*s);
                acc(*x, g.map(|v| v * sv.data()[0]), grads);
                let ds: f64 = gd.iter().zip(self.value(*x).data()).map(|(a, b)| a * b).sum();
                acc(*s, Tensor::new(sv.shape(), vec![ds]).unwrap(), grads);
            }
            Op::LogSoftmax(x) => {
                let n = y.shape()[1];
                let mut dx = vec![0.0; y.len()];
                for ((dr, gr), yr) in dx.chunks_mut(n).zip(gd.chunks(n)).zip(y.data().chunks(n)) {
                    let gs: f64 = gr.iter().sum();
                    for j in 0..n {
                        dr[j] = gr[j] - yr[j].exp() * gs;
                    }
                }
                acc(*x, Tensor::new(y.shape(), dx).unwrap(), grads);
            }
            Op::SumAll(x) => acc(*x, Tensor::full(self.shape(*x), gd[0]), grads),
            Op::SumLast(x) => {
                let s = self.shape(*x);
                let l = *s.last().unwrap_or(&1);
                let dx: Vec<f64> = (0..self.value(*x).len()).map(|i| gd[i / l.max(1)]).collect();
                acc(*x, Tensor::new(s, dx).unwrap(), grads);
            }
            Op::Reshape(x) => acc(*x, g.clone().reshape(self.shape(*x)).unwrap(), grads),
            Op::Transpose(x) => {
                let (r, c) = (y.shape()[0], y.shape()[1]);
                acc(*x, Tensor::new(&[c, r], transpose(r, c, gd)).unwrap(), grads);
            }
            Op::Conv2d { x, w, geom, cols } => {
                let o = self.shape(*w)[0];
                let (pk, p) = (geom.patch(), geom.positions());
                let np = geom.n * p;
                let mut gt = vec![0.0; o * np];
                for n in 0..geom.n {
                    for oc in 0..o {
                        gt[oc * np + n * p..oc * np + (n + 1) * p]
                            .copy_from_slice(&gd[(n * o + oc) * p..(n * o + oc + 1) * p]);
                    }
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; o * pk];
                    gemm(o, np, pk, &gt, false, cols, true, &mut dw, 0.0);
                    acc(*w, Tensor::new(self.shape(*w), dw).unwrap(), grads);
                }
                if self.ng(*x) {
                    let mut dcols = vec![0.0; pk * np];
                    gemm(pk, o, np, self.value(*w).data(), true, &gt, false, &mut dcols, 0.0);
                    let dx = col2im(&dcols, geom);
                    acc(*x, Tensor::new(self.shape(*x), dx).unwrap(), grads);
                }
            }
            Op::ChannelBias { x, b } => {
                acc(*x, g.clone(), grads);
                let s = y.shape();
                let hw = s[2] * s[3];
                let mut db = vec![0.0; s[1]];
                for (i, v) in gd.iter().enumerate() {
                    db[(i / hw) % s[1]] += v;
                }
                acc(*b, Tensor::new(&[s[1]], db).unwrap(), grads);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    if src != usize::MAX {
                        dx[src] += gd[o];
                    }
                }
                acc(*x, Tensor::new(self.shape(*x), dx).unwrap(), grads);
            }
            Op::SqDist { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (b1, d) = (va.shape()[0], va.shape()[1]);
                let b2 = vb.shape()[0];
                if self.ng(*a) {
                    let mut da = vec![0.0; b1 * d];
                    for i in 0..b1 {
                        for j in 0..b2 {
                            let gij = 2.0 * gd[i * b2 + j];
                            for p in 0..d {
                                da[i * d + p] += gij * (va.data()[i * d + p] - vb.data()[j * d + p]);
                            }
                        }
                    }
                    acc(*a, Tensor::new(va.shape(), da).unwrap(), grads);
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; b2 * d];
                    for i in 0..b1 {
                        for j in 0..b2 {
                            let gij = 2.0 * gd[i * b2 + j];
                            for p in 0..d {
                                db[j * d + p] -= gij * (va.data()[i * d + p] - vb.data()[j * d + p]);
                            }
                        }
                    }
                    acc(*b, Tensor::new(vb.shape(), db).unwrap(), grads);
                }
            }
            Op::RowNormalize { x, norms } => {
                let d = y.shape()[1];
                let mut dx = vec![0.0; y.len()];
                for (i, &nrm) in norms.iter().enumerate() {
                    if nrm == 0.0 {
                        continue;
                    }
                    let yr = &y.data()[i * d..(i + 1) * d];
                    let gr = &gd[i * d..(i + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for p in 0..d {
                        dx[i * d + p] = (gr[p] - yr[p] * dot) / nrm;
                    }
                }
                acc(*x, Tensor::new(y.shape(), dx).unwrap(), grads);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, Tensor::new(self.shape(p), gd[off..off + len].to_vec()).unwrap(), grads);
                    off += len;
                }
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(b.shape(), data).unwrap()
}

fn transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

/// Column matrix of shape `(C*kh*kw, N*Ho*Wo)`.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (p, np) = (g.positions(), g.n * g.positions());
    let mut cols = vec![0.0; g.patch() * np];
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let plane = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        for ox in 0..g.wo {
                            if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                                dst[n * p + oy * g.wo + ox] = plane[y * g.w + xx];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (p, np) = (g.positions(), g.n * g.positions());
    let mut x = vec![0.0; g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let base = (n * g.c + c) * g.h * g.w;
                    for oy in 0..g.ho {
                        for ox in 0..g.wo {
                            if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                                x[base + y * g.w + xx] += src[n * p + oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

//! Recorded computation over a fixed operator set, with reverse-mode gradients.
//!
//! A [`Graph`] is built eagerly: every operator computes its value on the spot
//! and appends a node. Nodes are appended in dependency order, so the backward
//! pass is a single reverse sweep. Every operator validates input shapes and
//! rejects non-finite results.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var, transpose_b: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    MaxPool2d { x: Var, source: Vec<usize> },
    AvgPool2d { x: Var, kernel: usize, stride: usize },
    Add { a: Var, b: Var },
    AddBroadcast { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    AddScalar { a: Var },
    Sigmoid { a: Var },
    Relu { a: Var },
    Hinge { a: Var },
    SumLast { a: Var },
    SumAll { a: Var },
    Softmax { a: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    SqNorm { a: Var },
    MaxOthers { a: Var, source: Vec<usize> },
    Reshape { a: Var },
    Transpose01 { a: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::Add { .. } => "add",
            Op::AddBroadcast { .. } => "add_broadcast",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Relu { .. } => "relu",
            Op::Hinge { .. } => "hinge",
            Op::SumLast { .. } => "sum_last",
            Op::SumAll { .. } => "sum_all",
            Op::Softmax { .. } => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SqNorm { .. } => "sq_norm",
            Op::MaxOthers { .. } => "max_others",
            Op::Reshape { .. } => "reshape",
            Op::Transpose01 { .. } => "transpose01",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-node gradients from one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if `v` participates and requires grad.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn conv_out(extent: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output positions `o` with `o*stride + k - pad` inside `[0, extent)`.
#[inline]
fn valid_range(out: usize, extent: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let limit = extent + pad;
    let hi = if limit <= k { 0 } else { ((limit - k - 1) / stride + 1).min(out) };
    (lo.min(hi), hi)
}

/// Recorded graph. Cheap to create; build one per forward pass.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(Var, String)>,
    frozen: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph whose parameter leaves never require gradients (inference).
    pub fn frozen() -> Self {
        Self { frozen: true, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Leaf whose value never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// Leaf that receives a gradient when `requires_grad` is set.
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Leaf bound to a named parameter; the parameter's `requires_grad` flag is honoured.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        let t = params.tensor(name)?;
        let needs = t.requires_grad() && !self.frozen;
        let mut value = t.clone();
        value.clear_grad();
        let v = self.push(value, Op::Leaf, needs)?;
        self.bindings.push((v, name.to_string()));
        Ok(v)
    }

    /// `x·Wᵀ + b` for `x: [N, I]`, `W: [O, I]`, `b: [O]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("affine", format!("x {xs:?}, W {ws:?}")));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape("affine", format!("bias {:?}, expected [{o}]", self.shape(b))));
            }
        }
        let (xd, wd) = (self.data(x), self.data(w));
        let mut out = vec![0.0; n * o];
        for r in 0..n {
            let xr = &xd[r * i..(r + 1) * i];
            for c in 0..o {
                let wr = &wd[c * i..(c + 1) * i];
                out[r * o + c] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = b {
            let bd = self.data(b);
            for r in 0..n {
                out[r * o..(r + 1) * o].iter_mut().zip(bd).for_each(|(y, bb)| *y += bb);
            }
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::new(&[n, o], out)?, Op::Affine { x, w, b }, needs)
    }

    /// Batched product over the leading axis: `[B,P,Q]·[B,Q,R]`, or `[B,P,Q]·[B,R,Q]ᵀ`.
    pub fn matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        let bad = || Error::shape("matmul", format!("a {as_:?}, b {bs:?}, transpose_b={transpose_b}"));
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(bad());
        }
        let (bt, p, q) = (as_[0], as_[1], as_[2]);
        let r = if transpose_b {
            if bs[2] != q {
                return Err(bad());
            }
            bs[1]
        } else {
            if bs[1] != q {
                return Err(bad());
            }
            bs[2]
        };
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; bt * p * r];
        for t in 0..bt {
            let am = &ad[t * p * q..(t + 1) * p * q];
            let bm = &bd[t * q * r..(t + 1) * q * r];
            let om = &mut out[t * p * r..(t + 1) * p * r];
            for i in 0..p {
                let arow = &am[i * q..(i + 1) * q];
                let orow = &mut om[i * r..(i + 1) * r];
                if transpose_b {
                    for (j, o) in orow.iter_mut().enumerate() {
                        *o = arow.iter().zip(&bm[j * q..(j + 1) * q]).map(|(x, y)| x * y).sum();
                    }
                } else {
                    for (k, &av) in arow.iter().enumerate() {
                        if av == 0.0 {
                            continue;
                        }
                        orow.iter_mut().zip(&bm[k * r..(k + 1) * r]).for_each(|(o, bv)| *o += av * bv);
                    }
                }
            }
        }
        let needs = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&[bt, p, r], out)?, Op::MatMul { a, b, transpose_b }, needs)
    }

    /// 2-D convolution, `x: [N,Ci,H,W]`, `w: [Co,Ci,k,k]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", format!("x {xs:?}, W {ws:?}")));
        }
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(Error::shape("conv2d", format!("bias {:?}, expected [{co}]", self.shape(b))));
            }
        }
        let (ho, wo) = match (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {k} stride {stride} pad {pad} does not fit {h}x{wd}"),
                ))
            }
        };
        let (xd, wt) = (self.data(x), self.data(w));
        let mut out = vec![0.0; n * co * ho * wo];
        for s in 0..n {
            for o in 0..co {
                let plane = &mut out[(s * co + o) * ho * wo..(s * co + o + 1) * ho * wo];
                if let Some(b) = b {
                    plane.fill(self.nodes[b.0].value.data()[o]);
                }
                for c in 0..ci {
                    let xin = &xd[(s * ci + c) * h * wd..(s * ci + c + 1) * h * wd];
                    for ky in 0..k {
                        let (oy0, oy1) = valid_range(ho, h, ky, stride, pad);
                        for kx in 0..k {
                            let wv = wt[((o * ci + c) * k + ky) * k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let (ox0, ox1) = valid_range(wo, wd, kx, stride, pad);
                            for oy in oy0..oy1 {
                                let iy = oy * stride + ky - pad;
                                let orow = &mut plane[oy * wo..(oy + 1) * wo];
                                let irow = &xin[iy * wd..(iy + 1) * wd];
                                for ox in ox0..ox1 {
                                    orow[ox] += wv * irow[ox * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::new(&[n, co, ho, wo], out)?, Op::Conv2d { x, w, b, stride, pad }, needs)
    }

    fn pool_dims(&self, x: Var, kernel: usize, stride: usize, op: &'static str) -> Result<[usize; 6]> {
        let xs = self.shape(x);
        if xs.len() != 4 || kernel == 0 || stride == 0 || xs[2] < kernel || xs[3] < kernel {
            return Err(Error::shape(op, format!("x {xs:?}, kernel {kernel}, stride {stride}")));
        }
        let ho = (xs[2] - kernel) / stride + 1;
        let wo = (xs[3] - kernel) / stride + 1;
        Ok([xs[0] * xs[1], xs[2], xs[3], ho, wo, xs[1]])
    }

    /// Max pooling over `kernel×kernel` windows of `[N,C,H,W]`, no padding.
    /// The first maximal element in row-major window order wins ties.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let [planes, h, w, ho, wo, c] = self.pool_dims(x, kernel, stride, "max_pool2d")?;
        let xd = self.data(x);
        let mut out = vec![0.0; planes * ho * wo];
        let mut source = vec![0usize; planes * ho * wo];
        for p in 0..planes {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = p * h * w + (oy * stride + ky) * w + ox * stride + kx;
                            if xd[idx] > best {
                                best = xd[idx];
                                at = idx;
                            }
                        }
                    }
                    let o = (p * ho + oy) * wo + ox;
                    out[o] = best;
                    source[o] = at;
                }
            }
        }
        let n = planes / c;
        let needs = self.ng(x);
        self.push(Tensor::new(&[n, c, ho, wo], out)?, Op::MaxPool2d { x, source }, needs)
    }

    /// Average pooling over `kernel×kernel` windows of `[N,C,H,W]`, no padding.
    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let [planes, h, w, ho, wo, c] = self.pool_dims(x, kernel, stride, "avg_pool2d")?;
        let xd = self.data(x);
        let norm = 1.0 / (kernel * kernel) as f64;
        let mut out = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ky in 0..kernel {
                        let row = p * h * w + (oy * stride + ky) * w + ox * stride;
                        acc += xd[row..row + kernel].iter().sum::<f64>();
                    }
                    out[(p * ho + oy) * wo + ox] = acc * norm;
                }
            }
        }
        let n = planes / c;
        let needs = self.ng(x);
        self.push(Tensor::new(&[n, c, ho, wo], out)?, Op::AvgPool2d { x, kernel, stride }, needs)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&shape, out)?, Op::Add { a, b }, needs)
    }

    /// `a + b` where `b`'s shape is a leading prefix of `a`'s; `b` is broadcast over the trailing axes.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        if bs.len() > as_.len() || as_[..bs.len()] != *bs {
            return Err(Error::shape("add_broadcast", format!("{as_:?} vs {bs:?}")));
        }
        let tail: usize = as_[bs.len()..].iter().product();
        let bd = self.data(b);
        let out: Vec<f64> = self.data(a).iter().enumerate().map(|(i, x)| x + bd[i / tail]).collect();
        let shape = as_.to_vec();
        let needs = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&shape, out)?, Op::AddBroadcast { a, b }, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&shape, out)?, Op::Mul { a, b }, needs)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.ng(a);
        self.push(Tensor::new(&shape, out)?, Op::Scale { a, factor }, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.ng(a);
        self.push(Tensor::new(&shape, out)?, Op::AddScalar { a }, needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.ng(a);
        self.push(Tensor::new(&shape, out)?, Op::Sigmoid { a }, needs)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.ng(a);
        self.push(Tensor::new(&shape, out)?, Op::Relu { a }, needs)
    }

    /// `[·]₊` clamp. Numerically the same map as ReLU, recorded separately.
    pub fn hinge(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.ng(a);
        self.push(Tensor::new(&shape, out)?, Op::Hinge { a }, needs)
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let last = *s.last().unwrap_or(&1);
        let shape: Vec<usize> = if s.len() > 1 { s[..s.len() - 1].to_vec() } else { vec![1] };
        let out: Vec<f64> = self.data(a).chunks(last).map(|c| c.iter().sum()).collect();
        let needs = self.ng(a);
        self.push(Tensor::new(&shape, out)?, Op::SumLast { a }, needs)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let v: f64 = self.data(a).iter().sum();
        let needs = self.ng(a);
        self.push(Tensor::scalar(v), Op::SumAll { a }, needs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let last = *self.shape(a).last().unwrap_or(&1);
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(last) {
            softmax_in_place(row);
        }
        let shape = self.shape(a).to_vec();
        let needs = self.ng(a);
        self.push(Tensor::new(&shape, out)?, Op::Softmax { a }, needs)
    }

    /// Per-row cross-entropy of `softmax(logits)` against one-hot `targets`; output `[N]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {s:?} with {} targets", targets.len()),
            ));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape("cross_entropy", format!("target {t} out of {c} classes")));
        }
        let mut probs = self.data(logits).to_vec();
        let mut out = vec![0.0; n];
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let lse = log_sum_exp(row);
            out[r] = lse - row[targets[r]];
            row.iter_mut().for_each(|v| *v = libm::exp(*v - lse));
        }
        let needs = self.ng(logits);
        self.push(
            Tensor::new(&[n], out)?,
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            needs,
        )
    }

    /// Sum of squares of all entries.
    pub fn sq_norm(&mut self, a: Var) -> Result<Var> {
        let v: f64 = self.data(a).iter().map(|x| x * x).sum();
        let needs = self.ng(a);
        self.push(Tensor::scalar(v), Op::SqNorm { a }, needs)
    }

    /// For `a: [N,M,P]`, entry `(n,m,p)` is `max_{m'≠m} a[n,m',p]`, or 0 when `M = 1`.
    pub fn max_others(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 3 {
            return Err(Error::shape("max_others", format!("expected [N,M,P], got {s:?}")));
        }
        let (n, m, p) = (s[0], s[1], s[2]);
        let ad = self.data(a);
        let mut out = vec![0.0; n * m * p];
        let mut source = vec![usize::MAX; n * m * p];
        for b in 0..n {
            for j in 0..m {
                for q in 0..p {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = usize::MAX;
                    for other in (0..m).filter(|&o| o != j) {
                        let idx = (b * m + other) * p + q;
                        if ad[idx] > best {
                            best = ad[idx];
                            at = idx;
                        }
                    }
                    let o = (b * m + j) * p + q;
                    if at != usize::MAX {
                        out[o] = best;
                        source[o] = at;
                    }
                }
            }
        }
        let shape = s.to_vec();
        let needs = self.ng(a);
        self.push(Tensor::new(&shape, out)?, Op::MaxOthers { a, source }, needs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let needs = self.ng(a);
        self.push(t, Op::Reshape { a }, needs)
    }

    /// Swaps the first two axes of a tensor with at least two axes.
    pub fn transpose01(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() < 2 {
            return Err(Error::shape("transpose01", format!("needs >= 2 axes, got {s:?}")));
        }
        let (d0, d1) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let mut shape = s.to_vec();
        shape.swap(0, 1);
        let ad = self.data(a);
        let mut out = vec![0.0; ad.len()];
        for i in 0..d0 {
            for j in 0..d1 {
                let src = (i * d1 + j) * inner;
                let dst = (j * d0 + i) * inner;
                out[dst..dst + inner].copy_from_slice(&ad[src..src + inner]);
            }
        }
        let needs = self.ng(a);
        self.push(Tensor::new(&shape, out)?, Op::Transpose01 { a }, needs)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.ng(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    /// Backward sweep, then gradients accumulated into every trainable parameter.
    /// Trainable parameters absent from the graph receive a zero gradient.
    pub fn backward_into(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        let grads = self.backward(loss)?;
        for p in params.iter_mut() {
            if !p.tensor.requires_grad() {
                continue;
            }
            let n = p.tensor.len();
            let mut total = vec![0.0; n];
            for (v, name) in &self.bindings {
                if *name == p.name {
                    if let Some(g) = grads.wrt(*v) {
                        total.iter_mut().zip(g).for_each(|(t, x)| *t += x);
                    }
                }
            }
            p.tensor.accumulate_grad(&total)?;
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (n, i, o) = (xs[0], xs[1], ws[0]);
                let (xd, wd) = (self.data(*x), self.data(*w));
                acc(*x, &mut |g| {
                    for r in 0..n {
                        let gr = &mut g[r * i..(r + 1) * i];
                        for c in 0..o {
                            let d = dy[r * o + c];
                            if d != 0.0 {
                                gr.iter_mut().zip(&wd[c * i..(c + 1) * i]).for_each(|(a, w)| *a += d * w);
                            }
                        }
                    }
                });
                acc(*w, &mut |g| {
                    for r in 0..n {
                        let xr = &xd[r * i..(r + 1) * i];
                        for c in 0..o {
                            let d = dy[r * o + c];
                            if d != 0.0 {
                                g[c * i..(c + 1) * i].iter_mut().zip(xr).for_each(|(a, x)| *a += d * x);
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |g| {
                        for r in 0..n {
                            g.iter_mut().zip(&dy[r * o..(r + 1) * o]).for_each(|(a, d)| *a += d);
                        }
                    });
                }
            }
            Op::MatMul { a, b, transpose_b } => {
                let (as_, bs) = (self.shape(*a), self.shape(*b));
                let (bt, p, q) = (as_[0], as_[1], as_[2]);
                let r = if *transpose_b { bs[1] } else { bs[2] };
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |g| {
                    for t in 0..bt {
                        let bm = &bd[t * q * r..(t + 1) * q * r];
                        for i in 0..p {
                            let dyr = &dy[(t * p + i) * r..(t * p + i + 1) * r];
                            let gr = &mut g[(t * p + i) * q..(t * p + i + 1) * q];
                            for (j, &d) in dyr.iter().enumerate() {
                                if d == 0.0 {
                                    continue;
                                }
                                if *transpose_b {
                                    gr.iter_mut().zip(&bm[j * q..(j + 1) * q]).for_each(|(x, y)| *x += d * y);
                                } else {
                                    for (k, x) in gr.iter_mut().enumerate() {
                                        *x += d * bm[k * r + j];
                                    }
                                }
                            }
                        }
                    }
                });
                acc(*b, &mut |g| {
                    for t in 0..bt {
                        let gm = &mut g[t * q * r..(t + 1) * q * r];
                        for i in 0..p {
                            let ar = &ad[(t * p + i) * q..(t * p + i + 1) * q];
                            let dyr = &dy[(t * p + i) * r..(t * p + i + 1) * r];
                            for (j, &d) in dyr.iter().enumerate() {
                                if d == 0.0 {
                                    continue;
                                }
                                if *transpose_b {
                                    gm[j * q..(j + 1) * q].iter_mut().zip(ar).for_each(|(x, y)| *x += d * y);
                                } else {
                                    for (k, &av) in ar.iter().enumerate() {
                                        gm[k * r + j] += av * d;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (stride, pad) = (*stride, *pad);
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (co, k) = (ws[0], ws[2]);
                let os = node.value.shape();
                let (ho, wo) = (os[2], os[3]);
                let (xd, wt) = (self.data(*x), self.data(*w));
                acc(*x, &mut |g| {
                    for s in 0..n {
                        for o in 0..co {
                            let dplane = &dy[(s * co + o) * ho * wo..(s * co + o + 1) * ho * wo];
                            for c in 0..ci {
                                let gin = &mut g[(s * ci + c) * h * wd..(s * ci + c + 1) * h * wd];
                                for ky in 0..k {
                                    let (oy0, oy1) = valid_range(ho, h, ky, stride, pad);
                                    for kx in 0..k {
                                        let wv = wt[((o * ci + c) * k + ky) * k + kx];
                                        if wv == 0.0 {
                                            continue;
                                        }
                                        let (ox0, ox1) = valid_range(wo, wd, kx, stride, pad);
                                        for oy in oy0..oy1 {
                                            let iy = oy * stride + ky - pad;
                                            let drow = &dplane[oy * wo..(oy + 1) * wo];
                                            let grow = &mut gin[iy * wd..(iy + 1) * wd];
                                            for ox in ox0..ox1 {
                                                grow[ox * stride + kx - pad] += wv * drow[ox];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                acc(*w, &mut |g| {
                    for s in 0..n {
                        for o in 0..co {
                            let dplane = &dy[(s * co + o) * ho * wo..(s * co + o + 1) * ho * wo];
                            for c in 0..ci {
                                let xin = &xd[(s * ci + c) * h * wd..(s * ci + c + 1) * h * wd];
                                for ky in 0..k {
                                    let (oy0, oy1) = valid_range(ho, h, ky, stride, pad);
                                    for kx in 0..k {
                                        let (ox0, ox1) = valid_range(wo, wd, kx, stride, pad);
                                        let mut sum = 0.0;
                                        for oy in oy0..oy1 {
                                            let iy = oy * stride + ky - pad;
                                            let drow = &dplane[oy * wo..(oy + 1) * wo];
                                            let irow = &xin[iy * wd..(iy + 1) * wd];
                                            for ox in ox0..ox1 {
                                                sum += drow[ox] * irow[ox * stride + kx - pad];
                                            }
                                        }
                                        g[((o * ci + c) * k + ky) * k + kx] += sum;
                                    }
                                }
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |g| {
                        for s in 0..n {
                            for (o, gb) in g.iter_mut().enumerate() {
                                *gb += dy[(s * co + o) * ho * wo..(s * co + o + 1) * ho * wo].iter().sum::<f64>();
                            }
                        }
                    });
                }
            }
            Op::MaxPool2d { x, source } => acc(*x, &mut |g| {
                for (o, &src) in source.iter().enumerate() {
                    g[src] += dy[o];
                }
            }),
            Op::AvgPool2d { x, kernel, stride } => {
                let xs = self.shape(*x);
                let (h, w) = (xs[2], xs[3]);
                let os = node.value.shape();
                let (planes, ho, wo) = (os[0] * os[1], os[2], os[3]);
                let norm = 1.0 / (kernel * kernel) as f64;
                acc(*x, &mut |g| {
                    for p in 0..planes {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let d = dy[(p * ho + oy) * wo + ox] * norm;
                                for ky in 0..*kernel {
                                    let row = p * h * w + (oy * stride + ky) * w + ox * stride;
                                    g[row..row + kernel].iter_mut().for_each(|v| *v += d);
                                }
                            }
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(x, d)| *x += d));
                acc(*b, &mut |g| g.iter_mut().zip(dy).for_each(|(x, d)| *x += d));
            }
            Op::AddBroadcast { a, b } => {
                acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(x, d)| *x += d));
                let tail = dy.len() / self.value(*b).len();
                acc(*b, &mut |g| {
                    for (i, d) in dy.iter().enumerate() {
                        g[i / tail] += d;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |g| {
                    for ((x, d), y) in g.iter_mut().zip(dy).zip(bd) {
                        *x += d * y;
                    }
                });
                acc(*b, &mut |g| {
                    for ((x, d), y) in g.iter_mut().zip(dy).zip(ad) {
                        *x += d * y;
                    }
                });
            }
            Op::Scale { a, factor } => acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(x, d)| *x += d * factor)),
            Op::AddScalar { a } | Op::Reshape { a } => {
                acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(x, d)| *x += d))
            }
            Op::Sigmoid { a } => acc(*a, &mut |g| {
                for ((x, d), s) in g.iter_mut().zip(dy).zip(out) {
                    *x += d * s * (1.0 - s);
                }
            }),
            Op::Relu { a } | Op::Hinge { a } => {
                let ad = self.data(*a);
                acc(*a, &mut |g| {
                    for ((x, d), v) in g.iter_mut().zip(dy).zip(ad) {
                        if *v > 0.0 {
                            *x += d;
                        }
                    }
                })
            }
            Op::SumLast { a } => {
                let last = *self.shape(*a).last().unwrap_or(&1);
                acc(*a, &mut |g| {
                    for (i, x) in g.iter_mut().enumerate() {
                        *x += dy[i / last];
                    }
                })
            }
            Op::SumAll { a } => acc(*a, &mut |g| g.iter_mut().for_each(|x| *x += dy[0])),
            Op::Softmax { a } => {
                let last = *self.shape(*a).last().unwrap_or(&1);
                acc(*a, &mut |g| {
                    for ((gr, sr), dr) in g.chunks_mut(last).zip(out.chunks(last)).zip(dy.chunks(last)) {
                        let dot: f64 = sr.iter().zip(dr).map(|(s, d)| s * d).sum();
                        for ((x, s), d) in gr.iter_mut().zip(sr).zip(dr) {
                            *x += s * (d - dot);
                        }
                    }
                })
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.shape(*logits)[1];
                acc(*logits, &mut |g| {
                    for (r, (gr, pr)) in g.chunks_mut(c).zip(probs.chunks(c)).enumerate() {
                        let d = dy[r];
                        for (j, (x, p)) in gr.iter_mut().zip(pr).enumerate() {
                            let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                            *x += d * (p - onehot);
                        }
                    }
                })
            }
            Op::SqNorm { a } => {
                let ad = self.data(*a);
                acc(*a, &mut |g| g.iter_mut().zip(ad).for_each(|(x, v)| *x += 2.0 * v * dy[0]))
            }
            Op::MaxOthers { a, source } => acc(*a, &mut |g| {
                for (o, &src) in source.iter().enumerate() {
                    if src != usize::MAX {
                        g[src] += dy[o];
                    }
                }
            }),
            Op::Transpose01 { a } => {
                let s = self.shape(*a);
                let (d0, d1) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                acc(*a, &mut |g| {
                    for i in 0..d0 {
                        for j in 0..d1 {
                            let src = (i * d1 + j) * inner;
                            let dst = (j * d0 + i) * inner;
                            g[src..src + inner].iter_mut().zip(&dy[dst..dst + inner]).for_each(|(x, d)| *x += d);
                        }
                    }
                })
            }
        }
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>())
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

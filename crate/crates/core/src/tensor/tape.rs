//! Define-by-run tape. Nodes are appended in evaluation order, so every
//! node's inputs precede it and the backward pass is a single reverse sweep.

use std::ops::Range;

use super::kernels::{self, ConvGeom};
use super::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Gelu(Var),
    Clamp {
        x: Var,
        lo: f32,
        hi: f32,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Mean(Var),
    Sum(Var),
    UpsampleNearest {
        x: Var,
        factor: usize,
    },
    DownsampleAvg {
        x: Var,
        factor: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        starts: Vec<usize>,
    },
    Place {
        x: Var,
        offset: Vec<usize>,
    },
    Reshape(Var),
    Transpose(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f32>,
    },
    PickClass {
        x: Var,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

/// Append-only record of a forward computation.
///
/// A frozen tape evaluates ops but never records them: every result is a
/// constant leaf, which is how the teacher and the frozen encoder run.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    frozen: bool,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, shape: &[usize], reason: impl Into<String>) -> TensorError {
    TensorError::InvalidShape {
        op,
        shape: shape.to_vec(),
        reason: reason.into(),
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat output index, the flat index of the broadcast input.
fn broadcast_indices(input: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..input.len()).rev() {
        let oi = i + rank - input.len();
        strides[oi] = if input[i] == 1 { 0 } else { s };
        s *= input[i];
    }
    let n: usize = out.iter().product();
    let mut idx = vec![0usize; rank];
    let mut res = Vec::with_capacity(n);
    let mut cur = 0usize;
    for _ in 0..n {
        res.push(cur);
        for d in (0..rank).rev() {
            idx[d] += 1;
            cur += strides[d];
            if idx[d] < out[d] {
                break;
            }
            cur -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    res
}

/// Visit contiguous runs of a block at `offset` inside a larger tensor.
/// Calls `f(big_start, block_start, run_len)`.
fn block_runs(big: &[usize], block: &[usize], offset: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = big.len();
    if rank == 0 {
        f(0, 0, 1);
        return;
    }
    if block.iter().any(|&d| d == 0) {
        return;
    }
    let run = block[rank - 1];
    let outer: usize = block[..rank - 1].iter().product();
    let mut big_strides = vec![1usize; rank];
    for d in (0..rank - 1).rev() {
        big_strides[d] = big_strides[d + 1] * big[d + 1];
    }
    let mut idx = vec![0usize; rank - 1];
    for o in 0..outer {
        let mut start = offset[rank - 1];
        for d in 0..rank - 1 {
            start += (idx[d] + offset[d]) * big_strides[d];
        }
        f(start, o * run, run);
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < block[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which nothing is differentiable.
    pub fn frozen() -> Self {
        Self {
            nodes: Vec::new(),
            frozen: true,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of differentiable operation nodes (leaves excluded).
    pub fn recorded_ops(&self) -> usize {
        self.nodes.iter().filter(|n| !matches!(n.op, Op::Leaf)).count()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && !self.frozen,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let n = &self.nodes[v.0];
        n.grad.as_ref().map(|g| Tensor {
            shape: n.value.shape.clone(),
            data: g.clone(),
        })
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = !self.frozen && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape == tb.shape {
            let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
            return Ok(Tensor {
                shape: ta.shape.clone(),
                data,
            });
        }
        let shape = broadcast_shape(&ta.shape, &tb.shape).ok_or_else(|| mismatch(name, &ta.shape, &tb.shape))?;
        let ia = broadcast_indices(&ta.shape, &shape);
        let ib = broadcast_indices(&tb.shape, &shape);
        let data = ia.iter().zip(&ib).map(|(&i, &j)| f(ta.data[i], tb.data[j])).collect();
        Ok(Tensor { shape, data })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| a * c).collect(),
        };
        self.push(t, Op::Scale(x, c), &[x])
    }

    /// `[m,k] × [k,n] → [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(mismatch("matmul", &ta.shape, &tb.shape));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(&ta.data, &tb.data, &mut out, m, k, n);
        let t = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    fn conv_geom(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<ConvGeom, TensorError> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(mismatch("conv2d", xs, ws));
        }
        if stride == 0 {
            return Err(invalid("conv2d", xs, "stride must be positive"));
        }
        let (h, wd, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(mismatch("conv2d", xs, ws));
        }
        Ok(ConvGeom {
            c: xs[1],
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    /// NCHW convolution with `[O,C,kh,kw]` weights and optional `[O]` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let g = self.conv_geom(x, w, stride, pad)?;
        let o = self.shape(w)[0];
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(mismatch("conv2d", self.shape(w), self.shape(b)));
            }
        }
        let n = self.shape(x)[0];
        let (ck, p) = (g.cols(), g.positions());
        let xv = &self.value(x).data;
        let wv = &self.value(w).data;
        let mut out = vec![0.0f32; n * o * p];
        let mut col = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0f32; ck * p]
        };
        let img = g.c * g.h * g.w;
        for ni in 0..n {
            let xn = &xv[ni * img..(ni + 1) * img];
            let outn = &mut out[ni * o * p..(ni + 1) * o * p];
            if let Some(b) = b {
                let bv = &self.value(b).data;
                for (oi, row) in outn.chunks_exact_mut(p).enumerate() {
                    row.fill(bv[oi]);
                }
            }
            let colref: &[f32] = if g.is_pointwise() {
                xn
            } else {
                kernels::im2col(xn, &g, &mut col);
                &col
            };
            kernels::matmul_acc(wv, colref, outn, o, ck, p);
        }
        let t = Tensor {
            shape: vec![n, o, g.ho, g.wo],
            data: out,
        };
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(t, Op::Conv2d { x, w, b, stride, pad }, &inputs))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| f(a)).collect(),
        };
        self.push(t, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |a| a.max(0.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), kernels::gelu)
    }

    /// Elementwise clamp; gradient passes only where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |a| a.clamp(lo, hi))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(), TensorError> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(invalid(op, s, format!("axis {axis} out of range")));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("softmax", x, axis)?;
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: kernels::softmax_axis(&v.data, &v.shape, axis, false),
        };
        Ok(self.push(t, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("log_softmax", x, axis)?;
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: kernels::softmax_axis(&v.data, &v.shape, axis, true),
        };
        Ok(self.push(t, Op::LogSoftmax { x, axis }, &[x]))
    }

    /// Normalize over the last axis, then apply optional `[D]` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f32) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| invalid("layer_norm", &xs, "rank 0"))?;
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [d] {
                return Err(mismatch("layer_norm", &xs, self.shape(p)));
            }
        }
        let v = &self.value(x).data;
        let rows = v.len() / d.max(1);
        let mut xhat = vec![0.0f32; v.len()];
        let mut rstd = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &v[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, a) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (a - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gamma {
            let gv = &self.value(g).data;
            for row in out.chunks_exact_mut(d) {
                for (o, s) in row.iter_mut().zip(gv) {
                    *o *= s;
                }
            }
        }
        if let Some(b) = beta {
            let bv = &self.value(b).data;
            for row in out.chunks_exact_mut(d) {
                for (o, s) in row.iter_mut().zip(bv) {
                    *o += s;
                }
            }
        }
        let t = Tensor { shape: xs, data: out };
        let inputs: Vec<Var> = [Some(x), gamma, beta].into_iter().flatten().collect();
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &inputs,
        ))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data.iter().sum::<f32>() / v.data.len() as f32;
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum::<f32>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    fn nchw(&self, op: &'static str, x: Var) -> Result<[usize; 4], TensorError> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(invalid(op, s, "expected NCHW"));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.nchw("upsample_nearest", x)?;
        if factor == 0 {
            return Err(invalid("upsample_nearest", self.shape(x), "factor must be positive"));
        }
        let (ho, wo) = (h * factor, w * factor);
        let v = &self.value(x).data;
        let mut out = vec![0.0f32; n * c * ho * wo];
        for plane in 0..n * c {
            let src = &v[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for y in 0..ho {
                let srow = &src[(y / factor) * w..(y / factor + 1) * w];
                for (xo, d) in dst[y * wo..(y + 1) * wo].iter_mut().enumerate() {
                    *d = srow[xo / factor];
                }
            }
        }
        let t = Tensor {
            shape: vec![n, c, ho, wo],
            data: out,
        };
        Ok(self.push(t, Op::UpsampleNearest { x, factor }, &[x]))
    }

    pub fn downsample_avg(&mut self, x: Var, factor: usize) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.nchw("downsample_avg", x)?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(invalid(
                "downsample_avg",
                self.shape(x),
                format!("spatial dims must be divisible by {factor}"),
            ));
        }
        let (ho, wo) = (h / factor, w / factor);
        let inv = 1.0 / (factor * factor) as f32;
        let v = &self.value(x).data;
        let mut out = vec![0.0f32; n * c * ho * wo];
        for plane in 0..n * c {
            let src = &v[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for y in 0..h {
                let srow = &src[y * w..(y + 1) * w];
                let drow = &mut dst[(y / factor) * wo..(y / factor + 1) * wo];
                for (xi, s) in srow.iter().enumerate() {
                    drow[xi / factor] += s;
                }
            }
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        let t = Tensor {
            shape: vec![n, c, ho, wo],
            data: out,
        };
        Ok(self.push(t, Op::DownsampleAvg { x, factor }, &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = xs.first().ok_or_else(|| invalid("concat", &[], "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", &base, format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let mut out = vec![0.0f32; shape.iter().product()];
        let mut off = vec![0usize; shape.len()];
        for &v in xs {
            let t = self.value(v);
            block_runs(&shape, &t.shape, &off, |bs, ks, len| {
                out[bs..bs + len].copy_from_slice(&t.data[ks..ks + len]);
            });
            off[axis] += t.shape[axis];
        }
        let t = Tensor { shape, data: out };
        Ok(self.push(t, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    /// One half-open range per axis.
    pub fn slice(&mut self, x: Var, ranges: &[Range<usize>]) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if ranges.len() != s.len() || ranges.iter().zip(&s).any(|(r, &d)| r.start > r.end || r.end > d) {
            let got: Vec<usize> = ranges.iter().map(|r| r.end).collect();
            return Err(mismatch("slice", &s, &got));
        }
        let shape: Vec<usize> = ranges.iter().map(|r| r.end - r.start).collect();
        let starts: Vec<usize> = ranges.iter().map(|r| r.start).collect();
        let mut out = vec![0.0f32; shape.iter().product()];
        let v = &self.value(x).data;
        block_runs(&s, &shape, &starts, |bs, ks, len| {
            out[ks..ks + len].copy_from_slice(&v[bs..bs + len]);
        });
        let t = Tensor { shape, data: out };
        Ok(self.push(t, Op::Slice { x, starts }, &[x]))
    }

    /// Embed `x` into a zero tensor of `shape` at `offset`.
    pub fn place(&mut self, x: Var, shape: &[usize], offset: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != shape.len() || offset.len() != shape.len() || (0..s.len()).any(|d| offset[d] + s[d] > shape[d]) {
            return Err(mismatch("place", &s, shape));
        }
        let mut out = vec![0.0f32; shape.iter().product()];
        let v = &self.value(x).data;
        block_runs(shape, &s, offset, |bs, ks, len| {
            out[bs..bs + len].copy_from_slice(&v[ks..ks + len]);
        });
        let t = Tensor {
            shape: shape.to_vec(),
            data: out,
        };
        Ok(self.push(
            t,
            Op::Place {
                x,
                offset: offset.to_vec(),
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x);
        if v.shape.len() != 2 {
            return Err(invalid("transpose", &v.shape, "expected rank 2"));
        }
        let (r, c) = (v.shape[0], v.shape[1]);
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v.data[i * c + j];
            }
        }
        let t = Tensor {
            shape: vec![c, r],
            data: out,
        };
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    /// `softmax(q·kᵀ/√d)·v` for `q:[L,d]`, `k:[S,d]`, `v:[S,dv]`.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var, TensorError> {
        let (qs, ks, vs) = (self.shape(q), self.shape(k), self.shape(v));
        if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
            return Err(mismatch("scaled_dot_attention", qs, ks));
        }
        if vs.len() != 2 || vs[0] != ks[0] {
            return Err(mismatch("scaled_dot_attention", ks, vs));
        }
        let (l, d, s, dv) = (qs[0], qs[1], ks[0], vs[1]);
        let scale = 1.0 / (d as f32).sqrt();
        let mut scores = vec![0.0f32; l * s];
        kernels::matmul_a_bt_acc(&self.value(q).data, &self.value(k).data, &mut scores, l, d, s);
        for a in scores.iter_mut() {
            *a *= scale;
        }
        let probs = kernels::softmax_axis(&scores, &[l, s], 1, false);
        let mut out = vec![0.0f32; l * dv];
        kernels::matmul_acc(&probs, &self.value(v).data, &mut out, l, s, dv);
        let t = Tensor {
            shape: vec![l, dv],
            data: out,
        };
        Ok(self.push(t, Op::Attention { q, k, v, probs }, &[q, k, v]))
    }

    /// Gather `x[n, labels[n,h,w], h, w]` from `[N,K,H,W]` into `[N,H,W]`.
    pub fn pick_class(&mut self, x: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let [n, k, h, w] = self.nchw("pick_class", x)?;
        if labels.len() != n * h * w {
            return Err(mismatch("pick_class", self.shape(x), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= k) {
            return Err(invalid(
                "pick_class",
                self.shape(x),
                format!("label {bad} >= {k} classes"),
            ));
        }
        let v = &self.value(x).data;
        let hw = h * w;
        let out = labels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let (ni, p) = (i / hw, i % hw);
                v[(ni * k + c) * hw + p]
            })
            .collect();
        let t = Tensor {
            shape: vec![n, h, w],
            data: out,
        };
        Ok(self.push(
            t,
            Op::PickClass {
                x,
                labels: labels.to_vec(),
            },
            &[x],
        ))
    }

    /// Reverse sweep from a scalar `loss`; leaf gradients accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                leaf_grads.push((i, g));
            } else {
                self.backprop_node(i, &g, &mut grads);
            }
        }
        for (i, g) in leaf_grads {
            match &mut self.nodes[i].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn buf<'a>(&self, grads: &'a mut [Option<Vec<f32>>], v: Var) -> Option<&'a mut Vec<f32>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }

    fn backprop_broadcast(
        &self,
        grads: &mut [Option<Vec<f32>>],
        v: Var,
        out_shape: &[usize],
        g: &[f32],
        scale: impl Fn(usize) -> f32,
    ) {
        let in_shape = self.shape(v).to_vec();
        let Some(buf) = self.buf(grads, v) else { return };
        if in_shape == out_shape {
            for (i, (b, gv)) in buf.iter_mut().zip(g).enumerate() {
                *b += gv * scale(i);
            }
        } else {
            for (i, &j) in broadcast_indices(&in_shape, out_shape).iter().enumerate() {
                buf[j] += g[i] * scale(i);
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape.as_slice();
        let y = &node.value.data;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.backprop_broadcast(grads, *a, out_shape, g, |_| 1.0);
                self.backprop_broadcast(grads, *b, out_shape, g, |_| 1.0);
            }
            Op::Sub(a, b) => {
                self.backprop_broadcast(grads, *a, out_shape, g, |_| 1.0);
                self.backprop_broadcast(grads, *b, out_shape, g, |_| -1.0);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ia = (ta.shape != out_shape).then(|| broadcast_indices(&ta.shape, out_shape));
                let ib = (tb.shape != out_shape).then(|| broadcast_indices(&tb.shape, out_shape));
                let av = |i: usize| ta.data[ia.as_ref().map_or(i, |m| m[i])];
                let bv = |i: usize| tb.data[ib.as_ref().map_or(i, |m| m[i])];
                self.backprop_broadcast(grads, *a, out_shape, g, bv);
                self.backprop_broadcast(grads, *b, out_shape, g, av);
            }
            Op::Scale(x, c) => {
                if let Some(buf) = self.buf(grads, *x) {
                    buf.iter_mut().zip(g).for_each(|(b, gv)| *b += gv * c);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if let Some(buf) = self.buf(grads, *a) {
                    kernels::matmul_a_bt_acc(g, &tb.data, buf, m, n, k);
                }
                if let Some(buf) = self.buf(grads, *b) {
                    kernels::matmul_at_b_acc(&ta.data, g, buf, k, m, n);
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let geom = self.conv_geom(*x, *w, *stride, *pad).expect("validated in forward");
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (n, o) = (xt.shape[0], wt.shape[0]);
                let (ck, p) = (geom.cols(), geom.positions());
                let img = geom.c * geom.h * geom.w;
                if let Some(b) = b {
                    if let Some(buf) = self.buf(grads, *b) {
                        for ni in 0..n {
                            for (oi, row) in g[ni * o * p..(ni + 1) * o * p].chunks_exact(p).enumerate() {
                                buf[oi] += row.iter().sum::<f32>();
                            }
                        }
                    }
                }
                let mut col = vec![0.0f32; ck * p];
                if self.nodes[w.0].requires_grad {
                    let mut dw = vec![0.0f32; o * ck];
                    for ni in 0..n {
                        let xn = &xt.data[ni * img..(ni + 1) * img];
                        let colref: &[f32] = if geom.is_pointwise() {
                            xn
                        } else {
                            kernels::im2col(xn, &geom, &mut col);
                            &col
                        };
                        kernels::matmul_a_bt_acc(&g[ni * o * p..(ni + 1) * o * p], colref, &mut dw, o, p, ck);
                    }
                    let buf = self.buf(grads, *w).expect("requires grad");
                    buf.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
                }
                if let Some(buf) = self.buf(grads, *x) {
                    for ni in 0..n {
                        let gn = &g[ni * o * p..(ni + 1) * o * p];
                        let dxn = &mut buf[ni * img..(ni + 1) * img];
                        if geom.is_pointwise() {
                            kernels::matmul_at_b_acc(&wt.data, gn, dxn, ck, o, p);
                        } else {
                            col.fill(0.0);
                            kernels::matmul_at_b_acc(&wt.data, gn, &mut col, ck, o, p);
                            kernels::col2im_acc(&col, &geom, dxn);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = &self.value(*x).data;
                if let Some(buf) = self.buf(grads, *x) {
                    for ((b, gv), a) in buf.iter_mut().zip(g).zip(xv) {
                        if *a > 0.0 {
                            *b += gv;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = &self.value(*x).data;
                if let Some(buf) = self.buf(grads, *x) {
                    for ((b, gv), a) in buf.iter_mut().zip(g).zip(xv) {
                        *b += gv * kernels::gelu_grad(*a);
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = &self.value(*x).data;
                if let Some(buf) = self.buf(grads, *x) {
                    for ((b, gv), a) in buf.iter_mut().zip(g).zip(xv) {
                        if *a >= *lo && *a <= *hi {
                            *b += gv;
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = kernels::axis_split(out_shape, *axis);
                if let Some(buf) = self.buf(grads, *x) {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let s: f32 = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                            for j in 0..len {
                                let at = base + j * inner;
                                buf[at] += y[at] * (g[at] - s);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = kernels::axis_split(out_shape, *axis);
                if let Some(buf) = self.buf(grads, *x) {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let s: f32 = (0..len).map(|j| g[base + j * inner]).sum();
                            for j in 0..len {
                                let at = base + j * inner;
                                buf[at] += g[at] - y[at].exp() * s;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *out_shape.last().expect("rank >= 1");
                if let Some(b) = beta {
                    if let Some(buf) = self.buf(grads, *b) {
                        for row in g.chunks_exact(d) {
                            buf.iter_mut().zip(row).for_each(|(a, gv)| *a += gv);
                        }
                    }
                }
                if let Some(gm) = gamma {
                    if let Some(buf) = self.buf(grads, *gm) {
                        for (row, xh) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for ((a, gv), h) in buf.iter_mut().zip(row).zip(xh) {
                                *a += gv * h;
                            }
                        }
                    }
                }
                let gv = gamma.map(|gm| self.value(gm).data.clone());
                if let Some(buf) = self.buf(grads, *x) {
                    let mut dxh = vec![0.0f32; d];
                    for (r, (row, xh)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        for j in 0..d {
                            dxh[j] = row[j] * gv.as_ref().map_or(1.0, |s| s[j]);
                        }
                        let m1 = dxh.iter().sum::<f32>() / d as f32;
                        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f32>() / d as f32;
                        for j in 0..d {
                            buf[r * d + j] += rstd[r] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::Mean(x) => {
                if let Some(buf) = self.buf(grads, *x) {
                    let s = g[0] / buf.len() as f32;
                    buf.iter_mut().for_each(|a| *a += s);
                }
            }
            Op::Sum(x) => {
                if let Some(buf) = self.buf(grads, *x) {
                    buf.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::UpsampleNearest { x, factor } => {
                let xs = self.shape(*x).to_vec();
                let (h, w) = (xs[2], xs[3]);
                let (ho, wo) = (h * factor, w * factor);
                if let Some(buf) = self.buf(grads, *x) {
                    for plane in 0..xs[0] * xs[1] {
                        let src = &g[plane * ho * wo..(plane + 1) * ho * wo];
                        let dst = &mut buf[plane * h * w..(plane + 1) * h * w];
                        for yy in 0..ho {
                            for xx in 0..wo {
                                dst[(yy / factor) * w + xx / factor] += src[yy * wo + xx];
                            }
                        }
                    }
                }
            }
            Op::DownsampleAvg { x, factor } => {
                let xs = self.shape(*x).to_vec();
                let (h, w) = (xs[2], xs[3]);
                let (ho, wo) = (h / factor, w / factor);
                let inv = 1.0 / (factor * factor) as f32;
                if let Some(buf) = self.buf(grads, *x) {
                    for plane in 0..xs[0] * xs[1] {
                        let src = &g[plane * ho * wo..(plane + 1) * ho * wo];
                        let dst = &mut buf[plane * h * w..(plane + 1) * h * w];
                        for yy in 0..h {
                            for xx in 0..w {
                                dst[yy * w + xx] += src[(yy / factor) * wo + xx / factor] * inv;
                            }
                        }
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let mut off = vec![0usize; out_shape.len()];
                for &v in xs {
                    let s = self.shape(v).to_vec();
                    if let Some(buf) = self.buf(grads, v) {
                        block_runs(out_shape, &s, &off, |bs, ks, len| {
                            buf[ks..ks + len]
                                .iter_mut()
                                .zip(&g[bs..bs + len])
                                .for_each(|(a, b)| *a += b);
                        });
                    }
                    off[*axis] += s[*axis];
                }
            }
            Op::Slice { x, starts } => {
                let xs = self.shape(*x).to_vec();
                if let Some(buf) = self.buf(grads, *x) {
                    block_runs(&xs, out_shape, starts, |bs, ks, len| {
                        buf[bs..bs + len]
                            .iter_mut()
                            .zip(&g[ks..ks + len])
                            .for_each(|(a, b)| *a += b);
                    });
                }
            }
            Op::Place { x, offset } => {
                let xs = self.shape(*x).to_vec();
                if let Some(buf) = self.buf(grads, *x) {
                    block_runs(out_shape, &xs, offset, |bs, ks, len| {
                        buf[ks..ks + len]
                            .iter_mut()
                            .zip(&g[bs..bs + len])
                            .for_each(|(a, b)| *a += b);
                    });
                }
            }
            Op::Reshape(x) => {
                if let Some(buf) = self.buf(grads, *x) {
                    buf.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (out_shape[1], out_shape[0]);
                if let Some(buf) = self.buf(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Attention { q, k, v, probs } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (l, d, s, dv) = (tq.shape[0], tq.shape[1], tk.shape[0], tv.shape[1]);
                let scale = 1.0 / (d as f32).sqrt();
                if let Some(buf) = self.buf(grads, *v) {
                    kernels::matmul_at_b_acc(probs, g, buf, s, l, dv);
                }
                let mut dp = vec![0.0f32; l * s];
                kernels::matmul_a_bt_acc(g, &tv.data, &mut dp, l, dv, s);
                let mut ds = vec![0.0f32; l * s];
                for r in 0..l {
                    let pr = &probs[r * s..(r + 1) * s];
                    let dr = &dp[r * s..(r + 1) * s];
                    let dotp: f32 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..s {
                        ds[r * s + j] = pr[j] * (dr[j] - dotp) * scale;
                    }
                }
                if let Some(buf) = self.buf(grads, *q) {
                    kernels::matmul_acc(&ds, &tk.data, buf, l, s, d);
                }
                if let Some(buf) = self.buf(grads, *k) {
                    kernels::matmul_at_b_acc(&ds, &tq.data, buf, s, l, d);
                }
            }
            Op::PickClass { x, labels } => {
                let xs = self.shape(*x).to_vec();
                let (k, hw) = (xs[1], xs[2] * xs[3]);
                if let Some(buf) = self.buf(grads, *x) {
                    for (i, &c) in labels.iter().enumerate() {
                        let (ni, p) = (i / hw, i % hw);
                        buf[(ni * k + c) * hw + p] += g[i];
                    }
                }
            }
        }
    }
}

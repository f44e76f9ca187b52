//! Define-by-run tape: each primitive evaluates eagerly and appends a node;
//! `backward` replays the tape in reverse.

use crate::error::{AutodiffError, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    L1Norm(Var),
    L2Normalize(Var),
    Cosine(Var, Var),
    LayerNorm(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Transpose(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    MaskConst {
        x: Var,
        mask: Vec<f64>,
    },
    StopGradient,
    StraightThrough {
        soft: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Upsample2x(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Recorded computation. Nodes are append-only; recording order is
/// execution order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, t: &Tensor, reason: impl Into<String>) -> AutodiffError {
    AutodiffError::InvalidShape {
        op,
        shape: t.shape().to_vec(),
        reason: reason.into(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Adds a trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Adds a constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    fn binary_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av, bv));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl("matmul", a, b, false)
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl("matmul_nt", a, b, true)
    }

    fn matmul_impl(&mut self, name: &'static str, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 {
            return Err(mismatch(name, av, bv));
        }
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (bk, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if k != bk {
            return Err(mismatch(name, av, bv));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, av.data(), false, bv.data(), trans_b, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, trans_b },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds `bias` (shape `[c]`) to every row of `a` (last axis `c`).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let c = av.last_dim();
        if bv.numel() != c {
            return Err(mismatch("add_row", av, bv));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, &b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(t, Op::AddRow(a, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.last_dim();
        let mut out = vec![0.0; xv.numel()];
        for (src, dst) in xv.data().chunks(c).zip(out.chunks_mut(c)) {
            kernels::softmax_row(src, dst);
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.last_dim();
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(c) {
            let lse = kernels::logsumexp(row);
            out.extend(row.iter().map(|v| v - lse));
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(t, Op::LogSoftmax(x), rg)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sums over the last axis; `[.., c] -> [..]` (a vector stays `[1]`).
    pub fn sum_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.last_dim();
        let data: Vec<f64> = xv.data().chunks(c).map(|r| r.iter().sum()).collect();
        let shape = if xv.ndim() > 1 {
            xv.shape()[..xv.ndim() - 1].to_vec()
        } else {
            vec![1]
        };
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, data), Op::SumLast(x), rg)
    }

    /// `Σ |x|` over all elements.
    pub fn l1_norm(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v.abs()).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::L1Norm(x), rg)
    }

    /// Rows scaled to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(invalid("l2_normalize", xv, "zero-norm row"));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::L2Normalize(x), rg))
    }

    /// Row-wise cosine similarity; `[.., c] x [.., c] -> [..]`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("cosine", av, bv));
        }
        let c = av.last_dim();
        let mut out = Vec::with_capacity(av.outer());
        for (ra, rb) in av.data().chunks(c).zip(bv.data().chunks(c)) {
            let na = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(invalid(
                    "cosine",
                    if na == 0.0 { av } else { bv },
                    "zero-norm row",
                ));
            }
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            out.push(dot / (na * nb));
        }
        let shape = if av.ndim() > 1 {
            av.shape()[..av.ndim() - 1].to_vec()
        } else {
            vec![1]
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Cosine(a, b), rg))
    }

    /// Zero-mean, unit-variance rows (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.last_dim();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let sd = (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mu) / sd);
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(t, Op::LayerNorm(x), rg)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(AutodiffError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(invalid(
                "concat",
                self.value(*first),
                format!("axis {axis} out of range"),
            ));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", self.value(*first), self.value(v)));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let len = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 2 {
            return Err(invalid("transpose", xv, "expected a matrix"));
        }
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv.data()[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let nd = xv.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd
            || axes
                .iter()
                .any(|&a| a >= nd || std::mem::replace(&mut seen[a], true))
        {
            return Err(invalid("permute", xv, format!("bad axes {axes:?}")));
        }
        let shape: Vec<usize> = axes.iter().map(|&a| xv.shape()[a]).collect();
        let out = permute_data(xv.data(), xv.shape(), axes);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.numel() || shape.contains(&0) {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: xv.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let t = Tensor::from_parts(shape.to_vec(), xv.data().to_vec());
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Selects slices along axis 0 (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let rows = xv.shape()[0];
        if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
            return Err(invalid(
                "gather_rows",
                xv,
                format!("indices {idx:?} out of range"),
            ));
        }
        let stride = xv.numel() / rows;
        let mut out = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            out.extend_from_slice(&xv.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = idx.len();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Slice `i` along axis 0 with that axis dropped.
    pub fn index0(&mut self, x: Var, i: usize) -> Result<Var> {
        let g = self.gather_rows(x, &[i])?;
        let shape = self.value(x).shape()[1..].to_vec();
        let shape = if shape.is_empty() { vec![1] } else { shape };
        self.reshape(g, &shape)
    }

    /// Picks flat elements; output shape `[idx.len()]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if idx.is_empty() || idx.iter().any(|&i| i >= xv.numel()) {
            return Err(invalid(
                "gather",
                xv,
                format!("indices {idx:?} out of range"),
            ));
        }
        let out = idx.iter().map(|&i| xv.data()[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len()], out),
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mask(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != mask.shape() {
            return Err(mismatch("mask", xv, mask));
        }
        let out = xv
            .data()
            .iter()
            .zip(mask.data())
            .map(|(a, m)| a * m)
            .collect();
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::MaskConst {
                x,
                mask: mask.data().to_vec(),
            },
            rg,
        ))
    }

    /// Identity forward; no gradient reaches `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.push(t, Op::StopGradient, false)
    }

    /// Forward value of `hard`; gradient routed to `soft` only.
    pub fn straight_through(&mut self, hard: Var, soft: Var) -> Result<Var> {
        let (hv, sv) = (self.value(hard), self.value(soft));
        if hv.shape() != sv.shape() {
            return Err(mismatch("straight_through", hv, sv));
        }
        let t = hv.clone();
        let rg = self.rg(soft);
        Ok(self.push(t, Op::StraightThrough { soft }, rg))
    }

    /// 2-D convolution. `x: [N, C, H, W]`, `w: [Co, C, kh, kw]`, `b: [Co]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.ndim() != 4 || wv.ndim() != 4 || xv.shape()[1] != wv.shape()[1] {
            return Err(mismatch("conv2d", xv, wv));
        }
        let (n, c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (co, kh, kw) = (wv.shape()[0], wv.shape()[2], wv.shape()[3]);
        let g = ConvGeom::new(c, h, wd, kh, kw, stride, pad).ok_or_else(|| {
            invalid(
                "conv2d",
                xv,
                "kernel larger than padded input or zero stride",
            )
        })?;
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != co {
                return Err(mismatch("conv2d", wv, bv));
            }
        }
        let (p, l) = (g.patch_len(), g.out_len());
        let mut cols = vec![0.0; p * l];
        let mut out = vec![0.0; n * co * l];
        let in_len = c * h * wd;
        for s in 0..n {
            kernels::im2col(&xv.data()[s * in_len..(s + 1) * in_len], &g, &mut cols);
            let dst = &mut out[s * co * l..(s + 1) * co * l];
            kernels::gemm(co, p, l, wv.data(), false, &cols, false, dst, 0.0);
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (o, row) in dst.chunks_mut(l).enumerate() {
                    row.iter_mut().for_each(|v| *v += bv[o]);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::from_parts(vec![n, co, g.h_out, g.w_out], out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Nearest-neighbour 2x spatial upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 4 {
            return Err(invalid("upsample2x", xv, "expected [N, C, H, W]"));
        }
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let mut out = vec![0.0; n * c * 4 * h * w];
        for plane in 0..n * c {
            let src = &xv.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, 2 * h, 2 * w], out),
            Op::Upsample2x(x),
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar output. Leaf gradients accumulate
    /// across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let ov = self.value(output);
        if ov.numel() != 1 {
            return Err(AutodiffError::NotScalar(ov.shape().to_vec()));
        }
        if !self.rg(output) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.grads[i] {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => {
                        *slot = Some(Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g))
                    }
                }
                continue;
            }
            vjp(&self.nodes, i, &g, &mut grads);
        }
        Ok(())
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Gradient buffer for `v`, allocated on first touch; `None` when `v`
/// does not require gradients.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn vjp(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let y = node.value.data();
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf | Op::StopGradient => {}
        Op::MatMul { a, b, trans_b } => {
            let (ash, bsh) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (m, k) = (ash[0], ash[1]);
            let n = if *trans_b { bsh[0] } else { bsh[1] };
            if let Some(da) = slot(nodes, grads, *a) {
                // da = g · bᵀ (or g · b when b was stored transposed)
                kernels::gemm(m, n, k, g, false, val(*b), !*trans_b, da, 1.0);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                if *trans_b {
                    kernels::gemm(n, m, k, g, true, val(*a), false, db, 1.0);
                } else {
                    kernels::gemm(k, m, n, val(*a), true, g, false, db, 1.0);
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(da) = slot(nodes, grads, *a) {
                da.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                db.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = slot(nodes, grads, *a) {
                da.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                db.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
            }
        }
        Op::Mul(a, b) => {
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, g), bv) in da.iter_mut().zip(g).zip(val(*b)) {
                    *d += g * bv;
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for ((d, g), av) in db.iter_mut().zip(g).zip(val(*a)) {
                    *d += g * av;
                }
            }
        }
        Op::AddRow(a, bias) => {
            if let Some(da) = slot(nodes, grads, *a) {
                da.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(db) = slot(nodes, grads, *bias) {
                let c = db.len();
                for row in g.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().zip(g).for_each(|(d, g)| *d += g * c);
            }
        }
        Op::AddScalar(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
        }
        Op::Exp(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, g), y) in dx.iter_mut().zip(g).zip(y) {
                    *d += g * y;
                }
            }
        }
        Op::Log(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, g), xv) in dx.iter_mut().zip(g).zip(val(*x)) {
                    *d += g / xv;
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, g), y) in dx.iter_mut().zip(g).zip(y) {
                    *d += g * y * (1.0 - y);
                }
            }
        }
        Op::Relu(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, g), xv) in dx.iter_mut().zip(g).zip(val(*x)) {
                    if *xv > 0.0 {
                        *d += g;
                    }
                }
            }
        }
        Op::Abs(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, g), xv) in dx.iter_mut().zip(g).zip(val(*x)) {
                    if *xv > 0.0 {
                        *d += g;
                    } else if *xv < 0.0 {
                        *d -= g;
                    }
                }
            }
        }
        Op::Softmax(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let c = node.value.last_dim();
                for ((d, g), y) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += y * (g - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let c = node.value.last_dim();
                for ((d, g), y) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let gs: f64 = g.iter().sum();
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += g - y.exp() * gs;
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let s = g[0] / dx.len() as f64;
                dx.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::SumLast(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let c = nodes[x.0].value.last_dim();
                for (row, g) in dx.chunks_mut(c).zip(g) {
                    row.iter_mut().for_each(|d| *d += g);
                }
            }
        }
        Op::L1Norm(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (d, xv) in dx.iter_mut().zip(val(*x)) {
                    if *xv > 0.0 {
                        *d += g[0];
                    } else if *xv < 0.0 {
                        *d -= g[0];
                    }
                }
            }
        }
        Op::L2Normalize(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let c = node.value.last_dim();
                for (((d, g), y), xr) in dx
                    .chunks_mut(c)
                    .zip(g.chunks(c))
                    .zip(y.chunks(c))
                    .zip(val(*x).chunks(c))
                {
                    let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += (g - y * dot) / n;
                    }
                }
            }
        }
        Op::Cosine(a, b) => {
            let c = nodes[a.0].value.last_dim();
            let (av, bv) = (val(*a), val(*b));
            let norms: Vec<(f64, f64)> = av
                .chunks(c)
                .zip(bv.chunks(c))
                .map(|(ra, rb)| {
                    (
                        ra.iter().map(|v| v * v).sum::<f64>().sqrt(),
                        rb.iter().map(|v| v * v).sum::<f64>().sqrt(),
                    )
                })
                .collect();
            if let Some(da) = slot(nodes, grads, *a) {
                for (r, (&(na, nb), (&gr, &cr))) in norms.iter().zip(g.iter().zip(y)).enumerate() {
                    for j in 0..c {
                        let k = r * c + j;
                        da[k] += gr * (bv[k] / (na * nb) - cr * av[k] / (na * na));
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for (r, (&(na, nb), (&gr, &cr))) in norms.iter().zip(g.iter().zip(y)).enumerate() {
                    for j in 0..c {
                        let k = r * c + j;
                        db[k] += gr * (av[k] / (na * nb) - cr * bv[k] / (nb * nb));
                    }
                }
            }
        }
        Op::LayerNorm(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let c = node.value.last_dim();
                for (((d, g), y), xr) in dx
                    .chunks_mut(c)
                    .zip(g.chunks(c))
                    .zip(y.chunks(c))
                    .zip(val(*x).chunks(c))
                {
                    let mu = xr.iter().sum::<f64>() / c as f64;
                    let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                    let sd = (var + LAYER_NORM_EPS).sqrt();
                    let mg = g.iter().sum::<f64>() / c as f64;
                    let mgy = g.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += (g - mg - y * mgy) / sd;
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &v in inputs {
                let len = nodes[v.0].value.shape()[*axis] * inner;
                if let Some(dv) = slot(nodes, grads, v) {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + len];
                        dv[o * len..(o + 1) * len]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, g)| *d += g);
                    }
                }
                offset += len;
            }
        }
        Op::Transpose(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let (r, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Permute { x, axes } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let back = permute_data(g, node.value.shape(), &inverse);
                dx.iter_mut().zip(&back).for_each(|(d, g)| *d += g);
            }
        }
        Op::Reshape(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
        }
        Op::GatherRows { x, idx } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let stride = g.len() / idx.len();
                for (r, &i) in idx.iter().enumerate() {
                    dx[i * stride..(i + 1) * stride]
                        .iter_mut()
                        .zip(&g[r * stride..(r + 1) * stride])
                        .for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Gather { x, idx } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (&i, g) in idx.iter().zip(g) {
                    dx[i] += g;
                }
            }
        }
        Op::MaskConst { x, mask } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, g), m) in dx.iter_mut().zip(g).zip(mask) {
                    *d += g * m;
                }
            }
        }
        Op::StraightThrough { soft } => {
            if let Some(ds) = slot(nodes, grads, *soft) {
                ds.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
        }
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
        } => {
            let xs = nodes[x.0].value.shape();
            let ws = nodes[w.0].value.shape();
            let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
            let (co, kh, kw) = (ws[0], ws[2], ws[3]);
            let geom =
                ConvGeom::new(c, h, wd, kh, kw, *stride, *pad).expect("validated in forward");
            let (p, l) = (geom.patch_len(), geom.out_len());
            let in_len = c * h * wd;
            let need_w = nodes[w.0].requires_grad;
            let need_x = nodes[x.0].requires_grad;
            let mut cols = vec![0.0; p * l];
            if need_w {
                let dw = slot(nodes, grads, *w).expect("requires grad");
                for s in 0..n {
                    kernels::im2col(&val(*x)[s * in_len..(s + 1) * in_len], &geom, &mut cols);
                    let gs = &g[s * co * l..(s + 1) * co * l];
                    kernels::gemm(co, l, p, gs, false, &cols, true, dw, 1.0);
                }
            }
            if need_x {
                let wv = val(*w);
                let dx = slot(nodes, grads, *x).expect("requires grad");
                for s in 0..n {
                    let gs = &g[s * co * l..(s + 1) * co * l];
                    kernels::gemm(p, co, l, wv, true, gs, false, &mut cols, 0.0);
                    kernels::col2im_add(&cols, &geom, &mut dx[s * in_len..(s + 1) * in_len]);
                }
            }
            if let Some(b) = b {
                if let Some(db) = slot(nodes, grads, *b) {
                    for s in 0..n {
                        for (o, row) in g[s * co * l..(s + 1) * co * l].chunks(l).enumerate() {
                            db[o] += row.iter().sum::<f64>();
                        }
                    }
                }
            }
        }
        Op::Upsample2x(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let s = nodes[x.0].value.shape();
                let (h, w) = (s[2], s[3]);
                for plane in 0..s[0] * s[1] {
                    let src = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
                        }
                    }
                }
            }
        }
    }
}

//! Computation tape: records each differentiable operation with its inputs
//! and replays the local gradient rules in reverse.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::kernels::{
    broadcast_shape, broadcast_strides, col2im, contiguous_strides, for_each_broadcast, gemm,
    im2col, sigmoid, ConvGeom, Mat,
};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Upper bound on the im2col scratch matrix, in elements.
const COL_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(F),
    Shift,
    Silu,
    MatMul { ta: bool, tb: bool },
    Bmm { tb: bool },
    Conv2d { stride: usize, pad: usize },
    Upsample2x,
    TemporalConv,
    GroupNorm { groups: usize, mean: Vec<F>, rstd: Vec<F> },
    Softmax,
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    Reshape,
    Permute { perm: Vec<usize> },
    Sum,
    Mean,
    GatherRows { ids: Vec<usize> },
    CrossEntropy { targets: Vec<usize>, probs: Vec<F> },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    parents: Vec<usize>,
    requires_grad: bool,
    param: Option<(u64, usize)>,
    grad: Option<Vec<F>>,
}

/// Ordered record of operations. Nodes are appended in execution order, so
/// every node's inputs precede it and the reverse sweep is a plain reverse
/// iteration.
#[derive(Debug)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    checked: bool,
    cleared: bool,
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checked: false,
            cleared: false,
        }
    }

    /// Checked tapes reject non-finite operands and results.
    pub fn checked() -> Self {
        Self {
            checked: true,
            ..Self::new()
        }
    }

    pub fn set_checked(&mut self, on: bool) {
        self.checked = on;
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Variables created before the call become
    /// invalid and `backward` on them fails.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.cleared = true;
    }

    fn leaf(&mut self, value: Tensor<F>, requires_grad: bool, param: Option<(u64, usize)>) -> Var {
        self.cleared = false;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            parents: Vec::new(),
            requires_grad,
            param,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false, None)
    }

    /// Leaf whose gradient is tracked but which belongs to no parameter store.
    pub fn variable(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true, None)
    }

    /// Leaf bound to a stored parameter; frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let rg = store.requires_grad(id);
        self.leaf(store.value(id).clone(), rg, Some((store.store_id(), id.0)))
    }

    fn node(&self, v: Var) -> Result<&Node<F>> {
        if self.cleared && self.nodes.is_empty() {
            return Err(TensorError::TapeCleared);
        }
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<F>> {
        Ok(&self.node(v)?.value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient computed for `v` by the latest backward pass.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes.get(v.0).and_then(|n| n.grad.as_deref())
    }

    pub(crate) fn param_grads(&self, store_id: u64) -> Result<Vec<(usize, &[F])>> {
        if self.cleared && self.nodes.is_empty() {
            return Err(TensorError::TapeCleared);
        }
        Ok(self
            .nodes
            .iter()
            .filter_map(|n| match (n.param, &n.grad) {
                (Some((s, i)), Some(g)) if s == store_id => Some((i, g.as_slice())),
                _ => None,
            })
            .collect())
    }

    fn check(&self, op: &'static str, inputs: &[Var]) -> Result<()> {
        for &v in inputs {
            let n = self.node(v)?;
            if self.checked && !n.value.all_finite() {
                return Err(TensorError::NonFinite { op });
            }
        }
        Ok(())
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<F>, op: Op<F>, parents: Vec<usize>) -> Result<Var> {
        if self.checked && !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            parents,
            requires_grad,
            param: None,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Result<Var> {
        self.check(name, &[a, b])?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape(), data)?
        } else {
            let out = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| TensorError::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            })?;
            let sa = broadcast_strides(ta.shape(), &out);
            let sb = broadcast_strides(tb.shape(), &out);
            let mut data = vec![F::zero(); out.iter().product()];
            let (da, db) = (ta.data(), tb.data());
            for_each_broadcast(&out, &sa, &sb, |o, i, j| data[o] = f(da[i], db[j]));
            Tensor::new(&out, data)?
        };
        self.push(name, value, op, vec![a.0, b.0])
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        self.check("scale", &[a])?;
        let value = self.nodes[a.0].value.map(|x| x * c);
        self.push("scale", value, Op::Scale(c), vec![a.0])
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Result<Var> {
        self.check("add_scalar", &[a])?;
        let value = self.nodes[a.0].value.map(|x| x + c);
        self.push("add_scalar", value, Op::Shift, vec![a.0])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.check("silu", &[a])?;
        let value = self.nodes[a.0].value.map(|x| x * sigmoid(x));
        self.push("silu", value, Op::Silu, vec![a.0])
    }

    // ---- products ----------------------------------------------------------

    /// 2-D matrix product `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.check("matmul", &[a, b])?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rank() != 2 || vb.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let ma = Mat::new(va.data(), va.shape()[0], va.shape()[1], ta);
        let mb = Mat::new(vb.data(), vb.shape()[0], vb.shape()[1], tb);
        let (m, k) = if ta { (ma.cols, ma.rows) } else { (ma.rows, ma.cols) };
        let (k2, n) = if tb { (mb.cols, mb.rows) } else { (mb.rows, mb.cols) };
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut out = vec![F::zero(); m * n];
        gemm(ma, mb, F::zero(), &mut out);
        let value = Tensor::new(&[m, n], out)?;
        self.push("matmul", value, Op::MatMul { ta, tb }, vec![a.0, b.0])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched product `[G, M, K] x [G, K, N]`, or `[G, N, K]` transposed when `tb`.
    pub fn bmm(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        self.check("bmm", &[a, b])?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mismatch = || TensorError::ShapeMismatch {
            op: "bmm",
            lhs: va.shape().to_vec(),
            rhs: vb.shape().to_vec(),
        };
        if va.rank() != 3 || vb.rank() != 3 || va.shape()[0] != vb.shape()[0] {
            return Err(mismatch());
        }
        let (g, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let (br, bc) = (vb.shape()[1], vb.shape()[2]);
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(mismatch());
        }
        let mut out = vec![F::zero(); g * m * n];
        for i in 0..g {
            gemm(
                Mat::new(&va.data()[i * m * k..(i + 1) * m * k], m, k, false),
                Mat::new(&vb.data()[i * br * bc..(i + 1) * br * bc], br, bc, tb),
                F::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let value = Tensor::new(&[g, m, n], out)?;
        self.push("bmm", value, Op::Bmm { tb }, vec![a.0, b.0])
    }

    // ---- convolution -------------------------------------------------------

    /// 2-D convolution of `[N, Ci, H, W]` with square kernels `[Co, Ci, k, k]`
    /// and bias `[Co]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        self.check("conv2d", &[x, w, b])?;
        let (vx, vw, vb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let bad = || TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: vx.shape().to_vec(),
            rhs: vw.shape().to_vec(),
        };
        if vx.rank() != 4 || vw.rank() != 4 || vw.shape()[2] != vw.shape()[3] {
            return Err(bad());
        }
        let (n, ci, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let (co, k) = (vw.shape()[0], vw.shape()[2]);
        if vw.shape()[1] != ci || vb.shape() != [co] || stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(bad());
        }
        let geom = ConvGeom {
            channels: ci,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
        };
        let (ho, wo) = geom.out_hw();
        let p = ho * wo;
        let kk = geom.col_rows();
        let group = (COL_BUDGET / (kk * p).max(1)).clamp(1, n);
        let mut out = vec![F::zero(); n * co * p];
        let mut col = vec![F::zero(); kk * group * p];
        let mut tmp = vec![F::zero(); co * group * p];
        let img = ci * h * wd;
        let mut n0 = 0;
        while n0 < n {
            let g = group.min(n - n0);
            let ld = g * p;
            for j in 0..g {
                im2col(&vx.data()[(n0 + j) * img..(n0 + j + 1) * img], &geom, &mut col, ld, j * p);
            }
            gemm(
                Mat::new(vw.data(), co, kk, false),
                Mat::new(&col[..kk * ld], kk, ld, false),
                F::zero(),
                &mut tmp[..co * ld],
            );
            for j in 0..g {
                for c in 0..co {
                    let bias = vb.data()[c];
                    let dst = &mut out[((n0 + j) * co + c) * p..((n0 + j) * co + c + 1) * p];
                    let src = &tmp[c * ld + j * p..c * ld + (j + 1) * p];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = *s + bias;
                    }
                }
            }
            n0 += g;
        }
        let value = Tensor::new(&[n, co, ho, wo], out)?;
        self.push("conv2d", value, Op::Conv2d { stride, pad }, vec![x.0, w.0, b.0])
    }

    /// Nearest-neighbour 2x upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        self.check("upsample2x", &[x])?;
        let vx = &self.nodes[x.0].value;
        if vx.rank() != 4 {
            return Err(TensorError::InvalidArgument {
                op: "upsample2x",
                msg: format!("expected rank 4, got {:?}", vx.shape()),
            });
        }
        let (n, c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let mut out = vec![F::zero(); n * c * 4 * h * w];
        for plane in 0..n * c {
            let src = &vx.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(&[n, c, 2 * h, 2 * w], out)?;
        self.push("upsample2x", value, Op::Upsample2x, vec![x.0])
    }

    /// Convolution along the frame axis of `[B, F, Ci, S]` with kernel
    /// `[Co, Ci, K]` (odd `K`, zero "same" padding) and bias `[Co]`.
    pub fn temporal_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check("temporal_conv", &[x, w, b])?;
        let (vx, vw, vb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let bad = || TensorError::ShapeMismatch {
            op: "temporal_conv",
            lhs: vx.shape().to_vec(),
            rhs: vw.shape().to_vec(),
        };
        if vx.rank() != 4 || vw.rank() != 3 || vw.shape()[1] != vx.shape()[2] || vw.shape()[2] % 2 == 0 {
            return Err(bad());
        }
        let (bn, f, ci, s) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let (co, kn) = (vw.shape()[0], vw.shape()[2]);
        if vb.shape() != [co] {
            return Err(bad());
        }
        let taps = split_taps(vw.data(), co, ci, kn);
        let pad = kn / 2;
        let mut out = vec![F::zero(); bn * f * co * s];
        for bi in 0..bn {
            for fi in 0..f {
                let dst = &mut out[(bi * f + fi) * co * s..(bi * f + fi + 1) * co * s];
                for c in 0..co {
                    dst[c * s..(c + 1) * s].fill(vb.data()[c]);
                }
                for (k, tap) in taps.iter().enumerate() {
                    let src_f = fi as isize + k as isize - pad as isize;
                    if src_f < 0 || src_f >= f as isize {
                        continue;
                    }
                    let off = (bi * f + src_f as usize) * ci * s;
                    gemm(
                        Mat::new(tap, co, ci, false),
                        Mat::new(&vx.data()[off..off + ci * s], ci, s, false),
                        F::one(),
                        dst,
                    );
                }
            }
        }
        let value = Tensor::new(&[bn, f, co, s], out)?;
        self.push("temporal_conv", value, Op::TemporalConv, vec![x.0, w.0, b.0])
    }

    // ---- normalisation and softmax ------------------------------------------

    /// Group normalisation of `[N, C, ...]` with per-channel gain and bias.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        self.check("group_norm", &[x, gamma, beta])?;
        let (vx, vg, vbeta) = (&self.nodes[x.0].value, &self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        if vx.rank() < 2 {
            return Err(TensorError::InvalidArgument {
                op: "group_norm",
                msg: format!("expected rank >= 2, got {:?}", vx.shape()),
            });
        }
        let (n, c) = (vx.shape()[0], vx.shape()[1]);
        let s: usize = vx.shape()[2..].iter().product();
        if groups == 0 || c % groups != 0 || vg.shape() != [c] || vbeta.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "group_norm",
                lhs: vx.shape().to_vec(),
                rhs: vg.shape().to_vec(),
            });
        }
        let cg = c / groups;
        let cnt = F::from_f64_lossy((cg * s) as f64);
        let eps = F::from_f64_lossy(eps);
        let mut out = vec![F::zero(); vx.numel()];
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        for ni in 0..n {
            for g in 0..groups {
                let base = (ni * c + g * cg) * s;
                let block = &vx.data()[base..base + cg * s];
                let mean = block.iter().copied().sum::<F>() / cnt;
                let var = block.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cnt;
                let rstd = F::one() / (var + eps).sqrt();
                for cc in 0..cg {
                    let ch = g * cg + cc;
                    let (ga, be) = (vg.data()[ch], vbeta.data()[ch]);
                    for i in 0..s {
                        let idx = base + cc * s + i;
                        out[idx] = (vx.data()[idx] - mean) * rstd * ga + be;
                    }
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        let value = Tensor::new(vx.shape(), out)?;
        self.push(
            "group_norm",
            value,
            Op::GroupNorm {
                groups,
                mean: means,
                rstd: rstds,
            },
            vec![x.0, gamma.0, beta.0],
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check("softmax", &[x])?;
        let vx = &self.nodes[x.0].value;
        let d = *vx.shape().last().expect("tensors have rank >= 1");
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let value = Tensor::new(vx.shape(), out)?;
        self.push("softmax", value, Op::Softmax, vec![x.0])
    }

    // ---- layout ------------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.check("concat", parts)?;
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for {first:?}"),
            });
        }
        let mut total = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = dims3(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let v = &self.nodes[p.0].value;
                let blk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * blk..(o + 1) * blk]);
            }
        }
        let value = Tensor::new(&shape, out)?;
        self.push("concat", value, Op::Concat { axis }, parts.iter().map(|p| p.0).collect())
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check("slice", &[x])?;
        let vx = &self.nodes[x.0].value;
        if axis >= vx.rank() || len == 0 || start + len > vx.shape()[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                msg: format!("{start}+{len} on axis {axis} of {:?}", vx.shape()),
            });
        }
        let (outer, d, inner) = dims3(vx.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * d + start) * inner;
            out.extend_from_slice(&vx.data()[base..base + len * inner]);
        }
        let mut shape = vx.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(&shape, out)?;
        self.push("slice", value, Op::Slice { axis, start }, vec![x.0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check("reshape", &[x])?;
        let vx = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != vx.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: vx.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::new(shape, vx.data().to_vec())?;
        self.push("reshape", value, Op::Reshape, vec![x.0])
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        self.check("permute", &[x])?;
        let vx = &self.nodes[x.0].value;
        let rank = vx.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of rank {rank}"),
            });
        }
        let in_strides = contiguous_strides(vx.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| vx.shape()[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let zeros = vec![0; rank];
        let mut out = vec![F::zero(); vx.numel()];
        let data = vx.data();
        for_each_broadcast(&out_shape, &src_strides, &zeros, |o, i, _| out[o] = data[i]);
        let value = Tensor::new(&out_shape, out)?;
        self.push("permute", value, Op::Permute { perm: perm.to_vec() }, vec![x.0])
    }

    // ---- reductions and losses ---------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check("sum", &[x])?;
        let s = self.nodes[x.0].value.data().iter().copied().sum::<F>();
        self.push("sum", Tensor::scalar(s), Op::Sum, vec![x.0])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check("mean", &[x])?;
        let v = &self.nodes[x.0].value;
        let s = v.data().iter().copied().sum::<F>() / F::from_f64_lossy(v.numel() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean, vec![x.0])
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Rows of `table [V, D]` selected by `ids`, giving `[ids.len(), D]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check("gather_rows", &[table])?;
        let vt = &self.nodes[table.0].value;
        if vt.rank() != 2 || ids.is_empty() || ids.iter().any(|&i| i >= vt.shape()[0]) {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                msg: format!("ids {ids:?} for table {:?}", vt.shape()),
            });
        }
        let d = vt.shape()[1];
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&vt.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(&[ids.len(), d], out)?;
        self.push("gather_rows", value, Op::GatherRows { ids: ids.to_vec() }, vec![table.0])
    }

    /// Mean softmax cross-entropy of `logits [N, K]` against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check("cross_entropy", &[logits])?;
        let vl = &self.nodes[logits.0].value;
        if vl.rank() != 2 || vl.shape()[0] != targets.len() || targets.iter().any(|&t| t >= vl.shape()[1]) {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy",
                msg: format!("{} targets for logits {:?}", targets.len(), vl.shape()),
            });
        }
        let k = vl.shape()[1];
        let mut probs = vl.data().to_vec();
        let mut loss = F::zero();
        for (row, &t) in probs.chunks_mut(k).zip(targets) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
            loss -= row[t].max(F::min_positive_value()).ln();
        }
        loss /= F::from_f64_lossy(targets.len() as f64);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                targets: targets.to_vec(),
                probs,
            },
            vec![logits.0],
        )
    }

    // ---- reverse sweep -------------------------------------------------------

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    /// Previous gradients on the tape are replaced; parameter gradients are
    /// accumulated separately by [`ParamStore::accumulate_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.cleared && self.nodes.is_empty() {
            return Err(TensorError::TapeCleared);
        }
        let n = self.node(loss)?;
        if n.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: n.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad && !matches!(self.nodes[i].op, Op::Leaf) {
                self.propagate(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = if node.requires_grad { g } else { None };
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |p: usize| &self.nodes[node.parents[p]].value;
        let wants = |p: usize| self.nodes[node.parents[p]].requires_grad;
        let emit = |p: usize, contrib: Vec<F>, grads: &mut [Option<Vec<F>>]| {
            let slot = &mut grads[node.parents[p]];
            match slot {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&contrib) {
                        *a += *c;
                    }
                }
                None => *slot = Some(contrib),
            }
        };
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (val(0), val(1));
                for p in 0..2 {
                    if !wants(p) {
                        continue;
                    }
                    let target = if p == 0 { a } else { b };
                    let other = if p == 0 { b } else { a };
                    let mut acc = vec![F::zero(); target.numel()];
                    let st = broadcast_strides(target.shape(), out_shape);
                    let so = broadcast_strides(other.shape(), out_shape);
                    let od = other.data();
                    match node.op {
                        Op::Mul => for_each_broadcast(out_shape, &st, &so, |o, it, io| acc[it] += g[o] * od[io]),
                        Op::Sub if p == 1 => for_each_broadcast(out_shape, &st, &so, |o, it, _| acc[it] -= g[o]),
                        _ => for_each_broadcast(out_shape, &st, &so, |o, it, _| acc[it] += g[o]),
                    }
                    emit(p, acc, grads);
                }
            }
            Op::Scale(c) => emit(0, g.iter().map(|&x| x * *c).collect(), grads),
            Op::Shift | Op::Reshape => emit(0, g.to_vec(), grads),
            Op::Silu => {
                let x = val(0).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| {
                        let s = sigmoid(xi);
                        gi * s * (F::one() + xi * (F::one() - s))
                    })
                    .collect();
                emit(0, d, grads);
            }
            Op::MatMul { ta, tb } => {
                let (a, b) = (val(0), val(1));
                let (ar, ac) = (a.shape()[0], a.shape()[1]);
                let (br, bc) = (b.shape()[0], b.shape()[1]);
                let (m, n) = (out_shape[0], out_shape[1]);
                let gm = Mat::new(g, m, n, false);
                if wants(0) {
                    let mut da = vec![F::zero(); a.numel()];
                    if !*ta {
                        gemm(gm, Mat::new(b.data(), br, bc, !*tb), F::zero(), &mut da);
                    } else {
                        gemm(Mat::new(b.data(), br, bc, *tb), Mat::new(g, m, n, true), F::zero(), &mut da);
                    }
                    emit(0, da, grads);
                }
                if wants(1) {
                    let mut db = vec![F::zero(); b.numel()];
                    if !*tb {
                        gemm(Mat::new(a.data(), ar, ac, !*ta), gm, F::zero(), &mut db);
                    } else {
                        gemm(Mat::new(g, m, n, true), Mat::new(a.data(), ar, ac, *ta), F::zero(), &mut db);
                    }
                    emit(1, db, grads);
                }
            }
            Op::Bmm { tb } => {
                let (a, b) = (val(0), val(1));
                let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                let (br, bc) = (b.shape()[1], b.shape()[2]);
                let n = out_shape[2];
                if wants(0) {
                    let mut da = vec![F::zero(); a.numel()];
                    for i in 0..bs {
                        gemm(
                            Mat::new(&g[i * m * n..(i + 1) * m * n], m, n, false),
                            Mat::new(&b.data()[i * br * bc..(i + 1) * br * bc], br, bc, !*tb),
                            F::zero(),
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    emit(0, da, grads);
                }
                if wants(1) {
                    let mut db = vec![F::zero(); b.numel()];
                    for i in 0..bs {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &a.data()[i * m * k..(i + 1) * m * k];
                        let dst = &mut db[i * br * bc..(i + 1) * br * bc];
                        if !*tb {
                            gemm(Mat::new(ai, m, k, true), Mat::new(gi, m, n, false), F::zero(), dst);
                        } else {
                            gemm(Mat::new(gi, m, n, true), Mat::new(ai, m, k, false), F::zero(), dst);
                        }
                    }
                    emit(1, db, grads);
                }
            }
            Op::Conv2d { stride, pad } => {
                let (x, w) = (val(0), val(1));
                let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let (co, k) = (w.shape()[0], w.shape()[2]);
                let geom = ConvGeom {
                    channels: ci,
                    height: h,
                    width: wd,
                    kernel: k,
                    stride: *stride,
                    pad: *pad,
                };
                let (ho, wo) = geom.out_hw();
                let p = ho * wo;
                let kk = geom.col_rows();
                let group = (COL_BUDGET / (kk * p).max(1)).clamp(1, n);
                let img = ci * h * wd;
                let mut dx = wants(0).then(|| vec![F::zero(); x.numel()]);
                let mut dw = wants(1).then(|| vec![F::zero(); w.numel()]);
                let mut col = vec![F::zero(); kk * group * p];
                let mut gt = vec![F::zero(); co * group * p];
                let mut n0 = 0;
                while n0 < n {
                    let gsz = group.min(n - n0);
                    let ld = gsz * p;
                    for j in 0..gsz {
                        for c in 0..co {
                            let src = &g[((n0 + j) * co + c) * p..((n0 + j) * co + c + 1) * p];
                            gt[c * ld + j * p..c * ld + (j + 1) * p].copy_from_slice(src);
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        for j in 0..gsz {
                            im2col(&x.data()[(n0 + j) * img..(n0 + j + 1) * img], &geom, &mut col, ld, j * p);
                        }
                        gemm(
                            Mat::new(&gt[..co * ld], co, ld, false),
                            Mat::new(&col[..kk * ld], kk, ld, true),
                            F::one(),
                            dw,
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(
                            Mat::new(w.data(), co, kk, true),
                            Mat::new(&gt[..co * ld], co, ld, false),
                            F::zero(),
                            &mut col[..kk * ld],
                        );
                        for j in 0..gsz {
                            col2im(&col, &geom, ld, j * p, &mut dx[(n0 + j) * img..(n0 + j + 1) * img]);
                        }
                    }
                    n0 += gsz;
                }
                if let Some(dx) = dx {
                    emit(0, dx, grads);
                }
                if let Some(dw) = dw {
                    emit(1, dw, grads);
                }
                if wants(2) {
                    let mut db = vec![F::zero(); co];
                    for (idx, gi) in g.iter().enumerate() {
                        db[(idx / p) % co] += *gi;
                    }
                    emit(2, db, grads);
                }
            }
            Op::Upsample2x => {
                let x = val(0);
                let (h, w) = (x.shape()[2], x.shape()[3]);
                let planes = x.shape()[0] * x.shape()[1];
                let mut dx = vec![F::zero(); x.numel()];
                for pl in 0..planes {
                    let src = &g[pl * 4 * h * w..(pl + 1) * 4 * h * w];
                    let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
                emit(0, dx, grads);
            }
            Op::TemporalConv => {
                let (x, w) = (val(0), val(1));
                let (bn, f, ci, s) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let (co, kn) = (w.shape()[0], w.shape()[2]);
                let pad = kn / 2;
                let taps = split_taps(w.data(), co, ci, kn);
                let mut dx = wants(0).then(|| vec![F::zero(); x.numel()]);
                let mut dtaps = wants(1).then(|| vec![vec![F::zero(); co * ci]; kn]);
                for bi in 0..bn {
                    for fi in 0..f {
                        let gbf = &g[(bi * f + fi) * co * s..(bi * f + fi + 1) * co * s];
                        for k in 0..kn {
                            let src_f = fi as isize + k as isize - pad as isize;
                            if src_f < 0 || src_f >= f as isize {
                                continue;
                            }
                            let off = (bi * f + src_f as usize) * ci * s;
                            if let Some(dx) = dx.as_mut() {
                                gemm(
                                    Mat::new(&taps[k], co, ci, true),
                                    Mat::new(gbf, co, s, false),
                                    F::one(),
                                    &mut dx[off..off + ci * s],
                                );
                            }
                            if let Some(dt) = dtaps.as_mut() {
                                gemm(
                                    Mat::new(gbf, co, s, false),
                                    Mat::new(&x.data()[off..off + ci * s], ci, s, true),
                                    F::one(),
                                    &mut dt[k],
                                );
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    emit(0, dx, grads);
                }
                if let Some(dt) = dtaps {
                    let mut dw = vec![F::zero(); w.numel()];
                    for (k, tap) in dt.iter().enumerate() {
                        for (idx, v) in tap.iter().enumerate() {
                            dw[idx * kn + k] = *v;
                        }
                    }
                    emit(1, dw, grads);
                }
                if wants(2) {
                    let mut db = vec![F::zero(); co];
                    for (idx, gi) in g.iter().enumerate() {
                        db[(idx / s) % co] += *gi;
                    }
                    emit(2, db, grads);
                }
            }
            Op::GroupNorm { groups, mean, rstd } => {
                let (x, gamma) = (val(0), val(1));
                let (n, c) = (x.shape()[0], x.shape()[1]);
                let s: usize = x.shape()[2..].iter().product();
                let cg = c / groups;
                let cnt = F::from_f64_lossy((cg * s) as f64);
                let mut dx = vec![F::zero(); x.numel()];
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for ni in 0..n {
                    for gi in 0..*groups {
                        let (mu, rs) = (mean[ni * groups + gi], rstd[ni * groups + gi]);
                        let base = (ni * c + gi * cg) * s;
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for cc in 0..cg {
                            let ch = gi * cg + cc;
                            for j in 0..s {
                                let idx = base + cc * s + j;
                                let xh = (x.data()[idx] - mu) * rs;
                                let dy = g[idx] * gamma.data()[ch];
                                m1 += dy;
                                m2 += dy * xh;
                                dgamma[ch] += g[idx] * xh;
                                dbeta[ch] += g[idx];
                            }
                        }
                        m1 /= cnt;
                        m2 /= cnt;
                        for cc in 0..cg {
                            let ch = gi * cg + cc;
                            for j in 0..s {
                                let idx = base + cc * s + j;
                                let xh = (x.data()[idx] - mu) * rs;
                                let dy = g[idx] * gamma.data()[ch];
                                dx[idx] = rs * (dy - m1 - xh * m2);
                            }
                        }
                    }
                }
                if wants(0) {
                    emit(0, dx, grads);
                }
                if wants(1) {
                    emit(1, dgamma, grads);
                }
                if wants(2) {
                    emit(2, dbeta, grads);
                }
            }
            Op::Softmax => {
                let y = node.value.data();
                let d = *out_shape.last().expect("rank >= 1");
                let mut dx = vec![F::zero(); y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                    let dot: F = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    for ((o, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = *yv * (*gv - dot);
                    }
                }
                emit(0, dx, grads);
            }
            Op::Concat { axis } => {
                let (outer, total, inner) = dims3(out_shape, *axis);
                let mut offset = 0;
                for p in 0..node.parents.len() {
                    let d = val(p).shape()[*axis];
                    if wants(p) {
                        let mut dp = Vec::with_capacity(outer * d * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dp.extend_from_slice(&g[base..base + d * inner]);
                        }
                        emit(p, dp, grads);
                    }
                    offset += d;
                }
            }
            Op::Slice { axis, start } => {
                let x = val(0);
                let (outer, d, inner) = dims3(x.shape(), *axis);
                let len = out_shape[*axis];
                let mut dx = vec![F::zero(); x.numel()];
                for o in 0..outer {
                    let base = (o * d + start) * inner;
                    dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                emit(0, dx, grads);
            }
            Op::Permute { perm } => {
                let x = val(0);
                let in_strides = contiguous_strides(x.shape());
                let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                let zeros = vec![0; perm.len()];
                let mut dx = vec![F::zero(); x.numel()];
                for_each_broadcast(out_shape, &src, &zeros, |o, i, _| dx[i] = g[o]);
                emit(0, dx, grads);
            }
            Op::Sum => emit(0, vec![g[0]; val(0).numel()], grads),
            Op::Mean => {
                let n = val(0).numel();
                emit(0, vec![g[0] / F::from_f64_lossy(n as f64); n], grads);
            }
            Op::GatherRows { ids } => {
                let t = val(0);
                let d = t.shape()[1];
                let mut dt = vec![F::zero(); t.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                emit(0, dt, grads);
            }
            Op::CrossEntropy { targets, probs } => {
                let k = val(0).shape()[1];
                let scale = g[0] / F::from_f64_lossy(targets.len() as f64);
                let mut dl: Vec<F> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * k + t] -= scale;
                }
                emit(0, dl, grads);
            }
        }
        Ok(())
    }
}

fn split_taps<F: Element>(w: &[F], co: usize, ci: usize, kn: usize) -> Vec<Vec<F>> {
    (0..kn)
        .map(|k| (0..co * ci).map(|idx| w[idx * kn + k]).collect())
        .collect()
}

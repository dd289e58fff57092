//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape itself is a topological
//! order and `backward` is a single reverse sweep that visits every node once.

use super::kernels::{self, Geom3};
use super::tensor::{permute_raw, Scalar, Tensor};
use crate::error::{MavrError, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Log { x: Var, eps: f64 },
    SumAll(Var),
    Mean { x: Var, axis: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Matmul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Softmax { x: Var, axis: usize },
    L2Normalize { x: Var, axis: usize, eps: f64 },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<f64>, rstd: Vec<f64> },
    Conv3d { x: Var, w: Var, b: Var, geom: Geom3 },
    ConvSpatialMean { x: Var, w: Var, b: Var, geom: Geom3 },
    MaxPool { x: Var, geom: Geom3, argmax: Vec<u32> },
    AvgPool { x: Var, geom: Geom3 },
    Upsample { x: Var, factor: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    param: Option<usize>,
    grad: Option<Tensor<T>>,
}

/// A recording of one forward evaluation.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_rank5(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.len() != 5 {
        return Err(MavrError::shape(
            op,
            "rank",
            format!("expected [B,C,T,H,W], got {shape:?}"),
        ));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A differentiable input tied to parameter slot `id`.
    pub fn param(&mut self, id: usize, value: Tensor<T>) -> Var {
        let v = self.leaf(value);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// `(param id, gradient)` for every parameter leaf that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.param?, n.grad.as_ref()?)))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(MavrError::shape("add", "all", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(MavrError::shape("mul", "all", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let k = T::from_f64(c);
        let out = self.value(a).map(|x| x * k);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::ZERO { x } else { T::ZERO });
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    /// Natural log with the argument clamped below at `eps`.
    pub fn log(&mut self, a: Var, eps: f64) -> Var {
        let e = T::from_f64(eps);
        let out = self.value(a).map(|x| x.max(e).ln());
        let rg = self.rg(&[a]);
        self.push(out, Op::Log { x: a, eps }, rg)
    }

    // ---- reductions and layout ----------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let mut s = T::ZERO;
        for &x in self.value(a).data() {
            s += x;
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        if axis >= v.rank() {
            return Err(MavrError::shape("mean", format!("axis {axis}"), format!("rank {}", v.rank())));
        }
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let inv = T::from_f64(1.0 / n as f64);
        let mut data = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &v.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for d in &mut data {
            *d *= inv;
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mean { x: a, axis }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Axis permutation (`transpose` generalised): output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(perm)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Permute { x: a, perm: perm.to_vec() }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(MavrError::shape("transpose", "rank", format!("rank {r} < 2")));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .nodes
            .get(xs.first().map(|v| v.0).unwrap_or(usize::MAX))
            .ok_or_else(|| MavrError::shape("concat", "inputs", "no inputs"))?;
        let base = first.value.shape().to_vec();
        if axis >= base.len() {
            return Err(MavrError::shape("concat", format!("axis {axis}"), format!("rank {}", base.len())));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let same = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(MavrError::shape(
                    "concat",
                    format!("axis != {axis}"),
                    format!("{s:?} vs {base:?}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let n = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(xs);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat { xs: xs.to_vec(), axis }, rg))
    }

    // ---- linear algebra ------------------------------------------------------

    /// Batched matrix product over equal leading extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != sa.len() {
            return Err(MavrError::shape("matmul", "rank", format!("{sa:?} vs {sb:?}")));
        }
        let r = sa.len();
        if sa[..r - 2] != sb[..r - 2] {
            return Err(MavrError::shape("matmul", "batch", format!("{sa:?} vs {sb:?}")));
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        if sb[r - 2] != k {
            return Err(MavrError::shape("matmul", "inner", format!("{k} vs {}", sb[r - 2])));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut data = vec![T::ZERO; batch * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &va[i * m * k..],
                false,
                &vb[i * k * n..],
                false,
                &mut data[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let mut shape = sa;
        shape[r - 1] = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Matmul(a, b), rg))
    }

    /// `x·wᵀ + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let fan_in = *sx.last().ok_or_else(|| MavrError::shape("linear", "rank", "scalar input"))?;
        if sw.len() != 2 || sw[1] != fan_in {
            return Err(MavrError::shape("linear", "in", format!("input {sx:?}, weight {sw:?}")));
        }
        let out_dim = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(MavrError::shape("linear", "bias", format!("{:?} vs [{out_dim}]", self.shape(b))));
            }
        }
        let rows = self.value(x).numel() / fan_in;
        let mut data = vec![T::ZERO; rows * out_dim];
        T::gemm(rows, fan_in, out_dim, self.value(x).data(), false, self.value(w).data(), true, &mut data, false);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in data.chunks_mut(out_dim) {
                for (d, &bb) in row.iter_mut().zip(bv) {
                    *d += bb;
                }
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = out_dim;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Linear { x, w, b }, rg))
    }

    // ---- normalisation -------------------------------------------------------

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        if axis >= v.rank() {
            return Err(MavrError::shape("softmax", format!("axis {axis}"), format!("rank {}", v.rank())));
        }
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let src = v.data();
        let mut data = vec![T::ZERO; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mut mx = src[at(0)];
                for k in 1..n {
                    mx = mx.max(src[at(k)]);
                }
                let mut s = T::ZERO;
                for k in 0..n {
                    let e = (src[at(k)] - mx).exp();
                    data[at(k)] = e;
                    s += e;
                }
                for k in 0..n {
                    data[at(k)] = data[at(k)] / s;
                }
            }
        }
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax { x: a, axis }, rg))
    }

    /// `x / max(‖x‖₂, eps)` along `axis`.
    pub fn l2_normalize(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        let v = self.value(a);
        if axis >= v.rank() {
            return Err(MavrError::shape("l2_normalize", format!("axis {axis}"), format!("rank {}", v.rank())));
        }
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let src = v.data();
        let mut data = vec![T::ZERO; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mut ss = 0.0;
                for k in 0..n {
                    let x = src[at(k)].to_f64();
                    ss += x * x;
                }
                let d = T::from_f64(ss.sqrt().max(eps));
                for k in 0..n {
                    data[at(k)] = src[at(k)] / d;
                }
            }
        }
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::L2Normalize { x: a, axis, eps }, rg))
    }

    /// Group normalisation over `[B, C, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(MavrError::shape("group_norm", "rank", format!("{s:?}")));
        }
        let (b, c) = (s[0], s[1]);
        if groups == 0 || c % groups != 0 {
            return Err(MavrError::shape("group_norm", "C", format!("{c} channels into {groups} groups")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(MavrError::shape("group_norm", "affine", format!("expected [{c}]")));
        }
        let spatial: usize = s[2..].iter().product();
        let cpg = c / groups;
        let group_len = cpg * spatial;
        let src = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut data = vec![T::ZERO; src.len()];
        let mut means = Vec::with_capacity(b * groups);
        let mut rstds = Vec::with_capacity(b * groups);
        for gi in 0..b * groups {
            let chunk = &src[gi * group_len..(gi + 1) * group_len];
            let mean = lane_sum(chunk, |v| v) / group_len as f64;
            let var = lane_sum(chunk, |v| (v - mean) * (v - mean)) / group_len as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..cpg {
                let ch = (gi % groups) * cpg + j;
                let scale = rstd * gv[ch].to_f64();
                let shift = bv[ch].to_f64() - mean * scale;
                let (scale, shift) = (T::from_f64(scale), T::from_f64(shift));
                let range = gi * group_len + j * spatial..gi * group_len + (j + 1) * spatial;
                for (d, &v) in data[range.clone()].iter_mut().zip(&src[range]) {
                    *d = v * scale + shift;
                }
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(s, data),
            Op::GroupNorm { x, gamma, beta, groups, mean: means, rstd: rstds },
            rg,
        ))
    }

    // ---- video ops ---------------------------------------------------------------

    fn conv_geom(&self, op: &'static str, x: Var, w: Var, b: Var, stride: [usize; 3], pad: [usize; 3]) -> Result<(Geom3, usize)> {
        let sx = self.shape(x);
        check_rank5(op, sx)?;
        let sw = self.shape(w);
        if sw.len() != 5 {
            return Err(MavrError::shape(op, "weight rank", format!("{sw:?}")));
        }
        if sw[1] != sx[1] {
            return Err(MavrError::shape(op, "C_in", format!("input has {}, weight expects {}", sx[1], sw[1])));
        }
        if self.shape(b) != [sw[0]] {
            return Err(MavrError::shape(op, "bias", format!("{:?} vs [{}]", self.shape(b), sw[0])));
        }
        let geom = Geom3::new(op, sx[1], [sx[2], sx[3], sx[4]], [sw[2], sw[3], sw[4]], stride, pad)?;
        Ok((geom, sw[0]))
    }

    /// 3D convolution over `[B, C_in, T, H, W]` with weight `[C_out, C_in, kt, kh, kw]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let (geom, cout) = self.conv_geom("conv3d", x, w, b, stride, pad)?;
        let batch = self.shape(x)[0];
        let (in_len, out_len) = (geom.in_len(), cout * geom.out_positions());
        let mut data = vec![T::ZERO; batch * out_len];
        let mut col = Vec::new();
        {
            let (vx, vw, vb) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
            for i in 0..batch {
                kernels::conv3d_forward(
                    &geom,
                    cout,
                    &vx[i * in_len..(i + 1) * in_len],
                    vw,
                    vb,
                    &mut col,
                    &mut data[i * out_len..(i + 1) * out_len],
                );
            }
        }
        let [to, ho, wo] = geom.output;
        let out = Tensor::from_parts(vec![batch, cout, to, ho, wo], data);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::Conv3d { x, w, b, geom }, rg))
    }

    /// Unit-stride 3D convolution immediately followed by a per-frame spatial
    /// mean, evaluated without materialising the convolution output.
    /// Returns `[B, C_out, T_out]`; numerically equal to
    /// `mean_hw(conv3d(x, w, b, 1, pad))`.
    pub fn conv3d_spatial_mean(&mut self, x: Var, w: Var, b: Var, pad: [usize; 3]) -> Result<Var> {
        let (geom, cout) = self.conv_geom("conv3d_spatial_mean", x, w, b, [1, 1, 1], pad)?;
        let batch = self.shape(x)[0];
        let in_len = geom.in_len();
        let [to, ho, wo] = geom.output;
        let k = geom.patch_len();
        let inv = T::from_f64(1.0 / (ho * wo) as f64);
        let mut data = vec![T::ZERO; batch * cout * to];
        {
            let (vx, vw, vb) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
            for i in 0..batch {
                let s = kernels::tap_sums(&geom, &vx[i * in_len..(i + 1) * in_len]);
                let out = &mut data[i * cout * to..(i + 1) * cout * to];
                T::gemm(cout, k, to, vw, false, &s, false, out, false);
                for (o, row) in out.chunks_mut(to).enumerate() {
                    for v in row {
                        *v = *v * inv + vb[o];
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![batch, cout, to], data);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::ConvSpatialMean { x, w, b, geom }, rg))
    }

    /// Unpadded 3D pooling over `[B, C, T, H, W]`.
    pub fn pool3d(&mut self, x: Var, kind: PoolKind, kernel: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        check_rank5("pool3d", &sx)?;
        let geom = Geom3::new("pool3d", sx[1], [sx[2], sx[3], sx[4]], kernel, stride, [0, 0, 0])?;
        let batch = sx[0];
        let (in_len, out_len) = (geom.in_len(), sx[1] * geom.out_positions());
        let mut data = vec![T::ZERO; batch * out_len];
        let vx = self.value(x).data();
        let op = match kind {
            PoolKind::Max => {
                let mut argmax = vec![0u32; batch * out_len];
                for i in 0..batch {
                    kernels::max_pool_forward(
                        &geom,
                        &vx[i * in_len..(i + 1) * in_len],
                        &mut data[i * out_len..(i + 1) * out_len],
                        &mut argmax[i * out_len..(i + 1) * out_len],
                    );
                }
                Op::MaxPool { x, geom, argmax }
            }
            PoolKind::Avg => {
                for i in 0..batch {
                    kernels::avg_pool_forward(
                        &geom,
                        &vx[i * in_len..(i + 1) * in_len],
                        &mut data[i * out_len..(i + 1) * out_len],
                    );
                }
                Op::AvgPool { x, geom }
            }
        };
        let [to, ho, wo] = geom.output;
        let out = Tensor::from_parts(vec![batch, sx[1], to, ho, wo], data);
        let rg = self.rg(&[x]);
        Ok(self.push(out, op, rg))
    }

    /// Nearest-neighbour upsampling of the last two axes.
    pub fn upsample_nearest2d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || factor == 0 {
            return Err(MavrError::shape("upsample_nearest2d", "factor", format!("{s:?} x{factor}")));
        }
        let r = s.len();
        let (h, w) = (s[r - 2], s[r - 1]);
        let planes = self.value(x).numel() / (h * w);
        let mut data = vec![T::ZERO; planes * h * w * factor * factor];
        kernels::upsample_nearest(self.value(x).data(), planes, h, w, factor, &mut data);
        let mut shape = s;
        shape[r - 2] *= factor;
        shape[r - 1] *= factor;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Upsample { x, factor }, rg))
    }

    // ---- losses --------------------------------------------------------------

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(MavrError::shape(
                "cross_entropy",
                "batch",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let (rows, classes) = (s[0], s[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(MavrError::LabelOutOfRange { label, classes });
        }
        let v = self.value(logits).data();
        let mut probs = vec![0.0; rows * classes];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &v[r * classes..(r + 1) * classes];
            let mx = row.iter().map(|x| x.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (c, &x) in row.iter().enumerate() {
                let e = (x.to_f64() - mx).exp();
                probs[r * classes + c] = e;
                z += e;
            }
            for p in &mut probs[r * classes..(r + 1) * classes] {
                *p /= z;
            }
            loss += z.ln() + mx - row[labels[r]].to_f64();
        }
        let out = Tensor::scalar(T::from_f64(loss / rows as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(out, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    // ---- backward ------------------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Leaf gradients accumulate
    /// across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(MavrError::shape(
                "backward",
                "loss",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, &v) in acc.data_mut().iter_mut().zip(&g) {
                            *a += v;
                        }
                    }
                    None => node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        accumulate(grads, v, g.len(), |d| add_into(d, g));
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if needs(v) {
                        let o = val(other);
                        accumulate(grads, v, g.len(), |d| {
                            for ((d, &gg), &ov) in d.iter_mut().zip(g).zip(o) {
                                *d += gg * ov;
                            }
                        });
                    }
                }
            }
            Op::Scale(a, c) => {
                let k = T::from_f64(*c);
                accumulate(grads, *a, g.len(), |d| {
                    for (d, &gg) in d.iter_mut().zip(g) {
                        *d += gg * k;
                    }
                });
            }
            Op::Relu(a) => {
                let x = val(*a);
                accumulate(grads, *a, g.len(), |d| {
                    for ((d, &gg), &xv) in d.iter_mut().zip(g).zip(x) {
                        if xv > T::ZERO {
                            *d += gg;
                        }
                    }
                });
            }
            Op::Log { x, eps } => {
                let xs = val(*x);
                let e = T::from_f64(*eps);
                accumulate(grads, *x, g.len(), |d| {
                    for ((d, &gg), &xv) in d.iter_mut().zip(g).zip(xs) {
                        if xv > e {
                            *d += gg / xv;
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let n = self.nodes[a.0].value.numel();
                accumulate(grads, *a, n, |d| {
                    for d in d {
                        *d += g[0];
                    }
                });
            }
            Op::Mean { x, axis } => {
                let shape = self.nodes[x.0].value.shape();
                let (outer, n, inner) = split_axis(shape, *axis);
                let inv = T::from_f64(1.0 / n as f64);
                accumulate(grads, *x, outer * n * inner, |d| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for k in 0..n {
                            for (dd, &s) in d[(o * n + k) * inner..(o * n + k + 1) * inner].iter_mut().zip(src) {
                                *dd += s * inv;
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => accumulate(grads, *a, g.len(), |d| add_into(d, g)),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let gt = permute_raw(&Tensor::from_parts(node.value.shape().to_vec(), g.to_vec()), &inverse);
                accumulate(grads, *x, g.len(), |d| add_into(d, gt.data()));
            }
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &x in xs {
                    let n = self.nodes[x.0].value.shape()[*axis];
                    if needs(x) {
                        accumulate(grads, x, outer * n * inner, |d| {
                            for o in 0..outer {
                                let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                                add_into(&mut d[o * n * inner..(o + 1) * n * inner], src);
                            }
                        });
                    }
                    offset += n;
                }
            }
            Op::Matmul(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let r = sa.len();
                let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
                let batch: usize = sa[..r - 2].iter().product();
                if needs(*a) {
                    let bv = val(*b);
                    accumulate(grads, *a, batch * m * k, |d| {
                        for i in 0..batch {
                            T::gemm(m, n, k, &g[i * m * n..], false, &bv[i * k * n..], true, &mut d[i * m * k..(i + 1) * m * k], true);
                        }
                    });
                }
                if needs(*b) {
                    let av = val(*a);
                    accumulate(grads, *b, batch * k * n, |d| {
                        for i in 0..batch {
                            T::gemm(k, m, n, &av[i * m * k..], true, &g[i * m * n..], false, &mut d[i * k * n..(i + 1) * k * n], true);
                        }
                    });
                }
            }
            Op::Linear { x, w, b } => {
                let sw = self.nodes[w.0].value.shape();
                let (out_dim, fan_in) = (sw[0], sw[1]);
                let rows = g.len() / out_dim;
                if needs(*x) {
                    let wv = val(*w);
                    accumulate(grads, *x, rows * fan_in, |d| {
                        T::gemm(rows, out_dim, fan_in, g, false, wv, false, d, true);
                    });
                }
                if needs(*w) {
                    let xv = val(*x);
                    accumulate(grads, *w, out_dim * fan_in, |d| {
                        T::gemm(out_dim, rows, fan_in, g, true, xv, false, d, true);
                    });
                }
                if let Some(b) = b {
                    if needs(*b) {
                        accumulate(grads, *b, out_dim, |d| {
                            for row in g.chunks(out_dim) {
                                add_into(d, row);
                            }
                        });
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                accumulate(grads, *x, g.len(), |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let mut dot = T::ZERO;
                            for k in 0..n {
                                dot += g[at(k)] * y[at(k)];
                            }
                            for k in 0..n {
                                d[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::L2Normalize { x, axis, eps } => {
                let y = node.value.data();
                let xs = val(*x);
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                accumulate(grads, *x, g.len(), |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let norm = (0..n).map(|k| xs[at(k)].to_f64().powi(2)).sum::<f64>().sqrt();
                            let denom = norm.max(*eps);
                            let dot: f64 = if norm > *eps {
                                (0..n).map(|k| g[at(k)].to_f64() * y[at(k)].to_f64()).sum()
                            } else {
                                0.0
                            };
                            for k in 0..n {
                                let v = (g[at(k)].to_f64() - y[at(k)].to_f64() * dot) / denom;
                                d[at(k)] += T::from_f64(v);
                            }
                        }
                    }
                });
            }
            Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                let shape = self.nodes[x.0].value.shape();
                let c = shape[1];
                let spatial: usize = shape[2..].iter().product();
                let cpg = c / groups;
                let group_len = cpg * spatial;
                let xs = val(*x);
                let gv = val(*gamma);
                // per (group, channel-in-group): Σg and Σg·x
                let mut sg = vec![0.0f64; mean.len() * cpg];
                let mut sgx = vec![0.0f64; mean.len() * cpg];
                for (i, (gc, xc)) in g.chunks(spatial).zip(xs.chunks(spatial)).enumerate() {
                    sg[i] = lane_sum(gc, |v| v);
                    sgx[i] = lane_dot(gc, xc);
                }
                let channel = |i: usize| ((i / cpg) % groups) * cpg + i % cpg;
                if needs(*gamma) {
                    accumulate(grads, *gamma, c, |d| {
                        for i in 0..sg.len() {
                            let gi = i / cpg;
                            d[channel(i)] += T::from_f64(rstd[gi] * (sgx[i] - mean[gi] * sg[i]));
                        }
                    });
                }
                if needs(*beta) {
                    accumulate(grads, *beta, c, |d| {
                        for (i, &v) in sg.iter().enumerate() {
                            d[channel(i)] += T::from_f64(v);
                        }
                    });
                }
                if needs(*x) {
                    accumulate(grads, *x, xs.len(), |d| {
                        for gi in 0..mean.len() {
                            let (mu, rs) = (mean[gi], rstd[gi]);
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..cpg {
                                let i = gi * cpg + j;
                                let gam = gv[channel(i)].to_f64();
                                m1 += gam * sg[i];
                                m2 += gam * rs * (sgx[i] - mu * sg[i]);
                            }
                            m1 /= group_len as f64;
                            m2 /= group_len as f64;
                            for j in 0..cpg {
                                let i = gi * cpg + j;
                                let ca = T::from_f64(rs * gv[channel(i)].to_f64());
                                let cb = T::from_f64(-rs * rs * m2);
                                let cc = T::from_f64(-rs * m1 + rs * rs * m2 * mu);
                                let range = i * spatial..(i + 1) * spatial;
                                for ((dd, &gg), &xx) in d[range.clone()].iter_mut().zip(&g[range.clone()]).zip(&xs[range]) {
                                    *dd += ca * gg + cb * xx + cc;
                                }
                            }
                        }
                    });
                }
            }
            Op::Conv3d { x, w, b, geom } => {
                let cout = self.nodes[w.0].value.shape()[0];
                let batch = self.nodes[x.0].value.shape()[0];
                let (in_len, out_len) = (geom.in_len(), cout * geom.out_positions());
                let (xs, ws) = (val(*x), val(*w));
                let mut dx = needs(*x).then(|| vec![T::ZERO; batch * in_len]);
                let mut dw = needs(*w).then(|| vec![T::ZERO; ws.len()]);
                let mut db = needs(*b).then(|| vec![T::ZERO; cout]);
                let mut col = Vec::new();
                for i in 0..batch {
                    kernels::conv3d_backward(
                        geom,
                        cout,
                        &xs[i * in_len..(i + 1) * in_len],
                        ws,
                        &g[i * out_len..(i + 1) * out_len],
                        &mut col,
                        dx.as_mut().map(|d| &mut d[i * in_len..(i + 1) * in_len]),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                }
                for (v, d) in [(*x, dx), (*w, dw), (*b, db)] {
                    if let Some(d) = d {
                        merge(grads, v, d);
                    }
                }
            }
            Op::ConvSpatialMean { x, w, b, geom } => {
                let cout = self.nodes[w.0].value.shape()[0];
                let batch = self.nodes[x.0].value.shape()[0];
                let in_len = geom.in_len();
                let [to, ho, wo] = geom.output;
                let k = geom.patch_len();
                let inv = T::from_f64(1.0 / (ho * wo) as f64);
                let (xs, ws) = (val(*x), val(*w));
                let mut dx = needs(*x).then(|| vec![T::ZERO; batch * in_len]);
                let mut dw = needs(*w).then(|| vec![T::ZERO; ws.len()]);
                let mut db = needs(*b).then(|| vec![T::ZERO; cout]);
                for i in 0..batch {
                    let gi = &g[i * cout * to..(i + 1) * cout * to];
                    if let Some(db) = db.as_mut() {
                        for (o, row) in gi.chunks(to).enumerate() {
                            for &v in row {
                                db[o] += v;
                            }
                        }
                    }
                    let gs: Vec<T> = gi.iter().map(|&v| v * inv).collect();
                    if let Some(dw) = dw.as_mut() {
                        let s = kernels::tap_sums(geom, &xs[i * in_len..(i + 1) * in_len]);
                        T::gemm(cout, to, k, &gs, false, &s, true, dw, true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let mut gtap = vec![T::ZERO; k * to];
                        T::gemm(k, cout, to, ws, true, &gs, false, &mut gtap, false);
                        kernels::tap_sums_backward(geom, &gtap, &mut dx[i * in_len..(i + 1) * in_len]);
                    }
                }
                for (v, d) in [(*x, dx), (*w, dw), (*b, db)] {
                    if let Some(d) = d {
                        merge(grads, v, d);
                    }
                }
            }
            Op::MaxPool { x, argmax, geom } => {
                let batch = self.nodes[x.0].value.shape()[0];
                let in_len = geom.in_len();
                let out_len = g.len() / batch;
                accumulate(grads, *x, batch * in_len, |d| {
                    for (j, (&gg, &src)) in g.iter().zip(argmax).enumerate() {
                        d[(j / out_len) * in_len + src as usize] += gg;
                    }
                });
            }
            Op::AvgPool { x, geom } => {
                let batch = self.nodes[x.0].value.shape()[0];
                let in_len = geom.in_len();
                let out_len = g.len() / batch;
                accumulate(grads, *x, batch * in_len, |d| {
                    for i in 0..batch {
                        kernels::avg_pool_backward(
                            geom,
                            &g[i * out_len..(i + 1) * out_len],
                            &mut d[i * in_len..(i + 1) * in_len],
                        );
                    }
                });
            }
            Op::Upsample { x, factor } => {
                let s = self.nodes[x.0].value.shape();
                let r = s.len();
                let (h, w) = (s[r - 2], s[r - 1]);
                let planes = self.nodes[x.0].value.numel() / (h * w);
                accumulate(grads, *x, planes * h * w, |d| {
                    kernels::upsample_nearest_backward(g, planes, h, w, *factor, d);
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = probs.len() / labels.len();
                let scale = g[0].to_f64() / labels.len() as f64;
                accumulate(grads, *logits, probs.len(), |d| {
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let target = if c == label { 1.0 } else { 0.0 };
                            d[r * classes + c] += T::from_f64((probs[r * classes + c] - target) * scale);
                        }
                    }
                });
            }
        }
    }
}

/// Sum of `f(x)` over `xs` in f64 with eight interleaved accumulators.
fn lane_sum<T: Scalar>(xs: &[T], f: impl Fn(f64) -> f64) -> f64 {
    let mut acc = [0.0f64; 8];
    let mut it = xs.chunks_exact(8);
    for ch in &mut it {
        for (a, &v) in acc.iter_mut().zip(ch) {
            *a += f(v.to_f64());
        }
    }
    let tail: f64 = it.remainder().iter().map(|&v| f(v.to_f64())).sum();
    acc.iter().sum::<f64>() + tail
}

/// `Σ a·b` in f64 with eight interleaved accumulators.
fn lane_dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let mut acc = [0.0f64; 8];
    let mut ia = a.chunks_exact(8);
    let mut ib = b.chunks_exact(8);
    for (ca, cb) in (&mut ia).zip(&mut ib) {
        for ((s, &x), &y) in acc.iter_mut().zip(ca).zip(cb) {
            *s += x.to_f64() * y.to_f64();
        }
    }
    let tail: f64 = ia.remainder().iter().zip(ib.remainder()).map(|(&x, &y)| x.to_f64() * y.to_f64()).sum();
    acc.iter().sum::<f64>() + tail
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize, f: impl FnOnce(&mut [T])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![T::ZERO; len]);
    f(slot);
}

fn merge<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, d: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => add_into(existing, &d),
        slot @ None => *slot = Some(d),
    }
}
